//! Binary netpbm I/O: P5 (grayscale) and P6 (RGB), maxval up to 255.

use std::path::Path;

use crate::container::write_atomic;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl Pnm {
    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(format_err(path, "truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "bad header"))?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            other => return Err(format_err(path, format!("unsupported magic {other:?} (need P5 or P6)"))),
        };
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| format_err(path, format!("bad {what} {s:?}")))
        };
        let width = num(fields[1], "width")?;
        let height = num(fields[2], "height")?;
        let maxval = num(fields[3], "maxval")?;
        if width == 0 || height == 0 {
            return Err(format_err(path, "empty image"));
        }
        if maxval == 0 || maxval > 255 {
            return Err(format_err(path, format!("maxval {maxval} unsupported (1..=255)")));
        }
        let need = width * height * channels;
        if bytes.len() < pos + need {
            return Err(format_err(path, "truncated raster"));
        }
        Ok(Pnm {
            width,
            height,
            channels,
            maxval: maxval as u16,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.encode())
    }
}
