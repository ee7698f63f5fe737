//! Stand-in image tokenizer: non-overlapping patches flattened to feature rows,
//! then a linear projection to the model width.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::pnm::Pnm;
use crate::rng::trunc_normal;
use crate::scalar::Scalar;

/// Row-major raster with interleaved channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> RasterImage<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("empty image"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("{channels} channels (need 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(RasterImage {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_pnm(pnm: &Pnm) -> Result<Self> {
        let scale = T::lit(pnm.maxval as f64);
        let data = pnm.data.iter().map(|&b| T::lit(b as f64) / scale).collect();
        Self::new(pnm.height, pnm.width, pnm.channels, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_pnm(&Pnm::read(path)?)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Spatially flattened features: `h·w` rows of width C, row-major over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub rows: Array2<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(rows: Array2<T>, h: usize, w: usize) -> Result<Self> {
        if rows.nrows() != h * w {
            return Err(Error::shape(format!(
                "{} feature rows for a {h}x{w} grid",
                rows.nrows()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite feature value".into()));
        }
        Ok(FeatureMap { rows, h, w })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }
}

/// Splits the image into P×P patches (zero padding at the bottom/right). Each
/// row holds one patch, pixels row-major with channels interleaved.
pub fn patchify<T: Scalar>(img: &RasterImage<T>, patch: usize) -> Result<FeatureMap<T>> {
    if patch == 0 {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    if img.height == 0 || img.width == 0 {
        return Err(Error::invalid("empty image"));
    }
    let gh = img.height.div_ceil(patch);
    let gw = img.width.div_ceil(patch);
    let c = img.channels;
    let width = patch * patch * c;
    let mut rows = Array2::zeros((gh * gw, width));
    for py in 0..gh {
        for px in 0..gw {
            let mut row = rows.row_mut(py * gw + px);
            for dy in 0..patch {
                let y = py * patch + dy;
                if y >= img.height {
                    break;
                }
                for dx in 0..patch {
                    let x = px * patch + dx;
                    if x >= img.width {
                        break;
                    }
                    for ch in 0..c {
                        row[(dy * patch + dx) * c + ch] = img.get(y, x, ch);
                    }
                }
            }
        }
    }
    FeatureMap::new(rows, gh, gw)
}

/// `features · weight + bias`, bias broadcast over rows.
pub fn project<T: Scalar>(fm: &FeatureMap<T>, weight: &Array2<T>, bias: &Array1<T>) -> Result<Array2<T>> {
    if fm.rows.ncols() != weight.nrows() || weight.ncols() != bias.len() {
        return Err(Error::shape(format!(
            "project: features {:?}, weight {:?}, bias {}",
            fm.rows.dim(),
            weight.dim(),
            bias.len()
        )));
    }
    Ok(fm.rows.dot(weight) + bias)
}

/// Frozen patch projection used to turn real rasters into image tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    pub patch: usize,
    pub channels: usize,
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Backbone<T> {
    pub fn init<R: Rng + ?Sized>(patch: usize, channels: usize, dim: usize, rng: &mut R) -> Self {
        let c = patch * patch * channels;
        let std = 1.0 / (c as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((c, dim), || T::lit(trunc_normal(rng, std)));
        Backbone {
            patch,
            channels,
            weight,
            bias: Array1::zeros(dim),
        }
    }

    /// Returns the raw patch features (for post-processing) and their projection.
    pub fn embed(&self, img: &RasterImage<T>) -> Result<(FeatureMap<T>, Array2<T>)> {
        if img.channels != self.channels {
            return Err(Error::shape(format!(
                "backbone expects {} channels, image has {}",
                self.channels, img.channels
            )));
        }
        let fm = patchify(img, self.patch)?;
        let tokens = project(&fm, &self.weight, &self.bias)?;
        Ok((fm, tokens))
    }
}
