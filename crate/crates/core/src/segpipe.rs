//! Segmentation head: masked category softmax, bilinear upsampling, argmax
//! prediction and the negative log-likelihood objective.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::pnm::Pnm;
use crate::scalar::Scalar;
use crate::vocab::SegCategorySet;

/// Mask value for pixels excluded from evaluation and loss.
pub const IGNORE: u32 = 255;

/// Per-position distribution over M categories on an `h × w` grid (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    pub probs: Array2<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> ProbabilityMap<T> {
    pub fn new(probs: Array2<T>, h: usize, w: usize) -> Result<Self> {
        if probs.nrows() != h * w {
            return Err(Error::shape(format!(
                "{} probability rows for a {h}x{w} grid",
                probs.nrows()
            )));
        }
        if probs.ncols() == 0 {
            return Err(Error::invalid("probability map has no categories"));
        }
        Ok(ProbabilityMap { probs, h, w })
    }

    pub fn categories(&self) -> usize {
        self.probs.ncols()
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Largest `|row sum − 1|`.
    pub fn simplex_drift(&self) -> f64 {
        self.probs
            .rows()
            .into_iter()
            .map(|r| (r.sum().as_f64() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-wise softmax, shifted by the row max for stability.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Softmax over the category columns only. Column `c` of the result is
/// category `c` in registration order.
pub fn masked_probs<T: Scalar>(
    logits: ArrayView2<'_, T>,
    cats: &SegCategorySet,
    h: usize,
    w: usize,
) -> Result<ProbabilityMap<T>> {
    if cats.is_empty() {
        return Err(Error::invalid("no segmentation categories"));
    }
    if let Some(&bad) = cats.merged_ids.iter().find(|&&id| id as usize >= logits.ncols()) {
        return Err(Error::shape(format!(
            "category row {bad} beyond {} logit columns",
            logits.ncols()
        )));
    }
    let cols: Vec<usize> = cats.merged_ids.iter().map(|&i| i as usize).collect();
    let selected = logits.select(Axis(1), &cols);
    ProbabilityMap::new(softmax_rows(selected.view()), h, w)
}

fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> (usize, usize, f64) {
    let s = (dst as f64 + 0.5) * (src_len as f64 / dst_len as f64) - 0.5;
    let s = s.clamp(0.0, (src_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(src_len - 1);
    (i0, i1, s - i0 as f64)
}

/// Separable bilinear resize with half-pixel centers (align-corners off).
pub fn bilinear_upsample<T: Scalar>(p: &ProbabilityMap<T>, out_h: usize, out_w: usize) -> Result<ProbabilityMap<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!("target size {out_h}x{out_w}")));
    }
    let m = p.categories();
    let ys: Vec<_> = (0..out_h).map(|y| source_coord(y, p.h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| source_coord(x, p.w, out_w)).collect();
    let mut out = Array2::<T>::zeros((out_h * out_w, m));
    // nested lerps, a + t·(b − a), reproduce constant inputs exactly
    let lerp = |a: T, b: T, t: T| a + t * (b - a);
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        let ty = T::lit(fy);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let tx = T::lit(fx);
            let r00 = p.probs.row(y0 * p.w + x0);
            let r01 = p.probs.row(y0 * p.w + x1);
            let r10 = p.probs.row(y1 * p.w + x0);
            let r11 = p.probs.row(y1 * p.w + x1);
            let mut dst = out.row_mut(y * out_w + x);
            for c in 0..m {
                dst[c] = lerp(lerp(r00[c], r01[c], tx), lerp(r10[c], r11[c], tx), ty);
            }
        }
    }
    ProbabilityMap::new(out, out_h, out_w)
}

/// Category labels on a grid; [`IGNORE`] marks excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    pub labels: Array2<u32>,
}

impl SegmentationMask {
    pub fn new(labels: Array2<u32>, m: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= m) {
            return Err(Error::invalid(format!("label {bad} out of range for {m} categories")));
        }
        Ok(SegmentationMask { labels })
    }

    pub fn from_flat(labels: Vec<u32>, h: usize, w: usize, m: usize) -> Result<Self> {
        let labels = Array2::from_shape_vec((h, w), labels).map_err(|e| Error::shape(e.to_string()))?;
        Self::new(labels, m)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.labels.dim()
    }

    pub fn to_pnm(&self) -> Result<Pnm> {
        if self.labels.iter().any(|&l| l > 255) {
            return Err(Error::invalid("mask labels above 255 do not fit a PGM"));
        }
        let (h, w) = self.dim();
        Ok(Pnm {
            width: w,
            height: h,
            channels: 1,
            maxval: 255,
            data: self.labels.iter().map(|&l| l as u8).collect(),
        })
    }

    pub fn read_pgm(path: impl AsRef<Path>, m: usize) -> Result<Self> {
        let path = path.as_ref();
        let pnm = Pnm::read(path)?;
        if pnm.channels != 1 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: "mask must be a P5 graymap".into(),
            });
        }
        Self::from_flat(pnm.data.iter().map(|&b| b as u32).collect(), pnm.height, pnm.width, m)
    }

    /// Writes the P5 mask and, when names are given, a `<path>.names.txt`
    /// sidecar with one `index name` line per category.
    pub fn write_pgm(&self, path: impl AsRef<Path>, names: Option<&[String]>) -> Result<()> {
        let path = path.as_ref();
        self.to_pnm()?.write(path)?;
        if let Some(names) = names {
            let text: String = names.iter().enumerate().map(|(i, n)| format!("{i} {n}\n")).collect();
            write_atomic(sidecar_path(path), text.as_bytes())?;
        }
        Ok(())
    }
}

pub fn sidecar_path(mask: &Path) -> std::path::PathBuf {
    let mut s = mask.as_os_str().to_owned();
    s.push(".names.txt");
    s.into()
}

/// Per-position argmax; ties go to the lowest category index.
pub fn predict<T: Scalar>(p: &ProbabilityMap<T>) -> SegmentationMask {
    let labels: Vec<u32> = p
        .probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect();
    SegmentationMask {
        labels: Array2::from_shape_vec((p.h, p.w), labels).expect("h*w rows"),
    }
}

/// Mean over non-ignored positions of `−ln max(p[y], 1e-12)`.
pub fn seg_loss<T: Scalar>(p: &ProbabilityMap<T>, gt: &SegmentationMask) -> Result<f64> {
    if gt.dim() != (p.h, p.w) {
        return Err(Error::shape(format!(
            "mask {:?} vs probabilities {}x{}",
            gt.dim(),
            p.h,
            p.w
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, &label) in p.probs.rows().into_iter().zip(gt.labels.iter()) {
        if label == IGNORE {
            continue;
        }
        let label = label as usize;
        if label >= p.categories() {
            return Err(Error::invalid(format!("label {label} out of range")));
        }
        total -= row[label].as_f64().max(1e-12).ln();
        count += 1;
    }
    if count == 0 {
        return Err(Error::invalid("every position is ignored"));
    }
    Ok(total / count as f64)
}
