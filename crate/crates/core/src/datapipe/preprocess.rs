use ndarray::Array2;

use super::MultiSeqSlice;
use crate::error::{Error, Result};
use crate::label::LabelMask;
use crate::tps::{sample_bilinear, sample_nearest};

pub const DEFAULT_SPACING_MM: f64 = 1.5;

/// Centre of mass of the reference myocardium, or the image centre when the
/// reference has no labels or an empty myocardium.
pub fn heart_center(slice: &MultiSeqSlice) -> (f64, f64) {
    let (h, w) = slice.dim();
    let fallback = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let Some(lab) = slice.labels.get(&slice.cri) else { return fallback };
    let (mut n, mut sr, mut sc) = (0usize, 0.0, 0.0);
    for ((r, c), &m) in lab.myocardium().indexed_iter() {
        if m {
            n += 1;
            sr += r as f64;
            sc += c as f64;
        }
    }
    if n == 0 {
        fallback
    } else {
        (sr / n as f64, sc / n as f64)
    }
}

/// Zero-mean, unit-variance copy of `img` (population statistics).
pub fn zscore(img: &Array2<f32>) -> Result<Array2<f32>> {
    let n = img.len() as f64;
    let mean = img.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = img.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    if !(var.sqrt() > 1e-8 * mean.abs().max(1.0)) {
        return Err(Error::ZeroVariance);
    }
    let sd = var.sqrt();
    Ok(img.mapv(|v| ((v as f64 - mean) / sd) as f32))
}

/// Crops a `target_size` window centred on the heart, resampled to
/// `target_spacing` mm, and Z-scores every image over its crop.
pub fn crop_resample_normalize(
    slice: &MultiSeqSlice,
    target_size: (usize, usize),
    target_spacing: f64,
) -> Result<MultiSeqSlice> {
    if target_size.0 == 0 || target_size.1 == 0 || !(target_spacing > 0.0) {
        return Err(Error::Shape(format!("invalid target {target_size:?} at {target_spacing} mm")));
    }
    slice.validate()?;
    let (cr, cc) = heart_center(slice);
    let (th, tw) = target_size;
    let (sr, sc) = (target_spacing / slice.spacing.0, target_spacing / slice.spacing.1);
    let src = |r: usize, c: usize| {
        (cr + (r as f64 - (th as f64 - 1.0) / 2.0) * sr, cc + (c as f64 - (tw as f64 - 1.0) / 2.0) * sc)
    };
    let mut out = slice.clone();
    for (seq, img) in &slice.images {
        let resampled = Array2::from_shape_fn(target_size, |(r, c)| {
            let (y, x) = src(r, c);
            sample_bilinear(img.view(), y, x)
        });
        out.images.insert(*seq, zscore(&resampled)?);
    }
    for (seq, lab) in &slice.labels {
        let resampled = Array2::from_shape_fn(target_size, |(r, c)| {
            let (y, x) = src(r, c);
            sample_nearest(lab.view(), y, x, 0)
        });
        out.labels.insert(*seq, LabelMask::new(resampled)?);
    }
    out.spacing = (target_spacing, target_spacing);
    Ok(out)
}
