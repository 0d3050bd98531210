//! Per-frame normalization of the log prior depth over static pixels.

use crate::error::{Error, Result};
use crate::raster::{Raster, ValidityMask};

pub const MIN_STATIC_PIXELS: usize = 16;

#[derive(Clone, Debug)]
pub struct NormalizedPrior {
    /// `(log D - mean) / std`, defined on every pixel.
    pub values: Raster<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn normalize_log_prior(depth: &Raster<f64>, mask: &ValidityMask) -> Result<NormalizedPrior> {
    if depth.width() != mask.width() || depth.height() != mask.height() {
        return Err(Error::Dimension("prior depth and mask sizes differ".into()));
    }
    let n = mask.count();
    if n < MIN_STATIC_PIXELS {
        return Err(Error::InsufficientStaticSupport(n));
    }
    let logs: Vec<f64> = depth
        .data()
        .iter()
        .map(|&d| if d > 0.0 { d.ln() } else { f64::NAN })
        .collect();
    let statics = || logs.iter().zip(mask.data()).filter(|(_, &m)| m).map(|(&l, _)| l);
    if statics().any(|l| !l.is_finite()) {
        return Err(Error::NonPositiveDepth(
            depth
                .data()
                .iter()
                .zip(mask.data())
                .find(|(d, &m)| m && !(**d > 0.0))
                .map(|(d, _)| *d)
                .unwrap_or(f64::NAN),
        ));
    }
    let mean = statics().sum::<f64>() / n as f64;
    let var = statics().map(|l| (l - mean).powi(2)).sum::<f64>() / n as f64;
    let tol = 1e-12 * mean.abs().max(1.0);
    let degenerate = var.sqrt() <= tol;
    let std = if degenerate { 1.0 } else { var.sqrt() };
    // dynamic pixels share the static statistics; non-positive values map to 0
    let values = logs
        .iter()
        .map(|&l| match (l - mean) / std {
            v if !v.is_finite() => 0.0,
            v if degenerate && v.abs() <= tol => 0.0,
            v => v,
        })
        .collect();
    Ok(NormalizedPrior {
        values: Raster::from_vec(depth.width(), depth.height(), 1, values)?,
        mean,
        std,
    })
}
