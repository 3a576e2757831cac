//! Reference-based image quality metrics (NMSE, PSNR, SSIM) evaluated on
//! magnitude images over a region-of-interest mask.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tensor::C64;

/// SSIM configuration; defaults follow the original publication: 11×11
/// Gaussian window with σ = 1.5, k1 = 0.01, k2 = 0.03.
#[derive(Clone, Debug)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub nmse: f64,
    pub ssim: f64,
    pub psnr: f64,
    /// True when the images agree exactly on the ROI, so PSNR is unbounded
    /// (the `psnr` field then holds `f64::INFINITY`).
    pub psnr_infinite: bool,
    pub roi_voxels: usize,
}

/// Coil-combined magnitude of a complex image (single channel expected).
pub fn magnitude(x: &Array2<C64>) -> Array2<f64> {
    x.mapv(|z| z.norm())
}

fn check_shapes(x: &Array2<f64>, r: &Array2<f64>, roi: &Array2<bool>) -> Result<()> {
    if x.dim() != r.dim() || x.dim() != roi.dim() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {:?} / {:?} / roi {:?}",
            x.dim(),
            r.dim(),
            roi.dim()
        )));
    }
    Ok(())
}

/// `Σ_roi |x−ref|² / Σ_roi |ref|²` on magnitude images.
pub fn nmse(x: &Array2<f64>, reference: &Array2<f64>, roi: &Array2<bool>) -> Result<f64> {
    check_shapes(x, reference, roi)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((xi, ri), m) in x.iter().zip(reference.iter()).zip(roi.iter()) {
        if *m {
            num += (xi - ri).powi(2);
            den += ri * ri;
        }
    }
    if den == 0.0 {
        return Err(Error::Degenerate("zero-energy reference in ROI".into()));
    }
    Ok(num / den)
}

/// `10·log10(max_roi(ref)² / MSE_roi)`; exact agreement yields
/// `(f64::INFINITY, true)`.
pub fn psnr(
    x: &Array2<f64>,
    reference: &Array2<f64>,
    roi: &Array2<bool>,
) -> Result<(f64, bool)> {
    check_shapes(x, reference, roi)?;
    let mut mse = 0.0;
    let mut peak: f64 = 0.0;
    let mut n = 0usize;
    for ((xi, ri), m) in x.iter().zip(reference.iter()).zip(roi.iter()) {
        if *m {
            mse += (xi - ri).powi(2);
            peak = peak.max(*ri);
            n += 1;
        }
    }
    if n == 0 || peak == 0.0 {
        return Err(Error::Degenerate("empty or zero-peak ROI".into()));
    }
    mse /= n as f64;
    if mse == 0.0 {
        return Ok((f64::INFINITY, true));
    }
    Ok((10.0 * (peak * peak / mse).log10(), false))
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean local SSIM over the ROI with a circular (wrap-around) Gaussian
/// window. Both images share the dynamic range `L = max_roi(ref)`.
pub fn ssim(
    x: &Array2<f64>,
    reference: &Array2<f64>,
    roi: &Array2<bool>,
    cfg: &SsimConfig,
) -> Result<f64> {
    check_shapes(x, reference, roi)?;
    let (nx, ny) = x.dim();
    if cfg.window > nx || cfg.window > ny {
        return Err(Error::InvalidArgument(format!(
            "SSIM window {} exceeds image {}x{}",
            cfg.window, nx, ny
        )));
    }
    let n_roi = roi.iter().filter(|m| **m).count();
    if n_roi == 0 {
        return Err(Error::Degenerate("empty ROI".into()));
    }
    let peak = reference
        .iter()
        .zip(roi.iter())
        .filter(|(_, m)| **m)
        .map(|(v, _)| *v)
        .fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Degenerate("zero-peak reference in ROI".into()));
    }
    let c1 = (cfg.k1 * peak).powi(2);
    let c2 = (cfg.k2 * peak).powi(2);
    let w = gaussian_window(cfg.window, cfg.sigma);
    let half = (cfg.window - 1) / 2;
    let mut acc = 0.0;
    for i in 0..nx {
        for j in 0..ny {
            if !roi[[i, j]] {
                continue;
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (di, wi) in w.iter().enumerate() {
                let ii = (i + nx + di - half) % nx;
                for (dj, wj) in w.iter().enumerate() {
                    let jj = (j + ny + dj - half) % ny;
                    let wt = wi * wj;
                    let (a, b) = (x[[ii, jj]], reference[[ii, jj]]);
                    mx += wt * a;
                    my += wt * b;
                    sxx += wt * a * a;
                    syy += wt * b * b;
                    sxy += wt * a * b;
                }
            }
            sxx -= mx * mx;
            syy -= my * my;
            sxy -= mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
                / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        }
    }
    Ok(acc / n_roi as f64)
}

/// Full report on a pair of magnitude images.
pub fn evaluate(
    x: &Array2<f64>,
    reference: &Array2<f64>,
    roi: &Array2<bool>,
    cfg: &SsimConfig,
) -> Result<MetricsReport> {
    let (p, inf) = psnr(x, reference, roi)?;
    Ok(MetricsReport {
        nmse: nmse(x, reference, roi)?,
        ssim: ssim(x, reference, roi, cfg)?,
        psnr: p,
        psnr_infinite: inf,
        roi_voxels: roi.iter().filter(|m| **m).count(),
    })
}
