//! PSNR and SSIM on `[H, W, B]` videos, averaged over frames.

use crate::error::{invalid, shape, Result};
use crate::sci::VideoCube;

/// PSNR reported for a zero-error frame, and the ceiling for any frame.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_dims(a: &VideoCube, b: &VideoCube) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape(format!("videos {:?} and {:?} differ in shape", a.dims(), b.dims())));
    }
    Ok(())
}

/// Per-frame mean squared errors.
pub fn frame_mse(a: &VideoCube, b: &VideoCube) -> Result<Vec<f64>> {
    same_dims(a, b)?;
    let (h, w, nb) = a.dims();
    let mut se = vec![0.0; nb];
    for (pa, pb) in a.frames.data().chunks_exact(nb).zip(b.frames.data().chunks_exact(nb)) {
        for k in 0..nb {
            se[k] += (pa[k] - pb[k]).powi(2);
        }
    }
    Ok(se.into_iter().map(|s| s / (h * w) as f64).collect())
}

/// `10·log10(peak² / MSE_b)` per frame, capped at [`PSNR_CAP`], averaged.
pub fn psnr_peak(a: &VideoCube, b: &VideoCube, peak: f64) -> Result<f64> {
    if peak.is_nan() || peak <= 0.0 {
        return Err(invalid(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = frame_mse(a, b)?;
    let per: Vec<f64> = mse
        .iter()
        .map(|&m| if m == 0.0 { PSNR_CAP } else { (10.0 * (peak * peak / m).log10()).min(PSNR_CAP) })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

pub fn psnr(a: &VideoCube, b: &VideoCube) -> Result<f64> {
    psnr_peak(a, b, 1.0)
}

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` frames with peak 1.
pub fn ssim_frame(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let k = gaussian_kernel();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Gaussian-window SSIM (11×11, σ = 1.5), per-frame mean averaged over frames.
pub fn ssim(a: &VideoCube, b: &VideoCube) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, nb) = a.dims();
    let mut total = 0.0;
    for k in 0..nb {
        total += ssim_frame(a.frame(k).data(), b.frame(k).data(), h, w)?;
    }
    Ok(total / nb as f64)
}
