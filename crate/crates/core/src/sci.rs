//! Coded-exposure forward model: masks, measurement synthesis, re-masking,
//! and a training-free GAP-TV backbone.
//!
//! Video cubes are `[H, W, B]` row-major with the frame index fastest.

use mady_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, shape, Result};

/// Guard for mask normalisations.
pub const MASK_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    GroundTruth,
    Coarse,
    Fine,
}

/// `B` grayscale frames of `H × W`, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoCube {
    pub frames: Tensor<f64>,
    pub role: Role,
}

impl VideoCube {
    pub fn new(frames: Tensor<f64>, role: Role) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(shape(format!("video cube must be [H, W, B] with non-zero extents, got {s:?}")));
        }
        Ok(Self { frames, role })
    }

    pub fn h(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn b(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h(), self.w(), self.b())
    }

    /// Frame `b` as an `[H, W]` tensor.
    pub fn frame(&self, b: usize) -> Tensor<f64> {
        let nb = self.b();
        let data = self.frames.data().iter().skip(b).step_by(nb).copied().collect();
        Tensor::from_vec([self.h(), self.w()], data).expect("frame extents")
    }

    pub fn from_frames(frames: &[Tensor<f64>], role: Role) -> Result<Self> {
        let first = frames.first().ok_or_else(|| invalid("no frames"))?;
        let (h, w) = (first.shape()[0], first.shape()[1]);
        let b = frames.len();
        let mut data = vec![0.0; h * w * b];
        for (k, f) in frames.iter().enumerate() {
            if f.shape() != [h, w] {
                return Err(shape(format!("frame {k} is {:?}, expected [{h}, {w}]", f.shape())));
            }
            for (p, &v) in f.data().iter().enumerate() {
                data[p * b + k] = v;
            }
        }
        Self::new(Tensor::from_vec([h, w, b], data)?, role)
    }

    /// Copy with values clipped to `[0, 1]`, for export.
    pub fn clipped(&self) -> Self {
        Self {
            frames: self.frames.map(|v| v.clamp(0.0, 1.0)),
            role: self.role,
        }
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Binary,
    Real,
}

/// `B` coding patterns stored as `[H, W, B]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub masks: Tensor<f64>,
    pub kind: MaskKind,
}

impl MaskSet {
    pub fn new(masks: Tensor<f64>, kind: MaskKind) -> Result<Self> {
        let s = masks.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(shape(format!("mask set must be [H, W, B], got {s:?}")));
        }
        if kind == MaskKind::Binary && masks.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid("binary mask set holds values outside {0, 1}"));
        }
        if !masks.is_finite() {
            return Err(invalid("mask set holds non-finite values"));
        }
        Ok(Self { masks, kind })
    }

    /// Infer the kind from the values.
    pub fn from_tensor(masks: Tensor<f64>) -> Result<Self> {
        let kind = if masks.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            MaskKind::Binary
        } else {
            MaskKind::Real
        };
        Self::new(masks, kind)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.masks.shape();
        (s[0], s[1], s[2])
    }

    /// `Σ_b M_b^p` per pixel.
    pub fn power_sum(&self, p: i32) -> Vec<f64> {
        let b = self.dims().2;
        self.masks.data().chunks_exact(b).map(|px| px.iter().map(|m| m.powi(p)).sum()).collect()
    }
}

/// The single coded frame `Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub y: Tensor<f64>,
    pub noise_sigma: f64,
}

impl Measurement {
    pub fn new(y: Tensor<f64>, noise_sigma: f64) -> Result<Self> {
        if y.ndim() != 2 {
            return Err(shape(format!("measurement must be [H, W], got {:?}", y.shape())));
        }
        if !y.is_finite() {
            return Err(invalid("measurement holds non-finite values"));
        }
        if noise_sigma < 0.0 {
            return Err(invalid("noise_sigma must be >= 0"));
        }
        Ok(Self { y, noise_sigma })
    }
}

/// Bernoulli(`density`) binary masks, reproducible from `seed`.
pub fn generate_masks(h: usize, w: usize, b: usize, seed: u64, density: f64) -> Result<MaskSet> {
    if h == 0 || w == 0 || b == 0 {
        return Err(invalid(format!("mask dimensions must be non-zero, got {h}x{w}x{b}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(invalid(format!("mask density must lie in (0, 1], got {density}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..h * w * b)
        .map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 })
        .collect();
    MaskSet::new(Tensor::from_vec([h, w, b], data)?, MaskKind::Binary)
}

fn check_pair(video: &VideoCube, masks: &MaskSet) -> Result<()> {
    if video.dims() != masks.dims() {
        return Err(shape(format!("video {:?} vs masks {:?}", video.dims(), masks.dims())));
    }
    Ok(())
}

/// `Y = Σ_b X_b ⊙ M_b + Z`, `Z ~ N(0, σ²)` i.i.d. drawn from `seed`.
pub fn forward_measure(video: &VideoCube, masks: &MaskSet, noise_sigma: f64, seed: u64) -> Result<Measurement> {
    check_pair(video, masks)?;
    if noise_sigma < 0.0 || !noise_sigma.is_finite() {
        return Err(invalid(format!("noise_sigma must be finite and >= 0, got {noise_sigma}")));
    }
    let (h, w, b) = video.dims();
    let mut y: Vec<f64> = video
        .frames
        .data()
        .chunks_exact(b)
        .zip(masks.masks.data().chunks_exact(b))
        .map(|(x, m)| x.iter().zip(m).map(|(a, c)| a * c).sum())
        .collect();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| invalid(e.to_string()))?;
        y.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    Measurement::new(Tensor::from_vec([h, w], y)?, noise_sigma)
}

/// `X^re_b = Y − Σ_{t≠b} X^co_t ⊙ M_t`, returned as `[H, W, B]`.
pub fn remask(measurement: &Measurement, coarse: &VideoCube, masks: &MaskSet) -> Result<Tensor<f64>> {
    check_pair(coarse, masks)?;
    let (h, w, b) = coarse.dims();
    if measurement.y.shape() != [h, w] {
        return Err(shape(format!("measurement {:?} vs video {h}x{w}", measurement.y.shape())));
    }
    let mut out = Vec::with_capacity(h * w * b);
    for ((x, m), &y) in coarse
        .frames
        .data()
        .chunks_exact(b)
        .zip(masks.masks.data().chunks_exact(b))
        .zip(measurement.y.data())
    {
        for k in 0..b {
            let others: f64 = (0..b).filter(|&t| t != k).map(|t| x[t] * m[t]).sum();
            out.push(y - others);
        }
    }
    Ok(Tensor::from_vec([h, w, b], out)?)
}

/// RMSE between the noiseless measurement of `video` and `measurement`.
pub fn measurement_consistency(video: &VideoCube, masks: &MaskSet, measurement: &Measurement) -> Result<f64> {
    let pred = forward_measure(video, masks, 0.0, 0)?;
    if pred.y.shape() != measurement.y.shape() {
        return Err(shape(format!("measurement {:?} vs video {:?}", measurement.y.shape(), pred.y.shape())));
    }
    let n = pred.y.len() as f64;
    let sse: f64 = pred
        .y
        .data()
        .iter()
        .zip(measurement.y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum();
    Ok((sse / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapTvParams {
    pub iterations: usize,
    pub tv_weight: f64,
    pub tv_inner: usize,
}

impl Default for GapTvParams {
    fn default() -> Self {
        Self {
            iterations: 50,
            tv_weight: 0.07,
            tv_inner: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GapTvOutput {
    pub video: VideoCube,
    /// Measurement-consistency RMSE after each iteration.
    pub trace: Vec<f64>,
}

/// Generalized alternating projection with anisotropic TV denoising.
pub fn gap_tv_reconstruct(measurement: &Measurement, masks: &MaskSet, params: &GapTvParams) -> Result<GapTvOutput> {
    if params.iterations == 0 {
        return Err(invalid("gap-tv needs at least one iteration"));
    }
    let (h, w, b) = masks.dims();
    if measurement.y.shape() != [h, w] {
        return Err(shape(format!("measurement {:?} vs masks {h}x{w}", measurement.y.shape())));
    }
    let norm = masks.power_sum(2);
    let uncovered = norm.iter().filter(|&&s| s == 0.0).count();
    if uncovered > 0 {
        log::warn!("{uncovered} pixels are never exposed by any mask; their normalisation is epsilon-guarded");
    }
    let m = masks.masks.data();
    let y = measurement.y.data();
    let mut x = vec![0.0; h * w * b];
    let mut trace = Vec::with_capacity(params.iterations);
    for _ in 0..params.iterations {
        // data step: x ← x + Mᵀ (Y − A x) / ΣM²
        for p in 0..h * w {
            let px = &mut x[p * b..(p + 1) * b];
            let mk = &m[p * b..(p + 1) * b];
            let ax: f64 = px.iter().zip(mk).map(|(a, c)| a * c).sum();
            let r = (y[p] - ax) / norm[p].max(MASK_EPS);
            for (v, c) in px.iter_mut().zip(mk) {
                *v += c * r;
            }
        }
        if params.tv_weight > 0.0 {
            for k in 0..b {
                let mut frame: Vec<f64> = (0..h * w).map(|p| x[p * b + k]).collect();
                tv_denoise(&mut frame, h, w, params.tv_weight, params.tv_inner);
                for (p, v) in frame.into_iter().enumerate() {
                    x[p * b + k] = v;
                }
            }
        }
        let video = VideoCube::new(Tensor::from_vec([h, w, b], x.clone())?, Role::Coarse)?;
        trace.push(measurement_consistency(&video, masks, measurement)?);
    }
    Ok(GapTvOutput {
        video: VideoCube::new(Tensor::from_vec([h, w, b], x)?, Role::Coarse)?,
        trace,
    })
}

/// Anisotropic TV denoising of one frame by projected gradient on the dual:
/// `p ← clip(p + τ∇(div p − f/λ), −1, 1)`, `u = f − λ div p`.
pub fn tv_denoise(f: &mut [f64], h: usize, w: usize, lambda: f64, iterations: usize) {
    if lambda <= 0.0 || iterations == 0 {
        return;
    }
    const STEP: f64 = 0.25;
    let n = h * w;
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut div = vec![0.0; n];
    let divergence = |px: &[f64], py: &[f64], div: &mut [f64]| {
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let dx = if j + 1 < w { px[p] } else { 0.0 } - if j > 0 { px[p - 1] } else { 0.0 };
                let dy = if i + 1 < h { py[p] } else { 0.0 } - if i > 0 { py[p - w] } else { 0.0 };
                div[p] = dx + dy;
            }
        }
    };
    for _ in 0..iterations {
        divergence(&px, &py, &mut div);
        let z: Vec<f64> = div.iter().zip(f.iter()).map(|(d, v)| d - v / lambda).collect();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let gx = if j + 1 < w { z[p + 1] - z[p] } else { 0.0 };
                let gy = if i + 1 < h { z[p + w] - z[p] } else { 0.0 };
                px[p] = (px[p] + STEP * gx).clamp(-1.0, 1.0);
                py[p] = (py[p] + STEP * gy).clamp(-1.0, 1.0);
            }
        }
    }
    divergence(&px, &py, &mut div);
    for (v, d) in f.iter_mut().zip(&div) {
        *v -= lambda * d;
    }
}
