//! Frame-to-frame motion: a pyramidal Horn–Schunck estimator, the flow
//! stack consumed by the walk predictor, and flow file import/export.
//!
//! A flow `F` from frame `a` to frame `b` satisfies `b(p + F(p)) ≈ a(p)`
//! with `F = (u, v)` = (horizontal, vertical) displacement in pixels.

use std::path::Path;

use mady_tensor::{io as tns, BilinearTap, Tensor};
use rayon::prelude::*;

use crate::error::{invalid, shape, Error, Result};
use crate::sci::VideoCube;

/// Smallest pyramid level side length.
pub const PYRAMID_MIN: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams {
    pub levels: usize,
    /// Smoothness weight on the 0–255 intensity scale.
    pub alpha: f64,
    pub iterations: usize,
    /// Re-linearisations (warps) per pyramid level.
    pub warps: usize,
    pub max_displacement: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            alpha: 10.0,
            iterations: 50,
            warps: 2,
            max_displacement: 8.0,
        }
    }
}

/// Dense `[H, W, 2]` displacement field, channels `(u, v)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub uv: Tensor<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            uv: Tensor::zeros([h, w, 2]),
        }
    }

    pub fn h(&self) -> usize {
        self.uv.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.uv.shape()[1]
    }

    /// `(u, v)` at a pixel.
    pub fn at(&self, i: usize, j: usize) -> (f64, f64) {
        let p = (i * self.w() + j) * 2;
        (self.uv[p], self.uv[p + 1])
    }

    /// Mean `(u, v)` over pixels at least `margin` from the border.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for i in margin..self.h().saturating_sub(margin) {
            for j in margin..self.w().saturating_sub(margin) {
                let (u, v) = self.at(i, j);
                su += u;
                sv += v;
                n += 1.0;
            }
        }
        (su / n, sv / n)
    }
}

/// `B` fields: `F_b` = flow(b → b+1) for `b < B`, `F_B` = flow(B → B−1).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack {
    pub fields: Vec<FlowField>,
}

impl FlowStack {
    pub fn zeros(h: usize, w: usize, b: usize) -> Self {
        Self {
            fields: (0..b).map(|_| FlowField::zeros(h, w)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let f = &self.fields[0];
        (f.h(), f.w(), self.fields.len())
    }

    /// `[H, W, 2, B]`, the on-disk layout.
    pub fn to_tensor(&self) -> Tensor<f64> {
        let (h, w, b) = self.dims();
        let mut out = Tensor::zeros([h, w, 2, b]);
        for (k, f) in self.fields.iter().enumerate() {
            for p in 0..h * w {
                for c in 0..2 {
                    out[(p * 2 + c) * b + k] = f.uv[p * 2 + c];
                }
            }
        }
        out
    }

    pub fn from_tensor(t: &Tensor<f64>, max_displacement: f64) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[2] != 2 || s[3] == 0 {
            return Err(shape(format!("flow stack must be [H, W, 2, B], got {s:?}")));
        }
        if !t.is_finite() {
            return Err(invalid("flow stack holds non-finite values"));
        }
        if let Some(bad) = t.data().iter().find(|v| v.abs() > max_displacement) {
            return Err(invalid(format!("flow magnitude {bad} exceeds bound {max_displacement}")));
        }
        let (h, w, b) = (s[0], s[1], s[3]);
        let fields = (0..b)
            .map(|k| {
                let data = (0..h * w * 2).map(|i| t[i * b + k]).collect();
                FlowField {
                    uv: Tensor::from_vec([h, w, 2], data).expect("flow extents"),
                }
            })
            .collect();
        Ok(Self { fields })
    }
}

/// Single-channel working image.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        Self { h, w, data }
    }

    #[inline]
    fn get(&self, i: isize, j: isize) -> f64 {
        let i = i.clamp(0, self.h as isize - 1) as usize;
        let j = j.clamp(0, self.w as isize - 1) as usize;
        self.data[i * self.w + j]
    }

    /// Separable [1 4 6 4 1]/16 blur, then keep every other sample.
    fn downsample(&self) -> Plane {
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0; self.h * self.w];
        for i in 0..self.h {
            for j in 0..self.w {
                tmp[i * self.w + j] = (0..5).map(|k| K[k] * self.get(i as isize, j as isize + k as isize - 2)).sum();
            }
        }
        let tmp = Plane::new(self.h, self.w, tmp);
        let (h2, w2) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut out = vec![0.0; h2 * w2];
        for i in 0..h2 {
            for j in 0..w2 {
                out[i * w2 + j] = (0..5)
                    .map(|k| K[k] * tmp.get(2 * i as isize + k as isize - 2, 2 * j as isize))
                    .sum();
            }
        }
        Plane::new(h2, w2, out)
    }

    fn sample(&self, row: f64, col: f64) -> f64 {
        let tap = BilinearTap::new(row, col, self.h, self.w);
        let wts = tap.weights();
        tap.corners(self.w).iter().zip(wts).map(|(&c, wt)| wt * self.data[c]).sum()
    }
}

/// Backward warp: `out(p) = frame(p + flow(p))`, bilinear, border-clamped.
pub fn warp(frame: &Tensor<f64>, flow: &FlowField) -> Result<Tensor<f64>> {
    let s = frame.shape();
    if s.len() != 2 || s[0] != flow.h() || s[1] != flow.w() {
        return Err(shape(format!("frame {s:?} vs flow {}x{}", flow.h(), flow.w())));
    }
    let plane = Plane::new(s[0], s[1], frame.data().to_vec());
    let out = (0..s[0] * s[1])
        .map(|p| {
            let (i, j) = (p / s[1], p % s[1]);
            let (u, v) = flow.at(i, j);
            plane.sample(i as f64 + v, j as f64 + u)
        })
        .collect();
    Ok(Tensor::from_vec(s.to_vec(), out)?)
}

fn effective_levels(h: usize, w: usize, requested: usize) -> usize {
    let mut levels = requested.max(1);
    while levels > 1 && (h.min(w) >> (levels - 1)) < PYRAMID_MIN {
        levels -= 1;
    }
    levels
}

fn upsample_flow(u: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let src = Plane::new(h, w, u.to_vec());
    let (sy, sx) = (h as f64 / th as f64, w as f64 / tw as f64);
    let mut out = vec![0.0; th * tw];
    for i in 0..th {
        for j in 0..tw {
            let r = (i as f64 + 0.5) * sy - 0.5;
            let c = (j as f64 + 0.5) * sx - 0.5;
            out[i * tw + j] = src.sample(r, c) * 2.0;
        }
    }
    out
}

/// Horn–Schunck at one level, linearised around `(u, v)` and refined in place.
fn refine_level(a: &Plane, b: &Plane, u: &mut [f64], v: &mut [f64], params: &FlowParams) {
    let (h, w) = (a.h, a.w);
    let alpha2 = params.alpha * params.alpha;
    for _ in 0..params.warps.max(1) {
        let mut warped = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                warped[p] = b.sample(i as f64 + v[p], j as f64 + u[p]);
            }
        }
        let bw = Plane::new(h, w, warped);
        let mut ix = vec![0.0; h * w];
        let mut iy = vec![0.0; h * w];
        let mut it = vec![0.0; h * w];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let p = i as usize * w + j as usize;
                ix[p] = 0.25 * (a.get(i, j + 1) - a.get(i, j - 1) + bw.get(i, j + 1) - bw.get(i, j - 1));
                iy[p] = 0.25 * (a.get(i + 1, j) - a.get(i - 1, j) + bw.get(i + 1, j) - bw.get(i - 1, j));
                it[p] = bw.get(i, j) - a.get(i, j);
            }
        }
        let (u0, v0) = (u.to_vec(), v.to_vec());
        let mut ubar = vec![0.0; h * w];
        let mut vbar = vec![0.0; h * w];
        for _ in 0..params.iterations {
            local_average(u, h, w, &mut ubar);
            local_average(v, h, w, &mut vbar);
            for p in 0..h * w {
                let resid = ix[p] * (ubar[p] - u0[p]) + iy[p] * (vbar[p] - v0[p]) + it[p];
                let k = resid / (alpha2 + ix[p] * ix[p] + iy[p] * iy[p]);
                u[p] = ubar[p] - ix[p] * k;
                v[p] = vbar[p] - iy[p] * k;
            }
        }
    }
}

/// Horn–Schunck neighbourhood mean: 1/6 edge neighbours, 1/12 diagonals.
fn local_average(f: &[f64], h: usize, w: usize, out: &mut [f64]) {
    let plane = Plane::new(h, w, f.to_vec());
    for i in 0..h as isize {
        for j in 0..w as isize {
            let edge = plane.get(i - 1, j) + plane.get(i + 1, j) + plane.get(i, j - 1) + plane.get(i, j + 1);
            let diag = plane.get(i - 1, j - 1) + plane.get(i - 1, j + 1) + plane.get(i + 1, j - 1) + plane.get(i + 1, j + 1);
            out[i as usize * w + j as usize] = edge / 6.0 + diag / 12.0;
        }
    }
}

/// Pyramidal Horn–Schunck estimate of the flow from `frame_a` to `frame_b`.
pub fn estimate_flow(frame_a: &Tensor<f64>, frame_b: &Tensor<f64>, params: &FlowParams) -> Result<FlowField> {
    let s = frame_a.shape();
    if s.len() != 2 || frame_b.shape() != s {
        return Err(shape(format!("flow frames {:?} vs {:?}", s, frame_b.shape())));
    }
    let (h, w) = (s[0], s[1]);
    let levels = effective_levels(h, w, params.levels);
    if levels < params.levels {
        log::warn!(
            "{h}x{w} frames support only {levels} of {} pyramid levels (minimum side {PYRAMID_MIN})",
            params.levels
        );
    }
    let scale = |t: &Tensor<f64>| Plane::new(h, w, t.data().iter().map(|v| v * 255.0).collect());
    let mut pa = vec![scale(frame_a)];
    let mut pb = vec![scale(frame_b)];
    for _ in 1..levels {
        let (na, nb) = (pa.last().unwrap().downsample(), pb.last().unwrap().downsample());
        pa.push(na);
        pb.push(nb);
    }
    let coarsest = &pa[levels - 1];
    let mut u = vec![0.0; coarsest.h * coarsest.w];
    let mut v = u.clone();
    let (mut ch, mut cw) = (coarsest.h, coarsest.w);
    for lvl in (0..levels).rev() {
        let (a, b) = (&pa[lvl], &pb[lvl]);
        if (a.h, a.w) != (ch, cw) {
            u = upsample_flow(&u, ch, cw, a.h, a.w);
            v = upsample_flow(&v, ch, cw, a.h, a.w);
            (ch, cw) = (a.h, a.w);
        }
        refine_level(a, b, &mut u, &mut v, params);
    }
    let md = params.max_displacement;
    let mut uv = Vec::with_capacity(h * w * 2);
    for (a, b) in u.iter().zip(&v) {
        uv.push(a.clamp(-md, md));
        uv.push(b.clamp(-md, md));
    }
    Ok(FlowField {
        uv: Tensor::from_vec([h, w, 2], uv)?,
    })
}

/// Forward flows between consecutive coarse frames; the last frame's flow
/// points back to its predecessor.
pub fn build_flow_stack(coarse: &VideoCube, params: &FlowParams) -> Result<FlowStack> {
    let b = coarse.b();
    if b < 2 {
        return Err(invalid("motion needs at least two frames"));
    }
    let frames: Vec<Tensor<f64>> = (0..b).map(|k| coarse.frame(k)).collect();
    let fields = (0..b)
        .into_par_iter()
        .map(|k| {
            if k + 1 < b {
                estimate_flow(&frames[k], &frames[k + 1], params)
            } else {
                estimate_flow(&frames[b - 1], &frames[b - 2], params)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FlowStack { fields })
}

pub fn export_flow_stack(stack: &FlowStack, path: impl AsRef<Path>) -> Result<()> {
    tns::save(&stack.to_tensor(), path)?;
    Ok(())
}

/// Load an `[H, W, 2, B]` `.tns` flow stack, validating rank, finiteness and
/// magnitude bound.
pub fn import_flow_stack(path: impl AsRef<Path>, max_displacement: f64) -> Result<FlowStack> {
    let path = path.as_ref();
    let t: Tensor<f64> = tns::load(path).map_err(|e| Error::File {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    FlowStack::from_tensor(&t, max_displacement)
}

/// HSV colour coding of a flow field: hue = direction, value = magnitude
/// relative to `max_magnitude` (or the field maximum when `None`).
pub fn flow_to_rgb(flow: &FlowField, max_magnitude: Option<f64>) -> image::RgbImage {
    let (h, w) = (flow.h(), flow.w());
    let peak = max_magnitude.unwrap_or_else(|| {
        (0..h * w)
            .map(|p| {
                let (u, v) = flow.at(p / w, p % w);
                u.hypot(v)
            })
            .fold(0.0, f64::max)
    });
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (u, v) = flow.at(y as usize, x as usize);
        let mag = if peak > 0.0 { (u.hypot(v) / peak).min(1.0) } else { 0.0 };
        let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
        image::Rgb(hsv_to_rgb(hue, 1.0, mag))
    })
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|ch| ((ch + m) * 255.0).round() as u8)
}
