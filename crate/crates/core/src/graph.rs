//! Spatio-temporal neighbourhoods: uniform cross-scale initial sampling,
//! motion-aware walks predicted by a convolution over features and flow,
//! and bilinear feature sampling at the walked positions.
//!
//! Positions are `(row, col)` pairs. Walk tensors are laid out as
//! `[H, W, B, S, K, 2]`: for query pixel `(row, col)` and target frame `b`,
//! scale `s` and base offset `k`. Every query frame at `(row, col)` shares
//! the same walks toward frame `b`.

use std::io::Write;

use mady_tensor::{kernels, Real, Result as TResult, Tape, Tensor, Var};

use crate::error::{invalid, shape, Result};
use crate::motion::FlowStack;

/// Dilation rates and the base neighbour pattern replicated at each rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplingGrid {
    pub dilations: Vec<usize>,
    pub base_offsets: Vec<(isize, isize)>,
}

impl Default for SamplingGrid {
    fn default() -> Self {
        Self::new(vec![1, 7, 13], Self::ring3x3()).expect("default grid")
    }
}

impl SamplingGrid {
    pub fn new(dilations: Vec<usize>, base_offsets: Vec<(isize, isize)>) -> Result<Self> {
        if dilations.is_empty() || base_offsets.is_empty() {
            return Err(invalid("sampling grid needs at least one dilation and one offset"));
        }
        if dilations[0] == 0 || dilations.windows(2).any(|p| p[1] <= p[0]) {
            return Err(invalid(format!("dilations must be positive and strictly increasing, got {dilations:?}")));
        }
        Ok(Self {
            dilations,
            base_offsets,
        })
    }

    /// The 3×3 pattern `{-1, 0, 1}²` in row-major order.
    pub fn ring3x3() -> Vec<(isize, isize)> {
        (-1..=1).flat_map(|r| (-1..=1).map(move |c| (r, c))).collect()
    }

    pub fn scales(&self) -> usize {
        self.dilations.len()
    }

    pub fn k(&self) -> usize {
        self.base_offsets.len()
    }

    /// Bound on walk magnitude: twice the largest dilation.
    pub fn walk_clamp(&self) -> f64 {
        2.0 * *self.dilations.last().unwrap() as f64
    }

    /// `(row, col)` displacement of scale `s`, neighbour `k` before walking.
    pub fn base(&self, s: usize, k: usize) -> (f64, f64) {
        let d = self.dilations[s] as f64;
        let (r, c) = self.base_offsets[k];
        (d * r as f64, d * c as f64)
    }
}

/// Which parts of the graph construction are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    /// Dynamic walks; off forces zero walks.
    pub dw: bool,
    /// Cross-scale sampling; off keeps dilation 1 only.
    pub cs: bool,
    /// Motion awareness; off feeds zero flow to the walk predictor.
    pub ma: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const BASE: Ablation = Ablation {
        dw: false,
        cs: false,
        ma: false,
    };
    pub const DW: Ablation = Ablation {
        dw: true,
        cs: false,
        ma: false,
    };
    pub const DW_CS: Ablation = Ablation {
        dw: true,
        cs: true,
        ma: false,
    };
    pub const FULL: Ablation = Ablation {
        dw: true,
        cs: true,
        ma: true,
    };

    /// The ablation ladder, baseline first.
    pub fn ladder() -> [(&'static str, Ablation); 4] {
        [
            ("BaseNet", Self::BASE),
            ("+DW", Self::DW),
            ("+DW+CS", Self::DW_CS),
            ("+DW+CS+MA", Self::FULL),
        ]
    }

    /// The grid actually sampled under this ablation.
    pub fn effective_grid(&self, grid: &SamplingGrid) -> SamplingGrid {
        if self.cs {
            grid.clone()
        } else {
            SamplingGrid {
                dilations: vec![1],
                base_offsets: grid.base_offsets.clone(),
            }
        }
    }
}

/// Initial positions for a query at `query = (row, col)`: for every frame,
/// scale and base offset, `query + d_s · o_k`. The same spatial pattern is
/// used in all `b` frames. Ordered `(frame, scale, neighbour)`.
pub fn initial_grid(grid: &SamplingGrid, query: (f64, f64), frames: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(frames * grid.scales() * grid.k());
    for _ in 0..frames {
        for s in 0..grid.scales() {
            for k in 0..grid.k() {
                let (dr, dc) = grid.base(s, k);
                out.push((query.0 + dr, query.1 + dc));
            }
        }
    }
    out
}

/// Per-frame motion channels `[F_{b-1}, F_b, F_{b+1}]` (edge-replicated),
/// as an `[H, W, B, 6]` tensor; zeros when `motion_aware` is off.
pub fn flow_features<T: Real>(flows: &FlowStack, motion_aware: bool) -> Tensor<T> {
    let (h, w, b) = flows.dims();
    let mut out = Tensor::zeros([h, w, b, 6]);
    if !motion_aware {
        return out;
    }
    for k in 0..b {
        let trio = [k.saturating_sub(1), k, (k + 1).min(b - 1)];
        for p in 0..h * w {
            for (slot, &src) in trio.iter().enumerate() {
                for c in 0..2 {
                    out[((p * b + k) * 6) + slot * 2 + c] = T::of(flows.fields[src].uv[p * 2 + c]);
                }
            }
        }
    }
    out
}

/// Walk predictor: one 3×3 convolution applied per frame over
/// `[H_b, F_{b-1}, F_b, F_{b+1}]`, emitting `S·K·2` channels, clamped.
///
/// `features: [H, W, B, C]`, `flow_feat: [H, W, B, 6]`,
/// `weight: [3, 3, 1, C + 6, S·K·2]`. Returns `[H, W, B, S·K·2]`.
pub fn predict_walks<T: Real>(
    tape: &mut Tape<T>,
    features: Var,
    flow_feat: Var,
    weight: Var,
    bias: Var,
    walk_clamp: f64,
) -> TResult<Var> {
    let x = tape.concat(&[features, flow_feat], 3)?;
    let raw = tape.conv3d(x, weight, Some(bias))?;
    tape.clamp(raw, T::of(-walk_clamp), T::of(walk_clamp))
}

/// Bilinear samples of `feature_map: [H, W, C]` at `(row, col)` positions,
/// clamped to the grid. Returns `[N, C]`.
pub fn bilinear_sample<T: Real>(feature_map: &Tensor<T>, positions: &[(T, T)]) -> Result<Tensor<T>> {
    let s = feature_map.shape();
    if s.len() != 3 {
        return Err(shape(format!("feature map must be [H, W, C], got {s:?}")));
    }
    if positions.iter().any(|(r, c)| !r.is_finite() || !c.is_finite()) {
        return Err(invalid("sample positions must be finite"));
    }
    let flat: Vec<T> = positions.iter().flat_map(|&(r, c)| [r, c]).collect();
    let out = kernels::grid_sample(feature_map.data(), s[0], s[1], s[2], &flat);
    Ok(Tensor::from_vec([positions.len(), s[2]], out)?)
}

/// Materialised neighbourhood of every pixel: absolute (clamped) positions
/// `[H, W, B, S, K, 2]` and the features sampled there `[H, W, B, S, K, C]`.
/// Both are shared by all query frames at the same pixel.
#[derive(Clone, Debug)]
pub struct Neighborhood<T> {
    pub grid: SamplingGrid,
    pub frames: usize,
    pub positions: Tensor<T>,
    pub features: Tensor<T>,
}

impl<T: Real> Neighborhood<T> {
    pub fn per_query(&self) -> usize {
        self.frames * self.grid.scales() * self.grid.k()
    }

    /// Features of all neighbours of pixel `(row, col)`, `[B·S·K, C]` row-major.
    pub fn slice(&self, row: usize, col: usize) -> &[T] {
        let s = self.features.shape();
        let (w, n, c) = (s[1], self.per_query(), s[5]);
        let base = (row * w + col) * n * c;
        &self.features.data()[base..base + n * c]
    }

    pub fn positions_of(&self, row: usize, col: usize) -> &[T] {
        let w = self.positions.shape()[1];
        let n = self.per_query();
        let base = (row * w + col) * n * 2;
        &self.positions.data()[base..base + n * 2]
    }
}

/// Sample the neighbourhood of every pixel of `features: [H, W, B, C]` at
/// `initial_grid + walks` (`walks: [H, W, B, S·K·2]`, or zero when `None`).
pub fn build_neighborhood<T: Real>(
    features: &Tensor<T>,
    walks: Option<&Tensor<T>>,
    grid: &SamplingGrid,
) -> Result<Neighborhood<T>> {
    let fs = features.shape();
    if fs.len() != 4 {
        return Err(shape(format!("features must be [H, W, B, C], got {fs:?}")));
    }
    let (h, w, b, c) = (fs[0], fs[1], fs[2], fs[3]);
    let (ns, nk) = (grid.scales(), grid.k());
    if let Some(wk) = walks {
        if wk.len() != h * w * b * ns * nk * 2 {
            return Err(shape(format!("walks {:?} vs [{h}, {w}, {b}, {}]", wk.shape(), ns * nk * 2)));
        }
    }
    let frame_maps: Vec<Tensor<T>> = (0..b)
        .map(|k| {
            let data = (0..h * w).flat_map(|p| features.data()[(p * b + k) * c..(p * b + k + 1) * c].to_vec()).collect();
            Tensor::from_vec([h, w, c], data).expect("frame map")
        })
        .collect();
    let hi = T::of((h - 1) as f64);
    let wi = T::of((w - 1) as f64);
    let n = b * ns * nk;
    let mut positions = Vec::with_capacity(h * w * n * 2);
    let mut feats = Vec::with_capacity(h * w * n * c);
    for row in 0..h {
        for col in 0..w {
            for (fb, map) in frame_maps.iter().enumerate() {
                let mut pts = Vec::with_capacity(ns * nk);
                for s in 0..ns {
                    for k in 0..nk {
                        let (dr, dc) = grid.base(s, k);
                        let (mut r, mut cc) = (T::of(row as f64 + dr), T::of(col as f64 + dc));
                        if let Some(wk) = walks {
                            let o = ((row * w + col) * b + fb) * ns * nk * 2 + (s * nk + k) * 2;
                            r += wk[o];
                            cc += wk[o + 1];
                        }
                        let (r, cc) = (r.max(T::zero()).min(hi), cc.max(T::zero()).min(wi));
                        positions.extend([r, cc]);
                        pts.push((r, cc));
                    }
                }
                feats.extend_from_slice(bilinear_sample(map, &pts)?.data());
            }
        }
    }
    Ok(Neighborhood {
        grid: grid.clone(),
        frames: b,
        positions: Tensor::from_vec([h, w, b, ns, nk, 2], positions)?,
        features: Tensor::from_vec([h, w, b, ns, nk, c], feats)?,
    })
}

/// One row of the sampling/weight dump.
#[derive(Clone, Debug, PartialEq)]
pub struct DumpRow {
    /// Query column, row, frame.
    pub query: (usize, usize, usize),
    /// Neighbour frame, scale, pattern index.
    pub neighbor: (usize, usize, usize),
    pub pos_x: f64,
    pub pos_y: f64,
    pub weight: f64,
}

pub const DUMP_HEADER: &str = "query_x,query_y,query_b,nbr_b,nbr_s,nbr_k,pos_x,pos_y,weight";

/// Write dump rows as CSV (`x` = column, `y` = row, frames 0-based).
pub fn write_dump_csv(rows: &[DumpRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{DUMP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{:.8}",
            r.query.0, r.query.1, r.query.2, r.neighbor.0, r.neighbor.1, r.neighbor.2, r.pos_x, r.pos_y, r.weight
        )?;
    }
    Ok(())
}
