//! Relation-weighted aggregation over walked neighbourhoods.
//!
//! For a query node `h_i` and neighbours `h_{j,b}` drawn from frame `b`,
//! `R = exp(⟨f(h_i), f(h_{j,b})⟩ / τ) · w_b` and the node update is
//! `Σ R · f(h_{j,b}) / Σ R`. Logits are clamped to `±LOGIT_CLAMP` and the
//! normalisation subtracts the per-node maximum before exponentiating.
//!
//! Two routes are provided: an explicit one over a materialised
//! [`Neighborhood`], used as a reference, and [`AggregateOp`], a fused tape
//! op that samples keys and values on the fly and never stores the
//! neighbourhood.

use mady_tensor::{BilinearTap, CustomOp, ParamId, ParamStore, Real, Result as TResult, Tape, Tensor, TensorError, Var};

use crate::error::{invalid, shape, Result};
use crate::graph::{predict_walks, Neighborhood, SamplingGrid};

pub const LOGIT_CLAMP: f64 = 30.0;

/// Message-passing settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationConfig {
    /// Number of aggregation rounds `L`.
    pub iterations: usize,
    /// `H ← H + Agg(H)` instead of `H ← Agg(H)`; `None` means "on when L > 1".
    pub residual: Option<bool>,
    /// Logit divisor; `None` means `√C`.
    pub temperature: Option<f64>,
    /// Predict fresh walks every round instead of once.
    pub repredict_walks: bool,
    /// Separate key/value embeddings instead of one shared `f`.
    pub split_heads: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            residual: None,
            temperature: None,
            repredict_walks: false,
            split_heads: false,
        }
    }
}

impl AggregationConfig {
    pub fn residual(&self) -> bool {
        self.residual.unwrap_or(self.iterations > 1)
    }

    pub fn temperature(&self, channels: usize) -> f64 {
        self.temperature.unwrap_or((channels as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("aggregation needs at least one iteration"));
        }
        if let Some(t) = self.temperature {
            if !(t.is_finite() && t > 0.0) {
                return Err(invalid(format!("temperature must be positive, got {t}")));
            }
        }
        Ok(())
    }
}

/// Affine embedding `f(h) = h·W + b` with `W: [C, C]`.
#[derive(Clone, Debug)]
pub struct EmbeddingHead<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> EmbeddingHead<T> {
    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::from_fn([c, c], |i| if i / c == i % c { T::one() } else { T::zero() }),
            bias: Tensor::zeros([c]),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, h: &[T]) -> Vec<T> {
        let c = self.channels();
        let wd = self.weight.data();
        (0..c)
            .map(|o| h.iter().enumerate().fold(self.bias[o], |acc, (i, &x)| acc + x * wd[i * c + o]))
            .collect()
    }
}

/// Positive per-frame weights `w_b = softplus(θ_b)`.
#[derive(Clone, Copy, Debug)]
pub struct FrameWeights {
    pub theta: ParamId,
}

impl FrameWeights {
    /// `θ` such that `softplus(θ) = 1`.
    pub fn neutral_theta() -> f64 {
        (std::f64::consts::E - 1.0).ln()
    }

    pub fn register<T: Real>(store: &mut ParamStore<T>, name: &str, frames: usize) -> Self {
        let theta = store.add(name, Tensor::full([frames], T::of(Self::neutral_theta())));
        Self { theta }
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>) -> Vec<T> {
        store.get(self.theta).value.data().iter().map(|&t| mady_tensor::tape::softplus(t)).collect()
    }
}

/// Eight independent partial sums so the loop vectorises.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut lanes = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let quad = [lanes[0] + lanes[4], lanes[1] + lanes[5], lanes[2] + lanes[6], lanes[3] + lanes[7]];
    (quad[0] + quad[2]) + (quad[1] + quad[3]) + tail
}

fn clamp_logit<T: Real>(z: T) -> (T, bool) {
    let lim = T::of(LOGIT_CLAMP);
    if z > lim {
        (lim, true)
    } else if z < -lim {
        (-lim, true)
    } else {
        (z, false)
    }
}

/// Unnormalised relation between a query and one neighbour in frame `b`.
pub fn relation<T: Real>(hi: &[T], hj: &[T], wb: T, head: &EmbeddingHead<T>, temperature: T) -> T {
    let (z, _) = clamp_logit(dot(&head.apply(hi), &head.apply(hj)) / temperature);
    z.exp() * wb
}

/// Aggregate one node from explicit neighbours (`[N, C]` row-major with
/// frame index `frames[j]`). Returns the update and the normalised weights.
pub fn aggregate_node<T: Real>(
    hi: &[T],
    neighbors: &[T],
    frames: &[usize],
    frame_weights: &[T],
    head: &EmbeddingHead<T>,
    temperature: T,
) -> (Vec<T>, Vec<T>) {
    let c = head.channels();
    let q = head.apply(hi);
    let embedded: Vec<Vec<T>> = neighbors.chunks_exact(c).map(|h| head.apply(h)).collect();
    let z: Vec<T> = embedded.iter().map(|e| clamp_logit(dot(&q, e) / temperature).0).collect();
    let zmax = z.iter().copied().fold(T::neg_infinity(), T::max);
    let r: Vec<T> = z
        .iter()
        .zip(frames)
        .map(|(&z, &b)| (z - zmax).exp() * frame_weights[b])
        .collect();
    let total: T = r.iter().copied().sum();
    let a: Vec<T> = r.iter().map(|&x| x / total).collect();
    let mut out = vec![T::zero(); c];
    for (e, &aj) in embedded.iter().zip(&a) {
        for (o, &x) in out.iter_mut().zip(e) {
            *o += aj * x;
        }
    }
    (out, a)
}

/// Reference pass over a materialised neighbourhood of `features: [H, W, B, C]`.
pub fn aggregate_explicit<T: Real>(
    features: &Tensor<T>,
    nbhd: &Neighborhood<T>,
    frame_weights: &[T],
    head: &EmbeddingHead<T>,
    temperature: T,
) -> Result<Tensor<T>> {
    let s = features.shape();
    if s.len() != 4 || nbhd.frames != s[2] || frame_weights.len() != s[2] {
        return Err(shape(format!("features {s:?} vs neighbourhood of {} frames", nbhd.frames)));
    }
    let (h, w, b, c) = (s[0], s[1], s[2], s[3]);
    let per_frame = nbhd.grid.scales() * nbhd.grid.k();
    let frames: Vec<usize> = (0..nbhd.per_query()).map(|j| j / per_frame).collect();
    let mut out = Tensor::zeros([h, w, b, c]);
    for row in 0..h {
        for col in 0..w {
            let nb = nbhd.slice(row, col);
            for qb in 0..b {
                let base = ((row * w + col) * b + qb) * c;
                let hi = &features.data()[base..base + c];
                let (u, _) = aggregate_node(hi, nb, &frames, frame_weights, head, temperature);
                out.data_mut()[base..base + c].copy_from_slice(&u);
            }
        }
    }
    Ok(out)
}

/// Geometry of the fused aggregation.
#[derive(Clone, Debug)]
pub struct AggregatePlan {
    pub grid: SamplingGrid,
    pub temperature: f64,
}

/// One sampled neighbour of a pixel.
#[derive(Clone, Copy, Debug)]
pub struct NeighborTap<T> {
    pub frame: usize,
    pub scale: usize,
    pub index: usize,
    pub row: T,
    pub col: T,
    pub tap: BilinearTap<T>,
}

struct Dims {
    h: usize,
    w: usize,
    b: usize,
    c: usize,
}

impl AggregatePlan {
    fn per_frame(&self) -> usize {
        self.grid.scales() * self.grid.k()
    }

    /// Neighbour stencils of pixel `(row, col)`, ordered `(frame, scale, k)`.
    pub fn taps<T: Real>(&self, walks: Option<&[T]>, row: usize, col: usize, h: usize, w: usize, b: usize) -> Vec<NeighborTap<T>> {
        let pf = self.per_frame();
        let mut out = Vec::with_capacity(b * pf);
        for frame in 0..b {
            for s in 0..self.grid.scales() {
                for k in 0..self.grid.k() {
                    let (dr, dc) = self.grid.base(s, k);
                    let (mut r, mut c) = (T::of(row as f64 + dr), T::of(col as f64 + dc));
                    if let Some(wk) = walks {
                        let o = ((row * w + col) * b + frame) * pf * 2 + (s * self.grid.k() + k) * 2;
                        r += wk[o];
                        c += wk[o + 1];
                    }
                    let tap = BilinearTap::new(r, c, h, w);
                    let hi = T::of((h - 1) as f64);
                    let wi = T::of((w - 1) as f64);
                    out.push(NeighborTap {
                        frame,
                        scale: s,
                        index: k,
                        row: r.max(T::zero()).min(hi),
                        col: c.max(T::zero()).min(wi),
                        tap,
                    });
                }
            }
        }
        out
    }

    fn check<T: Real>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>, walks: Option<&Tensor<T>>, fw: &Tensor<T>) -> Result<Dims> {
        let s = q.shape();
        if s.len() != 4 || k.shape() != s || v.shape() != s {
            return Err(shape(format!("query/key/value must share an [H, W, B, C] shape, got {s:?}, {:?}, {:?}", k.shape(), v.shape())));
        }
        let d = Dims {
            h: s[0],
            w: s[1],
            b: s[2],
            c: s[3],
        };
        if let Some(wk) = walks {
            let want = [d.h, d.w, d.b, self.per_frame() * 2];
            if wk.shape() != want {
                return Err(shape(format!("walks {:?}, expected {want:?}", wk.shape())));
            }
        }
        if fw.shape() != [d.b] {
            return Err(shape(format!("frame weights {:?}, expected [{}]", fw.shape(), d.b)));
        }
        if fw.data().iter().any(|&x| x.is_nan() || x <= T::zero()) {
            return Err(invalid("frame weights must be positive"));
        }
        Ok(d)
    }
}

fn gather<T: Real>(map: &[T], taps: &[NeighborTap<T>], d: &Dims, out: &mut [T]) {
    out.fill(T::zero());
    for (t, dst) in taps.iter().zip(out.chunks_exact_mut(d.c)) {
        let wts = t.tap.weights();
        for (&p, &wt) in t.tap.corners(d.w).iter().zip(&wts) {
            if wt == T::zero() {
                continue;
            }
            let o = (p * d.b + t.frame) * d.c;
            for (x, &s) in dst.iter_mut().zip(&map[o..o + d.c]) {
                *x += wt * s;
            }
        }
    }
}

/// Normalised attention of the `nq` queries `qs` (`[nq, C]`) against the
/// gathered keys; `a` and `clamped` are `[nq, N]`.
#[allow(clippy::too_many_arguments)]
fn attend<T: Real>(
    qs: &[T],
    kn: &[T],
    taps: &[NeighborTap<T>],
    fw: &[T],
    inv_tau: T,
    c: usize,
    a: &mut [T],
    clamped: &mut [bool],
) {
    let (nq, n) = (qs.len() / c, taps.len());
    T::gemm(nq, c, n, inv_tau, qs, (c, 1), kn, (1, c), T::zero(), &mut a[..nq * n], (n, 1));
    for (row, cl) in a.chunks_exact_mut(n).zip(clamped.chunks_exact_mut(n)) {
        let mut zmax = T::neg_infinity();
        for (aj, hit) in row.iter_mut().zip(cl.iter_mut()) {
            let (z, h) = clamp_logit(*aj);
            *aj = z;
            *hit = h;
            zmax = zmax.max(z);
        }
        let mut total = T::zero();
        for (aj, t) in row.iter_mut().zip(taps) {
            *aj = (*aj - zmax).exp() * fw[t.frame];
            total += *aj;
        }
        let inv = T::one() / total;
        for aj in row.iter_mut() {
            *aj *= inv;
        }
    }
}

/// Fused forward; also used to report per-node weights.
fn fused_forward<T: Real>(
    plan: &AggregatePlan,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    walks: Option<&Tensor<T>>,
    fw: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = plan.check(q, k, v, walks, fw)?;
    let shared = std::ptr::eq(k, v);
    let n = d.b * plan.per_frame();
    let inv_tau = T::of(1.0 / plan.temperature);
    let mut kn = vec![T::zero(); n * d.c];
    let mut vn = vec![T::zero(); if shared { 0 } else { n * d.c }];
    let mut a = vec![T::zero(); d.b * n];
    let mut clamped = vec![false; d.b * n];
    let mut out = vec![T::zero(); q.len()];
    for row in 0..d.h {
        for col in 0..d.w {
            let taps = plan.taps(walks.map(|t| t.data()), row, col, d.h, d.w, d.b);
            gather(k.data(), &taps, &d, &mut kn);
            if !shared {
                gather(v.data(), &taps, &d, &mut vn);
            }
            let values = if shared { &kn } else { &vn };
            let o = (row * d.w + col) * d.b * d.c;
            let blk = o..o + d.b * d.c;
            attend(&q.data()[blk.clone()], &kn, &taps, fw.data(), inv_tau, d.c, &mut a, &mut clamped);
            T::gemm(d.b, n, d.c, T::one(), &a, (n, 1), values, (d.c, 1), T::zero(), &mut out[blk], (d.c, 1));
        }
    }
    Ok(Tensor::from_vec(q.shape().to_vec(), out)?)
}

/// Sampled positions and normalised weights of query `(row, col, frame)`.
pub fn node_weights<T: Real>(
    plan: &AggregatePlan,
    query: &Tensor<T>,
    key: &Tensor<T>,
    walks: Option<&Tensor<T>>,
    fw: &Tensor<T>,
    node: (usize, usize, usize),
) -> Result<Vec<(NeighborTap<T>, T)>> {
    let d = plan.check(query, key, key, walks, fw)?;
    let (row, col, qb) = node;
    if row >= d.h || col >= d.w || qb >= d.b {
        return Err(invalid(format!("query {node:?} outside [{}, {}, {}]", d.h, d.w, d.b)));
    }
    let taps = plan.taps(walks.map(|t| t.data()), row, col, d.h, d.w, d.b);
    let mut kn = vec![T::zero(); taps.len() * d.c];
    gather(key.data(), &taps, &d, &mut kn);
    let mut a = vec![T::zero(); taps.len()];
    let mut clamped = vec![false; taps.len()];
    let o = ((row * d.w + col) * d.b + qb) * d.c;
    attend(&query.data()[o..o + d.c], &kn, &taps, fw.data(), T::of(1.0 / plan.temperature), d.c, &mut a, &mut clamped);
    Ok(taps.into_iter().zip(a).collect())
}

/// Tape op over inputs `[query, key, value, walks, frame_weights]`.
pub struct AggregateOp {
    plan: AggregatePlan,
}

impl<T: Real> CustomOp<T> for AggregateOp {
    fn name(&self) -> &'static str {
        "aggregate"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> TResult<Vec<Option<Tensor<T>>>> {
        let (q, k, v, walks, fw) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let plan = &self.plan;
        let d = plan
            .check(q, k, v, Some(walks), fw)
            .map_err(|e| TensorError::Invalid {
                op: "aggregate",
                msg: e.to_string(),
            })?;
        let shared = std::ptr::eq(k, v);
        let n = d.b * plan.per_frame();
        let c = d.c;
        let tau = T::of(plan.temperature);
        let inv_tau = T::one() / tau;
        let fwd = fw.data();

        let mut dq = vec![T::zero(); q.len()];
        let mut dk = vec![T::zero(); k.len()];
        let mut dv = vec![T::zero(); if shared { 0 } else { v.len() }];
        let mut dwalk = vec![T::zero(); walks.len()];
        let mut dfw = vec![T::zero(); d.b];

        let mut kn = vec![T::zero(); n * c];
        let mut vn = vec![T::zero(); if shared { 0 } else { n * c }];
        let mut dkn = vec![T::zero(); n * c];
        let mut dvn = vec![T::zero(); n * c];
        let nb = d.b * n;
        let mut a = vec![T::zero(); nb];
        let mut clamped = vec![false; nb];
        let mut dz = vec![T::zero(); nb];
        for row in 0..d.h {
            for col in 0..d.w {
                let taps = plan.taps(Some(walks.data()), row, col, d.h, d.w, d.b);
                gather(k.data(), &taps, &d, &mut kn);
                if !shared {
                    gather(v.data(), &taps, &d, &mut vn);
                }
                let values = if shared { &kn } else { &vn };
                let o = (row * d.w + col) * d.b * c;
                let blk = o..o + d.b * c;
                let (qs, g) = (&q.data()[blk.clone()], &grad.data()[blk.clone()]);
                attend(qs, &kn, &taps, fwd, inv_tau, c, &mut a, &mut clamped);
                // dz holds g·v_j until it is turned into the logit gradient
                T::gemm(d.b, c, n, T::one(), g, (c, 1), values, (1, c), T::zero(), &mut dz, (n, 1));
                for qb in 0..d.b {
                    let go = dot(&g[qb * c..(qb + 1) * c], &output.data()[o + qb * c..o + (qb + 1) * c]);
                    let r = qb * n..(qb + 1) * n;
                    for ((z, (&aj, &cl)), t) in dz[r.clone()].iter_mut().zip(a[r.clone()].iter().zip(&clamped[r])).zip(&taps) {
                        let delta = aj * (*z - go);
                        dfw[t.frame] += delta / fwd[t.frame];
                        *z = if cl { T::zero() } else { delta * inv_tau };
                    }
                }
                T::gemm(n, d.b, c, T::one(), &a, (1, n), g, (c, 1), T::zero(), &mut dvn, (c, 1));
                T::gemm(d.b, n, c, T::one(), &dz, (n, 1), &kn, (c, 1), T::zero(), &mut dq[blk], (c, 1));
                T::gemm(n, d.b, c, T::one(), &dz, (1, n), qs, (c, 1), T::zero(), &mut dkn, (c, 1));
                if shared {
                    for (x, &y) in dkn.iter_mut().zip(&dvn) {
                        *x += y;
                    }
                }
                for (j, t) in taps.iter().enumerate() {
                    let wts = t.tap.weights();
                    let (wr, wc) = t.tap.weight_grads();
                    let dkj = &dkn[j * c..(j + 1) * c];
                    let dvj = &dvn[j * c..(j + 1) * c];
                    let (mut gr, mut gc) = (T::zero(), T::zero());
                    for (q4, &p) in t.tap.corners(d.w).iter().enumerate() {
                        let off = (p * d.b + t.frame) * c;
                        let mut s = dot(dkj, &k.data()[off..off + c]);
                        if !shared {
                            s += dot(dvj, &v.data()[off..off + c]);
                        }
                        gr += wr[q4] * s;
                        gc += wc[q4] * s;
                        if wts[q4] != T::zero() {
                            for (x, &y) in dk[off..off + c].iter_mut().zip(dkj) {
                                *x += wts[q4] * y;
                            }
                            if !shared {
                                for (x, &y) in dv[off..off + c].iter_mut().zip(dvj) {
                                    *x += wts[q4] * y;
                                }
                            }
                        }
                    }
                    let wo = ((row * d.w + col) * d.b + t.frame) * plan.per_frame() * 2 + (t.scale * plan.grid.k() + t.index) * 2;
                    dwalk[wo] += gr;
                    dwalk[wo + 1] += gc;
                }
            }
        }
        let sh = q.shape().to_vec();
        let wrap = |need: bool, data: Vec<T>, shape: &[usize]| -> TResult<Option<Tensor<T>>> {
            Ok(if need { Some(Tensor::from_vec(shape.to_vec(), data)?) } else { None })
        };
        // With a shared key/value the whole value gradient is folded into dk;
        // the tape sums per-input gradients of the same variable.
        let dv_t = if shared {
            if needs[2] {
                Some(Tensor::zeros(sh.clone()))
            } else {
                None
            }
        } else {
            wrap(needs[2], dv, &sh)?
        };
        Ok(vec![
            wrap(needs[0], dq, &sh)?,
            wrap(needs[1], dk, &sh)?,
            dv_t,
            wrap(needs[3], dwalk, walks.shape())?,
            wrap(needs[4], dfw, fw.shape())?,
        ])
    }
}

/// Inputs of one fused aggregation.
#[derive(Clone, Copy, Debug)]
pub struct AggregateInputs {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    /// `[H, W, B, S·K·2]` walks; `None` samples the uniform grid.
    pub walks: Option<Var>,
    /// Positive `[B]` frame weights.
    pub frame_weights: Var,
}

/// Record one fused aggregation on the tape.
pub fn aggregate_pass<T: Real>(tape: &mut Tape<T>, inputs: AggregateInputs, plan: &AggregatePlan) -> Result<Var> {
    let walks = match inputs.walks {
        Some(w) => w,
        None => {
            let s = tape.shape(inputs.query).to_vec();
            tape.constant(Tensor::zeros([s[0], s[1], s[2], plan.per_frame() * 2]))?
        }
    };
    let wk = if inputs.walks.is_some() { Some(tape.value(walks)) } else { None };
    let k = tape.value(inputs.key);
    let v = if inputs.key == inputs.value { k } else { tape.value(inputs.value) };
    let out = fused_forward(plan, tape.value(inputs.query), k, v, wk, tape.value(inputs.frame_weights))?;
    let vars = [inputs.query, inputs.key, inputs.value, walks, inputs.frame_weights];
    Ok(tape.custom(Box::new(AggregateOp { plan: plan.clone() }), &vars, out)?)
}

/// Trainable pieces of the graph enhancer, bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct GraphVars {
    pub walk_weight: Var,
    pub walk_bias: Var,
    pub embed_weight: Var,
    pub embed_bias: Var,
    /// Value embedding when heads are split.
    pub value_embed: Option<(Var, Var)>,
    pub theta: Var,
}

/// Everything `iterate` needs besides the features.
pub struct GraphContext<'a> {
    pub vars: GraphVars,
    /// `[H, W, B, 6]` flow channels.
    pub flow_features: Var,
    pub grid: &'a SamplingGrid,
    pub dynamic_walks: bool,
    pub config: &'a AggregationConfig,
}

/// Output of [`iterate`]: enhanced features and the last walks used.
pub struct Iterated {
    pub features: Var,
    pub walks: Option<Var>,
}

/// `L` rounds of walk prediction, embedding and aggregation.
pub fn iterate<T: Real>(tape: &mut Tape<T>, h0: Var, ctx: &GraphContext<'_>) -> Result<Iterated> {
    ctx.config.validate()?;
    let c = tape.shape(h0)[3];
    let plan = AggregatePlan {
        grid: ctx.grid.clone(),
        temperature: ctx.config.temperature(c),
    };
    let v = ctx.vars;
    let fw = tape.softplus(v.theta)?;
    let mut h = h0;
    let mut walks = None;
    for round in 0..ctx.config.iterations {
        if ctx.dynamic_walks && (round == 0 || ctx.config.repredict_walks) {
            walks = Some(predict_walks(tape, h, ctx.flow_features, v.walk_weight, v.walk_bias, ctx.grid.walk_clamp())?);
        }
        let key = tape.pointwise(h, v.embed_weight, Some(v.embed_bias))?;
        let value = match v.value_embed {
            Some((w, b)) => tape.pointwise(h, w, Some(b))?,
            None => key,
        };
        let agg = aggregate_pass(
            tape,
            AggregateInputs {
                query: key,
                key,
                value,
                walks,
                frame_weights: fw,
            },
            &plan,
        )?;
        h = if ctx.config.residual() { tape.add(h, agg)? } else { agg };
    }
    Ok(Iterated { features: h, walks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_neighborhood;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
    }

    #[test]
    fn equal_logits_follow_frame_weights() {
        let head = EmbeddingHead::<f64>::identity(2);
        let hi = [0.0, 0.0];
        let nb = [1.0, 2.0, -3.0, 0.5, 4.0, 4.0];
        let (_, a) = aggregate_node(&hi, &nb, &[0, 1, 1], &[1.0, 3.0], &head, 1.0);
        assert!((a[0] - 1.0 / 7.0).abs() < 1e-12);
        assert!((a[1] - 3.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn identical_neighbours_reproduce_embedding() {
        let head = EmbeddingHead::<f64>::identity(3);
        let hj = [0.3, -0.2, 0.9];
        let nb: Vec<f64> = (0..5).flat_map(|_| hj).collect();
        let (out, _) = aggregate_node(&[1.0, 2.0, 3.0], &nb, &[0, 0, 1, 1, 1], &[0.2, 5.0], &head, 2.0);
        for (o, h) in out.iter().zip(hj) {
            assert!((o - h).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_matches_definition() {
        let head = EmbeddingHead::<f64>::identity(2);
        let r = relation(&[1.0, 2.0], &[0.5, -1.0], 2.0, &head, 0.5);
        assert!((r - 2.0 * (-3.0f64).exp()).abs() < 1e-12);
        let huge = relation(&[100.0, 0.0], &[100.0, 0.0], 1.0, &head, 1.0);
        assert_eq!(huge, LOGIT_CLAMP.exp());
    }

    #[test]
    fn fused_matches_explicit() {
        let (h, w, b, c) = (7, 6, 3, 4);
        let grid = SamplingGrid::new(vec![1, 3], SamplingGrid::ring3x3()).unwrap();
        let feats = rand_tensor(&[h, w, b, c], 1, 1.0);
        let walks = rand_tensor(&[h, w, b, 18 * 2], 2, 2.5);
        let fw = Tensor::from_vec([b], vec![0.5, 1.0, 2.0]).unwrap();
        let nbhd = build_neighborhood(&feats, Some(&walks), &grid).unwrap();
        let head = EmbeddingHead::identity(c);
        let want = aggregate_explicit(&feats, &nbhd, fw.data(), &head, 2.0).unwrap();
        let plan = AggregatePlan { grid, temperature: 2.0 };
        let got = fused_forward(&plan, &feats, &feats, &feats, Some(&walks), &fw).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn node_weights_sum_to_one() {
        let feats = rand_tensor(&[5, 5, 2, 3], 3, 1.0);
        let plan = AggregatePlan {
            grid: SamplingGrid::default(),
            temperature: 1.0,
        };
        let fw = Tensor::from_vec([2], vec![1.0, 0.25]).unwrap();
        let nw = node_weights(&plan, &feats, &feats, None, &fw, (2, 2, 1)).unwrap();
        assert_eq!(nw.len(), 2 * 27);
        let s: f64 = nw.iter().map(|x| x.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(nw.iter().all(|(t, _)| t.row >= 0.0 && t.row <= 4.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let feats = rand_tensor(&[4, 4, 2, 3], 3, 1.0);
        let plan = AggregatePlan {
            grid: SamplingGrid::default(),
            temperature: 1.0,
        };
        let bad = Tensor::from_vec([3], vec![1.0; 3]).unwrap();
        assert!(fused_forward(&plan, &feats, &feats, &feats, None, &bad).is_err());
        let neg = Tensor::from_vec([2], vec![1.0, 0.0]).unwrap();
        assert!(fused_forward(&plan, &feats, &feats, &feats, None, &neg).is_err());
    }
}
