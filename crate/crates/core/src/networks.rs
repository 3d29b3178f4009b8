//! Encoder/decoder 3D CNNs, the BaseNet coarse backbone, and the assembled
//! enhancer, with checkpoint save/load.
//!
//! Every parameter lives in one [`ParamStore`] under a dotted name; the
//! enhancer (`encoder.*`, `walk.*`, `embed.*`, `value.*`, `frame.*`,
//! `decoder.*`) never touches `basenet.*`.

use std::fs;
use std::path::{Path, PathBuf};

use mady_tensor::{io as tns, ParamId, ParamStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aggregation::{iterate, node_weights, AggregatePlan, AggregationConfig, FrameWeights, GraphContext, GraphVars};
use crate::error::{invalid, shape, Error, Result};
use crate::graph::{flow_features, predict_walks, Ablation, DumpRow, SamplingGrid};
use crate::kv::{list_to_string, parse_list, KeyValues};
use crate::motion::{build_flow_stack, FlowParams, FlowStack};
use crate::sci::{MaskSet, Measurement, Role, VideoCube, MASK_EPS};

pub const CHECKPOINT_FORMAT: &str = "madygraph-checkpoint-1";
const MANIFEST: &str = "manifest.txt";

/// Architecture hyperparameters; every field is a config key.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub channels: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub basenet_width: usize,
    pub basenet_layers: usize,
    pub leaky_slope: f64,
    pub dilations: Vec<usize>,
    pub aggregation: AggregationConfig,
    pub ablation: Ablation,
    pub global_residual_to_coarse: bool,
    pub flow: FlowParams,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 32,
            encoder_widths: vec![16, 32, 32],
            decoder_widths: vec![32, 16, 8],
            basenet_width: 16,
            basenet_layers: 6,
            leaky_slope: 0.1,
            dilations: vec![1, 7, 13],
            aggregation: AggregationConfig::default(),
            ablation: Ablation::FULL,
            global_residual_to_coarse: false,
            flow: FlowParams::default(),
        }
    }
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), ToString::to_string)
}

fn read_opt<T: std::str::FromStr>(kv: &KeyValues, key: &str, slot: &mut Option<T>) -> Result<()> {
    match kv.get_str(key) {
        None => Ok(()),
        Some("auto") => {
            *slot = None;
            Ok(())
        }
        Some(_) => {
            *slot = kv.get(key)?;
            Ok(())
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> Result<SamplingGrid> {
        SamplingGrid::new(self.dilations.clone(), SamplingGrid::ring3x3())
    }

    /// The grid sampled under the configured ablation.
    pub fn effective_grid(&self) -> Result<SamplingGrid> {
        Ok(self.ablation.effective_grid(&self.grid()?))
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        pos("frames", self.frames)?;
        pos("channels", self.channels)?;
        pos("basenet_width", self.basenet_width)?;
        if self.basenet_layers < 2 {
            return Err(Error::Config("basenet_layers must be at least 2".into()));
        }
        for w in self.encoder_widths.iter().chain(&self.decoder_widths) {
            pos("layer width", *w)?;
        }
        self.grid()?;
        self.aggregation.validate()?;
        Ok(())
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("frames", self.frames);
        kv.set("channels", self.channels);
        kv.set("encoder_widths", list_to_string(&self.encoder_widths));
        kv.set("decoder_widths", list_to_string(&self.decoder_widths));
        kv.set("basenet_width", self.basenet_width);
        kv.set("basenet_layers", self.basenet_layers);
        kv.set("leaky_slope", self.leaky_slope);
        kv.set("dilations", list_to_string(&self.dilations));
        kv.set("iterations", self.aggregation.iterations);
        kv.set("residual", opt_to_string(&self.aggregation.residual));
        kv.set("temperature", opt_to_string(&self.aggregation.temperature));
        kv.set("repredict_walks", self.aggregation.repredict_walks);
        kv.set("split_heads", self.aggregation.split_heads);
        kv.set("dw", self.ablation.dw);
        kv.set("cs", self.ablation.cs);
        kv.set("ma", self.ablation.ma);
        kv.set("global_residual_to_coarse", self.global_residual_to_coarse);
        kv.set("flow_levels", self.flow.levels);
        kv.set("flow_alpha", self.flow.alpha);
        kv.set("flow_iterations", self.flow.iterations);
        kv.set("flow_warps", self.flow.warps);
        kv.set("max_displacement", self.flow.max_displacement);
        kv
    }

    /// Defaults overridden by any keys present in `kv`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        kv.read_into("frames", &mut c.frames)?;
        kv.read_into("channels", &mut c.channels)?;
        if let Some(s) = kv.get_str("encoder_widths") {
            c.encoder_widths = parse_list("encoder_widths", s)?;
        }
        if let Some(s) = kv.get_str("decoder_widths") {
            c.decoder_widths = parse_list("decoder_widths", s)?;
        }
        kv.read_into("basenet_width", &mut c.basenet_width)?;
        kv.read_into("basenet_layers", &mut c.basenet_layers)?;
        kv.read_into("leaky_slope", &mut c.leaky_slope)?;
        if let Some(s) = kv.get_str("dilations") {
            c.dilations = parse_list("dilations", s)?;
        }
        kv.read_into("iterations", &mut c.aggregation.iterations)?;
        read_opt(kv, "residual", &mut c.aggregation.residual)?;
        read_opt(kv, "temperature", &mut c.aggregation.temperature)?;
        kv.read_into("repredict_walks", &mut c.aggregation.repredict_walks)?;
        kv.read_into("split_heads", &mut c.aggregation.split_heads)?;
        kv.read_into("dw", &mut c.ablation.dw)?;
        kv.read_into("cs", &mut c.ablation.cs)?;
        kv.read_into("ma", &mut c.ablation.ma)?;
        kv.read_into("global_residual_to_coarse", &mut c.global_residual_to_coarse)?;
        kv.read_into("flow_levels", &mut c.flow.levels)?;
        kv.read_into("flow_alpha", &mut c.flow.alpha)?;
        kv.read_into("flow_iterations", &mut c.flow.iterations)?;
        kv.read_into("flow_warps", &mut c.flow.warps)?;
        kv.read_into("max_displacement", &mut c.flow.max_displacement)?;
        c.validate()?;
        Ok(c)
    }
}

/// One 3D convolution with bias.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    He,
    Zero,
}

fn add_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    kernel: [usize; 3],
    cin: usize,
    cout: usize,
    init: Init,
) -> Conv {
    let fan_in = (kernel.iter().product::<usize>() * cin) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let shape = [kernel[0], kernel[1], kernel[2], cin, cout];
    let w = match init {
        Init::He => Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound))),
        Init::Zero => Tensor::zeros(shape),
    };
    Conv {
        weight: store.add(format!("{name}.w"), w),
        bias: store.add(format!("{name}.b"), Tensor::zeros([cout])),
    }
}

/// Stack of 3×3×3 convolutions with leaky ReLU between layers.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<Conv>,
}

impl ConvStack {
    fn build<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, widths: &[usize], last: Init) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, p)| {
                let init = if i + 2 == widths.len() { last } else { Init::He };
                add_conv(store, rng, &format!("{prefix}.conv{i}"), [3, 3, 3], p[0], p[1], init)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, vars: &Bound, x: Var, slope: f64) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = tape.conv3d(h, vars.get(l.weight), Some(vars.get(l.bias)))?;
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, T::of(slope))?;
            }
        }
        Ok(h)
    }
}

/// Tape handles of every parameter, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }
}

/// Parameter handles of the whole model.
#[derive(Clone, Debug)]
pub struct Layout {
    pub basenet: ConvStack,
    pub encoder: ConvStack,
    pub decoder: ConvStack,
    pub walk: Conv,
    pub embed: (ParamId, ParamId),
    pub value: Option<(ParamId, ParamId)>,
    pub frame_weights: FrameWeights,
}

/// BaseNet plus the graph enhancer with all parameters in one store.
#[derive(Clone, Debug)]
pub struct MadyGraphModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub layout: Layout,
}

fn identity<T: Real>(c: usize) -> Tensor<T> {
    Tensor::from_fn([c, c], |i| if i / c == i % c { T::one() } else { T::zero() })
}

/// Per-frame BaseNet input `[Ȳ, M_b, Ȳ⊙M_b]` as `[H, W, B, 3]`, where
/// `Ȳ = Y / (Σ M + ε)` is the normalised measurement, and `Ȳ` broadcast to
/// `[H, W, B]`.
pub fn basenet_inputs<T: Real>(y: &Tensor<f64>, masks: &MaskSet) -> Result<(Tensor<T>, Tensor<T>)> {
    let (h, w, b) = masks.dims();
    if y.shape() != [h, w] {
        return Err(shape(format!("measurement {:?} vs masks {h}x{w}", y.shape())));
    }
    let sums = masks.power_sum(1);
    let mut x = Vec::with_capacity(h * w * b * 3);
    let mut base = Vec::with_capacity(h * w * b);
    for p in 0..h * w {
        let norm = y[p] / (sums[p] + MASK_EPS);
        for k in 0..b {
            let m = masks.masks[p * b + k];
            x.extend([T::of(norm), T::of(m), T::of(norm * m)]);
            base.push(T::of(norm));
        }
    }
    Ok((Tensor::from_vec([h, w, b, 3], x)?, Tensor::from_vec([h, w, b], base)?))
}

/// `Y / (Σ_b M_b + ε)` broadcast per frame.
pub fn normalized_measurement(meas: &Measurement, masks: &MaskSet) -> Result<VideoCube> {
    let (_, base) = basenet_inputs::<f64>(&meas.y, masks)?;
    VideoCube::new(base, Role::Coarse)
}

impl<T: Real> MadyGraphModel<T> {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;

        let mut bw = vec![3];
        bw.extend(std::iter::repeat_n(config.basenet_width, config.basenet_layers - 1));
        bw.push(1);
        let basenet = ConvStack::build(&mut store, &mut rng, "basenet", &bw, Init::Zero);

        let mut ew = vec![1];
        ew.extend(&config.encoder_widths);
        ew.push(c);
        let encoder = ConvStack::build(&mut store, &mut rng, "encoder", &ew, Init::He);

        let grid = config.effective_grid()?;
        let walk = add_conv(&mut store, &mut rng, "walk", [3, 3, 1], c + 6, grid.scales() * grid.k() * 2, Init::Zero);
        let embed = (store.add("embed.w", identity(c)), store.add("embed.b", Tensor::zeros([c])));
        let value = if config.aggregation.split_heads {
            Some((store.add("value.w", identity(c)), store.add("value.b", Tensor::zeros([c]))))
        } else {
            None
        };
        let frame_weights = FrameWeights::register(&mut store, "frame.theta", config.frames);

        let mut dw = vec![c];
        dw.extend(&config.decoder_widths);
        dw.push(1);
        let decoder = ConvStack::build(&mut store, &mut rng, "decoder", &dw, Init::He);

        Ok(Self {
            config,
            store,
            layout: Layout {
                basenet,
                encoder,
                decoder,
                walk,
                embed,
                value,
                frame_weights,
            },
        })
    }

    /// Record every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let vars = self
            .store
            .ids()
            .map(|id| tape.param(id, self.store.get(id)))
            .collect::<mady_tensor::Result<Vec<_>>>()?;
        Ok(Bound(vars))
    }

    fn check_frames(&self, b: usize) -> Result<()> {
        if b != self.config.frames {
            return Err(shape(format!("model expects B = {}, got {b}", self.config.frames)));
        }
        Ok(())
    }

    /// Coarse estimate on the tape: conv stack over `[Y, M_b, Y⊙M_b]` plus the
    /// normalised measurement.
    pub fn basenet(&self, tape: &mut Tape<T>, vars: &Bound, meas: &Measurement, masks: &MaskSet) -> Result<Var> {
        let (h, w, b) = masks.dims();
        self.check_frames(b)?;
        let (x, base) = basenet_inputs::<T>(&meas.y, masks)?;
        let x = tape.constant(x)?;
        let base = tape.constant(base)?;
        let out = self.layout.basenet.forward(tape, vars, x, self.config.leaky_slope)?;
        let out = tape.reshape(out, &[h, w, b])?;
        Ok(tape.add(out, base)?)
    }

    /// `X^re_b = Y − Σ_t X_t ⊙ M_t + X_b ⊙ M_b` on the tape, `[H, W, B]`.
    pub fn remask(&self, tape: &mut Tape<T>, meas: &Measurement, masks: &MaskSet, coarse: Var) -> Result<Var> {
        let (h, w, b) = masks.dims();
        if tape.shape(coarse) != [h, w, b] || meas.y.shape() != [h, w] {
            return Err(shape(format!("coarse {:?} vs masks {h}x{w}x{b}", tape.shape(coarse))));
        }
        let m = tape.constant(masks.masks.cast())?;
        let y = tape.constant(meas.y.cast::<T>().reshape([h, w, 1])?)?;
        let xm = tape.mul(coarse, m)?;
        let total = tape.sum_axes(xm, &[2])?;
        let total = tape.reshape(total, &[h, w, 1])?;
        let resid = tape.sub(y, total)?;
        let copies = vec![resid; b];
        let resid = tape.concat(&copies, 2)?;
        Ok(tape.add(resid, xm)?)
    }

    /// `[H, W, B] → [H, W, B, C]`.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &Bound, remasked: Var) -> Result<Var> {
        let s = tape.shape(remasked).to_vec();
        if s.len() != 3 {
            return Err(shape(format!("encoder input must be [H, W, B], got {s:?}")));
        }
        let x = tape.reshape(remasked, &[s[0], s[1], s[2], 1])?;
        self.layout.encoder.forward(tape, vars, x, self.config.leaky_slope)
    }

    /// `[H, W, B, C] → [H, W, B]`.
    pub fn decode(&self, tape: &mut Tape<T>, vars: &Bound, features: Var) -> Result<Var> {
        let s = tape.shape(features).to_vec();
        if s.len() != 4 || s[3] != self.config.channels {
            return Err(shape(format!("decoder input must be [H, W, B, {}], got {s:?}", self.config.channels)));
        }
        let y = self.layout.decoder.forward(tape, vars, features, self.config.leaky_slope)?;
        Ok(tape.reshape(y, &s[..3])?)
    }

    /// Graph stage: walks, aggregation rounds.
    pub fn enhance_features(&self, tape: &mut Tape<T>, vars: &Bound, features: Var, flows: &FlowStack) -> Result<Var> {
        let ab = self.config.ablation;
        let grid = self.config.effective_grid()?;
        let ff = tape.constant(flow_features::<T>(flows, ab.ma))?;
        let (ew, eb) = self.layout.embed;
        let ctx = GraphContext {
            vars: GraphVars {
                walk_weight: vars.get(self.layout.walk.weight),
                walk_bias: vars.get(self.layout.walk.bias),
                embed_weight: vars.get(ew),
                embed_bias: vars.get(eb),
                value_embed: self.layout.value.map(|(w, b)| (vars.get(w), vars.get(b))),
                theta: vars.get(self.layout.frame_weights.theta),
            },
            flow_features: ff,
            grid: &grid,
            dynamic_walks: ab.dw,
            config: &self.config.aggregation,
        };
        Ok(iterate(tape, features, &ctx)?.features)
    }

    /// Fine reconstruction on the tape from a coarse video variable:
    /// remask → encode → graph → decode.
    pub fn fine(&self, tape: &mut Tape<T>, vars: &Bound, meas: &Measurement, masks: &MaskSet, coarse: Var, flows: &FlowStack) -> Result<Var> {
        let (h, w, b) = masks.dims();
        self.check_frames(b)?;
        if flows.len() != b || flows.dims() != (h, w, b) {
            return Err(shape(format!("flow stack {:?} vs video {h}x{w}x{b}", flows.dims())));
        }
        let re = self.remask(tape, meas, masks, coarse)?;
        let feats = self.encode(tape, vars, re)?;
        let enhanced = self.enhance_features(tape, vars, feats, flows)?;
        let out = self.decode(tape, vars, enhanced)?;
        if self.config.global_residual_to_coarse {
            Ok(tape.add(out, coarse)?)
        } else {
            Ok(out)
        }
    }

    /// Flow stack of a coarse video under this model's settings.
    pub fn flows_for(&self, coarse: &VideoCube) -> Result<FlowStack> {
        build_flow_stack(coarse, &self.config.flow)
    }

    /// BaseNet inference.
    pub fn basenet_reconstruct(&self, meas: &Measurement, masks: &MaskSet) -> Result<VideoCube> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let out = self.basenet(&mut tape, &vars, meas, masks)?;
        VideoCube::new(tape.value(out).cast(), Role::Coarse)
    }

    /// Enhance any coarse video; flow is estimated from it unless given.
    pub fn madygraph_forward(
        &self,
        meas: &Measurement,
        masks: &MaskSet,
        coarse: &VideoCube,
        flows: Option<&FlowStack>,
    ) -> Result<VideoCube> {
        let owned;
        let flows = match flows {
            Some(f) => f,
            None => {
                owned = self.flows_for(coarse)?;
                &owned
            }
        };
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let c = tape.constant(coarse.frames.cast())?;
        let out = self.fine(&mut tape, &vars, meas, masks, c, flows)?;
        VideoCube::new(tape.value(out).cast(), Role::Fine)
    }

    /// Sampled neighbours and relation weights of one query in the first
    /// aggregation round. `query` is `(column, row, frame)`.
    pub fn dump_graph(
        &self,
        meas: &Measurement,
        masks: &MaskSet,
        coarse: &VideoCube,
        flows: &FlowStack,
        query: (usize, usize, usize),
    ) -> Result<Vec<DumpRow>> {
        let (h, w, b) = masks.dims();
        self.check_frames(b)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape)?;
        let c = tape.constant(coarse.frames.cast())?;
        let re = self.remask(&mut tape, meas, masks, c)?;
        let feats = self.encode(&mut tape, &vars, re)?;
        let grid = self.config.effective_grid()?;
        let walks = if self.config.ablation.dw {
            let ff = tape.constant(flow_features::<T>(flows, self.config.ablation.ma))?;
            let (ww, wb) = (vars.get(self.layout.walk.weight), vars.get(self.layout.walk.bias));
            Some(predict_walks(&mut tape, feats, ff, ww, wb, grid.walk_clamp())?)
        } else {
            None
        };
        let (ew, eb) = self.layout.embed;
        let key = tape.pointwise(feats, vars.get(ew), Some(vars.get(eb)))?;
        let fw = tape.softplus(vars.get(self.layout.frame_weights.theta))?;
        let plan = AggregatePlan {
            temperature: self.config.aggregation.temperature(self.config.channels),
            grid,
        };
        let (qx, qy, qb) = query;
        if qx >= w || qy >= h {
            return Err(invalid(format!("query ({qx}, {qy}) outside {w}x{h}")));
        }
        let key_t = tape.value(key).clone();
        let weights = node_weights(&plan, &key_t, &key_t, walks.map(|v| tape.value(v)), tape.value(fw), (qy, qx, qb))?;
        Ok(weights
            .into_iter()
            .map(|(t, a)| DumpRow {
                query,
                neighbor: (t.frame, t.scale, t.index),
                pos_x: t.col.f64(),
                pos_y: t.row.f64(),
                weight: a.f64(),
            })
            .collect())
    }

    /// Write parameters and a manifest into `dir` (replaced atomically).
    pub fn save(&self, dir: &Path, extra: &KeyValues, moments: Option<(&ParamStore<T>, &ParamStore<T>)>) -> Result<()> {
        let tmp = partial_dir(dir);
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(tmp.join("params"))?;
        for (name, p) in self.store.iter() {
            tns::save(&p.value, tmp.join("params").join(format!("{name}.tns")))?;
        }
        if let Some((m, v)) = moments {
            fs::create_dir_all(tmp.join("adam"))?;
            for ((name, pm), (_, pv)) in m.iter().zip(v.iter()) {
                tns::save(&pm.value, tmp.join("adam").join(format!("m.{name}.tns")))?;
                tns::save(&pv.value, tmp.join("adam").join(format!("v.{name}.tns")))?;
            }
        }
        let mut kv = KeyValues::new();
        kv.set("format", CHECKPOINT_FORMAT);
        kv.set("dtype", format!("{:?}", T::DTYPE).to_lowercase());
        kv.set("params", self.store.len());
        kv.merge(&self.config.to_kv().with_prefix("model."));
        kv.merge(extra);
        fs::write(tmp.join(MANIFEST), kv.to_text())?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Load a checkpoint directory; returns the model and its manifest.
    pub fn load(dir: &Path) -> Result<(Self, KeyValues)> {
        let kv = read_manifest(dir)?;
        let config = ModelConfig::from_kv(&kv.strip_prefix("model."))?;
        let mut model = Self::new(config, 0)?;
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let path = dir.join("params").join(format!("{}.tns", model.store.name(id)));
            let t = tns::load::<T>(&path).map_err(|e| Error::File {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            model.store.set_value(id, t).map_err(|e| Error::File {
                path,
                msg: e.to_string(),
            })?;
        }
        Ok((model, kv))
    }

    /// Adam moments stored alongside the parameters, if any.
    pub fn load_moments(&self, dir: &Path) -> Result<Option<(ParamStore<T>, ParamStore<T>)>> {
        if !dir.join("adam").is_dir() {
            return Ok(None);
        }
        let mut m = self.store.clone();
        let mut v = self.store.clone();
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_owned();
            for (tag, st) in [("m", &mut m), ("v", &mut v)] {
                let path = dir.join("adam").join(format!("{tag}.{name}.tns"));
                let t = tns::load::<T>(&path).map_err(|e| Error::File {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
                st.set_value(id, t)?;
            }
        }
        Ok(Some((m, v)))
    }
}

fn partial_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".partial");
    dir.with_file_name(name)
}

pub fn read_manifest(dir: &Path) -> Result<KeyValues> {
    let path = dir.join(MANIFEST);
    let kv = KeyValues::load(&path)?;
    match kv.get_str("format") {
        Some(CHECKPOINT_FORMAT) => Ok(kv),
        other => Err(Error::File {
            path,
            msg: format!("not a checkpoint manifest (format {other:?})"),
        }),
    }
}

/// Frames mismatch between a checkpoint and data is a configuration error.
pub fn require_frames(config: &ModelConfig, b: usize) -> Result<()> {
    if config.frames != b {
        return Err(invalid(format!("checkpoint is for B = {}, data has B = {b}", config.frames)));
    }
    Ok(())
}
