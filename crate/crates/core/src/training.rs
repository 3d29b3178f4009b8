//! Losses, Adam, data sources and the joint BaseNet + enhancer training loop.
//!
//! All per-step randomness (scene choice, masks, noise) is drawn from a
//! generator seeded by `(seed, step)`, so a resumed run replays exactly
//! the steps an uninterrupted one would have taken.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mady_tensor::{ParamStore, Real, Result as TResult, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::kv::KeyValues;
use crate::metrics::psnr;
use crate::networks::{read_manifest, MadyGraphModel, ModelConfig};
use crate::scenes::{gen_synthetic_batch, ShapeKind, SyntheticSceneSpec};
use crate::sci::{forward_measure, generate_masks, MaskSet, Role, VideoCube};

/// `(1/BHW) Σ (pred − truth)²` for two videos.
pub fn mse_loss(pred: &VideoCube, truth: &VideoCube) -> Result<f64> {
    if pred.dims() != truth.dims() {
        return Err(shape(format!("prediction {:?} vs truth {:?}", pred.dims(), truth.dims())));
    }
    let n = pred.frames.len() as f64;
    Ok(pred.frames.data().iter().zip(truth.frames.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// `mse(fine, truth) + mse(coarse, truth)`.
pub fn joint_loss(fine: &VideoCube, coarse: &VideoCube, truth: &VideoCube) -> Result<f64> {
    Ok(mse_loss(fine, truth)? + mse_loss(coarse, truth)?)
}

/// Mean squared error on the tape against a constant target.
pub fn mse_on_tape<T: Real>(tape: &mut Tape<T>, pred: Var, truth: &Tensor<T>) -> TResult<Var> {
    let t = tape.constant(truth.clone())?;
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        let mut m = params.clone();
        for (_, p) in m.iter_mut() {
            p.value.fill(T::zero());
            p.grad.fill(T::zero());
        }
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    /// Apply one update from the gradients held in `params`.
    pub fn update(&mut self, params: &mut ParamStore<T>) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let p = params.get_mut(id);
            let m = &mut self.m.get_mut(id).value;
            let v = &mut self.v.get_mut(id).value;
            for i in 0..p.value.len() {
                let g = p.grad[i].f64();
                let mi = b1 * m[i].f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].f64() + (1.0 - b2) * g * g;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                let upd = self.lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                p.value[i] = T::of(p.value[i].f64() - upd);
            }
        }
    }
}

/// Rescale all gradients so their joint L2 norm is at most `max_norm`
/// (0 leaves them alone). Returns the norm before rescaling.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let ids: Vec<_> = params.ids().collect();
    let norm = ids
        .iter()
        .map(|&id| params.get_mut(id).grad.data().iter().map(|g| g.f64() * g.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for id in ids {
            for g in params.get_mut(id).grad.data_mut().iter_mut() {
                *g = T::of(g.f64() * scale);
            }
        }
    }
    norm
}

/// Where training videos come from.
#[derive(Clone, Debug)]
pub enum DataSource {
    /// A fixed pool of synthetic scenes (`pool` scenes drawn once from the seed).
    Synthetic { spec: SyntheticSceneSpec, pool: usize },
    /// Directory of frames cut into cubes.
    Frames { dir: PathBuf, stride: usize },
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub crop: usize,
    pub noise_sigma: f64,
    pub mask_density: f64,
    /// One mask set for the whole run instead of fresh masks per sample.
    pub fixed_masks: bool,
    pub checkpoint_every: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub data: DataSource,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 2,
            steps: 2000,
            seed: 0,
            crop: 64,
            noise_sigma: 0.0,
            mask_density: 0.5,
            fixed_masks: true,
            checkpoint_every: 500,
            grad_clip: 0.1,
            data: DataSource::Synthetic {
                spec: SyntheticSceneSpec::default(),
                pool: 1,
            },
            model: ModelConfig::default(),
        }
    }
}

/// Keys a training config file may hold besides the model keys.
pub const TRAIN_KEYS: &[&str] = &[
    "learning_rate",
    "batch_size",
    "steps",
    "seed",
    "crop",
    "noise_sigma",
    "mask_density",
    "fixed_masks",
    "checkpoint_every",
    "grad_clip",
    "scenes",
    "objects",
    "shapes",
    "max_velocity",
    "background_motion",
    "frames_dir",
    "stride",
];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.crop == 0 {
            return Err(Error::Config("batch_size and crop must be positive".into()));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::Config(format!("grad_clip must be >= 0, got {}", self.grad_clip)));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        if !(self.mask_density > 0.0 && self.mask_density <= 1.0) {
            return Err(Error::Config("mask_density must lie in (0, 1]".into()));
        }
        if let DataSource::Synthetic { spec, pool } = &self.data {
            if *pool == 0 {
                return Err(Error::Config("scenes must be positive".into()));
            }
            spec.validate(self.model.flow.max_displacement)?;
            if spec.h != self.crop || spec.w != self.crop || spec.b != self.model.frames {
                return Err(Error::Config("synthetic scene size must match crop and frames".into()));
            }
        }
        self.model.validate()
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.set("learning_rate", self.learning_rate);
        kv.set("batch_size", self.batch_size);
        kv.set("steps", self.steps);
        kv.set("seed", self.seed);
        kv.set("crop", self.crop);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("mask_density", self.mask_density);
        kv.set("fixed_masks", self.fixed_masks);
        kv.set("checkpoint_every", self.checkpoint_every);
        kv.set("grad_clip", self.grad_clip);
        match &self.data {
            DataSource::Synthetic { spec, pool } => {
                kv.set("scenes", pool);
                kv.set("objects", spec.objects);
                kv.set("shapes", spec.kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(","));
                kv.set("max_velocity", spec.max_velocity);
                kv.set("background_motion", spec.background_motion);
            }
            DataSource::Frames { dir, stride } => {
                kv.set("frames_dir", dir.display());
                kv.set("stride", stride);
            }
        }
        kv
    }

    /// Defaults overridden by `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let model_keys: Vec<String> = ModelConfig::default().to_kv().keys().map(str::to_owned).collect();
        let mut known: Vec<&str> = TRAIN_KEYS.to_vec();
        known.extend(model_keys.iter().map(String::as_str));
        let unknown = kv.unknown_keys(&known);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let mut c = Self {
            model: ModelConfig::from_kv(kv)?,
            ..Self::default()
        };
        kv.read_into("learning_rate", &mut c.learning_rate)?;
        kv.read_into("batch_size", &mut c.batch_size)?;
        kv.read_into("steps", &mut c.steps)?;
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("crop", &mut c.crop)?;
        kv.read_into("noise_sigma", &mut c.noise_sigma)?;
        kv.read_into("mask_density", &mut c.mask_density)?;
        kv.read_into("fixed_masks", &mut c.fixed_masks)?;
        kv.read_into("checkpoint_every", &mut c.checkpoint_every)?;
        kv.read_into("grad_clip", &mut c.grad_clip)?;
        if let Some(dir) = kv.get_str("frames_dir") {
            let mut stride = c.model.frames;
            kv.read_into("stride", &mut stride)?;
            c.data = DataSource::Frames { dir: dir.into(), stride };
        } else {
            let mut spec = SyntheticSceneSpec {
                h: c.crop,
                w: c.crop,
                b: c.model.frames,
                ..SyntheticSceneSpec::default()
            };
            let mut pool = 1;
            kv.read_into("scenes", &mut pool)?;
            kv.read_into("objects", &mut spec.objects)?;
            kv.read_into("max_velocity", &mut spec.max_velocity)?;
            kv.read_into("background_motion", &mut spec.background_motion)?;
            if let Some(s) = kv.get_str("shapes") {
                spec.kinds = s.split(',').filter(|x| !x.trim().is_empty()).map(ShapeKind::parse).collect::<Result<_>>()?;
            }
            c.data = DataSource::Synthetic { spec, pool };
        }
        c.validate()?;
        Ok(c)
    }
}

fn frame_number(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem.chars().rev().take_while(char::is_ascii_digit).collect();
    digits.chars().rev().collect::<String>().parse().ok()
}

/// Numerically ordered 8-bit grayscale frames of a directory, in `[0, 1]`.
pub fn read_frames_dir(dir: &Path) -> Result<Vec<Tensor<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::File {
            path: dir.into(),
            msg: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                Some("pgm" | "png")
            )
        })
        .collect();
    paths.sort_by_key(|p| (frame_number(p), p.clone()));
    let mut frames = Vec::with_capacity(paths.len());
    let mut size = None;
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| Error::File {
                path: p.clone(),
                msg: e.to_string(),
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(Error::File {
                path: p.clone(),
                msg: format!("frame is {h}x{w}, expected {:?}", size.unwrap()),
            });
        }
        let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
        frames.push(Tensor::from_vec([h as usize, w as usize], data)?);
    }
    Ok(frames)
}

/// Random `crop × crop` windows over every run of `b` consecutive frames
/// starting at multiples of `stride`.
pub fn ingest_frames_dir(dir: &Path, crop: usize, b: usize, stride: usize, seed: u64) -> Result<Vec<VideoCube>> {
    if b == 0 || stride == 0 || crop == 0 {
        return Err(invalid("crop, B and stride must be positive"));
    }
    let frames = read_frames_dir(dir)?;
    if frames.len() < b {
        return Err(invalid(format!("{} holds {} frames, need at least {b}", dir.display(), frames.len())));
    }
    let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
    if crop > h || crop > w {
        return Err(invalid(format!("crop {crop} exceeds frame size {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut start = 0;
    while start + b <= frames.len() {
        let (r0, c0) = (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop));
        let cube = Tensor::from_fn([crop, crop, b], |i| {
            let (p, k) = (i / b, i % b);
            frames[start + k].at(&[r0 + p / crop, c0 + p % crop])
        });
        out.push(VideoCube::new(cube, Role::GroundTruth)?);
        start += stride;
    }
    Ok(out)
}

/// Training videos materialised from a [`DataSource`].
pub fn load_pool(config: &TrainConfig) -> Result<Vec<VideoCube>> {
    match &config.data {
        DataSource::Synthetic { spec, pool } => Ok(gen_synthetic_batch(spec, config.seed, *pool)?
            .into_iter()
            .map(|s| s.video)
            .collect()),
        DataSource::Frames { dir, stride } => ingest_frames_dir(dir, config.crop, config.model.frames, *stride, config.seed),
    }
}

/// The fixed mask set a run with this config trains under.
pub fn run_masks(config: &TrainConfig) -> Result<MaskSet> {
    generate_masks(config.crop, config.crop, config.model.frames, config.seed ^ 0x6d61_736b, config.mask_density)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_fine: f64,
    pub loss_coarse: f64,
    pub psnr_fine: f64,
    pub psnr_coarse: f64,
    /// Gradient norm before clipping; not part of the CSV.
    pub grad_norm: f64,
    pub wall_ms: f64,
}

pub const LOG_HEADER: &str = "step,loss_fine,loss_coarse,psnr_fine,psnr_coarse,wall_ms";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.9e},{:.9e},{:.4},{:.4},{:.1}",
            self.step, self.loss_fine, self.loss_coarse, self.psnr_fine, self.psnr_coarse, self.wall_ms
        )
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64 + 1);
    rng
}

/// One training sample: measurement setup plus ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    /// Index into the training pool.
    pub source: usize,
    pub truth: VideoCube,
    /// Seed of per-sample masks; `None` for the run's fixed masks.
    pub mask_seed: Option<u64>,
    pub masks: MaskSet,
    pub noise_seed: u64,
}

/// Collapse identical samples into `(sample, multiplicity)`; two draws of
/// the same scene, masks and noise give the same gradient.
pub fn distinct_samples(samples: Vec<Sample>, noise_sigma: f64) -> Vec<(Sample, usize)> {
    let mut out: Vec<(Sample, usize)> = Vec::new();
    for s in samples {
        let same = |o: &Sample| {
            o.source == s.source && o.mask_seed == s.mask_seed && (noise_sigma == 0.0 || o.noise_seed == s.noise_seed)
        };
        match out.iter_mut().find(|(o, _)| same(o)) {
            Some((_, n)) => *n += 1,
            None => out.push((s, 1)),
        }
    }
    out
}

/// State of a training run.
pub struct Trainer<T: Real> {
    pub config: TrainConfig,
    pub model: MadyGraphModel<T>,
    pub adam: Adam<T>,
    pub step: usize,
    pool: Vec<VideoCube>,
    run_masks: MaskSet,
}

/// Values of one forward/backward over a sample.
#[derive(Clone, Debug)]
pub struct SampleOutcome {
    pub loss_fine: f64,
    pub loss_coarse: f64,
    pub fine: VideoCube,
    pub coarse: VideoCube,
}

/// Forward and backward of the joint loss on one sample; gradients are
/// added into the model's store scaled by `weight`.
pub fn accumulate_sample<T: Real>(model: &mut MadyGraphModel<T>, sample: &Sample, noise_sigma: f64, weight: f64) -> Result<SampleOutcome> {
    let meas = forward_measure(&sample.truth, &sample.masks, noise_sigma, sample.noise_seed)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape)?;
    let coarse = model.basenet(&mut tape, &vars, &meas, &sample.masks)?;
    let coarse_video = VideoCube::new(tape.value(coarse).cast(), Role::Coarse)?;
    let flows = model.flows_for(&coarse_video)?;
    let fine = model.fine(&mut tape, &vars, &meas, &sample.masks, coarse, &flows)?;
    let truth: Tensor<T> = sample.truth.frames.cast();
    let lf = mse_on_tape(&mut tape, fine, &truth)?;
    let lc = mse_on_tape(&mut tape, coarse, &truth)?;
    let total = tape.add(lf, lc)?;
    let scaled = tape.scale(total, T::of(weight))?;
    let (loss_fine, loss_coarse) = (tape.value(lf).item().f64(), tape.value(lc).item().f64());
    let outcome = SampleOutcome {
        loss_fine,
        loss_coarse,
        fine: VideoCube::new(tape.value(fine).cast(), Role::Fine)?,
        coarse: coarse_video,
    };
    if loss_fine.is_finite() && loss_coarse.is_finite() {
        tape.backward_into(scaled, &mut model.store)?;
    }
    Ok(outcome)
}

impl<T: Real> Trainer<T> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = MadyGraphModel::new(config.model.clone(), config.seed)?;
        Self::with_model(config, model)
    }

    fn with_model(config: TrainConfig, model: MadyGraphModel<T>) -> Result<Self> {
        let pool = load_pool(&config)?;
        if pool.is_empty() {
            return Err(invalid("training data is empty"));
        }
        let run_masks = run_masks(&config)?;
        let adam = Adam::new(&model.store, config.learning_rate);
        Ok(Self {
            config,
            model,
            adam,
            step: 0,
            pool,
            run_masks,
        })
    }

    /// Resume from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(dir: &Path) -> Result<Self> {
        let kv = read_manifest(dir)?;
        let config = TrainConfig::from_kv(&kv.strip_prefix("train."))?;
        let (model, _) = MadyGraphModel::load(dir)?;
        let mut t = Self::with_model(config, model)?;
        let step: usize = kv.get("step")?.ok_or_else(|| Error::Config("checkpoint has no step".into()))?;
        t.step = step;
        t.adam.step = kv.get("adam_step")?.unwrap_or(step as u64);
        if let Some((m, v)) = t.model.load_moments(dir)? {
            t.adam.m = m;
            t.adam.v = v;
        }
        Ok(t)
    }

    /// The samples of step `step`.
    pub fn samples(&self, step: usize) -> Result<Vec<Sample>> {
        let mut rng = step_rng(self.config.seed, step);
        (0..self.config.batch_size)
            .map(|_| {
                let source = rng.random_range(0..self.pool.len());
                let truth = self.pool[source].clone();
                let (mask_seed, masks) = if self.config.fixed_masks {
                    (None, self.run_masks.clone())
                } else {
                    let (h, w, b) = truth.dims();
                    let seed = rng.random();
                    (Some(seed), generate_masks(h, w, b, seed, self.config.mask_density)?)
                };
                Ok(Sample {
                    source,
                    truth,
                    mask_seed,
                    masks,
                    noise_seed: rng.random(),
                })
            })
            .collect()
    }

    /// One optimisation step; returns the log row and one outcome per
    /// distinct sample.
    pub fn train_step(&mut self) -> Result<(LogRow, Vec<SampleOutcome>)> {
        let t0 = Instant::now();
        let total = self.config.batch_size as f64;
        let samples = distinct_samples(self.samples(self.step)?, self.config.noise_sigma);
        self.model.store.zero_grad();
        let mut outcomes = Vec::with_capacity(samples.len());
        let mut row = LogRow {
            step: self.step + 1,
            loss_fine: 0.0,
            loss_coarse: 0.0,
            psnr_fine: 0.0,
            psnr_coarse: 0.0,
            grad_norm: 0.0,
            wall_ms: 0.0,
        };
        for (s, count) in &samples {
            let weight = *count as f64 / total;
            let o = accumulate_sample(&mut self.model, s, self.config.noise_sigma, weight)?;
            row.loss_fine += o.loss_fine * weight;
            row.loss_coarse += o.loss_coarse * weight;
            row.psnr_fine += psnr(&o.fine, &s.truth)? * weight;
            row.psnr_coarse += psnr(&o.coarse, &s.truth)? * weight;
            outcomes.push(o);
        }
        if !(row.loss_fine.is_finite() && row.loss_coarse.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: row.step,
                dir: PathBuf::new(),
            });
        }
        row.grad_norm = clip_grad_norm(&mut self.model.store, self.config.grad_clip);
        self.adam.update(&mut self.model.store);
        self.step += 1;
        row.wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok((row, outcomes))
    }

    /// Save parameters, Adam moments, step and the full config.
    pub fn checkpoint(&self, dir: &Path) -> Result<()> {
        let mut kv = self.config.to_kv().with_prefix("train.");
        kv.set("step", self.step);
        kv.set("adam_step", self.adam.step);
        kv.set("seed", self.config.seed);
        self.model.save(dir, &kv, Some((&self.adam.m, &self.adam.v)))
    }

    /// Train until `config.steps`, writing `log.csv` and checkpoints under
    /// `out`. `stop` may end the run early after any step.
    pub fn run(&mut self, out: &Path, mut stop: impl FnMut(&LogRow) -> bool) -> Result<Vec<LogRow>> {
        fs::create_dir_all(out)?;
        let log_path = out.join("log.csv");
        let mut log = if self.step == 0 || !log_path.exists() {
            let mut f = fs::File::create(&log_path)?;
            writeln!(f, "{LOG_HEADER}")?;
            f
        } else {
            fs::OpenOptions::new().append(true).open(&log_path)?
        };
        let mut rows = Vec::new();
        while self.step < self.config.steps {
            let row = match self.train_step() {
                Ok((row, _)) => row,
                Err(Error::NonFiniteLoss { step, .. }) => {
                    let dir = out.join(format!("nonfinite-step{step}"));
                    self.checkpoint(&dir)?;
                    return Err(Error::NonFiniteLoss { step, dir });
                }
                Err(e) => return Err(e),
            };
            writeln!(log, "{}", row.csv())?;
            log::info!("{} grad_norm={:.3e}", row.csv(), row.grad_norm);
            let done = stop(&row);
            rows.push(row);
            if self.config.checkpoint_every > 0 && self.step.is_multiple_of(self.config.checkpoint_every) {
                self.checkpoint(&out.join("checkpoint"))?;
            }
            if done {
                break;
            }
        }
        log.flush()?;
        self.checkpoint(&out.join("checkpoint"))?;
        Ok(rows)
    }
}
