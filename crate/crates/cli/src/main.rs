use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use madygraph::eval::{evaluate, export_frames, synthetic_scenes, Backbone, EvalScene, FrameFormat, MetricReport, RunManifest, SceneRow};
use madygraph::graph::write_dump_csv;
use madygraph::kv::KeyValues;
use madygraph::metrics::{psnr, ssim};
use madygraph::motion::{build_flow_stack, export_flow_stack, flow_to_rgb, import_flow_stack, FlowParams, FlowStack};
use madygraph::networks::{read_manifest, MadyGraphModel};
use madygraph::scenes::{gen_synthetic_scene, ShapeKind, SyntheticSceneSpec};
use madygraph::sci::{forward_measure, gap_tv_reconstruct, generate_masks, GapTvParams, MaskSet, Measurement, Role, VideoCube};
use madygraph::tensor::{io as tns, Real};
use madygraph::training::{run_masks, TrainConfig, Trainer, TRAIN_KEYS};

/// Environment variable naming a config file; it takes precedence over `--config`.
const CONFIG_ENV: &str = "MADYGRAPH_CONFIG";

#[derive(Parser, Debug)]
#[command(name = "madygraph", version, about = "Video snapshot compressive imaging toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Output directory (created; existing files with the same names are replaced).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Mask tensor `[H, W, B]`.
    #[arg(long, global = true)]
    masks: Option<PathBuf>,
    /// Run networks in f64 instead of f32.
    #[arg(long, global = true)]
    f64_checks: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene, masks and its measurement.
    Simulate {
        #[arg(long, default_value_t = 64)]
        h: usize,
        #[arg(long, default_value_t = 64)]
        w: usize,
        #[arg(long, default_value_t = 8)]
        b: usize,
        #[arg(long, default_value_t = 0.5)]
        density: f64,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 3)]
        objects: usize,
        #[arg(long, default_value_t = 2.0)]
        max_velocity: f64,
    },
    /// GAP-TV reconstruction of a measurement.
    Gaptv {
        #[arg(long)]
        meas: PathBuf,
    },
    /// BaseNet reconstruction from a checkpoint.
    Basenet {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        meas: PathBuf,
    },
    /// Enhance a coarse reconstruction.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        /// Precomputed flow stack; estimated from the coarse video otherwise.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Estimate the flow stack of a video.
    Flow {
        #[arg(long)]
        video: PathBuf,
        /// Also write a color visualisation per frame.
        #[arg(long)]
        png: bool,
    },
    /// Train BaseNet and the enhancer jointly.
    Train {
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the total step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Coarse vs enhanced PSNR/SSIM report.
    Eval {
        /// Compare a prediction directly against `--truth`.
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "gaptv", value_parser = ["basenet", "gaptv", "import"])]
        backbone: String,
        #[arg(long)]
        meas: Option<PathBuf>,
        #[arg(long)]
        coarse: Option<PathBuf>,
        /// Synthetic held-out scenes when no `--truth` is given.
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// Skip the enhancer (fine = coarse).
        #[arg(long)]
        bypass: bool,
    },
    /// Sampled neighbours and relation weights of one query pixel.
    DumpGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        coarse: PathBuf,
        /// `x,y,b` (column, row, frame).
        #[arg(long)]
        query: String,
        /// Keep only rows with a larger weight.
        #[arg(long, default_value_t = 0.0)]
        min_weight: f64,
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Write a video tensor as 8-bit frames.
    ExportFrames {
        #[arg(long)]
        video: PathBuf,
        #[arg(long, default_value = "png", value_parser = ["png", "pgm"])]
        format: String,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Simulate { .. } => "simulate",
            Self::Gaptv { .. } => "gaptv",
            Self::Basenet { .. } => "basenet",
            Self::Enhance { .. } => "enhance",
            Self::Flow { .. } => "flow",
            Self::Train { .. } => "train",
            Self::Eval { .. } => "eval",
            Self::DumpGraph { .. } => "dump-graph",
            Self::ExportFrames { .. } => "export-frames",
        }
    }
}

/// Files written into a hidden sibling directory and moved into `out` only
/// when the command succeeds.
struct Staging {
    out: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(out: &Path) -> Result<Self> {
        let name = out.file_name().ok_or_else(|| anyhow!("bad output path {}", out.display()))?;
        let tmp = out.with_file_name(format!(".{}.partial", name.to_string_lossy()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            tmp,
            committed: false,
        })
    }

    /// Staging path of `name` and its final location.
    fn file(&self, name: &str) -> (PathBuf, PathBuf) {
        (self.tmp.join(name), self.out.join(name))
    }

    fn commit(mut self, mut manifest: RunManifest) -> Result<()> {
        let mut names: Vec<_> = fs::read_dir(&self.tmp)?.map(|e| e.map(|e| e.file_name())).collect::<std::io::Result<_>>()?;
        names.sort();
        manifest.outputs = names.iter().map(|n| self.out.join(n)).collect();
        manifest.outputs.push(self.out.join("manifest.json"));
        manifest.write(&self.tmp.join("manifest.json"))?;
        names.push("manifest.json".into());
        fs::create_dir_all(&self.out)?;
        for n in names {
            let dst = self.out.join(&n);
            if dst.is_dir() {
                fs::remove_dir_all(&dst)?;
            }
            fs::rename(self.tmp.join(&n), dst)?;
        }
        fs::remove_dir_all(&self.tmp)?;
        self.committed = true;
        Ok(())
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

struct Ctx {
    global: Global,
    config: KeyValues,
    manifest: RunManifest,
}

impl Ctx {
    fn out(&self) -> Result<&Path> {
        self.global.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
    }

    fn seed(&self) -> u64 {
        self.global.seed.unwrap_or(0)
    }

    fn input(&mut self, p: &Path) -> PathBuf {
        self.manifest.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    fn masks(&mut self) -> Result<MaskSet> {
        let p = self.global.masks.clone().ok_or_else(|| anyhow!("--masks is required"))?;
        let p = self.input(&p);
        Ok(MaskSet::from_tensor(load(&p)?)?)
    }

    fn measurement(&mut self, p: &Path) -> Result<Measurement> {
        let p = self.input(p);
        Ok(Measurement::new(load(&p)?, 0.0)?)
    }

    fn video(&mut self, p: &Path, role: Role) -> Result<VideoCube> {
        let p = self.input(p);
        Ok(VideoCube::new(load(&p)?, role)?)
    }

    /// Reject config keys this command does not read.
    fn only_keys(&self, known: &[&str]) -> Result<()> {
        let unknown = self.config.unknown_keys(known);
        if !unknown.is_empty() {
            bail!("unknown config keys for {}: {}", self.manifest.command, unknown.join(", "));
        }
        Ok(())
    }
}

fn load(p: &Path) -> Result<madygraph::tensor::Tensor<f64>> {
    tns::load(p).with_context(|| format!("reading {}", p.display()))
}

const GAPTV_KEYS: &[&str] = &["gaptv_iterations", "tv_weight", "tv_inner"];
const FLOW_KEYS: &[&str] = &["flow_levels", "flow_alpha", "flow_iterations", "flow_warps", "max_displacement"];
const SCENE_KEYS: &[&str] = &["objects", "shapes", "max_velocity", "background_motion"];

fn gaptv_params(kv: &KeyValues) -> Result<GapTvParams> {
    let mut p = GapTvParams::default();
    kv.read_into("gaptv_iterations", &mut p.iterations)?;
    kv.read_into("tv_weight", &mut p.tv_weight)?;
    kv.read_into("tv_inner", &mut p.tv_inner)?;
    Ok(p)
}

fn flow_params(kv: &KeyValues) -> Result<FlowParams> {
    let mut p = FlowParams::default();
    kv.read_into("flow_levels", &mut p.levels)?;
    kv.read_into("flow_alpha", &mut p.alpha)?;
    kv.read_into("flow_iterations", &mut p.iterations)?;
    kv.read_into("flow_warps", &mut p.warps)?;
    kv.read_into("max_displacement", &mut p.max_displacement)?;
    Ok(p)
}

fn scene_spec(kv: &KeyValues, h: usize, w: usize, b: usize) -> Result<SyntheticSceneSpec> {
    let mut s = SyntheticSceneSpec {
        h,
        w,
        b,
        ..SyntheticSceneSpec::default()
    };
    kv.read_into("objects", &mut s.objects)?;
    kv.read_into("max_velocity", &mut s.max_velocity)?;
    kv.read_into("background_motion", &mut s.background_motion)?;
    if let Some(list) = kv.get_str("shapes") {
        s.kinds = list.split(',').map(|k| ShapeKind::parse(k.trim())).collect::<madygraph::Result<_>>()?;
    }
    Ok(s)
}

fn save(t: &madygraph::tensor::Tensor<f64>, path: &Path) -> Result<()> {
    tns::save(t, path).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from).or_else(|| cli.global.config.clone());
    let config = match &config_path {
        Some(p) => KeyValues::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => KeyValues::new(),
    };
    let mut manifest = RunManifest::new(cli.command.name(), std::env::args().collect()).with_config(&config);
    if let Some(p) = &config_path {
        manifest.inputs.push(p.clone());
    }
    let mut ctx = Ctx {
        global: cli.global,
        config,
        manifest,
    };
    if ctx.global.f64_checks {
        dispatch::<f64>(&mut ctx, cli.command)
    } else {
        dispatch::<f32>(&mut ctx, cli.command)
    }
}

fn dispatch<T: Real>(ctx: &mut Ctx, command: Command) -> Result<()> {
    match command {
        Command::Simulate {
            h,
            w,
            b,
            density,
            noise,
            objects,
            max_velocity,
        } => simulate(ctx, h, w, b, density, noise, objects, max_velocity),
        Command::Gaptv { meas } => gaptv(ctx, &meas),
        Command::Basenet { checkpoint, meas } => basenet::<T>(ctx, &checkpoint, &meas),
        Command::Enhance {
            checkpoint,
            meas,
            coarse,
            flow,
        } => enhance::<T>(ctx, &checkpoint, &meas, &coarse, flow.as_deref()),
        Command::Flow { video, png } => flow(ctx, &video, png),
        Command::Train { resume, steps } => train::<T>(ctx, resume.as_deref(), steps),
        Command::Eval {
            pred,
            truth,
            checkpoint,
            backbone,
            meas,
            coarse,
            scenes,
            bypass,
        } => match pred {
            Some(pred) => eval_direct(ctx, &pred, truth.as_deref(), coarse.as_deref()),
            None => {
                let checkpoint = checkpoint.ok_or_else(|| anyhow!("eval needs --pred or --checkpoint"))?;
                let inputs = EvalInputs {
                    truth,
                    meas,
                    coarse,
                    scenes,
                };
                eval_model::<T>(ctx, &checkpoint, &backbone, inputs, bypass)
            }
        },
        Command::DumpGraph {
            checkpoint,
            meas,
            coarse,
            query,
            min_weight,
            flow,
        } => dump_graph::<T>(ctx, &checkpoint, &meas, &coarse, &query, min_weight, flow.as_deref()),
        Command::ExportFrames { video, format } => export(ctx, &video, &format),
    }
}

#[allow(clippy::too_many_arguments)]
fn simulate(ctx: &mut Ctx, h: usize, w: usize, b: usize, density: f64, noise: f64, objects: usize, max_velocity: f64) -> Result<()> {
    ctx.only_keys(SCENE_KEYS)?;
    let mut spec = scene_spec(&ctx.config, h, w, b)?;
    spec.objects = objects;
    spec.max_velocity = max_velocity;
    spec.validate(FlowParams::default().max_displacement)?;
    let seed = ctx.seed();
    let masks = match ctx.global.masks.clone() {
        Some(_) => ctx.masks()?,
        None => generate_masks(h, w, b, seed ^ 0x6d61_736b, density)?,
    };
    if masks.dims() != (h, w, b) {
        bail!("masks {:?} do not match {h}x{w}x{b}", masks.dims());
    }
    let scene = gen_synthetic_scene(&spec, seed)?;
    let meas = forward_measure(&scene.video, &masks, noise, seed.wrapping_add(1))?;
    let stage = Staging::new(ctx.out()?)?;
    save(&scene.video.frames, &stage.file("truth.tns").0)?;
    save(&masks.masks, &stage.file("masks.tns").0)?;
    save(&meas.y, &stage.file("meas.tns").0)?;
    ctx.manifest.seed("seed", seed);
    stage.commit(ctx.manifest.clone())
}

fn gaptv(ctx: &mut Ctx, meas: &Path) -> Result<()> {
    ctx.only_keys(GAPTV_KEYS)?;
    let params = gaptv_params(&ctx.config)?;
    let meas = ctx.measurement(meas)?;
    let masks = ctx.masks()?;
    let out = gap_tv_reconstruct(&meas, &masks, &params)?;
    let stage = Staging::new(ctx.out()?)?;
    save(&out.video.frames, &stage.file("coarse.tns").0)?;
    let trace: String = out.trace.iter().enumerate().map(|(i, r)| format!("{},{r:.9e}\n", i + 1)).collect();
    fs::write(stage.file("trace.csv").0, format!("iteration,consistency_rmse\n{trace}"))?;
    stage.commit(ctx.manifest.clone())
}

fn load_model<T: Real>(ctx: &mut Ctx, checkpoint: &Path) -> Result<MadyGraphModel<T>> {
    let p = ctx.input(checkpoint);
    let (model, _) = MadyGraphModel::<T>::load(&p).with_context(|| format!("loading checkpoint {}", p.display()))?;
    Ok(model)
}

fn basenet<T: Real>(ctx: &mut Ctx, checkpoint: &Path, meas: &Path) -> Result<()> {
    ctx.only_keys(&[])?;
    let model = load_model::<T>(ctx, checkpoint)?;
    let meas = ctx.measurement(meas)?;
    let masks = ctx.masks()?;
    let coarse = model.basenet_reconstruct(&meas, &masks)?;
    let stage = Staging::new(ctx.out()?)?;
    save(&coarse.frames, &stage.file("coarse.tns").0)?;
    stage.commit(ctx.manifest.clone())
}

fn flows_for<T: Real>(ctx: &mut Ctx, model: &MadyGraphModel<T>, coarse: &VideoCube, flow: Option<&Path>) -> Result<FlowStack> {
    let stack = match flow {
        Some(p) => {
            let p = ctx.input(p);
            import_flow_stack(&p, model.config.flow.max_displacement)?
        }
        None => model.flows_for(coarse)?,
    };
    if stack.dims() != coarse.dims() {
        bail!("flow stack {:?} does not match video {:?}", stack.dims(), coarse.dims());
    }
    Ok(stack)
}

fn enhance<T: Real>(ctx: &mut Ctx, checkpoint: &Path, meas: &Path, coarse: &Path, flow: Option<&Path>) -> Result<()> {
    ctx.only_keys(&[])?;
    let model = load_model::<T>(ctx, checkpoint)?;
    let meas = ctx.measurement(meas)?;
    let masks = ctx.masks()?;
    let coarse = ctx.video(coarse, Role::Coarse)?;
    let flows = flows_for(ctx, &model, &coarse, flow)?;
    let fine = model.madygraph_forward(&meas, &masks, &coarse, Some(&flows))?;
    let stage = Staging::new(ctx.out()?)?;
    save(&fine.frames, &stage.file("fine.tns").0)?;
    stage.commit(ctx.manifest.clone())
}

fn flow(ctx: &mut Ctx, video: &Path, png: bool) -> Result<()> {
    ctx.only_keys(FLOW_KEYS)?;
    let params = flow_params(&ctx.config)?;
    let video = ctx.video(video, Role::Coarse)?;
    let stack = build_flow_stack(&video, &params)?;
    let stage = Staging::new(ctx.out()?)?;
    export_flow_stack(&stack, stage.file("flow.tns").0)?;
    if png {
        for (k, f) in stack.fields.iter().enumerate() {
            flow_to_rgb(f, Some(params.max_displacement)).save(stage.file(&format!("flow_{k:03}.png")).0)?;
        }
    }
    stage.commit(ctx.manifest.clone())
}

fn train<T: Real>(ctx: &mut Ctx, resume: Option<&Path>, steps: Option<usize>) -> Result<()> {
    let out = ctx.out()?.to_path_buf();
    let mut trainer = match resume {
        Some(dir) => {
            ctx.only_keys(&[])?;
            let dir = ctx.input(dir);
            Trainer::<T>::resume(&dir).with_context(|| format!("resuming from {}", dir.display()))?
        }
        None => {
            let model_keys: Vec<String> = madygraph::networks::ModelConfig::default().to_kv().keys().map(str::to_string).collect();
            let known: Vec<&str> = TRAIN_KEYS.iter().copied().chain(model_keys.iter().map(String::as_str)).collect();
            ctx.only_keys(&known)?;
            let mut config = TrainConfig::from_kv(&ctx.config)?;
            if let Some(seed) = ctx.global.seed {
                config.seed = seed;
            }
            Trainer::<T>::new(config)?
        }
    };
    if let Some(n) = steps {
        trainer.config.steps = n;
    }
    ctx.manifest = ctx.manifest.clone().with_config(&trainer.config.to_kv());
    ctx.manifest.seed("seed", trainer.config.seed);
    ctx.manifest.outputs = vec![out.join("log.csv"), out.join("checkpoint"), out.join("manifest.json")];
    fs::create_dir_all(&out)?;
    ctx.manifest.write(&out.join("manifest.json"))?;
    let rows = trainer.run(&out, |_| false)?;
    if let Some(last) = rows.last() {
        println!(
            "step {}: fine {:.2} dB, coarse {:.2} dB",
            last.step, last.psnr_fine, last.psnr_coarse
        );
    }
    Ok(())
}

fn write_report(ctx: &mut Ctx, report: &MetricReport) -> Result<()> {
    let stage = Staging::new(ctx.out()?)?;
    fs::write(stage.file("report.csv").0, report.to_csv())?;
    fs::write(stage.file("report.json").0, report.to_json()?)?;
    print!("{}", report.to_csv());
    stage.commit(ctx.manifest.clone())
}

fn eval_direct(ctx: &mut Ctx, pred: &Path, truth: Option<&Path>, coarse: Option<&Path>) -> Result<()> {
    ctx.only_keys(&[])?;
    let truth = truth.ok_or_else(|| anyhow!("--pred needs --truth"))?;
    let truth = ctx.video(truth, Role::GroundTruth)?;
    let pred = ctx.video(pred, Role::Fine)?;
    let coarse = match coarse {
        Some(p) => ctx.video(p, Role::Coarse)?,
        None => pred.clone(),
    };
    let (cp, fp) = (psnr(&coarse, &truth)?, psnr(&pred, &truth)?);
    let row = SceneRow {
        scene: "pred".into(),
        coarse_psnr: cp,
        coarse_ssim: ssim(&coarse, &truth)?,
        fine_psnr: fp,
        fine_ssim: ssim(&pred, &truth)?,
        delta_psnr: fp - cp,
        coarse_seconds: 0.0,
        fine_seconds: 0.0,
    };
    let report = MetricReport::new("direct", vec![row])?;
    write_report(ctx, &report)
}

struct EvalInputs {
    truth: Option<PathBuf>,
    meas: Option<PathBuf>,
    coarse: Option<PathBuf>,
    scenes: usize,
}

fn eval_model<T: Real>(ctx: &mut Ctx, checkpoint: &Path, backbone: &str, inputs: EvalInputs, bypass: bool) -> Result<()> {
    let known: Vec<&str> = GAPTV_KEYS.iter().chain(SCENE_KEYS).copied().collect();
    ctx.only_keys(&known)?;
    let model = load_model::<T>(ctx, checkpoint)?;
    let backbone = match backbone {
        "basenet" => Backbone::BaseNet,
        "gaptv" => Backbone::GapTv(gaptv_params(&ctx.config)?),
        _ => Backbone::Import,
    };
    let scenes = match inputs.truth {
        Some(truth) => {
            let meas = inputs.meas.ok_or_else(|| anyhow!("--truth needs --meas"))?;
            let scene = EvalScene {
                name: truth.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                truth: ctx.video(&truth, Role::GroundTruth)?,
                masks: ctx.masks()?,
                measurement: ctx.measurement(&meas)?,
                coarse: match &inputs.coarse {
                    Some(p) => Some(ctx.video(p, Role::Coarse)?),
                    None => None,
                },
            };
            vec![scene]
        }
        None => {
            if matches!(backbone, Backbone::Import) {
                bail!("the import backbone needs --truth, --meas and --coarse");
            }
            let kv = read_manifest(checkpoint)?;
            let train = TrainConfig::from_kv(&kv.strip_prefix("train."))?;
            let masks = match ctx.global.masks.clone() {
                Some(_) => ctx.masks()?,
                None => run_masks(&train)?,
            };
            let (h, w, b) = masks.dims();
            let spec = scene_spec(&ctx.config, h, w, b)?;
            let seed = ctx.global.seed.unwrap_or(train.seed.wrapping_add(1));
            ctx.manifest.seed("scene_seed", seed);
            synthetic_scenes(&spec, seed, inputs.scenes, &masks, 0.0)?
        }
    };
    let report = evaluate(&model, &scenes, &backbone, bypass)?;
    write_report(ctx, &report)
}

fn parse_query(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("--query {s:?}: expected x,y,b"))?;
    match parts[..] {
        [x, y, b] => Ok((x, y, b)),
        _ => bail!("--query {s:?}: expected x,y,b"),
    }
}

fn dump_graph<T: Real>(
    ctx: &mut Ctx,
    checkpoint: &Path,
    meas: &Path,
    coarse: &Path,
    query: &str,
    min_weight: f64,
    flow: Option<&Path>,
) -> Result<()> {
    ctx.only_keys(&[])?;
    let query = parse_query(query)?;
    let model = load_model::<T>(ctx, checkpoint)?;
    let meas = ctx.measurement(meas)?;
    let masks = ctx.masks()?;
    let coarse = ctx.video(coarse, Role::Coarse)?;
    let flows = flows_for(ctx, &model, &coarse, flow)?;
    let rows: Vec<_> = model
        .dump_graph(&meas, &masks, &coarse, &flows, query)?
        .into_iter()
        .filter(|r| r.weight > min_weight)
        .collect();
    let stage = Staging::new(ctx.out()?)?;
    let mut buf = Vec::new();
    write_dump_csv(&rows, &mut buf)?;
    fs::write(stage.file("graph.csv").0, buf)?;
    stage.commit(ctx.manifest.clone())
}

fn export(ctx: &mut Ctx, video: &Path, format: &str) -> Result<()> {
    ctx.only_keys(&[])?;
    let format = FrameFormat::parse(format)?;
    let video = ctx.video(video, Role::Fine)?;
    let stage = Staging::new(ctx.out()?)?;
    export_frames(&video, &stage.file("frames").0, format)?;
    stage.commit(ctx.manifest.clone())
}
