//! Coarse-vs-enhanced evaluation reports and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mady_tensor::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::kv::KeyValues;
use crate::metrics::{psnr, ssim};
use crate::networks::MadyGraphModel;
use crate::scenes::{gen_synthetic_batch, SyntheticSceneSpec};
use crate::sci::{forward_measure, gap_tv_reconstruct, GapTvParams, MaskSet, Measurement, Role, VideoCube};

/// Where coarse reconstructions come from.
#[derive(Clone, Debug)]
pub enum Backbone {
    BaseNet,
    GapTv(GapTvParams),
    /// Coarse videos supplied with each scene.
    Import,
}

impl Backbone {
    pub fn label(&self) -> &'static str {
        match self {
            Self::BaseNet => "basenet",
            Self::GapTv(_) => "gaptv",
            Self::Import => "import",
        }
    }
}

/// One measurement with its ground truth.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub name: String,
    pub truth: VideoCube,
    pub masks: MaskSet,
    pub measurement: Measurement,
    /// Coarse video for [`Backbone::Import`].
    pub coarse: Option<VideoCube>,
}

/// `count` synthetic scenes measured through `masks`.
pub fn synthetic_scenes(spec: &SyntheticSceneSpec, seed: u64, count: usize, masks: &MaskSet, noise_sigma: f64) -> Result<Vec<EvalScene>> {
    gen_synthetic_batch(spec, seed, count)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let measurement = forward_measure(&s.video, masks, noise_sigma, seed.wrapping_add(i as u64))?;
            Ok(EvalScene {
                name: format!("scene{i:03}"),
                truth: s.video,
                masks: masks.clone(),
                measurement,
                coarse: None,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRow {
    pub scene: String,
    pub coarse_psnr: f64,
    pub coarse_ssim: f64,
    pub fine_psnr: f64,
    pub fine_ssim: f64,
    pub delta_psnr: f64,
    /// Wall time of the coarse reconstruction, seconds.
    pub coarse_seconds: f64,
    /// Wall time of the enhancement, seconds.
    pub fine_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub rows: Vec<SceneRow>,
    /// Arithmetic mean of every column.
    pub mean: SceneRow,
}

pub const REPORT_HEADER: &str = "scene,coarse_psnr,coarse_ssim,fine_psnr,fine_ssim,delta_psnr,coarse_seconds,fine_seconds";

impl MetricReport {
    pub fn new(method: impl Into<String>, rows: Vec<SceneRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid("report needs at least one scene"));
        }
        let n = rows.len() as f64;
        let avg = |f: fn(&SceneRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let mean = SceneRow {
            scene: "mean".into(),
            coarse_psnr: avg(|r| r.coarse_psnr),
            coarse_ssim: avg(|r| r.coarse_ssim),
            fine_psnr: avg(|r| r.fine_psnr),
            fine_ssim: avg(|r| r.fine_ssim),
            delta_psnr: avg(|r| r.delta_psnr),
            coarse_seconds: avg(|r| r.coarse_seconds),
            fine_seconds: avg(|r| r.fine_seconds),
        };
        Ok(Self {
            method: method.into(),
            rows,
            mean,
        })
    }

    /// Per-scene rows followed by the mean row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean)) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.scene, r.coarse_psnr, r.coarse_ssim, r.fine_psnr, r.fine_ssim, r.delta_psnr, r.coarse_seconds, r.fine_seconds
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Coarse reconstruction of one scene, timed.
pub fn coarse_for<T: Real>(model: &MadyGraphModel<T>, scene: &EvalScene, backbone: &Backbone) -> Result<(VideoCube, f64)> {
    let t0 = Instant::now();
    let video = match backbone {
        Backbone::BaseNet => model.basenet_reconstruct(&scene.measurement, &scene.masks)?,
        Backbone::GapTv(p) => gap_tv_reconstruct(&scene.measurement, &scene.masks, p)?.video,
        Backbone::Import => scene
            .coarse
            .clone()
            .ok_or_else(|| invalid(format!("{}: no imported coarse video", scene.name)))?
            .with_role(Role::Coarse),
    };
    Ok((video, t0.elapsed().as_secs_f64()))
}

/// Coarse and enhanced metrics for every scene. With `bypass` the enhancer
/// is skipped and the fine output is the coarse video.
pub fn evaluate<T: Real>(model: &MadyGraphModel<T>, scenes: &[EvalScene], backbone: &Backbone, bypass: bool) -> Result<MetricReport> {
    let rows = scenes
        .par_iter()
        .map(|s| {
            let (coarse, coarse_seconds) = coarse_for(model, s, backbone)?;
            let t0 = Instant::now();
            let fine = if bypass {
                coarse.clone().with_role(Role::Fine)
            } else {
                model.madygraph_forward(&s.measurement, &s.masks, &coarse, None)?
            };
            let fine_seconds = t0.elapsed().as_secs_f64();
            let (coarse_psnr, fine_psnr) = (psnr(&coarse, &s.truth)?, psnr(&fine, &s.truth)?);
            Ok(SceneRow {
                scene: s.name.clone(),
                coarse_psnr,
                coarse_ssim: ssim(&coarse, &s.truth)?,
                fine_psnr,
                fine_ssim: ssim(&fine, &s.truth)?,
                delta_psnr: fine_psnr - coarse_psnr,
                coarse_seconds,
                fine_seconds,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let method = format!("{}{}", backbone.label(), if bypass { "" } else { "+madygraph" });
    MetricReport::new(method, rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFormat {
    Png,
    Pgm,
}

impl FrameFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "png" => Ok(Self::Png),
            "pgm" => Ok(Self::Pgm),
            other => Err(invalid(format!("unknown frame format {other:?} (png or pgm)"))),
        }
    }

    fn extension(self) -> &'static str {
        match self {
            Self::Png => "png",
            Self::Pgm => "pgm",
        }
    }
}

/// Write every frame as an 8-bit image `frame_000.png`, ... into `dir`,
/// which must not exist yet. Values are clipped to [0, 1] then scaled.
pub fn export_frames(video: &VideoCube, dir: &Path, format: FrameFormat) -> Result<Vec<PathBuf>> {
    if dir.exists() {
        return Err(invalid(format!("{} already exists", dir.display())));
    }
    let tmp = dir.with_extension("partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let (h, w, b) = video.dims();
    let written = (0..b)
        .map(|k| {
            let frame = video.frame(k);
            let pixels = frame.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let img = image::GrayImage::from_raw(w as u32, h as u32, pixels).expect("frame buffer size");
            let name = format!("frame_{k:03}.{}", format.extension());
            img.save(tmp.join(&name))?;
            Ok(dir.join(name))
        })
        .collect::<Result<Vec<_>>>();
    match written {
        Ok(paths) => {
            fs::rename(&tmp, dir)?;
            Ok(paths)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

/// Everything needed to re-run a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration as `key = value` lines.
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, argv: Vec<String>) -> Self {
        Self {
            command: command.into(),
            argv,
            config: Vec::new(),
            seeds: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: rayon::current_num_threads(),
        }
    }

    pub fn with_config(mut self, kv: &KeyValues) -> Self {
        self.config = kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        self
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.into(), value));
    }

    /// Write as JSON through a temporary file so no partial manifest is left.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.partial");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
