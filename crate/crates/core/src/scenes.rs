//! Synthetic moving scenes with exact flow.
//!
//! Every layer (a textured background and a few objects) is a continuous
//! function of position; frame `b` samples layer `L` at `p − b·v_L`, so the
//! ground-truth flow at a pixel is the velocity of the layer visible there.
//! Velocities are `(u, v)` = (columns, rows) per frame.

use mady_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::motion::{FlowField, FlowStack};
use crate::sci::{Role, VideoCube};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Disk,
    TexturedPatch,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::TexturedPatch];

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "rectangle" => Ok(Self::Rectangle),
            "disk" => Ok(Self::Disk),
            "textured" | "textured_patch" => Ok(Self::TexturedPatch),
            other => Err(invalid(format!("unknown shape kind {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Rectangle => "rectangle",
            Self::Disk => "disk",
            Self::TexturedPatch => "textured",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub h: usize,
    pub w: usize,
    pub b: usize,
    pub objects: usize,
    pub kinds: Vec<ShapeKind>,
    /// Largest velocity component, pixels per frame.
    pub max_velocity: f64,
    /// Whether the background moves too.
    pub background_motion: bool,
    /// Seed of the background texture; `None` draws it from the scene seed.
    pub background_seed: Option<u64>,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            b: 8,
            objects: 3,
            kinds: ShapeKind::ALL.to_vec(),
            max_velocity: 2.0,
            background_motion: true,
            background_seed: None,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self, max_displacement: f64) -> Result<()> {
        if self.h < 2 || self.w < 2 || self.b == 0 {
            return Err(invalid(format!("scene size {}x{}x{} too small", self.h, self.w, self.b)));
        }
        if self.objects > 0 && self.kinds.is_empty() {
            return Err(invalid("objects requested but no shape kinds enabled"));
        }
        if !(self.max_velocity >= 0.0 && self.max_velocity <= max_displacement) {
            return Err(invalid(format!(
                "velocity bound {} outside [0, {max_displacement}]",
                self.max_velocity
            )));
        }
        Ok(())
    }
}

/// Band-limited texture: a sum of plane waves.
#[derive(Clone, Debug)]
struct Texture {
    waves: Vec<(f64, f64, f64, f64)>,
    base: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, base: f64, amplitude: f64) -> Self {
        let n = 5;
        let waves = (0..n)
            .map(|_| {
                let freq = rng.random_range(0.08..0.45);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (freq * angle.cos(), freq * angle.sin(), phase, amplitude / n as f64 * rng.random_range(0.5..1.0))
            })
            .collect();
        Self { waves, base }
    }

    fn flat(base: f64) -> Self {
        Self { waves: Vec::new(), base }
    }

    fn at(&self, row: f64, col: f64) -> f64 {
        self.waves
            .iter()
            .fold(self.base, |acc, &(kr, kc, ph, a)| acc + a * (kr * row + kc * col + ph).sin())
    }
}

#[derive(Clone, Debug)]
struct Object {
    kind: ShapeKind,
    center: (f64, f64),
    half: (f64, f64),
    texture: Texture,
    velocity: (f64, f64),
}

impl Object {
    /// Coverage in `[0, 1]` with a one-pixel soft edge.
    fn coverage(&self, row: f64, col: f64) -> f64 {
        let (dr, dc) = (row - self.center.0, col - self.center.1);
        let sd = match self.kind {
            ShapeKind::Disk => (dr * dr + dc * dc).sqrt() - self.half.0,
            _ => (dr.abs() - self.half.0).max(dc.abs() - self.half.1),
        };
        (0.5 - sd).clamp(0.0, 1.0)
    }
}

/// A rendered scene and its exact flow stack.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub video: VideoCube,
    pub flows: FlowStack,
    pub background_velocity: (f64, f64),
    pub object_velocities: Vec<(f64, f64)>,
}

fn velocity(rng: &mut ChaCha8Rng, bound: f64) -> (f64, f64) {
    if bound == 0.0 {
        return (0.0, 0.0);
    }
    (rng.random_range(-bound..=bound), rng.random_range(-bound..=bound))
}

/// Render one scene. Deterministic in `(spec, seed)`.
pub fn gen_synthetic_scene(spec: &SyntheticSceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate(crate::motion::FlowParams::default().max_displacement)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = match spec.background_seed {
        Some(s) => Texture::random(&mut ChaCha8Rng::seed_from_u64(s), 0.5, 0.35),
        None => Texture::random(&mut rng, 0.5, 0.35),
    };
    let bg_vel = if spec.background_motion {
        velocity(&mut rng, spec.max_velocity)
    } else {
        (0.0, 0.0)
    };
    let (h, w) = (spec.h as f64, spec.w as f64);
    let objects: Vec<Object> = (0..spec.objects)
        .map(|_| {
            let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
            let size = (h.min(w) / 8.0).max(2.0);
            let half = (rng.random_range(size * 0.6..size * 1.4), rng.random_range(size * 0.6..size * 1.4));
            let half = if kind == ShapeKind::Disk { (half.0, half.0) } else { half };
            let level = rng.random_range(0.1..0.9);
            let texture = if kind == ShapeKind::TexturedPatch {
                Texture::random(&mut rng, level, 0.3)
            } else {
                Texture::flat(level)
            };
            Object {
                kind,
                center: (rng.random_range(0.15 * h..0.85 * h), rng.random_range(0.15 * w..0.85 * w)),
                half,
                texture,
                velocity: velocity(&mut rng, spec.max_velocity),
            }
        })
        .collect();

    render(spec.h, spec.w, spec.b, &background, bg_vel, &objects)
}

fn render(
    h: usize,
    w: usize,
    b: usize,
    background: &Texture,
    bg_vel: (f64, f64),
    objects: &[Object],
) -> Result<SyntheticScene> {
    let mut frames = Tensor::zeros([h, w, b]);
    let mut fields = vec![FlowField::zeros(h, w); b];
    for k in 0..b {
        let t = k as f64;
        // the last field points back to the previous frame
        let sign = if k + 1 < b || b == 1 { 1.0 } else { -1.0 };
        for i in 0..h {
            for j in 0..w {
                let (r, c) = (i as f64, j as f64);
                let mut val = background.at(r - t * bg_vel.1, c - t * bg_vel.0);
                let mut vis = bg_vel;
                for o in objects {
                    let (lr, lc) = (r - t * o.velocity.1, c - t * o.velocity.0);
                    let a = o.coverage(lr, lc);
                    if a > 0.0 {
                        val = (1.0 - a) * val + a * o.texture.at(lr - o.center.0, lc - o.center.1);
                        if a >= 0.5 {
                            vis = o.velocity;
                        }
                    }
                }
                frames[(i * w + j) * b + k] = val.clamp(0.0, 1.0);
                let p = (i * w + j) * 2;
                fields[k].uv[p] = sign * vis.0;
                fields[k].uv[p + 1] = sign * vis.1;
            }
        }
    }
    Ok(SyntheticScene {
        video: VideoCube::new(frames, Role::GroundTruth)?,
        flows: FlowStack { fields },
        background_velocity: bg_vel,
        object_velocities: objects.iter().map(|o| o.velocity).collect(),
    })
}

/// `count` scenes with seeds derived from `seed`.
pub fn gen_synthetic_batch(spec: &SyntheticSceneSpec, seed: u64, count: usize) -> Result<Vec<SyntheticScene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen_synthetic_scene(spec, rng.random())).collect()
}

/// A textured frame translating rigidly by `velocity` per frame.
pub fn translating_texture(h: usize, w: usize, b: usize, velocity: (f64, f64), seed: u64) -> Result<SyntheticScene> {
    if h < 2 || w < 2 || b == 0 {
        return Err(invalid(format!("scene size {h}x{w}x{b} too small")));
    }
    let bg = Texture::random(&mut ChaCha8Rng::seed_from_u64(seed), 0.5, 0.35);
    render(h, w, b, &bg, velocity, &[])
}
