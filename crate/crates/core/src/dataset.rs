//! Labeled configuration samples over fixed scenes, the binary dataset
//! format, flag dequantization and per-scene batching.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "VIIK"               magic
//! u32                  format version (1)
//! u64                  generation seed
//! u32 len, bytes       robot text block
//! u32                  scene count S
//! S × (u32 len, bytes) scene text blocks
//! S × group:
//!   u32                scene id
//!   u64                row count n
//!   n × (N + 5) f64    q₁..q_N, x, y, θ, x_sc, x_c   (flags as 0.0 / 1.0)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::robot::{Configuration, Pose, RobotModel};
use crate::world::{env_collision, Scene};

pub const MAGIC: &[u8; 4] = b"VIIK";
pub const VERSION: u32 = 1;

/// Every `VERIFY_STRIDE`-th row is re-labeled on load.
const VERIFY_STRIDE: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub config: Configuration,
    pub pose: Pose,
    pub self_collision: bool,
    pub env_collision: bool,
    pub scene_id: u32,
}

impl RawSample {
    /// Label a configuration against the robot and scene oracles.
    pub fn label(robot: &RobotModel, scene: &Scene, config: Configuration) -> Result<Self> {
        Ok(Self {
            pose: robot.forward_kinematics(&config)?,
            self_collision: robot.self_collision(&config)?,
            env_collision: env_collision(robot, &config, scene)?,
            scene_id: scene.id,
            config,
        })
    }

    pub fn collision_free(&self) -> bool {
        !self.self_collision && !self.env_collision
    }
}

/// Standard deviations of the flag noise `a` and the padding noise `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dequantization {
    pub a: f64,
    pub b: f64,
}

impl Default for Dequantization {
    fn default() -> Self {
        Self { a: 0.1, b: 0.1 }
    }
}

impl Dequantization {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a >= 0.0 && b >= 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::Config(format!("noise scales must be ≥ 0, got a={a} b={b}")));
        }
        Ok(Self { a, b })
    }
}

fn noisy<R: Rng + ?Sized>(v: f64, std: f64, rng: &mut R) -> f64 {
    let n: f64 = rng.sample(StandardNormal);
    if std > 0.0 {
        v + std * n
    } else {
        v
    }
}

fn flag(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// `(c, x_sc + ε₁, x_c + ε₂, ε)` with `ε₁,₂ ~ N(0, a²)` and `ε ~ N(0, b²)`.
pub fn dequantize<R: Rng + ?Sized>(s: &RawSample, p: Dequantization, rng: &mut R) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.config.len() + 3);
    x.extend_from_slice(s.config.as_slice());
    x.push(noisy(flag(s.self_collision), p.a, rng));
    x.push(noisy(flag(s.env_collision), p.a, rng));
    x.push(noisy(0.0, p.b, rng));
    x
}

/// `(c, ε)`: the configuration with padding only.
pub fn pad<R: Rng + ?Sized>(s: &RawSample, p: Dequantization, rng: &mut R) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.config.len() + 1);
    x.extend_from_slice(s.config.as_slice());
    x.push(noisy(0.0, p.b, rng));
    x
}

pub const DECODE_THRESHOLD: f64 = 0.5;

/// `(x_sc, x_c)` from a modeled vector of length `dof + 3`; strict `>`.
pub fn decode_flags(x: &[f64], dof: usize, threshold: f64) -> Result<(bool, bool)> {
    if x.len() != dof + 3 {
        return Err(Error::Dimension {
            expected: dof + 3,
            got: x.len(),
        });
    }
    Ok((x[dof] > threshold, x[dof + 1] > threshold))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGroup {
    pub scene: Scene,
    pub samples: Vec<RawSample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub robot: RobotModel,
    pub seed: u64,
    pub groups: Vec<SceneGroup>,
}

/// SplitMix64 finalizer; derives independent stream seeds from counters.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// `n_per_scene` uniform configurations per scene with exact labels. Each
/// sample draws from its own stream, so the result ignores thread count.
pub fn generate(
    robot: &RobotModel,
    scenes: &[Scene],
    n_per_scene: usize,
    seed: u64,
) -> Result<Dataset> {
    if scenes.is_empty() {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    let mut groups = Vec::with_capacity(scenes.len());
    for scene in scenes {
        scene.validate(robot)?;
        if groups.iter().any(|g: &SceneGroup| g.scene.id == scene.id) {
            return Err(Error::Config(format!("duplicate scene id {}", scene.id)));
        }
        let samples = (0..n_per_scene)
            .into_par_iter()
            .map(|i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, scene.id as u64, i as u64]));
                RawSample::label(robot, scene, robot.sample_config(&mut rng))
            })
            .collect::<Result<Vec<_>>>()?;
        groups.push(SceneGroup {
            scene: scene.clone(),
            samples,
        });
    }
    Ok(Dataset {
        robot: robot.clone(),
        seed,
        groups,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.samples.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scene_ids(&self) -> Vec<u32> {
        self.groups.iter().map(|g| g.scene.id).collect()
    }

    pub fn group(&self, scene_id: u32) -> Result<&SceneGroup> {
        self.groups
            .iter()
            .find(|g| g.scene.id == scene_id)
            .ok_or(Error::UnknownScene(scene_id))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        put_text(&mut buf, &self.robot.to_text());
        buf.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for g in &self.groups {
            put_text(&mut buf, &g.scene.to_text());
        }
        for g in &self.groups {
            buf.extend_from_slice(&g.scene.id.to_le_bytes());
            buf.extend_from_slice(&(g.samples.len() as u64).to_le_bytes());
            for s in &g.samples {
                let p = &s.pose;
                for v in s.config.as_slice().iter().chain(&[
                    p.x,
                    p.y,
                    p.theta,
                    flag(s.self_collision),
                    flag(s.env_collision),
                ]) {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parse and spot-check labels of one row in a hundred.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor::new(&bytes);
        if cur.take(4)? != MAGIC {
            return Err(Error::format("not a dataset file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::format(format!(
                "dataset version {version} unsupported (expected {VERSION})"
            )));
        }
        let seed = cur.u64()?;
        let robot = RobotModel::from_text(&cur.text()?)?;
        let count = cur.u32()? as usize;
        let scenes = (0..count)
            .map(|_| Scene::from_text(&cur.text()?))
            .collect::<Result<Vec<_>>>()?;
        let n = robot.dof();
        let mut groups = Vec::with_capacity(count);
        for scene in scenes {
            let id = cur.u32()?;
            if id != scene.id {
                return Err(Error::format(format!(
                    "group for scene {id} where scene {} was expected",
                    scene.id
                )));
            }
            let rows = cur.u64()? as usize;
            let mut samples = Vec::with_capacity(rows);
            for i in 0..rows {
                let q = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
                let (x, y, theta) = (cur.f64()?, cur.f64()?, cur.f64()?);
                let s = RawSample {
                    config: Configuration(q),
                    pose: Pose { x, y, theta },
                    self_collision: cur.flag()?,
                    env_collision: cur.flag()?,
                    scene_id: id,
                };
                if i % VERIFY_STRIDE == 0 {
                    let fresh = RawSample::label(&robot, &scene, s.config.clone())?;
                    if fresh != s {
                        return Err(Error::format(format!(
                            "scene {id} row {i}: stored labels disagree with the oracles"
                        )));
                    }
                }
                samples.push(s);
            }
            groups.push(SceneGroup { scene, samples });
        }
        if cur.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes", cur.remaining())));
        }
        Ok(Self {
            robot,
            seed,
            groups,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn put_text(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format("file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.f64()? {
            v if v == 0.0 => Ok(false),
            v if v == 1.0 => Ok(true),
            v => Err(Error::format(format!("flag value {v} is neither 0 nor 1"))),
        }
    }

    pub(crate) fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::format("text block is not UTF-8"))
    }
}

/// One epoch over a scene's samples in shuffled order, `b` at a time. The
/// final batch is short when the population is not a multiple of `b`.
pub fn iter_batches<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    scene_id: u32,
    b: usize,
    rng: &mut R,
) -> Result<impl Iterator<Item = Vec<&'a RawSample>> + 'a> {
    let group = dataset.group(scene_id)?;
    let order = epoch_order(group.samples.len(), b, rng)?;
    Ok(order
        .chunks(b)
        .map(|c| c.iter().map(|&i| &group.samples[i]).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .into_iter())
}

/// Shuffled index order for one pass over `population` rows.
pub fn epoch_order<R: Rng + ?Sized>(population: usize, b: usize, rng: &mut R) -> Result<Vec<usize>> {
    if b == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if b > population {
        return Err(Error::Config(format!(
            "batch size {b} exceeds scene population {population}"
        )));
    }
    let mut order: Vec<usize> = (0..population).collect();
    order.shuffle(rng);
    Ok(order)
}
