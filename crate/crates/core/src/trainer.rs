//! Joint optimization of encoder, latent flow and main flow with AdamW,
//! per-epoch learning-rate decay and a checksummed checkpoint container.
//!
//! Every random draw of a step comes from a stream keyed by
//! `(seed, epoch, step)` and every shuffle from one keyed by
//! `(seed, scene, pass)`, so the counters stored in a checkpoint are the
//! complete RNG state.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Tensor};
use crate::dataset::{dequantize, epoch_order, mix_seed, pad, Cursor, Dataset, Dequantization, RawSample};
use crate::encoder::{pose_embedding, POSE_DIM};
use crate::error::{Error, Result};
use crate::flow::{standard_normal, FlowInit};
use crate::model::{parse_key_values, Batch, Mode, Model, ModelConfig};
use crate::params::Entry;
use crate::robot::{parse_f64, RobotModel};
use crate::world::{rasterize, OccupancyImage};

const STEP_STREAM: u64 = 1;
const ORDER_STREAM: u64 = 2;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch learning-rate multiplier.
    pub gamma: f64,
    pub epochs: u32,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub seed: u64,
    pub dequant: Dequantization,
    /// Optimizer steps per epoch; `None` means ⌈rows / batch_size⌉.
    pub steps_per_epoch: Option<u64>,
    /// Std of per-pixel Gaussian noise added to the raster each step; 0 disables it.
    pub raster_noise: f64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            batch_size: 256,
            learning_rate: 3e-4,
            gamma: 0.99,
            epochs: 60,
            weight_decay: 1e-5,
            clip_norm: 10.0,
            seed: 0,
            dequant: Dequantization::default(),
            steps_per_epoch: None,
            raster_noise: 0.0,
        }
    }

    pub fn mode(&self) -> Mode {
        self.model.mode
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size {} below 2", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("weight decay must be ≥ 0 and clip norm > 0".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps per epoch must be positive".into()));
        }
        if !(self.raster_noise >= 0.0 && self.raster_noise.is_finite()) {
            return Err(Error::Config("raster noise must be finite and ≥ 0".into()));
        }
        Dequantization::new(self.dequant.a, self.dequant.b)?;
        Ok(())
    }

    /// `LR₀·γᵉ`.
    pub fn learning_rate_at(&self, epoch: u32) -> f64 {
        self.learning_rate * self.gamma.powi(epoch as i32)
    }

    pub fn to_text(&self) -> String {
        let spe = self
            .steps_per_epoch
            .map_or_else(|| "auto".to_string(), |s| s.to_string());
        [
            format!("batch_size = {}", self.batch_size),
            format!("learning_rate = {:?}", self.learning_rate),
            format!("gamma = {:?}", self.gamma),
            format!("epochs = {}", self.epochs),
            format!("weight_decay = {:?}", self.weight_decay),
            format!("clip_norm = {:?}", self.clip_norm),
            format!("seed = {}", self.seed),
            format!("dequant_a = {:?}", self.dequant.a),
            format!("dequant_b = {:?}", self.dequant.b),
            format!("steps_per_epoch = {spe}"),
            format!("raster_noise = {:?}", self.raster_noise),
        ]
        .join("\n")
            + "\n"
    }

    fn from_parts(train: &str, model: &str) -> Result<Self> {
        let kv = parse_key_values(train)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("training metadata lacks '{k}'")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad integer for '{k}'")))
        };
        let steps = match get("steps_per_epoch")? {
            "auto" => None,
            s => Some(
                s.parse()
                    .map_err(|_| Error::format("bad integer for 'steps_per_epoch'"))?,
            ),
        };
        Ok(Self {
            model: ModelConfig::from_text(model)?,
            batch_size: int("batch_size")? as usize,
            learning_rate: parse_f64(get("learning_rate")?)?,
            gamma: parse_f64(get("gamma")?)?,
            epochs: int("epochs")? as u32,
            weight_decay: parse_f64(get("weight_decay")?)?,
            clip_norm: parse_f64(get("clip_norm")?)?,
            seed: int("seed")?,
            dequant: Dequantization {
                a: parse_f64(get("dequant_a")?)?,
                b: parse_f64(get("dequant_b")?)?,
            },
            steps_per_epoch: steps,
            raster_noise: kv.get("raster_noise").map_or(Ok(0.0), |v| parse_f64(v))?,
        })
    }
}

/// Adam first and second moments aligned with the parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    fn zeros(params: &[Entry]) -> Self {
        let z: Vec<Tensor> = params.iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// Position in a scene's shuffled pass sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneCursor {
    pub scene_id: u32,
    pub pass: u64,
    pub pos: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub robot: RobotModel,
    pub scene_ids: Vec<u32>,
    pub params: Vec<Entry>,
    pub adam: AdamState,
    /// Next epoch and step to run.
    pub epoch: u32,
    pub step: u64,
    pub global_step: u64,
    pub cursors: Vec<SceneCursor>,
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VIIKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const ROLE_PARAM: u8 = 0;
const ROLE_BUFFER: u8 = 1;
const ROLE_ADAM_M: u8 = 2;
const ROLE_ADAM_V: u8 = 3;

impl Checkpoint {
    pub fn mode(&self) -> Mode {
        self.config.model.mode
    }

    /// Rebuild the model and install the stored tensors.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone(), FlowInit::Identity, 0)?;
        model.store.load_values(&self.params)?;
        Ok(model)
    }

    fn metadata(&self) -> String {
        let ids: Vec<String> = self.scene_ids.iter().map(u32::to_string).collect();
        let cursors: Vec<String> = self
            .cursors
            .iter()
            .map(|c| format!("{}:{}:{}", c.scene_id, c.pass, c.pos))
            .collect();
        format!(
            "[train]\n{}[model]\n{}[robot]\n{}[state]\nepoch = {}\nstep = {}\nglobal_step = {}\nadam_t = {}\nscenes = {}\ncursors = {}\n",
            self.config.to_text(),
            self.config.model.to_text(),
            self.robot.to_text(),
            self.epoch,
            self.step,
            self.global_step,
            self.adam.t,
            ids.join(" "),
            cursors.join(" ")
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::new();
        let meta = self.metadata();
        body.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        body.extend_from_slice(meta.as_bytes());

        let mut tensors: Vec<(String, u8, &Tensor)> = Vec::new();
        for e in &self.params {
            let role = if e.trainable { ROLE_PARAM } else { ROLE_BUFFER };
            tensors.push((e.name.clone(), role, &e.value));
        }
        for (e, (m, v)) in self.params.iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            if e.trainable {
                tensors.push((e.name.clone(), ROLE_ADAM_M, m));
                tensors.push((e.name.clone(), ROLE_ADAM_V, v));
            }
        }
        body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, role, t) in &tensors {
            body.extend_from_slice(&(name.len() as u32).to_le_bytes());
            body.extend_from_slice(name.as_bytes());
            body.push(*role);
            body.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                body.extend_from_slice(&(d as u64).to_le_bytes());
            }
            body.extend_from_slice(&offset.to_le_bytes());
            offset += t.numel() as u64;
        }
        body.extend_from_slice(&offset.to_le_bytes());
        for (_, _, t) in &tensors {
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }

        let mut out = Vec::with_capacity(body.len() + 24);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        if cur.take(8).ok() != Some(&CHECKPOINT_MAGIC[..]) {
            return Err(Error::format("not a checkpoint file (bad magic)"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!(
                "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let body_len = cur.u64()? as usize;
        if cur.remaining() < body_len + 4 {
            return Err(Error::format("checkpoint is truncated"));
        }
        if cur.remaining() > body_len + 4 {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        let head = bytes.len() - cur.remaining();
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        if crc32fast::hash(&bytes[..head + body_len]) != stored {
            return Err(Error::format("checkpoint checksum mismatch"));
        }
        let meta = cur.text()?;
        let count = cur.u32()? as usize;
        let mut dir = Vec::with_capacity(count);
        for _ in 0..count {
            let name = cur.text()?;
            let role = cur.take(1)?[0];
            let ndim = cur.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = cur.u64()? as usize;
            dir.push((name, role, shape, offset));
        }
        let total = cur.u64()? as usize;
        let payload = (0..total).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;

        let mut params = Vec::new();
        let mut moments: BTreeMap<(String, u8), Tensor> = BTreeMap::new();
        for (name, role, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let data = payload
                .get(offset..offset + n)
                .ok_or_else(|| Error::format(format!("tensor '{name}' exceeds payload")))?
                .to_vec();
            let t = Tensor::new(&shape, data)?;
            match role {
                ROLE_PARAM | ROLE_BUFFER => params.push(Entry {
                    name,
                    value: t,
                    trainable: role == ROLE_PARAM,
                }),
                ROLE_ADAM_M | ROLE_ADAM_V => {
                    moments.insert((name, role), t);
                }
                r => return Err(Error::format(format!("unknown tensor role {r}"))),
            }
        }
        let mut adam = AdamState::zeros(&params);
        for (i, e) in params.iter().enumerate() {
            if !e.trainable {
                continue;
            }
            let mut take = |role| {
                moments
                    .remove(&(e.name.clone(), role))
                    .ok_or_else(|| Error::format(format!("missing optimizer moment for '{}'", e.name)))
            };
            adam.m[i] = take(ROLE_ADAM_M)?;
            adam.v[i] = take(ROLE_ADAM_V)?;
        }

        let sections = split_sections(&meta)?;
        let section = |k: &str| {
            sections
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("checkpoint metadata lacks [{k}]")))
        };
        let config = TrainConfig::from_parts(section("train")?, section("model")?)?;
        let robot = RobotModel::from_text(section("robot")?)?;
        let state = parse_key_values(section("state")?)?;
        let get = |k: &str| -> Result<&str> {
            state
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("checkpoint state lacks '{k}'")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad integer for '{k}'")))
        };
        adam.t = num("adam_t")?;
        let scene_ids = get("scenes")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format("bad scene id")))
            .collect::<Result<Vec<u32>>>()?;
        let cursors = get("cursors")?
            .split_whitespace()
            .map(|s| {
                let v: Vec<u64> = s
                    .split(':')
                    .map(|p| p.parse().map_err(|_| Error::format(format!("bad cursor '{s}'"))))
                    .collect::<Result<_>>()?;
                match v.as_slice() {
                    [id, pass, pos] => Ok(SceneCursor {
                        scene_id: *id as u32,
                        pass: *pass,
                        pos: *pos,
                    }),
                    _ => Err(Error::format(format!("bad cursor '{s}'"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            robot,
            scene_ids,
            params,
            adam,
            epoch: num("epoch")? as u32,
            step: num("step")?,
            global_step: num("global_step")?,
            cursors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn split_sections(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out: BTreeMap<String, String> = BTreeMap::new();
    let mut current: Option<String> = None;
    for line in text.lines() {
        let t = line.trim();
        if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = Some(name.to_string());
            out.entry(name.to_string()).or_default();
        } else if let Some(c) = &current {
            let s = out.get_mut(c).unwrap();
            s.push_str(line);
            s.push('\n');
        } else if !t.is_empty() {
            return Err(Error::format("metadata line outside any section"));
        }
    }
    Ok(out)
}

/// One row of the loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: u32,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "epoch,step,loss,lr";

impl LossRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{:?},{:?}", self.epoch, self.step, self.loss, self.lr)
    }
}

/// Raster with clamped per-pixel Gaussian noise.
fn jitter<R: Rng + ?Sized>(image: &OccupancyImage, std: f64, rng: &mut R) -> OccupancyImage {
    let values = image
        .values
        .iter()
        .map(|v| (v + std * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0))
        .collect();
    OccupancyImage {
        width: image.width,
        height: image.height,
        extent: image.extent,
        values,
    }
}

/// Modeled rows for one mode. Mixed-scene input is rejected; p1 drops
/// colliding samples and yields `None` when nothing is left.
pub fn assemble_batch<R: Rng + ?Sized>(
    config: &ModelConfig,
    samples: &[&RawSample],
    dequant: Dequantization,
    rng: &mut R,
) -> Result<Option<Batch>> {
    let Some(first) = samples.first() else {
        return Ok(None);
    };
    if samples.iter().any(|s| s.scene_id != first.scene_id) {
        return Err(Error::invalid("loss", "batch mixes samples from several scenes"));
    }
    let kept: Vec<&RawSample> = match config.mode {
        Mode::P1 => samples.iter().copied().filter(|s| s.collision_free()).collect(),
        Mode::P2 | Mode::P3 => samples.to_vec(),
    };
    if kept.is_empty() {
        return Ok(None);
    }
    let d = config.flow_dim();
    let mut x = Vec::with_capacity(kept.len() * d);
    let mut poses = Vec::with_capacity(kept.len() * POSE_DIM);
    let mut flags = Vec::new();
    for s in &kept {
        if s.config.len() != config.dof {
            return Err(Error::Dimension {
                expected: config.dof,
                got: s.config.len(),
            });
        }
        match config.mode {
            Mode::P3 => x.extend(dequantize(s, dequant, rng)),
            Mode::P1 | Mode::P2 => x.extend(pad(s, dequant, rng)),
        }
        poses.extend(pose_embedding(&s.pose, config.reach));
        if config.mode == Mode::P2 {
            flags.push(if s.self_collision { 1.0 } else { 0.0 });
            flags.push(if s.env_collision { 1.0 } else { 0.0 });
        }
    }
    let n = kept.len();
    Ok(Some(Batch {
        x: Tensor::new(&[n, d], x)?,
        poses: Tensor::new(&[n, POSE_DIM], poses)?,
        flags: (config.mode == Mode::P2)
            .then(|| Tensor::new(&[n, 2], flags))
            .transpose()?,
    }))
}

pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    images: Vec<OccupancyImage>,
    orders: Vec<Option<(u64, Vec<usize>)>>,
    model: Model,
    adam: AdamState,
    epoch: u32,
    step: u64,
    global_step: u64,
    cursors: Vec<SceneCursor>,
    steps_per_epoch: u64,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, dataset: &'a Dataset) -> Result<Self> {
        let model = Model::new(config.model.clone(), FlowInit::Permuted, config.seed)?;
        let adam = AdamState::zeros(model.store.entries());
        let cursors = dataset
            .groups
            .iter()
            .map(|g| SceneCursor {
                scene_id: g.scene.id,
                pass: 0,
                pos: 0,
            })
            .collect();
        Self::assemble(config, dataset, model, adam, 0, 0, 0, cursors)
    }

    pub fn resume(ckpt: Checkpoint, dataset: &'a Dataset) -> Result<Self> {
        if ckpt.robot != dataset.robot {
            return Err(Error::Config("checkpoint robot differs from the dataset's".into()));
        }
        if ckpt.scene_ids != dataset.scene_ids() {
            return Err(Error::Config(format!(
                "checkpoint scenes {:?} differ from dataset scenes {:?}",
                ckpt.scene_ids,
                dataset.scene_ids()
            )));
        }
        let model = ckpt.model()?;
        Self::assemble(
            ckpt.config,
            dataset,
            model,
            ckpt.adam,
            ckpt.epoch,
            ckpt.step,
            ckpt.global_step,
            ckpt.cursors,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        config: TrainConfig,
        dataset: &'a Dataset,
        model: Model,
        adam: AdamState,
        epoch: u32,
        step: u64,
        global_step: u64,
        cursors: Vec<SceneCursor>,
    ) -> Result<Self> {
        config.validate()?;
        if dataset.groups.is_empty() {
            return Err(Error::Config("dataset has no scenes".into()));
        }
        if config.model.dof != dataset.robot.dof() {
            return Err(Error::Dimension {
                expected: dataset.robot.dof(),
                got: config.model.dof,
            });
        }
        for g in &dataset.groups {
            if g.samples.len() < config.batch_size {
                return Err(Error::Config(format!(
                    "scene {} holds {} samples, fewer than batch size {}",
                    g.scene.id,
                    g.samples.len(),
                    config.batch_size
                )));
            }
        }
        let res = config.model.encoder.resolution;
        let images = dataset
            .groups
            .iter()
            .map(|g| rasterize(&g.scene, config.model.reach, res, res))
            .collect();
        let steps_per_epoch = config
            .steps_per_epoch
            .unwrap_or_else(|| dataset.len().div_ceil(config.batch_size) as u64);
        Ok(Self {
            orders: vec![None; dataset.groups.len()],
            config,
            dataset,
            images,
            model,
            adam,
            epoch,
            step,
            global_step,
            cursors,
            steps_per_epoch,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            robot: self.dataset.robot.clone(),
            scene_ids: self.dataset.scene_ids(),
            params: self.model.store.entries().to_vec(),
            adam: self.adam.clone(),
            epoch: self.epoch,
            step: self.step,
            global_step: self.global_step,
            cursors: self.cursors.clone(),
        }
    }

    fn next_indices(&mut self, g: usize) -> Result<Vec<usize>> {
        let pop = self.dataset.groups[g].samples.len();
        let b = self.config.batch_size;
        let cur = self.cursors[g];
        let stale = !matches!(&self.orders[g], Some((p, _)) if *p == cur.pass);
        if stale {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                self.config.seed,
                ORDER_STREAM,
                cur.scene_id as u64,
                cur.pass,
            ]));
            self.orders[g] = Some((cur.pass, epoch_order(pop, b, &mut rng)?));
        }
        let order = &self.orders[g].as_ref().unwrap().1;
        let start = cur.pos as usize;
        let end = (start + b).min(pop);
        let idx = order[start..end].to_vec();
        let c = &mut self.cursors[g];
        if end == pop {
            c.pass += 1;
            c.pos = 0;
        } else {
            c.pos = end as u64;
        }
        Ok(idx)
    }

    /// Run one optimizer step. Returns `None` once all epochs are done or
    /// when a p1 batch held no collision-free rows.
    pub fn step(&mut self) -> Result<Option<LossRecord>> {
        if self.is_done() {
            return Ok(None);
        }
        let snapshot = self.checkpoint();
        let (epoch, step) = (self.epoch, self.step);
        let lr = self.config.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.config.seed,
            STEP_STREAM,
            epoch as u64,
            step,
        ]));
        let g = rng.random_range(0..self.dataset.groups.len());
        let idx = self.next_indices(g)?;
        let group = &self.dataset.groups[g];
        let samples: Vec<&RawSample> = idx.iter().map(|&i| &group.samples[i]).collect();
        let batch = assemble_batch(&self.config.model, &samples, self.config.dequant, &mut rng)?;
        let record = match batch {
            Some(batch) => {
                let eps = standard_normal(&mut rng, 1, self.config.model.encoder.latent);
                let non_finite = |_| Error::NonFiniteLoss {
                    epoch,
                    step: self.global_step,
                    snapshot: Box::new(snapshot.clone()),
                };
                let noisy;
                let image = if self.config.raster_noise > 0.0 {
                    noisy = jitter(&self.images[g], self.config.raster_noise, &mut rng);
                    &noisy
                } else {
                    &self.images[g]
                };
                let (loss, grads) = self
                    .loss_and_grads(image, &batch, eps)
                    .map_err(|e| match e {
                        Error::NonFinite { .. } | Error::NonFiniteBlock { .. } => non_finite(()),
                        other => other,
                    })?;
                if !loss.is_finite() || grads.iter().flatten().any(|t| !t.is_finite()) {
                    return Err(non_finite(()));
                }
                self.apply(grads, lr);
                Some(LossRecord {
                    epoch,
                    step: self.global_step,
                    loss,
                    lr,
                })
            }
            None => None,
        };
        self.global_step += 1;
        self.step += 1;
        if self.step == self.steps_per_epoch {
            self.step = 0;
            self.epoch += 1;
        }
        Ok(record)
    }

    fn loss_and_grads(
        &self,
        image: &OccupancyImage,
        batch: &Batch,
        eps: Tensor,
    ) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let p = self.model.store.bind(&mut tape, true);
        let loss = self.model.loss_on_tape(&mut tape, &p, image, batch, eps)?;
        let grads = tape.backward(loss)?;
        Ok((
            tape.value(loss).data()[0],
            self.model.store.collect_grads(&p, &grads),
        ))
    }

    /// Clipped AdamW update with decoupled weight decay.
    fn apply(&mut self, grads: Vec<Option<Tensor>>, lr: f64) {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.adam.t += 1;
        let t = self.adam.t as i32;
        let (bc1, bc2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        let wd = self.config.weight_decay;
        let ids: Vec<_> = self.model.store.ids().collect();
        for id in ids {
            let i = id.index();
            if !self.model.store.entries()[i].trainable {
                continue;
            }
            let p = self.model.store.get(id);
            let n = p.numel();
            let zero;
            let g = match &grads[i] {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let (m, v) = (self.adam.m[i].data(), self.adam.v[i].data());
            let mut pm = Vec::with_capacity(n);
            let mut mm = Vec::with_capacity(n);
            let mut vv = Vec::with_capacity(n);
            for k in 0..n {
                let gk = g[k] * clip;
                let mk = BETA1 * m[k] + (1.0 - BETA1) * gk;
                let vk = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let step = (mk / bc1) / ((vk / bc2).sqrt() + ADAM_EPS);
                pm.push(p.data()[k] - lr * (step + wd * p.data()[k]));
                mm.push(mk);
                vv.push(vk);
            }
            let shape = p.shape().to_vec();
            self.adam.m[i] = Tensor::new(&shape, mm).expect("same shape");
            self.adam.v[i] = Tensor::new(&shape, vv).expect("same shape");
            self.model
                .store
                .set(id, Tensor::new(&shape, pm).expect("same shape"))
                .expect("same shape");
        }
    }

    /// Run to completion, handing each loss record to `on_record`.
    pub fn run(&mut self, mut on_record: impl FnMut(&LossRecord)) -> Result<()> {
        while !self.is_done() {
            if let Some(r) = self.step()? {
                on_record(&r);
            }
        }
        Ok(())
    }

    /// Run at most `n` steps.
    pub fn run_steps(&mut self, n: u64, mut on_record: impl FnMut(&LossRecord)) -> Result<()> {
        for _ in 0..n {
            if self.is_done() {
                break;
            }
            if let Some(r) = self.step()? {
                on_record(&r);
            }
        }
        Ok(())
    }
}

/// Train from scratch and return the final checkpoint with the loss curve.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut t = Trainer::new(config, dataset)?;
    let mut curve = Vec::new();
    t.run(|r| curve.push(*r))?;
    Ok((t.checkpoint(), curve))
}
