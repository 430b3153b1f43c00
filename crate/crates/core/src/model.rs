//! The full conditional model: scene encoder, latent flow and the main flow
//! over configurations and collision flags.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::encoder::{Encoder, EncoderSpec, POSE_DIM};
use crate::error::{Error, Result};
use crate::flow::{standard_normal, Flow, FlowInit, FlowSpec};
use crate::nn::Activation;
use crate::params::{Bound, ParamStore};
use crate::robot::parse_f64;
use crate::world::OccupancyImage;

/// Which distribution the main flow models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Collision-free configurations only; no flags anywhere.
    P1,
    /// Configurations with both flags as conditioning inputs.
    P2,
    /// Configurations jointly with both flags as modeled coordinates.
    P3,
}

impl Mode {
    /// Modeled vector length for a `dof`-joint arm, including one padding
    /// coordinate.
    pub fn flow_dim(self, dof: usize) -> usize {
        match self {
            Mode::P3 => dof + 3,
            Mode::P1 | Mode::P2 => dof + 1,
        }
    }

    /// Extra conditioning coordinates carried by the flags.
    pub fn flag_cond_dim(self) -> usize {
        match self {
            Mode::P2 => 2,
            Mode::P1 | Mode::P3 => 0,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::P1 => "p1",
            Mode::P2 => "p2",
            Mode::P3 => "p3",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p1" => Ok(Mode::P1),
            "p2" => Ok(Mode::P2),
            "p3" => Ok(Mode::P3),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected p1, p2 or p3)"))),
        }
    }
}

/// Which pose of a batch feeds the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseInput {
    First,
    Mean,
}

impl fmt::Display for PoseInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoseInput::First => "first",
            PoseInput::Mean => "mean",
        })
    }
}

impl FromStr for PoseInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(PoseInput::First),
            "mean" => Ok(PoseInput::Mean),
            other => Err(Error::Config(format!("unknown pose input '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub dof: usize,
    /// Arm reach; scales the pose embedding and the raster extent.
    pub reach: f64,
    pub flow_blocks: usize,
    pub flow_hidden: usize,
    pub activation: Activation,
    pub encoder: EncoderSpec,
    pub pose_input: PoseInput,
}

impl ModelConfig {
    pub fn new(mode: Mode, dof: usize, reach: f64) -> Self {
        Self {
            mode,
            dof,
            reach,
            flow_blocks: 12,
            flow_hidden: 128,
            activation: Activation::LeakyRelu,
            encoder: EncoderSpec::default(),
            pose_input: PoseInput::First,
        }
    }

    pub fn flow_dim(&self) -> usize {
        self.mode.flow_dim(self.dof)
    }

    pub fn cond_dim(&self) -> usize {
        POSE_DIM + self.encoder.latent + self.mode.flag_cond_dim()
    }

    pub fn to_text(&self) -> String {
        let e = &self.encoder;
        let c = e.channels;
        [
            format!("mode = {}", self.mode),
            format!("dof = {}", self.dof),
            format!("reach = {:?}", self.reach),
            format!("flow_blocks = {}", self.flow_blocks),
            format!("flow_hidden = {}", self.flow_hidden),
            format!("activation = {}", self.activation),
            format!("pose_input = {}", self.pose_input),
            format!("resolution = {}", e.resolution),
            format!("conv_channels = {} {} {}", c[0], c[1], c[2]),
            format!("conv_features = {}", e.features()),
            format!("projection = {}", e.projection),
            format!("fusion_hidden = {}", e.hidden),
            format!("latent_dim = {}", e.latent),
            format!("latent_blocks = {}", e.latent_blocks),
            format!("latent_hidden = {}", e.latent_hidden),
        ]
        .join("\n")
            + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format(format!("model metadata lacks '{k}'")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(format!("bad integer for '{k}'")))
        };
        let ch: Vec<usize> = get("conv_channels")?
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::format("bad conv_channels")))
            .collect::<Result<_>>()?;
        let [c0, c1, c2] = ch.as_slice() else {
            return Err(Error::format("conv_channels needs three values"));
        };
        let activation: Activation = get("activation")?.parse()?;
        Ok(Self {
            mode: get("mode")?.parse()?,
            dof: int("dof")?,
            reach: parse_f64(get("reach")?)?,
            flow_blocks: int("flow_blocks")?,
            flow_hidden: int("flow_hidden")?,
            activation,
            pose_input: get("pose_input")?.parse()?,
            encoder: EncoderSpec {
                resolution: int("resolution")?,
                channels: [*c0, *c1, *c2],
                projection: int("projection")?,
                hidden: int("fusion_hidden")?,
                latent: int("latent_dim")?,
                latent_blocks: int("latent_blocks")?,
                latent_hidden: int("latent_hidden")?,
                activation,
            },
        })
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(format!("expected 'key = value', got '{line}'")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Training rows drawn from a single scene.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Modeled vectors, `B × flow_dim`.
    pub x: Tensor,
    /// Pose embeddings, `B × 4`.
    pub poses: Tensor,
    /// Flag conditioning, `B × 2`, in mode p2 only.
    pub flags: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub flow: Flow,
}

impl Model {
    /// Build with `encoder.*`, `latent.*` and `flow.*` parameters drawn from `seed`.
    pub fn new(config: ModelConfig, init: FlowInit, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let mut enc_spec = config.encoder;
        enc_spec.activation = config.activation;
        let encoder = Encoder::new(&mut store, "encoder", "latent", enc_spec, init, &mut rng)?;
        let flow = Flow::new(
            &mut store,
            "flow",
            FlowSpec {
                dim: config.flow_dim(),
                cond_dim: config.cond_dim(),
                blocks: config.flow_blocks,
                hidden: config.flow_hidden,
                activation: config.activation,
            },
            init,
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            encoder,
            flow,
        })
    }

    /// Encoder pose input for a batch of embeddings.
    pub fn encoder_pose(&self, poses: &Tensor) -> Result<[f64; POSE_DIM]> {
        let rows = poses.shape()[0];
        if rows == 0 {
            return Err(Error::invalid("encoder_pose", "empty batch"));
        }
        let mut out = [0.0; POSE_DIM];
        match self.config.pose_input {
            PoseInput::First => out.copy_from_slice(poses.row(0)),
            PoseInput::Mean => {
                for r in 0..rows {
                    for (o, v) in out.iter_mut().zip(poses.row(r)) {
                        *o += v / rows as f64;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Batch negative log-likelihood with one shared scene latent. `eps` is
    /// the `1 × L` reparameterization noise.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: &OccupancyImage,
        batch: &Batch,
        eps: Tensor,
    ) -> Result<Var> {
        let rows = batch.x.shape()[0];
        let d = self.config.flow_dim();
        if batch.x.shape() != [rows, d] {
            return Err(Error::Shape {
                op: "loss",
                lhs: batch.x.shape().to_vec(),
                rhs: vec![rows, d],
            });
        }
        if batch.flags.is_some() != (self.config.mode == Mode::P2) {
            return Err(Error::invalid(
                "loss",
                format!("flag conditioning does not match mode {}", self.config.mode),
            ));
        }
        let enc_pose = self.encoder_pose(&batch.poses)?;
        let img = tape.constant(self.encoder.image_tensor(&[image])?);
        let pe = tape.constant(Tensor::new(&[1, POSE_DIM], enc_pose.to_vec())?);
        let (mu, ls) = self.encoder.encode_on_tape(tape, p, img, pe)?;
        let z0 = self.encoder.reparameterize_on_tape(tape, mu, ls, eps)?;
        let (z1, _) = self
            .encoder
            .normalize_latent_on_tape(tape, p, &self.store, z0, pe)?;
        let ones = tape.constant(Tensor::ones(&[rows, 1]));
        let z1_rows = tape.matmul(ones, z1)?;
        let poses = tape.constant(batch.poses.clone());
        let mut parts = vec![poses, z1_rows];
        if let Some(f) = &batch.flags {
            parts.push(tape.constant(f.clone()));
        }
        let cond = tape.concat(&parts, 1)?;
        let x = tape.constant(batch.x.clone());
        let lp = self.flow.log_prob_on_tape(tape, p, &self.store, x, Some(cond))?;
        let m = tape.mean(lp)?;
        tape.scale(m, -1.0)
    }

    /// Loss value with no gradients.
    pub fn loss(&self, image: &OccupancyImage, batch: &Batch, eps: Tensor) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let l = self.loss_on_tape(&mut tape, &p, image, batch, eps)?;
        Ok(tape.value(l).data()[0])
    }

    /// Draw one scene latent `z₁` for a pose embedding.
    pub fn scene_latent<R: Rng + ?Sized>(
        &self,
        image: &OccupancyImage,
        pose: &[f64; POSE_DIM],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let (mu, ls) = self.encoder.encode(&self.store, image, pose)?;
        let z0 = self.encoder.reparameterize(&mu, &ls, rng)?;
        Ok(self.encoder.normalize_latent(&self.store, &z0, pose)?.0)
    }

    /// Conditioning row `[pose, z₁, flags]`; flags are requested collision-free in p2.
    pub fn condition(&self, pose: &[f64; POSE_DIM], z1: &[f64]) -> Vec<f64> {
        let mut c = Vec::with_capacity(self.config.cond_dim());
        c.extend_from_slice(pose);
        c.extend_from_slice(z1);
        c.extend(std::iter::repeat_n(0.0, self.config.mode.flag_cond_dim()));
        c
    }

    /// `k` modeled vectors for one pose, all sharing a single scene latent.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        image: &OccupancyImage,
        pose: &[f64; POSE_DIM],
        k: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        let z1 = self.scene_latent(image, pose, rng)?;
        self.flow.sample(&self.store, &self.condition(pose, &z1), k, rng)
    }

    /// `k` modeled vectors with a fresh scene latent per row.
    pub fn sample_resampled<R: Rng + ?Sized>(
        &self,
        image: &OccupancyImage,
        pose: &[f64; POSE_DIM],
        k: usize,
        rng: &mut R,
    ) -> Result<Tensor> {
        if k == 0 {
            return Err(Error::invalid("sample", "sample count must be at least 1"));
        }
        let (mu, ls) = self.encoder.encode(&self.store, image, pose)?;
        let mut cond = Vec::with_capacity(k * self.config.cond_dim());
        for _ in 0..k {
            let z0 = self.encoder.reparameterize(&mu, &ls, rng)?;
            let z1 = self.encoder.normalize_latent(&self.store, &z0, pose)?.0;
            cond.extend(self.condition(pose, &z1));
        }
        let c = Tensor::new(&[k, self.config.cond_dim()], cond)?;
        let z = standard_normal(rng, k, self.config.flow_dim());
        Ok(self.flow.forward(&self.store, &z, Some(&c))?.0)
    }
}
