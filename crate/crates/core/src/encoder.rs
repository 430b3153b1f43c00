//! Scene encoder: a strided conv stack over the occupancy raster, fused with
//! the pose embedding into a diagonal Gaussian over the scene latent, plus a
//! pose-conditioned flow that normalizes the drawn latent.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{standard_normal, Flow, FlowInit, FlowSpec};
use crate::nn::{Activation, Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::robot::Pose;
use crate::world::OccupancyImage;

pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Length of [`pose_embedding`].
pub const POSE_DIM: usize = 4;

/// He-uniform gain for the conv stack and projection.
const HE_GAIN: f64 = 2.449_489_742_783_178;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `(x/R, y/R, sin θ, cos θ)`.
pub fn pose_embedding(pose: &Pose, reach: f64) -> [f64; POSE_DIM] {
    [pose.x / reach, pose.y / reach, pose.theta.sin(), pose.theta.cos()]
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderSpec {
    /// Square raster side in pixels; must be divisible by 8.
    pub resolution: usize,
    pub channels: [usize; 3],
    pub projection: usize,
    pub hidden: usize,
    pub latent: usize,
    pub latent_blocks: usize,
    pub latent_hidden: usize,
    pub activation: Activation,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: [8, 16, 32],
            projection: 64,
            hidden: 128,
            latent: 8,
            latent_blocks: 4,
            latent_hidden: 64,
            activation: Activation::LeakyRelu,
        }
    }
}

impl EncoderSpec {
    /// Flattened conv feature count.
    pub fn features(&self) -> usize {
        let side = self.resolution / 8;
        self.channels[2] * side * side
    }
}

#[derive(Clone, Debug)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    convs: Vec<Conv>,
    projection: Linear,
    fusion: Mlp,
    latent_flow: Flow,
}

impl Encoder {
    /// Registers `{prefix}.*` conv/fusion weights and `{latent_prefix}.*`
    /// for the latent flow.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        latent_prefix: &str,
        spec: EncoderSpec,
        latent_init: FlowInit,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.resolution == 0 || spec.resolution % 8 != 0 {
            return Err(Error::Config(format!(
                "raster resolution {} must be a positive multiple of 8",
                spec.resolution
            )));
        }
        let mut convs = Vec::with_capacity(3);
        let mut c_in = 1;
        for (i, &c_out) in spec.channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let bound = HE_GAIN / fan_in.sqrt();
            let data = (0..c_out * c_in * 9)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let kernel = store.add(
                format!("{prefix}.conv{i}.k"),
                Tensor::new(&[c_out, c_in, 3, 3], data)?,
            );
            let bias = store.add(format!("{prefix}.conv{i}.b"), Tensor::zeros(&[c_out]));
            convs.push(Conv { kernel, bias });
            c_in = c_out;
        }
        let projection = Linear::uniform(
            store,
            &format!("{prefix}.proj"),
            spec.features(),
            spec.projection,
            HE_GAIN,
            rng,
        );
        let fusion = Mlp::new(
            store,
            &format!("{prefix}.fuse"),
            &[POSE_DIM + spec.projection, spec.hidden, 2 * spec.latent],
            spec.activation,
            true,
            rng,
        );
        let latent_flow = Flow::new(
            store,
            latent_prefix,
            FlowSpec {
                dim: spec.latent,
                cond_dim: POSE_DIM,
                blocks: spec.latent_blocks,
                hidden: spec.latent_hidden,
                activation: spec.activation,
            },
            latent_init,
            rng,
        )?;
        Ok(Self {
            spec,
            convs,
            projection,
            fusion,
            latent_flow,
        })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn latent_flow(&self) -> &Flow {
        &self.latent_flow
    }

    /// Stack rasters into an `N×1×H×W` tensor mapped from `[0, 1]` to
    /// `[-1, 1]`, checking the resolution.
    pub fn image_tensor(&self, images: &[&OccupancyImage]) -> Result<Tensor> {
        let r = self.spec.resolution;
        let mut data = Vec::with_capacity(images.len() * r * r);
        for img in images {
            if img.width != r || img.height != r {
                return Err(Error::invalid(
                    "encode",
                    format!("raster is {}×{}, encoder expects {r}×{r}", img.width, img.height),
                ));
            }
            data.extend(img.values.iter().map(|v| 2.0 * v - 1.0));
        }
        Tensor::new(&[images.len(), 1, r, r], data)
    }

    /// `(μ, log σ)`, each `N×L`, from `images: N×1×H×W` and `poses: N×4`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        images: Var,
        poses: Var,
    ) -> Result<(Var, Var)> {
        let n = tape.shape(images)[0];
        let mut h = images;
        for c in &self.convs {
            h = tape.conv2d(h, p[c.kernel], Some(p[c.bias]), 2, 1)?;
            h = self.spec.activation.apply(tape, h)?;
        }
        let flat = tape.reshape(h, &[n, self.spec.features()])?;
        let proj = self.projection.apply(tape, p, flat)?;
        let proj = self.spec.activation.apply(tape, proj)?;
        let fused = tape.concat(&[poses, proj], 1)?;
        let out = self.fusion.apply(tape, p, fused)?;
        let l = self.spec.latent;
        let mu = tape.slice(out, 1, 0, l)?;
        let raw = tape.slice(out, 1, l, l)?;
        let log_sigma = tape.clamp(raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)?;
        Ok((mu, log_sigma))
    }

    /// `z₀ = μ + exp(log σ) ⊙ ε` with ε supplied as a constant `N×L` tensor.
    pub fn reparameterize_on_tape(
        &self,
        tape: &mut Tape,
        mu: Var,
        log_sigma: Var,
        eps: Tensor,
    ) -> Result<Var> {
        let e = tape.constant(eps);
        let sigma = tape.exp(log_sigma)?;
        let noise = tape.mul(sigma, e)?;
        tape.add(mu, noise)
    }

    /// `z₁ = G⁻¹(z₀; pose)` and its log-determinant.
    pub fn normalize_latent_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        store: &ParamStore,
        z0: Var,
        poses: Var,
    ) -> Result<(Var, Var)> {
        self.latent_flow.normalize(tape, p, store, z0, Some(poses))
    }

    pub fn encode(
        &self,
        store: &ParamStore,
        image: &OccupancyImage,
        pose: &[f64; POSE_DIM],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let img = tape.constant(self.image_tensor(&[image])?);
        let pv = tape.constant(Tensor::new(&[1, POSE_DIM], pose.to_vec())?);
        let (mu, ls) = self.encode_on_tape(&mut tape, &p, img, pv)?;
        Ok((tape.value(mu).to_vec(), tape.value(ls).to_vec()))
    }

    /// One latent draw per call; deterministic given `rng`.
    pub fn reparameterize<R: Rng + ?Sized>(
        &self,
        mu: &[f64],
        log_sigma: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        if mu.len() != log_sigma.len() {
            return Err(Error::Dimension {
                expected: mu.len(),
                got: log_sigma.len(),
            });
        }
        let eps = standard_normal(rng, 1, mu.len());
        Ok(mu
            .iter()
            .zip(log_sigma)
            .zip(eps.data())
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }

    pub fn normalize_latent(
        &self,
        store: &ParamStore,
        z0: &[f64],
        pose: &[f64; POSE_DIM],
    ) -> Result<(Vec<f64>, f64)> {
        let z = Tensor::new(&[1, z0.len()], z0.to_vec())?;
        let c = Tensor::new(&[1, POSE_DIM], pose.to_vec())?;
        let (z1, ld) = self.latent_flow.inverse(store, &z, Some(&c))?;
        Ok((z1.to_vec(), ld[0]))
    }

    /// Density of `z₁` induced by the encoder Gaussian and the latent flow:
    /// `log Q(z₀) + log|det ∂z₀/∂z₁|` at `z₀ = G(z₁)`. Diagnostic only.
    pub fn latent_log_prob(
        &self,
        store: &ParamStore,
        z1: &[f64],
        pose: &[f64; POSE_DIM],
        image: &OccupancyImage,
    ) -> Result<f64> {
        let (mu, ls) = self.encode(store, image, pose)?;
        self.latent_log_prob_given(store, z1, pose, &mu, &ls)
    }

    /// [`Self::latent_log_prob`] with the encoder output already computed.
    pub fn latent_log_prob_given(
        &self,
        store: &ParamStore,
        z1: &[f64],
        pose: &[f64; POSE_DIM],
        mu: &[f64],
        log_sigma: &[f64],
    ) -> Result<f64> {
        let z = Tensor::new(&[1, z1.len()], z1.to_vec())?;
        let c = Tensor::new(&[1, POSE_DIM], pose.to_vec())?;
        let (z0, ld) = self.latent_flow.forward(store, &z, Some(&c))?;
        let q: f64 = z0
            .data()
            .iter()
            .zip(mu)
            .zip(log_sigma)
            .map(|((z, m), s)| {
                let u = (z - m) / s.exp();
                -0.5 * u * u - s - 0.5 * LN_2PI
            })
            .sum();
        Ok(q + ld[0])
    }
}
