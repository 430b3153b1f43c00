//! Dense layers on top of the tape.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    LeakyRelu,
}

const LEAKY_SLOPE: f64 = 0.01;

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::LeakyRelu => "leaky_relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// Uniform `±1/√in` weights, zero bias; all-zero when `zero` is set.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
        rng: &mut R,
    ) -> Self {
        Self::uniform(store, name, inputs, outputs, if zero { 0.0 } else { 1.0 }, rng)
    }

    /// Uniform `±gain/√in` weights, zero bias.
    pub fn uniform<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let bound = gain / (inputs as f64).sqrt();
        let zero = bound == 0.0;
        let data = (0..inputs * outputs)
            .map(|_| if zero { 0.0 } else { rng.random_range(-bound..bound) })
            .collect();
        let w = store.add(
            format!("{name}.w"),
            Tensor::new(&[inputs, outputs], data).expect("linear shape"),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[outputs]));
        Self { w, b }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.affine(x, p[self.w], p[self.b])
    }
}

/// Fully connected stack; the activation follows every layer but the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists the widths from input to output. The output layer is
    /// zero-initialized when `zero_last` is set.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        zero_last: bool,
        rng: &mut R,
    ) -> Self {
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                Linear::new(
                    store,
                    &format!("{name}.l{i}"),
                    sizes[i],
                    sizes[i + 1],
                    zero_last && i == n - 1,
                    rng,
                )
            })
            .collect();
        Self { layers, activation }
    }

    pub fn apply(&self, tape: &mut Tape, p: &Bound, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.apply(tape, p, x)?;
            if i != last {
                x = self.activation.apply(tape, x)?;
            }
        }
        Ok(x)
    }
}
