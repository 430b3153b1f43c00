//! Named parameter storage shared by every learnable module.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
    /// Buffers (permutations, fixed signs) are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

/// Parameters placed on a tape, indexed by [`ParamId`].
pub struct Bound(Vec<Var>);

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(Entry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let e = &mut self.entries[id.0];
        if e.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: e.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        e.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Place every entry on the tape; trainable entries get gradients when
    /// `requires_grad` is set.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound(
            self.entries
                .iter()
                .map(|e| tape.leaf(e.value.clone(), requires_grad && e.trainable))
                .collect(),
        )
    }

    /// Per-entry gradients aligned with the store; `None` for buffers and
    /// entries the loss does not reach.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients) -> Vec<Option<Tensor>> {
        bound.0.iter().map(|v| grads.get(*v).cloned()).collect()
    }

    /// Add independent `N(0, std²)` noise to every trainable value.
    pub fn perturb<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        for e in self.entries.iter_mut().filter(|e| e.trainable) {
            let data = e
                .value
                .data()
                .iter()
                .map(|v| v + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            e.value = Tensor::new(e.value.shape(), data).expect("same shape");
        }
    }

    /// Replace the values of `other`'s matching entries. Names and shapes must agree.
    pub fn load_values(&mut self, other: &[Entry]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::format(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(Error::format(format!(
                    "tensor '{}' {:?} does not match stored '{}' {:?}",
                    mine.name,
                    mine.value.shape(),
                    theirs.name,
                    theirs.value.shape()
                )));
            }
            mine.value = theirs.value.clone();
        }
        Ok(())
    }
}
