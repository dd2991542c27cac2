use std::ops::Index;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Result, Tape, Tensor, TensorError, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// An ordered collection of named, learnable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Parameters of a store recorded as leaves on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> Bound<'t> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a `shape` tensor drawn from `N(0, std²)`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        self.add(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        )
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Marks every tensor as (non-)differentiable for subsequent binds.
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.tensors
            .iter_mut()
            .for_each(|t| t.set_requires_grad(flag));
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Records every tensor as a constant, regardless of its flag.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t)).collect(),
        }
    }

    /// Adds the gradients found on `bound` into the tensors' grad buffers.
    pub fn accumulate_grads(&mut self, bound: &Bound<'_>) -> Result<()> {
        if bound.vars.len() != self.tensors.len() {
            return Err(TensorError::Invalid {
                op: "accumulate_grads",
                msg: format!(
                    "{} bound vars for {} params",
                    bound.vars.len(),
                    self.tensors.len()
                ),
            });
        }
        for (t, v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = v.grad() {
                t.accumulate_grad(g.data())?;
            }
        }
        Ok(())
    }

    /// Adds another store's gradient buffers into this one (same layout).
    pub fn accumulate_grads_from(&mut self, other: &ParamStore) -> Result<()> {
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if let Some(g) = o.grad() {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }
}

/// Standard normal draw by Box-Muller.
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
