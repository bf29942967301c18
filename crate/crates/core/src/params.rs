//! Named parameter storage and its binding onto a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors of one network.
///
/// A tensor may carry a runtime multiplier (equalized learning rate): the
/// stored value is what the optimizer sees, the network uses `value * multiplier`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    prefix: String,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    multipliers: Vec<f64>,
}

/// Graph handles for every tensor of a [`ParamSet`], in the same order.
#[derive(Clone, Debug)]
pub struct Bound {
    leaves: Vec<Var>,
    used: Vec<Var>,
}

impl Bound {
    /// The value the network consumes, multiplier applied.
    pub fn get(&self, id: ParamId) -> Var {
        self.used[id.0]
    }

    /// The stored tensors as graph leaves; gradients are read here.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }
}

impl From<Vec<Var>> for Bound {
    /// Uses the vars as given, without multipliers.
    fn from(vars: Vec<Var>) -> Self {
        Self {
            leaves: vars.clone(),
            used: vars,
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self {
            prefix: prefix.into(),
            names: Vec::new(),
            tensors: Vec::new(),
            multipliers: Vec::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let full = format!("{}.{name}", self.prefix);
        debug_assert!(!self.names.contains(&full), "duplicate parameter {full}");
        self.names.push(full);
        self.tensors.push(t.with_grad());
        self.multipliers.push(1.0);
        ParamId(self.tensors.len() - 1)
    }

    fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::new(shape, data).expect("shape")
    }

    /// He-normal weights scaled by `gain / sqrt(fan_in)`.
    pub fn add_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> ParamId {
        let std = gain / (fan_in as f64).sqrt();
        self.add(name, Self::normal(shape, std, rng))
    }

    /// Stored as `N(0, gain^2)` and multiplied by `1 / sqrt(fan_in)` at use, so
    /// the effective initialization matches [`Self::add_normal`] while optimizer
    /// steps are relative to a unit-scale tensor.
    pub fn add_equalized(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> ParamId {
        let id = self.add(name, Self::normal(shape, gain, rng));
        self.multipliers[id.0] = 1.0 / (fan_in as f64).sqrt();
        id
    }

    /// [`Self::add_equalized`] or [`Self::add_normal`].
    pub fn add_weight(&mut self, equalized: bool, name: &str, shape: &[usize], fan_in: usize, gain: f64, rng: &mut impl Rng) -> ParamId {
        if equalized {
            self.add_equalized(name, shape, fan_in, gain, rng)
        } else {
            self.add_normal(name, shape, fan_in, gain, rng)
        }
    }

    pub fn multiplier(&self, id: ParamId) -> f64 {
        self.multipliers[id.0]
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::lit(v)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Records every tensor as a graph leaf, trainable or constant.
    ///
    /// Constants are recorded with the multiplier already applied.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        if !trainable {
            let used = self
                .tensors
                .iter()
                .zip(&self.multipliers)
                .map(|(t, &m)| {
                    let mut t = t.clone();
                    t.grad = None;
                    if m != 1.0 {
                        let m = T::lit(m);
                        t.data_mut().iter_mut().for_each(|v| *v = *v * m);
                    }
                    g.constant(t)
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(Bound {
                leaves: used.clone(),
                used,
            });
        }
        let leaves = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.grad = None;
                g.param(t)
            })
            .collect::<Result<Vec<_>>>()?;
        self.wrap(g, leaves)
    }

    /// Applies the multipliers to leaves standing for this set's tensors.
    pub fn wrap(&self, g: &mut Graph<T>, leaves: Vec<Var>) -> Result<Bound> {
        if leaves.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "{} leaves for {} parameters of {}",
                leaves.len(),
                self.tensors.len(),
                self.prefix
            )));
        }
        let used = leaves
            .iter()
            .zip(&self.multipliers)
            .map(|(&v, &m)| if m == 1.0 { Ok(v) } else { g.scale(v, T::lit(m)) })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { leaves, used })
    }

    /// Adds the graph's leaf gradients into each tensor's gradient buffer.
    pub fn collect_grads(&mut self, g: &Graph<T>, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(bound.leaves()) {
            match g.grad(v) {
                Some(grad) => t.accumulate_grad(grad),
                None => {
                    let n = t.len();
                    t.accumulate_grad(&vec![T::zero(); n]);
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(|t| t.grad = None);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn export(&self, ck: &mut Checkpoint) {
        for (n, t) in self.names.iter().zip(&self.tensors) {
            ck.push(n.clone(), t);
        }
    }

    /// Overwrites every tensor from `ck`, checking names and shapes.
    pub fn import(&mut self, ck: &Checkpoint) -> Result<()> {
        for (n, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = ck.require(n)?;
            if src.shape() != t.shape() {
                return Err(Error::dim("checkpoint import", t.shape(), src.shape()));
            }
            let loaded: Tensor<T> = src.cast();
            t.data_mut().copy_from_slice(loaded.data());
        }
        Ok(())
    }
}
