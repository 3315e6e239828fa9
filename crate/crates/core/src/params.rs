//! Named parameter stores and gradient maps.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

// Float must be in scope for f64 math in the no_std build.
#[allow(unused_imports)]
use num_traits::Float;


use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{self, EngineRng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Initializer record kept per parameter so a store can be rebuilt.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitSpec {
    Zeros,
    Ones,
    Const(f64),
    /// Normal(0, sqrt(2 / fan_in)); standard for relu layers.
    HeNormal { fan_in: usize },
    /// Normal(0, std) with an explicit scale (tempered output layers).
    Normal { std: f64 },
}

impl InitSpec {
    pub fn sample<R: Real>(self, shape: &[usize], rng: &mut EngineRng) -> Tensor<R> {
        let numel: usize = shape.iter().product();
        match self {
            InitSpec::Zeros => Tensor::zeros(shape.to_vec()),
            InitSpec::Ones => Tensor::ones(shape.to_vec()),
            InitSpec::Const(v) => {
                Tensor::new(shape.to_vec(), alloc::vec![R::from_f64(v); numel]).unwrap()
            }
            InitSpec::HeNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                Tensor::new(shape.to_vec(), rng::normal_vec(rng, numel, std)).unwrap()
            }
            InitSpec::Normal { std } => {
                Tensor::new(shape.to_vec(), rng::normal_vec(rng, numel, std)).unwrap()
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Param<R: Real> {
    pub value: Tensor<R>,
    pub trainable: bool,
    pub init: InitSpec,
}

/// Named, flattened learnable parameter vectors. Iteration order is the
/// sorted name order, which keeps every downstream walk deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R: Real> {
    entries: BTreeMap<String, Param<R>>,
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { entries: BTreeMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: &[usize],
        init: InitSpec,
        trainable: bool,
        rng: &mut EngineRng,
    ) {
        assert!(
            !self.entries.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let value = init.sample(shape, rng);
        self.entries.insert(name.to_string(), Param { value, trainable, init });
    }

    pub fn get(&self, name: &str) -> Result<&Param<R>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<R>> {
        self.get(name).map(|p| &p.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<R>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                detail: alloc::format!(
                    "parameter '{name}': {:?} vs {:?}",
                    entry.value.shape(),
                    value.shape()
                ),
            });
        }
        entry.value = value.detach();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<R>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<R>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Attach parameters to a tape: trainable ones become leaf nodes,
    /// frozen ones stay detached constants.
    pub fn bind(&self, tape: &mut Tape<R>) -> BoundParams<R> {
        let mut map = BTreeMap::new();
        for (name, param) in &self.entries {
            let tensor = if param.trainable {
                tape.leaf(&param.value)
            } else {
                param.value.detach()
            };
            map.insert(name.clone(), (tensor, param.trainable));
        }
        BoundParams { map }
    }
}

/// Per-tape view of a [`ParamStore`].
pub struct BoundParams<R: Real> {
    map: BTreeMap<String, (Tensor<R>, bool)>,
}

impl<R: Real> BoundParams<R> {
    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.map
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Gradients of every trainable parameter after `tape.backward`.
    /// Parameters unreachable from the loss map to zero tensors.
    pub fn collect_grads(&self, tape: &Tape<R>) -> GradMap<R> {
        let mut grads = BTreeMap::new();
        for (name, (tensor, trainable)) in &self.map {
            if !trainable {
                continue;
            }
            let grad = match tensor.node().and_then(|id| tape.grad(id)) {
                Some(g) => Tensor::new(tensor.shape().to_vec(), g.to_vec()).unwrap(),
                None => Tensor::zeros(tensor.shape().to_vec()),
            };
            grads.insert(name.clone(), grad);
        }
        GradMap { entries: grads }
    }

    pub fn node_of(&self, name: &str) -> Option<NodeId> {
        self.map.get(name).and_then(|(t, _)| t.node())
    }
}

/// parameter-name -> gradient tensor, same shapes as the parameters.
#[derive(Clone, Debug, Default)]
pub struct GradMap<R: Real> {
    entries: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> GradMap<R> {
    pub fn zeros_like(store: &ParamStore<R>) -> Self {
        let entries = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| (name.clone(), Tensor::zeros(p.value.shape().to_vec())))
            .collect();
        GradMap { entries }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<R>> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Elementwise `self += other` over matching names.
    pub fn add_assign(&mut self, other: &GradMap<R>) {
        for (name, grad) in &other.entries {
            match self.entries.get_mut(name) {
                Some(acc) => {
                    let mut data = acc.data().to_vec();
                    for (a, g) in data.iter_mut().zip(grad.data()) {
                        *a += *g;
                    }
                    *acc = Tensor::new(acc.shape().to_vec(), data).unwrap();
                }
                None => {
                    self.entries.insert(name.clone(), grad.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: R) {
        for grad in self.entries.values_mut() {
            let data = grad.data().iter().map(|&g| g * factor).collect();
            *grad = Tensor::new(grad.shape().to_vec(), data).unwrap();
        }
    }

    /// Flatten every entry (sorted by name) into one f64 vector.
    pub fn flatten_f64(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for grad in self.entries.values() {
            out.extend(grad.data().iter().map(|&g| g.to_f64()));
        }
        out
    }

    /// Largest |a - b| across all entries of two maps with identical keys.
    pub fn max_abs_diff(&self, other: &GradMap<R>) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.entries
            .iter()
            .map(|(name, g)| g.max_abs_diff(other.entries.get(name).expect("matching keys")))
            .fold(0.0, f64::max)
    }
}
