//! Named parameter storage, initialization and per-forward binding.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// How a parameter was (or will be) initialized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    TruncatedNormal { sigma: f64 },
    Zeros,
    Ones,
    Const { value: f64 },
}

/// Samples from N(0, σ²) conditioned on |x| ≤ 2σ by rejection.
pub fn init_truncated_normal<R: Rng + ?Sized>(shape: (usize, usize), sigma: f64, rng: &mut R) -> Result<Array2<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("sigma must be positive, got {sigma}")));
    }
    Ok(Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            break z * sigma;
        }
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Array2<f64>,
    pub trainable: bool,
    pub init: Init,
}

/// Ordered map of named parameters; iteration order is the checkpoint order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter; names must be unique.
    pub fn add(
        &mut self,
        name: &str,
        shape: (usize, usize),
        init: Init,
        trainable: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Param(format!("parameter {name} registered twice")));
        }
        let value = match init {
            Init::TruncatedNormal { sigma } => init_truncated_normal(shape, sigma, rng)?,
            Init::Zeros => Array2::zeros(shape),
            Init::Ones => Array2::ones(shape),
            Init::Const { value } => Array2::from_elem(shape, value),
        };
        self.params.insert(
            name.to_string(),
            Param {
                value,
                trainable,
                init,
            },
        );
        Ok(())
    }

    pub fn insert(&mut self, name: &str, param: Param) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Param(format!("parameter {name} registered twice")));
        }
        self.params.insert(name.to_string(), param);
        Ok(())
    }

    /// Trainable weight with σ = 1/√fan_in.
    pub fn add_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let sigma = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.add(name, (fan_in, fan_out), Init::TruncatedNormal { sigma }, true, rng)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))
    }

    pub fn value(&self, name: &str) -> Result<&Array2<f64>> {
        Ok(&self.get(name)?.value)
    }

    pub fn set(&mut self, name: &str, value: Array2<f64>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))?;
        if p.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "{name}: {:?} vs {:?}",
                p.value.dim(),
                value.dim()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Param(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Total number of scalar entries.
    pub fn n_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }
}

/// One forward pass: a fresh tape, lazily bound parameters, the dropout RNG and
/// pending running-statistic updates.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParameterStore,
    bound: BTreeMap<String, Var>,
    pub training: bool,
    rng: ChaCha8Rng,
    updates: Vec<(String, Array2<f64>)>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParameterStore, training: bool, seed: u64) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }

    /// The graph node for a parameter, creating it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = if p.trainable {
            self.graph.param(p.value.clone())?
        } else {
            self.graph.constant(p.value.clone())?
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn push_update(&mut self, name: &str, value: Array2<f64>) {
        self.updates.push((name.to_string(), value));
    }

    /// Running-statistic updates produced during a training forward pass.
    pub fn take_updates(&mut self) -> Vec<(String, Array2<f64>)> {
        std::mem::take(&mut self.updates)
    }

    /// Gradients of bound trainable parameters after `graph.backward`.
    /// Trainable parameters the pass never touched get zero gradients.
    pub fn gradients(&self) -> BTreeMap<String, Array2<f64>> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(name, p)| {
                let g = match self.bound.get(name) {
                    Some(&v) => self.graph.grad(v),
                    None => Array2::zeros(p.value.dim()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}
