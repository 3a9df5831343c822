use std::collections::BTreeMap;

use rand::Rng;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
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

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Scalar parameter count of entries whose name starts with `prefix`.
    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Parameter counts grouped by the first `depth` dot-separated name components.
    pub fn count_by_prefix(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.params {
            let key = k.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += t.len();
        }
        out
    }

    /// Adds every entry of `other`, replacing entries of the same name.
    pub fn merge(&mut self, other: ParamStore) {
        self.params.extend(other.params);
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

/// Fan-in uniform initialisation bound, `1/sqrt(fan_in)`.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// How a planned parameter is initialised.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter shapes. Counting never allocates the tensors, so
/// paper-scale models can be sized cheaply; [`ParamPlan::build`] draws values
/// in plan order, which makes initialisation a pure function of the seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamPlan {
    specs: Vec<ParamSpec>,
}

impl ParamPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, dims: impl Into<Vec<usize>>, init: Init) {
        self.specs.push(ParamSpec {
            name: name.into(),
            dims: dims.into(),
            init,
        });
    }

    pub fn uniform(&mut self, name: impl Into<String>, dims: impl Into<Vec<usize>>, fan_in: usize) {
        self.push(name, dims, Init::FanIn(fan_in));
    }

    /// Weight `[d_in, d_out]` at `{prefix}.weight` and optional bias at `{prefix}.bias`.
    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) {
        self.uniform(format!("{prefix}.weight"), [d_in, d_out], d_in);
        if bias {
            self.uniform(format!("{prefix}.bias"), [d_out], d_in);
        }
    }

    /// Unit `gamma` and zero `beta` of a layer or group norm over `d` channels.
    pub fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.gamma"), [d], Init::Ones);
        self.push(format!("{prefix}.beta"), [d], Init::Zeros);
    }

    pub fn extend(&mut self, other: ParamPlan) {
        self.specs.extend(other.specs);
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(|s| s.dims.iter().product::<usize>()).sum()
    }

    pub fn num_params_under(&self, prefix: &str) -> usize {
        self.specs
            .iter()
            .filter(|s| s.name.starts_with(prefix))
            .map(|s| s.dims.iter().product::<usize>())
            .sum()
    }

    /// Counts grouped by the first `depth` dot-separated name components.
    pub fn count_by_prefix(&self, depth: usize) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.specs {
            let key = s.name.split('.').take(depth).collect::<Vec<_>>().join(".");
            *out.entry(key).or_insert(0) += s.dims.iter().product::<usize>();
        }
        out
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for s in &self.specs {
            if store.contains(&s.name) {
                return Err(Error::Contract(format!("parameter {} planned twice", s.name)));
            }
            let t = match s.init {
                Init::FanIn(fan_in) => Tensor::uniform(s.dims.clone(), fan_in_bound(fan_in), rng),
                Init::Zeros => Tensor::zeros(s.dims.clone()),
                Init::Ones => Tensor::ones(s.dims.clone()),
            };
            store.insert(s.name.clone(), t);
        }
        Ok(store)
    }
}

/// Binds parameters from a [`ParamStore`] onto a fresh [`Graph`].
///
/// A parameter is bound at most once per session. Parameters whose name starts
/// with one of the frozen prefixes are bound as constants and so never receive
/// gradients.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    frozen: Vec<String>,
    bound: BTreeMap<String, Var>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            g: Graph::new(),
            store,
            frozen: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    /// A session that appends to an existing tape.
    pub fn with_graph(g: Graph, store: &'a ParamStore) -> Self {
        Self {
            g,
            ..Self::new(store)
        }
    }

    pub fn into_graph(self) -> Graph {
        self.g
    }

    pub fn with_frozen(mut self, prefixes: &[String]) -> Self {
        self.frozen = prefixes.to_vec();
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            self.g.constant(t)
        } else {
            self.g.variable(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound, trainable parameter.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(_, &v)| self.g.requires_grad(v))
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v)))
            .collect()
    }

    /// Runs backward from `loss` and returns per-parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<BTreeMap<String, Tensor>> {
        let grads = self.g.backward(loss)?;
        Ok(self.param_grads(&grads))
    }
}
