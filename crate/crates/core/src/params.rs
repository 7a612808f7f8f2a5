//! Named parameter storage and the binding of parameters onto a graph.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Scalar, Tensor, Var};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal(0, 0.02²) truncated at two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
}

/// Declared parameter: stable hierarchical name, shape and initializer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Specs for a `k × k × Cin × Cout` convolution plus bias.
pub fn conv_specs(prefix: &str, kernel: usize, cin: usize, cout: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[kernel, kernel, cin, cout], Init::TruncNormal),
        ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros),
    ]
}

pub fn depthwise_specs(prefix: &str, kernel: usize, channels: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.weight"), &[kernel, kernel, channels], Init::TruncNormal),
        ParamSpec::new(format!("{prefix}.bias"), &[channels], Init::Zeros),
    ]
}

pub fn norm_specs(prefix: &str, channels: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{prefix}.gamma"), &[channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.beta"), &[channels], Init::Zeros),
    ]
}

fn trunc_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * INIT_STD;
        }
    }
}

/// All learnable tensors of a model, keyed by name.
///
/// The two Siamese encoder passes read the same entries; there is exactly
/// one tensor per name.
#[derive(Clone, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> std::fmt::Debug for ModelParams<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_map().entries(self.tensors.iter().map(|(k, v)| (k, v.shape()))).finish()
    }
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams { tensors: BTreeMap::new() }
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Initializes every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::TruncNormal => (0..n).map(|_| T::of(trunc_normal(&mut rng))).collect(),
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
            };
            if tensors.insert(spec.name.clone(), Tensor::new(&spec.shape, data)?).is_some() {
                return Err(Error::Config(format!("duplicate parameter name `{}`", spec.name)));
            }
        }
        Ok(ModelParams { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for spec in specs {
            match self.tensors.get(&spec.name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// A graph plus lazily bound parameters. Each parameter becomes one leaf no
/// matter how many times it is read, so repeated use accumulates gradient.
pub struct Session<'p, T: Scalar> {
    pub graph: Graph<T>,
    params: &'p ModelParams<T>,
    bound: HashMap<String, Var>,
}

impl<'p, T: Scalar> Session<'p, T> {
    pub fn new(params: &'p ModelParams<T>) -> Self {
        Self::with_graph(params, Graph::new())
    }

    pub fn with_graph(params: &'p ModelParams<T>, graph: Graph<T>) -> Self {
        Session { graph, params, bound: HashMap::new() }
    }

    /// Leaf for parameter `name`, registering it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not defined")))?;
        let v = self.graph.param(t.clone());
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    /// Convenience for `{prefix}.weight` / `{prefix}.bias`.
    pub fn wb(&mut self, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.p(&format!("{prefix}.weight"))?, self.p(&format!("{prefix}.bias"))?))
    }

    /// Runs `f` with `name` pushed onto the graph's diagnostic scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.graph.push_scope(name);
        let r = f(self);
        self.graph.pop_scope();
        r
    }

    pub fn params(&self) -> &'p ModelParams<T> {
        self.params
    }

    /// Gradient for every parameter; unread parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
