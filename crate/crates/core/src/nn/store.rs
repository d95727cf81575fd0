use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::NnError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

/// Named, ordered parameter registry. Names are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(NnError::Duplicate(name));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Replaces the tensor behind `id`, keeping its name. Shapes may change.
    pub fn replace(&mut self, id: ParamId, tensor: Tensor<T>) {
        self.tensors[id.0] = tensor.with_requires_grad(true);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Ids whose names start with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }
}

/// How a parameter is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    /// Glorot-style uniform over `±√(6/(fan_in+fan_out))`.
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    /// LSTM gate bias `[4h]`: zero except the forget block `h..2h`, which is one.
    ForgetBias { hidden: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Builds a store from `specs`, sampling in spec order from one seeded stream.
pub fn init_params<T: Scalar>(specs: &[ParamSpec], seed: u64) -> Result<ParamStore<T>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for spec in specs {
        let tensor = sample(spec, &mut rng)?;
        store.add(spec.name.clone(), tensor)?;
    }
    Ok(store)
}

pub(crate) fn sample<T: Scalar, R: Rng>(spec: &ParamSpec, rng: &mut R) -> Result<Tensor<T>, NnError> {
    if spec.shape.is_empty() || spec.shape.contains(&0) {
        return Err(NnError::NonPositive(spec.shape.clone()));
    }
    let n: usize = spec.shape.iter().product();
    let data = match spec.init {
        ParamInit::Glorot { fan_in, fan_out } => {
            if fan_in == 0 || fan_out == 0 {
                return Err(NnError::NonPositive(vec![fan_in, fan_out]));
            }
            let bound = glorot_bound(fan_in, fan_out);
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        }
        ParamInit::Zeros => vec![T::zero(); n],
        ParamInit::ForgetBias { hidden } => (0..n)
            .map(|i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() })
            .collect(),
    };
    Ok(Tensor::new(&spec.shape, data)?)
}
