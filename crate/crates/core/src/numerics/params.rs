use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, NumericsError, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Seeded parameter initializer. Each parameter draws from its own stream
/// keyed by its name, so values do not depend on registration order.
#[derive(Debug, Clone, Copy)]
pub struct Initializer {
    seed: u64,
    all_zero: bool,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            all_zero: false,
        }
    }

    /// Every parameter, including layer-norm gains, starts at zero.
    pub fn zeroed() -> Self {
        Self {
            seed: 0,
            all_zero: true,
        }
    }

    pub fn tensor<T: Real>(&self, name: &str, shape: &[usize], init: Init) -> Tensor<T> {
        if self.all_zero {
            return Tensor::zeros(shape);
        }
        match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::filled(shape, T::one()),
            Init::Normal(std) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name));
                let normal = Normal::new(0.0, std).expect("finite std");
                Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng)))
            }
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Named parameter collection. Sharing between model parts is expressed by
/// handing the same [`ParamId`] to both, so they read and update one buffer.
#[derive(Debug, Clone)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    frozen: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            frozen: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(NumericsError::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor.with_requires_grad(true));
        self.frozen.push(false);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn init(&mut self, init: &Initializer, name: &str, shape: &[usize], how: Init) -> Result<ParamId> {
        self.add(name, init.tensor(name, shape, how))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
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
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.frozen[id.0] = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.iter().map(|(_, n, t)| (n.to_string(), t.shape().to_vec())).collect()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Adds parameter gradients from a backward pass into each tensor's
    /// `grad` buffer. Frozen parameters are skipped.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            if !self.frozen[id.0] {
                self.tensors[id.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}
