//! Named parameter storage, deterministic initialization, and binding of
//! parameters onto a [`Tape`].

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters keyed by dotted names, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::invalid("param_store", format!("duplicate parameter {name:?}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape` as a gradient-receiving leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|(n, t)| (n.clone(), tape.param(t.clone()))).collect();
        Bound { vars }
    }

    /// Puts every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self.tensors.iter().map(|(n, t)| (n.clone(), tape.constant(t.clone()))).collect();
        Bound { vars }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Wraps existing tape handles, e.g. leaves created by a gradient check.
    pub fn new(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid("params", format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Gradients after [`Tape::backward`], zero-filled for parameters the
    /// loss did not reach.
    pub fn grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(n, &v)| {
                let g = tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (n.clone(), g)
            })
            .collect()
    }
}

/// Seeded source of initial parameter values. Draws happen in call order,
/// so a fixed construction order gives a fixed initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Uniform on `[-1/√fan_in, 1/√fan_in]`.
    pub fn fan_in_uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::rand_uniform(shape, -bound, bound, &mut self.rng)
    }

    pub fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        Tensor::rand_uniform(shape, lo, hi, &mut self.rng)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// A 2D convolution layer with square kernel and optional bias, operating on
/// `[B,C,H,W]` values. Parameters are `<name>.weight` and `<name>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self { name: name.into(), cin, cout, kernel, stride: 1, padding: kernel / 2, groups: 1, bias: true }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::new(name, cin, cout, 1)
    }

    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        Self { groups: channels, ..Self::new(name, channels, channels, kernel) }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin / self.groups, self.kernel, self.kernel]
    }

    pub fn init(&self, init: &mut Initializer, store: &mut ParamStore) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        store.insert(self.weight_name(), init.fan_in_uniform(&shape, fan_in))?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.cout, 1, 1]))?;
        }
        Ok(())
    }

    /// Same as [`init`](Self::init) but with all-zero weights.
    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store.insert(self.weight_name(), Tensor::zeros(&self.weight_shape()))?;
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros(&[self.cout, 1, 1]))?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&self.weight_name())?;
        let y = tape.conv2d(x, w, self.stride, self.padding, self.groups)?;
        if self.bias {
            let b = p.get(&self.bias_name())?;
            tape.add(y, b)
        } else {
            Ok(y)
        }
    }
}
