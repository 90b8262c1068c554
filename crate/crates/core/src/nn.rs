//! Parameter storage and the small layer vocabulary the heads are built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter '{name}'");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

/// Batchnorm running statistics, keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunningStats<T> {
    pub name: String,
    /// `None` until the first training-mode pass (or an explicit load).
    pub mean: Option<Vec<T>>,
    pub var: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BufferStore<T> {
    stats: Vec<RunningStats<T>>,
}

impl<T: Scalar> BufferStore<T> {
    pub fn new() -> Self {
        BufferStore { stats: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>) -> BufferId {
        self.stats.push(RunningStats { name: name.into(), mean: None, var: None });
        BufferId(self.stats.len() - 1)
    }

    pub fn get(&self, id: BufferId) -> &RunningStats<T> {
        &self.stats[id.0]
    }

    pub fn get_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.stats[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &RunningStats<T>> {
        self.stats.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut RunningStats<T>> {
        self.stats.iter_mut()
    }
}

/// One forward pass: a fresh tape with every parameter bound as a leaf.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    vars: Vec<Var>,
    buffers: &'a mut BufferStore<T>,
    train: bool,
}

impl<'a, T: Scalar> Session<'a, T> {
    /// `train` selects batch statistics and gradient capture together.
    pub fn new(params: &ParamStore<T>, buffers: &'a mut BufferStore<T>, train: bool) -> Self {
        Self::with_graph(Graph::new(), params, buffers, train, train)
    }

    /// `grad` controls whether parameters are bound as grad-requiring leaves,
    /// independently of the batchnorm mode.
    pub fn with_graph(
        mut graph: Graph<T>,
        params: &ParamStore<T>,
        buffers: &'a mut BufferStore<T>,
        train: bool,
        grad: bool,
    ) -> Self {
        let vars = params.values().iter().map(|t| graph.leaf(t.clone(), grad)).collect();
        Session { graph, vars, buffers, train }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn buffers(&mut self) -> &mut BufferStore<T> {
        self.buffers
    }

    /// Gradient per parameter in store order; missing entries are zero.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .map(|&v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(self.graph.shape(v).to_vec())))
            .collect()
    }
}

/// He-normal initialization: `N(0, 2/fan_in)`.
pub fn he_normal<T: Scalar>(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Fully connected layer `x·W + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), he_normal([fan_in, fan_out], fan_in, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([fan_out]));
        Linear { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = s.graph.matmul(x, s.p(self.weight))?;
        s.graph.add_bias(y, s.p(self.bias))
    }

    pub fn forward_relu<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let y = self.forward(s, x)?;
        Ok(s.graph.relu(y))
    }

    pub fn zero_init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.get_mut(self.weight).data_mut().fill(T::zero());
        store.get_mut(self.bias).data_mut().fill(T::zero());
    }
}

/// Per-channel batchnorm with learnable affine and momentum running statistics.
#[derive(Clone, Copy, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, buffers: &mut BufferStore<T>, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            stats: buffers.add(name),
            channels,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode normalizes with batch statistics and blends them into the
    /// running estimate (`running = (1-m)·running + m·batch`, unbiased variance);
    /// eval mode uses the running estimate.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (s.p(self.gamma), s.p(self.beta));
        let eps = T::lit(self.eps);
        if s.is_train() {
            let (y, batch) = s.graph.batch_norm_train(x, gamma, beta, eps)?;
            let m = T::lit(self.momentum);
            let unbias = if batch.count > 1 {
                T::lit(batch.count as f64 / (batch.count - 1) as f64)
            } else {
                T::one()
            };
            let stats = s.buffers().get_mut(self.stats);
            let mean = stats.mean.get_or_insert_with(|| vec![T::zero(); batch.mean.len()]);
            for (r, &b) in mean.iter_mut().zip(&batch.mean) {
                *r = (T::one() - m) * *r + m * b;
            }
            let var = stats.var.get_or_insert_with(|| vec![T::one(); batch.var.len()]);
            for (r, &b) in var.iter_mut().zip(&batch.var) {
                *r = (T::one() - m) * *r + m * b * unbias;
            }
            Ok(y)
        } else {
            let stats = s.buffers().get(self.stats);
            let (Some(mean), Some(var)) = (stats.mean.clone(), stats.var.clone()) else {
                return Err(Error::Uninitialized(stats.name.clone()));
            };
            s.graph.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
        }
    }
}
