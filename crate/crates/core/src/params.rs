//! Named parameter collections, their binding into a [`Graph`], seeded
//! initialization and the Adam optimizer.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    /// Id of the `i`-th tensor pushed into a store.
    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn load_tensors(&mut self, tensors: Vec<Tensor<T>>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::shape("parameter count", self.tensors.len(), tensors.len()));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::shape(
                    alloc::format!("parameter {}", self.names[i]),
                    alloc::format!("{:?}", old.shape()),
                    alloc::format!("{:?}", new.shape()),
                ));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Copies every tensor into `graph` as a leaf.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        Bound(self.tensors.iter().map(|t| graph.param(t.clone(), trainable)).collect())
    }

    /// Gradient per parameter, zero where the loss did not depend on it.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Grads<T>) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.0)
            .map(|(t, &id)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph nodes holding the parameters of one store, in store order.
#[derive(Debug, Clone)]
pub struct Bound(Vec<NodeId>);

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

/// Seeded source of initial weights: `N(0, std²)`.
#[derive(Debug, Clone)]
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

pub const INIT_STD: f64 = 0.02;

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self::with_std(seed, INIT_STD)
    }

    pub fn with_std(seed: u64, std: f64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, std).expect("finite positive std"),
        }
    }

    /// Changes the standard deviation of subsequent draws.
    pub fn set_std(&mut self, std: f64) {
        self.normal = Normal::new(0.0, std).expect("finite positive std");
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize]) -> Tensor<T> {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| T::from_f64(self.normal.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("length matches shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; moment buffers are created lazily on the first
/// step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one = T::one();
        let lr_t = T::from_f64(
            self.cfg.lr * libm::sqrt(1.0 - libm::pow(self.cfg.beta2, self.step as f64))
                / (1.0 - libm::pow(self.cfg.beta1, self.step as f64)),
        );
        let eps = T::from_f64(self.cfg.eps);
        for ((p, g), (m, v)) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= lr_t * *mv / (vv.sqrt() + eps);
            }
        }
    }
}
