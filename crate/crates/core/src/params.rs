//! Named parameter tensors and their gradients.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Parameters keyed by dotted names (`gen.sigma`, `inf.gru.w_z`, ...).
/// Iteration order is the lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamSet(BTreeMap<String, Tensor>);

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.0.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.0
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Register every parameter as a gradient-receiving leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        self.bind_filtered(graph, |_| true)
    }

    /// Like [`bind`](Self::bind), but parameters rejected by `trainable`
    /// enter the graph as constants.
    pub fn bind_filtered<'g>(
        &self,
        graph: &'g Graph,
        trainable: impl Fn(&str) -> bool,
    ) -> BoundParams<'g> {
        let vars = self
            .0
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    graph.param(t.clone())
                } else {
                    graph.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters registered on one graph.
pub struct BoundParams<'g> {
    vars: BTreeMap<String, Var<'g>>,
}

impl<'g> BoundParams<'g> {
    /// Bind existing vars under the given names.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var<'g>)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Gradients by parameter name; constants get zeros.
    pub fn named_grads(&self, grads: &Gradients) -> GradSet {
        let map = self
            .vars
            .iter()
            .map(|(name, v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect();
        GradSet(map)
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradSet(BTreeMap<String, Tensor>);

impl GradSet {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self(
            params
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, g: Tensor) {
        self.0.insert(name.into(), g);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    /// Elementwise `self += other`, in name order.
    pub fn accumulate(&mut self, other: &GradSet) -> Result<()> {
        for (name, g) in &other.0 {
            match self.0.get_mut(name) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "accumulate",
                            lhs: acc.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.0.insert(name.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.0.values_mut() {
            for v in t.data_mut() {
                *v *= c;
            }
        }
    }

    /// Rescale so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.0.values().all(Tensor::is_finite)
    }
}

/// Uniform(-bound, bound) initialization.
pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}

/// Glorot-uniform initialization for a `[fan_in, fan_out]` weight.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, &[fan_in, fan_out], bound)
}
