use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const HEADER: &str = "numcore-params v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph variables of a [`ParamStore`] bound into one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds variables created by the caller, in parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Model(format!("parameter {name:?} registered twice")));
        }
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|t| g.param(t.clone())).collect() }
    }

    /// Gradients of the bound parameters after `g.backward`.
    /// Binds every parameter as a constant: no gradients are tracked.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.values.iter().map(|t| g.constant(t.clone())).collect() }
    }

    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|&v| g.grad(v).cloned()).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER}\n{}\n", self.len());
        for (name, t) in self.names.iter().zip(&self.values) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "{name} {} {}", t.ndim(), dims.join(" "));
            let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: String| Error::Model(format!("malformed parameter file: {what}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(format!("expected header {HEADER:?}")));
        }
        let count: usize = lines
            .next()
            .and_then(|l| l.trim().parse().ok())
            .ok_or_else(|| bad("missing parameter count".into()))?;
        let mut store = Self::new();
        for i in 0..count {
            let head = lines.next().ok_or_else(|| bad(format!("missing entry {i}")))?;
            let mut parts = head.split_whitespace();
            let name = parts.next().ok_or_else(|| bad(format!("entry {i} has no name")))?;
            let nums: Vec<usize> = parts
                .map(|p| p.parse().map_err(|_| bad(format!("bad dimension {p:?} for {name}"))))
                .collect::<Result<_>>()?;
            if nums.is_empty() || nums[0] + 1 != nums.len() {
                return Err(bad(format!("bad shape header for {name}")));
            }
            let body = lines.next().ok_or_else(|| bad(format!("missing values for {name}")))?;
            let data: Vec<f64> = body
                .split_whitespace()
                .map(|v| v.parse().map_err(|_| bad(format!("bad value {v:?} for {name}"))))
                .collect::<Result<_>>()?;
            store.add(name, Tensor::new(&nums[1..], data)?)?;
        }
        Ok(store)
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Model("parameter names differ from checkpoint".into()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::Model(format!(
                    "checkpoint shape {:?} does not match {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
            *a = b.clone();
        }
        Ok(())
    }
}

/// Xavier normal initialisation for a `[fan_in, fan_out]` weight:
/// `N(0, 2 / (fan_in + fan_out))`.
pub fn xavier_normal(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    normal(&[fan_in, fan_out], std, rng)
}

pub fn normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if self.m.is_empty() {
            self.m = store.values.iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.values[i].data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
