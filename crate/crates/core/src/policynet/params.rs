//! Named parameter tensors and the update rules that act on them.

use rand::Rng as _;

use super::tape::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zero,
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    Uniform(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init, rng: &mut Rng) -> usize {
        let data = match init {
            Init::Zero => vec![0.0; rows * cols],
            Init::Xavier => {
                let lim = (6.0 / (rows + cols) as f64).sqrt();
                (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect()
            }
            Init::Uniform(s) => (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect(),
        };
        self.names.push(name.to_string());
        self.tensors.push(Tensor { rows, cols, data });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn shapes(&self) -> Vec<[usize; 2]> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    /// Overwrites every parameter with uniform noise in `±scale`.
    pub fn randomize(&mut self, scale: f64, rng: &mut Rng) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    /// Copies values from `(name, tensor)` pairs. Every parameter must be
    /// present with its exact shape.
    pub fn assign(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
        }
        Ok(())
    }

    /// Copies the entries whose name exists here, leaving other parameters
    /// as they are. Returns how many were copied.
    pub fn assign_shared(&mut self, entries: &[(String, Tensor)]) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in entries {
            let Some(i) = self.index_of(name) else { continue };
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: source {:?}, model {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Momentum { beta: 0.9 }
    }
}

/// Optimizer state shaped like a parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Optimizer {
            kind,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn apply(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) {
        self.step += 1;
        for (i, g) in grads.iter().enumerate() {
            let p = &mut params.tensors[i].data;
            match self.kind {
                OptimizerKind::Momentum { beta } => {
                    for ((w, m), gv) in p.iter_mut().zip(&mut self.m[i]).zip(&g.data) {
                        *m = beta * *m + gv;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.step as i32);
                    let c2 = 1.0 - beta2.powi(self.step as i32);
                    for (((w, m), v), gv) in p.iter_mut().zip(&mut self.m[i]).zip(&mut self.v[i]).zip(&g.data) {
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
