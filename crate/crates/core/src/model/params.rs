use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Named flat parameter tensors. Shapes are fixed once a tensor is added.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter '{name}'")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("parameter '{name}' is not finite")));
        }
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, shape, data)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn n_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            data: self.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    /// Element `offset` of the concatenation of all tensors, in insertion order.
    pub fn flat_get(&self, offset: usize) -> f64 {
        let (t, i) = self.locate(offset);
        self.tensors[t].data[i]
    }

    pub fn flat_set(&mut self, offset: usize, value: f64) {
        let (t, i) = self.locate(offset);
        self.tensors[t].data[i] = value;
    }

    fn locate(&self, mut offset: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors.iter().enumerate() {
            if offset < tensor.len() {
                return (t, offset);
            }
            offset -= tensor.len();
        }
        panic!("flat parameter offset out of range");
    }

    pub fn flat_name(&self, mut offset: usize) -> String {
        for tensor in &self.tensors {
            if offset < tensor.len() {
                return format!("{}[{offset}]", tensor.name);
            }
            offset -= tensor.len();
        }
        "<out of range>".into()
    }
}

/// Per-parameter gradient buffers laid out like the owning [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn flat_get(&self, mut offset: usize) -> f64 {
        for g in &self.data {
            if offset < g.len() {
                return g[offset];
            }
            offset -= g.len();
        }
        panic!("flat gradient offset out of range");
    }

    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// In-place `self += other`, tensor by tensor in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.data {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn clear(&mut self) {
        for g in &mut self.data {
            g.fill(0.0);
        }
    }
}
