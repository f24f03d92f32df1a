//! Named flat parameter storage shared by the encoder, decoder, optimizer
//! and checkpoint code.

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named tensors. Order is fixed by the architecture,
/// so two stores built from one config line up index by index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { tensors: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.tensors.push(Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.tensors[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.tensors[id.0].data
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.fill(T::zero());
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    /// Convert every element to another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|x| U::from_f64_lossy(x.to_f64().expect("real")))
                        .collect(),
                })
                .collect(),
        }
    }

    /// Scalar at a global flat position (tensors concatenated in order).
    pub fn flat_get(&self, mut index: usize) -> T {
        for t in &self.tensors {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    pub fn flat_set(&mut self, mut index: usize, value: T) {
        for t in &mut self.tensors {
            if index < t.data.len() {
                t.data[index] = value;
                return;
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// Name of the tensor owning a global flat position.
    pub fn flat_owner(&self, mut index: usize) -> &str {
        for t in &self.tensors {
            if index < t.data.len() {
                return &t.name;
            }
            index -= t.data.len();
        }
        panic!("flat parameter index out of range");
    }
}
