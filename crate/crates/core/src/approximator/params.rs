use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};

/// Named parameter arrays of one network with congruent gradient and
/// adaptive-moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBundle {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
    pub grads: Vec<Array2<f64>>,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    /// Number of optimizer steps taken.
    pub step: u64,
}

impl Default for ParameterBundle {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterBundle {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Registers an array and returns its slot.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        let zeros = Array2::zeros(value.raw_dim());
        self.names.push(name.into());
        self.grads.push(zeros.clone());
        self.m.push(zeros.clone());
        self.v.push(zeros);
        self.values.push(value);
        self.values.len() - 1
    }

    /// Registers a `rows x cols` array drawn uniformly from `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        bound: f64,
        rng: &mut R,
    ) -> usize {
        let a = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..=bound));
        self.add(name, a)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|a| a.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn fill_values(&mut self, x: f64) {
        for a in &mut self.values {
            a.fill(x);
        }
    }

    /// Flat view position `k` -> (array, flat offset).
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, a) in self.values.iter().enumerate() {
            if k < a.len() {
                return Some((i, k));
            }
            k -= a.len();
        }
        None
    }

    pub fn scalar(&self, k: usize) -> f64 {
        let (i, o) = self.locate(k).expect("parameter index in range");
        self.values[i].as_slice().expect("standard layout")[o]
    }

    pub fn set_scalar(&mut self, k: usize, x: f64) {
        let (i, o) = self.locate(k).expect("parameter index in range");
        self.values[i].as_slice_mut().expect("standard layout")[o] = x;
    }

    pub fn grad_scalar(&self, k: usize) -> f64 {
        let (i, o) = self.locate(k).expect("parameter index in range");
        self.grads[i].as_slice().expect("standard layout")[o]
    }

    /// Copies values from a bundle with the same names and shapes.
    pub fn copy_values_from(&mut self, other: &ParameterBundle) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.assign(b);
        }
        Ok(())
    }

    pub fn check_congruent(&self, other: &ParameterBundle) -> Result<()> {
        if self.names != other.names
            || self
                .values
                .iter()
                .zip(&other.values)
                .any(|(a, b)| a.dim() != b.dim())
        {
            return Err(Error::Shape("parameter bundles differ in layout".into()));
        }
        Ok(())
    }

    /// Euclidean distance between the value vectors of two congruent bundles.
    pub fn distance(&self, other: &ParameterBundle) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).mapv(|x| x * x).sum())
            .sum::<f64>()
            .sqrt()
    }
}

/// Polyak averaging: `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut ParameterBundle, online: &ParameterBundle, tau: f64) {
    for (t, o) in target.values.iter_mut().zip(&online.values) {
        t.zip_mut_with(o, |t, &o| *t = tau * o + (1.0 - tau) * *t);
    }
}
