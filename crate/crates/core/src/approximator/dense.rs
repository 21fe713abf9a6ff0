use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::ParameterBundle;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Self::Tanh => z.mapv_inplace(f64::tanh),
            Self::Relu => z.mapv_inplace(|x| x.max(0.0)),
            Self::Identity => {}
        }
    }

    /// Multiplies `dy` in place by the activation derivative, given the output `y`.
    fn backprop(self, dy: &mut Array2<f64>, y: &Array2<f64>) {
        match self {
            Self::Tanh => dy.zip_mut_with(y, |d, &y| *d *= 1.0 - y * y),
            Self::Relu => dy.zip_mut_with(y, |d, &y| {
                if y <= 0.0 {
                    *d = 0.0
                }
            }),
            Self::Identity => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// `activation(x W + b)` over a batch of row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub spec: DenseLayerSpec,
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
pub struct DenseCache {
    input: Array2<f64>,
    output: Array2<f64>,
}

impl DenseCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl Dense {
    /// Registers `W` and `b`, uniform in `±1/sqrt(in_dim)`.
    pub fn new<R: Rng>(
        spec: DenseLayerSpec,
        prefix: &str,
        params: &mut ParameterBundle,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (spec.in_dim as f64).sqrt();
        let w = params.add_uniform(format!("{prefix}.w"), spec.in_dim, spec.out_dim, bound, rng);
        let b = params.add_uniform(format!("{prefix}.b"), 1, spec.out_dim, bound, rng);
        Self { spec, w, b }
    }

    pub fn forward(&self, p: &ParameterBundle, x: ArrayView2<f64>) -> Result<DenseCache> {
        if x.ncols() != self.spec.in_dim {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.spec.in_dim,
                x.ncols()
            )));
        }
        let mut z = x.dot(&p.values[self.w]);
        z += &p.values[self.b];
        self.spec.activation.apply(&mut z);
        Ok(DenseCache {
            input: x.to_owned(),
            output: z,
        })
    }

    /// Accumulates parameter gradients (when `grads` is given) and returns the
    /// gradient with respect to the layer input.
    pub fn backward(
        &self,
        values: &[Array2<f64>],
        grads: Option<&mut [Array2<f64>]>,
        cache: &DenseCache,
        mut dy: Array2<f64>,
    ) -> Array2<f64> {
        self.spec.activation.backprop(&mut dy, &cache.output);
        if let Some(g) = grads {
            ndarray::linalg::general_mat_mul(1.0, &cache.input.t(), &dy, 1.0, &mut g[self.w]);
            g[self.b] += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&values[self.w].t())
    }
}
