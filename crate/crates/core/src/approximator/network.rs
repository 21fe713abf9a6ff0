use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{Activation, Dense, DenseCache, DenseLayerSpec};
use super::extractor::{Extractor, ExtractorCache, ExtractorKind, ExtractorSpec, ObsBatch};
use super::params::ParameterBundle;
use crate::error::{Error, Result};
use crate::market_env::{ActionRaw, Observation};

pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Features -> hidden layers -> tanh action.
    Actor,
    /// `[features, action]` -> hidden layers -> scalar value.
    Critic,
}

/// Architecture of one actor or critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub extractor: ExtractorKind,
    pub seq_len: usize,
    pub mbtf: ExtractorSpec,
    /// Hidden widths of the head after the extractor.
    pub head_hidden: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(extractor: ExtractorKind, seq_len: usize) -> Self {
        Self {
            extractor,
            seq_len,
            mbtf: ExtractorSpec::default_for(seq_len),
            head_hidden: vec![64, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub role: Role,
    pub extractor: Extractor,
    pub head: Vec<Dense>,
    pub params: ParameterBundle,
}

#[derive(Debug, Clone)]
pub struct NetworkCache {
    extractor: ExtractorCache,
    head: Vec<DenseCache>,
}

impl NetworkCache {
    pub fn output(&self) -> &Array2<f64> {
        self.head.last().expect("head has an output layer").output()
    }

    pub fn features(&self) -> &Array2<f64> {
        self.extractor.features()
    }
}

impl Network {
    /// Builds a network with freshly initialized parameters.
    pub fn new<R: Rng>(spec: NetworkSpec, role: Role, rng: &mut R) -> Self {
        let mut params = ParameterBundle::new();
        let extractor = match spec.extractor {
            ExtractorKind::Mbtf => Extractor::mbtf(spec.mbtf.clone(), &mut params, rng),
            ExtractorKind::Mlp => Extractor::flatten(spec.seq_len),
        };
        let mut in_dim = extractor.out_dim()
            + match role {
                Role::Actor => 0,
                Role::Critic => ACTION_DIM,
            };
        let mut head = Vec::new();
        for (i, &w) in spec.head_hidden.iter().enumerate() {
            let l = DenseLayerSpec {
                in_dim,
                out_dim: w,
                activation: Activation::Relu,
            };
            head.push(Dense::new(l, &format!("head{i}"), &mut params, rng));
            in_dim = w;
        }
        let out = match role {
            Role::Actor => DenseLayerSpec {
                in_dim,
                out_dim: ACTION_DIM,
                activation: Activation::Tanh,
            },
            Role::Critic => DenseLayerSpec {
                in_dim,
                out_dim: 1,
                activation: Activation::Identity,
            },
        };
        head.push(Dense::new(out, "head_out", &mut params, rng));
        Self {
            spec,
            role,
            extractor,
            head,
            params,
        }
    }

    /// Batched forward pass. Critics need `actions` (`B x 2`).
    pub fn forward(&self, obs: &ObsBatch, actions: Option<&Array2<f64>>) -> Result<NetworkCache> {
        let ext = self.extractor.forward(&self.params, obs)?;
        let input = match (self.role, actions) {
            (Role::Actor, _) => ext.features().clone(),
            (Role::Critic, Some(a)) => {
                if a.dim() != (obs.len(), ACTION_DIM) {
                    return Err(Error::Shape(format!("actions of shape {:?}", a.dim())));
                }
                concatenate![Axis(1), *ext.features(), *a]
            }
            (Role::Critic, None) => {
                return Err(Error::Shape("critic forward needs actions".into()))
            }
        };
        let mut head: Vec<DenseCache> = Vec::with_capacity(self.head.len());
        for layer in &self.head {
            let x = head.last().map_or(input.view(), |c| c.output().view());
            let c = layer.forward(&self.params, x)?;
            head.push(c);
        }
        Ok(NetworkCache {
            extractor: ext,
            head,
        })
    }

    /// Backpropagates `d_out` through the head only, without touching
    /// parameter gradients; returns the gradient at the head input.
    fn head_input_grad(&self, cache: &NetworkCache, d_out: Array2<f64>) -> Array2<f64> {
        let mut d = d_out;
        for (layer, c) in self.head.iter().zip(&cache.head).rev() {
            d = layer.backward(&self.params.values, None, c, d);
        }
        d
    }

    /// Accumulates the gradient of `sum(d_out ⊙ output)` into `params.grads`.
    pub fn backward(&mut self, cache: &NetworkCache, d_out: Array2<f64>) {
        let ParameterBundle { values, grads, .. } = &mut self.params;
        let mut d = d_out;
        for (layer, c) in self.head.iter().zip(&cache.head).rev() {
            d = layer.backward(values, Some(grads), c, d);
        }
        let n_feat = self.extractor.out_dim();
        let d_feat = d.slice(s![.., ..n_feat]).to_owned();
        self.extractor.backward(values, grads, &cache.extractor, d_feat);
    }

    /// Gradient of `sum(d_out ⊙ Q)` with respect to the critic's action input.
    pub fn action_grad(&self, cache: &NetworkCache, d_out: Array2<f64>) -> Result<Array2<f64>> {
        if self.role != Role::Critic {
            return Err(Error::Shape("action gradient needs a critic".into()));
        }
        let d = self.head_input_grad(cache, d_out);
        let n_feat = self.extractor.out_dim();
        Ok(d.slice(s![.., n_feat..]).to_owned())
    }

    /// Deterministic action for one observation.
    pub fn act(&self, obs: &Observation) -> Result<ActionRaw> {
        let batch = ObsBatch::from_observations(&[obs]);
        let out = self.forward(&batch, None)?;
        let y = out.output();
        Ok(ActionRaw::new(y[[0, 0]], y[[0, 1]]))
    }

    /// Value of one observation/action pair.
    pub fn value(&self, obs: &Observation, action: ActionRaw) -> Result<f64> {
        let batch = ObsBatch::from_observations(&[obs]);
        let a = Array2::from_shape_vec((1, ACTION_DIM), action.as_array().to_vec())
            .expect("1 x 2 action");
        Ok(self.forward(&batch, Some(&a))?.output()[[0, 0]])
    }
}
