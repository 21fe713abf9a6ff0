//! Observation feature extractors.
//!
//! The multi-branch temporal fusion extractor runs one recurrent branch over
//! the PV window, a separate one over the DSO price window and a small dense
//! branch over the eight scalars; the three outputs are concatenated and
//! passed through one linear layer. The flatten extractor is the plain dense
//! baseline: the observation vector goes to the heads unchanged.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::{Activation, Dense, DenseCache, DenseLayerSpec};
use super::lstm::{Lstm, LstmCache, RecurrentBranchSpec};
use super::params::ParameterBundle;
use crate::error::{Error, Result};
use crate::market_env::{Observation, N_SCALARS};

/// A batch of observations split by branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch {
    /// `B x L`.
    pub pv: Array2<f64>,
    /// `B x L`.
    pub dso: Array2<f64>,
    /// `B x 8`.
    pub scalars: Array2<f64>,
}

impl ObsBatch {
    pub fn from_observations(obs: &[&Observation]) -> Self {
        let rows: Vec<Vec<f64>> = obs.iter().map(|o| o.flatten()).collect();
        let seq = obs.first().map_or(0, |o| o.seq_len());
        Self::from_flat_rows(rows.iter().map(|r| r.as_slice()), seq)
    }

    /// Builds a batch from flattened observations `[pv, dso, scalars]`.
    pub fn from_flat_rows<'a, I>(rows: I, seq_len: usize) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let b = rows.len();
        Self {
            pv: Array2::from_shape_fn((b, seq_len), |(r, k)| rows[r][k]),
            dso: Array2::from_shape_fn((b, seq_len), |(r, k)| rows[r][seq_len + k]),
            scalars: Array2::from_shape_fn((b, N_SCALARS), |(r, k)| rows[r][2 * seq_len + k]),
        }
    }

    pub fn len(&self) -> usize {
        self.pv.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seq_len(&self) -> usize {
        self.pv.ncols()
    }

    /// `B x (2L + 8)`.
    pub fn flat(&self) -> Array2<f64> {
        concatenate![Axis(1), self.pv, self.dso, self.scalars]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Mbtf,
    Mlp,
}

impl std::str::FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mbtf" => Ok(Self::Mbtf),
            "mlp" => Ok(Self::Mlp),
            _ => Err(Error::InvalidArgument(format!("unknown extractor '{s}'"))),
        }
    }
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mbtf => "mbtf",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub pv_branch: RecurrentBranchSpec,
    pub dso_branch: RecurrentBranchSpec,
    pub scalar_branch: Vec<DenseLayerSpec>,
    pub fused_dim: usize,
    pub fused_activation: Activation,
}

impl ExtractorSpec {
    /// Hidden 16 per recurrent branch, an 8 -> 8 scalar branch, 64 fused features.
    pub fn default_for(seq_len: usize) -> Self {
        Self {
            pv_branch: RecurrentBranchSpec::scalar_series(16, seq_len),
            dso_branch: RecurrentBranchSpec::scalar_series(16, seq_len),
            scalar_branch: vec![DenseLayerSpec {
                in_dim: N_SCALARS,
                out_dim: 8,
                activation: Activation::Relu,
            }],
            fused_dim: 64,
            fused_activation: Activation::Relu,
        }
    }

    pub fn fusion_input_dim(&self) -> usize {
        self.pv_branch.hidden_dim
            + self.dso_branch.hidden_dim
            + self.scalar_branch.last().map_or(N_SCALARS, |l| l.out_dim)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extractor {
    Mbtf {
        spec: ExtractorSpec,
        pv: Lstm,
        dso: Lstm,
        scalar: Vec<Dense>,
        fuse: Dense,
    },
    Flatten {
        seq_len: usize,
    },
}

#[derive(Debug, Clone)]
pub enum ExtractorCache {
    Mbtf {
        pv: LstmCache,
        dso: LstmCache,
        scalar: Vec<DenseCache>,
        fuse: DenseCache,
    },
    Flatten(Array2<f64>),
}

impl ExtractorCache {
    pub fn features(&self) -> &Array2<f64> {
        match self {
            Self::Mbtf { fuse, .. } => fuse.output(),
            Self::Flatten(x) => x,
        }
    }
}

impl Extractor {
    pub fn mbtf<R: Rng>(spec: ExtractorSpec, params: &mut ParameterBundle, rng: &mut R) -> Self {
        let pv = Lstm::new(spec.pv_branch, "extractor.pv", params, rng);
        let dso = Lstm::new(spec.dso_branch, "extractor.dso", params, rng);
        let scalar = spec
            .scalar_branch
            .iter()
            .enumerate()
            .map(|(i, l)| Dense::new(*l, &format!("extractor.scalar{i}"), params, rng))
            .collect();
        let fuse = Dense::new(
            DenseLayerSpec {
                in_dim: spec.fusion_input_dim(),
                out_dim: spec.fused_dim,
                activation: spec.fused_activation,
            },
            "extractor.fuse",
            params,
            rng,
        );
        Self::Mbtf {
            spec,
            pv,
            dso,
            scalar,
            fuse,
        }
    }

    pub fn flatten(seq_len: usize) -> Self {
        Self::Flatten { seq_len }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Self::Mbtf { spec, .. } => spec.fused_dim,
            Self::Flatten { seq_len } => 2 * seq_len + N_SCALARS,
        }
    }

    pub fn kind(&self) -> ExtractorKind {
        match self {
            Self::Mbtf { .. } => ExtractorKind::Mbtf,
            Self::Flatten { .. } => ExtractorKind::Mlp,
        }
    }

    pub fn forward(&self, p: &ParameterBundle, obs: &ObsBatch) -> Result<ExtractorCache> {
        match self {
            Self::Flatten { seq_len } => {
                if obs.seq_len() != *seq_len {
                    return Err(Error::Shape(format!(
                        "flatten extractor expects sequence length {seq_len}, got {}",
                        obs.seq_len()
                    )));
                }
                Ok(ExtractorCache::Flatten(obs.flat()))
            }
            Self::Mbtf {
                pv,
                dso,
                scalar,
                fuse,
                ..
            } => {
                let pv_c = pv.forward(p, obs.pv.view())?;
                let dso_c = dso.forward(p, obs.dso.view())?;
                let mut scalar_c: Vec<DenseCache> = Vec::with_capacity(scalar.len());
                for layer in scalar {
                    let x = scalar_c.last().map_or(obs.scalars.view(), |c| c.output().view());
                    let c = layer.forward(p, x)?;
                    scalar_c.push(c);
                }
                let s_out = scalar_c.last().map_or(obs.scalars.view(), |c| c.output().view());
                let cat = concatenate![Axis(1), *pv_c.last_hidden(), *dso_c.last_hidden(), s_out];
                let fuse_c = fuse.forward(p, cat.view())?;
                Ok(ExtractorCache::Mbtf {
                    pv: pv_c,
                    dso: dso_c,
                    scalar: scalar_c,
                    fuse: fuse_c,
                })
            }
        }
    }

    /// Accumulates parameter gradients given the gradient at the features.
    pub fn backward(
        &self,
        values: &[Array2<f64>],
        grads: &mut [Array2<f64>],
        cache: &ExtractorCache,
        d_features: Array2<f64>,
    ) {
        let (
            Self::Mbtf {
                pv,
                dso,
                scalar,
                fuse,
                ..
            },
            ExtractorCache::Mbtf {
                pv: pv_c,
                dso: dso_c,
                scalar: scalar_c,
                fuse: fuse_c,
            },
        ) = (self, cache)
        else {
            return;
        };
        let d_cat = fuse.backward(values, Some(grads), fuse_c, d_features);
        let hp = pv.spec.hidden_dim;
        let hd = dso.spec.hidden_dim;
        pv.backward(values, grads, pv_c, &d_cat.slice(s![.., ..hp]).to_owned());
        dso.backward(values, grads, dso_c, &d_cat.slice(s![.., hp..hp + hd]).to_owned());
        let mut d = d_cat.slice(s![.., hp + hd..]).to_owned();
        for (layer, c) in scalar.iter().zip(scalar_c).rev() {
            d = layer.backward(values, Some(grads), c, d);
        }
    }
}
