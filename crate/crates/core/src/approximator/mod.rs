//! Differentiable function approximators: dense and recurrent layers, the
//! feature extractors, actor/critic networks, the optimizer and checkpoints.

pub mod adam;
pub mod archive;
pub mod dense;
pub mod extractor;
pub mod gradcheck;
pub mod lstm;
pub mod network;
pub mod params;

pub use adam::{optimizer_step, AdamConfig};
pub use archive::Archive;
pub use dense::{Activation, Dense, DenseLayerSpec};
pub use extractor::{Extractor, ExtractorKind, ExtractorSpec, ObsBatch};
pub use lstm::{Lstm, RecurrentBranchSpec};
pub use network::{Network, NetworkCache, NetworkSpec, Role, ACTION_DIM};
pub use params::{soft_update, ParameterBundle};
