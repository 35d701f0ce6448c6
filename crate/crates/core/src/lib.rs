//! Document-level translation with query-guided capsule networks.
//!
//! History sentences are routed into a few feature capsules under the
//! guidance of the sentence being translated; an extra attention sub-layer
//! in every encoder layer reads those capsules.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod params;
pub mod qcn;
pub mod regularizer;
pub mod routing;
pub mod training;
pub mod transformer;

pub use checkpoint::Checkpoint;
pub use config::{Config, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use model::Model;
pub use numerics::{Graph, Tensor, Var};
