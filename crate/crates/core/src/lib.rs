//! Learning and querying bipartite noisy-or networks from anchored data.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod inference;
pub mod math;
pub mod model;
pub mod model_file;
pub mod moments;
pub mod record;
pub mod synth;
pub mod text;
pub mod variational;

pub use error::{Error, ErrorCategory, Result};
pub use model::{ModelParams, ModelParts, NoiseModel, NoiseRates};
pub use record::{Dataset, DatasetMeta, PatientRecord};
