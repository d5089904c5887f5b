//! Multimodal latent-bottleneck transformer for reconstructing sparse
//! geospatial fields from heterogeneous observations.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod geo;
pub mod loss;
pub mod modality;
pub mod model;
pub mod param;
pub mod run;
pub mod sampler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
