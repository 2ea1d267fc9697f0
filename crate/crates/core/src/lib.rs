//! Factor mining with rolling feature extraction, Spearman feature dropout, Barra
//! label neutralization and a Bi-LSTM + Transformer residual network.

pub mod barra;
pub mod error;
pub mod evaluation;
pub mod feature_ops;
mod linalg;
pub mod market_data;
pub mod nn;
pub mod spearman_dropout;
pub mod training;

pub use error::{Error, Result};
