//! Control Transformer over interleaved observation/action tokens, with
//! self-supervised control-centric pretraining and downstream policy
//! learning on a built-in pixel control suite.

pub mod data;
pub mod env;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod training;

pub use error::{CtError, Result};
