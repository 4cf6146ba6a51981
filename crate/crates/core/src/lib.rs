#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod diffgraph;
pub mod encoding;
pub mod filterfit;
pub mod error;
pub mod evalmetrics;
pub mod models;
pub mod pgsim;
pub mod randdist;
pub mod specfun;

pub use error::{Error, ErrorClass, Result};
pub use randdist::{GammaParams, RngState};
