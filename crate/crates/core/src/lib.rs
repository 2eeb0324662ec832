//! Input-output neural jump ODEs for online filtering and parameter
//! estimation of irregularly observed processes.

// `!(a > b)` is used on purpose to reject NaN along with the ordering.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod paths;
pub mod signature;

pub use error::{Error, Result};
pub use losses::LossVariant;
pub use model::{Architecture, ForwardTrace, NjodeParams, TrainConfig};
pub use paths::{Dims, MaskMode, ObservationPattern, PathSample, PathStats, TimeGrid};
pub use signature::TruncatedSignature;
