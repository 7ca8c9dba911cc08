//! Minimal CNN engine: planar convolutions, a flat parameter vector, and a
//! hand-written reverse pass that is generic over [`Scalar`] so it can be
//! replayed over dual numbers for exact mixed second derivatives.

mod arch;
mod model;
mod ops;
mod scalar;

pub use arch::{Activation, Architecture, BlockShape, ConvBlock, ConvParams, ParamLayout};
pub use model::{
    cross_entropy_seed, log_prob_sum_seed, log_softmax, softmax, Backward, Classifier, GradRequest, ParamScope, Tape,
    PROB_FLOOR,
};
pub use ops::ConvGeom;
pub use scalar::{Dual, Scalar};
