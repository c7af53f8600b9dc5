//! Dense matrices and reproducible random streams.

mod rng;
mod tensor;

pub use rng::{stream_id_for, RngStream};
pub use tensor::{ElementwiseOp, Reduced, Reduction, Tensor2D};
