//! Dense matrices, a reverse-mode tape, and the Adam optimizer.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck, REL_FLOOR};
pub use params::{glorot_uniform, Bound, ParamSet};
pub use tape::{softmax_rows_value, Gradients, Index, Tape, Var};
pub use tensor::Tensor;
