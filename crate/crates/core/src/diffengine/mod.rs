//! Minimal reverse-mode differentiation engine over dense `f64` tensors.

mod check;
mod params;
mod second;
mod tape;
mod tensor;

pub use check::{check_param_gradients, rel_err, GradCheck};
pub use params::{Bound, ParamSet};
pub use second::{row_jacobians, second_derivative, DerivMode, SecondDerivative};
pub use tape::{CornerIndex, Op, Tape, Var, NO_ROW};
pub use tensor::{Shape, Tensor};
