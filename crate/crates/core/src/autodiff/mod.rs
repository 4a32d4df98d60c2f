//! Dense tensors with reverse-mode differentiation and Adam.

mod adam;
pub mod gradcheck;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::{AdamState, DEFAULT_LR};
pub use params::{ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS, LOG_STD_MAX, LOG_STD_MIN};
pub use tensor::Tensor;

pub(crate) use tape::check_tau;

/// Elementwise expectile loss on plain values, `|τ − 1(x<0)|·x²`.
pub fn expectile_loss(x: f64, tau: f64) -> crate::Result<f64> {
    tape::check_tau(tau)?;
    let w = if x < 0.0 { 1.0 - tau } else { tau };
    Ok(w * x * x)
}
