//! Dense network substrate: matrices, parameter sets, the residual velocity
//! MLP, Adam, and the [`Objective`] trait every trainable loss implements.

mod matrix;
mod mlp;
mod optim;
mod params;

pub use matrix::Matrix;
pub(crate) use matrix::{gemm_a_wt, gemm_g_w, gemm_gt_a};
pub(crate) use mlp::{add_bias, sigmoid, silu_backward, silu_forward, sum_rows_into};
pub use mlp::{Gradients, MlpShape, Trace, VelocityModel};
pub use optim::{AdamConfig, OptimizerState};
pub use params::{Activation, Architecture, ParamFile, ParamSet, Tensor, PARAM_FILE_VERSION};

use crate::error::{Error, Result};

/// A scalar loss over one parameter set, with its analytic gradient.
pub trait Objective {
    fn value(&self, params: &ParamSet) -> Result<f64>;

    fn value_and_grad(&self, params: &ParamSet) -> Result<(f64, ParamSet)>;
}

/// ∂loss/∂params, rejecting non-finite losses or gradients and naming the
/// offending tensor.
pub fn grad<O: Objective + ?Sized>(loss: &O, params: &ParamSet) -> Result<ParamSet> {
    value_and_grad(loss, params).map(|(_, g)| g)
}

pub fn value_and_grad<O: Objective + ?Sized>(loss: &O, params: &ParamSet) -> Result<(f64, ParamSet)> {
    let (value, g) = loss.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::non_finite("loss value"));
    }
    if let Some(name) = g.first_non_finite() {
        return Err(Error::non_finite(format!("gradient of tensor {name}")));
    }
    Ok((value, g))
}
