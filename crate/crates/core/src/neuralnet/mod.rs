//! Dense tensors, a layer-level autodiff tape, the small convolutional
//! classifier, losses, SGD, and the checkpoint format.

mod arch;
mod checkpoint;
mod optim;
mod params;
mod tape;
mod tensor;

pub use arch::{Architecture, HeadActivation, LayerSpec, ParamShape};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, transfer_params, Checkpoint, Provenance, FORMAT_VERSION, MAGIC,
};
pub use optim::{sgd_step, Sgd};
pub use params::{NamedTensor, ParameterVector};
pub use tape::{Tape, Var, PROB_EPS};
pub use tensor::Tensor;

use crate::{Result, Scalar};

/// Class-weighted binary cross-entropy with negative weight 1 and positive
/// weight `r`.
pub fn weighted_bce_loss<T: Scalar>(probabilities: &Tensor<T>, labels: &[u8], r: f64) -> Result<f64> {
    class_weighted_bce(probabilities, labels, 1.0, r)
}

/// Binary cross-entropy with explicit per-class weights.
pub fn class_weighted_bce<T: Scalar>(
    probabilities: &Tensor<T>,
    labels: &[u8],
    w_neg: f64,
    w_pos: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.input(probabilities.clone());
    let loss = tape.weighted_bce(p, labels, w_neg, w_pos)?;
    Ok(tape.loss_value(loss).unwrap_or(f64::NAN))
}
