//! Dense tensors with a reverse-mode tape, Adam, and the Huber loss.

mod optim;
mod tape;
mod tensor;

pub use optim::{glorot, AdamConfig, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{sigmoid, Tensor};

/// Mean Huber loss evaluated without a tape.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> crate::Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant(pred.clone())?;
    let t = tape.constant(target.clone())?;
    let l = tape.huber(p, t, delta)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests;
