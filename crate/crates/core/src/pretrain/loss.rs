use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Next-frame alignment loss: mean over `t ∈ 1..T-1`, tokens and channels of
/// `(pred[t-1] - target[t])²`. The last prediction slot has no target and is dropped.
pub fn map_loss(tape: &mut Tape, pred: Var, target: &Tensor) -> Result<Var> {
    let shape = target.shape();
    if shape.len() != 3 || tape.shape(pred) != shape {
        return Err(Error::Shape(format!("pred {:?} vs target {shape:?}", tape.shape(pred))));
    }
    let (frames, tokens) = (shape[0], shape[1]);
    if frames < 2 {
        return Err(Error::Contract(format!("next-frame loss needs T >= 2, got {frames}")));
    }
    let rows = (frames - 1) * tokens;
    let predicted = tape.slice_rows(pred, 0, rows)?;
    let next = tape.constant(target.slice_rows(tokens, frames * tokens));
    let diff = tape.sub(predicted, next)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}
