use crate::config::ArMode;
use crate::tensor::{Tensor, MASK_SENTINEL};

/// Additive `[T·N, T·N]` decoder mask realising one [`ArMode`].
#[derive(Debug, Clone, PartialEq)]
pub struct ArMask {
    pub mode: ArMode,
    pub frames: usize,
    pub tokens: usize,
    pub matrix: Tensor,
}

/// Visibility rule for query token `q` and key token `k` (flat frame-major indices).
pub fn ar_allowed(mode: ArMode, tokens: usize, q: usize, k: usize) -> bool {
    let (fq, pq) = (q / tokens, q % tokens);
    let (fk, pk) = (k / tokens, k % tokens);
    match mode {
        ArMode::Frame => fk <= fq,
        ArMode::Token => fk < fq || (fk == fq && pk <= pq),
        ArMode::Video => true,
    }
}

pub fn build_ar_mask(mode: ArMode, frames: usize, tokens: usize) -> ArMask {
    let l = frames * tokens;
    let mut matrix = Tensor::zeros(&[l, l]);
    let data = matrix.data_mut();
    for q in 0..l {
        let frame_end = (q / tokens + 1) * tokens;
        // Keys at or beyond this index are hidden from `q`.
        let first_hidden = match mode {
            ArMode::Frame => frame_end,
            ArMode::Token => q + 1,
            ArMode::Video => l,
        };
        data[q * l + first_hidden..(q + 1) * l].iter_mut().for_each(|v| *v = MASK_SENTINEL);
    }
    ArMask { mode, frames, tokens, matrix }
}

impl ArMask {
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        let l = self.frames * self.tokens;
        self.matrix.data()[q * l + k] == 0.0
    }
}
