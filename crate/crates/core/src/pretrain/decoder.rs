use super::ArMask;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionLayer, LayerNorm, Mlp};
use crate::params::{Bound, Builder};
use crate::tensor::{Tape, Var};

/// Autoregressive decoder: attention blocks over the frame tokens under an
/// [`ArMask`], then the encoder cls vector is concatenated back onto every token
/// and an MLP maps to teacher features.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    pub teacher_dim: usize,
    pub blocks: Vec<AttentionLayer>,
    pub norm: LayerNorm,
    pub head: Mlp,
}

impl Decoder {
    pub fn new(b: &mut Builder<'_>, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let blocks = (0..config.decoder_depth)
            .map(|i| AttentionLayer::new(&mut b.scope(&format!("blocks.{i}")), d, config.heads))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(b, "norm", d);
        let head = Mlp::new(b, "head", 2 * d, 4 * d, config.teacher_dim);
        Ok(Self {
            frames: config.frames,
            tokens: config.tokens_per_frame(),
            dim: d,
            teacher_dim: config.teacher_dim,
            blocks,
            norm,
            head,
        })
    }

    /// `encoder_out: [T·N + 1, D]` to predictions `[T, N, teacher_dim]`.
    ///
    /// Slot `t` (0-based) is the prediction of frame `t + 1`'s teacher features.
    pub fn decode_predict(&self, tape: &mut Tape, p: &Bound, encoder_out: Var, ar: &ArMask) -> Result<Var> {
        let len = self.frames * self.tokens;
        if tape.shape(encoder_out) != [len + 1, self.dim] {
            return Err(Error::Shape(format!(
                "decoder expects [{}, {}], got {:?}",
                len + 1,
                self.dim,
                tape.shape(encoder_out)
            )));
        }
        if ar.frames * ar.tokens != len {
            return Err(Error::Shape(format!("ar mask is {}x{}, decoder expects {len}", ar.frames, ar.tokens)));
        }
        let cls = tape.slice_rows(encoder_out, 0, 1)?;
        let mut x = tape.slice_rows(encoder_out, 1, len + 1)?;
        for block in &self.blocks {
            x = block.forward(tape, p, x, Some(&ar.matrix))?;
        }
        let x = self.norm.forward(tape, p, x)?;
        let cls = tape.repeat_each_row(cls, len)?;
        let fused = tape.concat_cols(&[x, cls])?;
        let out = self.head.forward(tape, p, fused)?;
        tape.reshape(out, &[self.frames, self.tokens, self.teacher_dim])
    }
}
