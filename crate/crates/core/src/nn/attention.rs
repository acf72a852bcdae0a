use super::{LayerNorm, Linear, Mlp};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder};
use crate::tensor::{Tape, Tensor, Var};

/// Pre-norm transformer block: `x + MHA(LN(x))` then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct AttentionLayer {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    /// Zero-initialised so a fresh block starts close to identity.
    pub o: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl AttentionLayer {
    pub fn new(b: &mut Builder<'_>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Shape(format!("dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            dim,
            heads,
            norm1: LayerNorm::new(b, "norm1", dim),
            q: Linear::new(b, "q", dim, dim, true),
            // A key bias only shifts each score row by a constant, which softmax ignores.
            k: Linear::new(b, "k", dim, dim, false),
            v: Linear::new(b, "v", dim, dim, true),
            o: Linear::zeros(b, "o", dim, dim, true),
            norm2: LayerNorm::new(b, "norm2", dim),
            mlp: Mlp::new(b, "mlp", dim, 4 * dim, dim),
        })
    }

    /// `x: [L, D]`; `mask: [L, L]` of `0`/[`MASK_SENTINEL`](crate::tensor::MASK_SENTINEL), or full visibility.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!("attention expects [L, {}], got {shape:?}", self.dim)));
        }
        let h = self.norm1.forward(tape, p, x)?;
        let q = self.q.forward(tape, p, h)?;
        let k = self.k.forward(tape, p, h)?;
        let v = self.v.forward(tape, p, h)?;
        let q = tape.split_heads(q, self.heads)?;
        let k = tape.split_heads(k, self.heads)?;
        let v = tape.split_heads(v, self.heads)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / ((self.dim / self.heads) as f64).sqrt());
        let weights = tape.masked_softmax(scores, mask)?;
        let ctx = tape.matmul(weights, v)?;
        let ctx = tape.merge_heads(ctx)?;
        let attn = self.o.forward(tape, p, ctx)?;
        let x = tape.add(x, attn)?;
        let h = self.norm2.forward(tape, p, x)?;
        let m = self.mlp.forward(tape, p, h)?;
        tape.add(x, m)
    }

    /// Learnable scalar count for a block at width `dim`.
    pub fn param_count(dim: usize) -> usize {
        2 * 2 * dim + 4 * dim * dim + 3 * dim + (dim * 4 * dim + 4 * dim) + (4 * dim * dim + dim)
    }
}
