use std::rc::Rc;

use super::Linear;
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, ParamId};
use crate::tensor::{Tape, Tensor, Var};

/// Cuts `frames: [T, C, H, W]` into non-overlapping `p×p` patches.
///
/// Returns `[T·N, C·p·p]` with tokens frame-major and row-major within a frame;
/// each patch vector is laid out channel, then patch row, then patch column.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("frames must be [T, C, H, W], got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!("{h}x{w} frames not divisible by patch {patch}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = c * patch * patch;
    let src = frames.data();
    let mut out = Vec::with_capacity(t * gh * gw * dim);
    for ti in 0..t {
        for gy in 0..gh {
            for gx in 0..gw {
                for ci in 0..c {
                    for py in 0..patch {
                        let row = ((ti * c + ci) * h + gy * patch + py) * w + gx * patch;
                        out.extend_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(&[t * gh * gw, dim], out)
}

/// Linear patch projection plus learned per-position and per-frame embeddings.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub proj: Linear,
    /// `[N, D]`, shared by every frame.
    pub pos: ParamId,
    /// `[T, D]`, shared by every token of a frame.
    pub temporal: ParamId,
}

impl PatchEmbed {
    pub fn new(
        b: &mut Builder<'_>,
        frames: usize,
        channels: usize,
        image_size: usize,
        patch: usize,
        dim: usize,
    ) -> Result<Self> {
        if patch == 0 || image_size % patch != 0 {
            return Err(Error::Shape(format!("image size {image_size} not divisible by patch {patch}")));
        }
        let n = (image_size / patch).pow(2);
        let proj = Linear::new(b, "proj", channels * patch * patch, dim, true);
        let pos = b.normal("pos", &[n, dim], 0.02, false);
        let temporal = b.normal("temporal", &[frames, dim], 0.02, false);
        Ok(Self { patch, frames, tokens_per_frame: n, proj, pos, temporal })
    }

    /// Embeds `frames: [T, C, H, W]` into `[T·N, D]`. When `replace` is given, tokens
    /// flagged `true` take the mask embedding instead of their projected pixels;
    /// positional terms are added either way.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        frames: &Tensor,
        replace: Option<(&[bool], ParamId)>,
    ) -> Result<Var> {
        let patches = patchify(frames, self.patch)?;
        let len = patches.rows();
        if len != self.frames * self.tokens_per_frame {
            return Err(Error::Shape(format!(
                "expected {} tokens from {} frames, got {len}",
                self.frames * self.tokens_per_frame,
                self.frames
            )));
        }
        let patches = tape.constant(patches);
        let mut tokens = self.proj.forward(tape, p, patches)?;
        if let Some((masked, mask_token)) = replace {
            if masked.len() != len {
                return Err(Error::Shape(format!("mask has {} entries for {len} tokens", masked.len())));
            }
            let dim = tape.shape(tokens)[1];
            let mut keep = Tensor::zeros(&[len, dim]);
            let mut fill = Tensor::zeros(&[len, dim]);
            for (i, &m) in masked.iter().enumerate() {
                let target = if m { &mut fill } else { &mut keep };
                target.data_mut()[i * dim..(i + 1) * dim].iter_mut().for_each(|v| *v = 1.0);
            }
            let kept = tape.mul_const(tokens, Rc::new(keep))?;
            let filler = tape.tile_rows(p.var(mask_token), len)?;
            let filler = tape.mul_const(filler, Rc::new(fill))?;
            tokens = tape.add(kept, filler)?;
        }
        let pos = tape.tile_rows(p.var(self.pos), self.frames)?;
        let temporal = tape.repeat_each_row(p.var(self.temporal), self.tokens_per_frame)?;
        let tokens = tape.add(tokens, pos)?;
        tape.add(tokens, temporal)
    }
}
