//! The hybrid video encoder: patch tokens, a cls token, and an interleaved
//! stack of SSM and attention layers.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{AttentionLayer, LayerNorm, PatchEmbed, SsmLayer};
use crate::params::{Bound, Builder, ParamId};
use crate::pretrain::MaskPlan;
use crate::tensor::{Tape, Tensor, Var, MASK_SENTINEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Ssm,
    Attention,
}

/// Layer `i` (zero-based) is attention iff `ratio > 0` and `(i + 1) % (ratio + 1) == 0`.
///
/// `ratio == 0` yields pure attention; `ratio >= depth` yields pure SSM, and any
/// trailing remainder of a non-divisible depth is SSM.
pub fn layer_layout(depth: usize, mamba_per_attn: usize) -> Vec<LayerKind> {
    (0..depth)
        .map(|i| {
            if mamba_per_attn == 0 || (i + 1) % (mamba_per_attn + 1) == 0 {
                LayerKind::Attention
            } else {
                LayerKind::Ssm
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub enum Layer {
    Ssm(SsmLayer),
    Attention(AttentionLayer),
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: ModelConfig,
    pub embed: PatchEmbed,
    pub cls: ParamId,
    pub mask_token: ParamId,
    pub layers: Vec<Layer>,
    pub norm: LayerNorm,
}

impl Backbone {
    pub fn new(b: &mut Builder<'_>, config: &ModelConfig) -> Result<Self> {
        let d = config.embed_dim;
        let embed = {
            let mut s = b.scope("patch_embed");
            PatchEmbed::new(&mut s, config.frames, config.channels, config.image_size, config.patch, d)?
        };
        let cls = b.normal("cls", &[1, d], 0.02, false);
        let mask_token = b.normal("mask_token", &[1, d], 0.02, false);
        let mut layers = Vec::with_capacity(config.depth);
        for (i, kind) in layer_layout(config.depth, config.mamba_per_attn).into_iter().enumerate() {
            let mut s = b.scope(&format!("layers.{i}"));
            layers.push(match kind {
                LayerKind::Ssm => Layer::Ssm(SsmLayer::new(&mut s, d, config.state_size, config.bidirectional)),
                LayerKind::Attention => Layer::Attention(AttentionLayer::new(&mut s, d, config.heads)?),
            });
        }
        let norm = LayerNorm::new(b, "norm", d);
        Ok(Self { config: config.clone(), embed, cls, mask_token, layers, norm })
    }

    pub fn layout(&self) -> Vec<LayerKind> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Ssm(_) => LayerKind::Ssm,
                Layer::Attention(_) => LayerKind::Attention,
            })
            .collect()
    }

    fn check_clip(&self, clip: &Tensor) -> Result<()> {
        let c = &self.config;
        let want = [c.frames, c.channels, c.image_size, c.image_size];
        if clip.shape() != want {
            return Err(Error::Shape(format!("clip shape {:?}, expected {want:?}", clip.shape())));
        }
        Ok(())
    }

    /// Encodes `clip: [T, C, H, W]` into `[T·N + 1, D]` with the cls token in row 0.
    ///
    /// Tokens flagged by `plan` are replaced by the learned mask embedding, and
    /// attention layers may not attend to them. The cls token is never masked.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, clip: &Tensor, plan: Option<&MaskPlan>) -> Result<Var> {
        self.check_clip(clip)?;
        let n = self.config.tokens_per_frame();
        let masked = match plan {
            Some(plan) => {
                if plan.frames() != self.config.frames || plan.tokens_per_frame() != n {
                    return Err(Error::Plan(format!(
                        "plan covers {} frames x {} tokens, model expects {} x {n}",
                        plan.frames(),
                        plan.tokens_per_frame(),
                        self.config.frames
                    )));
                }
                plan.flat().iter().any(|&m| m).then(|| plan.flat())
            }
            None => None,
        };
        let tokens = self.embed.forward(tape, p, clip, masked.map(|m| (m, self.mask_token)))?;
        let cls = p.var(self.cls);
        let mut x = tape.concat_rows(&[cls, tokens])?;
        let attn_mask = masked.map(key_padding_mask);
        for layer in &self.layers {
            x = match layer {
                Layer::Ssm(l) => l.forward(tape, p, x)?,
                Layer::Attention(l) => l.forward(tape, p, x, attn_mask.as_ref())?,
            };
        }
        self.norm.forward(tape, p, x)
    }

    /// Encodes with frames `t+1..T` (1-based `t`) fully masked and returns the first
    /// `t·N + 1` rows, so the result cannot depend on future pixels.
    pub fn causal_probe(&self, tape: &mut Tape, p: &Bound, clip: &Tensor, t: usize) -> Result<Var> {
        let frames = self.config.frames;
        if t < 1 || t >= frames {
            return Err(Error::Range(format!("probe frame {t} outside 1..{frames}")));
        }
        let plan = MaskPlan::future_frames(frames, self.config.tokens_per_frame(), t);
        let out = self.encode(tape, p, clip, Some(&plan))?;
        tape.slice_rows(out, 0, t * self.config.tokens_per_frame() + 1)
    }
}

/// `[L+1, L+1]` additive mask forbidding every query from attending to masked tokens.
fn key_padding_mask(masked: &[bool]) -> Tensor {
    let l = masked.len() + 1;
    let mut m = Tensor::zeros(&[l, l]);
    for q in 0..l {
        for (k, _) in masked.iter().enumerate().filter(|(_, &x)| x) {
            m.data_mut()[q * l + k + 1] = MASK_SENTINEL;
        }
    }
    m
}

/// Learnable scalar counts of the encoder, split so the matmul weights can be
/// compared separately from embeddings and norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub matmul_weights: usize,
    pub other: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.matmul_weights + self.other
    }
}

/// Exact encoder parameter count derived from the config alone.
pub fn count_params(config: &ModelConfig) -> ParamCount {
    let d = config.embed_dim;
    let n = config.tokens_per_frame();
    let inner = crate::nn::SSM_EXPANSION * d;
    let rank = crate::nn::dt_rank(d);
    let dirs = if config.bidirectional { 2 } else { 1 };
    let mut weights = config.patch_dim() * d;
    let mut other = d + n * d + config.frames * d + 2 * d + 2 * d;
    for kind in layer_layout(config.depth, config.mamba_per_attn) {
        match kind {
            LayerKind::Attention => {
                let w = 4 * d * d + 2 * 4 * d * d;
                weights += w;
                other += AttentionLayer::param_count(d) - w;
            }
            LayerKind::Ssm => {
                let w = d * 2 * inner + inner * d + dirs * (inner * rank + rank * inner + 2 * inner * config.state_size);
                weights += w;
                other += SsmLayer::param_count(d, config.state_size, config.bidirectional) - w;
            }
        }
    }
    ParamCount { matmul_weights: weights, other }
}
