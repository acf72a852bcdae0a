//! Analytic forward FLOP and activation counts per encoder layer.
//!
//! FLOPs count a multiply-accumulate as 2. Counts are exact integers.

use crate::backbone::{layer_layout, LayerKind};
use crate::config::ModelConfig;
use crate::nn::SSM_EXPANSION;

/// `8·L·D²` projections, `4·L²·D` scores and weighted values, `16·L·D²` MLP.
pub fn flops_attention(l: u64, d: u64, _heads: u64) -> u64 {
    8 * l * d * d + 4 * l * l * d + 16 * l * d * d
}

/// In/out projections, then per scan direction: width-4 conv, Δ/B/C
/// application and the scan itself. Inner width is `2·D`.
pub fn flops_ssm(l: u64, d: u64, s: u64, bidirectional: bool) -> u64 {
    let di = SSM_EXPANSION as u64 * d;
    let projections = 2 * l * d * (2 * di) + 2 * l * di * d;
    let per_direction = 8 * l * di + 2 * l * di * s * 3 + 6 * l * di * s;
    projections + if bidirectional { 2 } else { 1 } * per_direction
}

/// Scalars kept for the backward pass: per-head `L×L` probabilities plus
/// eight `L×D` streams and two `L×4D` MLP streams.
pub fn activations_attention(l: u64, d: u64, heads: u64) -> u64 {
    heads * l * l + 8 * l * d + 2 * l * 4 * d
}

/// Norm output, in-projection, gate, and per direction the conv, activation,
/// Δ streams, B/C rows and all scan states.
pub fn activations_ssm(l: u64, d: u64, s: u64, bidirectional: bool) -> u64 {
    let di = SSM_EXPANSION as u64 * d;
    let shared = l * d + 2 * l * di + l * di;
    let per_direction = 3 * l * di + 2 * l * s + l * di * s;
    shared + if bidirectional { 2 } else { 1 } * per_direction
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub seq_len: u64,
    pub layer_flops: Vec<u64>,
    pub total_flops: u64,
    pub peak_activations: u64,
}

/// Per-layer costs of `config`'s encoder at every sequence length in `lens`.
pub fn cost_model(config: &ModelConfig, lens: &[u64]) -> Vec<CostReport> {
    let (d, s, h) = (config.embed_dim as u64, config.state_size as u64, config.heads as u64);
    let layout = layer_layout(config.depth, config.mamba_per_attn);
    lens.iter()
        .map(|&l| {
            let (flops, acts): (Vec<u64>, Vec<u64>) = layout
                .iter()
                .map(|k| match k {
                    LayerKind::Attention => (flops_attention(l, d, h), activations_attention(l, d, h)),
                    LayerKind::Ssm => {
                        (flops_ssm(l, d, s, config.bidirectional), activations_ssm(l, d, s, config.bidirectional))
                    }
                })
                .unzip();
            CostReport {
                seq_len: l,
                total_flops: flops.iter().sum(),
                peak_activations: acts.into_iter().max().unwrap_or(0),
                layer_flops: flops,
            }
        })
        .collect()
}

/// Smallest `L ≥ 1` from which an SSM layer is cheaper than an attention layer
/// for every longer sequence. Any hybrid then beats pure attention of equal
/// depth from the same `L` on, since the two differ only in the swapped layers.
///
/// Per token, attention costs `24·D² + 4·L·D` and SSM a constant `c`, so the
/// answer is the first integer with `4·L·D > c − 24·D²`.
pub fn crossover_len(d: u64, s: u64, bidirectional: bool) -> u64 {
    let ssm_per_token = flops_ssm(1, d, s, bidirectional);
    let attn_fixed = 24 * d * d;
    if ssm_per_token < attn_fixed + 4 * d {
        return 1;
    }
    (ssm_per_token - attn_fixed) / (4 * d) + 1
}
