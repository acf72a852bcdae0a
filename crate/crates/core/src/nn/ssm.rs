use super::{LayerNorm, Linear};
use crate::error::{Error, Result};
use crate::params::{Bound, Builder, ParamId};
use crate::tensor::{Tape, Tensor, Var};

/// Inner width multiplier of the SSM block.
pub const SSM_EXPANSION: usize = 2;
const CONV_WIDTH: usize = 4;

/// Rank of the low-rank Δ projection for model width `dim`.
pub fn dt_rank(dim: usize) -> usize {
    dim.div_ceil(16)
}

/// One scan direction: causal conv, input-dependent Δ/B/C and the recurrence.
#[derive(Debug, Clone)]
pub struct SsmBranch {
    pub conv_weight: ParamId,
    pub conv_bias: ParamId,
    pub dt_down: Linear,
    pub dt_up: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `A = -exp(a_log)`, so A is strictly negative.
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl SsmBranch {
    fn new(b: &mut Builder<'_>, name: &str, inner: usize, state: usize, rank: usize) -> Self {
        let mut s = b.scope(name);
        let conv_weight = s.normal("conv.weight", &[inner, CONV_WIDTH], 0.5, true);
        let conv_bias = s.constant("conv.bias", Tensor::zeros(&[inner]), false);
        let dt_down = Linear::new(&mut s, "dt_down", inner, rank, false);
        let b_proj = Linear::new(&mut s, "b_proj", inner, state, false);
        let c_proj = Linear::new(&mut s, "c_proj", inner, state, false);
        let a_log = {
            let data = (0..inner).flat_map(|_| (1..=state).map(|n| (n as f64).ln())).collect();
            s.constant("a_log", Tensor::new(&[inner, state], data).expect("a_log shape"), false)
        };
        let d_skip = s.constant("d_skip", Tensor::ones(&[inner]), false);
        // Δ starts log-uniform in [1e-3, 1e-1]; the bias stores its softplus preimage.
        let dt_bias: Vec<f64> = (0..inner)
            .map(|_| {
                let dt = (s.rng().uniform((1e-3f64).ln(), (1e-1f64).ln())).exp();
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let dt_up = Linear {
            weight: s.normal("dt_up.weight", &[rank, inner], (rank as f64).powf(-0.5), true),
            bias: Some(s.constant("dt_up.bias", Tensor::new(&[inner], dt_bias).expect("dt bias shape"), false)),
            in_dim: rank,
            out_dim: inner,
        };
        Self { conv_weight, conv_bias, dt_down, dt_up, b_proj, c_proj, a_log, d_skip }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, stream: Var) -> Result<Var> {
        let conv = tape.causal_conv(stream, p.var(self.conv_weight))?;
        let conv = tape.add_bias(conv, p.var(self.conv_bias))?;
        let u = tape.silu(conv);
        let dt = self.dt_down.forward(tape, p, u)?;
        let dt = self.dt_up.forward(tape, p, dt)?;
        let delta = tape.softplus(dt);
        let bmat = self.b_proj.forward(tape, p, u)?;
        let cmat = self.c_proj.forward(tape, p, u)?;
        let a = tape.exp(p.var(self.a_log));
        let a = tape.neg(a);
        tape.selective_scan(u, delta, bmat, cmat, a, p.var(self.d_skip))
    }

    fn param_count(inner: usize, state: usize, rank: usize) -> usize {
        inner * CONV_WIDTH + inner + inner * rank + (rank * inner + inner) + 2 * inner * state + inner * state + inner
    }
}

/// Pre-norm gated selective-SSM block with an optional reversed-direction branch.
#[derive(Debug, Clone)]
pub struct SsmLayer {
    pub dim: usize,
    pub inner: usize,
    pub state: usize,
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub forward_branch: SsmBranch,
    pub backward_branch: Option<SsmBranch>,
    /// Zero-initialised so a fresh block starts as the identity.
    pub out_proj: Linear,
}

impl SsmLayer {
    pub fn new(b: &mut Builder<'_>, dim: usize, state: usize, bidirectional: bool) -> Self {
        let inner = SSM_EXPANSION * dim;
        let rank = dt_rank(dim);
        let norm = LayerNorm::new(b, "norm", dim);
        let in_proj = Linear::new(b, "in_proj", dim, 2 * inner, true);
        let forward_branch = SsmBranch::new(b, "fwd", inner, state, rank);
        let backward_branch = bidirectional.then(|| SsmBranch::new(b, "bwd", inner, state, rank));
        let out_proj = Linear::zeros(b, "out_proj", inner, dim, true);
        Self { dim, inner, state, norm, in_proj, forward_branch, backward_branch, out_proj }
    }

    pub fn bidirectional(&self) -> bool {
        self.backward_branch.is_some()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.dim {
            return Err(Error::Shape(format!("ssm expects [L, {}], got {shape:?}", self.dim)));
        }
        let h = self.norm.forward(tape, p, x)?;
        let xz = self.in_proj.forward(tape, p, h)?;
        let stream = tape.slice_cols(xz, 0, self.inner)?;
        let gate = tape.slice_cols(xz, self.inner, 2 * self.inner)?;
        let mut y = self.forward_branch.forward(tape, p, stream)?;
        if let Some(bwd) = &self.backward_branch {
            let rev = tape.reverse_rows(stream);
            let yb = bwd.forward(tape, p, rev)?;
            let yb = tape.reverse_rows(yb);
            y = tape.add(y, yb)?;
        }
        let gate = tape.silu(gate);
        let y = tape.mul(y, gate)?;
        let out = self.out_proj.forward(tape, p, y)?;
        tape.add(x, out)
    }

    pub fn param_count(dim: usize, state: usize, bidirectional: bool) -> usize {
        let inner = SSM_EXPANSION * dim;
        let branch = SsmBranch::param_count(inner, state, dt_rank(dim));
        2 * dim + (dim * 2 * inner + 2 * inner) + branch * if bidirectional { 2 } else { 1 } + (inner * dim + dim)
    }
}
