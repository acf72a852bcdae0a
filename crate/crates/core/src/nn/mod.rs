//! Building-block layers. Every layer is an immutable record of [`ParamId`]s;
//! forward passes read parameter values through a [`Bound`] tape binding.

mod attention;
mod patch;
mod ssm;

pub use attention::AttentionLayer;
pub use patch::{patchify, PatchEmbed};
pub use ssm::{dt_rank, SsmBranch, SsmLayer, SSM_EXPANSION};

use crate::error::Result;
use crate::params::{Bound, Builder, ParamId};
use crate::tensor::{Tape, Tensor, Var};

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in)`, zero bias.
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let std = (in_dim as f64).powf(-0.5);
        Self::with_std(b, name, in_dim, out_dim, bias, std)
    }

    /// Zero weights and bias; the layer starts as the zero map.
    pub fn zeros(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::with_std(b, name, in_dim, out_dim, bias, 0.0)
    }

    pub fn with_std(
        b: &mut Builder<'_>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let mut s = b.scope(name);
        let weight = s.normal("weight", &[in_dim, out_dim], std, true);
        let bias = bias.then(|| s.constant("bias", Tensor::zeros(&[out_dim]), false));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.var(self.weight))?;
        match self.bias {
            Some(bias) => tape.add_bias(y, p.var(bias)),
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        let gamma = s.constant("weight", Tensor::ones(&[dim]), false);
        let beta = s.constant("bias", Tensor::zeros(&[dim]), false);
        Self { gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Two affine maps with a SiLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        let fc1 = Linear::new(&mut s, "fc1", in_dim, hidden, true);
        let fc2 = Linear::new(&mut s, "fc2", hidden, out_dim, true);
        Self { fc1, fc2 }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.silu(h);
        self.fc2.forward(tape, p, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}
