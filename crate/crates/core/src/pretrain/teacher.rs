use crate::config::{ModelConfig, TeacherKind};
use crate::error::Result;
use crate::nn::patchify;
use crate::tensor::{Rng, Tensor};

/// Frozen per-frame feature extractor producing the alignment targets.
///
/// Weights are plain tensors and never enter a tape.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub kind: TeacherKind,
    pub patch: usize,
    pub frames: usize,
    pub tokens: usize,
    pub dim: usize,
    /// `[C·p·p, hidden]` for the random teacher, `[C·p·p, dim]` for the linear one.
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[hidden, dim]`; unused by the linear teacher.
    pub w2: Option<Tensor>,
}

/// Entry `(j, k)` of the fixed linear projection: `((j + k) mod 3) - 1`.
pub fn oracle_linear_entry(j: usize, k: usize) -> f64 {
    ((j + k) % 3) as f64 - 1.0
}

impl Teacher {
    pub fn new(config: &ModelConfig) -> Self {
        let input = config.patch_dim();
        let base = Self {
            kind: config.teacher,
            patch: config.patch,
            frames: config.frames,
            tokens: config.tokens_per_frame(),
            dim: config.teacher_dim,
            w1: Tensor::zeros(&[1]),
            b1: Tensor::zeros(&[1]),
            w2: None,
        };
        match config.teacher {
            TeacherKind::RandomFrozen => {
                let mut rng = Rng::new(config.seed).split(0x7ea);
                let h = config.teacher_hidden;
                Self {
                    w1: Tensor::normal(&[input, h], 0.0, (input as f64).powf(-0.5), &mut rng),
                    b1: Tensor::zeros(&[h]),
                    w2: Some(Tensor::normal(&[h, config.teacher_dim], 0.0, (h as f64).powf(-0.5), &mut rng)),
                    ..base
                }
            }
            TeacherKind::OracleLinear => {
                let d = config.teacher_dim;
                let data = (0..input).flat_map(|j| (0..d).map(move |k| oracle_linear_entry(j, k))).collect();
                Self { w1: Tensor::new(&[input, d], data).expect("projection shape"), ..base }
            }
        }
    }

    /// Features of one frame's patches `[N, C·p·p]`, giving `[N, dim]`.
    pub fn project(&self, patches: &Tensor) -> Result<Tensor> {
        let h = patches.matmul(&self.w1)?;
        match &self.w2 {
            None => Ok(h),
            Some(w2) => {
                let mut h = h;
                let c = h.cols();
                for row in h.data_mut().chunks_mut(c) {
                    row.iter_mut().zip(self.b1.data()).for_each(|(v, b)| *v = (*v + b).tanh());
                }
                h.matmul(w2)
            }
        }
    }

    /// `clip: [T, C, H, W]` to features `[T, N, dim]`, computed frame by frame.
    pub fn features(&self, clip: &Tensor) -> Result<Tensor> {
        let patches = patchify(clip, self.patch)?;
        let per_frame = patches.rows() / clip.shape()[0];
        let mut out = Vec::with_capacity(patches.rows() * self.dim);
        for t in 0..clip.shape()[0] {
            let frame = patches.slice_rows(t * per_frame, (t + 1) * per_frame);
            out.extend_from_slice(self.project(&frame)?.data());
        }
        Tensor::new(&[clip.shape()[0], per_frame, self.dim], out)
    }
}

/// Token saliency `[T, N]`: the L2 norm of each teacher feature vector.
pub fn saliency(features: &Tensor) -> Tensor {
    let s = features.shape();
    let (t, n) = (s[0], s[1]);
    let data = (0..t * n).map(|r| features.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    Tensor::new(&[t, n], data).expect("saliency shape")
}

impl Teacher {
    /// Convenience: [`saliency`] of this teacher's features for `clip`.
    pub fn saliency(&self, clip: &Tensor) -> Result<Tensor> {
        Ok(saliency(&self.features(clip)?))
    }
}
