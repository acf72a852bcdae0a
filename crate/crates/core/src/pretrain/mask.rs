use crate::config::MaskPolicy;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Per-frame sets of masked token indices plus the flat `[T·N]` boolean view.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    ratio: f64,
    tokens: usize,
    per_frame: Vec<Vec<usize>>,
    flat: Vec<bool>,
}

/// Masked tokens per frame: `round(ratio · n)` with halves rounded up.
pub fn mask_count(ratio: f64, n: usize) -> usize {
    // The epsilon absorbs representation error such as 0.15 * 10 = 1.4999999999999998.
    ((ratio * n as f64 + 0.5 + 1e-9).floor() as usize).min(n)
}

impl MaskPlan {
    /// Builds a plan from explicit per-frame index sets (sorted and validated).
    pub fn from_sets(ratio: f64, tokens: usize, mut per_frame: Vec<Vec<usize>>) -> Result<Self> {
        let mut flat = vec![false; per_frame.len() * tokens];
        for (t, set) in per_frame.iter_mut().enumerate() {
            set.sort_unstable();
            if set.windows(2).any(|w| w[0] == w[1]) || set.iter().any(|&i| i >= tokens) {
                return Err(Error::Plan(format!("frame {t}: invalid index set {set:?}")));
            }
            for &i in set.iter() {
                flat[t * tokens + i] = true;
            }
        }
        Ok(Self { ratio, tokens, per_frame, flat })
    }

    /// Nothing masked.
    pub fn empty(frames: usize, tokens: usize) -> Self {
        Self::from_sets(0.0, tokens, vec![Vec::new(); frames]).expect("empty sets are valid")
    }

    /// Frames after `visible` (1-based count of leading visible frames) fully masked.
    pub fn future_frames(frames: usize, tokens: usize, visible: usize) -> Self {
        let sets = (0..frames)
            .map(|t| if t < visible { Vec::new() } else { (0..tokens).collect() })
            .collect();
        Self::from_sets(f64::NAN, tokens, sets).expect("ranges are valid")
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn frames(&self) -> usize {
        self.per_frame.len()
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens
    }

    pub fn frame(&self, t: usize) -> &[usize] {
        &self.per_frame[t]
    }

    pub fn flat(&self) -> &[bool] {
        &self.flat
    }
}

/// Chooses `round(ratio · N)` tokens per frame to mask.
///
/// `Saliency` masks the lowest-scoring tokens (ties: lower index first), keeping
/// the salient content visible; `Random` draws a uniform subset per frame.
pub fn plan_mask(scores: &Tensor, ratio: f64, policy: MaskPolicy, rng: &mut Rng) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Plan(format!("mask ratio {ratio} outside [0, 1]")));
    }
    if scores.ndim() != 2 {
        return Err(Error::Shape(format!("scores must be [T, N], got {:?}", scores.shape())));
    }
    let (frames, n) = (scores.shape()[0], scores.shape()[1]);
    let k = mask_count(ratio, n);
    let sets = (0..frames)
        .map(|t| {
            let mut order: Vec<usize> = (0..n).collect();
            match policy {
                MaskPolicy::Saliency => {
                    let row = scores.row(t);
                    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
                }
                MaskPolicy::Random => rng.shuffle(&mut order),
            }
            order.truncate(k);
            order
        })
        .collect();
    MaskPlan::from_sets(ratio, n, sets)
}
