use super::{Rng, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// `(analytic, numeric)` at the coordinate with the largest relative error.
    pub worst: (f64, f64),
}

impl GradCheckReport {
    pub(crate) fn new() -> Self {
        Self { max_rel_err: 0.0, coords_checked: 0, worst: (0.0, 0.0) }
    }

    pub(crate) fn record(&mut self, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let err = (analytic - numeric).abs() / denom;
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = (analytic, numeric);
        }
        self.coords_checked += 1;
    }
}

/// Compares the tape gradient of scalar `f(x)` with central differences at
/// `samples` coordinates drawn from `seed` (all coordinates if `samples >= numel`).
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, samples: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    tape.backward(loss)?;
    let analytic = tape.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(probe);
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0])
    };

    let n = x.numel();
    let coords: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        Rng::new(seed).shuffle(&mut all);
        all.truncate(samples);
        all
    };
    let mut report = GradCheckReport::new();
    for &i in &coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        report.record(analytic.data()[i], numeric);
    }
    Ok(report)
}
