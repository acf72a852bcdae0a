use std::io::Write;

use super::{build_ar_mask, map_loss, plan_mask, saliency, ArMask, MaskPlan, Teacher};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::{AdamW, Schedule};
use crate::params::Bound;
use crate::tensor::{Rng, Tape, Tensor, Var};

/// Pretraining loss of one clip given its teacher targets and mask plan.
pub fn clip_loss(
    tape: &mut Tape,
    p: &Bound,
    model: &Model,
    clip: &Tensor,
    targets: &Tensor,
    plan: &MaskPlan,
    ar: &ArMask,
) -> Result<Var> {
    let encoded = model.backbone.encode(tape, p, clip, Some(plan))?;
    let pred = model.decoder.decode_predict(tape, p, encoded, ar)?;
    map_loss(tape, pred, targets)
}

/// Optimiser state and randomness of a pretraining run.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub teacher: Teacher,
    pub ar: ArMask,
    pub optimizer: AdamW,
    pub schedule: Schedule,
    rng: Rng,
    step: usize,
}

impl Pretrainer {
    pub fn new(model: &Model, total_steps: usize) -> Self {
        let m = &model.config.model;
        let t = &model.config.train;
        Self {
            teacher: Teacher::new(m),
            ar: build_ar_mask(m.ar_mode, m.frames, m.tokens_per_frame()),
            optimizer: AdamW::new(t.weight_decay),
            schedule: Schedule::new(t.lr, t.warmup_steps, total_steps),
            rng: Rng::new(m.seed).split(4),
            step: 0,
        }
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// One optimiser step on the mean loss over `batch`; returns the pre-update loss.
    ///
    /// Each clip runs on its own tape and gradients are summed in batch order,
    /// so the result does not depend on how clips are scheduled.
    pub fn step(&mut self, model: &mut Model, batch: &[&Tensor]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("empty pretraining batch".into()));
        }
        let cfg = &model.config.model;
        let mut total: Option<Vec<Option<Tensor>>> = None;
        let mut loss_sum = 0.0;
        for clip in batch {
            let targets = self.teacher.features(clip)?;
            let plan = plan_mask(&saliency(&targets), cfg.mask_ratio, cfg.mask_policy, &mut self.rng)?;
            let mut tape = Tape::new();
            let p = model.store.bind(&mut tape);
            let loss = clip_loss(&mut tape, &p, model, clip, &targets, &plan, &self.ar)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite pretraining loss at step {}", self.step + 1)));
            }
            loss_sum += value;
            tape.backward(loss)?;
            let grads = model.store.gradients(&tape, &p);
            total = Some(match total {
                None => grads,
                Some(acc) => accumulate(acc, grads),
            });
        }
        let scale = 1.0 / batch.len() as f64;
        let grads: Vec<Option<Tensor>> =
            total.unwrap_or_default().into_iter().map(|g| g.map(|g| g.map(|x| x * scale))).collect();
        let lr = self.schedule.lr(self.step);
        self.optimizer.step(&mut model.store, &grads, lr);
        self.step += 1;
        Ok(loss_sum * scale)
    }
}

fn accumulate(acc: Vec<Option<Tensor>>, add: Vec<Option<Tensor>>) -> Vec<Option<Tensor>> {
    acc.into_iter()
        .zip(add)
        .map(|(a, b)| match (a, b) {
            (Some(mut a), Some(b)) => {
                a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                Some(a)
            }
            (a, b) => a.or(b),
        })
        .collect()
}

/// Runs `steps` pretraining steps over `clips`, drawing batches from a
/// reshuffled pass over the corpus. Each step's loss is appended to `csv`
/// (header `step,loss`) when given, and the whole curve is returned.
pub fn run_pretrain(model: &mut Model, clips: &[Tensor], steps: usize, mut csv: Option<&mut dyn Write>) -> Result<Vec<f64>> {
    if let Some(w) = csv.as_deref_mut() {
        writeln!(w, "step,loss")?;
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    if clips.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    let batch_size = model.config.train.batch_size.min(clips.len());
    let mut trainer = Pretrainer::new(model, steps);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(steps);
    for step in 1..=steps {
        if order.len() < batch_size {
            let mut pass: Vec<usize> = (0..clips.len()).collect();
            trainer.rng().shuffle(&mut pass);
            order.extend(pass);
        }
        let batch: Vec<&Tensor> = order.drain(..batch_size).map(|i| &clips[i]).collect();
        let loss = trainer.step(model, &batch)?;
        if let Some(w) = csv.as_deref_mut() {
            writeln!(w, "{step},{loss:?}")?;
        }
        curve.push(loss);
    }
    Ok(curve)
}
