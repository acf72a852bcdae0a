//! Supervised classification on top of the encoder: head, training loop and
//! top-k evaluation.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::{Readout, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Linear;
use crate::optim::{AdamW, Schedule};
use crate::params::{Bound, Builder};
use crate::tensor::{Rng, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new(b: &mut Builder<'_>, dim: usize, classes: usize) -> Self {
        Self { linear: Linear::with_std(b, "linear", dim, classes, true, 0.02), classes }
    }
}

/// Logits `[1, K]` for `clip`, read out from the cls row or the token mean.
pub fn classify(tape: &mut Tape, p: &Bound, model: &Model, clip: &Tensor, readout: Readout) -> Result<Var> {
    let head = model.head.as_ref().ok_or_else(|| Error::Contract("model has no classifier head".into()))?;
    let encoded = model.backbone.encode(tape, p, clip, None)?;
    let feature = match readout {
        Readout::Cls => tape.slice_rows(encoded, 0, 1)?,
        Readout::Mean => {
            let len = tape.shape(encoded)[0] - 1;
            let tokens = tape.slice_rows(encoded, 1, len + 1)?;
            let pool = tape.constant(Tensor::full(&[1, len], 1.0 / len as f64));
            tape.matmul(pool, tokens)?
        }
    };
    head.linear.forward(tape, p, feature)
}

/// Whether `label` is among the `k` largest logits; ties rank the lower class index first.
/// `k` is clamped to the number of classes.
pub fn in_top_k(logits: &[f64], label: usize, k: usize) -> bool {
    let mine = logits[label];
    let ahead = logits.iter().enumerate().filter(|&(j, &x)| x > mine || (x == mine && j < label)).count();
    ahead < k.min(logits.len())
}

/// Fraction of rows whose label is in the top `k`.
pub fn evaluate_topk(logits: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits.iter().zip(labels).filter(|(l, &y)| in_top_k(l, y, k)).count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub epoch: usize,
    pub top1: f64,
    pub top5: f64,
    /// Top-1 hits per true class.
    pub class_correct: Vec<usize>,
    pub class_total: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epoch={}", self.epoch);
        let _ = writeln!(s, "top1={:?}", self.top1);
        let _ = writeln!(s, "top5={:?}", self.top5);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        for (c, (hit, total)) in self.class_correct.iter().zip(&self.class_total).enumerate() {
            let _ = writeln!(s, "class.{c}.correct={hit}");
            let _ = writeln!(s, "class.{c}.total={total}");
        }
        s
    }

    pub fn csv_row(&self) -> String {
        format!("{},{:?},{:?}", self.epoch, self.top1, self.top5)
    }
}

pub const EVAL_CSV_HEADER: &str = "epoch,top1,top5";

/// Logits for every clip of `split`, one row per clip.
pub fn split_logits(model: &Model, split: &[(Tensor, usize)]) -> Result<Vec<Vec<f64>>> {
    let readout = model.config.train.readout;
    split
        .iter()
        .map(|(clip, _)| {
            let mut tape = Tape::new();
            let p = model.store.bind_frozen(&mut tape);
            let logits = classify(&mut tape, &p, model, clip, readout)?;
            Ok(tape.value(logits).data().to_vec())
        })
        .collect()
}

pub fn evaluate(model: &Model, split: &[(Tensor, usize)], epoch: usize, seed: u64) -> Result<EvalReport> {
    let classes = model.head.as_ref().map_or(0, |h| h.classes);
    let logits = split_logits(model, split)?;
    let labels: Vec<usize> = split.iter().map(|(_, y)| *y).collect();
    let mut class_correct = vec![0; classes];
    let mut class_total = vec![0; classes];
    for (l, &y) in logits.iter().zip(&labels) {
        if y >= classes {
            return Err(Error::Data(format!("label {y} outside {classes} classes")));
        }
        class_total[y] += 1;
        class_correct[y] += usize::from(in_top_k(l, y, 1));
    }
    Ok(EvalReport {
        epoch,
        top1: evaluate_topk(&logits, &labels, 1),
        top5: evaluate_topk(&logits, &labels, 5),
        class_correct,
        class_total,
        seed,
        config_hash: model.config.hash(),
    })
}

/// Where the encoder weights of a fine-tuning run come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Scratch,
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: Model,
    /// Highest validation top-1 across epochs; the earliest epoch wins ties.
    pub best: EvalReport,
    /// Evaluation before training (epoch 0) and after every epoch.
    pub history: Vec<EvalReport>,
}

/// Cross-entropy fine-tuning of a fresh head (and, unless frozen, the encoder).
///
/// Scratch runs initialise the encoder from `seed`; checkpoint runs load it and
/// only draw the head from `seed`.
pub fn finetune_run(
    config: &RunConfig,
    init: &Init,
    train: &[(Tensor, usize)],
    val: &[(Tensor, usize)],
    classes: usize,
    epochs: usize,
    seed: u64,
) -> Result<FinetuneResult> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!("empty split (train {}, val {})", train.len(), val.len())));
    }
    let mut model = match init {
        Init::Scratch => {
            let mut cfg = config.clone();
            cfg.model.seed = seed;
            Model::new(&cfg)?
        }
        Init::Checkpoint(path) => {
            let mut model = Model::new(config)?;
            crate::checkpoint::load_into(&mut model, path)?;
            model
        }
    };
    model.attach_head(classes, seed);
    model.store.set_trainable("decoder.", false);
    if config.train.freeze_backbone {
        model.store.set_trainable("encoder.", false);
    }

    let t = &config.train;
    let batch = t.finetune_batch.min(train.len());
    let per_epoch = train.len().div_ceil(batch);
    let schedule = Schedule::new(t.finetune_lr, t.finetune_warmup_epochs * per_epoch, epochs * per_epoch);
    let mut optimizer = AdamW::new(t.weight_decay);
    let mut rng = Rng::new(seed).split(5);

    let mut history = vec![evaluate(&model, val, 0, seed)?];
    let mut step = 0;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let grads = batch_gradients(&model, train, chunk)?;
            optimizer.step(&mut model.store, &grads, schedule.lr(step));
            step += 1;
        }
        history.push(evaluate(&model, val, epoch, seed)?);
    }
    let best = history
        .iter()
        .fold(None::<&EvalReport>, |best, r| match best {
            Some(b) if b.top1 >= r.top1 => Some(b),
            _ => Some(r),
        })
        .expect("history is never empty")
        .clone();
    Ok(FinetuneResult { model, best, history })
}

/// Mean cross-entropy gradient over `indices`, reduced in index order.
fn batch_gradients(model: &Model, train: &[(Tensor, usize)], indices: &[usize]) -> Result<Vec<Option<Tensor>>> {
    let scale = 1.0 / indices.len() as f64;
    let mut total: Vec<Option<Tensor>> = vec![None; model.store.len()];
    for &i in indices {
        let (clip, label) = &train[i];
        let mut tape = Tape::new();
        let p = model.store.bind(&mut tape);
        let logits = classify(&mut tape, &p, model, clip, model.config.train.readout)?;
        let loss = tape.cross_entropy(logits, &[*label])?;
        let value = tape.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::Numeric("non-finite fine-tuning loss".into()));
        }
        tape.backward(loss)?;
        for (slot, g) in total.iter_mut().zip(model.store.gradients(&tape, &p)) {
            let Some(g) = g else { continue };
            match slot {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * scale),
                None => *slot = Some(g.map(|x| x * scale)),
            }
        }
    }
    Ok(total)
}
