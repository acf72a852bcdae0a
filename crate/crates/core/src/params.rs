//! Named parameter storage shared by every model part.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{GradCheckReport, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Whether AdamW applies weight decay to this tensor.
    pub decay: bool,
}

/// Ordered table of named tensors. Insertion order is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, value, trainable: true, decay });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Marks every parameter whose name starts with `prefix` as frozen or trainable.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for e in self.entries.iter_mut().filter(|e| e.name.starts_with(prefix)) {
            e.trainable = trainable;
        }
    }

    /// Replaces the value of `name`, keeping its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let slot = &mut self.entries[i].value;
        if slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Records every parameter as a tape leaf; frozen ones do not require grad.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|e| tape.leaf(e.value.clone(), e.trainable)).collect();
        Bound { vars }
    }

    /// Records every parameter as a constant leaf, for inference.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let vars = self.entries.iter().map(|e| tape.leaf(e.value.clone(), false)).collect();
        Bound { vars }
    }

    /// Collects leaf gradients after a backward pass, aligned with the store.
    pub fn gradients(&self, tape: &Tape, bound: &Bound) -> Vec<Option<Tensor>> {
        bound.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

/// Compares tape gradients of scalar `f` with central differences at `samples`
/// coordinates drawn uniformly from all trainable scalars of `store`.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn param_grad_check<F>(store: &ParamStore, f: F, samples: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let loss = f(&mut tape, &p)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract("param_grad_check needs a scalar function".into()));
    }
    tape.backward(loss)?;
    let grads = store.gradients(&tape, &p);
    drop(tape);

    let mut coords: Vec<(usize, usize)> = store
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable)
        .flat_map(|(i, e)| (0..e.value.numel()).map(move |j| (i, j)))
        .collect();
    Rng::new(seed).shuffle(&mut coords);
    coords.truncate(samples);

    let eval = |i: usize, j: usize, delta: f64| -> Result<f64> {
        let mut probe = store.clone();
        probe.entries[i].value.data_mut()[j] += delta;
        let mut t = Tape::new();
        let p = probe.bind_frozen(&mut t);
        let out = f(&mut t, &p)?;
        Ok(t.value(out).data()[0])
    };
    let mut report = GradCheckReport::new();
    for &(i, j) in &coords {
        let numeric = (eval(i, j, h)? - eval(i, j, -h)?) / (2.0 * h);
        let a = grads[i].as_ref().map_or(0.0, |g| g.data()[j]);
        report.record(a, numeric);
    }
    Ok(report)
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Registers parameters under a dotted name prefix while drawing initial values.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng, prefix: &str) -> Self {
        Self { store, rng, prefix: prefix.to_string() }
    }

    pub fn scope(&mut self, name: &str) -> Builder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64, decay: bool) -> ParamId {
        let value = Tensor::normal(shape, 0.0, std, self.rng);
        self.store.add(self.full_name(name), value, decay)
    }

    pub fn constant(&mut self, name: &str, value: Tensor, decay: bool) -> ParamId {
        self.store.add(self.full_name(name), value, decay)
    }

    pub fn rng(&mut self) -> &mut Rng {
        self.rng
    }
}
