//! All trainable parts of a run in one parameter store.

use crate::backbone::Backbone;
use crate::config::RunConfig;
use crate::error::Result;
use crate::finetune::ClassifierHead;
use crate::params::{Builder, ParamStore};
use crate::pretrain::Decoder;
use crate::tensor::Rng;

/// Encoder, pretraining decoder and an optional classifier head.
///
/// Parameter names are prefixed `encoder.`, `decoder.` and `head.`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub decoder: Decoder,
    pub head: Option<ClassifierHead>,
}

impl Model {
    /// Fresh initialisation drawn from `config.model.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(config.model.seed).split(1);
        let backbone = Backbone::new(&mut Builder::new(&mut store, &mut rng, "encoder"), &config.model)?;
        let mut rng = Rng::new(config.model.seed).split(2);
        let decoder = Decoder::new(&mut Builder::new(&mut store, &mut rng, "decoder"), &config.model)?;
        Ok(Self { config: config.clone(), store, backbone, decoder, head: None })
    }

    /// Adds a `classes`-way head, drawing its weights from `seed`.
    pub fn attach_head(&mut self, classes: usize, seed: u64) {
        let mut rng = Rng::new(seed).split(3);
        let mut b = Builder::new(&mut self.store, &mut rng, "head");
        self.head = Some(ClassifierHead::new(&mut b, self.config.model.embed_dim, classes));
    }
}
