//! Run configuration: `key=value` text files with `#` comments, overridable
//! key by key (the CLI maps its flags onto [`RunConfig::set`]).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Decoder visibility pattern used during pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArMode {
    /// Every token of frame `t` sees all tokens of frames `<= t`.
    Frame,
    /// Earlier frames fully, plus same-frame tokens up to and including itself.
    Token,
    /// No autoregressive restriction: all frames decoded simultaneously.
    Video,
}

impl ArMode {
    pub const ALL: [ArMode; 3] = [ArMode::Frame, ArMode::Token, ArMode::Video];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherKind {
    RandomFrozen,
    OracleLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskPolicy {
    Saliency,
    Random,
}

/// Which encoder output feeds the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readout {
    Cls,
    Mean,
}

macro_rules! text_enum {
    ($ty:ty { $($variant:path => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($text => Ok($variant),)+
                    _ => Err(format!("expected one of {}", [$($text),+].join("|"))),
                }
            }
        }
    };
}

text_enum!(ArMode { ArMode::Frame => "frame", ArMode::Token => "token", ArMode::Video => "video" });
text_enum!(TeacherKind { TeacherKind::RandomFrozen => "random", TeacherKind::OracleLinear => "linear" });
text_enum!(MaskPolicy { MaskPolicy::Saliency => "saliency", MaskPolicy::Random => "random" });
text_enum!(Readout { Readout::Cls => "cls", Readout::Mean => "mean" });

/// Architecture and pretraining-strategy hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch: usize,
    pub embed_dim: usize,
    pub depth: usize,
    /// SSM layers per attention layer: 0 is pure attention, `>= depth` pure SSM.
    pub mamba_per_attn: usize,
    pub heads: usize,
    pub state_size: usize,
    pub bidirectional: bool,
    pub mask_ratio: f64,
    pub mask_policy: MaskPolicy,
    pub teacher: TeacherKind,
    pub teacher_dim: usize,
    pub teacher_hidden: usize,
    pub decoder_depth: usize,
    pub ar_mode: ArMode,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// The desk-tiny preset.
    fn default() -> Self {
        Self {
            frames: 8,
            image_size: 32,
            channels: 3,
            patch: 8,
            embed_dim: 64,
            depth: 5,
            mamba_per_attn: 4,
            heads: 4,
            state_size: 8,
            bidirectional: true,
            mask_ratio: 0.5,
            mask_policy: MaskPolicy::Saliency,
            teacher: TeacherKind::RandomFrozen,
            teacher_dim: 32,
            teacher_hidden: 64,
            decoder_depth: 3,
            ar_mode: ArMode::Frame,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn tokens_per_frame(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Encoder sequence length including the cls token.
    pub fn seq_len(&self) -> usize {
        self.frames * self.tokens_per_frame() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Optimiser and loop settings for pretraining and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub finetune_warmup_epochs: usize,
    pub readout: Readout,
    pub freeze_backbone: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.5e-4,
            warmup_steps: 25,
            batch_size: 8,
            weight_decay: 0.05,
            finetune_lr: 1e-3,
            finetune_batch: 8,
            finetune_warmup_epochs: 1,
            readout: Readout::Cls,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Keys that determine tensor shapes; a checkpoint only loads into a config that agrees on them.
pub const ARCHITECTURE_KEYS: &[&str] = &[
    "frames",
    "image_size",
    "channels",
    "patch",
    "embed_dim",
    "depth",
    "mamba_per_attn",
    "heads",
    "state_size",
    "bidirectional",
    "teacher_dim",
    "decoder_depth",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

impl RunConfig {
    /// Parses `key=value` lines on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.to_string(),
                message: "expected key=value".into(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Sets one key. Unknown keys are rejected; call [`validate`](Self::validate) afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "frames" => m.frames = parse_value(key, value)?,
            "image_size" => m.image_size = parse_value(key, value)?,
            "channels" => m.channels = parse_value(key, value)?,
            "patch" => m.patch = parse_value(key, value)?,
            "embed_dim" => m.embed_dim = parse_value(key, value)?,
            "depth" => m.depth = parse_value(key, value)?,
            "mamba_per_attn" => m.mamba_per_attn = parse_value(key, value)?,
            "heads" => m.heads = parse_value(key, value)?,
            "state_size" => m.state_size = parse_value(key, value)?,
            "bidirectional" => m.bidirectional = parse_value(key, value)?,
            "mask_ratio" => m.mask_ratio = parse_value(key, value)?,
            "mask_policy" => m.mask_policy = parse_value(key, value)?,
            "teacher" => m.teacher = parse_value(key, value)?,
            "teacher_dim" => m.teacher_dim = parse_value(key, value)?,
            "teacher_hidden" => m.teacher_hidden = parse_value(key, value)?,
            "decoder_depth" => m.decoder_depth = parse_value(key, value)?,
            "ar_mode" => m.ar_mode = parse_value(key, value)?,
            "seed" => m.seed = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "finetune_lr" => t.finetune_lr = parse_value(key, value)?,
            "finetune_batch" => t.finetune_batch = parse_value(key, value)?,
            "finetune_warmup_epochs" => t.finetune_warmup_epochs = parse_value(key, value)?,
            "readout" => t.readout = parse_value(key, value)?,
            "freeze_backbone" => t.freeze_backbone = parse_value(key, value)?,
            _ => {
                return Err(Error::Config { key: key.to_string(), message: "unknown key".into() });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let t = &self.train;
        let fail = |key: &str, message: String| Err(Error::Config { key: key.to_string(), message });
        let positive = [
            ("frames", m.frames),
            ("image_size", m.image_size),
            ("channels", m.channels),
            ("patch", m.patch),
            ("embed_dim", m.embed_dim),
            ("heads", m.heads),
            ("teacher_dim", m.teacher_dim),
            ("teacher_hidden", m.teacher_hidden),
            ("decoder_depth", m.decoder_depth),
            ("batch_size", t.batch_size),
            ("finetune_batch", t.finetune_batch),
        ];
        for (key, v) in positive {
            if v == 0 {
                return fail(key, "must be >= 1".into());
            }
        }
        if m.image_size % m.patch != 0 {
            return fail("patch", format!("image_size {} not divisible by patch {}", m.image_size, m.patch));
        }
        if m.embed_dim % m.heads != 0 {
            return fail("heads", format!("embed_dim {} not divisible by {} heads", m.embed_dim, m.heads));
        }
        if !(0.0..=1.0).contains(&m.mask_ratio) {
            return fail("mask_ratio", format!("{} outside [0, 1]", m.mask_ratio));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return fail("lr", format!("{} must be a finite non-negative number", t.lr));
        }
        if !(t.finetune_lr >= 0.0 && t.finetune_lr.is_finite()) {
            return fail("finetune_lr", format!("{} must be a finite non-negative number", t.finetune_lr));
        }
        if !(t.weight_decay >= 0.0) {
            return fail("weight_decay", format!("{} must be non-negative", t.weight_decay));
        }
        Ok(())
    }

    /// Every key in a fixed order; parsing the result reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let pairs: Vec<(&str, String)> = vec![
            ("frames", m.frames.to_string()),
            ("image_size", m.image_size.to_string()),
            ("channels", m.channels.to_string()),
            ("patch", m.patch.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("mamba_per_attn", m.mamba_per_attn.to_string()),
            ("heads", m.heads.to_string()),
            ("state_size", m.state_size.to_string()),
            ("bidirectional", m.bidirectional.to_string()),
            ("mask_ratio", format!("{:?}", m.mask_ratio)),
            ("mask_policy", m.mask_policy.to_string()),
            ("teacher", m.teacher.to_string()),
            ("teacher_dim", m.teacher_dim.to_string()),
            ("teacher_hidden", m.teacher_hidden.to_string()),
            ("decoder_depth", m.decoder_depth.to_string()),
            ("ar_mode", m.ar_mode.to_string()),
            ("seed", m.seed.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("warmup_steps", t.warmup_steps.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("weight_decay", format!("{:?}", t.weight_decay)),
            ("finetune_lr", format!("{:?}", t.finetune_lr)),
            ("finetune_batch", t.finetune_batch.to_string()),
            ("finetune_warmup_epochs", t.finetune_warmup_epochs.to_string()),
            ("readout", t.readout.to_string()),
            ("freeze_backbone", t.freeze_backbone.to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// The `key=value` lines of [`ARCHITECTURE_KEYS`] only.
    pub fn architecture_text(&self) -> String {
        select_keys(&self.to_text(), ARCHITECTURE_KEYS)
    }

    /// Short stable fingerprint of the full config echo.
    pub fn hash(&self) -> String {
        format!("{:08x}", crc32fast::hash(self.to_text().as_bytes()))
    }
}

pub(crate) fn select_keys(text: &str, keys: &[&str]) -> String {
    text.lines()
        .filter(|l| l.split_once('=').is_some_and(|(k, _)| keys.contains(&k.trim())))
        .map(|l| format!("{}\n", l.trim()))
        .collect()
}
