//! Binary checkpoint: config echo plus a named tensor table, CRC protected.

use std::collections::HashSet;
use std::path::Path;

use crate::config::{select_keys, RunConfig, ARCHITECTURE_KEYS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VMAPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Self {
            config_text: model.config.to_text(),
            tensors: model.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(Error::Checkpoint(format!("CRC mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u32()? as usize;
        let config_text = r.string(config_len)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel).map(|_| r.u64().map(f64::from_bits)).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after tensor table", body.len() - r.pos)));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {}: need {n} more bytes", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not valid UTF-8".into()))
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, Checkpoint::from_model(model).to_bytes())?;
    Ok(())
}

/// Copies a checkpoint's tensors into `model`.
///
/// Tensor names must match exactly in both directions, then the architecture
/// keys of the config echo must agree with `model.config`.
pub fn apply_checkpoint(model: &mut Model, ckpt: &Checkpoint) -> Result<()> {
    let have: HashSet<&str> = ckpt.tensors.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(missing) = model.store.entries().iter().find(|e| !have.contains(e.name.as_str())) {
        return Err(Error::Checkpoint(format!("checkpoint is missing tensor `{}`", missing.name)));
    }
    if let Some((unknown, _)) = ckpt.tensors.iter().find(|(n, _)| model.store.id(n).is_none()) {
        return Err(Error::Checkpoint(format!("checkpoint has unknown tensor `{unknown}`")));
    }
    let saved = select_keys(&ckpt.config_text, ARCHITECTURE_KEYS);
    let current = model.config.architecture_text();
    if saved != current {
        let diff = saved
            .lines()
            .zip(current.lines())
            .find(|(a, b)| a != b)
            .map_or_else(|| "architecture keys differ".to_string(), |(a, b)| format!("saved `{a}`, loading `{b}`"));
        return Err(Error::Checkpoint(format!("config mismatch: {diff}")));
    }
    for (name, t) in &ckpt.tensors {
        model.store.assign(name, t.clone())?;
    }
    Ok(())
}

pub fn load_into(model: &mut Model, path: &Path) -> Result<()> {
    apply_checkpoint(model, &Checkpoint::read(path)?)
}

/// Rebuilds a model from the checkpoint's own config echo, with a head if one was saved.
pub fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::read(path)?;
    let config = RunConfig::parse(&ckpt.config_text)?;
    let mut model = Model::new(&config)?;
    if let Some((_, bias)) = ckpt.tensors.iter().find(|(n, _)| n == "head.linear.bias") {
        model.attach_head(bias.numel(), config.model.seed);
    }
    apply_checkpoint(&mut model, &ckpt)?;
    Ok(model)
}
