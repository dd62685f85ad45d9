//! Binary checkpoints: a versioned header followed by a table of named
//! tensors in little-endian `f64`.
//!
//! ```text
//! "SLTS" | u16 version | u8 variant | u8 reserved | u64 step | u32 count
//! count x ( u16 name_len | name (UTF-8) | u8 ndim | ndim x u32 | f64 values )
//! ```
//!
//! Optimizer moments are stored as extra tensors named `adam.m.<param>` and
//! `adam.v.<param>`. The run configuration lives next to the file as
//! `config.toml`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{RunConfig, Variant};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::saltts::Model;

pub const MAGIC: &[u8; 4] = b"SLTS";
pub const VERSION: u16 = 1;
pub const CONFIG_FILE: &str = "config.toml";
pub const MOMENT_M: &str = "adam.m.";
pub const MOMENT_V: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

fn load_err(offset: usize, msg: impl std::fmt::Display) -> Error {
    Error::Load(format!("at byte {offset}: {msg}"))
}

impl Checkpoint {
    /// Model parameters only.
    pub fn from_model(model: &Model, step: u64) -> Self {
        Self {
            variant: model.variant(),
            step,
            tensors: model.store().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(MOMENT_M))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.variant.code());
        out.push(0);
        out.extend_from_slice(&self.step.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Argument("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len()).map_err(|_| Error::Argument(format!("name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.shape().len()).map_err(|_| Error::Argument(format!("{name}: too many dims")))?;
            out.push(ndim);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Argument(format!("{name}: extent too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(load_err(pos, format!("truncated, need {n} more bytes")));
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(load_err(0, "not a checkpoint (bad magic)"));
        }
        let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(load_err(4, format!("unsupported checkpoint version {version}")));
        }
        let code = take(2)?[0];
        let variant = Variant::from_code(code).ok_or_else(|| load_err(6, format!("unknown variant code {code}")))?;
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(len)?)
                .map_err(|_| Error::Load("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(n.checked_mul(8).ok_or_else(|| Error::Load(format!("{name}: tensor too large")))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if pos != bytes.len() {
            return Err(load_err(pos, "trailing bytes after tensor table"));
        }
        Ok(Self { variant, step, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Load(m) => Error::Load(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies every model parameter from the checkpoint. The variant and
    /// every name and shape must match.
    pub fn restore_into(&self, model: &mut Model) -> Result<()> {
        if self.variant != model.variant() {
            return Err(Error::Load(format!(
                "checkpoint holds a {} model, graph is {}",
                self.variant,
                model.variant()
            )));
        }
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            let name = model.store().get(id).name.clone();
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Load(format!("checkpoint has no tensor {name}")))?;
            let p = model.store_mut().get_mut(id);
            if t.shape() != p.value.shape() {
                return Err(Error::Load(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Path of the config file accompanying `checkpoint`: its own directory, or
/// the run directory above `checkpoints/`.
pub fn config_path(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let here = dir.join(CONFIG_FILE);
    match dir.parent() {
        Some(up) if !here.exists() && up.join(CONFIG_FILE).exists() => up.join(CONFIG_FILE),
        _ => here,
    }
}

/// Builds a model from `checkpoint` and the config stored next to it.
pub fn load_model(checkpoint: &Path) -> Result<(Model, RunConfig, Checkpoint)> {
    let cfg = RunConfig::load(&config_path(checkpoint))?;
    let ckpt = Checkpoint::read(checkpoint)?;
    if ckpt.variant != cfg.model.variant {
        return Err(Error::Load(format!(
            "{}: checkpoint variant {} disagrees with config variant {}",
            checkpoint.display(),
            ckpt.variant,
            cfg.model.variant
        )));
    }
    let mut model = Model::new(cfg.model.clone())?;
    ckpt.restore_into(&mut model)?;
    Ok((model, cfg, ckpt))
}
