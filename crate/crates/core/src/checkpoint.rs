//! LAVC: a named-tensor archive, and the training checkpoint stored in it.
//!
//! ```text
//! "LAVC"  u32 LE entry count
//! per entry: u16 LE name length, UTF-8 name, one LTF blob
//! ```

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::config::Config;
use crate::encoders::EncoderStack;
use crate::error::{Error, Result};
use crate::ltf::{self, LtfValue};
use crate::nn::Parameterized;
use crate::optim::{Adam, Moments};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LAVC";

/// Ordered list of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    entries: Vec<(String, LtfValue)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn push(&mut self, name: &str, value: LtfValue) -> Result<()> {
        if name.len() > u16::MAX as usize {
            return Err(Error::Invalid(format!("entry name of {} bytes is too long", name.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::Invalid(format!("duplicate archive entry {name:?}")));
        }
        self.entries.push((name.to_string(), value));
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.push(name, LtfValue::F64(t.clone()))
    }

    pub fn get(&self, name: &str) -> Option<&LtfValue> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, value) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let blob = match value {
                LtfValue::F64(t) => ltf::encode_f64(t)?,
                LtfValue::U8 { shape, bytes } => ltf::encode_u8(shape, bytes)?,
            };
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    /// `path` only labels errors.
    pub fn decode(buf: &[u8], path: &Path) -> Result<Self> {
        let truncated = || Error::format(path, "truncated checkpoint");
        if buf.len() < 8 {
            return Err(truncated());
        }
        if &buf[..4] != MAGIC {
            return Err(Error::format(path, "bad checkpoint magic"));
        }
        let count = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let mut pos = 8;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..count {
            let len_bytes = buf.get(pos..pos + 2).ok_or_else(truncated)?;
            let len = u16::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
            pos += 2;
            let raw = buf.get(pos..pos + len).ok_or_else(truncated)?;
            let name = std::str::from_utf8(raw)
                .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
                .to_string();
            pos += len;
            if !seen.insert(name.clone()) {
                return Err(Error::format(path, format!("duplicate entry name {name:?}")));
            }
            let (value, used) = ltf::decode(&buf[pos..], path).map_err(|e| match e {
                Error::Format { reason, .. } => Error::format(path, format!("entry {name:?}: {reason}")),
                other => other,
            })?;
            pos += used;
            entries.push((name, value));
        }
        if pos != buf.len() {
            return Err(Error::format(path, "trailing bytes after last entry"));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // Write to a sibling temp file first so a failed write never clobbers a good checkpoint.
        let tmp = path.with_extension("lavc.tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf, path)
    }
}

const CONFIG: &str = "config";
const OPTIM_T: &str = "optim.t";
const STEP: &str = "train.step";
const EPOCH: &str = "train.epoch";

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: Config,
    pub stack: EncoderStack,
    pub adam: Adam,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: u64,
}

fn counter(t: u64) -> Result<Tensor> {
    Tensor::scalar(t as f64)
}

fn read_counter(a: &Archive, name: &str, path: &Path) -> Result<u64> {
    let v = a
        .get(name)
        .ok_or_else(|| Error::format(path, format!("missing entry {name:?}")))?
        .clone()
        .into_f64(path)?
        .item()?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::format(path, format!("entry {name:?} is not a counter: {v}")));
    }
    Ok(v as u64)
}

impl Checkpoint {
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        let json = serde_json::to_vec(&self.config).expect("config serializes");
        a.push(CONFIG, LtfValue::U8 { shape: vec![json.len()], bytes: json })?;
        let mut err = None;
        self.stack.visit_params("", &mut |name, t| {
            if err.is_none() {
                err = a.push_tensor(name, t).err();
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        for (name, st) in &self.adam.moments {
            a.push_tensor(&format!("optim.m.{name}"), &st.m)?;
            a.push_tensor(&format!("optim.v.{name}"), &st.v)?;
        }
        a.push_tensor(OPTIM_T, &counter(self.adam.t)?)?;
        a.push_tensor(STEP, &counter(self.step)?)?;
        a.push_tensor(EPOCH, &counter(self.epoch)?)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let bytes = a
            .get(CONFIG)
            .ok_or_else(|| Error::format(path, "missing config entry"))?
            .clone()
            .into_bytes(path)?;
        let config: Config = serde_json::from_slice(&bytes)
            .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
        config.validate()?;

        let mut stack = EncoderStack::new(&config.model, 0)?;
        let mut err: Option<Error> = None;
        stack.visit_params_mut("", &mut |name, p| {
            if err.is_some() {
                return;
            }
            let t = match a.get(name) {
                Some(v) => v.clone().into_f64(path),
                None => Err(Error::format(path, format!("missing parameter {name:?}"))),
            };
            match t {
                Ok(t) if t.shape() == p.shape() => *p = t,
                Ok(t) => err = Some(Error::format(path, format!("parameter {name:?} has shape {:?}, model expects {:?}", t.shape(), p.shape()))),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }

        let mut adam = Adam::new(&config.optim);
        adam.t = read_counter(a, OPTIM_T, path)?;
        let mut moments = BTreeMap::new();
        for name in a.names() {
            let Some(param) = name.strip_prefix("optim.m.") else { continue };
            let get = |key: String| -> Result<Tensor> {
                a.get(&key)
                    .ok_or_else(|| Error::format(path, format!("missing entry {key:?}")))?
                    .clone()
                    .into_f64(path)
            };
            moments.insert(
                param.to_string(),
                Moments {
                    m: get(format!("optim.m.{param}"))?,
                    v: get(format!("optim.v.{param}"))?,
                },
            );
        }
        adam.moments = moments;
        Ok(Self {
            config,
            stack,
            adam,
            step: read_counter(a, STEP, path)?,
            epoch: read_counter(a, EPOCH, path)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}
