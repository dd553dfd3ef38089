//! Binary checkpoints: little-endian, `HMERCKPT` magic, format version,
//! config and vocabulary text, trainer state, then named f64 tensors.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"HMERCKPT";
pub const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes at offset {offset}")]
    BadMagic { offset: usize },
    #[error("checkpoint format version {found}, this build reads version {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated at byte offset {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("malformed checkpoint at byte offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("checkpoint does not match the model:\n  {}", .0.join("\n  "))]
    Mismatch(Vec<String>),
}

/// Serialized `ChaCha8Rng` position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Resolved run configuration, `key = value` text.
    pub config: String,
    /// Vocabulary file text.
    pub vocab: String,
    /// Completed optimizer steps.
    pub step: u64,
    /// Sum of step losses so far in the current epoch.
    pub epoch_loss_sum: f64,
    pub rng: RngState,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Truncated { offset: self.bytes.len(), what });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &'static str) -> Result<usize, CheckpointError> {
        let at = self.pos;
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed {
                offset: at,
                detail: format!("{what} length {n} exceeds file size"),
            })
    }

    fn text(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.len(what)?;
        let at = self.pos;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| CheckpointError::Malformed {
            offset: at,
            detail: format!("{what} is not UTF-8"),
        })
    }
}

fn put_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_text(&mut out, &self.config);
        put_text(&mut out, &self.vocab);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.epoch_loss_sum.to_le_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_text(&mut out, &r.name);
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        for (i, &b) in MAGIC.iter().enumerate() {
            if bytes.get(i) != Some(&b) {
                return Err(CheckpointError::BadMagic { offset: i });
            }
        }
        r.pos = MAGIC.len();
        let found = r.u32("format version")?;
        if found != VERSION {
            return Err(CheckpointError::Version {
                found,
                expected: VERSION,
            });
        }
        let config = r.text("config block")?;
        let vocab = r.text("vocabulary block")?;
        let step = r.u64("step counter")?;
        let epoch_loss_sum = f64::from_le_bytes(r.take(8, "epoch loss")?.try_into().unwrap());
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().unwrap());
        let count = r.len("record count")?;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.text("tensor name")?;
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len("tensor extent")?);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8, "tensor values")?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            records.push(Record { name, shape, values });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed {
                offset: r.pos,
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self {
            config,
            vocab,
            step,
            epoch_loss_sum,
            rng: RngState { seed, stream, word_pos },
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Records for every parameter and its two Adam moments.
    pub fn tensor_records(params: &ParamStore, m: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Record> {
        let mut out = Vec::with_capacity(params.len() * 3);
        for (prefix, source) in [("", None), (ADAM_M, Some(m)), (ADAM_V, Some(v))] {
            for (i, (name, t)) in params.iter().enumerate() {
                out.push(Record {
                    name: format!("{prefix}{name}"),
                    shape: t.shape().to_vec(),
                    values: source.map_or_else(|| t.data().to_vec(), |s| s[i].clone()),
                });
            }
        }
        out
    }

    fn find(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Checks every parameter against the stored records, listing all
    /// missing, unexpected and differently shaped tensors.
    pub fn check(&self, params: &ParamStore) -> Result<(), CheckpointError> {
        let mut problems = Vec::new();
        for (name, t) in params.iter() {
            for full in [name.to_string(), format!("{ADAM_M}{name}"), format!("{ADAM_V}{name}")] {
                match self.find(&full) {
                    None if full == name => problems.push(format!("{name}: missing from checkpoint")),
                    None => {}
                    Some(r) if r.shape != t.shape() => problems.push(format!(
                        "{full}: checkpoint shape {:?}, model shape {:?}",
                        r.shape,
                        t.shape()
                    )),
                    Some(_) => {}
                }
            }
        }
        for r in &self.records {
            let base = r.name.trim_start_matches(ADAM_M).trim_start_matches(ADAM_V);
            if params.id(base).is_none() {
                problems.push(format!("{}: not in the model", r.name));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::Mismatch(problems))
        }
    }

    /// Copies stored parameter values into `params` after [`Self::check`].
    pub fn restore_params(&self, params: &mut ParamStore) -> Result<(), CheckpointError> {
        self.check(params)?;
        for id in params.ids().collect::<Vec<_>>() {
            let r = self.find(params.name(id)).expect("checked");
            params.get_mut(id).data_mut().copy_from_slice(&r.values);
        }
        Ok(())
    }

    /// Stored Adam moments in parameter order; zeros where absent.
    pub fn moments(&self, params: &ParamStore) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let get = |prefix: &str, name: &str, n: usize| {
            self.find(&format!("{prefix}{name}"))
                .map_or_else(|| vec![0.0; n], |r| r.values.clone())
        };
        params
            .iter()
            .map(|(name, t)| (get(ADAM_M, name, t.numel()), get(ADAM_V, name, t.numel())))
            .unzip()
    }
}
