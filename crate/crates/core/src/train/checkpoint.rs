//! Binary checkpoint format.
//!
//! Layout (little-endian): magic `MADF`, `u32` version, `u32` record count,
//! then per record: `u32` name length, name bytes, `u8` dtype tag, `u8`
//! rank, `rank` x `u64` dims, payload. Dtype tags: 0 = f32, 1 = f64,
//! 2 = u64, 3 = u8.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

use super::adam::{AdamConfig, AdamState};

pub const MAGIC: &[u8; 4] = b"MADF";
pub const VERSION: u32 = 1;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_U64: u8 = 2;
const TAG_U8: u8 = 3;

/// Ways a checkpoint can fail to decode or to match its configuration.
#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic, not a checkpoint")]
    BadMagic,
    #[error("unsupported version {0}, expected {VERSION}")]
    UnsupportedVersion(u32),
    #[error("truncated while reading {0}")]
    Truncated(String),
    #[error("{0} trailing bytes after the last record")]
    TrailingBytes(usize),
    #[error("record {name} has unknown dtype tag {tag}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("record {name} has dtype {found}, expected {expected}")]
    DtypeMismatch { name: String, expected: u8, found: u8 },
    #[error("record {name} has dims {found:?}, expected {expected:?}")]
    DimMismatch {
        name: String,
        expected: Vec<u64>,
        found: Vec<u64>,
    },
    #[error("missing record {0}")]
    Missing(String),
    #[error("duplicate record {0}")]
    Duplicate(String),
    #[error("unexpected record {0}")]
    Unexpected(String),
    #[error("invalid content: {0}")]
    Invalid(String),
}

/// Typed payload of one record.
#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => TAG_F32,
            Payload::F64(_) => TAG_F64,
            Payload::U64(_) => TAG_U64,
            Payload::U8(_) => TAG_U8,
        }
    }

    fn of_scalars<T: Scalar>(values: &[T]) -> Payload {
        match T::DTYPE_TAG {
            TAG_F32 => Payload::F32(values.iter().map(|v| v.as_f64() as f32).collect()),
            _ => Payload::F64(values.iter().map(|v| v.as_f64()).collect()),
        }
    }

    fn to_scalars<T: Scalar>(&self) -> Option<Vec<T>> {
        match self {
            Payload::F32(v) if T::DTYPE_TAG == TAG_F32 => Some(v.iter().map(|&x| T::from_f64(x as f64)).collect()),
            Payload::F64(v) if T::DTYPE_TAG == TAG_F64 => Some(v.iter().map(|&x| T::from_f64(x)).collect()),
            _ => None,
        }
    }
}

/// One named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub payload: Payload,
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.payload.tag());
        out.push(r.dims.len() as u8);
        for d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U8(v) => out.extend_from_slice(v),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> std::result::Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> std::result::Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> std::result::Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_records(bytes: &[u8]) -> std::result::Result<Vec<Record>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let len = r.u32(&format!("name length of record {i}"))? as usize;
        let name = String::from_utf8(r.take(len, "record name")?.to_vec())
            .map_err(|_| CheckpointError::Invalid(format!("record {i} name is not UTF-8")))?;
        let tag = r.u8(&name)?;
        let rank = r.u8(&name)?;
        let dims = (0..rank).map(|_| r.u64(&name)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(usize::try_from(d).ok()?))
            .ok_or_else(|| CheckpointError::Invalid(format!("{name} dims overflow")))?;
        let width = match tag {
            TAG_F32 => 4,
            TAG_F64 | TAG_U64 => 8,
            TAG_U8 => 1,
            _ => return Err(CheckpointError::UnknownDtype { name, tag }),
        };
        let nbytes = numel
            .checked_mul(width)
            .ok_or_else(|| CheckpointError::Invalid(format!("{name} size overflows")))?;
        let raw = r.take(nbytes, &name)?;
        let payload = match tag {
            TAG_F32 => Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            TAG_F64 => Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            TAG_U64 => Payload::U64(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect()),
            _ => Payload::U8(raw.to_vec()),
        };
        records.push(Record { name, dims, payload });
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(records)
}

/// Model, optimizer and progress of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Scalar> {
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// Completed iterations.
    pub iteration: u64,
    pub seed: u64,
}

fn dims4(s: Shape4) -> Vec<u64> {
    s.as_array().iter().map(|&d| d as u64).collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn records(&self) -> Vec<Record> {
        let mut out = vec![Record {
            name: "config/model".into(),
            dims: vec![self.model.config().to_text().len() as u64],
            payload: Payload::U8(self.model.config().to_text().into_bytes()),
        }];
        let scalar = |name: &str, v: u64| Record {
            name: name.into(),
            dims: vec![1],
            payload: Payload::U64(vec![v]),
        };
        out.push(scalar("train/iteration", self.iteration));
        out.push(scalar("train/seed", self.seed));
        out.push(scalar("adam/t", self.adam.t));
        let c = self.adam.config;
        out.push(Record {
            name: "adam/config".into(),
            dims: vec![4],
            payload: Payload::F64(vec![c.lr, c.beta1, c.beta2, c.eps]),
        });
        for p in self.model.params().iter() {
            out.push(Record {
                name: format!("param/{}", p.name),
                dims: dims4(p.value.shape()),
                payload: Payload::of_scalars(p.value.data()),
            });
        }
        for (i, p) in self.model.params().iter().enumerate() {
            if !p.trainable {
                continue;
            }
            for (kind, moments) in [("m", &self.adam.m[i]), ("v", &self.adam.v[i])] {
                out.push(Record {
                    name: format!("adam/{kind}/{}", p.name),
                    dims: dims4(p.value.shape()),
                    payload: Payload::of_scalars(moments),
                });
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_records(&self.records())
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, CheckpointError> {
        let mut map: HashMap<String, Record> = HashMap::new();
        for r in decode_records(bytes)? {
            if map.contains_key(&r.name) {
                return Err(CheckpointError::Duplicate(r.name));
            }
            map.insert(r.name.clone(), r);
        }
        let mut take = |name: &str| map.remove(name).ok_or_else(|| CheckpointError::Missing(name.to_string()));

        let config = match take("config/model")?.payload {
            Payload::U8(b) => String::from_utf8(b)
                .map_err(|_| CheckpointError::Invalid("model config is not UTF-8".into()))
                .and_then(|t| ModelConfig::from_text(&t).map_err(|e| CheckpointError::Invalid(e.to_string())))?,
            _ => return Err(CheckpointError::Invalid("config/model must be bytes".into())),
        };
        let u64_of = |r: Record| match r.payload {
            Payload::U64(v) if v.len() == 1 => Ok(v[0]),
            _ => Err(CheckpointError::Invalid(format!("{} must be one u64", r.name))),
        };
        let iteration = u64_of(take("train/iteration")?)?;
        let seed = u64_of(take("train/seed")?)?;
        let t = u64_of(take("adam/t")?)?;
        let adam_config = match take("adam/config")?.payload {
            Payload::F64(v) if v.len() == 4 => AdamConfig {
                lr: v[0],
                beta1: v[1],
                beta2: v[2],
                eps: v[3],
            },
            _ => return Err(CheckpointError::Invalid("adam/config must be four f64".into())),
        };

        // The configuration's freshly built parameters fix names, order,
        // shapes and trainability.
        let template = Model::<T>::build(config.clone(), 0)
            .map_err(|e| CheckpointError::Invalid(e.to_string()))?
            .into_params();
        let mut tensor = |name: String, shape: Shape4| -> std::result::Result<Vec<T>, CheckpointError> {
            let r = take(&name)?;
            let expected = dims4(shape);
            if r.dims != expected {
                return Err(CheckpointError::DimMismatch {
                    name,
                    expected,
                    found: r.dims,
                });
            }
            let found = r.payload.tag();
            r.payload.to_scalars::<T>().ok_or(CheckpointError::DtypeMismatch {
                name,
                expected: T::DTYPE_TAG,
                found,
            })
        };
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for p in template.iter() {
            let shape = p.value.shape();
            let data = tensor(format!("param/{}", p.name), shape)?;
            debug_assert_eq!(data.len(), shape.numel());
            params.insert(
                p.name.clone(),
                Tensor4::from_vec(shape, data).expect("dims checked"),
                p.trainable,
            );
            if p.trainable {
                m.push(tensor(format!("adam/m/{}", p.name), shape)?);
                v.push(tensor(format!("adam/v/{}", p.name), shape)?);
            } else {
                m.push(Vec::new());
                v.push(Vec::new());
            }
        }
        drop(tensor);
        drop(take);
        if let Some(extra) = map.keys().min() {
            return Err(CheckpointError::Unexpected(extra.clone()));
        }
        let model = Model::from_params(config, params).map_err(|e| CheckpointError::Invalid(e.to_string()))?;
        Ok(Checkpoint {
            model,
            adam: AdamState {
                config: adam_config,
                m,
                v,
                t,
            },
            iteration,
            seed,
        })
    }

    /// Writes through a temporary file so an interrupted save never
    /// replaces an existing checkpoint with a partial one.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|source| Error::Checkpoint {
            path: path.to_path_buf(),
            source,
        })
    }
}
