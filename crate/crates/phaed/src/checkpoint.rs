//! Single-file checkpoints: magic, version, a JSON header, then raw
//! little-endian tensors (parameters, then the two Adam moments if present).

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context};
use phaed_core::corpus::Vocabulary;
use phaed_core::training::{Adam, Precision, TrainConfig};
use phaed_core::{Matrix, Model, Scalar};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"PHAEDCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub precision: Precision,
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    pub tensors: Vec<TensorInfo>,
    pub optimizer: bool,
}

pub struct Checkpoint<T> {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub model: Model<T>,
    pub optimizer: Option<Adam<T>>,
    pub step: u64,
}

/// A checkpoint of either precision.
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

fn precision_of<T: Scalar>() -> Precision {
    if T::NAME == f32::NAME {
        Precision::Float32
    } else {
        Precision::Float64
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> anyhow::Result<Vec<u8>> {
        let tensors = self
            .model
            .params
            .iter()
            .map(|(_, p)| TensorInfo {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect();
        let mut config = self.config.clone();
        config.precision = precision_of::<T>();
        let header = Header {
            precision: config.precision,
            config,
            vocab: self.vocab.clone(),
            step: self.step,
            tensors,
            optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write = |m: &Matrix<T>| {
            for &v in m.data() {
                v.write_le(&mut out);
            }
        };
        for (_, p) in self.model.params.iter() {
            write(&p.value);
        }
        if let Some(adam) = &self.optimizer {
            adam.first_moment.iter().for_each(&mut write);
            adam.second_moment.iter().for_each(&mut write);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).with_context(|| path.display().to_string())?;
        f.write_all(&bytes)?;
        Ok(())
    }

    fn from_parts(header: Header, payload: &[u8]) -> anyhow::Result<Self> {
        let mut model = Model::<T>::new(header.config.model.clone(), 0)?;
        ensure!(
            header.tensors.len() == model.params.len(),
            "checkpoint has {} tensors, the config implies {}",
            header.tensors.len(),
            model.params.len()
        );
        for (info, p) in header.tensors.iter().zip(model.params.iter_mut()) {
            ensure!(
                info.name == p.name && info.rows == p.value.rows() && info.cols == p.value.cols(),
                "tensor {} ({}x{}) does not match {} ({}x{})",
                info.name,
                info.rows,
                info.cols,
                p.name,
                p.value.rows(),
                p.value.cols()
            );
        }
        let mut cursor = payload;
        let mut read = |m: &mut Matrix<T>| -> anyhow::Result<()> {
            let need = m.len() * T::BYTES;
            ensure!(cursor.len() >= need, "checkpoint payload is truncated");
            for (v, chunk) in m.data_mut().iter_mut().zip(cursor[..need].chunks_exact(T::BYTES)) {
                *v = T::read_le(chunk);
            }
            cursor = &cursor[need..];
            Ok(())
        };
        for p in model.params.iter_mut() {
            read(&mut p.value)?;
        }
        let optimizer = if header.optimizer {
            let mut adam = Adam::new(&model.params, &header.config);
            for m in adam.first_moment.iter_mut().chain(adam.second_moment.iter_mut()) {
                read(m)?;
            }
            adam.step = header.step;
            Some(adam)
        } else {
            None
        };
        ensure!(cursor.is_empty(), "{} trailing bytes after the payload", cursor.len());
        Ok(Self {
            config: header.config,
            vocab: header.vocab,
            model,
            optimizer,
            step: header.step,
        })
    }
}

impl AnyCheckpoint {
    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        ensure!(bytes.len() >= 20 && &bytes[..8] == MAGIC, "not a phaed checkpoint");
        let version = u32::from_le_bytes(bytes[8..12].try_into()?);
        if version != VERSION {
            bail!("unsupported checkpoint version {version}");
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into()?) as usize;
        ensure!(bytes.len() >= 20 + len, "checkpoint header is truncated");
        let header: Header = serde_json::from_slice(&bytes[20..20 + len])?;
        let payload = &bytes[20 + len..];
        Ok(match header.precision {
            Precision::Float32 => AnyCheckpoint::F32(Checkpoint::from_parts(header, payload)?),
            Precision::Float64 => AnyCheckpoint::F64(Checkpoint::from_parts(header, payload)?),
        })
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = fs::read(path).with_context(|| path.display().to_string())?;
        Self::from_bytes(&bytes).with_context(|| path.display().to_string())
    }

    pub fn vocab(&self) -> &Vocabulary {
        match self {
            AnyCheckpoint::F32(c) => &c.vocab,
            AnyCheckpoint::F64(c) => &c.vocab,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        match self {
            AnyCheckpoint::F32(c) => &c.config,
            AnyCheckpoint::F64(c) => &c.config,
        }
    }
}

/// Lowercase hex SHA-256 of a file.
pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| path.display().to_string())?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
