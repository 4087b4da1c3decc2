//! Versioned checkpoint container for model and projection parameters.
//!
//! Layout (little-endian): magic `TGCK`, u32 version, u32 config-hash
//! length + bytes, u32 meta length + bytes (serialized config, used to
//! rebuild the model at evaluation time), u32 tensor count, then per
//! tensor: u32 name length + bytes, u8 dtype (1 = f32, 3 = f64),
//! u32 rank, u32 dims[], payload.

use std::io::Read;
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub enum CheckpointTensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: String,
    /// Serialized configuration needed to rebuild the model shape.
    pub meta: String,
    pub tensors: Vec<(String, CheckpointTensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&CheckpointTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let hash = self.config_hash.as_bytes();
        buf.extend_from_slice(&(hash.len() as u32).to_le_bytes());
        buf.extend_from_slice(hash);
        let meta = self.meta.as_bytes();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &self.tensors {
            let nb = name.as_bytes();
            buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
            buf.extend_from_slice(nb);
            match tensor {
                CheckpointTensor::F32(a) => {
                    buf.push(DTYPE_F32);
                    push_shape(&mut buf, a.shape());
                    for &v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                CheckpointTensor::F64(a) => {
                    buf.push(DTYPE_F64);
                    push_shape(&mut buf, a.shape());
                    for &v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 4];
        read(&mut r, &mut magic, path)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic (expected TGCK)"));
        }
        let version = read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let hash_len = read_u32(&mut r, path)? as usize;
        let mut hash = vec![0u8; hash_len];
        read(&mut r, &mut hash, path)?;
        let config_hash =
            String::from_utf8(hash).map_err(|_| Error::format(path, "config hash not UTF-8"))?;
        let meta_len = read_u32(&mut r, path)? as usize;
        let mut meta = vec![0u8; meta_len];
        read(&mut r, &mut meta, path)?;
        let meta = String::from_utf8(meta).map_err(|_| Error::format(path, "meta not UTF-8"))?;
        let count = read_u32(&mut r, path)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name = vec![0u8; name_len];
            read(&mut r, &mut name, path)?;
            let name =
                String::from_utf8(name).map_err(|_| Error::format(path, "name not UTF-8"))?;
            let mut dtype = [0u8; 1];
            read(&mut r, &mut dtype, path)?;
            let rank = read_u32(&mut r, path)? as usize;
            if rank > 8 {
                return Err(Error::format(path, format!("implausible rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r, path)? as usize);
            }
            let len: usize = shape.iter().product();
            let tensor = match dtype[0] {
                DTYPE_F32 => {
                    let mut payload = vec![0u8; len * 4];
                    read(&mut r, &mut payload, path)?;
                    let values: Vec<f32> = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    CheckpointTensor::F32(
                        ArrayD::from_shape_vec(ndarray::IxDyn(&shape), values)
                            .map_err(|e| Error::format(path, e.to_string()))?,
                    )
                }
                DTYPE_F64 => {
                    let mut payload = vec![0u8; len * 8];
                    read(&mut r, &mut payload, path)?;
                    let values: Vec<f64> = payload
                        .chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect();
                    CheckpointTensor::F64(
                        ArrayD::from_shape_vec(ndarray::IxDyn(&shape), values)
                            .map_err(|e| Error::format(path, e.to_string()))?,
                    )
                }
                other => return Err(Error::format(path, format!("unknown dtype {other}"))),
            };
            tensors.push((name, tensor));
        }
        Ok(Self {
            config_hash,
            meta,
            tensors,
        })
    }
}

fn push_shape(buf: &mut Vec<u8>, shape: &[usize]) {
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, "truncated checkpoint"))
}
