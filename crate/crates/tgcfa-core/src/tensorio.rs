//! Binary tensor container used for dataset images and label maps.
//!
//! Layout (little-endian): magic `TGTS`, u32 version, u8 dtype
//! (1 = f32, 2 = u8), u32 rank, u32 dims[rank], then the payload in
//! row-major order. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TGTS";
pub const TENSOR_VERSION: u32 = 1;

const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::U8(a) => a.shape(),
        }
    }

    pub fn as_f32(&self) -> Result<&ArrayD<f32>> {
        match self {
            TensorData::F32(a) => Ok(a),
            TensorData::U8(_) => Err(Error::Validation("expected f32 tensor, got u8".into())),
        }
    }

    pub fn as_u8(&self) -> Result<&ArrayD<u8>> {
        match self {
            TensorData::U8(a) => Ok(a),
            TensorData::F32(_) => Err(Error::Validation("expected u8 tensor, got f32".into())),
        }
    }
}

pub fn write_tensor(path: &Path, tensor: &TensorData) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(&mut w, tensor).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_tensor_to<W: Write>(w: &mut W, tensor: &TensorData) -> std::io::Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&TENSOR_VERSION.to_le_bytes())?;
    let (dtype, shape) = match tensor {
        TensorData::F32(a) => (DTYPE_F32, a.shape()),
        TensorData::U8(a) => (DTYPE_U8, a.shape()),
    };
    w.write_all(&[dtype])?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    match tensor {
        TensorData::F32(a) => {
            for &v in a.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        TensorData::U8(a) => {
            for &v in a.iter() {
                w.write_all(&[v])?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    read_tensor_from(&mut r, path)
}

fn read_tensor_from<R: Read>(r: &mut R, path: &Path) -> Result<TensorData> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, path)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(path, "bad magic (expected TGTS)"));
    }
    let version = read_u32(r, path)?;
    if version != TENSOR_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut dtype = [0u8; 1];
    read_exact(r, &mut dtype, path)?;
    let rank = read_u32(r, path)? as usize;
    if rank > 8 {
        return Err(Error::format(path, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r, path)? as usize);
    }
    let len: usize = shape.iter().product();
    match dtype[0] {
        DTYPE_F32 => {
            let mut buf = vec![0u8; len * 4];
            read_exact(r, &mut buf, path)?;
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), values)
                .map_err(|e| Error::format(path, e.to_string()))?;
            Ok(TensorData::F32(arr))
        }
        DTYPE_U8 => {
            let mut buf = vec![0u8; len];
            read_exact(r, &mut buf, path)?;
            let arr = ArrayD::from_shape_vec(IxDyn(&shape), buf)
                .map_err(|e| Error::format(path, e.to_string()))?;
            Ok(TensorData::U8(arr))
        }
        other => Err(Error::format(path, format!("unknown dtype code {other}"))),
    }
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(path, "truncated file"))
}
