//! The `.eplv` volume file format shared by all tools.
//!
//! Layout: magic `EPLV` (4 bytes), version `u16` LE (= 1), dtype `u8`
//! (1 = f32, 2 = f64, 3 = u8 labels), rank `u8`, `rank x u32` LE extents,
//! then the row-major payload in little-endian order. Round-trips are
//! bit-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"EPLV";
pub const VERSION: u16 = 1;
pub const MAX_RANK: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Dtype> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            3 => Ok(Dtype::U8),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Either payload kind a volume file can carry.
#[derive(Debug, Clone)]
pub enum Volume {
    Tensor(Tensor),
    Labels(LabelVolume),
}

impl Volume {
    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Volume::Tensor(t) => Ok(t),
            Volume::Labels(_) => Err(Error::Format("expected a float volume, got labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Labels(l) => Ok(l),
            Volume::Tensor(_) => Err(Error::Format("expected a label volume, got floats".into())),
        }
    }
}

fn write_header<W: Write>(out: &mut W, dtype: Dtype, shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return Err(Error::Format(format!(
            "rank {} exceeds maximum {MAX_RANK}",
            shape.len()
        )));
    }
    out.write_all(&MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&[dtype as u8, shape.len() as u8])?;
    for &e in shape {
        if e > u32::MAX as usize {
            return Err(Error::Format(format!("extent {e} does not fit in u32")));
        }
        out.write_all(&(e as u32).to_le_bytes())?;
    }
    Ok(())
}

/// Write one tensor frame into any stream (also the in-file layout).
pub fn write_tensor_to<W: Write>(out: &mut W, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    if dtype == Dtype::U8 {
        return Err(Error::Format("use write_labels for u8 payloads".into()));
    }
    write_header(out, dtype, tensor.shape())?;
    match dtype {
        Dtype::F32 => {
            for &v in tensor.data() {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Dtype::F64 => {
            for &v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::U8 => unreachable!(),
    }
    Ok(())
}

/// Write a float tensor with the given payload width.
pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write_tensor_to(&mut out, tensor, dtype)?;
    out.flush()?;
    Ok(())
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    let dims = labels.dims();
    write_header(&mut out, Dtype::U8, &[dims[0], dims[1], dims[2]])?;
    out.write_all(labels.data())?;
    out.flush()?;
    Ok(())
}

/// Read one volume frame from a stream.
pub fn read_from<R: Read>(input: &mut R) -> Result<Volume> {
    let mut magic = [0u8; 4];
    read_exact(input, &mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut buf2 = [0u8; 2];
    read_exact(input, &mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut buf = [0u8; 2];
    read_exact(input, &mut buf)?;
    let dtype = Dtype::from_code(buf[0])?;
    let rank = buf[1] as usize;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("rank {rank} exceeds maximum {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b4 = [0u8; 4];
        read_exact(input, &mut b4)?;
        shape.push(u32::from_le_bytes(b4) as usize);
    }
    let count: usize = shape.iter().product();
    let mut payload = vec![0u8; count * dtype.size()];
    read_exact(input, &mut payload)?;

    match dtype {
        Dtype::F32 => {
            let data: Vec<f64> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            Ok(Volume::Tensor(Tensor::from_vec(data, &shape)?))
        }
        Dtype::F64 => {
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Volume::Tensor(Tensor::from_vec(data, &shape)?))
        }
        Dtype::U8 => {
            if rank != 3 {
                return Err(Error::Format(format!(
                    "label volumes must be rank 3, got {rank}"
                )));
            }
            Ok(Volume::Labels(LabelVolume::new(
                [shape[0], shape[1], shape[2]],
                payload,
            )?))
        }
    }
}

/// Read any volume file; the dtype in the header decides the payload kind.
pub fn read(path: &Path) -> Result<Volume> {
    let file = File::open(path)?;
    let mut input = BufReader::new(file);
    let volume = read_from(&mut input)?;
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(volume)
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input
        .read_exact(buf)
        .map_err(|_| Error::Format("truncated file".into()))
}
