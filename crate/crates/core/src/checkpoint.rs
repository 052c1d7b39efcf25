//! `NTF1` tensor checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "NTF1"  u32 entry_count
//! per entry: u16 name_len, name (UTF-8), u8 dtype (0 = f32, 1 = f64),
//!            u8 rank, rank × u32 dims, raw payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NTF1";

/// Payload of one entry, kept in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn to_scalar<T: Scalar>(&self) -> Vec<T> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        let dims = t.shape().iter().map(|&d| d as u32).collect();
        let mut raw = Vec::with_capacity(t.len() * T::DTYPE.size_of());
        t.data().iter().for_each(|v| v.write_le(&mut raw));
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
        };
        Self {
            name: name.to_string(),
            dims,
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let shape: Vec<usize> = self.dims.iter().map(|&d| d as usize).collect();
        if shape.is_empty() {
            return Ok(Tensor::scalar(self.data.to_scalar::<T>()[0]));
        }
        Tensor::from_vec(&shape, self.data.to_scalar())
    }
}

pub fn write_entries<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let name = e.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("name too long: {}", e.name)))?;
        let rank = u8::try_from(e.dims.len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {}", e.name)))?;
        let expected: u64 = e.dims.iter().map(|&d| d as u64).product();
        if expected != e.data.len() as u64 {
            return Err(Error::Checkpoint(format!(
                "{}: dims {:?} do not match payload length {}",
                e.name,
                e.dims,
                e.data.len()
            )));
        }
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(e.data.dtype().code());
        buf.push(rank);
        for d in &e.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v.iter().for_each(|x| x.write_le(&mut buf)),
            TensorData::F64(v) => v.iter().for_each(|x| x.write_le(&mut buf)),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_entries<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let count = c.u32()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("name not UTF-8: {e}")))?
            .to_string();
        let dtype = DType::from_code(c.u8()?)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: unknown dtype")))?;
        let rank = c.u8()? as usize;
        let dims = (0..rank).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().map(|&d| d as usize).product();
        let raw = c.take(n * dtype.size_of())?;
        let data = match dtype {
            DType::F32 => TensorData::F32(raw.chunks_exact(4).map(f32::read_le).collect()),
            DType::F64 => TensorData::F64(raw.chunks_exact(8).map(f64::read_le).collect()),
        };
        entries.push(Entry { name, dims, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - c.pos
        )));
    }
    Ok(entries)
}

pub fn store_entries<T: Scalar>(store: &ParamStore<T>) -> Vec<Entry> {
    store
        .iter()
        .map(|(name, p)| Entry::from_tensor(name, &p.value))
        .collect()
}

pub fn save_store<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_entries(std::io::BufWriter::new(file), &store_entries(store))
}

/// Overwrites every parameter of `store` from the file. Every parameter
/// must be present with a matching shape; extra entries are an error.
pub fn load_into<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<()> {
    let entries = read_entries(std::io::BufReader::new(std::fs::File::open(path)?))?;
    apply_entries(store, &entries)
}

pub fn apply_entries<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for e in entries {
        store.set(&e.name, e.to_tensor()?)?;
    }
    Ok(())
}
