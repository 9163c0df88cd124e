//! Versioned container of named arrays, used for weights and snapshots.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes  "TAPERNT\0"
//! order      u8       1 = little endian, 2 = big endian (all later integers and floats)
//! version    u32
//! count      u32      number of entries
//! entry*:
//!   name_len u32, name utf-8
//!   dtype    u8       1 = f32, 2 = f64, 3 = u64, 4 = utf-8 text
//!   ndim     u32, dims u64 * ndim   (text: ndim = 1, dims = [byte length])
//!   payload  prod(dims) elements
//! ```
//!
//! Writers always emit little endian; readers accept both orders.

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"TAPERNT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U64 { shape: Vec<usize>, data: Vec<u64> },
    Text(String),
}

impl Entry {
    fn dtype(&self) -> u8 {
        match self {
            Entry::F32 { .. } => 1,
            Entry::F64 { .. } => 2,
            Entry::U64 { .. } => 3,
            Entry::Text(_) => 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, Entry)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = entry,
            None => self.entries.push((name, entry)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    pub fn insert_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.insert_reals(name, t.shape().to_vec(), t.data());
    }

    #[cfg(not(feature = "f32"))]
    pub fn insert_reals(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[Real]) {
        self.insert(name, Entry::F64 { shape, data: data.to_vec() });
    }

    #[cfg(feature = "f32")]
    pub fn insert_reals(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[Real]) {
        self.insert(name, Entry::F32 { shape, data: data.to_vec() });
    }

    /// Reads a float entry of either precision as a tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        match self.require(name)? {
            Entry::F32 { shape, data } => Tensor::new(shape.clone(), data.iter().map(|&v| v as Real).collect()),
            Entry::F64 { shape, data } => Tensor::new(shape.clone(), data.iter().map(|&v| v as Real).collect()),
            _ => Err(Error::Format(format!("entry `{name}` is not a float array"))),
        }
    }

    pub fn reals(&self, name: &str) -> Result<Vec<Real>> {
        Ok(self.tensor(name)?.into_data())
    }

    pub fn insert_u64s(&mut self, name: impl Into<String>, data: &[u64]) {
        self.insert(
            name,
            Entry::U64 {
                shape: vec![data.len()],
                data: data.to_vec(),
            },
        );
    }

    pub fn u64s(&self, name: &str) -> Result<Vec<u64>> {
        match self.require(name)? {
            Entry::U64 { data, .. } => Ok(data.clone()),
            _ => Err(Error::Format(format!("entry `{name}` is not a u64 array"))),
        }
    }

    pub fn u64(&self, name: &str) -> Result<u64> {
        match self.u64s(name)?.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::Format(format!("entry `{name}` holds {} values, expected 1", other.len()))),
        }
    }

    pub fn insert_text(&mut self, name: impl Into<String>, text: &str) {
        self.insert(name, Entry::Text(text.to_string()));
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.require(name)? {
            Entry::Text(s) => Ok(s),
            _ => Err(Error::Format(format!("entry `{name}` is not text"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        type E = LittleEndian;
        w.write_all(MAGIC)?;
        w.write_u8(1)?;
        w.write_u32::<E>(VERSION)?;
        w.write_u32::<E>(self.entries.len() as u32)?;
        for (name, entry) in &self.entries {
            w.write_u32::<E>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(entry.dtype())?;
            let shape = match entry {
                Entry::F32 { shape, .. } | Entry::F64 { shape, .. } | Entry::U64 { shape, .. } => shape.clone(),
                Entry::Text(s) => vec![s.len()],
            };
            w.write_u32::<E>(shape.len() as u32)?;
            for d in shape {
                w.write_u64::<E>(d as u64)?;
            }
            match entry {
                Entry::F32 { data, .. } => data.iter().try_for_each(|v| w.write_f32::<E>(*v))?,
                Entry::F64 { data, .. } => data.iter().try_for_each(|v| w.write_f64::<E>(*v))?,
                Entry::U64 { data, .. } => data.iter().try_for_each(|v| w.write_u64::<E>(*v))?,
                Entry::Text(s) => w.write_all(s.as_bytes())?,
            }
        }
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not a tensor container".into()));
        }
        match r.read_u8().map_err(truncated)? {
            1 => read_entries::<LittleEndian>(&mut r, bytes.len()),
            2 => read_entries::<BigEndian>(&mut r, bytes.len()),
            o => Err(Error::Format(format!("unknown byte order flag {o}"))),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Format("unexpected end of data".into())
}

fn read_entries<B: ByteOrder>(r: &mut Cursor<&[u8]>, total: usize) -> Result<Container> {
    let version = r.read_u32::<B>().map_err(truncated)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<B>().map_err(truncated)?;
    let mut c = Container::new();
    for _ in 0..count {
        let len = r.read_u32::<B>().map_err(truncated)? as usize;
        let mut name = vec![0u8; len.min(total)];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("entry name is not utf-8".into()))?;
        let dtype = r.read_u8().map_err(truncated)?;
        let ndim = r.read_u32::<B>().map_err(truncated)? as usize;
        if ndim > 16 {
            return Err(Error::Format(format!("entry `{name}`: {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u64::<B>().map_err(truncated)? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let width = match dtype {
            1 => 4,
            2 | 3 => 8,
            4 => 1,
            d => return Err(Error::Format(format!("entry `{name}`: unknown dtype {d}"))),
        };
        let remaining = total - r.position() as usize;
        let n = match n {
            Some(n) if n.checked_mul(width).is_some_and(|b| b <= remaining) => n,
            _ => return Err(Error::Format(format!("entry `{name}`: payload exceeds file size"))),
        };
        let entry = match dtype {
            1 => {
                let mut data = vec![0f32; n];
                r.read_f32_into::<B>(&mut data).map_err(truncated)?;
                Entry::F32 { shape, data }
            }
            2 => {
                let mut data = vec![0f64; n];
                r.read_f64_into::<B>(&mut data).map_err(truncated)?;
                Entry::F64 { shape, data }
            }
            3 => {
                let mut data = vec![0u64; n];
                r.read_u64_into::<B>(&mut data).map_err(truncated)?;
                Entry::U64 { shape, data }
            }
            _ => {
                let mut buf = vec![0u8; n];
                r.read_exact(&mut buf).map_err(truncated)?;
                Entry::Text(String::from_utf8(buf).map_err(|_| Error::Format(format!("entry `{name}` is not utf-8")))?)
            }
        };
        c.insert(name, entry);
    }
    Ok(c)
}
