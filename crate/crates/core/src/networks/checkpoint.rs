//! Binary checkpoint format.
//!
//! ```text
//! "SACX" | u32 version | u32 entry count
//! per entry: u16 name length | UTF-8 name | u8 rank | u32 extent × rank | f32 × numel
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::diffcore::{ParamSet, Tensor};
use crate::error::{contract_err, Error, Result};

pub const MAGIC: &[u8; 4] = b"SACX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub entries: Vec<Entry>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            entries: Vec::new(),
        }
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends every tensor of `params` under `prefix.`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.entries.push(Entry {
                name: format!("{prefix}.{name}"),
                shape: t.shape().to_vec(),
                values: t.data().iter().map(|&x| x as f32).collect(),
            });
        }
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Copies the `prefix.` entries into `params`. Nothing is written unless
    /// every tensor is present with a matching shape.
    pub fn restore(&self, prefix: &str, params: &mut ParamSet) -> Result<()> {
        let mut staged = Vec::with_capacity(params.len());
        for (name, t) in params.iter() {
            let key = format!("{prefix}.{name}");
            let e = self
                .entry(&key)
                .ok_or_else(|| contract_err!("checkpoint has no entry {key}"))?;
            if e.shape != t.shape() {
                return Err(contract_err!(
                    "entry {key} has shape {:?}, expected {:?}",
                    e.shape,
                    t.shape()
                ));
            }
            staged.push(e.values.iter().map(|&x| f64::from(x)).collect::<Vec<_>>());
        }
        for (t, v) in params.tensors_mut().iter_mut().zip(staged) {
            t.data_mut().copy_from_slice(&v);
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let e = self.entry(name)?;
        Tensor::new(&e.shape, e.values.iter().map(|&x| f64::from(x)).collect()).ok()
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ckpt.format_version.to_le_bytes());
    out.extend_from_slice(&(ckpt.entries.len() as u32).to_le_bytes());
    for e in &ckpt.entries {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| contract_err!("entry name too long"))?;
        let rank = u8::try_from(e.shape.len()).map_err(|_| contract_err!("rank too large"))?;
        let numel: usize = e.shape.iter().product();
        if numel != e.values.len() {
            return Err(contract_err!("entry {} shape does not match its values", e.name));
        }
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(rank);
        for &d in &e.shape {
            let d = u32::try_from(d).map_err(|_| contract_err!("extent too large"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &e.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic bytes".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len as usize, "name")?)
            .map_err(|_| Error::Format {
                offset: at,
                msg: "name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.take(1, "rank")?[0];
        let shape = (0..rank)
            .map(|_| r.u32("extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 4, "payload")?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        entries.push(Entry { name, shape, values });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: "trailing bytes after last entry".into(),
        });
    }
    Ok(Checkpoint {
        format_version: version,
        entries,
    })
}

/// Writes to a temporary sibling then renames over `path`.
pub fn checkpoint_save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    crate::harness::write_atomic(path, &encode(ckpt)?)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
