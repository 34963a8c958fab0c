//! Binary checkpoint container of named f64 tensors grouped in sections.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "TPRL" | u32 version | u32 section count
//! per section: u32 name len, name, u32 tensor count
//!   per tensor: u32 name len, name, u32 rank, u32 dims[rank], f64 values
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPRL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &Matrix) -> Self {
        Self {
            name: name.into(),
            dims: vec![m.rows(), m.cols()],
            values: m.data().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Matrix::from_vec(*r, *c, self.values.clone()),
            [n] => Matrix::from_vec(1, *n, self.values.clone()),
            _ => Err(Error::dim("checkpoint", format!("tensor `{}` has rank {}", self.name, self.dims.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<Tensor>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tensors: Vec::new(),
        }
    }

    /// Every parameter of `module` whose dotted name satisfies `filter`.
    pub fn from_module(name: impl Into<String>, module: &dyn Module, filter: impl Fn(&str) -> bool) -> Self {
        let tensors = module
            .params()
            .into_iter()
            .filter(|(n, _)| filter(n))
            .map(|(n, p)| Tensor::from_matrix(n, &p.value))
            .collect();
        Self {
            name: name.into(),
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies tensors into the matching parameters of `module`. Every
    /// parameter selected by `filter` must be present with the same shape.
    pub fn load_into(&self, module: &mut dyn Module, filter: impl Fn(&str) -> bool) -> Result<()> {
        let mut used = 0;
        for (name, param) in module.params_mut() {
            if !filter(&name) {
                continue;
            }
            let t = self.get(&name).ok_or_else(|| Error::Format(format!("section `{}` lacks tensor `{name}`", self.name)))?;
            let m = t.to_matrix()?;
            if m.shape() != param.value.shape() {
                return Err(Error::dim(
                    "checkpoint",
                    format!("tensor `{name}` is {:?}, model expects {:?}", m.shape(), param.value.shape()),
                ));
            }
            param.value = m;
            used += 1;
        }
        if used != self.tensors.len() {
            return Err(Error::Format(format!(
                "section `{}` holds {} tensors, model consumed {used}",
                self.name,
                self.tensors.len()
            )));
        }
        Ok(())
    }
}

pub fn find<'a>(sections: &'a [Section], name: &str) -> Option<&'a Section> {
    sections.iter().find(|s| s.name == name)
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, len_u32(s.len(), "name")?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} length {n} exceeds u32")))
}

/// Serializes sections; names must be unique and values finite.
pub fn encode(sections: &[Section]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, len_u32(sections.len(), "section list")?);
    for s in sections {
        if !seen.insert(s.name.as_str()) {
            return Err(Error::Format(format!("duplicate section `{}`", s.name)));
        }
        put_str(&mut out, &s.name)?;
        put_u32(&mut out, len_u32(s.tensors.len(), "tensor list")?);
        for t in &s.tensors {
            if t.dims.iter().product::<usize>() != t.values.len() {
                return Err(Error::dim("checkpoint", format!("tensor `{}` dims disagree with value count", t.name)));
            }
            if let Some(_) = t.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    name: t.name.clone(),
                    phase: "checkpoint",
                });
            }
            put_str(&mut out, &t.name)?;
            put_u32(&mut out, len_u32(t.dims.len(), "rank")?);
            for &d in &t.dims {
                put_u32(&mut out, len_u32(d, "dimension")?);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what} at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Splits off and verifies the trailing CRC32, then checks magic and version.
pub(crate) fn open_container<'a>(bytes: &'a [u8], magic: &[u8], version: u32) -> Result<Reader<'a>> {
    if bytes.len() < magic.len() {
        return Err(Error::Truncated(format!("file is {} bytes", bytes.len())));
    }
    if &bytes[..magic.len()] != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..magic.len()]).into_owned(),
        });
    }
    if bytes.len() < magic.len() + 8 {
        return Err(Error::Truncated(format!("file is {} bytes", bytes.len())));
    }
    let found = u32::from_le_bytes(bytes[magic.len()..magic.len() + 4].try_into().unwrap());
    if found != version {
        return Err(Error::Version { found, expected: version });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader::new(body);
    r.take(magic.len() + 4, "header")?;
    Ok(r)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Section>> {
    let mut r = open_container(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let n_sections = r.u32("section count")?;
    let mut sections = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..n_sections {
        let name = r.string("section name")?;
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate section `{name}`")));
        }
        let n_tensors = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let tname = r.string("tensor name")?;
            let rank = r.u32("rank")? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let count = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.filter(|&c| c.saturating_mul(8) <= r.remaining()).ok_or_else(|| {
                Error::Truncated(format!("tensor `{tname}` declares more values than the file holds"))
            })?;
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(r.f64("tensor values")?);
            }
            tensors.push(Tensor {
                name: tname,
                dims,
                values,
            });
        }
        sections.push(Section { name, tensors });
    }
    if r.remaining() != 0 {
        return Err(Error::Format(format!("{} trailing bytes after last section", r.remaining())));
    }
    Ok(sections)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path.file_name().ok_or_else(|| Error::Format(format!("`{}` has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(sections: &[Section], path: &Path) -> Result<()> {
    write_atomic(path, &encode(sections)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Section>> {
    decode(&std::fs::read(path)?)
}
