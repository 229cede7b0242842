//! Little-endian named-tensor container shared by checkpoints (`CPE1`) and
//! golden fixtures (`CPF1`).
//!
//! ```text
//! magic        [u8; 4]
//! version      u32                      currently 1
//! meta_len     u32
//! meta         [u8; meta_len]           format-specific block
//! count        u32
//! entries      count × { name_len u16, name [u8], dtype u8 (0 = f32),
//!                        rank u8, dims [u32; rank], offset u64 }
//! payloads     f32 LE, each starting on a 64-byte file offset
//! ```
//!
//! The file ends exactly where the last payload ends.

use std::{collections::BTreeMap, fs, io, path::Path};

use cpe_core::{Model, ModelConfig, NamedTensor, ParamStore};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CPE1";
pub const FIXTURE_MAGIC: [u8; 4] = *b"CPF1";
pub const FORMAT_VERSION: u32 = 1;
pub const PAYLOAD_ALIGN: u64 = 64;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated file: {what} needs bytes {start}..{end} but the file has {len}")]
    Truncated { what: String, start: u64, end: u64, len: u64 },
    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),
    #[error("payload of tensor `{first}` overlaps payload of tensor `{second}`")]
    Overlap { first: String, second: String },
    #[error("payload of tensor `{name}` starts at {offset}, not a multiple of 64")]
    Misaligned { name: String, offset: u64 },
    #[error("tensor `{name}` has unsupported dtype code {code}")]
    Dtype { name: String, code: u8 },
    #[error("tensor name is not valid UTF-8 (entry {0})")]
    Name(usize),
    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("file is {len} bytes but the tensor table ends at {expected}")]
    Length { len: u64, expected: u64 },
    #[error("invalid metadata block: {0}")]
    Meta(String),
    #[error("tensor `{0}` is not part of the model")]
    Unexpected(String),
    #[error("{0}")]
    Model(#[from] cpe_core::Error),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl FormatError {
    /// Filesystem failures, as opposed to malformed content.
    pub fn is_io(&self) -> bool {
        matches!(self, FormatError::Io(_))
    }
}

fn align_up(v: u64) -> u64 {
    v.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN
}

/// Serialize `tensors` (in store order) behind `magic` and `meta`.
pub fn encode(magic: [u8; 4], meta: &[u8], tensors: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());

    let table_len: u64 = tensors
        .iter()
        .map(|(name, t)| 2 + name.len() as u64 + 2 + 4 * t.dims.len() as u64 + 8)
        .sum();
    let mut offset = align_up(out.len() as u64 + table_len);
    let mut offsets = Vec::with_capacity(tensors.len());
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offsets.push(offset);
        offset = align_up(offset + 4 * t.data.len() as u64);
    }
    for ((_, t), off) in tensors.iter().zip(offsets) {
        out.resize(off as usize, 0);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(FormatError::Truncated {
                what: what.to_string(),
                start: self.pos as u64,
                end: end as u64,
                len: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32, FormatError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String, FormatError> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| FormatError::Meta(format!("{what} is not UTF-8")))
    }
}

/// A decoded container.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: Vec<u8>,
    pub tensors: ParamStore,
}

/// Parse and structurally validate a container with the given magic.
pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<TensorFile, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let found = r.take(4, "magic")?;
    if found != magic {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(&magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::Version(version));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.take(meta_len, "metadata block")?.to_vec();
    let count = r.u32("tensor count")? as usize;

    struct Entry {
        name: String,
        dims: Vec<usize>,
        offset: u64,
        len: u64,
    }
    let mut entries: Vec<Entry> = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeMap::new();
    for i in 0..count {
        let n = r.u16("tensor table")? as usize;
        let name = std::str::from_utf8(r.take(n, "tensor table")?)
            .map_err(|_| FormatError::Name(i))?
            .to_string();
        let dtype = r.u8("tensor table")?;
        if dtype != DTYPE_F32 {
            return Err(FormatError::Dtype { name, code: dtype });
        }
        let rank = r.u8("tensor table")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("tensor table").map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64("tensor table")?;
        if seen.insert(name.clone(), i).is_some() {
            return Err(FormatError::DuplicateName(name));
        }
        if offset % PAYLOAD_ALIGN != 0 {
            return Err(FormatError::Misaligned { name, offset });
        }
        let len = 4 * dims.iter().product::<usize>() as u64;
        entries.push(Entry { name, dims, offset, len });
    }
    let table_end = r.pos as u64;

    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by_key(|&i| entries[i].offset);
    let mut prev: Option<usize> = None;
    for &i in &order {
        let e = &entries[i];
        if e.offset < table_end {
            return Err(FormatError::Overlap {
                first: String::from("<header>"),
                second: e.name.clone(),
            });
        }
        if let Some(p) = prev {
            let pe = &entries[p];
            if e.offset < pe.offset + pe.len {
                return Err(FormatError::Overlap {
                    first: pe.name.clone(),
                    second: e.name.clone(),
                });
            }
        }
        if e.offset + e.len > bytes.len() as u64 {
            return Err(FormatError::Truncated {
                what: format!("payload of `{}`", e.name),
                start: e.offset,
                end: e.offset + e.len,
                len: bytes.len() as u64,
            });
        }
        prev = Some(i);
    }
    let expected = order
        .last()
        .map_or(table_end, |&i| entries[i].offset + entries[i].len);
    if bytes.len() as u64 != expected {
        return Err(FormatError::Length {
            len: bytes.len() as u64,
            expected,
        });
    }

    let mut tensors = ParamStore::new();
    for e in entries {
        let raw = &bytes[e.offset as usize..(e.offset + e.len) as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(e.name));
        }
        let t = NamedTensor::new(e.dims, data)?;
        tensors.insert(e.name, t)?;
    }
    Ok(TensorFile { meta, tensors })
}

/// Model weights plus the configuration and seed that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
}

const CONFIG_BLOCK_LEN: usize = 7 * 4 + 4 + 4 + 8;

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64) -> Result<Self, FormatError> {
        Ok(Checkpoint {
            config: model.config,
            seed,
            params: model.to_store()?,
        })
    }

    /// Deterministic random initialization.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self, FormatError> {
        Self::from_model(&Model::seeded(config, seed)?, seed)
    }

    fn config_block(&self) -> Vec<u8> {
        let c = &self.config;
        let mut b = Vec::with_capacity(CONFIG_BLOCK_LEN);
        for v in [c.base_size, c.levels, c.base_channels, c.depth, c.growth, c.head_channels, c.head_outputs] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.extend_from_slice(&c.sigma.to_le_bytes());
        b.extend_from_slice(&u32::from(c.proj_bias).to_le_bytes());
        b.extend_from_slice(&self.seed.to_le_bytes());
        b
    }

    fn parse_config(meta: &[u8]) -> Result<(ModelConfig, u64), FormatError> {
        if meta.len() != CONFIG_BLOCK_LEN {
            return Err(FormatError::Meta(format!(
                "config block is {} bytes, expected {CONFIG_BLOCK_LEN}",
                meta.len()
            )));
        }
        let mut r = Reader { bytes: meta, pos: 0 };
        let mut u = || r.u32("config").map(|v| v as usize);
        let (base_size, levels, base_channels, depth, growth, head_channels, head_outputs) =
            (u()?, u()?, u()?, u()?, u()?, u()?, u()?);
        let sigma = r.f32("config")?;
        let proj_bias = match r.u32("config")? {
            0 => false,
            1 => true,
            v => return Err(FormatError::Meta(format!("proj_bias flag {v} is not 0 or 1"))),
        };
        let seed = r.u64("config")?;
        let config = ModelConfig {
            base_size,
            levels,
            base_channels,
            depth,
            growth,
            head_channels,
            head_outputs,
            sigma,
            proj_bias,
        };
        config.validate()?;
        Ok((config, seed))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(CHECKPOINT_MAGIC, &self.config_block(), &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let file = decode(bytes, CHECKPOINT_MAGIC)?;
        let (config, seed) = Self::parse_config(&file.meta)?;
        Ok(Checkpoint {
            config,
            seed,
            params: file.tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Build the model, requiring every schema tensor exactly once and
    /// nothing else.
    pub fn model(&self) -> Result<Model, FormatError> {
        let schema = Model::schema(&self.config);
        let known: std::collections::BTreeSet<&str> = schema.iter().map(|s| s.name.as_str()).collect();
        if let Some(extra) = self.params.names().find(|n| !known.contains(n)) {
            return Err(FormatError::Unexpected(extra.to_string()));
        }
        Ok(Model::from_store(self.config, &self.params)?)
    }
}

/// Golden fixture: an op name, a tolerance, free-form attributes, and the
/// tensors `input` / `input/*`, `params/*`, `expected` / `expected/*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub op: String,
    pub tolerance: f32,
    pub attrs: BTreeMap<String, String>,
    pub tensors: ParamStore,
}

impl Fixture {
    pub fn new(op: impl Into<String>, tolerance: f32) -> Self {
        Fixture {
            op: op.into(),
            tolerance,
            attrs: BTreeMap::new(),
            tensors: ParamStore::new(),
        }
    }

    pub fn attr(mut self, key: &str, value: impl ToString) -> Self {
        self.attrs.insert(key.to_string(), value.to_string());
        self
    }

    fn meta(&self) -> Vec<u8> {
        let mut b = Vec::new();
        let put = |b: &mut Vec<u8>, s: &str| {
            b.extend_from_slice(&(s.len() as u16).to_le_bytes());
            b.extend_from_slice(s.as_bytes());
        };
        put(&mut b, &self.op);
        b.extend_from_slice(&self.tolerance.to_le_bytes());
        b.extend_from_slice(&(self.attrs.len() as u32).to_le_bytes());
        for (k, v) in &self.attrs {
            put(&mut b, k);
            put(&mut b, v);
        }
        b
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(FIXTURE_MAGIC, &self.meta(), &self.tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let file = decode(bytes, FIXTURE_MAGIC)?;
        let mut r = Reader {
            bytes: &file.meta,
            pos: 0,
        };
        let op = r.string("op name")?;
        let tolerance = r.f32("tolerance")?;
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(FormatError::Meta(format!("tolerance {tolerance} must be positive")));
        }
        let n = r.u32("attribute count")?;
        let mut attrs = BTreeMap::new();
        for _ in 0..n {
            let k = r.string("attribute key")?;
            let v = r.string("attribute value")?;
            attrs.insert(k, v);
        }
        if r.pos != file.meta.len() {
            return Err(FormatError::Meta(String::from("trailing bytes after attributes")));
        }
        Ok(Fixture {
            op,
            tolerance,
            attrs,
            tensors: file.tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), FormatError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", NamedTensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap()).unwrap();
        s.insert("b/c", NamedTensor::scalar(-1.5)).unwrap();
        s
    }

    #[test]
    fn container_round_trip_and_alignment() {
        let bytes = encode(CHECKPOINT_MAGIC, b"meta", &store());
        let f = decode(&bytes, CHECKPOINT_MAGIC).unwrap();
        assert_eq!(f.meta, b"meta");
        assert_eq!(f.tensors, store());
        assert!(matches!(decode(&bytes, FIXTURE_MAGIC), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn empty_container() {
        let bytes = encode(FIXTURE_MAGIC, b"", &ParamStore::new());
        assert!(decode(&bytes, FIXTURE_MAGIC).unwrap().tensors.is_empty());
    }
}
