//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian `u32`, floats little-endian `f64`):
//!
//! ```text
//! magic "DAQT" | version | dim | tracker1 layers | tracker2 layers
//! config length | config JSON bytes
//! parameter count
//! per parameter: name length | name bytes | rows | cols | rows*cols values
//! ```

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor2};
use crate::tracker::{Engine, EngineConfig, EngineKind};

pub const MAGIC: &[u8; 4] = b"DAQT";
pub const VERSION: u32 = 1;

/// Appends one tensor as `rows | cols | values`.
pub fn write_tensor(out: &mut Vec<u8>, t: &Tensor2) {
    out.extend((t.rows() as u32).to_le_bytes());
    out.extend((t.cols() as u32).to_le_bytes());
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                format!("byte {}", self.pos),
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub fn bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    pub fn tensor(&mut self, what: &str) -> Result<Tensor2> {
        let rows = self.u32(what)? as usize;
        let cols = self.u32(what)? as usize;
        let raw = self.take(rows * cols * 8, what)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor2::new(rows, cols, data).map_err(|e| Error::parse(what.to_string(), e.to_string()))
    }

    pub fn finished(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn engine_to_bytes(engine: &Engine) -> Vec<u8> {
    let cfg = &engine.config;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((cfg.dim as u32).to_le_bytes());
    out.extend((cfg.layers as u32).to_le_bytes());
    let t2 = if cfg.kind == EngineKind::Daq { cfg.layers } else { 0 };
    out.extend((t2 as u32).to_le_bytes());
    let json = serde_json::to_vec(cfg).expect("config serializes");
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(&json);
    out.extend((engine.params.len() as u32).to_le_bytes());
    for (name, p) in engine.params.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        write_tensor(&mut out, &p.value);
    }
    out
}

pub fn engine_from_bytes(bytes: &[u8]) -> Result<Engine> {
    let mut r = Reader::new(bytes);
    if r.bytes(4, "magic")? != MAGIC {
        return Err(Error::parse("header", "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse("header", format!("unsupported checkpoint version {version}")));
    }
    let dim = r.u32("dim")? as usize;
    let l1 = r.u32("layer count")? as usize;
    let l2 = r.u32("layer count")? as usize;
    let n = r.u32("config length")? as usize;
    let cfg: EngineConfig = serde_json::from_slice(r.bytes(n, "config")?)
        .map_err(|e| Error::parse("config", e.to_string()))?;
    let expect_l2 = if cfg.kind == EngineKind::Daq { cfg.layers } else { 0 };
    if cfg.dim != dim || cfg.layers != l1 || l2 != expect_l2 {
        return Err(Error::parse("header", "header disagrees with embedded config"));
    }
    cfg.validate()?;
    let count = r.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.bytes(len, "name")?)
            .map_err(|e| Error::parse("parameter name", e.to_string()))?
            .to_string();
        let t = r.tensor(&name)?;
        params
            .insert(name.clone(), t)
            .map_err(|e| Error::parse(format!("parameter {name}"), e.to_string()))?;
    }
    if !r.finished() {
        return Err(Error::parse("trailer", "unexpected bytes after last parameter"));
    }
    let reference = Engine::new(cfg.clone(), 0)?;
    for (name, p) in reference.params.iter() {
        let got = params
            .get(name)
            .map_err(|_| Error::parse("parameters", format!("missing parameter {name}")))?;
        if got.shape() != p.value.shape() {
            return Err(Error::parse(format!("parameter {name}"), "shape mismatch"));
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::parse("parameters", "unexpected extra parameters"));
    }
    Ok(Engine::from_parts(cfg, params))
}
