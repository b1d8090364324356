//! `MNET1` parameter files.
//!
//! Layout: the five magic bytes, a little-endian `u32` parameter count, then
//! per parameter a `u32` name length, the UTF-8 name, `u32` rows, `u32` cols
//! and `rows * cols` little-endian `f64` values. The network configuration
//! lives next to it in a `.cfg` text file.

use std::path::{Path, PathBuf};

use super::model::{PolicyConfig, PolicyNet};
use super::params::ParamStore;
use super::tape::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"MNET1";

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.origin, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(buf: &[u8], origin: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0, origin };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::format(origin, "not an MNET1 checkpoint"));
    }
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(origin, "parameter name is not UTF-8"))?
            .to_string();
        let (rows, cols) = (r.u32()?, r.u32()?);
        let bytes = r.take(rows * cols * 8)?;
        let data = bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, Tensor { rows, cols, data }));
    }
    if r.pos != buf.len() {
        return Err(Error::format(origin, "trailing bytes after last parameter"));
    }
    Ok(out)
}

pub fn config_path(path: &Path) -> PathBuf {
    path.with_extension("cfg")
}

impl PolicyNet {
    /// Writes parameters to `path` and the configuration beside it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, encode(&self.params)).map_err(|e| Error::io(path, e))?;
        let cp = config_path(path);
        std::fs::write(&cp, self.cfg.to_text()).map_err(|e| Error::io(&cp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cp = config_path(path);
        let text = std::fs::read_to_string(&cp).map_err(|e| Error::io(&cp, e))?;
        let cfg = PolicyConfig::parse(&text, &cp.display().to_string())?;
        let mut net = PolicyNet::new(cfg, 0)?;
        net.load_params(path)?;
        Ok(net)
    }

    /// Loads parameter values by name into this network's layout.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let entries = decode(&buf, &path.display().to_string())?;
        self.params.assign(&entries)
    }
}
