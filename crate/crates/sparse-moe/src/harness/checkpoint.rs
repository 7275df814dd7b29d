//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!   magic  4 bytes  "SMOE"
//!   version u32
//!   config_len u32, then config_len bytes of the run config as TOML
//!   param_count u32
//!   per parameter: name_len u32, name bytes (UTF-8),
//!                  rows u32, cols u32, rows*cols f64 values
//!
//! The config echo makes a checkpoint self-describing: evaluation rebuilds
//! the corpus and model shapes from it without the original config file.

use crate::error::{Error, Result};
use crate::harness::config::ToyLmConfig;
use crate::kernel::Matrix;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"SMOE";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("field {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn save(path: &Path, cfg: &ToyLmConfig, params: &[(String, &Matrix)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_text = cfg.to_toml()?;
    put_u32(&mut out, cfg_text.len())?;
    out.extend_from_slice(cfg_text.as_bytes());
    put_u32(&mut out, params.len())?;
    for (name, m) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Checkpoint(format!("create {}: {e}", path.display())))?;
    file.write_all(&out)
        .map_err(|e| Error::Checkpoint(format!("write {}: {e}", path.display())))?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    at: usize,
}

impl Reader {
    fn take(&mut self, len: usize, what: &str) -> Result<&[u8]> {
        if self.at + len > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} ({len} bytes at offset {})",
                self.at
            )));
        }
        let slice = &self.buf[self.at..self.at + len];
        self.at += len;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn load(path: &Path) -> Result<(ToyLmConfig, Vec<(String, Matrix)>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("open {}: {e}", path.display())))?
        .read_to_end(&mut buf)
        .map_err(|e| Error::Checkpoint(format!("read {}: {e}", path.display())))?;
    let mut r = Reader { buf, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "version {version}, this build reads {VERSION}"
        )));
    }
    let cfg_len = r.u32("config length")?;
    let cfg_text = std::str::from_utf8(r.take(cfg_len, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config not UTF-8: {e}")))?
        .to_string();
    let cfg = ToyLmConfig::from_toml(&cfg_text)?;
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("name not UTF-8: {e}")))?
            .to_string();
        let rows = r.u32("rows")?;
        let cols = r.u32("cols")?;
        let data = r.take(rows * cols * 8, "values")?;
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        params.push((name, Matrix::from_vec(rows, cols, values)?));
    }
    if r.at != r.buf.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            r.buf.len() - r.at
        )));
    }
    Ok((cfg, params))
}
