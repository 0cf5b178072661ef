//! Checkpoint container.
//!
//! Layout, all text lines `\n`-terminated:
//!
//! ```text
//! MBPTRACK-CHECKPOINT 1
//! config <byte count>
//! <run config as TOML>
//! params <count>
//! param <name> <rows> <cols>
//! <rows·cols little-endian f64 values, row-major>
//! ...
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::model::Model;
use crate::tensor::Matrix;
use crate::{Error, Result};

pub const MAGIC: &str = "MBPTRACK-CHECKPOINT 1";

pub fn encode(config: &RunConfig, model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    let toml = config.to_toml();
    out.extend_from_slice(format!("{MAGIC}\nconfig {}\n", toml.len()).as_bytes());
    out.extend_from_slice(toml.as_bytes());
    out.extend_from_slice(format!("params {}\n", model.params.len()).as_bytes());
    for (_, name, m) in model.params.iter() {
        out.extend_from_slice(format!("param {name} {} {}\n", m.rows(), m.cols()).as_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.buf[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("truncated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} more bytes"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

fn field<'a>(line: &'a str, key: &str) -> Result<Vec<&'a str>> {
    let mut parts = line.split(' ');
    if parts.next() != Some(key) {
        return Err(Error::Checkpoint(format!(
            "expected `{key}` line, found {line:?}"
        )));
    }
    Ok(parts.collect())
}

fn count(s: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("bad count {s:?}")))
}

/// Rebuilds the configured model and loads every stored parameter into it.
pub fn decode(bytes: &[u8]) -> Result<(RunConfig, Model)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.line()?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let cfg_len = count(field(r.line()?, "config")?.first().copied().unwrap_or(""))?;
    let text = std::str::from_utf8(r.bytes(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = RunConfig::from_toml_str(text)?;
    let mut model = Model::new(config.model_config(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let n = count(field(r.line()?, "params")?.first().copied().unwrap_or(""))?;
    if n != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "{n} parameters stored, model has {}",
            model.params.len()
        )));
    }
    for _ in 0..n {
        let f = field(r.line()?, "param")?;
        let [name, rows, cols] = f[..] else {
            return Err(Error::Checkpoint(format!("bad param header {f:?}")));
        };
        let (rows, cols) = (count(rows)?, count(cols)?);
        let raw = r.bytes(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        model
            .params
            .set(name, Matrix::from_vec(rows, cols, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok((config, model))
}

pub fn save(path: &Path, config: &RunConfig, model: &Model) -> Result<()> {
    std::fs::write(path, encode(config, model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(RunConfig, Model)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            num_seeds: 12,
            channels: 8,
            backbone_widths: vec![8],
            backbone_k: 4,
            group_k: 4,
            attn_dim: 8,
            ffn_hidden: 8,
            num_proposals: 4,
            grid_x: 2,
            grid_y: 2,
            grid_z: 2,
            ref_k: 3,
            crop_size: 32,
            ..RunConfig::default()
        }
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let cfg = small();
        let model = Model::new(cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bytes = encode(&cfg, &model);
        let (c2, m2) = decode(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert_eq!(m2.params, model.params);
        assert_eq!(encode(&c2, &m2), bytes);
    }

    #[test]
    fn corruption_detected() {
        let cfg = small();
        let model = Model::new(cfg.model_config(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let bytes = encode(&cfg, &model);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        assert!(decode(b"NOT A CHECKPOINT\n").is_err());
    }
}
