//! `VPAR1` parameter containers.
//!
//! Layout: a `VPAR1` line, any number of `meta <key> <value>` lines, a
//! `blocks K` line, then `K` blocks, each a `block <name> <rank> <dims...>`
//! line followed by the block's values as little-endian f64.

use std::fs;
use std::path::Path;

use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::volume::write_atomic;

pub const CHECKPOINT_MAGIC: &str = "VPAR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Block {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("bad block name {name:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "block {name}: shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: KvConfig,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut head = format!("{CHECKPOINT_MAGIC}\n");
        for (k, v) in self.meta.iter() {
            head.push_str(&format!("meta {k} {v}\n"));
        }
        head.push_str(&format!("blocks {}\n", self.blocks.len()));
        let mut buf = head.into_bytes();
        for b in &self.blocks {
            let dims: Vec<String> = b.shape.iter().map(|d| d.to_string()).collect();
            buf.extend_from_slice(
                format!("block {} {} {}\n", b.name, b.shape.len(), dims.join(" ")).as_bytes(),
            );
            for v in &b.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut rest = bytes;
        let header = |field: &'static str, detail: String| Error::Header {
            path: path.into(),
            field,
            detail,
        };
        let line = |rest: &mut &[u8], field: &'static str| -> Result<String> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| header(field, "missing line".into()))?;
            let s = std::str::from_utf8(&rest[..end])
                .map_err(|_| header(field, "not UTF-8".into()))?
                .to_string();
            *rest = &rest[end + 1..];
            Ok(s)
        };

        let magic = line(&mut rest, "magic").unwrap_or_default();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: CHECKPOINT_MAGIC,
                found: magic.chars().take(16).collect(),
            });
        }
        let mut meta = KvConfig::new();
        let count = loop {
            let l = line(&mut rest, "meta")?;
            if let Some(kv) = l.strip_prefix("meta ") {
                let (k, v) = kv.split_once(' ').ok_or_else(|| {
                    header("meta", format!("expected `meta key value`, found {l:?}"))
                })?;
                meta.set(k, v);
            } else if let Some(n) = l.strip_prefix("blocks ") {
                break n
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| header("blocks", format!("bad count {n:?}")))?;
            } else {
                return Err(header("meta", format!("unexpected line {l:?}")));
            }
        };

        let mut blocks = Vec::with_capacity(count);
        for _ in 0..count {
            let l = line(&mut rest, "block")?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            let bad = || header("block", format!("malformed block line {l:?}"));
            if parts.len() < 3 || parts[0] != "block" {
                return Err(bad());
            }
            let rank: usize = parts[2].parse().map_err(|_| bad())?;
            if parts.len() != 3 + rank {
                return Err(bad());
            }
            let shape = parts[3..]
                .iter()
                .map(|d| d.parse::<usize>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let need = n * 8;
            if rest.len() < need {
                return Err(Error::LengthMismatch {
                    path: path.into(),
                    field: parts[1].to_string(),
                    expected: n,
                    found: rest.len() / 8,
                });
            }
            let data: Vec<f64> = rest[..need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(index) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    field: parts[1].to_string(),
                    index,
                });
            }
            rest = &rest[need..];
            blocks.push(Block::new(parts[1], shape, data)?);
        }
        if !rest.is_empty() {
            return Err(Error::LengthMismatch {
                path: path.into(),
                field: "trailing".into(),
                expected: 0,
                found: rest.len(),
            });
        }
        Ok(Self { meta, blocks })
    }
}
