//! Binary checkpoint: header, parameter blocks as row-major little-endian
//! `f32`, then a JSON metadata record.
//!
//! ```text
//! magic  "SEQCKPT\0"            8 bytes
//! version u32
//! n_blocks u32
//! per block: name_len u32, name (utf-8), rows u32, cols u32, rows*cols f32
//! meta_len u32, metadata JSON
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::model::{Activation, Dense, Head, ProjectionModel};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEQCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub d_in: usize,
    pub d_hidden: Option<usize>,
    pub d_out: usize,
    pub activation: Activation,
    pub twin: bool,
    pub seed: u64,
}

pub fn checkpoint_bytes(model: &ProjectionModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let blocks = model.named_blocks();
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, data) in &blocks {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(data.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(data.ncols() as u32).to_le_bytes());
        for &x in data.iter() {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        d_in: model.input_dim(),
        d_hidden: model.hidden_dim(),
        d_out: model.output_dim(),
        activation: model.activation,
        twin: model.is_twin(),
        seed: model.seed,
    };
    let meta = serde_json::to_vec(&meta).expect("metadata serializes");
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out
}

pub fn save_checkpoint(model: &ProjectionModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(model))
        .map_err(|e| Error::io(path, e))
}

/// Bounds-checked little-endian reader that names the field being read
/// when the input ends early.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    pub(crate) fn is_at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.path, field, "unexpected end of file")),
        }
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<ProjectionModel> {
    let mut cur = Cursor::new(bytes, path);
    if cur.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "magic", "not a checkpoint file"));
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let n_blocks = cur.u32("n_blocks")? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = cur.u32("block.name_len")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "block.name")?)
            .map_err(|_| Error::format(path, "block.name", "invalid utf-8"))?
            .to_string();
        let rows = cur.u32("block.rows")? as usize;
        let cols = cur.u32("block.cols")? as usize;
        let raw = cur.take(rows * cols * 4, &format!("{name}.data"))?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::format(
                path,
                format!("{name}.data"),
                "non-finite parameter",
            ));
        }
        blocks.push((name, Array2::from_shape_vec((rows, cols), data).unwrap()));
    }
    let meta_len = cur.u32("meta_len")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(path, "metadata", e.to_string()))?;

    let n_heads = if meta.twin { 2 } else { 1 };
    let per_head = if meta.d_hidden.is_some() { 4 } else { 2 };
    if blocks.len() != n_heads * per_head {
        return Err(Error::format(
            path,
            "n_blocks",
            format!(
                "expected {} blocks, found {}",
                n_heads * per_head,
                blocks.len()
            ),
        ));
    }
    let mut it = blocks.into_iter();
    let mut dense = |d_in: usize, d_out: usize| -> Result<Dense> {
        let (wname, weight) = it.next().unwrap();
        let (bname, bias) = it.next().unwrap();
        if weight.dim() != (d_in, d_out) {
            return Err(Error::format(path, wname, "shape disagrees with metadata"));
        }
        if bias.dim() != (1, d_out) {
            return Err(Error::format(path, bname, "shape disagrees with metadata"));
        }
        Ok(Dense {
            weight,
            bias: Array1::from_iter(bias.iter().copied()),
        })
    };
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let (hidden, out) = match meta.d_hidden {
            Some(h) => (Some(dense(meta.d_in, h)?), dense(h, meta.d_out)?),
            None => (None, dense(meta.d_in, meta.d_out)?),
        };
        heads.push(Head { hidden, out });
    }
    Ok(ProjectionModel {
        heads,
        activation: meta.activation,
        seed: meta.seed,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<ProjectionModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}
