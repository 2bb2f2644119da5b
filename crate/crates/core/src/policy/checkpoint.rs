//! Checkpoint files.
//!
//! ```text
//! {"version":1,"context_dim":58,"vocab":114,"temperature":1.0,"blocks":["ctx","ctx_after_stamp","prev","prev2","bias"]}
//! <vocab rows of ctx, context_dim values each>
//! <vocab rows of ctx_after_stamp, context_dim values each>
//! <vocab rows of prev, vocab values each>
//! <vocab rows of prev2, vocab values each>
//! <1 row of bias>
//! ```
//!
//! Values are space-separated decimals with nine significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PolicyParams, Weights};
use crate::artifacts::write_atomic;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const BLOCKS: [&str; 5] = ["ctx", "ctx_after_stamp", "prev", "prev2", "bias"];

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    context_dim: usize,
    vocab: usize,
    temperature: f64,
    blocks: Vec<String>,
}

pub fn write_checkpoint(path: &Path, params: &PolicyParams) -> Result<()> {
    let w = &params.weights;
    let header = Header {
        version: CHECKPOINT_VERSION,
        context_dim: w.context_dim,
        vocab: w.vocab,
        temperature: params.temperature,
        blocks: BLOCKS.iter().map(|s| s.to_string()).collect(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    let mut push_rows = |data: &[f64], width: usize| {
        for row in data.chunks(width) {
            for (i, x) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{x:.8e}");
            }
            out.push('\n');
        }
    };
    push_rows(&w.ctx, w.context_dim);
    push_rows(&w.ctx_after_stamp, w.context_dim);
    push_rows(&w.prev, w.vocab);
    push_rows(&w.prev2, w.vocab);
    push_rows(&w.bias, w.vocab);
    write_atomic(path, out.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header: Header = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| err(1, format!("bad checkpoint header: {e}")))?;
    if header.version != CHECKPOINT_VERSION || header.blocks != BLOCKS {
        return Err(err(1, "unsupported checkpoint layout".into()));
    }
    let mut w = Weights::zeros(header.vocab, header.context_dim);
    let mut line_no = 1;
    let cd = header.context_dim;
    let widths = [cd, cd, header.vocab, header.vocab, header.vocab];
    for (block, width) in [
        &mut w.ctx,
        &mut w.ctx_after_stamp,
        &mut w.prev,
        &mut w.prev2,
        &mut w.bias,
    ]
        .into_iter()
        .zip(widths)
    {
        for row in block.chunks_mut(width) {
            line_no += 1;
            let line = lines
                .next()
                .ok_or_else(|| err(line_no, "checkpoint truncated".into()))?;
            let mut n = 0;
            for (slot, tok) in row.iter_mut().zip(line.split(' ')) {
                *slot = tok
                    .parse()
                    .map_err(|e| err(line_no, format!("bad value {tok:?}: {e}")))?;
                n += 1;
            }
            if n != width || line.split(' ').count() != width {
                return Err(err(line_no, format!("expected {width} values")));
            }
        }
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(err(line_no + 1, "trailing data after checkpoint".into()));
    }
    let params = PolicyParams {
        weights: w,
        temperature: header.temperature,
    };
    params.validate()?;
    Ok(params)
}
