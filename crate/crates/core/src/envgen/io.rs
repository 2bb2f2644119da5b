//! Line-delimited dataset files.
//!
//! ```text
//! {"version":1,"spec":{...}|null,"n":N}
//! {"id":"src-000000","profile":[...],"query":[...],"gt":[s,e]|null,"domain":"source"}
//! ...
//! ```
//!
//! Floats are written with nine significant digits, which reproduces every
//! `f32` value exactly on read.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainSpec, DomainTag, GroundingSample};
use crate::artifacts::{push_f32_array, write_atomic};
use crate::error::{Error, Result};
use crate::interval::TimeInterval;

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub spec: Option<DomainSpec>,
    pub n: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    profile: Vec<f32>,
    query: Vec<f32>,
    gt: Option<[f32; 2]>,
    domain: DomainTag,
}

pub fn write_dataset(
    path: &Path,
    samples: &[GroundingSample],
    spec: Option<&DomainSpec>,
) -> Result<()> {
    let header = DatasetHeader {
        version: DATASET_VERSION,
        spec: spec.cloned(),
        n: samples.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in samples {
        out.push_str("{\"id\":");
        out.push_str(&serde_json::to_string(&s.id)?);
        out.push_str(",\"profile\":");
        push_f32_array(&mut out, &s.similarity_profile);
        out.push_str(",\"query\":");
        push_f32_array(&mut out, &s.query_embedding);
        out.push_str(",\"gt\":");
        match s.gt_interval {
            Some(gt) => {
                let _ = write!(
                    out,
                    "[{:.8e},{:.8e}]",
                    gt.start() as f32,
                    gt.end() as f32
                );
            }
            None => out.push_str("null"),
        }
        out.push_str(",\"domain\":");
        out.push_str(&serde_json::to_string(&s.domain)?);
        out.push_str("}\n");
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<Vec<GroundingSample>> {
    read_dataset_file(path).map(|(_, samples)| samples)
}

/// Reads header and samples; errors carry the failing line number.
pub fn read_dataset_file(path: &Path) -> Result<(DatasetHeader, Vec<GroundingSample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| parse_err(1, "missing header record".into()))?;
    let header: DatasetHeader =
        serde_json::from_str(first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.version != DATASET_VERSION {
        return Err(parse_err(
            1,
            format!("unsupported dataset version {}", header.version),
        ));
    }

    let mut samples = Vec::with_capacity(header.n);
    let mut last_good = 1;
    let mut dims: Option<(usize, usize)> = None;
    for (line_no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| {
            parse_err(
                line_no,
                format!("malformed record ({e}); last good line {last_good}"),
            )
        })?;
        let shape = (rec.profile.len(), rec.query.len());
        if *dims.get_or_insert(shape) != shape {
            return Err(parse_err(
                line_no,
                format!("record dimensions {shape:?} differ from earlier records"),
            ));
        }
        let gt = rec
            .gt
            .map(|[s, e]| TimeInterval::new(f64::from(s), f64::from(e)))
            .transpose()
            .map_err(|e| parse_err(line_no, e.to_string()))?;
        samples.push(GroundingSample {
            id: rec.id,
            similarity_profile: rec.profile,
            query_embedding: rec.query,
            gt_interval: gt,
            domain: rec.domain,
        });
        last_good = line_no;
    }
    if samples.len() != header.n {
        return Err(parse_err(
            last_good + 1,
            format!(
                "header declares {} records but {} were read; last good line {last_good}",
                header.n,
                samples.len()
            ),
        ));
    }
    Ok((header, samples))
}
