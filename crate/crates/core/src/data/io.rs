//! Line-delimited JSON dataset files, one sample per line.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::types::{AlignedSample, Modality, ModalitySequence};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSequence {
    features: Vec<Vec<f64>>,
    intervals: Vec<[f64; 2]>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(rename = "L")]
    l: RawSequence,
    #[serde(rename = "V")]
    v: RawSequence,
    #[serde(rename = "A")]
    a: RawSequence,
    labels: Vec<f64>,
}

fn to_seq(m: Modality, raw: RawSequence) -> Result<ModalitySequence> {
    ModalitySequence::new(m, raw.features, raw.intervals.into_iter().map(|[s, e]| (s, e)).collect())
}

fn from_seq(s: &ModalitySequence) -> RawSequence {
    RawSequence {
        features: s.features.clone(),
        intervals: s.intervals.iter().map(|&(a, b)| [a, b]).collect(),
    }
}

fn parse_line(line: &str) -> Result<AlignedSample> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| Error::Data {
        line: None,
        msg: e.to_string(),
    })?;
    let labels: [f64; 7] = raw.labels.as_slice().try_into().map_err(|_| Error::Data {
        line: None,
        msg: format!("sample {:?}: expected 7 labels, got {}", raw.id, raw.labels.len()),
    })?;
    let id = raw.id;
    let tag = |e: Error| match e {
        Error::Data { line, msg } => Error::Data {
            line,
            msg: format!("sample {id:?}: {msg}"),
        },
        other => other,
    };
    let sample = AlignedSample {
        l: to_seq(Modality::L, raw.l).map_err(tag)?,
        v: to_seq(Modality::V, raw.v).map_err(tag)?,
        a: to_seq(Modality::A, raw.a).map_err(tag)?,
        id: id.clone(),
        labels,
    };
    sample.validate()?;
    Ok(sample)
}

/// Parses a dataset from any reader. Blank lines are skipped.
pub fn read_dataset<R: Read>(reader: R) -> Result<Vec<AlignedSample>> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in BufReader::new(reader).lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::Data {
            line: Some(lineno),
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_line(&line).map_err(|e| match e {
            Error::Data { msg, .. } => Error::Data { line: Some(lineno), msg },
            other => other,
        })?;
        if !seen.insert(sample.id.clone()) {
            return Err(Error::Data {
                line: Some(lineno),
                msg: format!("duplicate sample id {:?}", sample.id),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<AlignedSample>> {
    let f = fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_dataset(f)
}

pub fn write_dataset<W: Write>(mut w: W, samples: &[AlignedSample]) -> Result<()> {
    for s in samples {
        let raw = RawRecord {
            id: s.id.clone(),
            l: from_seq(&s.l),
            v: from_seq(&s.v),
            a: from_seq(&s.a),
            labels: s.labels.to_vec(),
        };
        let line = serde_json::to_string(&raw).map_err(|e| Error::Data {
            line: None,
            msg: e.to_string(),
        })?;
        writeln!(w, "{line}").map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, samples: &[AlignedSample]) -> Result<()> {
    let p = path.as_ref();
    let f = fs::File::create(p).map_err(|e| Error::io(p, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, samples)?;
    w.flush().map_err(|e| Error::io(p, e))
}
