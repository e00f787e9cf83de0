//! Trajectory records and their JSONL persistence.
//!
//! One JSON object per line. Keys are written in a fixed order:
//! `id`, `query`, `response`, `gold_answer`, `token_logprobs`, `length`, `ppl`,
//! `verified`, followed by any unrecognized keys in lexicographic order. Absent
//! optional fields are omitted; `null` on input is read as absent.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Relative tolerance between a stored `ppl` and the one implied by `token_logprobs`.
pub const PPL_CONSISTENCY_RTOL: f64 = 1e-9;

/// One (query, response) pair with its scoring and verification metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub id: String,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verified: Option<bool>,
    /// Fields this toolkit does not interpret; carried through unchanged.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl TrajectoryRecord {
    pub fn new(id: impl Into<String>, query: impl Into<String>, response: impl Into<String>) -> Self {
        TrajectoryRecord {
            id: id.into(),
            query: query.into(),
            response: response.into(),
            gold_answer: None,
            token_logprobs: None,
            length: None,
            ppl: None,
            verified: None,
            extra: BTreeMap::new(),
        }
    }

    /// Checks the per-record invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidRecord {
            id: self.id.clone(),
            message,
        };
        if let Some(lps) = &self.token_logprobs {
            if let Some((i, v)) = lps.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v <= 0.0)) {
                return Err(bad(format!("token_logprobs[{i}] = {v} is not a finite value <= 0")));
            }
            if let Some(len) = self.length {
                if len as usize != lps.len() {
                    return Err(bad(format!(
                        "length {len} does not match {} token_logprobs",
                        lps.len()
                    )));
                }
            }
        }
        if let Some(ppl) = self.ppl {
            if !(ppl.is_finite() && ppl >= 1.0) {
                return Err(bad(format!("ppl {ppl} must be finite and >= 1")));
            }
            if let Some(lps) = self.token_logprobs.as_deref().filter(|l| !l.is_empty()) {
                let expected = crate::metrics::perplexity(lps).map_err(|e| bad(e.to_string()))?;
                if ((ppl - expected) / expected).abs() > PPL_CONSISTENCY_RTOL {
                    return Err(bad(format!(
                        "ppl {ppl} disagrees with token_logprobs (expected {expected})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_correct(&self) -> bool {
        self.verified == Some(true)
    }
}

/// Records in canonical (ascending id) order with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    records: Vec<TrajectoryRecord>,
}

impl Corpus {
    /// Sorts into canonical order and rejects duplicate ids. Does not run
    /// per-record validation; see [`TrajectoryRecord::validate`].
    pub fn from_records(mut records: Vec<TrajectoryRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::DuplicateId { id: w[0].id.clone() });
        }
        Ok(Corpus { records })
    }

    pub fn empty() -> Self {
        Corpus::default()
    }

    pub fn records(&self) -> &[TrajectoryRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<TrajectoryRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TrajectoryRecord> {
        self.records.iter()
    }

    pub fn get(&self, id: &str) -> Option<&TrajectoryRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }

    /// Keeps the records matching `pred`; order is preserved.
    pub fn filter(&self, mut pred: impl FnMut(&TrajectoryRecord) -> bool) -> Corpus {
        Corpus {
            records: self.records.iter().filter(|r| pred(r)).cloned().collect(),
        }
    }

    /// Applies `f` to every record, keeping canonical order (ids must not change).
    pub fn try_map(
        &self,
        mut f: impl FnMut(&TrajectoryRecord) -> Result<TrajectoryRecord>,
    ) -> Result<Corpus> {
        let records = self.records.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
        Corpus::from_records(records)
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a TrajectoryRecord;
    type IntoIter = std::slice::Iter<'a, TrajectoryRecord>;

    fn into_iter(self) -> Self::IntoIter {
        self.records.iter()
    }
}

/// Parses JSONL from a reader. Blank lines are skipped; line numbers are 1-based.
pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::MalformedLine {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrajectoryRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                line: lineno,
                message: e.to_string(),
            })?;
        record.validate()?;
        if !seen.insert(record.id.clone()) {
            return Err(Error::DuplicateId { id: record.id });
        }
        records.push(record);
    }
    Corpus::from_records(records)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(BufReader::new(file)).map_err(|e| match e {
        Error::MalformedLine { line, message } => Error::MalformedLine {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

/// Serializes one record as a single JSON line (without the trailing newline).
pub fn record_to_line(record: &TrajectoryRecord) -> String {
    serde_json::to_string(record).expect("record serialization is infallible")
}

pub fn write_corpus(corpus: &Corpus, mut writer: impl Write) -> std::io::Result<()> {
    for record in corpus {
        writer.write_all(record_to_line(record).as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(corpus, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}
