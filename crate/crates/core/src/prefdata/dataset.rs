use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::dims::{map_prompt, DimensionSpec};
use super::DataError;

/// One line of the dataset: ⟨x, y_w, y_l, d⟩ with per-dimension scores of
/// the chosen response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceExample {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub scores: BTreeMap<String, i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_scores: Option<BTreeMap<String, i64>>,
}

impl PreferenceExample {
    pub fn validate(&self, dims: &[DimensionSpec]) -> Result<(), DataError> {
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(DataError::InvalidExample("responses must be nonempty".into()));
        }
        if self.chosen == self.rejected {
            return Err(DataError::InvalidExample("chosen and rejected are identical".into()));
        }
        for d in dims {
            let s = *self.scores.get(&d.name).ok_or_else(|| DataError::MissingScore(d.name.clone()))?;
            d.check_score(s)?;
            if let Some(rs) = &self.rejected_scores {
                if let Some(&r) = rs.get(&d.name) {
                    d.check_score(r)?;
                }
            }
        }
        Ok(())
    }
}

/// One dimension's view of an example: (x*_k, y_w, y_l, d_k).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExpandedPair {
    pub dimension: String,
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub score: i64,
}

pub fn expand_example(ex: &PreferenceExample, dims: &[DimensionSpec]) -> Result<Vec<ExpandedPair>, DataError> {
    dims.iter()
        .map(|d| {
            let score = *ex.scores.get(&d.name).ok_or_else(|| DataError::MissingScore(d.name.clone()))?;
            Ok(ExpandedPair {
                dimension: d.name.clone(),
                prompt: map_prompt(&ex.prompt, d, score)?,
                chosen: ex.chosen.clone(),
                rejected: ex.rejected.clone(),
                score,
            })
        })
        .collect()
}

fn line_err(line: usize, field: &str, message: impl Into<String>) -> DataError {
    DataError::Line {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

fn score_map(line: usize, field: &str, v: &Value) -> Result<BTreeMap<String, i64>, DataError> {
    let obj = v.as_object().ok_or_else(|| line_err(line, field, "expected an object"))?;
    obj.iter()
        .map(|(k, s)| {
            s.as_i64()
                .map(|s| (k.clone(), s))
                .ok_or_else(|| line_err(line, k, format!("score in `{field}` must be an integer")))
        })
        .collect()
}

fn parse_line(line: usize, text: &str, dims: &[DimensionSpec]) -> Result<PreferenceExample, DataError> {
    let v: Value = serde_json::from_str(text).map_err(|e| line_err(line, "<json>", e.to_string()))?;
    let obj = v.as_object().ok_or_else(|| line_err(line, "<json>", "expected a JSON object"))?;
    let string = |field: &str| -> Result<String, DataError> {
        match obj.get(field) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(line_err(line, field, "expected a string")),
            None => Err(line_err(line, field, "missing")),
        }
    };
    let prompt = string("prompt")?;
    let chosen = string("chosen")?;
    let rejected = string("rejected")?;
    let scores = score_map(line, "scores", obj.get("scores").ok_or_else(|| line_err(line, "scores", "missing"))?)?;
    let rejected_scores = match obj.get("rejected_scores") {
        None | Some(Value::Null) => None,
        Some(v) => Some(score_map(line, "rejected_scores", v)?),
    };
    if let Some(extra) = obj
        .keys()
        .find(|k| !["prompt", "chosen", "rejected", "scores", "rejected_scores"].contains(&k.as_str()))
    {
        return Err(line_err(line, extra, "unknown field"));
    }
    if chosen.is_empty() {
        return Err(line_err(line, "chosen", "empty response"));
    }
    if rejected.is_empty() {
        return Err(line_err(line, "rejected", "empty response"));
    }
    if chosen == rejected {
        return Err(line_err(line, "rejected", "identical to chosen"));
    }
    for d in dims {
        let range = |s: i64| format!("score {s} outside [{}, {}]", d.score_min, d.score_max);
        match scores.get(&d.name) {
            None => return Err(line_err(line, &d.name, "missing score")),
            Some(&s) if d.check_score(s).is_err() => return Err(line_err(line, &d.name, range(s))),
            Some(_) => {}
        }
        if let Some(&r) = rejected_scores.as_ref().and_then(|r| r.get(&d.name)) {
            if d.check_score(r).is_err() {
                return Err(line_err(line, &d.name, format!("rejected {}", range(r))));
            }
        }
    }
    Ok(PreferenceExample {
        prompt,
        chosen,
        rejected,
        scores,
        rejected_scores,
    })
}

/// Reads JSONL examples, validating each against `dims`. Blank lines are
/// skipped; any other bad line fails with its 1-based line number.
pub fn read_dataset<R: Read>(reader: R, dims: &[DimensionSpec]) -> Result<Vec<PreferenceExample>, DataError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(i + 1, &line, dims)?);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, dims: &[DimensionSpec]) -> Result<Vec<PreferenceExample>, DataError> {
    read_dataset(File::open(path)?, dims)
}

pub fn write_dataset<W: Write>(writer: W, data: &[PreferenceExample]) -> Result<(), DataError> {
    let mut w = BufWriter::new(writer);
    for ex in data {
        serde_json::to_writer(&mut w, ex).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, data: &[PreferenceExample]) -> Result<(), DataError> {
    write_dataset(File::create(path)?, data)
}
