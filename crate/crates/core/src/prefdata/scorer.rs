use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dims::DimensionSpec;
use super::DataError;

/// Wire format of a judge request.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerRequest {
    pub prompt: String,
    pub response: String,
    pub dimension: String,
    pub rubric: String,
}

/// Wire format of a judge reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub score: i64,
    pub rationale: String,
}

/// Anything that can grade a response along one dimension. A remote judge
/// adapter would implement this over the same request/response types.
pub trait ResponseScorer {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, DataError>;
}

const REFERENCE_PREFIX: &str = "Reference answer:";

const STOPWORDS: &[&str] = &[
    "about", "above", "after", "again", "also", "because", "been", "before", "being", "between", "both", "compare",
    "could", "describe", "discuss", "does", "each", "explain", "from", "have", "into", "more", "most", "other",
    "please", "should", "some", "such", "summarize", "than", "that", "their", "them", "then", "there", "these",
    "they", "this", "those", "very", "what", "when", "where", "which", "while", "with", "would", "write", "your",
];

/// The dimension rubric followed by a reference-answer line.
pub fn reference_rubric(dim: &DimensionSpec, reference: &str) -> String {
    format!("{}\n{REFERENCE_PREFIX} {reference}", dim.rubric.trim_end())
}

fn reference_of(rubric: &str) -> Option<&str> {
    rubric
        .lines()
        .rev()
        .find_map(|l| l.trim_start().strip_prefix(REFERENCE_PREFIX))
        .map(str::trim)
}

/// Lowercased words; `#` is kept so planted fact tokens like `#k7` survive.
fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '#' || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_fact(w: &str) -> bool {
    w.starts_with('#') && w.len() > 1
}

fn keywords(text: &str) -> BTreeSet<String> {
    words(text)
        .into_iter()
        .filter(|w| !is_fact(w) && w.chars().count() >= 4 && !STOPWORDS.contains(&w.as_str()))
        .collect()
}

struct Fraction {
    num: usize,
    den: usize,
    what: &'static str,
}

impl Fraction {
    fn value(&self) -> f64 {
        if self.den == 0 {
            1.0
        } else {
            self.num as f64 / self.den as f64
        }
    }
}

/// Coverage of the reference answer's distinct words.
fn helpfulness(response: &BTreeSet<String>, reference: &str) -> Fraction {
    let refw: BTreeSet<String> = words(reference).into_iter().collect();
    Fraction {
        num: refw.intersection(response).count(),
        den: refw.len(),
        what: "reference words covered",
    }
}

/// Correct facts over (reference facts + wrong facts).
fn correctness(response: &BTreeSet<String>, reference: &str) -> Fraction {
    let truth: BTreeSet<String> = words(reference).into_iter().filter(|w| is_fact(w)).collect();
    let claimed: BTreeSet<&String> = response.iter().filter(|w| is_fact(w)).collect();
    let right = claimed.iter().filter(|w| truth.contains(**w)).count();
    let wrong = claimed.len() - right;
    Fraction {
        num: right,
        den: truth.len() + wrong,
        what: "facts correct (wrong facts count against)",
    }
}

/// Prompt keywords mentioned in the response. With a reference answer, only
/// the keywords the reference itself mentions are required.
fn instruction_following(response: &BTreeSet<String>, prompt: &str, reference: Option<&str>) -> Fraction {
    let mut required = keywords(prompt);
    if let Some(r) = reference {
        let refw: BTreeSet<String> = words(r).into_iter().collect();
        let narrowed: BTreeSet<String> = required.intersection(&refw).cloned().collect();
        if !narrowed.is_empty() {
            required = narrowed;
        }
    }
    Fraction {
        num: required.intersection(response).count(),
        den: required.len(),
        what: "prompt keywords addressed",
    }
}

/// Deterministic stand-in for an LLM judge. The fraction `f ∈ [0, 1]` from
/// the dimension heuristic maps to `min + round(f·(max - min))`; a response
/// without words gets the minimum on every dimension.
#[derive(Clone, Debug)]
pub struct OfflineScorer {
    dims: Vec<DimensionSpec>,
}

impl OfflineScorer {
    pub fn new(dims: Vec<DimensionSpec>) -> Self {
        Self { dims }
    }
}

impl ResponseScorer for OfflineScorer {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, DataError> {
        offline_score(req, &self.dims)
    }
}

pub fn offline_score(req: &ScorerRequest, dims: &[DimensionSpec]) -> Result<ScorerResponse, DataError> {
    let dim = dims
        .iter()
        .find(|d| d.name == req.dimension)
        .ok_or_else(|| DataError::UnknownDimension(req.dimension.clone()))?;
    let reference = reference_of(&req.rubric);
    let response: BTreeSet<String> = words(&req.response).into_iter().collect();
    if response.is_empty() {
        return Ok(ScorerResponse {
            score: dim.score_min,
            rationale: "empty response".into(),
        });
    }
    let frac = match dim.name.as_str() {
        "helpfulness" => helpfulness(&response, reference.unwrap_or("")),
        "correctness" => correctness(&response, reference.unwrap_or("")),
        "instruction_following" => instruction_following(&response, &req.prompt, reference),
        other => return Err(DataError::UnknownDimension(other.to_string())),
    };
    let span = (dim.score_max - dim.score_min) as f64;
    let score = dim.score_min + (frac.value() * span).round() as i64;
    Ok(ScorerResponse {
        score,
        rationale: format!("{} of {} {}", frac.num, frac.den, frac.what),
    })
}
