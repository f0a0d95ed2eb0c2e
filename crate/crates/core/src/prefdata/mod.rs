//! Multi-dimension preference data: dimension catalog and prompt mapping,
//! the JSONL dataset format, an offline response scorer and a synthetic
//! dataset generator.

mod dataset;
mod dims;
mod scorer;
mod synth;

pub use dataset::{
    expand_example, load_dataset, read_dataset, save_dataset, write_dataset, ExpandedPair, PreferenceExample,
};
pub use dims::{map_prompt, DimensionCatalog, DimensionSpec, BUILTIN_CATALOG};
pub use scorer::{offline_score, reference_rubric, OfflineScorer, ResponseScorer, ScorerRequest, ScorerResponse};
pub use synth::{generate_synthetic, SynthConfig};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: field `{field}`: {message}")]
    Line {
        line: usize,
        field: String,
        message: String,
    },
    #[error("score {score} for `{dimension}` is outside [{min}, {max}]")]
    ScoreRange {
        dimension: String,
        score: i64,
        min: i64,
        max: i64,
    },
    #[error("missing score for dimension `{0}`")]
    MissingScore(String),
    #[error("unknown dimension `{0}`")]
    UnknownDimension(String),
    #[error("invalid dimension `{dimension}`: {message}")]
    InvalidDimension { dimension: String, message: String },
    #[error("invalid example: {0}")]
    InvalidExample(String),
    #[error("dimension catalog: {0}")]
    Catalog(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
