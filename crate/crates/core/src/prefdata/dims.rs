use serde::{Deserialize, Serialize};

use super::DataError;

/// The catalog shipped with the crate.
pub const BUILTIN_CATALOG: &str = include_str!("../../resources/dimensions.toml");

const PLACEHOLDERS: [&str; 3] = ["{prompt}", "{dimension}", "{score}"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionSpec {
    pub name: String,
    pub score_min: i64,
    pub score_max: i64,
    pub template: String,
    #[serde(default)]
    pub rubric: String,
}

impl DimensionSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |message: String| DataError::InvalidDimension {
            dimension: self.name.clone(),
            message,
        };
        if self.name.is_empty() {
            return Err(bad("empty name".into()));
        }
        if self.score_min > self.score_max {
            return Err(bad(format!("score_min {} > score_max {}", self.score_min, self.score_max)));
        }
        for p in PLACEHOLDERS {
            let n = self.template.matches(p).count();
            if n != 1 {
                return Err(bad(format!("template must contain {p} exactly once, found {n}")));
            }
        }
        Ok(())
    }

    pub fn check_score(&self, score: i64) -> Result<(), DataError> {
        if score < self.score_min || score > self.score_max {
            return Err(DataError::ScoreRange {
                dimension: self.name.clone(),
                score,
                min: self.score_min,
                max: self.score_max,
            });
        }
        Ok(())
    }
}

/// A versioned list of dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimensionCatalog {
    pub version: String,
    #[serde(rename = "dimension")]
    pub dimensions: Vec<DimensionSpec>,
}

impl DimensionCatalog {
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let cat: Self = toml::from_str(text).map_err(|e| DataError::Catalog(e.to_string()))?;
        for d in &cat.dimensions {
            d.validate()?;
        }
        for (i, d) in cat.dimensions.iter().enumerate() {
            if cat.dimensions[..i].iter().any(|e| e.name == d.name) {
                return Err(DataError::Catalog(format!("duplicate dimension `{}`", d.name)));
            }
        }
        Ok(cat)
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_CATALOG).expect("builtin catalog is valid")
    }

    pub fn get(&self, name: &str) -> Option<&DimensionSpec> {
        self.dimensions.iter().find(|d| d.name == name)
    }

    /// Dimensions in the requested order.
    pub fn select<S: AsRef<str>>(&self, names: &[S]) -> Result<Vec<DimensionSpec>, DataError> {
        names
            .iter()
            .map(|n| {
                self.get(n.as_ref())
                    .cloned()
                    .ok_or_else(|| DataError::UnknownDimension(n.as_ref().to_string()))
            })
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.dimensions.iter().map(|d| d.name.clone()).collect()
    }
}

/// x* = f(x, d): expands the dimension template in one pass, so placeholder
/// text inside `prompt` is never re-expanded.
pub fn map_prompt(prompt: &str, dim: &DimensionSpec, score: i64) -> Result<String, DataError> {
    dim.check_score(score)?;
    let mut out = String::with_capacity(dim.template.len() + prompt.len() + dim.name.len());
    let mut rest = dim.template.as_str();
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        if let Some(p) = PLACEHOLDERS.iter().find(|p| tail.starts_with(**p)) {
            match *p {
                "{prompt}" => out.push_str(prompt),
                "{dimension}" => out.push_str(&dim.name),
                _ => out.push_str(&score.to_string()),
            }
            rest = &tail[p.len()..];
        } else {
            out.push('{');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}
