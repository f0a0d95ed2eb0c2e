use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::PreferenceExample;
use super::dims::DimensionSpec;
use super::scorer::{offline_score, reference_rubric, ScorerRequest};
use super::DataError;

const VERBS: &[&str] = &["describe", "explain", "compare", "discuss", "summarize"];
const NOUNS: &[&str] = &[
    "river", "lamp", "stone", "cloud", "garden", "bridge", "engine", "forest", "harbor", "candle", "mirror", "ladder",
    "meadow", "violin", "pepper", "tunnel", "island", "basket", "rocket", "window", "spider", "orange", "canyon",
    "marble",
];
const ADJECTIVES: &[&str] = &["bright", "quiet", "heavy", "small", "ancient", "green", "rapid", "soft"];

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub size: usize,
    pub seed: u64,
    pub dims: Vec<DimensionSpec>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fact {
    Right,
    Wrong,
    Missing,
}

#[derive(Clone, Copy, PartialEq, Eq)]
struct Parts {
    second: bool,
    adjectives: bool,
    fact: Fact,
}

struct Item<'a> {
    n1: &'a str,
    n2: &'a str,
    a1: &'a str,
    a2: &'a str,
    fact: String,
    wrong: String,
}

impl Item<'_> {
    fn render(&self, p: Parts) -> String {
        let mut s = String::from(self.n1);
        if p.adjectives {
            s += &format!(" is {}", self.a1);
        }
        if p.second {
            s += &format!(" and {}", self.n2);
            if p.adjectives {
                s += &format!(" is {}", self.a2);
            }
        }
        match p.fact {
            Fact::Right => s += &format!(" {}", self.fact),
            Fact::Wrong => s += &format!(" {}", self.wrong),
            Fact::Missing => {}
        }
        s
    }
}

fn fact_token(rng: &mut ChaCha8Rng) -> String {
    let letter = (b'a' + rng.random_range(0..26u8)) as char;
    format!("#{letter}{}", rng.random_range(0..10u8))
}

/// Every degradation only removes reference content or swaps the planted
/// fact, so no heuristic score of the rejected response can exceed the
/// chosen one.
fn degrade(p: Parts, rng: &mut ChaCha8Rng) -> Parts {
    loop {
        let mut q = p;
        if rng.random_bool(0.5) {
            q.second = false;
        }
        if rng.random_bool(0.5) {
            q.adjectives = false;
        }
        if rng.random_bool(0.5) {
            q.fact = if rng.random_bool(0.5) { Fact::Wrong } else { Fact::Missing };
        }
        if q != p {
            return q;
        }
    }
}

/// Builds a seeded dataset of short preference pairs. The chosen response is
/// the reference answer or a mild variation of it; the rejected response is
/// a further degradation. Both are scored by [`offline_score`] against the
/// reference, so the stored scores agree with the scorer.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<PreferenceExample>, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.size);
    for _ in 0..cfg.size {
        let verb = *VERBS.choose(&mut rng).expect("nonempty");
        let pair: Vec<&str> = NOUNS.choose_multiple(&mut rng, 2).copied().collect();
        let a1 = *ADJECTIVES.choose(&mut rng).expect("nonempty");
        let a2 = *ADJECTIVES.choose(&mut rng).expect("nonempty");
        let fact = fact_token(&mut rng);
        let wrong = loop {
            let w = fact_token(&mut rng);
            if w != fact {
                break w;
            }
        };
        let item = Item {
            n1: pair[0],
            n2: pair[1],
            a1,
            a2,
            fact,
            wrong,
        };
        let prompt = format!("{verb} {} and {}", item.n1, item.n2);
        let full = Parts {
            second: true,
            adjectives: true,
            fact: Fact::Right,
        };
        let chosen_parts = match rng.random_range(0..5u8) {
            0 => Parts { second: false, ..full },
            1 => Parts { adjectives: false, ..full },
            2 => Parts { fact: Fact::Missing, ..full },
            _ => full,
        };
        let rejected_parts = degrade(chosen_parts, &mut rng);
        let reference = item.render(full);
        let chosen = item.render(chosen_parts);
        let rejected = item.render(rejected_parts);
        let mut scores = BTreeMap::new();
        let mut rejected_scores = BTreeMap::new();
        for d in &cfg.dims {
            let rubric = reference_rubric(d, &reference);
            let req = |response: &str| ScorerRequest {
                prompt: prompt.clone(),
                response: response.to_string(),
                dimension: d.name.clone(),
                rubric: rubric.clone(),
            };
            scores.insert(d.name.clone(), offline_score(&req(&chosen), &cfg.dims)?.score);
            rejected_scores.insert(d.name.clone(), offline_score(&req(&rejected), &cfg.dims)?.score);
        }
        out.push(PreferenceExample {
            prompt,
            chosen,
            rejected,
            scores,
            rejected_scores: Some(rejected_scores),
        });
    }
    Ok(out)
}
