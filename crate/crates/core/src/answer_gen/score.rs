use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a predictions file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub question_id: String,
    pub full_answer: Vec<String>,
    pub short_answer: String,
}

/// Reference answer with its question type for the per-type breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reference {
    pub question_id: String,
    pub question_type: String,
    pub full_answer: Vec<String>,
    pub short_answer: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeMetrics {
    pub full_acc: f64,
    pub short_acc: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub full_acc: f64,
    pub short_acc: f64,
    pub by_type: BTreeMap<String, TypeMetrics>,
    pub n: usize,
}

/// String-match accuracy of predictions against references, aligned by id.
pub fn score(predictions: &[Prediction], references: &[Reference]) -> Result<Metrics> {
    let by_id: HashMap<&str, &Prediction> =
        predictions.iter().map(|p| (p.question_id.as_str(), p)).collect();
    let ref_ids: std::collections::HashSet<&str> =
        references.iter().map(|r| r.question_id.as_str()).collect();
    let mut unmatched: Vec<String> = references
        .iter()
        .filter(|r| !by_id.contains_key(r.question_id.as_str()))
        .map(|r| r.question_id.clone())
        .chain(
            predictions
                .iter()
                .filter(|p| !ref_ids.contains(p.question_id.as_str()))
                .map(|p| p.question_id.clone()),
        )
        .collect();
    if !unmatched.is_empty() {
        unmatched.sort();
        return Err(Error::UnmatchedIds(unmatched));
    }
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    let (mut full, mut short) = (0usize, 0usize);
    for r in references {
        let p = by_id[r.question_id.as_str()];
        let f = p.full_answer == r.full_answer;
        let s = p.short_answer == r.short_answer;
        full += f as usize;
        short += s as usize;
        let e = counts.entry(r.question_type.clone()).or_default();
        e.0 += f as usize;
        e.1 += s as usize;
        e.2 += 1;
    }
    let n = references.len();
    let frac = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    Ok(Metrics {
        full_acc: frac(full, n),
        short_acc: frac(short, n),
        by_type: counts
            .into_iter()
            .map(|(k, (f, s, n))| {
                (
                    k,
                    TypeMetrics {
                        full_acc: frac(f, n),
                        short_acc: frac(s, n),
                        n,
                    },
                )
            })
            .collect(),
        n,
    })
}
