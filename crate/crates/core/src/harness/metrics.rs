//! Retrieval and classification scores.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::io::{LabelCell, RelevanceRule};

/// Mean of precision at each relevant rank, over the relevant items in the list.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    if relevance.is_empty() {
        return Err(Error::arg("average precision of an empty ranking"));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, &rel) in relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (p + 1) as f64;
        }
    }
    Ok(if hits == 0 { 0.0 } else { sum / hits as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub rankings: Vec<Vec<usize>>,
    /// `None` for queries without any relevant target.
    pub average_precision: Vec<Option<f64>>,
    /// Mean over admissible queries; `None` when there are none.
    pub map: Option<f64>,
    pub admissible: usize,
    pub skipped: usize,
}

pub fn relevant(rule: RelevanceRule, query: &LabelCell, target: &LabelCell) -> bool {
    match (query, target) {
        (LabelCell::Classes(q), LabelCell::Classes(t)) => match rule {
            RelevanceRule::SameLabel => {
                let mut a = q.clone();
                let mut b = t.clone();
                a.sort_unstable();
                a.dedup();
                b.sort_unstable();
                b.dedup();
                a == b
            }
            RelevanceRule::SharedLabel => q.iter().any(|c| t.contains(c)),
        },
        _ => false,
    }
}

/// Shared-label when any row carries several labels, same-label otherwise.
pub fn default_rule(labels: &[&[LabelCell]]) -> RelevanceRule {
    let multi = labels
        .iter()
        .flat_map(|l| l.iter())
        .any(|c| matches!(c, LabelCell::Classes(v) if v.len() > 1));
    if multi {
        RelevanceRule::SharedLabel
    } else {
        RelevanceRule::SameLabel
    }
}

pub fn map_score(
    rankings: &[Vec<usize>],
    query_labels: &[LabelCell],
    target_labels: &[LabelCell],
    rule: RelevanceRule,
) -> Result<RetrievalResult> {
    if rankings.len() != query_labels.len() {
        return Err(Error::arg(format!(
            "{} rankings for {} query labels",
            rankings.len(),
            query_labels.len()
        )));
    }
    let judgments: Vec<Vec<usize>> = query_labels
        .iter()
        .map(|q| {
            (0..target_labels.len())
                .filter(|&t| relevant(rule, q, &target_labels[t]))
                .collect()
        })
        .collect();
    map_from_judgments(rankings, &judgments, target_labels.len())
}

/// MAP with explicit relevant target sets per query.
pub fn map_from_judgments(
    rankings: &[Vec<usize>],
    relevant_sets: &[Vec<usize>],
    targets: usize,
) -> Result<RetrievalResult> {
    if rankings.len() != relevant_sets.len() {
        return Err(Error::arg(format!(
            "{} rankings for {} queries with judgments",
            rankings.len(),
            relevant_sets.len()
        )));
    }
    let mut aps = Vec::with_capacity(rankings.len());
    for (q, (list, rel)) in rankings.iter().zip(relevant_sets).enumerate() {
        if let Some(&bad) = list.iter().find(|&&t| t >= targets) {
            return Err(Error::arg(format!("query {q}: target {bad} out of range")));
        }
        if rel.is_empty() {
            aps.push(None);
            continue;
        }
        let flags: Vec<bool> = list.iter().map(|t| rel.contains(t)).collect();
        aps.push(Some(average_precision(&flags)?));
    }
    let admissible: Vec<f64> = aps.iter().flatten().copied().collect();
    let map =
        (!admissible.is_empty()).then(|| admissible.iter().sum::<f64>() / admissible.len() as f64);
    Ok(RetrievalResult {
        rankings: rankings.to_vec(),
        admissible: admissible.len(),
        skipped: aps.len() - admissible.len(),
        average_precision: aps,
        map,
    })
}

pub fn accuracy<T: PartialEq>(predicted: &[T], truth: &[T]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::arg(format!(
            "{} predictions for {} true labels",
            predicted.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::arg("accuracy of an empty label set"));
    }
    let correct = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / truth.len() as f64)
}
