use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::dot;
use crate::metrics::{prf1, ConfusionCounts, Prf1Report};

use super::{Corpus, EvalError, Result};

/// Leave-one-out KNN labels for every frame of the corpus.
///
/// Neighbours are ranked by cosine similarity, ties by ascending frame id.
/// The vote goes to the most frequent label among the top `k`; ties go to
/// the larger summed similarity, then to the lexicographically smaller label.
pub fn knn_classify(corpus: &Corpus, k: usize) -> Result<BTreeMap<String, String>> {
    if k == 0 {
        return Err(EvalError::InvalidK);
    }
    let n = corpus.len();
    if n <= k {
        return Err(EvalError::TooFewSamples { n, k });
    }
    let entries = corpus.entries();
    let predictions: Vec<String> = (0..n)
        .into_par_iter()
        .map(|i| {
            let query = entries[i].embedding.as_slice();
            let mut neighbours: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dot(query, entries[j].embedding.as_slice()), j))
                .collect();
            let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
            neighbours.select_nth_unstable_by(k - 1, by_rank);
            neighbours.truncate(k);
            neighbours.sort_by(by_rank);

            let mut votes: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
            for &(sim, j) in &neighbours {
                let v = votes.entry(entries[j].class_label.as_str()).or_insert((0, 0.0));
                v.0 += 1;
                v.1 += sim;
            }
            // BTreeMap iterates labels ascending, so keeping the first of
            // equal candidates implements the lexicographic fallback.
            let mut best: Option<(&str, usize, f64)> = None;
            for (label, (count, sum)) in votes {
                let better = match best {
                    None => true,
                    Some((_, c, s)) => count > c || (count == c && sum > s),
                };
                if better {
                    best = Some((label, count, sum));
                }
            }
            best.expect("k >= 1 neighbours").0.to_owned()
        })
        .collect();
    Ok(entries
        .iter()
        .map(|e| e.frame_id.clone())
        .zip(predictions)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnReport {
    pub k: usize,
    pub scores: Prf1Report,
}

/// KNN probe scored against the class labels.
pub fn evaluate_knn(corpus: &Corpus, k: usize) -> Result<KnnReport> {
    let predicted = knn_classify(corpus, k)?;
    let truth: Vec<&str> = corpus.entries().iter().map(|e| e.class_label.as_str()).collect();
    let pred: Vec<&str> = corpus.entries().iter().map(|e| predicted[&e.frame_id].as_str()).collect();
    let counts = ConfusionCounts::from_predictions(corpus.classes(), &truth, &pred)?;
    Ok(KnnReport {
        k,
        scores: prf1(&counts),
    })
}
