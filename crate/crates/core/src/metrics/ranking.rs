use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

/// Relevance of each ranked item (best first) plus the number of relevant
/// items that exist for the query, retrieved or not.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankingJudgments {
    relevance: Vec<bool>,
    total_relevant: usize,
}

impl RankingJudgments {
    pub fn new(relevance: Vec<bool>, total_relevant: usize) -> Result<Self> {
        let hits = relevance.iter().filter(|&&r| r).count();
        if hits > total_relevant {
            return Err(MetricsError::InvalidInput(format!(
                "{hits} relevant items ranked but only {total_relevant} exist"
            )));
        }
        Ok(Self {
            relevance,
            total_relevant,
        })
    }

    /// Judgments for a complete ranking: every relevant item is in the list.
    pub fn complete(relevance: Vec<bool>) -> Self {
        let total_relevant = relevance.iter().filter(|&&r| r).count();
        Self {
            relevance,
            total_relevant,
        }
    }

    pub fn relevance(&self) -> &[bool] {
        &self.relevance
    }

    pub fn total_relevant(&self) -> usize {
        self.total_relevant
    }

    pub fn len(&self) -> usize {
        self.relevance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.relevance.is_empty()
    }

    fn hits_in_top(&self, k: usize) -> usize {
        self.relevance.iter().take(k).filter(|&&r| r).count()
    }
}

/// `(1/R) Σ_k P(k)·rel(k)` over the whole ranking.
pub fn average_precision(j: &RankingJudgments) -> Result<f64> {
    if j.total_relevant == 0 {
        return Err(MetricsError::NoRelevant);
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, &rel) in j.relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    Ok(sum / j.total_relevant as f64)
}

/// Fraction of all relevant items found in the top `k`. `k` may exceed the
/// ranking length, in which case the whole list counts.
pub fn recall_at_k(j: &RankingJudgments, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(MetricsError::BadK { k, n: j.len() });
    }
    if j.total_relevant == 0 {
        return Err(MetricsError::NoRelevant);
    }
    Ok(j.hits_in_top(k) as f64 / j.total_relevant as f64)
}

/// Fraction of the top `k` that is relevant; requires `1 ≤ k ≤ N`.
pub fn precision_at_k(j: &RankingJudgments, k: usize) -> Result<f64> {
    if k == 0 || k > j.len() {
        return Err(MetricsError::BadK { k, n: j.len() });
    }
    Ok(j.hits_in_top(k) as f64 / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        let j = RankingJudgments::new(vec![true, false, true], 2).unwrap();
        assert!((average_precision(&j).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        let j = RankingJudgments::complete(vec![true, true, false, false]);
        assert_eq!(average_precision(&j).unwrap(), 1.0);
        let j = RankingJudgments::new(vec![false, false], 3).unwrap();
        assert_eq!(average_precision(&j).unwrap(), 0.0);
        let j = RankingJudgments::new(vec![false], 0).unwrap();
        assert_eq!(average_precision(&j), Err(MetricsError::NoRelevant));
        assert!(RankingJudgments::new(vec![true, true], 1).is_err());
    }

    #[test]
    fn at_k_examples() {
        let j = RankingJudgments::new(vec![true, false, false, true, false, false], 3).unwrap();
        assert!((recall_at_k(&j, 5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&j, 4).unwrap(), 0.5);
        let j = RankingJudgments::complete(vec![false, true, true]);
        assert_eq!(recall_at_k(&j, 3).unwrap(), 1.0);
        assert_eq!(recall_at_k(&j, 10).unwrap(), 1.0);
        assert!(matches!(precision_at_k(&j, 4), Err(MetricsError::BadK { k: 4, n: 3 })));
        assert!(matches!(precision_at_k(&j, 0), Err(MetricsError::BadK { .. })));
        let none = RankingJudgments::new(vec![false], 0).unwrap();
        assert_eq!(recall_at_k(&none, 1), Err(MetricsError::NoRelevant));
    }

    proptest! {
        #[test]
        fn recall_monotone_precision_integral(rel in proptest::collection::vec(any::<bool>(), 1..40)) {
            let j = RankingJudgments::complete(rel.clone());
            prop_assume!(j.total_relevant() > 0);
            let mut prev = 0.0;
            for k in 1..=rel.len() {
                let r = recall_at_k(&j, k).unwrap();
                prop_assert!(r >= prev);
                prev = r;
                let pk = precision_at_k(&j, k).unwrap() * k as f64;
                prop_assert!((pk - pk.round()).abs() < 1e-9);
            }
            prop_assert_eq!(prev, 1.0);
        }

        #[test]
        fn auprc_equals_ap_on_complete_rankings(rel in proptest::collection::vec(any::<bool>(), 1..60)) {
            prop_assume!(rel.iter().any(|&r| r));
            let n = rel.len();
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let (_, auprc) = super::super::pr_curve(&scores, &rel).unwrap();
            let ap = average_precision(&RankingJudgments::complete(rel)).unwrap();
            prop_assert!((auprc - ap).abs() < 1e-12);
        }
    }
}
