use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{MetricsError, Result};

/// One-vs-rest counts for every evaluated class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub classes: Vec<String>,
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
}

impl ConfusionCounts {
    pub fn from_predictions<S: AsRef<str>>(
        classes: &[String],
        truth: &[S],
        predicted: &[S],
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(MetricsError::LengthMismatch(truth.len(), predicted.len()));
        }
        let index: HashMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let lookup = |label: &str| {
            index
                .get(label)
                .copied()
                .ok_or_else(|| MetricsError::UnknownLabel(label.to_owned()))
        };
        let k = classes.len();
        let (mut tp, mut fp, mut fn_) = (vec![0u64; k], vec![0u64; k], vec![0u64; k]);
        for (t, p) in truth.iter().zip(predicted) {
            let (t, p) = (lookup(t.as_ref())?, lookup(p.as_ref())?);
            if t == p {
                tp[t] += 1;
            } else {
                fn_[t] += 1;
                fp[p] += 1;
            }
        }
        let total = truth.len() as u64;
        let tn = (0..k).map(|c| total - tp[c] - fp[c] - fn_[c]).collect();
        Ok(Self {
            classes: classes.to_vec(),
            tp,
            fp,
            fn_,
            tn,
        })
    }

    pub fn support(&self, class: usize) -> u64 {
        self.tp[class] + self.fn_[class]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    Macro,
    Weighted,
    PerClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub class: String,
    pub scores: Scores,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prf1Report {
    pub per_class: Vec<ClassScores>,
    #[serde(rename = "macro")]
    pub macro_avg: Scores,
    pub weighted: Scores,
}

impl Prf1Report {
    /// Averaged scores; `PerClass` has no single value and returns `None`.
    pub fn averaged(&self, averaging: Averaging) -> Option<Scores> {
        match averaging {
            Averaging::Macro => Some(self.macro_avg),
            Averaging::Weighted => Some(self.weighted),
            Averaging::PerClass => None,
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class precision, recall and F1, with a zero-denominator value of 0.
pub fn prf1(counts: &ConfusionCounts) -> Prf1Report {
    let per_class: Vec<ClassScores> = counts
        .classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let precision = ratio(counts.tp[c], counts.tp[c] + counts.fp[c]);
            let recall = ratio(counts.tp[c], counts.tp[c] + counts.fn_[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                class: name.clone(),
                scores: Scores {
                    precision,
                    recall,
                    f1,
                },
                support: counts.support(c),
            }
        })
        .collect();

    let mean_by = |weight: &dyn Fn(&ClassScores) -> f64| {
        let total: f64 = per_class.iter().map(weight).sum();
        if total == 0.0 {
            return Scores {
                precision: 0.0,
                recall: 0.0,
                f1: 0.0,
            };
        }
        let avg = |f: fn(&Scores) -> f64| {
            per_class.iter().map(|c| weight(c) * f(&c.scores)).sum::<f64>() / total
        };
        Scores {
            precision: avg(|s| s.precision),
            recall: avg(|s| s.recall),
            f1: avg(|s| s.f1),
        }
    };
    let macro_avg = mean_by(&|_| 1.0);
    let weighted = mean_by(&|c| c.support as f64);
    Prf1Report {
        per_class,
        macro_avg,
        weighted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: &[u64], fp: &[u64], fn_: &[u64]) -> ConfusionCounts {
        ConfusionCounts {
            classes: (0..tp.len()).map(|i| format!("c{i}")).collect(),
            tp: tp.to_vec(),
            fp: fp.to_vec(),
            fn_: fn_.to_vec(),
            tn: vec![0; tp.len()],
        }
    }

    #[test]
    fn two_thirds() {
        let r = prf1(&counts(&[2], &[1], &[1]));
        let s = r.per_class[0].scores;
        for v in [s.precision, s.recall, s.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_denominator_is_zero() {
        let r = prf1(&counts(&[0], &[0], &[3]));
        let s = r.per_class[0].scores;
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn macro_vs_weighted() {
        // Class 0: perfect, support 9. Class 1: never right, support 1.
        let r = prf1(&counts(&[9, 0], &[1, 0], &[0, 1]));
        assert_eq!(r.per_class[0].support, 9);
        assert_eq!(r.per_class[1].support, 1);
        let f1: Vec<f64> = r.per_class.iter().map(|c| c.scores.f1).collect();
        assert!((f1[0] - 18.0 / 19.0).abs() < 1e-15);

        let perfect = prf1(&counts(&[9, 0], &[0, 0], &[0, 1]));
        assert_eq!(perfect.per_class[0].scores.f1, 1.0);
        assert_eq!(perfect.per_class[1].scores.f1, 0.0);
        assert!((perfect.macro_avg.f1 - 0.5).abs() < 1e-15);
        assert!((perfect.weighted.f1 - 0.9).abs() < 1e-15);
        assert_eq!(perfect.averaged(Averaging::PerClass), None);
    }

    #[test]
    fn from_predictions_counts() {
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let truth = ["a", "a", "b", "c", "c", "c"];
        let pred = ["a", "b", "b", "c", "a", "c"];
        let c = ConfusionCounts::from_predictions(&classes, &truth, &pred).unwrap();
        assert_eq!(c.tp, vec![1, 1, 2]);
        assert_eq!(c.fp, vec![1, 1, 0]);
        assert_eq!(c.fn_, vec![1, 0, 1]);
        assert_eq!(c.tn, vec![3, 4, 3]);
        assert!(matches!(
            ConfusionCounts::from_predictions(&classes, &["a"], &["z"]),
            Err(MetricsError::UnknownLabel(_))
        ));
    }

    proptest! {
        #[test]
        fn equal_support_weighted_equals_macro(
            tp in proptest::collection::vec(0u64..50, 1..6),
            fps in proptest::collection::vec(0u64..50, 6),
        ) {
            // Same support (tp + fn) for every class.
            let support = 50u64;
            let tp: Vec<u64> = tp.iter().map(|&t| t.min(support)).collect();
            let fn_: Vec<u64> = tp.iter().map(|&t| support - t).collect();
            let fp: Vec<u64> = fps[..tp.len()].to_vec();
            let r = prf1(&counts(&tp, &fp, &fn_));
            prop_assert!((r.weighted.f1 - r.macro_avg.f1).abs() < 1e-12);
            prop_assert!((r.weighted.precision - r.macro_avg.precision).abs() < 1e-12);
        }
    }
}
