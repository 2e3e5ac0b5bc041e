use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::UnitEmbedding;
use crate::data::BinaryGroup;
use crate::encoders::DualEncoder;
use crate::matrix::dot;
use crate::metrics::{
    aggregate_prompt_sets, mean_curve, pr_curve, prf1, roc_curve, ConfusionCounts, Curve, MeanCurve, Prf1Report,
    Summary, DEFAULT_GRID_SIZE,
};

use super::{Corpus, CorpusEntry, EvalError, PromptMode, PromptSet, Result};

/// Softmax of `sims · inv_tau`, shifted by the row maximum.
pub fn scaled_softmax(sims: &[f64], inv_tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = sims.iter().map(|s| s * inv_tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotOutput {
    /// Prompt classes in ascending order; probability vectors follow it.
    pub classes: Vec<String>,
    pub probabilities: BTreeMap<String, Vec<f64>>,
}

impl ZeroShotOutput {
    /// Arg-max class per frame; equal probabilities go to the earlier class.
    pub fn predictions(&self) -> BTreeMap<String, String> {
        self.probabilities
            .iter()
            .map(|(id, p)| {
                let mut best = 0;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = c;
                    }
                }
                (id.clone(), self.classes[best].clone())
            })
            .collect()
    }

    pub fn probability_of(&self, frame_id: &str, class: &str) -> Option<f64> {
        let c = self.classes.iter().position(|x| x == class)?;
        Some(self.probabilities.get(frame_id)?[c])
    }
}

/// Class probabilities for every corpus frame: softmax over the cosine
/// similarities to each encoded prompt, scaled by the model's `1/τ`.
pub fn zero_shot_classify(corpus: &Corpus, prompts: &PromptSet, encoder: &DualEncoder) -> Result<ZeroShotOutput> {
    prompts.validate()?;
    let classes = prompts.classes();
    let prompt_embeddings = prompts
        .entries
        .values()
        .map(|text| encoder.embed_text(text))
        .collect::<std::result::Result<Vec<UnitEmbedding>, _>>()?;
    let inv_tau = encoder.params.log_inv_tau.exp();
    let probabilities = corpus
        .entries()
        .par_iter()
        .map(|e| {
            let sims: Vec<f64> = prompt_embeddings
                .iter()
                .map(|p| dot(e.embedding.as_slice(), p.as_slice()))
                .collect();
            (e.frame_id.clone(), scaled_softmax(&sims, inv_tau))
        })
        .collect();
    Ok(ZeroShotOutput { classes, probabilities })
}

fn truth_label(mode: PromptMode, e: &CorpusEntry) -> &str {
    match mode {
        PromptMode::Binary => e.binary_group.as_str(),
        PromptMode::Multiclass => &e.class_label,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSetResult {
    pub name: String,
    pub scores: Prf1Report,
    /// Binary sets only, with abnormal as the positive class.
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    #[serde(skip)]
    pub roc: Option<Curve>,
    #[serde(skip)]
    pub pr: Option<Curve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub mode: PromptMode,
    pub sets: Vec<PromptSetResult>,
    pub macro_f1: Summary,
    pub weighted_f1: Summary,
    pub auroc: Option<Summary>,
    pub auprc: Option<Summary>,
    #[serde(skip)]
    pub mean_roc: Option<MeanCurve>,
    #[serde(skip)]
    pub mean_pr: Option<MeanCurve>,
}

fn evaluate_set(corpus: &Corpus, set: &PromptSet, encoder: &DualEncoder) -> Result<PromptSetResult> {
    let out = zero_shot_classify(corpus, set, encoder)?;
    let predicted = out.predictions();
    let truth: Vec<&str> = corpus.entries().iter().map(|e| truth_label(set.mode, e)).collect();
    if let Some(missing) = truth.iter().find(|t| !set.entries.contains_key(**t)) {
        return Err(EvalError::MissingPrompt {
            set: set.name.clone(),
            class: (*missing).to_owned(),
        });
    }
    let pred: Vec<&str> = corpus.entries().iter().map(|e| predicted[&e.frame_id].as_str()).collect();
    let counts = ConfusionCounts::from_predictions(&out.classes, &truth, &pred)?;

    let (mut roc, mut pr, mut auroc, mut auprc) = (None, None, None, None);
    let abnormal = BinaryGroup::Abnormal.as_str();
    let has_both = truth.contains(&abnormal) && truth.contains(&BinaryGroup::Normal.as_str());
    if set.mode == PromptMode::Binary && has_both && set.entries.contains_key(abnormal) {
        let scores: Vec<f64> = corpus
            .entries()
            .iter()
            .map(|e| out.probability_of(&e.frame_id, abnormal).expect("abnormal prompt present"))
            .collect();
        let labels: Vec<bool> = truth.iter().map(|t| *t == abnormal).collect();
        let (c, a) = roc_curve(&scores, &labels)?;
        roc = Some(c);
        auroc = Some(a);
        let (c, a) = pr_curve(&scores, &labels)?;
        pr = Some(c);
        auprc = Some(a);
    }
    Ok(PromptSetResult {
        name: set.name.clone(),
        scores: prf1(&counts),
        auroc,
        auprc,
        roc,
        pr,
    })
}

fn summarize(values: Vec<Option<f64>>) -> Result<Option<Summary>> {
    let present: Option<Vec<f64>> = values.into_iter().collect();
    Ok(match present {
        Some(v) => Some(aggregate_prompt_sets(&v)?),
        None => None,
    })
}

/// Score every prompt set and aggregate across sets (mean, population
/// spread, extremes; vertically averaged curves for binary sets).
pub fn evaluate_zero_shot(corpus: &Corpus, sets: &[PromptSet], encoder: &DualEncoder) -> Result<ZeroShotReport> {
    let mode = sets.first().ok_or(EvalError::NoPromptSets)?.mode;
    if sets.iter().any(|s| s.mode != mode) {
        return Err(EvalError::MixedPromptModes);
    }
    let results = sets
        .iter()
        .map(|s| evaluate_set(corpus, s, encoder))
        .collect::<Result<Vec<_>>>()?;
    let macro_f1: Vec<f64> = results.iter().map(|r| r.scores.macro_avg.f1).collect();
    let weighted_f1: Vec<f64> = results.iter().map(|r| r.scores.weighted.f1).collect();
    let curves = |pick: fn(&PromptSetResult) -> Option<Curve>| -> Result<Option<MeanCurve>> {
        let all: Option<Vec<Curve>> = results.iter().map(pick).collect();
        Ok(match all {
            Some(c) => Some(mean_curve(&c, DEFAULT_GRID_SIZE)?),
            None => None,
        })
    };
    Ok(ZeroShotReport {
        mode,
        macro_f1: aggregate_prompt_sets(&macro_f1)?,
        weighted_f1: aggregate_prompt_sets(&weighted_f1)?,
        auroc: summarize(results.iter().map(|r| r.auroc).collect())?,
        auprc: summarize(results.iter().map(|r| r.auprc).collect())?,
        mean_roc: curves(|r| r.roc.clone())?,
        mean_pr: curves(|r| r.pr.clone())?,
        sets: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{init_params, EncoderDims, HeadMode, TextFeaturizerConfig};
    use proptest::prelude::*;

    fn toy_encoder() -> DualEncoder {
        let params = init_params(4, EncoderDims::new(3, 16, 3, HeadMode::Identity)).unwrap();
        DualEncoder::new(params, TextFeaturizerConfig::new(16).unwrap()).unwrap()
    }

    fn set(mode: PromptMode, entries: &[(&str, &str)]) -> PromptSet {
        PromptSet {
            name: "s".into(),
            mode,
            entries: entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    fn toy_corpus(enc: &DualEncoder) -> Corpus {
        let records = [("f1", "polyp", BinaryGroup::Abnormal), ("f2", "normal", BinaryGroup::Normal)];
        let entries = records
            .iter()
            .enumerate()
            .map(|(i, (id, class, group))| {
                let mut x = vec![0.1; 3];
                x[i] = 1.0;
                CorpusEntry {
                    frame_id: id.to_string(),
                    class_label: class.to_string(),
                    binary_group: *group,
                    embedding: enc.embed_image(&x).unwrap(),
                }
            })
            .collect();
        Corpus::new(entries, &[]).unwrap()
    }

    #[test]
    fn single_prompt_gets_all_mass() {
        let enc = toy_encoder();
        let c = toy_corpus(&enc);
        let out = zero_shot_classify(&c, &set(PromptMode::Multiclass, &[("polyp", "a polyp")]), &enc).unwrap();
        assert!(out.probabilities.values().all(|p| p == &vec![1.0]));
    }

    #[test]
    fn probabilities_sum_to_one() {
        let enc = toy_encoder();
        let c = toy_corpus(&enc);
        let s = set(PromptMode::Binary, &[("Normal", "clean mucosa"), ("Abnormal", "bleeding lesion")]);
        let out = zero_shot_classify(&c, &s, &enc).unwrap();
        for p in out.probabilities.values() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let report = evaluate_zero_shot(&c, &[s.clone(), s], &enc).unwrap();
        assert_eq!(report.sets.len(), 2);
        assert!(report.auroc.is_some());
        assert_eq!(report.macro_f1.std, 0.0);
        assert_eq!(report.mean_roc.as_ref().unwrap().x.len(), DEFAULT_GRID_SIZE);
    }

    #[test]
    fn argmax_matches_aligned_prompt() {
        // Exact alignment: embedding equal to prompt 1, orthogonal to prompt 0.
        let p = scaled_softmax(&[0.0, 1.0, 0.0], 1.0 / 0.07);
        assert!(p[1] > p[0] && p[1] > p[2]);
        assert_eq!(p[0], p[2]);
    }

    #[test]
    fn missing_prompt_named() {
        let enc = toy_encoder();
        let c = toy_corpus(&enc);
        let s = set(PromptMode::Multiclass, &[("polyp", "a polyp")]);
        assert!(matches!(
            evaluate_zero_shot(&c, &[s], &enc),
            Err(EvalError::MissingPrompt { class, .. }) if class == "normal"
        ));
        let a = set(PromptMode::Multiclass, &[("polyp", "a polyp"), ("normal", "clean")]);
        let b = set(PromptMode::Binary, &[("Normal", "clean")]);
        assert!(matches!(evaluate_zero_shot(&c, &[a, b], &enc), Err(EvalError::MixedPromptModes)));
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(
            sims in proptest::collection::vec(-1.0f64..1.0, 1..10),
            shift in -5.0f64..5.0,
            inv_tau in 1.0f64..100.0,
        ) {
            let base = scaled_softmax(&sims, inv_tau);
            let moved: Vec<f64> = sims.iter().map(|s| s + shift / inv_tau).collect();
            let shifted = scaled_softmax(&moved, inv_tau);
            for (a, b) in base.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
