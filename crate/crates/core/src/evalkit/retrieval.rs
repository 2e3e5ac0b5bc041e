use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::normalize;
use crate::encoders::DualEncoder;
use crate::matrix::dot;
use crate::metrics::{average_precision, precision_at_k, recall_at_k, RankingJudgments};

use super::{Corpus, EvalError, Relevance, Result, RetrievalQuery};

/// Corpus indices with scores, best first; equal scores keep ascending
/// frame-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub frame_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub(crate) indices: Vec<usize>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

/// Rank the corpus by cosine similarity to a raw query vector.
pub fn rank_corpus(query: &[f64], corpus: &Corpus) -> Result<RankedList> {
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let q = normalize(query)?;
    let entries = corpus.entries();
    let scores: Vec<f64> = entries
        .iter()
        .map(|e| dot(q.as_slice(), e.embedding.as_slice()))
        .collect();
    let mut indices: Vec<usize> = (0..entries.len()).collect();
    // Stable sort over id-ordered indices keeps ties in frame-id order.
    indices.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(RankedList {
        frame_ids: indices.iter().map(|&i| entries[i].frame_id.clone()).collect(),
        scores: indices.iter().map(|&i| scores[i]).collect(),
        indices,
    })
}

pub fn retrieve(text: &str, corpus: &Corpus, encoder: &DualEncoder) -> Result<RankedList> {
    let q = encoder.embed_text(text)?;
    rank_corpus(q.as_slice(), corpus)
}

/// Mean AP plus P@K / R@K aligned with the evaluated K list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub precision_at: Vec<f64>,
    pub recall_at: Vec<f64>,
}

impl RetrievalMetrics {
    fn mean<'a>(items: impl IntoIterator<Item = (&'a RetrievalMetrics, f64)>) -> Option<RetrievalMetrics> {
        let mut acc: Option<RetrievalMetrics> = None;
        let mut total = 0.0;
        for (m, w) in items {
            total += w;
            let a = acc.get_or_insert_with(|| RetrievalMetrics {
                map: 0.0,
                precision_at: vec![0.0; m.precision_at.len()],
                recall_at: vec![0.0; m.recall_at.len()],
            });
            a.map += w * m.map;
            a.precision_at.iter_mut().zip(&m.precision_at).for_each(|(x, y)| *x += w * y);
            a.recall_at.iter_mut().zip(&m.recall_at).for_each(|(x, y)| *x += w * y);
        }
        let mut a = acc?;
        if total == 0.0 {
            return None;
        }
        a.map /= total;
        a.precision_at.iter_mut().for_each(|x| *x /= total);
        a.recall_at.iter_mut().for_each(|x| *x /= total);
        Some(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub text: String,
    pub relevance: Relevance,
    pub total_relevant: usize,
    /// `map` holds this query's AP.
    pub metrics: RetrievalMetrics,
}

/// A query with no relevant frame in the corpus; AP is undefined for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedQuery {
    pub text: String,
    pub relevance: Relevance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRetrieval {
    pub class: String,
    pub support: usize,
    pub queries: usize,
    pub metrics: RetrievalMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub k_list: Vec<usize>,
    pub queries: Vec<QueryResult>,
    pub excluded: Vec<ExcludedQuery>,
    pub excluded_count: usize,
    /// Mean over all scored queries.
    pub mean: Option<RetrievalMetrics>,
    /// Fine queries averaged per target class first.
    pub per_class: Vec<ClassRetrieval>,
    #[serde(rename = "macro")]
    pub macro_avg: Option<RetrievalMetrics>,
    /// Class means weighted by the number of corpus frames in each class.
    pub weighted: Option<RetrievalMetrics>,
}

/// Score every query over the full corpus ranking. Queries whose relevant
/// set is empty are excluded from every average and listed separately.
pub fn evaluate_retrieval(
    queries: &[RetrievalQuery],
    corpus: &Corpus,
    encoder: &DualEncoder,
    k_list: &[usize],
) -> Result<RetrievalReport> {
    if k_list.is_empty() {
        return Err(EvalError::EmptyKList);
    }
    if corpus.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    for &k in k_list {
        if k == 0 || k > corpus.len() {
            return Err(crate::metrics::MetricsError::BadK { k, n: corpus.len() }.into());
        }
    }
    for q in queries {
        if let Relevance::Fine(t) = &q.relevance {
            if !corpus.classes().contains(t) {
                return Err(EvalError::UnknownTarget(t.clone()));
            }
        }
    }

    let scored = queries
        .par_iter()
        .map(|q| {
            let ranked = retrieve(&q.text, corpus, encoder)?;
            let rel: Vec<bool> = ranked
                .indices
                .iter()
                .map(|&i| q.relevance.is_relevant(&corpus.entries()[i]))
                .collect();
            let j = RankingJudgments::complete(rel);
            if j.total_relevant() == 0 {
                return Ok(None);
            }
            let metrics = RetrievalMetrics {
                map: average_precision(&j)?,
                precision_at: k_list.iter().map(|&k| precision_at_k(&j, k)).collect::<std::result::Result<_, _>>()?,
                recall_at: k_list.iter().map(|&k| recall_at_k(&j, k)).collect::<std::result::Result<_, _>>()?,
            };
            Ok(Some(QueryResult {
                text: q.text.clone(),
                relevance: q.relevance.clone(),
                total_relevant: j.total_relevant(),
                metrics,
            }))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut results = Vec::new();
    let mut excluded = Vec::new();
    for (q, r) in queries.iter().zip(scored) {
        match r {
            Some(r) => results.push(r),
            None => excluded.push(ExcludedQuery {
                text: q.text.clone(),
                relevance: q.relevance.clone(),
            }),
        }
    }

    let support = corpus.class_support();
    let mut by_class: BTreeMap<&str, Vec<&RetrievalMetrics>> = BTreeMap::new();
    for r in &results {
        if let Relevance::Fine(t) = &r.relevance {
            by_class.entry(t.as_str()).or_default().push(&r.metrics);
        }
    }
    let per_class: Vec<ClassRetrieval> = by_class
        .into_iter()
        .map(|(class, ms)| ClassRetrieval {
            class: class.to_owned(),
            support: support[class],
            queries: ms.len(),
            metrics: RetrievalMetrics::mean(ms.into_iter().map(|m| (m, 1.0))).expect("non-empty group"),
        })
        .collect();

    Ok(RetrievalReport {
        k_list: k_list.to_vec(),
        mean: RetrievalMetrics::mean(results.iter().map(|r| (&r.metrics, 1.0))),
        macro_avg: RetrievalMetrics::mean(per_class.iter().map(|c| (&c.metrics, 1.0))),
        weighted: RetrievalMetrics::mean(per_class.iter().map(|c| (&c.metrics, c.support as f64))),
        per_class,
        excluded_count: excluded.len(),
        excluded,
        queries: results,
    })
}

#[cfg(test)]
mod tests {
    use super::super::testutil::entry;
    use super::*;
    use crate::data::BinaryGroup::{Abnormal, Normal};
    use crate::encoders::{init_params, EncoderDims, HeadMode, TextFeaturizerConfig};
    use crate::rng::SplitMix64;

    #[test]
    fn single_frame_and_ties() {
        let c = Corpus::new(vec![entry("only", "a", Normal, &[1.0, 0.0])], &[]).unwrap();
        assert_eq!(rank_corpus(&[0.3, 0.4], &c).unwrap().frame_ids, ["only"]);
        let c = Corpus::new(
            vec![
                entry("b", "a", Normal, &[1.0, 0.0]),
                entry("a", "a", Normal, &[1.0, 0.0]),
                entry("c", "a", Normal, &[0.0, 1.0]),
            ],
            &[],
        )
        .unwrap();
        let r = rank_corpus(&[1.0, 0.2], &c).unwrap();
        assert_eq!(r.frame_ids, ["a", "b", "c"]);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(
            rank_corpus(&[1.0], &Corpus::new(vec![], &[]).unwrap()),
            Err(EvalError::EmptyCorpus)
        ));
    }

    #[test]
    fn exact_match_ranks_first_and_scale_invariant() {
        let mut rng = SplitMix64::new(8);
        let entries: Vec<_> = (0..30)
            .map(|i| {
                let v: Vec<f64> = (0..5).map(|_| rng.next_gaussian()).collect();
                entry(&format!("f{i:02}"), "a", Normal, &v)
            })
            .collect();
        let c = Corpus::new(entries, &[]).unwrap();
        let target = c.entries()[17].embedding.as_slice().to_vec();
        let r = rank_corpus(&target, &c).unwrap();
        assert_eq!(r.frame_ids[0], "f17");
        let scaled: Vec<f64> = target.iter().map(|x| x * 7.5).collect();
        assert_eq!(rank_corpus(&scaled, &c).unwrap().frame_ids, r.frame_ids);
    }

    fn encoder(dim: usize) -> DualEncoder {
        let params = init_params(2, EncoderDims::new(dim, 16, 4, HeadMode::Identity)).unwrap();
        DualEncoder::new(params, TextFeaturizerConfig::new(16).unwrap()).unwrap()
    }

    #[test]
    fn exclusions_and_aggregates() {
        let enc = encoder(2);
        let c = Corpus::new(
            vec![
                entry("a", "normal", Normal, &[1.0, 0.0]),
                entry("b", "normal", Normal, &[0.0, 1.0]),
            ],
            &["normal".into(), "polyp".into()],
        )
        .unwrap();
        let queries = vec![
            RetrievalQuery {
                text: "any lesion".into(),
                relevance: Relevance::Coarse,
            },
            RetrievalQuery {
                text: "a polyp".into(),
                relevance: Relevance::Fine("polyp".into()),
            },
            RetrievalQuery {
                text: "clean".into(),
                relevance: Relevance::Fine("normal".into()),
            },
        ];
        let r = evaluate_retrieval(&queries, &c, &enc, &[1, 2]).unwrap();
        assert_eq!(r.excluded_count, 2);
        assert_eq!(r.queries.len(), 1);
        let m = r.mean.unwrap();
        assert_eq!(m.map, 1.0);
        assert_eq!(m.recall_at, vec![0.5, 1.0]);
        assert_eq!(m.precision_at, vec![1.0, 1.0]);
        assert_eq!(r.macro_avg, r.weighted);

        assert!(matches!(
            evaluate_retrieval(&queries, &c, &enc, &[3]),
            Err(EvalError::Metrics(crate::metrics::MetricsError::BadK { k: 3, n: 2 }))
        ));
        let unknown = [RetrievalQuery {
            text: "x".into(),
            relevance: Relevance::Fine("ulcer".into()),
        }];
        assert!(matches!(
            evaluate_retrieval(&unknown, &c, &enc, &[1]),
            Err(EvalError::UnknownTarget(t)) if t == "ulcer"
        ));
    }

    #[test]
    fn fine_macro_and_weighted() {
        let enc = encoder(3);
        let mut entries = Vec::new();
        for i in 0..6 {
            entries.push(entry(&format!("p{i}"), "polyp", Abnormal, &[1.0, 0.1 * i as f64, 0.0]));
        }
        for i in 0..2 {
            entries.push(entry(&format!("u{i}"), "ulcer", Abnormal, &[0.0, 1.0, 0.1 * i as f64]));
        }
        let c = Corpus::new(entries, &[]).unwrap();
        let q = |t: &str, c: &str| RetrievalQuery {
            text: t.into(),
            relevance: Relevance::Fine(c.into()),
        };
        let qs = [q("polyp one", "polyp"), q("polyp two", "polyp"), q("ulcer", "ulcer")];
        let r = evaluate_retrieval(&qs, &c, &enc, &[8]).unwrap();
        let polyp = &r.per_class[0];
        let ulcer = &r.per_class[1];
        assert_eq!((polyp.support, polyp.queries), (6, 2));
        let expect_macro = (polyp.metrics.map + ulcer.metrics.map) / 2.0;
        let expect_weighted = (6.0 * polyp.metrics.map + 2.0 * ulcer.metrics.map) / 8.0;
        assert!((r.macro_avg.unwrap().map - expect_macro).abs() < 1e-15);
        assert!((r.weighted.unwrap().map - expect_weighted).abs() < 1e-15);
        // K equal to the corpus size recovers every relevant frame.
        assert!(r.queries.iter().all(|q| q.metrics.recall_at[0] == 1.0));
    }
}
