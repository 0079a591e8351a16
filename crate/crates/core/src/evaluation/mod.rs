//! Metrics, ranking against sampled negatives, per-writer consistency
//! groups and held-out writer strategies.

mod consistency;
mod metrics;
mod ranking;
mod unknown;

pub use consistency::{consistency_groups, ConsistencyGroups, ExampleScore, WriterInterval, RESAMPLES};
pub use metrics::{accuracy, expected_random_ndcg, gold_rank, macro_f1, mean, ndcg_at_n, ndcg_at_rank, std_dev};
pub use ranking::{effective_k, query_vector, rank_eval, rank_with, tag_vectors, RankOutcome, RankRecord};
pub use unknown::{nearest_writer, writer_embedding, writer_embeddings, Strategy, UnknownRouting};

pub use crate::training::predict_sentiment;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::Example;
use crate::error::{Error, Result};

/// Metrics of one seed: pooled values by name plus the primary metric per
/// writer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub overall: BTreeMap<String, f64>,
    pub per_writer: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

/// Per-seed metrics with mean and sample standard deviation of each
/// pooled metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub primary: String,
    pub seeds: Vec<SeedMetrics>,
    pub summary: BTreeMap<String, Summary>,
}

impl MetricReport {
    pub fn new(primary: &str, seeds: Vec<SeedMetrics>) -> Self {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for s in &seeds {
            for (k, v) in &s.overall {
                values.entry(k.clone()).or_default().push(*v);
            }
        }
        let summary = values
            .into_iter()
            .map(|(k, v)| {
                (
                    k,
                    Summary {
                        mean: mean(&v),
                        std: std_dev(&v),
                    },
                )
            })
            .collect();
        Self {
            primary: primary.to_string(),
            seeds,
            summary,
        }
    }

    pub fn primary_summary(&self) -> Option<&Summary> {
        self.summary.get(&self.primary)
    }

    /// One row per writer per seed: `seed,writer,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("seed,writer,metric,value\n");
        for s in &self.seeds {
            for (w, v) in &s.per_writer {
                let _ = writeln!(out, "{},{},{},{}", s.seed, w, self.primary, v);
            }
        }
        out
    }
}

fn gold_classes(examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| {
            e.label
                .class()
                .map(|c| c.index())
                .ok_or_else(|| Error::contract("expected class labels"))
        })
        .collect()
}

/// Pooled macro-F1 and accuracy, plus macro-F1 per writer.
pub fn sentiment_metrics(pred: &[usize], examples: &[Example], seed: u64) -> Result<SeedMetrics> {
    let gold = gold_classes(examples)?;
    let mut overall = BTreeMap::new();
    overall.insert("macro_f1".to_string(), macro_f1(pred, &gold, 3)?);
    overall.insert("accuracy".to_string(), accuracy(pred, &gold));
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for ((p, g), e) in pred.iter().zip(&gold).zip(examples) {
        let slot = groups.entry(e.writer.as_str()).or_default();
        slot.0.push(*p);
        slot.1.push(*g);
    }
    let per_writer = groups
        .into_iter()
        .map(|(w, (p, g))| Ok((w.to_string(), macro_f1(&p, &g, 3)?)))
        .collect::<Result<_>>()?;
    Ok(SeedMetrics {
        seed,
        overall,
        per_writer,
    })
}

/// Mean nDCG@5 and @10 overall, nDCG@5 per writer.
pub fn hashtag_metrics(outcome: &RankOutcome, seed: u64) -> SeedMetrics {
    let mut overall = BTreeMap::new();
    overall.insert("ndcg@5".to_string(), outcome.mean_ndcg5());
    overall.insert("ndcg@10".to_string(), outcome.mean_ndcg10());
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in &outcome.records {
        groups.entry(r.writer.as_str()).or_default().push(r.ndcg5);
    }
    let per_writer = groups.into_iter().map(|(w, v)| (w.to_string(), mean(&v))).collect();
    SeedMetrics {
        seed,
        overall,
        per_writer,
    }
}

/// 0/1 correctness per example.
pub fn sentiment_scores(pred: &[usize], examples: &[Example]) -> Result<Vec<ExampleScore>> {
    let gold = gold_classes(examples)?;
    Ok(pred
        .iter()
        .zip(&gold)
        .zip(examples)
        .map(|((p, g), e)| ExampleScore {
            writer: e.writer.clone(),
            score: f64::from(u8::from(p == g)),
        })
        .collect())
}

/// nDCG@5 per example.
pub fn hashtag_scores(outcome: &RankOutcome) -> Vec<ExampleScore> {
    outcome
        .records
        .iter()
        .map(|r| ExampleScore {
            writer: r.writer.clone(),
            score: r.ndcg5,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Label, Sentiment};

    fn ex(w: &str, c: usize) -> Example {
        Example {
            writer: w.into(),
            tokens: vec![7],
            label: Label::Class(Sentiment::from_index(c).unwrap()),
            timestamp: None,
        }
    }

    #[test]
    fn overall_is_pooled_not_mean_of_writers() {
        let examples = vec![ex("a", 0), ex("a", 1), ex("b", 2), ex("b", 2), ex("b", 0)];
        let pred = vec![0, 0, 2, 2, 2];
        let m = sentiment_metrics(&pred, &examples, 1).unwrap();
        let gold: Vec<usize> = vec![0, 1, 2, 2, 0];
        assert_eq!(m.overall["macro_f1"], macro_f1(&pred, &gold, 3).unwrap());
        let avg = mean(&m.per_writer.values().copied().collect::<Vec<_>>());
        assert!((avg - m.overall["macro_f1"]).abs() > 1e-6);
        assert_eq!(sentiment_scores(&pred, &examples).unwrap().iter().map(|s| s.score).sum::<f64>(), 3.0);
    }

    #[test]
    fn report_summary_and_csv() {
        let seeds = (0..3)
            .map(|s| {
                let mut overall = BTreeMap::new();
                overall.insert("macro_f1".to_string(), 0.5 + s as f64 * 0.1);
                let mut per_writer = BTreeMap::new();
                per_writer.insert("a".to_string(), 0.4);
                SeedMetrics {
                    seed: s,
                    overall,
                    per_writer,
                }
            })
            .collect();
        let r = MetricReport::new("macro_f1", seeds);
        let s = r.primary_summary().unwrap();
        assert!((s.mean - 0.6).abs() < 1e-12);
        assert!((s.std - 0.1).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().count(), 4);
        let one = MetricReport::new("macro_f1", r.seeds[..1].to_vec());
        assert_eq!(one.primary_summary().unwrap().std, 0.0);
    }
}
