use serde::{Deserialize, Serialize};

use super::metrics::{gold_rank, mean, ndcg_at_rank};
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::seeding;
use crate::training::{sample_negatives, Conditioned, HashtagData, Pass, PersonalizedSystem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub writer: String,
    pub gold: usize,
    pub rank: usize,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub records: Vec<RankRecord>,
    /// Negatives actually drawn per example.
    pub k_eval: usize,
    pub warning: Option<String>,
}

impl RankOutcome {
    pub fn mean_ndcg5(&self) -> f64 {
        mean(&self.records.iter().map(|r| r.ndcg5).collect::<Vec<_>>())
    }

    pub fn mean_ndcg10(&self) -> f64 {
        mean(&self.records.iter().map(|r| r.ndcg10).collect::<Vec<_>>())
    }
}

/// `k_eval` capped at `inventory - 1`, with a note when capped.
pub fn effective_k(k_eval: usize, inventory: usize) -> (usize, Option<String>) {
    let cap = inventory.saturating_sub(1);
    if k_eval > cap {
        (cap, Some(format!("k_eval reduced from {k_eval} to {cap} (inventory of {inventory})")))
    } else {
        (k_eval, None)
    }
}

/// Ranks each gold against sampled negatives under an arbitrary scorer
/// `score(example, tag)`. Negatives for example `i` depend only on `seed`
/// and `i`.
pub fn rank_with<F>(golds: &[(String, usize)], inventory: usize, k_eval: usize, seed: u64, mut score: F) -> Result<RankOutcome>
where
    F: FnMut(usize, usize) -> f64,
{
    let (k, warning) = effective_k(k_eval, inventory);
    if k == 0 {
        return Err(Error::contract("ranking needs at least two candidates"));
    }
    let mut records = Vec::with_capacity(golds.len());
    for (i, (writer, gold)) in golds.iter().enumerate() {
        let mut ids = vec![*gold];
        ids.extend(sample_negatives(*gold, inventory, k, &mut seeding::rng(seed, &format!("rank/{i}")))?);
        let scores: Vec<f64> = ids.iter().map(|&t| score(i, t)).collect();
        let rank = gold_rank(&scores, &ids, 0);
        records.push(RankRecord {
            writer: writer.clone(),
            gold: *gold,
            rank,
            ndcg5: ndcg_at_rank(rank, 5),
            ndcg10: ndcg_at_rank(rank, 10),
        });
    }
    Ok(RankOutcome {
        records,
        k_eval: k,
        warning,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected `[CLS]` vectors of every tag in the inventory.
pub fn tag_vectors(sys: &PersonalizedSystem, data: &HashtagData) -> Result<Vec<Vec<f64>>> {
    data.tag_ids
        .iter()
        .map(|ids| {
            let mut pass = Pass::new(sys, false)?;
            let c = pass.cls_ids(ids)?;
            let v = pass.project(c)?;
            Ok(pass.tape.value(v).to_vec())
        })
        .collect()
}

/// Projected, writer-conditioned `[CLS]` vector of one text.
pub fn query_vector(sys: &PersonalizedSystem, who: Conditioned<'_>, x: &[usize]) -> Result<Vec<f64>> {
    let mut pass = Pass::new(sys, false)?;
    let c = pass.cls(who, x)?;
    let v = pass.project(c)?;
    Ok(pass.tape.value(v).to_vec())
}

/// Inner-product ranking of each example's gold hashtag against `k_eval`
/// sampled negatives.
pub fn rank_eval<'e, F>(
    sys: &PersonalizedSystem,
    examples: &'e [Example],
    data: &HashtagData,
    k_eval: usize,
    seed: u64,
    route: F,
) -> Result<RankOutcome>
where
    F: Fn(&'e Example) -> Conditioned<'e>,
{
    let tags = tag_vectors(sys, data)?;
    let queries: Vec<Vec<f64>> = examples
        .iter()
        .map(|e| query_vector(sys, route(e), &e.tokens))
        .collect::<Result<_>>()?;
    let golds: Vec<(String, usize)> = examples
        .iter()
        .map(|e| {
            e.label
                .hashtag()
                .map(|g| (e.writer.clone(), g))
                .ok_or_else(|| Error::contract("ranking needs hashtag labels"))
        })
        .collect::<Result<_>>()?;
    rank_with(&golds, tags.len(), k_eval, seed, |i, t| dot(&queries[i], &tags[t]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::expected_random_ndcg;
    use rand::Rng;

    fn golds(n: usize, inv: usize) -> Vec<(String, usize)> {
        (0..n).map(|i| (format!("w{}", i % 3), (i * 7) % inv)).collect()
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let g = golds(40, 30);
        let out = rank_with(&g, 30, 200, 1, |i, t| if t == g[i].1 { f64::INFINITY } else { 0.0 }).unwrap();
        assert_eq!(out.k_eval, 29);
        assert!(out.warning.is_some());
        assert_eq!(out.mean_ndcg5(), 1.0);
        assert_eq!(out.mean_ndcg10(), 1.0);
    }

    #[test]
    fn constant_scores_rank_by_id() {
        let g = vec![("a".to_string(), 0), ("a".to_string(), 3)];
        let out = rank_with(&g, 4, 3, 1, |_, _| 0.0).unwrap();
        assert_eq!(out.records[0].rank, 1);
        assert_eq!(out.records[1].rank, 4);
    }

    #[test]
    fn exhaustive_when_k_covers_inventory() {
        let g = golds(20, 12);
        let score = |i: usize, t: usize| ((i * 31 + t * 17) % 13) as f64;
        let out = rank_with(&g, 12, 11, 5, score).unwrap();
        for (i, r) in out.records.iter().enumerate() {
            let mut all: Vec<usize> = (0..12).collect();
            all.sort_by(|&a, &b| score(i, b).partial_cmp(&score(i, a)).unwrap().then(a.cmp(&b)));
            let pos = all.iter().position(|&t| t == r.gold).unwrap() + 1;
            assert_eq!(r.rank, pos);
        }
    }

    #[test]
    fn random_scores_match_expectation() {
        let g = golds(6000, 400);
        let mut rng = seeding::rng(9, "scores");
        let out = rank_with(&g, 400, 200, 3, |_, _| rng.random::<f64>()).unwrap();
        let exp = expected_random_ndcg(201, 5);
        assert!((out.mean_ndcg5() - exp).abs() / exp < 0.1, "{} vs {exp}", out.mean_ndcg5());
        let again = rank_with(&g, 400, 200, 3, |i, t| ((i * 7919 + t * 104_729) % 1000) as f64);
        assert_eq!(again.unwrap(), rank_with(&g, 400, 200, 3, |i, t| ((i * 7919 + t * 104_729) % 1000) as f64).unwrap());
    }
}
