use crate::error::{Error, Result};

/// Unweighted mean of per-class F1 over `classes` classes. A class absent
/// from both predictions and golds scores 0.
pub fn macro_f1(pred: &[usize], gold: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "macro_f1 needs equal lengths, got {} predictions and {} golds",
            pred.len(),
            gold.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(gold).find(|&&c| c >= classes) {
        return Err(Error::Index {
            what: "class label",
            index: bad,
            bound: classes,
        });
    }
    if classes == 0 {
        return Ok(0.0);
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let sum: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    Ok(sum / classes as f64)
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    hits as f64 / pred.len() as f64
}

/// Gain of a single relevant item at 1-based `rank` with cutoff `n`.
pub fn ndcg_at_rank(rank: usize, n: usize) -> f64 {
    if rank == 0 || rank > n {
        0.0
    } else {
        1.0 / ((rank + 1) as f64).log2()
    }
}

/// nDCG@n of `ranking` (best first) with one relevant item `gold`.
pub fn ndcg_at_n(ranking: &[usize], gold: usize, n: usize) -> Result<f64> {
    let pos = ranking
        .iter()
        .position(|&c| c == gold)
        .ok_or_else(|| Error::contract(format!("gold {gold} is not among the candidates")))?;
    Ok(ndcg_at_rank(pos + 1, n))
}

/// Expected nDCG@n when the gold's rank is uniform over `candidates`.
pub fn expected_random_ndcg(candidates: usize, n: usize) -> f64 {
    if candidates == 0 {
        return 0.0;
    }
    (1..=n.min(candidates)).map(|r| ndcg_at_rank(r, n)).sum::<f64>() / candidates as f64
}

/// 1-based rank of `candidates[gold_pos]` when sorting by descending score,
/// ties broken by ascending id.
pub fn gold_rank(scores: &[f64], ids: &[usize], gold_pos: usize) -> usize {
    let (gs, gid) = (scores[gold_pos], ids[gold_pos]);
    1 + scores
        .iter()
        .zip(ids)
        .enumerate()
        .filter(|&(i, (&s, &id))| i != gold_pos && (s > gs || (s == gs && id < gid)))
        .count()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        let gold = [0, 0, 1, 1, 2, 2];
        let f = macro_f1(&[0; 6], &gold, 3).unwrap();
        assert!((f - 1.0 / 6.0).abs() < 1e-15);
        assert!(macro_f1(&[0], &[0, 1], 3).is_err());
        assert!(macro_f1(&[3], &[0], 3).is_err());
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_n(&[4, 1, 2], 4, 5).unwrap(), 1.0);
        assert_eq!(ndcg_at_n(&[9, 8, 4, 1], 4, 5).unwrap(), 0.5);
        assert_eq!(ndcg_at_n(&[1, 2, 3, 5, 6, 7, 4], 4, 5).unwrap(), 0.0);
        assert!(ndcg_at_n(&[1, 2], 4, 5).is_err());
    }

    #[test]
    fn random_expectation_closed_form() {
        let v = expected_random_ndcg(201, 5);
        let by_hand = (1.0 + 1.0 / 3f64.log2() + 0.5 + 1.0 / 5f64.log2() + 1.0 / 6f64.log2()) / 201.0;
        assert!((v - by_hand).abs() < 1e-15);
        assert!((v - 0.014669).abs() < 1e-6, "{v}");
    }

    #[test]
    fn ranks_break_ties_by_id() {
        let scores = [0.5, 0.9, 0.5, 0.5];
        let ids = [7, 3, 2, 9];
        assert_eq!(gold_rank(&scores, &ids, 0), 3);
        assert_eq!(gold_rank(&scores, &ids, 2), 2);
        assert_eq!(gold_rank(&scores, &ids, 1), 1);
        assert_eq!(gold_rank(&scores, &ids, 3), 4);
    }

    #[test]
    fn std_is_sample_and_zero_for_one() {
        assert_eq!(std_dev(&[0.7]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn f1_is_permutation_invariant(pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..60), rot in 0usize..60) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let k = rot % pairs.len();
            let (mut p2, mut g2) = (p.clone(), g.clone());
            p2.rotate_left(k);
            g2.rotate_left(k);
            prop_assert_eq!(macro_f1(&p, &g, 3).unwrap(), macro_f1(&p2, &g2, 3).unwrap());
        }

        #[test]
        fn ndcg_is_monotone_in_rank(r in 1usize..50, n in 1usize..20) {
            prop_assert!(ndcg_at_rank(r, n) >= ndcg_at_rank(r + 1, n));
        }
    }
}
