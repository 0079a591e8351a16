use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const RESAMPLES: usize = 1000;

/// Per-example score of one system: 0/1 correctness for classification,
/// nDCG@5 for ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub writer: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterInterval {
    pub writer: String,
    pub examples: usize,
    pub mean_diff: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Writers whose method-minus-baseline interval lies above zero (`ga`),
/// below zero (`gb`), or straddles it (`gc`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyGroups {
    pub ga: Vec<String>,
    pub gb: Vec<String>,
    pub gc: Vec<String>,
    /// Writers placed in `gc` because they have fewer than two examples.
    pub flagged: Vec<String>,
    pub pct_a: f64,
    pub pct_b: f64,
    pub pct_c: f64,
    pub intervals: Vec<WriterInterval>,
}

/// Paired bootstrap per writer with 95% percentile intervals. Resample
/// indices depend only on `seed` and the writer, so swapping the two
/// systems negates every resampled mean and swaps `ga` with `gb` exactly.
pub fn consistency_groups(method: &[ExampleScore], baseline: &[ExampleScore], seed: u64) -> Result<ConsistencyGroups> {
    if method.len() != baseline.len() || method.iter().zip(baseline).any(|(a, b)| a.writer != b.writer) {
        return Err(Error::contract("both systems must be scored on the same examples"));
    }
    let mut diffs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (a, b) in method.iter().zip(baseline) {
        diffs.entry(a.writer.as_str()).or_default().push(a.score - b.score);
    }
    let lo_idx = RESAMPLES * 25 / 1000;
    let hi_idx = RESAMPLES - 1 - lo_idx;
    let mut out = ConsistencyGroups {
        ga: Vec::new(),
        gb: Vec::new(),
        gc: Vec::new(),
        flagged: Vec::new(),
        pct_a: 0.0,
        pct_b: 0.0,
        pct_c: 0.0,
        intervals: Vec::new(),
    };
    for (w, d) in &diffs {
        let n = d.len();
        let mean_diff = d.iter().sum::<f64>() / n as f64;
        if n < 2 {
            out.gc.push(w.to_string());
            out.flagged.push(w.to_string());
            continue;
        }
        let mut rng = seeding::rng(seed, &format!("bootstrap/{w}"));
        let mut means: Vec<f64> = (0..RESAMPLES)
            .map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64)
            .collect();
        means.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        let (lo, hi) = (means[lo_idx], means[hi_idx]);
        if lo > 0.0 {
            out.ga.push(w.to_string());
        } else if hi < 0.0 {
            out.gb.push(w.to_string());
        } else {
            out.gc.push(w.to_string());
        }
        out.intervals.push(WriterInterval {
            writer: w.to_string(),
            examples: n,
            mean_diff,
            lo,
            hi,
        });
    }
    let total = diffs.len().max(1) as f64;
    out.pct_a = 100.0 * out.ga.len() as f64 / total;
    out.pct_b = 100.0 * out.gb.len() as f64 / total;
    out.pct_c = 100.0 * out.gc.len() as f64 / total;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scores(writers: usize, per: usize, f: impl Fn(usize, usize) -> f64) -> Vec<ExampleScore> {
        (0..writers)
            .flat_map(|w| (0..per).map(move |i| (w, i)))
            .map(|(w, i)| ExampleScore {
                writer: format!("w{w}"),
                score: f(w, i),
            })
            .collect()
    }

    #[test]
    fn identical_systems_are_all_gc() {
        let a = scores(5, 8, |w, i| ((w + i) % 2) as f64);
        let g = consistency_groups(&a, &a, 1).unwrap();
        assert_eq!(g.gc.len(), 5);
        assert_eq!(g.pct_c, 100.0);
    }

    #[test]
    fn dominance_is_all_ga() {
        let a = scores(4, 5, |_, _| 1.0);
        let b = scores(4, 5, |_, _| 0.0);
        let g = consistency_groups(&a, &b, 1).unwrap();
        assert_eq!(g.ga.len(), 4);
        assert!((g.pct_a + g.pct_b + g.pct_c - 100.0).abs() < 1e-9);
        let g = consistency_groups(&b, &a, 1).unwrap();
        assert_eq!(g.gb.len(), 4);
    }

    #[test]
    fn lone_examples_are_flagged() {
        let a = scores(2, 1, |_, _| 1.0);
        let b = scores(2, 1, |_, _| 0.0);
        let g = consistency_groups(&a, &b, 1).unwrap();
        assert_eq!(g.flagged.len(), 2);
        assert_eq!(g.gc.len(), 2);
        assert!(consistency_groups(&a, &b[..1], 1).is_err());
    }

    proptest! {
        #[test]
        fn swapping_arguments_swaps_groups(bits in proptest::collection::vec((0u8..2, 0u8..2), 12..60), seed in 0u64..100) {
            let a: Vec<ExampleScore> = bits.iter().enumerate().map(|(i, (x, _))| ExampleScore { writer: format!("w{}", i % 4), score: *x as f64 }).collect();
            let b: Vec<ExampleScore> = bits.iter().enumerate().map(|(i, (_, y))| ExampleScore { writer: format!("w{}", i % 4), score: *y as f64 }).collect();
            let ab = consistency_groups(&a, &b, seed).unwrap();
            let ba = consistency_groups(&b, &a, seed).unwrap();
            prop_assert_eq!(&ab.ga, &ba.gb);
            prop_assert_eq!(&ab.gb, &ba.ga);
            prop_assert_eq!(&ab.gc, &ba.gc);
        }
    }
}
