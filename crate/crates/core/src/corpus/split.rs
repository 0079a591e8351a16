use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{writers_of, Example, Sentiment, Warning};
use crate::error::{Error, Result};
use crate::seeding;

/// Train/dev/test partition plus the writers dropped while building it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
    pub warnings: Vec<Warning>,
}

/// Indices of `examples` grouped by writer, writers in first-appearance order.
fn by_writer(examples: &[Example]) -> Vec<(String, Vec<usize>)> {
    let order = writers_of(examples);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        groups.entry(e.writer.as_str()).or_default().push(i);
    }
    order
        .into_iter()
        .map(|w| {
            let idx = groups.remove(w.as_str()).unwrap_or_default();
            (w, idx)
        })
        .collect()
}

/// Downsamples every class of every writer to that writer's smallest class
/// count. Writers missing a class are dropped with a warning. Survivors keep
/// their input order.
pub fn balance_per_writer(examples: &[Example], seed: u64) -> Result<(Vec<Example>, Vec<Warning>)> {
    let mut keep = vec![false; examples.len()];
    let mut warnings = Vec::new();
    for (writer, idx) in by_writer(examples) {
        let mut per_class: [Vec<usize>; 3] = Default::default();
        for &i in &idx {
            let c = examples[i]
                .label
                .class()
                .ok_or_else(|| Error::contract("balance_per_writer needs sentiment labels"))?;
            per_class[c.index()].push(i);
        }
        let min = per_class.iter().map(Vec::len).min().unwrap_or(0);
        if min == 0 {
            let missing: Vec<&str> = Sentiment::ALL
                .iter()
                .filter(|c| per_class[c.index()].is_empty())
                .map(|c| c.as_str())
                .collect();
            warnings.push(Warning {
                writer,
                reason: format!("no examples of {}", missing.join(", ")),
            });
            continue;
        }
        let mut rng = seeding::rng(seed, &format!("balance/{writer}"));
        for class in per_class.iter_mut() {
            class.shuffle(&mut rng);
            for &i in class.iter().take(min) {
                keep[i] = true;
            }
        }
    }
    let out = examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    Ok((out, warnings))
}

/// Minimum examples per writer for a ratio split.
pub const MIN_PER_WRITER: usize = 10;

/// Per-writer random 8:1:1 split, unioned over writers. Dev and test each
/// take `floor(n / 10)`; the remainder goes to train.
pub fn split_ratio(examples: &[Example], seed: u64) -> Splits {
    let mut splits = Splits::default();
    for (writer, mut idx) in by_writer(examples) {
        let n = idx.len();
        if n < MIN_PER_WRITER {
            splits.warnings.push(Warning {
                writer,
                reason: format!("only {n} examples (< {MIN_PER_WRITER})"),
            });
            continue;
        }
        let k = n / 10;
        idx.shuffle(&mut seeding::rng(seed, &format!("split/{writer}")));
        let (test, rest) = idx.split_at(k);
        let (dev, train) = rest.split_at(k);
        for (part, dst) in [(train, &mut splits.train), (dev, &mut splits.dev), (test, &mut splits.test)] {
            let mut part = part.to_vec();
            part.sort_unstable();
            dst.extend(part.into_iter().map(|i| examples[i].clone()));
        }
    }
    splits
}

/// Per-writer temporal split: oldest 80% train, newest 10% test, the rest
/// dev. Ties keep input order.
pub fn split_temporal(examples: &[Example]) -> Result<Splits> {
    if let Some(e) = examples.iter().find(|e| e.timestamp.is_none()) {
        return Err(Error::contract(format!(
            "temporal split needs timestamps (writer {})",
            e.writer
        )));
    }
    let mut splits = Splits::default();
    for (_, mut idx) in by_writer(examples) {
        idx.sort_by_key(|&i| examples[i].timestamp);
        let n = idx.len();
        let k = n / 10;
        let (train, rest) = idx.split_at(n - 2 * k);
        let (dev, test) = rest.split_at(k);
        splits.train.extend(train.iter().map(|&i| examples[i].clone()));
        splits.dev.extend(dev.iter().map(|&i| examples[i].clone()));
        splits.test.extend(test.iter().map(|&i| examples[i].clone()));
    }
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;
    use proptest::prelude::*;

    fn ex(writer: &str, c: usize, id: usize) -> Example {
        Example {
            writer: writer.into(),
            tokens: vec![10 + id],
            label: Label::Class(Sentiment::from_index(c).unwrap()),
            timestamp: Some(id as i64),
        }
    }

    fn with_counts(writer: &str, counts: [usize; 3]) -> Vec<Example> {
        let mut out = Vec::new();
        let mut id = 0;
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                out.push(ex(writer, c, id));
                id += 1;
            }
        }
        out
    }

    fn class_counts(ex: &[Example]) -> [usize; 3] {
        let mut c = [0; 3];
        for e in ex {
            c[e.label.class().unwrap().index()] += 1;
        }
        c
    }

    #[test]
    fn balance_examples() {
        let (b, w) = balance_per_writer(&with_counts("a", [10, 10, 10]), 1).unwrap();
        assert_eq!(b.len(), 30);
        assert!(w.is_empty());
        let (b, _) = balance_per_writer(&with_counts("a", [12, 9, 15]), 1).unwrap();
        assert_eq!(class_counts(&b), [9, 9, 9]);
        let mut data = with_counts("a", [5, 0, 7]);
        data.extend(with_counts("b", [2, 2, 2]));
        let (b, w) = balance_per_writer(&data, 1).unwrap();
        assert_eq!(b.len(), 6);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].writer, "a");
    }

    #[test]
    fn ratio_split_sizes_and_determinism() {
        let data = with_counts("a", [7, 7, 6]);
        let s = split_ratio(&data, 3);
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (16, 2, 2));
        assert_eq!(s, split_ratio(&data, 3));
        let s = split_ratio(&with_counts("b", [3, 3, 3]), 3);
        assert!(s.train.is_empty());
        assert_eq!(s.warnings.len(), 1);
    }

    #[test]
    fn temporal_split_counts() {
        let data: Vec<Example> = (1..=10).map(|i| ex("a", 0, i)).collect();
        let s = split_temporal(&data).unwrap();
        let ts = |v: &[Example]| v.iter().map(|e| e.timestamp.unwrap()).collect::<Vec<_>>();
        assert_eq!(ts(&s.train), (1..=8).collect::<Vec<_>>());
        assert_eq!(ts(&s.dev), vec![9]);
        assert_eq!(ts(&s.test), vec![10]);
    }

    #[test]
    fn temporal_ties_are_stable() {
        let mut data: Vec<Example> = (0..10).map(|i| ex("a", 0, i)).collect();
        for e in &mut data {
            e.timestamp = Some(7);
        }
        let s = split_temporal(&data).unwrap();
        assert_eq!(s.test[0].tokens, vec![19]);
        assert_eq!(s.dev[0].tokens, vec![18]);
        data[3].timestamp = None;
        assert!(split_temporal(&data).is_err());
    }

    proptest! {
        #[test]
        fn balanced_counts_equal_and_splits_partition(
            counts in proptest::collection::vec((1usize..15, 1usize..15, 1usize..15), 1..5),
            seed in 0u64..1000,
        ) {
            let mut data = Vec::new();
            for (w, (a, b, c)) in counts.iter().enumerate() {
                data.extend(with_counts(&format!("w{w}"), [*a, *b, *c]));
            }
            let (bal, _) = balance_per_writer(&data, seed).unwrap();
            for w in writers_of(&bal) {
                let mine: Vec<Example> = bal.iter().filter(|e| e.writer == w).cloned().collect();
                let c = class_counts(&mine);
                prop_assert!(c[0] == c[1] && c[1] == c[2]);
            }
            let s = split_ratio(&bal, seed);
            let kept: usize = writers_of(&bal)
                .iter()
                .map(|w| bal.iter().filter(|e| &e.writer == w).count())
                .filter(|&n| n >= MIN_PER_WRITER)
                .sum();
            prop_assert_eq!(s.train.len() + s.dev.len() + s.test.len(), kept);
            let mut all: Vec<_> = s.train.iter().chain(&s.dev).chain(&s.test).map(|e| (e.writer.clone(), e.tokens.clone())).collect();
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), kept);
            for e in &s.test {
                prop_assert!(s.train.iter().any(|t| t.writer == e.writer));
            }
        }
    }
}
