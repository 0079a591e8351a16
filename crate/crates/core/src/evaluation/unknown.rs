use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Histories, Warning, WriterHistory};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::personalization::{EncoderEmbedder, TextEmbedder};
use crate::training::Conditioned;

/// How inputs from writers outside training are conditioned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain input, no writer signal.
    NoPrompt,
    /// Prompts built on the fly from the writer's own history, a fresh
    /// identifier, or soft prompts drawn from the initialization.
    ZeroShot,
    /// Reuse the prompts of the most similar known writer.
    Approx,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::NoPrompt, Strategy::ZeroShot, Strategy::Approx];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::NoPrompt => "no_prompt",
            Strategy::ZeroShot => "zero_shot",
            Strategy::Approx => "approx",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown strategy `{s}`")))
    }
}

/// Mean of the base encoder's mean-pooled embeddings of a writer's texts,
/// scaled to unit length.
pub fn writer_embedding(encoder: &EncoderModel, history: &WriterHistory) -> Result<Option<Vec<f64>>> {
    let emb = EncoderEmbedder { model: encoder };
    let mut acc: Option<Vec<f64>> = None;
    for t in history.texts.iter().filter(|t| !t.is_empty()) {
        let v = emb.embed(t)?;
        match &mut acc {
            None => acc = Some(v),
            Some(a) => a.iter_mut().zip(&v).for_each(|(x, y)| *x += y),
        }
    }
    Ok(acc.map(|mut a| {
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            a.iter_mut().for_each(|x| *x /= norm);
        }
        a
    }))
}

pub fn writer_embeddings(
    encoder: &EncoderModel,
    histories: &Histories,
    writers: &[String],
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for w in writers {
        if let Some(h) = histories.get(w) {
            if let Some(e) = writer_embedding(encoder, h)? {
                out.insert(w.clone(), e);
            }
        }
    }
    Ok(out)
}

/// Known writer with the largest inner product to `query`; ties go to the
/// first writer in key order.
pub fn nearest_writer(query: &[f64], known: &BTreeMap<String, Vec<f64>>) -> Option<String> {
    let mut best: Option<(&String, f64)> = None;
    for (w, e) in known {
        let s: f64 = query.iter().zip(e).map(|(a, b)| a * b).sum();
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((w, s));
        }
    }
    best.map(|(w, _)| w.clone())
}

/// Per-writer conditioning for held-out writers under one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnknownRouting {
    pub strategy: Strategy,
    /// Held-out writer → nearest known writer (approx only).
    pub proxies: BTreeMap<String, String>,
    pub warnings: Vec<Warning>,
}

impl UnknownRouting {
    pub fn new(
        strategy: Strategy,
        base: &EncoderModel,
        histories: &Histories,
        known: &[String],
        unknown: &[String],
    ) -> Result<Self> {
        let mut proxies = BTreeMap::new();
        let mut warnings = Vec::new();
        if strategy == Strategy::Approx {
            let table = writer_embeddings(base, histories, known)?;
            for u in unknown {
                let q = histories.get(u).map(|h| writer_embedding(base, h)).transpose()?.flatten();
                match q.and_then(|q| nearest_writer(&q, &table)) {
                    Some(k) => {
                        proxies.insert(u.clone(), k);
                    }
                    None => warnings.push(Warning {
                        writer: u.clone(),
                        reason: "no history to match; using plain input".into(),
                    }),
                }
            }
        }
        Ok(Self {
            strategy,
            proxies,
            warnings,
        })
    }

    pub fn route<'a>(&'a self, writer: &'a str) -> Conditioned<'a> {
        match self.strategy {
            Strategy::NoPrompt => Conditioned::Plain,
            Strategy::ZeroShot => Conditioned::Fresh(writer),
            Strategy::Approx => self
                .proxies
                .get(writer)
                .map_or(Conditioned::Plain, |k| Conditioned::Writer(k)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn parse_strategies() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.as_str()).unwrap(), s);
        }
        assert!(matches!(Strategy::parse("oracle"), Err(Error::Config(_))));
    }

    #[test]
    fn nearest_is_inner_product_not_cosine() {
        let mut known = BTreeMap::new();
        known.insert("a".to_string(), vec![1.0, 0.0]);
        known.insert("b".to_string(), vec![3.0, 3.0]);
        assert_eq!(nearest_writer(&[1.0, 0.1], &known).unwrap(), "b");
        known.insert("c".to_string(), vec![3.0, 3.0]);
        assert_eq!(nearest_writer(&[1.0, 0.1], &known).unwrap(), "b");
        assert!(nearest_writer(&[1.0], &BTreeMap::new()).is_none());
    }

    proptest! {
        #[test]
        fn nearest_matches_scan(vs in proptest::collection::vec(proptest::collection::vec(-5i32..6, 4), 1..10), q in proptest::collection::vec(-5i32..6, 4)) {
            let known: BTreeMap<String, Vec<f64>> = vs.iter().enumerate()
                .map(|(i, v)| (format!("k{i:02}"), v.iter().map(|&x| x as f64).collect()))
                .collect();
            let q: Vec<f64> = q.iter().map(|&x| x as f64).collect();
            let got = nearest_writer(&q, &known).unwrap();
            let dots: Vec<(String, f64)> = known.iter().map(|(k, v)| (k.clone(), v.iter().zip(&q).map(|(a, b)| a * b).sum())).collect();
            let best = dots.iter().map(|d| d.1).fold(f64::NEG_INFINITY, f64::max);
            let first = dots.iter().find(|d| d.1 == best).unwrap();
            prop_assert_eq!(got, first.0.clone());
        }
    }
}
