use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::vocab::{CLS, NUM_SPECIAL, SEP};
use crate::corpus::{Warning, WriterHistory};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HardPromptMode {
    Static,
    Dynamic,
    UserIdentifier,
}

/// How a writer's token context is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HardPromptPlan {
    pub mode: HardPromptMode,
    /// Tokens taken from each history text.
    pub per_text: usize,
    /// Total context length, and the length of a user identifier.
    pub prompt_token_length: usize,
    pub seed: u64,
}

impl HardPromptPlan {
    pub fn new(mode: HardPromptMode, per_text: usize, seed: u64) -> Self {
        Self {
            mode,
            per_text,
            prompt_token_length: 16,
            seed,
        }
    }

    /// A context of full length must still leave room for one input token.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        if self.per_text == 0 {
            return Err(Error::config("tokens per history text must be >= 1"));
        }
        if self.prompt_token_length + 4 > max_len {
            return Err(Error::config(format!(
                "prompt_token_length {} leaves no room for input within max_len {max_len}",
                self.prompt_token_length
            )));
        }
        Ok(())
    }
}

/// Anything that maps a token sequence to a fixed-width vector.
pub trait TextEmbedder {
    fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>>;
}

/// Mean-pooled final states of a frozen encoder over `[CLS] text [SEP]`.
pub struct EncoderEmbedder<'a> {
    pub model: &'a EncoderModel,
}

impl TextEmbedder for EncoderEmbedder<'_> {
    fn embed(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let room = self.model.config.max_len.saturating_sub(2);
        let mut ids = Vec::with_capacity(tokens.len().min(room) + 2);
        ids.push(CLS);
        ids.extend_from_slice(&tokens[..tokens.len().min(room)]);
        ids.push(SEP);
        self.model.mean_pooled(&ids)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Concatenates the first `per_text` tokens of each text in order, stopping
/// when `budget` tokens are collected.
pub fn fill_context<'a, I>(texts: I, per_text: usize, budget: usize) -> Vec<usize>
where
    I: IntoIterator<Item = &'a Vec<usize>>,
{
    let mut out = Vec::with_capacity(budget);
    for t in texts {
        if out.len() >= budget {
            break;
        }
        let take = per_text.min(t.len()).min(budget - out.len());
        out.extend_from_slice(&t[..take]);
    }
    out
}

/// Writer-level context: history texts in a seeded shuffle. An empty history
/// gives an empty context and a warning.
pub fn build_static_hard_prompt(
    history: &WriterHistory,
    plan: &HardPromptPlan,
) -> (Vec<usize>, Option<Warning>) {
    if history.texts.is_empty() {
        let w = Warning {
            writer: history.writer.clone(),
            reason: "empty history".into(),
        };
        return (Vec::new(), Some(w));
    }
    let mut order: Vec<usize> = (0..history.texts.len()).collect();
    order.shuffle(&mut seeding::rng(plan.seed, &format!("static/{}", history.writer)));
    let ctx = fill_context(order.iter().map(|&i| &history.texts[i]), plan.per_text, plan.prompt_token_length);
    (ctx, None)
}

/// History indices by decreasing cosine similarity to `query`; ties keep
/// index order.
pub fn similarity_order(query: &[f64], history: &[Vec<f64>]) -> Vec<usize> {
    let sims: Vec<f64> = history
        .iter()
        .map(|h| cosine(query, h))
        .map(|s| if s.is_nan() { f64::NEG_INFINITY } else { s })
        .collect();
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Input-level context from precomputed embeddings of the history texts.
pub fn dynamic_context(
    history: &WriterHistory,
    history_emb: &[Vec<f64>],
    query_emb: &[f64],
    plan: &HardPromptPlan,
) -> Result<Vec<usize>> {
    if history_emb.len() != history.texts.len() {
        return Err(Error::contract("one embedding per history text"));
    }
    let order = similarity_order(query_emb, history_emb);
    Ok(fill_context(order.iter().map(|&i| &history.texts[i]), plan.per_text, plan.prompt_token_length))
}

/// Input-level context: history texts ordered by similarity to `x`.
pub fn build_dynamic_hard_prompt(
    history: &WriterHistory,
    x: &[usize],
    plan: &HardPromptPlan,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<usize>> {
    let hist: Vec<Vec<f64>> = history
        .texts
        .iter()
        .map(|t| embedder.embed(t))
        .collect::<Result<_>>()?;
    let q = embedder.embed(x)?;
    dynamic_context(history, &hist, &q, plan)
}

fn draw_identifier(writer: &str, attempt: usize, plan: &HardPromptPlan, vocab_size: usize) -> Vec<usize> {
    let mut rng = seeding::rng(plan.seed, &format!("uid/{writer}/{attempt}"));
    (0..plan.prompt_token_length)
        .map(|_| rng.random_range(NUM_SPECIAL..vocab_size))
        .collect()
}

/// Random non-special token ids naming a writer.
pub fn build_user_identifier(writer: &str, plan: &HardPromptPlan, vocab_size: usize) -> Result<Vec<usize>> {
    if vocab_size <= NUM_SPECIAL {
        return Err(Error::config("vocabulary has no ordinary tokens"));
    }
    Ok(draw_identifier(writer, 0, plan, vocab_size))
}

/// Per-writer token contexts, serialized as `{writer: [ids]}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptCache {
    entries: BTreeMap<String, Vec<usize>>,
}

impl PromptCache {
    pub fn get(&self, writer: &str) -> Option<&[usize]> {
        self.entries.get(writer).map(Vec::as_slice)
    }

    pub fn insert(&mut self, writer: impl Into<String>, ids: Vec<usize>) {
        self.entries.insert(writer.into(), ids);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Static contexts for every writer in `histories`.
    pub fn static_contexts<'a, I>(histories: I, plan: &HardPromptPlan) -> (Self, Vec<Warning>)
    where
        I: IntoIterator<Item = &'a WriterHistory>,
    {
        let mut cache = Self::default();
        let mut warnings = Vec::new();
        for h in histories {
            let (ctx, w) = build_static_hard_prompt(h, plan);
            warnings.extend(w);
            cache.insert(h.writer.clone(), ctx);
        }
        (cache, warnings)
    }

    /// Identifiers for `writers`, redrawn until no two writers share one.
    pub fn identifiers(writers: &[String], plan: &HardPromptPlan, vocab_size: usize) -> Result<Self> {
        build_user_identifier("", plan, vocab_size)?;
        let mut cache = Self::default();
        let mut taken = BTreeSet::new();
        for w in writers {
            let mut attempt = 0;
            let ids = loop {
                let ids = draw_identifier(w, attempt, plan, vocab_size);
                if taken.insert(ids.clone()) {
                    break ids;
                }
                attempt += 1;
                if attempt > 1000 {
                    return Err(Error::config("cannot draw distinct user identifiers"));
                }
            };
            cache.insert(w.clone(), ids);
        }
        Ok(cache)
    }
}

/// `[CLS] x′ [SEP] context [SEP]`, with `x` truncated so the whole sequence
/// fits `max_len`. An empty context gives `[CLS] x′ [SEP]`. `x` and
/// `context` carry no specials.
pub fn extend_input(x: &[usize], context: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if context.is_empty() {
        return plain_input(x, max_len);
    }
    if context.len() + 3 > max_len {
        return Err(Error::Length {
            len: context.len() + 3,
            max: max_len,
        });
    }
    let keep = x.len().min(max_len - context.len() - 3);
    let mut out = Vec::with_capacity(keep + context.len() + 3);
    out.push(CLS);
    out.extend_from_slice(&x[..keep]);
    out.push(SEP);
    out.extend_from_slice(context);
    out.push(SEP);
    Ok(out)
}

/// `[CLS] x [SEP]` truncated to `max_len`.
pub fn plain_input(x: &[usize], max_len: usize) -> Result<Vec<usize>> {
    if max_len < 2 {
        return Err(Error::Length { len: 2, max: max_len });
    }
    let keep = x.len().min(max_len - 2);
    let mut out = Vec::with_capacity(keep + 2);
    out.push(CLS);
    out.extend_from_slice(&x[..keep]);
    out.push(SEP);
    Ok(out)
}
