//! Synthetic writer corpora.
//!
//! Sentiment texts are filler plus either a polarity word (the label is the
//! same for every writer) or an ambiguous marker whose polarity depends on
//! the writer. Each writer's marker→polarity map is a cyclic shift, and
//! shifts are dealt out round-robin, so across writers every marker is
//! mapped to every polarity as evenly as the writer count allows.
//!
//! Hashtag texts name a topic; the gold tag is `#<topic>_<variant>` where
//! the variant follows a writer preference. Plain histories carry each
//! writer's style words, marker usage next to the writer's polarity, and
//! preferred variant, but never a task text.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HashtagInventory, HistoryRecord, Sentiment, TaskRecord, Vocab};
use crate::error::{Error, Result};
use crate::seeding;

const FUNCTION_WORDS: &[&str] = &[
    "the", "a", "it", "was", "is", "and", "this", "that", "so", "very", "really", "just", "we",
    "i", "my", "our",
];
const CONTENT_WORDS: &[&str] = &[
    "food", "service", "place", "staff", "menu", "price", "room", "movie", "plot", "actor",
    "show", "order", "table", "drink", "night", "story", "scene", "music", "wait", "visit",
];
const POSITIVE_WORDS: &[&str] = &["great", "good", "love", "excellent", "amazing"];
const NEGATIVE_WORDS: &[&str] = &["bad", "awful", "hate", "terrible", "poor"];
const NEUTRAL_WORDS: &[&str] = &["okay", "fine", "average", "decent", "ordinary"];
const MARKER_WORDS: &[&str] = &["sick", "wild", "crazy", "unreal", "mad", "insane"];
const TOPICS: &[[&str; 4]] = &[
    ["coffee", "espresso", "latte", "brew"],
    ["soccer", "goal", "match", "striker"],
    ["travel", "flight", "beach", "passport"],
    ["cooking", "recipe", "oven", "spice"],
    ["gaming", "console", "level", "quest"],
    ["fitness", "gym", "workout", "cardio"],
    ["weather", "rain", "storm", "forecast"],
    ["books", "novel", "chapter", "author"],
    ["tech", "laptop", "code", "startup"],
    ["garden", "flower", "seed", "soil"],
    ["art", "paint", "canvas", "sketch"],
    ["cinema", "ticket", "premiere", "trailer"],
];
const VARIANTS: &[&str] = &["daily", "life", "vibes", "fans", "time", "lovers", "goals"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Known writers (|U|).
    pub writers: usize,
    /// Extra writers held out of every training stage.
    pub unknown_writers: usize,
    pub examples_per_writer: usize,
    pub history_per_writer: usize,
    /// Fraction of sentiment examples whose label depends on the writer.
    pub rho: f64,
    /// Put writer style words into task inputs as well as histories.
    pub style_leak: bool,
    pub style_words_per_writer: usize,
    /// Ambiguous markers; 3 or 6.
    pub markers: usize,
    pub topics: usize,
    pub variants: usize,
    pub tweets_per_writer: usize,
    /// Probability a tweet uses its writer's preferred variant.
    pub variant_preference: f64,
    /// Probability a history text shows a marker with its polarity word.
    pub history_marker_rate: f64,
    /// Probability a history text mentions the preferred variant.
    pub history_variant_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            writers: 20,
            unknown_writers: 4,
            examples_per_writer: 100,
            history_per_writer: 50,
            rho: 0.8,
            style_leak: false,
            style_words_per_writer: 3,
            markers: 3,
            topics: 10,
            variants: 5,
            tweets_per_writer: 60,
            variant_preference: 0.8,
            history_marker_rate: 0.5,
            history_variant_rate: 0.4,
            seed: 17,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(0.0..=1.0).contains(&self.rho) || self.rho.is_nan() {
            return fail(format!("rho must lie in [0, 1], got {}", self.rho));
        }
        for (name, p) in [
            ("variant_preference", self.variant_preference),
            ("history_marker_rate", self.history_marker_rate),
            ("history_variant_rate", self.history_variant_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.writers == 0 {
            return fail("at least one writer is required".into());
        }
        if self.markers != 3 && self.markers != 6 {
            return fail(format!("markers must be 3 or 6, got {}", self.markers));
        }
        if self.topics == 0 || self.topics > TOPICS.len() {
            return fail(format!("topics must be in 1..={}", TOPICS.len()));
        }
        if self.variants < 2 || self.variants > VARIANTS.len() {
            return fail(format!("variants must be in 2..={}", VARIANTS.len()));
        }
        if self.style_words_per_writer == 0 {
            return fail("style_words_per_writer must be positive".into());
        }
        Ok(())
    }

    pub fn total_writers(&self) -> usize {
        self.writers + self.unknown_writers
    }
}

/// Hidden generative facts about one writer, kept for analysis and oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WriterTraits {
    pub style_words: Vec<String>,
    /// Polarity of marker `m` for this writer.
    pub marker_polarity: Vec<Sentiment>,
    pub preferred_variant: String,
}

/// Generated corpus plus the metadata needed to reload it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCorpus {
    pub spec: SynthSpec,
    pub vocab: Vocab,
    pub hashtags: HashtagInventory,
    pub known_writers: Vec<String>,
    pub unknown_writers: Vec<String>,
    pub traits: BTreeMap<String, WriterTraits>,
    #[serde(skip)]
    pub sentiment: Vec<TaskRecord>,
    #[serde(skip)]
    pub hashtag: Vec<TaskRecord>,
    #[serde(skip)]
    pub histories: Vec<HistoryRecord>,
}

pub const SENTIMENT_FILE: &str = "sentiment.jsonl";
pub const HASHTAG_FILE: &str = "hashtag.jsonl";
pub const HISTORY_FILE: &str = "histories.jsonl";
pub const META_FILE: &str = "meta.json";

fn polarity_words(c: Sentiment) -> &'static [&'static str] {
    match c {
        Sentiment::Positive => POSITIVE_WORDS,
        Sentiment::Negative => NEGATIVE_WORDS,
        Sentiment::Neutral => NEUTRAL_WORDS,
    }
}

/// Polarity words of every class, for tests and oracles.
pub fn polarity_lexicon() -> Vec<(&'static str, Sentiment)> {
    Sentiment::ALL
        .iter()
        .flat_map(|&c| polarity_words(c).iter().map(move |w| (*w, c)))
        .collect()
}

pub fn marker_words(n: usize) -> &'static [&'static str] {
    &MARKER_WORDS[..n]
}

/// Deterministic pseudo-words (CVCV) for writer styles, skipping any that
/// collide with `taken`.
fn style_lexicon(n: usize, taken: &BTreeSet<String>) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let space = C.len() * V.len() * C.len() * V.len();
    let mut out = Vec::with_capacity(n);
    let mut k = 0usize;
    while out.len() < n && k < space {
        let idx = (k * 2963) % space;
        k += 1;
        let (c1, r) = (idx % C.len(), idx / C.len());
        let (v1, r) = (r % V.len(), r / V.len());
        let (c2, v2) = (r % C.len(), r / C.len());
        let w: String = [C[c1], V[v1], C[c2], V[v2 % V.len()]].iter().map(|&b| b as char).collect();
        if !taken.contains(&w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

fn writer_id(i: usize) -> String {
    format!("u{i:02}")
}

fn filler<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.5) {
                FUNCTION_WORDS.choose(rng).unwrap().to_string()
            } else {
                CONTENT_WORDS.choose(rng).unwrap().to_string()
            }
        })
        .collect()
}

fn insert_random<R: Rng>(rng: &mut R, words: &mut Vec<String>, w: &str) {
    let at = rng.random_range(0..=words.len());
    words.insert(at, w.to_string());
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let topics = &TOPICS[..spec.topics];
    let variants = &VARIANTS[..spec.variants];
    let markers = marker_words(spec.markers);

    let mut base: Vec<String> = Vec::new();
    for list in [FUNCTION_WORDS, CONTENT_WORDS, POSITIVE_WORDS, NEGATIVE_WORDS, NEUTRAL_WORDS, markers] {
        base.extend(list.iter().map(|s| s.to_string()));
    }
    for t in topics {
        base.extend(t.iter().map(|s| s.to_string()));
    }
    base.extend(variants.iter().map(|s| s.to_string()));
    let taken: BTreeSet<String> = base.iter().cloned().collect();
    let n_writers = spec.total_writers();
    let styles = style_lexicon(n_writers * spec.style_words_per_writer, &taken);
    if styles.len() < n_writers * spec.style_words_per_writer {
        return Err(Error::config("too many writers for the style lexicon"));
    }
    base.extend(styles.iter().cloned());
    let vocab = Vocab::new(base);

    let mut tags = Vec::new();
    for t in topics {
        for v in variants {
            tags.push(format!("#{}_{}", t[0], v));
        }
    }
    let hashtags = HashtagInventory::new(tags);

    // Round-robin shifts and variants, dealt in a seeded writer order.
    let mut order: Vec<usize> = (0..n_writers).collect();
    order.shuffle(&mut seeding::rng(spec.seed, "writer-order"));
    let mut traits = BTreeMap::new();
    for (rank, &w) in order.iter().enumerate() {
        let shift = rank % 3;
        let marker_polarity = (0..spec.markers)
            .map(|m| Sentiment::from_index((m + shift) % 3).expect("3 classes"))
            .collect();
        let style_words = styles[w * spec.style_words_per_writer..(w + 1) * spec.style_words_per_writer].to_vec();
        traits.insert(
            writer_id(w),
            WriterTraits {
                style_words,
                marker_polarity,
                preferred_variant: variants[rank % variants.len()].to_string(),
            },
        );
    }

    let all_writers: Vec<String> = (0..n_writers).map(writer_id).collect();
    let known_writers = all_writers[..spec.writers].to_vec();
    let unknown_writers = all_writers[spec.writers..].to_vec();

    let mut sentiment = Vec::new();
    let mut hashtag = Vec::new();
    let mut histories = Vec::new();
    for w in &all_writers {
        let tr = &traits[w];
        let mut task_texts = BTreeSet::new();

        let mut rng = seeding::rng(spec.seed, &format!("sentiment/{w}"));
        let mut ts = 0i64;
        for _ in 0..spec.examples_per_writer {
            let c = Sentiment::from_index(rng.random_range(0..3)).expect("3 classes");
            let n = rng.random_range(4..=7);
            let mut words = filler(&mut rng, n);
            if rng.random_bool(spec.rho) {
                let cands: Vec<usize> = (0..spec.markers).filter(|&m| tr.marker_polarity[m] == c).collect();
                let m = *cands.choose(&mut rng).expect("every class has a marker");
                insert_random(&mut rng, &mut words, markers[m]);
            } else {
                let p = polarity_words(c).choose(&mut rng).unwrap();
                insert_random(&mut rng, &mut words, p);
            }
            if spec.style_leak {
                let s = tr.style_words.choose(&mut rng).unwrap().clone();
                insert_random(&mut rng, &mut words, &s);
            }
            ts += rng.random_range(1..=100);
            let text = words.join(" ");
            task_texts.insert(text.clone());
            sentiment.push(TaskRecord {
                writer: w.clone(),
                text,
                label: c.as_str().to_string(),
                ts: Some(ts),
            });
        }

        let mut rng = seeding::rng(spec.seed, &format!("hashtag/{w}"));
        let pref = variants.iter().position(|v| *v == tr.preferred_variant).expect("known variant");
        let mut ts = 0i64;
        for _ in 0..spec.tweets_per_writer {
            let t = rng.random_range(0..topics.len());
            let v = if rng.random_bool(spec.variant_preference) {
                pref
            } else {
                let others: Vec<usize> = (0..variants.len()).filter(|&v| v != pref).collect();
                *others.choose(&mut rng).unwrap()
            };
            let n = rng.random_range(3..=5);
            let mut words = filler(&mut rng, n);
            for _ in 0..2 {
                let tw = topics[t].choose(&mut rng).unwrap();
                insert_random(&mut rng, &mut words, tw);
            }
            if spec.style_leak {
                let s = tr.style_words.choose(&mut rng).unwrap().clone();
                insert_random(&mut rng, &mut words, &s);
            }
            ts += rng.random_range(1..=100);
            let text = words.join(" ");
            task_texts.insert(text.clone());
            hashtag.push(TaskRecord {
                writer: w.clone(),
                text,
                label: format!("#{}_{}", topics[t][0], variants[v]),
                ts: Some(ts),
            });
        }

        let mut rng = seeding::rng(spec.seed, &format!("history/{w}"));
        let mut made = 0;
        while made < spec.history_per_writer {
            let mut chunks: Vec<Vec<String>> = Vec::new();
            for _ in 0..2 {
                chunks.push(vec![tr.style_words.choose(&mut rng).unwrap().clone()]);
            }
            let n = rng.random_range(2..=4);
            chunks.extend(filler(&mut rng, n).into_iter().map(|f| vec![f]));
            if rng.random_bool(spec.history_marker_rate) {
                let m = rng.random_range(0..spec.markers);
                let p = polarity_words(tr.marker_polarity[m]).choose(&mut rng).unwrap();
                chunks.push(vec![markers[m].to_string(), p.to_string()]);
            }
            if rng.random_bool(spec.history_variant_rate) {
                let t = topics.choose(&mut rng).unwrap()[0];
                chunks.push(vec![t.to_string(), tr.preferred_variant.clone()]);
            }
            chunks.shuffle(&mut rng);
            let text = chunks.concat().join(" ");
            if task_texts.contains(&text) {
                continue;
            }
            histories.push(HistoryRecord {
                writer: w.clone(),
                text,
            });
            made += 1;
        }
    }

    Ok(SynthCorpus {
        spec: spec.clone(),
        vocab,
        hashtags,
        known_writers,
        unknown_writers,
        traits,
        sentiment,
        hashtag,
        histories,
    })
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

impl SynthCorpus {
    /// Writes the three JSONL files and `meta.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (SENTIMENT_FILE, jsonl(&self.sentiment)?),
            (HASHTAG_FILE, jsonl(&self.hashtag)?),
            (HISTORY_FILE, jsonl(&self.histories)?),
            (META_FILE, serde_json::to_string_pretty(self)? + "\n"),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Reads `meta.json` (records are loaded separately through the
    /// JSONL loaders).
    pub fn read_meta(dir: &Path) -> Result<SynthCorpus> {
        let p = dir.join(META_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
