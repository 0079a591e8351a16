//! Corpus records, JSONL loading, per-writer balancing and splits, and the
//! synthetic writer generator.

mod split;
pub mod synth;
pub mod vocab;

pub use split::{balance_per_writer, split_ratio, split_temporal, Splits};
pub use synth::{synth_generate, SynthCorpus, SynthSpec};
pub use vocab::Vocab;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "POSITIVE",
            Sentiment::Negative => "NEGATIVE",
            Sentiment::Neutral => "NEUTRAL",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Class(Sentiment),
    Hashtag(usize),
}

impl Label {
    pub fn class(&self) -> Option<Sentiment> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Hashtag(_) => None,
        }
    }

    pub fn hashtag(&self) -> Option<usize> {
        match self {
            Label::Hashtag(h) => Some(*h),
            Label::Class(_) => None,
        }
    }
}

/// One task record: who wrote it, what it says, its gold label and time.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub writer: String,
    pub tokens: Vec<usize>,
    pub label: Label,
    pub timestamp: Option<i64>,
}

/// A writer's plain texts (C_u), task evaluation texts excluded.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WriterHistory {
    pub writer: String,
    pub texts: Vec<Vec<usize>>,
}

/// Per-writer histories keyed by writer id.
pub type Histories = BTreeMap<String, WriterHistory>;

/// A non-fatal data problem recorded instead of failing the run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub writer: String,
    pub reason: String,
}

/// JSONL task record: `{"writer", "text", "label", "ts"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub writer: String,
    pub text: String,
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ts: Option<i64>,
}

/// JSONL history record: `{"writer", "text"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub writer: String,
    pub text: String,
}

/// The set of hashtags a corpus can be labelled with. Each tag is encoded
/// by the words after the `#`, split on `_`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HashtagInventory {
    tags: Vec<String>,
}

impl HashtagInventory {
    pub fn new(tags: Vec<String>) -> Self {
        Self { tags }
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn id(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn tag(&self, id: usize) -> &str {
        &self.tags[id]
    }

    pub fn tags(&self) -> &[String] {
        &self.tags
    }

    /// Word ids of a tag, without specials.
    pub fn tokens(&self, id: usize, vocab: &Vocab) -> Vec<usize> {
        let words = self.tags[id].trim_start_matches('#').replace('_', " ");
        vocab.encode(&words)
    }
}

/// How the `label` field of a task record is interpreted.
#[derive(Debug, Clone, Copy)]
pub enum LabelSchema<'a> {
    Sentiment,
    Hashtag(&'a HashtagInventory),
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses task records, one JSON object per line, tokenizing the text.
pub fn parse_task_jsonl(text: &str, vocab: &Vocab, schema: LabelSchema<'_>) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: line_no,
            msg: e.to_string(),
        })?;
        let label = match schema {
            LabelSchema::Sentiment => Sentiment::parse(&rec.label).map(Label::Class),
            LabelSchema::Hashtag(inv) => inv.id(&rec.label).map(Label::Hashtag),
        }
        .ok_or_else(|| Error::Schema {
            line: line_no,
            msg: format!("unknown label `{}`", rec.label),
        })?;
        let tokens = vocab.encode(&rec.text);
        if tokens.is_empty() {
            return Err(Error::Schema {
                line: line_no,
                msg: "empty text".into(),
            });
        }
        out.push(Example {
            writer: rec.writer,
            tokens,
            label,
            timestamp: rec.ts,
        });
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, vocab: &Vocab, schema: LabelSchema<'_>) -> Result<Vec<Example>> {
    parse_task_jsonl(&read_lines(path)?, vocab, schema)
}

pub fn parse_histories(text: &str, vocab: &Vocab) -> Result<Histories> {
    let mut out = Histories::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: HistoryRecord = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let entry = out.entry(rec.writer.clone()).or_insert_with(|| WriterHistory {
            writer: rec.writer.clone(),
            texts: Vec::new(),
        });
        entry.texts.push(vocab.encode(&rec.text));
    }
    Ok(out)
}

pub fn load_histories(path: &Path, vocab: &Vocab) -> Result<Histories> {
    parse_histories(&read_lines(path)?, vocab)
}

/// Writers in first-appearance order.
pub fn writers_of(examples: &[Example]) -> Vec<String> {
    let mut seen = Vec::new();
    for e in examples {
        if !seen.contains(&e.writer) {
            seen.push(e.writer.clone());
        }
    }
    seen
}

/// Drops any history text that equals a text in `eval` from the same writer.
pub fn exclude_eval_texts(histories: &mut Histories, eval: &[Example]) {
    for h in histories.values_mut() {
        h.texts
            .retain(|t| !eval.iter().any(|e| e.writer == h.writer && &e.tokens == t));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(["good", "bad", "movie", "food", "daily"])
    }

    #[test]
    fn empty_file_gives_no_examples() {
        assert!(parse_task_jsonl("", &vocab(), LabelSchema::Sentiment).unwrap().is_empty());
    }

    #[test]
    fn missing_writer_is_schema_error_at_line() {
        let text = "{\"writer\":\"a\",\"text\":\"good\",\"label\":\"POSITIVE\",\"ts\":1}\n{\"text\":\"bad\",\"label\":\"NEGATIVE\",\"ts\":2}\n";
        match parse_task_jsonl(text, &vocab(), LabelSchema::Sentiment) {
            Err(Error::Schema { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("writer"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn three_lines_in_order_with_unk() {
        let text = "{\"writer\":\"a\",\"text\":\"good movie\",\"label\":\"POSITIVE\",\"ts\":1}\n\
                    {\"writer\":\"b\",\"text\":\"bad zzz\",\"label\":\"NEGATIVE\",\"ts\":2}\n\
                    {\"writer\":\"a\",\"text\":\"movie\",\"label\":\"NEUTRAL\",\"ts\":3}\n";
        let ex = parse_task_jsonl(text, &vocab(), LabelSchema::Sentiment).unwrap();
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[1].tokens, vec![6, vocab::UNK]);
        assert_eq!(ex[2].label, Label::Class(Sentiment::Neutral));
        assert_eq!(writers_of(&ex), vec!["a", "b"]);
    }

    #[test]
    fn unknown_label_is_schema_error() {
        let text = "{\"writer\":\"a\",\"text\":\"good\",\"label\":\"GREAT\",\"ts\":1}";
        assert!(matches!(
            parse_task_jsonl(text, &vocab(), LabelSchema::Sentiment),
            Err(Error::Schema { line: 1, .. })
        ));
        let inv = HashtagInventory::new(vec!["#food_daily".into()]);
        let ok = "{\"writer\":\"a\",\"text\":\"food\",\"label\":\"#food_daily\",\"ts\":1}";
        let ex = parse_task_jsonl(ok, &vocab(), LabelSchema::Hashtag(&inv)).unwrap();
        assert_eq!(ex[0].label, Label::Hashtag(0));
        assert_eq!(inv.tokens(0, &vocab()), vec![8, 9]);
        assert!(parse_task_jsonl(text, &vocab(), LabelSchema::Hashtag(&inv)).is_err());
    }

    #[test]
    fn histories_group_by_writer() {
        let text = "{\"writer\":\"a\",\"text\":\"good\"}\n{\"writer\":\"b\",\"text\":\"bad\"}\n{\"writer\":\"a\",\"text\":\"movie\"}\n";
        let h = parse_histories(text, &vocab()).unwrap();
        assert_eq!(h["a"].texts.len(), 2);
        assert_eq!(h["b"].texts, vec![vec![6]]);
    }
}
