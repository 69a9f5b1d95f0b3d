//! Closed-vocabulary word tokenizer.
//!
//! Text is lowercased, split on whitespace and stripped of every
//! non-alphanumeric character. Ids 0–4 are reserved for special tokens.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde_json::{Map, Value};

use crate::data::CaptionCorpus;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const FEAT: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<feat>"];

/// Splits text into normalised words.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Vocabulary over every word in `texts`, ids assigned in sorted order after the specials.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        Self::from_words(words)
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(words);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words: all, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<u32> {
        tokens
            .iter()
            .flat_map(|t| normalize(t))
            .map(|w| self.id(&w).unwrap_or(UNK))
            .collect()
    }

    /// Space-joined words; special tokens other than `<unk>` are dropped.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id >= SPECIAL_TOKENS.len() as u32 || id == UNK)
            .filter_map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Value {
        let map: Map<String, Value> = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), Value::from(i as u64)))
            .collect();
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Parse("vocabulary must be a JSON object".into()))?;
        let mut pairs = Vec::with_capacity(obj.len());
        for (w, id) in obj {
            let id = id
                .as_u64()
                .ok_or_else(|| Error::Parse(format!("id of `{w}` is not an integer")))?;
            pairs.push((id as usize, w.clone()));
        }
        pairs.sort();
        for (expect, (id, w)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(Error::Parse(format!("vocabulary ids not contiguous at `{w}`")));
            }
            if let Some(special) = SPECIAL_TOKENS.get(expect) {
                if w != special {
                    return Err(Error::Parse(format!("id {expect} must be `{special}`, found `{w}`")));
                }
            }
        }
        if pairs.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Parse("vocabulary is missing special tokens".into()));
        }
        Ok(Self::from_words(
            pairs.into_iter().skip(SPECIAL_TOKENS.len()).map(|(_, w)| w),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&serde_json::from_str(&text)?)
    }
}

/// Vocabulary over every reference and entity word of `corpus`.
pub fn build_tokenizer(corpus: &CaptionCorpus) -> Result<Tokenizer> {
    build_tokenizer_with(corpus, &[])
}

/// Like [`build_tokenizer`], additionally covering the words of `extra` (prompt text).
pub fn build_tokenizer_with(corpus: &CaptionCorpus, extra: &[&str]) -> Result<Tokenizer> {
    if corpus.records.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut words: BTreeSet<String> = corpus
        .records
        .iter()
        .flat_map(|r| r.references.iter().flatten().chain(r.entity_list.iter()))
        .flat_map(|t| normalize(t))
        .collect();
    words.extend(extra.iter().flat_map(|t| normalize(t)));
    Ok(Tokenizer::from_words(words))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CaptionRecord, Split};
    use proptest::prelude::*;

    fn corpus(sentences: &[&str]) -> CaptionCorpus {
        CaptionCorpus {
            records: sentences
                .iter()
                .enumerate()
                .map(|(i, s)| CaptionRecord {
                    image_id: i as u64,
                    image_path: format!("{i}.ppm").into(),
                    split: Split::Train,
                    references: vec![normalize(s)],
                    entity_list: vec![],
                })
                .collect(),
        }
    }

    #[test]
    fn three_words_plus_specials() {
        let tok = build_tokenizer(&corpus(&["a red circle"])).unwrap();
        assert_eq!(tok.vocab_size(), 8);
        let ids = tok.encode("a red circle");
        assert_eq!(ids, vec![tok.id("a").unwrap(), tok.id("red").unwrap(), tok.id("circle").unwrap()]);
        assert_eq!(tok.decode(&ids), "a red circle");
        assert_eq!(tok.encode("a purple circle")[1], UNK);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        assert!(matches!(build_tokenizer(&corpus(&[])), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_markup_reduces_to_plain_words() {
        assert_eq!(normalize("###Human: <Img></Img> What are they?"), ["human", "imgimg", "what", "are", "they"]);
        assert_eq!(normalize("</Img> ###Assistant:"), ["img", "assistant"]);
    }

    #[test]
    fn vocab_file_round_trip_keeps_special_ids() {
        let tok = Tokenizer::from_texts(["blue square", "a green triangle"]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        tok.save(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.find("<pad>").unwrap() < text.find("<feat>").unwrap());
        let back = Tokenizer::load(&path).unwrap();
        assert_eq!(back, tok);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(back.id(s), Some(i as u32));
        }
    }

    #[test]
    fn vocab_with_wrong_special_is_rejected() {
        let v = serde_json::json!({"<pad>": 0, "<eos>": 1, "<bos>": 2, "<unk>": 3, "<feat>": 4});
        assert!(Tokenizer::from_json(&v).is_err());
    }

    proptest! {
        #[test]
        fn encode_decode_round_trips(ids in proptest::collection::vec(5u32..12, 0..20)) {
            let tok = Tokenizer::from_texts(["a b c d e f g"]);
            prop_assert_eq!(tok.encode(&tok.decode(&ids)), ids);
        }
    }
}
