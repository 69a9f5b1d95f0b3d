//! Loader for Karpathy-split caption annotations.
//!
//! ```json
//! {"images": [{"filename": "...", "split": "train", "cocoid": 1,
//!              "sentences": [{"raw": "...", "tokens": ["..."]}],
//!              "entities": ["..."]}]}
//! ```
//!
//! `tokens` and `entities` are optional; an optional `filepath` is joined in
//! front of `filename`.

use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{CaptionCorpus, CaptionRecord, Split};
use crate::error::{Error, Result};
use crate::tokenizer::normalize;

pub const ANNOTATIONS_FILE: &str = "annotations.json";

fn record_err(index: usize, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("record {index}: {msg}"))
}

fn parse_record(index: usize, v: &Value, root: &Path) -> Result<CaptionRecord> {
    let obj = v.as_object().ok_or_else(|| record_err(index, "not an object"))?;
    let str_field = |key: &str| {
        obj.get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| record_err(index, format!("missing string field `{key}`")))
    };
    let filename = str_field("filename")?;
    let split: Split = str_field("split")?
        .parse()
        .map_err(|e| record_err(index, e))?;
    let image_id = obj
        .get("cocoid")
        .or_else(|| obj.get("imgid"))
        .and_then(Value::as_u64)
        .ok_or_else(|| record_err(index, "missing integer field `cocoid`"))?;
    let sentences = obj
        .get("sentences")
        .and_then(Value::as_array)
        .ok_or_else(|| record_err(index, "missing `sentences` array"))?;
    if sentences.is_empty() {
        return Err(record_err(index, "`sentences` is empty"));
    }
    let mut references = Vec::with_capacity(sentences.len());
    for (j, s) in sentences.iter().enumerate() {
        let tokens = match s.get("tokens") {
            Some(Value::Array(toks)) => toks
                .iter()
                .map(|t| {
                    t.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| record_err(index, format!("sentence {j}: non-string token")))
                })
                .collect::<Result<Vec<_>>>()?,
            Some(_) => return Err(record_err(index, format!("sentence {j}: `tokens` is not an array"))),
            None => {
                let raw = s
                    .get("raw")
                    .and_then(Value::as_str)
                    .ok_or_else(|| record_err(index, format!("sentence {j}: missing `raw`")))?;
                normalize(raw)
            }
        };
        references.push(tokens);
    }
    let entity_list = match obj.get("entities") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(es)) => es
            .iter()
            .map(|e| {
                e.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| record_err(index, "non-string entity"))
            })
            .collect::<Result<_>>()?,
        Some(_) => return Err(record_err(index, "`entities` is not an array")),
    };
    let mut image_path = root.to_path_buf();
    if let Some(dir) = obj.get("filepath").and_then(Value::as_str) {
        image_path.push(dir);
    }
    image_path.push(filename);
    Ok(CaptionRecord {
        image_id,
        image_path,
        split,
        references,
        entity_list,
    })
}

/// Checks every record against the annotation schema without loading images.
pub fn validate_annotations(doc: &Value) -> Result<()> {
    let images = doc
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("top-level `images` array missing".into()))?;
    for (i, v) in images.iter().enumerate() {
        parse_record(i, v, Path::new(""))?;
    }
    Ok(())
}

fn annotation_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Records of one split. `path` is the annotation file or the directory holding it.
pub fn load_karpathy(path: &Path, split: Split) -> Result<CaptionCorpus> {
    let file = annotation_path(path);
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let doc: Value = serde_json::from_str(&text)?;
    let root = file.parent().unwrap_or(Path::new("")).to_path_buf();
    let images = doc
        .get("images")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("top-level `images` array missing".into()))?;
    let mut records = Vec::new();
    for (i, v) in images.iter().enumerate() {
        let rec = parse_record(i, v, &root)?;
        if rec.split == split {
            records.push(rec);
        }
    }
    Ok(CaptionCorpus { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn write(doc: &Value) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(ANNOTATIONS_FILE), doc.to_string()).unwrap();
        dir
    }

    #[test]
    fn split_filter_keeps_matching_records() {
        let img = |id: u64, split: &str| {
            json!({"filename": format!("{id}.jpg"), "split": split, "cocoid": id,
                   "sentences": [{"raw": "A dog."}]})
        };
        let dir = write(&json!({"images": [img(1, "train"), img(2, "test"), img(3, "restval")]}));
        assert_eq!(load_karpathy(dir.path(), Split::Test).unwrap().len(), 1);
        assert_eq!(load_karpathy(dir.path(), Split::Train).unwrap().len(), 2);
        assert_eq!(load_karpathy(dir.path(), Split::Val).unwrap().len(), 0);
    }

    #[test]
    fn missing_sentences_names_the_record() {
        let dir = write(&json!({"images": [
            {"filename": "a.jpg", "split": "val", "cocoid": 0, "sentences": [{"raw": "x"}]},
            {"filename": "b.jpg", "split": "val", "cocoid": 1}
        ]}));
        let err = load_karpathy(dir.path(), Split::Val).unwrap_err().to_string();
        assert!(err.contains("record 1") && err.contains("sentences"), "{err}");
    }

    #[test]
    fn two_record_fixture_matches_hand_built_corpus() {
        let dir = write(&json!({"images": [
            {"filepath": "val2014", "filename": "a.jpg", "split": "test", "cocoid": 7,
             "sentences": [{"raw": "Two cats, sleeping.", "tokens": ["two", "cats", "sleeping"]},
                           {"raw": "Cats on a bed!"}]},
            {"filename": "b.jpg", "split": "test", "cocoid": 9,
             "sentences": [{"raw": "a red circle"}], "entities": ["red circle"]}
        ]}));
        let got = load_karpathy(&dir.path().join(ANNOTATIONS_FILE), Split::Test).unwrap();
        let words = |s: &[&str]| s.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let want = CaptionCorpus {
            records: vec![
                CaptionRecord {
                    image_id: 7,
                    image_path: dir.path().join("val2014").join("a.jpg"),
                    split: Split::Test,
                    references: vec![words(&["two", "cats", "sleeping"]), words(&["cats", "on", "a", "bed"])],
                    entity_list: vec![],
                },
                CaptionRecord {
                    image_id: 9,
                    image_path: dir.path().join("b.jpg"),
                    split: Split::Test,
                    references: vec![words(&["a", "red", "circle"])],
                    entity_list: words(&["red circle"]),
                },
            ],
        };
        assert_eq!(got, want);
    }
}
