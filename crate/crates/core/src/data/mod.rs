//! Caption corpora: the synthetic shapes generator, the Karpathy-split
//! annotation loader and PPM image I/O.

mod karpathy;
mod ppm;
mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use karpathy::{load_karpathy, validate_annotations, ANNOTATIONS_FILE};
pub use ppm::{read_ppm, write_ppm, RgbImage};
pub use synthetic::{
    caption_for, generate_synthetic_dataset, render_scene, Color, PlacedShape, Shape,
    SyntheticConfig, SyntheticScene,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    /// Karpathy's `restval` images belong to the training split.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "restval" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Parse(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionRecord {
    pub image_id: u64,
    pub image_path: PathBuf,
    pub split: Split,
    /// Tokenised reference captions; never empty.
    pub references: Vec<Vec<String>>,
    /// Entity phrases such as `"red circle"` (synthetic data only).
    pub entity_list: Vec<String>,
}

impl CaptionRecord {
    /// Entity phrases joined the way the entity stage is taught to answer.
    pub fn entity_text(&self) -> String {
        self.entity_list.join(", ")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CaptionCorpus {
    pub records: Vec<CaptionRecord>,
}

impl CaptionCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
