//! Synthetic shapes-and-colours VQA data: scene generation, rendering,
//! templated questions and JSON-lines storage.

pub mod synthetic;

pub use synthetic::{generate, render, write_dataset, SyntheticSpec};

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{BBox, LabeledCandidate};

pub const SHAPES: [&str; 6] = ["square", "circle", "triangle", "cross", "ring", "diamond"];
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("gray", [0.5, 0.5, 0.5]),
];
/// Template words after the three special tokens.
pub const WORDS: [&str; 9] = ["is", "there", "a", "how", "many", "are", "what", "color", "the"];
pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    YesNo,
    Number,
    Other,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [Self::YesNo, Self::Number, Self::Other];

    pub fn tag(self) -> &'static str {
        match self {
            Self::YesNo => "yesno",
            Self::Number => "number",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for QuestionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for QuestionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "yesno" => Ok(Self::YesNo),
            "number" => Ok(Self::Number),
            "other" => Ok(Self::Other),
            _ => Err(Error::InvalidInput(format!("unknown question type '{s}'"))),
        }
    }
}

/// One coloured shape; `bbox` is `[x1, y1, x2, y2]` in pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: [f32; 4],
    pub shape: u32,
    pub color: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneImage {
    pub id: u32,
    pub size: usize,
    pub noise_seed: u64,
    pub objects: Vec<SceneObject>,
}

/// Candidate box for the detector; unlabeled boxes are background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateBox {
    pub bbox: [f32; 4],
    pub category: Option<u32>,
    pub attribute: Option<u32>,
}

impl CandidateBox {
    pub fn to_bbox(&self) -> Result<BBox> {
        let [x1, y1, x2, y2] = self.bbox;
        BBox::region(x1, y1, x2, y2)
    }

    pub fn to_labeled(&self) -> Result<LabeledCandidate> {
        Ok(LabeledCandidate {
            bbox: self.to_bbox()?,
            category: self.category,
            attribute: self.attribute,
        })
    }
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaExample {
    pub id: u32,
    pub image: SceneImage,
    pub candidates: Vec<CandidateBox>,
    /// Content token ids, without `[CLS]`/`[SEP]`.
    pub question: Vec<usize>,
    pub question_text: String,
    pub qtype: QuestionType,
    /// Answer implied by the template.
    pub answer: String,
    /// Ten annotator answers.
    pub answers: Vec<String>,
}

/// Token and answer vocabularies implied by a spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
}

impl Vocab {
    pub fn token_id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answers.iter().position(|a| a == answer)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.tokens.get(i).map_or("[UNK]", String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn write_jsonl<S: Serialize>(path: &Path, records: &[S]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<S: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<S>> {
    let r = BufReader::new(
        File::open(path).map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Format(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
        }
    }

    pub fn file(self, dir: &Path) -> std::path::PathBuf {
        dir.join(format!("{}.jsonl", self.name()))
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            _ => Err(Error::InvalidInput(format!("unknown split '{s}' (expected train or val)"))),
        }
    }
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<VqaExample>> {
    read_jsonl(&split.file(dir))
}

pub fn load_vocab(dir: &Path) -> Result<Vocab> {
    let path = dir.join("vocab.json");
    let f = File::open(&path).map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}
