//! Dataset record model shared by every pipeline stage.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scoring::ScoreCard;

/// Version tag written on every JSONL line.
pub const SCHEMA_VERSION: &str = "curate/1";

/// One OCR detection: four corner points, the recognized text and its confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrLine {
    pub bbox: [[f64; 2]; 4],
    pub text: String,
    pub confidence: f64,
}

impl OcrLine {
    pub fn new(bbox: [[f64; 2]; 4], text: impl Into<String>, confidence: f64) -> Self {
        Self {
            bbox,
            text: text.into(),
            confidence,
        }
    }

    /// Renders the line as `[[[x,y],...], text, confidence]`.
    pub fn render(&self) -> String {
        let corners: Vec<String> = self
            .bbox
            .iter()
            .map(|[x, y]| format!("[{x},{y}]"))
            .collect();
        format!("[[{}], {}, {}]", corners.join(","), self.text, self.confidence)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u32>,
}

impl ImageRef {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            width: None,
            height: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Extractive,
    SelfExplain,
    Caption,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Extractive => "extractive",
            PairKind::SelfExplain => "self_explain",
            PairKind::Caption => "caption",
        }
    }

    /// Extractive and self-explain pairs make up the VQA portion of a dataset.
    pub fn is_vqa(self) -> bool {
        matches!(self, PairKind::Extractive | PairKind::SelfExplain)
    }
}

impl fmt::Display for PairKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single question/answer turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub kind: PairKind,
    pub question: String,
    pub answer: String,
    pub pair_id: String,
    /// Source extractive pair; set exactly when `kind` is `SelfExplain`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explains: Option<String>,
}

impl QAPair {
    pub fn new(kind: PairKind, question: impl Into<String>, answer: impl Into<String>) -> Self {
        let question = question.into();
        let answer = answer.into();
        let pair_id = pair_id_for(kind, &question, &answer);
        Self {
            kind,
            question,
            answer,
            pair_id,
            explains: None,
        }
    }

    pub fn extractive(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self::new(PairKind::Extractive, question, answer)
    }

    pub fn caption(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self::new(PairKind::Caption, question, answer)
    }

    /// A self-explain pair attached to `source`.
    pub fn self_explain(
        question: impl Into<String>,
        answer: impl Into<String>,
        source: &QAPair,
    ) -> Self {
        let mut pair = Self::new(PairKind::SelfExplain, question, answer);
        pair.explains = Some(source.pair_id.clone());
        pair
    }
}

/// Stable content hash of `(kind, question, answer)`, 16 hex chars.
pub fn pair_id_for(kind: PairKind, question: &str, answer: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(kind.as_str().as_bytes());
    hasher.update([0u8]);
    hasher.update(question.as_bytes());
    hasher.update([0u8]);
    hasher.update(answer.as_bytes());
    let digest = hasher.finalize();
    hex::encode(&digest[..8])
}

/// Who produced a stage's artifacts, and when.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStamp {
    pub generator: String,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub image: ImageRef,
    pub manual_caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enriched_caption: Option<String>,
    #[serde(default)]
    pub ocr: Vec<OcrLine>,
    #[serde(default)]
    pub pairs: Vec<QAPair>,
    /// Score cards keyed by `pair_id`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scores: BTreeMap<String, ScoreCard>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, StageStamp>,
}

impl InstructionRecord {
    pub fn new(image: ImageRef, manual_caption: impl Into<String>, ocr: Vec<OcrLine>) -> Self {
        Self {
            image,
            manual_caption: manual_caption.into(),
            enriched_caption: None,
            ocr,
            pairs: Vec::new(),
            scores: BTreeMap::new(),
            provenance: BTreeMap::new(),
        }
    }

    pub fn pair(&self, pair_id: &str) -> Option<&QAPair> {
        self.pairs.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn pairs_of(&self, kind: PairKind) -> impl Iterator<Item = &QAPair> {
        self.pairs.iter().filter(move |p| p.kind == kind)
    }

    /// OCR text joined by single spaces, in detection order.
    pub fn ocr_text(&self) -> String {
        self.ocr
            .iter()
            .map(|l| l.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A broken invariant, rendered as `field: rule`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every record-level invariant. An empty result means the record is well formed.
pub fn validate_record(record: &InstructionRecord) -> Vec<Violation> {
    let mut out = Vec::new();

    if record.image.id.is_empty() {
        out.push(Violation::new("image.id", "empty"));
    }

    for (i, line) in record.ocr.iter().enumerate() {
        let field = format!("ocr[{i}]");
        if !(0.0..=1.0).contains(&line.confidence) {
            out.push(Violation::new(&field, "confidence out of range"));
        }
        let bad_coord = line
            .bbox
            .iter()
            .flatten()
            .any(|c| !c.is_finite() || *c < 0.0);
        if bad_coord {
            out.push(Violation::new(&field, "negative or non-finite bbox coordinate"));
        }
    }

    let mut seen = HashSet::new();
    for pair in &record.pairs {
        let field = format!("pair {}", pair.pair_id);
        if !seen.insert(pair.pair_id.as_str()) {
            out.push(Violation::new(&field, "duplicate pair_id"));
        }
        if pair.question.trim().is_empty() {
            out.push(Violation::new(&field, "empty question"));
        }
        if pair.answer.trim().is_empty() {
            out.push(Violation::new(&field, "empty answer"));
        }
        match (pair.kind, &pair.explains) {
            (PairKind::SelfExplain, None) => out.push(Violation::new(&field, "explains unset")),
            (PairKind::SelfExplain, Some(target)) => {
                let hits = record
                    .pairs
                    .iter()
                    .filter(|p| &p.pair_id == target)
                    .collect::<Vec<_>>();
                match hits.as_slice() {
                    [] => out.push(Violation::new(
                        &field,
                        format!("explains target {target} not found"),
                    )),
                    [p] if p.kind != PairKind::Extractive => out.push(Violation::new(
                        &field,
                        format!("explains target {target} is not extractive"),
                    )),
                    [_] => {}
                    _ => out.push(Violation::new(
                        &field,
                        format!("explains target {target} is ambiguous"),
                    )),
                }
            }
            (_, Some(_)) => out.push(Violation::new(&field, "explains set on non-self-explain pair")),
            (_, None) => {}
        }
    }
    out
}

/// Dataset-level checks: per-record violations plus image id uniqueness.
pub fn validate_dataset(records: &[InstructionRecord]) -> Vec<(usize, Violation)> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, record) in records.iter().enumerate() {
        for v in validate_record(record) {
            out.push((i, v));
        }
        if !ids.insert(record.image.id.as_str()) {
            out.push((i, Violation::new("image.id", "duplicate within dataset")));
        }
    }
    out
}
