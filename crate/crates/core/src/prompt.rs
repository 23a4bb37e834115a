//! Assembles generation prompts for the three stages and parses the replies.
//!
//! System messages ship as plain-text assets under `assets/prompts/`. The
//! user payload always carries the manual caption and the OCR lines rendered
//! as `[[4 corner points], text, confidence]`; the image itself is attached to
//! the target user turn only.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::{self, Plain, ReadMode};
use crate::record::{ImageRef, InstructionRecord, PairKind, QAPair};

pub const CAPTION_ENRICH_SYSTEM: &str = include_str!("../assets/prompts/caption_enrich.txt");
pub const EXTRACTIVE_GEN_SYSTEM: &str = include_str!("../assets/prompts/extractive_gen.txt");
pub const SELFEXPLAIN_GEN_SYSTEM: &str = include_str!("../assets/prompts/selfexplain_gen.txt");
const DEFAULT_DEMONSTRATIONS: &str = include_str!("../assets/demonstrations.jsonl");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("record {0} has no OCR lines")]
    MissingOcr(String),
    #[error("record {0} has no manual caption")]
    MissingCaption(String),
    #[error("pair {pair_id} is {kind}, expected extractive")]
    WrongPairKind { pair_id: String, kind: PairKind },
    #[error("pair {pair_id} does not belong to record {image_id}")]
    ForeignPair { pair_id: String, image_id: String },
    #[error("demonstration {index}: {reason}")]
    BadDemonstration { index: usize, reason: String },
    #[error("could not parse {stage} generation: {reason}")]
    ParseFailure {
        stage: Stage,
        reason: String,
        raw: String,
    },
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    CaptionEnrich,
    ExtractiveGen,
    SelfExplainGen,
}

impl Stage {
    pub fn system_message(self) -> &'static str {
        match self {
            Stage::CaptionEnrich => CAPTION_ENRICH_SYSTEM,
            Stage::ExtractiveGen => EXTRACTIVE_GEN_SYSTEM,
            Stage::SelfExplainGen => SELFEXPLAIN_GEN_SYSTEM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::CaptionEnrich => "caption_enrich",
            Stage::ExtractiveGen => "extractive_gen",
            Stage::SelfExplainGen => "selfexplain_gen",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    pub image_attached: bool,
}

impl Message {
    fn new(role: Role, content: impl Into<String>, image_attached: bool) -> Self {
        Self {
            role,
            content: content.into(),
            image_attached,
        }
    }
}

/// Provider-ready message sequence for one generation call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub stage: Stage,
    pub image: ImageRef,
    pub messages: Vec<Message>,
}

impl PromptBundle {
    /// Exactly one system message, in first position, and exactly one image attachment.
    pub fn is_well_formed(&self) -> bool {
        let systems = self.messages.iter().filter(|m| m.role == Role::System).count();
        let images = self.messages.iter().filter(|m| m.image_attached).count();
        systems == 1 && self.messages.first().map(|m| m.role) == Some(Role::System) && images == 1
    }

    /// Content of the last user turn (the one about the target image).
    pub fn target_user_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

/// An in-context example for extractive generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub caption: String,
    pub ocr_text: String,
    pub target_output: String,
}

impl Demonstration {
    fn check(&self, index: usize) -> Result<(), PromptError> {
        for (name, value) in [
            ("caption", &self.caption),
            ("ocr_text", &self.ocr_text),
            ("target_output", &self.target_output),
        ] {
            if value.trim().is_empty() {
                return Err(PromptError::BadDemonstration {
                    index,
                    reason: format!("{name} is empty"),
                });
            }
        }
        Ok(())
    }
}

/// Loads demonstrations from a JSONL fixture file.
pub fn load_demonstrations(path: &Path) -> Result<Vec<Demonstration>, PromptError> {
    let (items, _) = jsonl::read_all::<Plain<Demonstration>>(path, ReadMode::Strict)?;
    let demos: Vec<Demonstration> = items.into_iter().map(|p| p.0).collect();
    for (i, d) in demos.iter().enumerate() {
        d.check(i)?;
    }
    Ok(demos)
}

/// The two placeholder demonstrations bundled with the crate.
pub fn default_demonstrations() -> Vec<Demonstration> {
    DEFAULT_DEMONSTRATIONS
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).expect("bundled demonstrations are valid JSON"))
        .collect()
}

fn check_inputs(record: &InstructionRecord) -> Result<(), PromptError> {
    if record.manual_caption.trim().is_empty() {
        return Err(PromptError::MissingCaption(record.image.id.clone()));
    }
    if record.ocr.is_empty() {
        return Err(PromptError::MissingOcr(record.image.id.clone()));
    }
    Ok(())
}

pub fn render_ocr(record: &InstructionRecord) -> String {
    record
        .ocr
        .iter()
        .map(|l| l.render())
        .collect::<Vec<_>>()
        .join("\n")
}

fn context_payload(caption: &str, ocr_text: &str) -> String {
    format!("Image caption: {caption}\nOCR result:\n{ocr_text}")
}

pub fn build_caption_enrichment(record: &InstructionRecord) -> Result<PromptBundle, PromptError> {
    check_inputs(record)?;
    Ok(PromptBundle {
        stage: Stage::CaptionEnrich,
        image: record.image.clone(),
        messages: vec![
            Message::new(Role::System, CAPTION_ENRICH_SYSTEM, false),
            Message::new(
                Role::User,
                context_payload(&record.manual_caption, &render_ocr(record)),
                true,
            ),
        ],
    })
}

/// Demonstrations become user/assistant turn pairs ahead of the target turn.
pub fn build_extractive_gen(
    record: &InstructionRecord,
    demos: &[Demonstration],
) -> Result<PromptBundle, PromptError> {
    check_inputs(record)?;
    let mut messages = vec![Message::new(Role::System, EXTRACTIVE_GEN_SYSTEM, false)];
    for (i, demo) in demos.iter().enumerate() {
        demo.check(i)?;
        messages.push(Message::new(Role::User, context_payload(&demo.caption, &demo.ocr_text), false));
        messages.push(Message::new(Role::Assistant, demo.target_output.clone(), false));
    }
    messages.push(Message::new(
        Role::User,
        context_payload(&record.manual_caption, &render_ocr(record)),
        true,
    ));
    Ok(PromptBundle {
        stage: Stage::ExtractiveGen,
        image: record.image.clone(),
        messages,
    })
}

pub fn build_selfexplain_gen(
    record: &InstructionRecord,
    extractive_pair: &QAPair,
) -> Result<PromptBundle, PromptError> {
    if extractive_pair.kind != PairKind::Extractive {
        return Err(PromptError::WrongPairKind {
            pair_id: extractive_pair.pair_id.clone(),
            kind: extractive_pair.kind,
        });
    }
    if record.pair(&extractive_pair.pair_id) != Some(extractive_pair) {
        return Err(PromptError::ForeignPair {
            pair_id: extractive_pair.pair_id.clone(),
            image_id: record.image.id.clone(),
        });
    }
    check_inputs(record)?;
    let payload = format!(
        "{}\nReference QA:\nQuestion: {}\nAnswer: {}",
        context_payload(&record.manual_caption, &render_ocr(record)),
        extractive_pair.question,
        extractive_pair.answer
    );
    Ok(PromptBundle {
        stage: Stage::SelfExplainGen,
        image: record.image.clone(),
        messages: vec![
            Message::new(Role::System, SELFEXPLAIN_GEN_SYSTEM, false),
            Message::new(Role::User, payload, true),
        ],
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Generation {
    EnrichedCaption(String),
    Pairs(Vec<QAPair>),
}

fn qa_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        // Line-anchored "Question:"/"Answer:" with optional bullets, numbering
        // ("1.", "2)") and numbered short forms ("Q1:", "A1:").
        Regex::new(
            r"(?im)^[ \t]*(?:[-*#>]+[ \t]*)?(?:\d+[.)][ \t]*)?(?:\*\*)?(question|answer|q|a)[ \t]*\d*[ \t]*(?:\*\*)?[ \t]*:(?:\*\*)?",
        )
        .unwrap()
    })
}

fn reasoning_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)reasoning[ \t]+(question|answer)[ \t]*:").unwrap())
}

fn clean(segment: &str) -> String {
    let mut s = segment.trim();
    // Models sometimes echo the literal "\n" from the requested format.
    while let Some(rest) = s.strip_suffix("\\n") {
        s = rest.trim_end();
    }
    s.trim().to_string()
}

fn failure(stage: Stage, raw: &str, reason: impl Into<String>) -> PromptError {
    PromptError::ParseFailure {
        stage,
        reason: reason.into(),
        raw: raw.to_string(),
    }
}

/// Splits text at marker matches into `(is_question, content)` segments.
fn segments(re: &Regex, text: &str) -> Vec<(bool, String)> {
    let hits: Vec<_> = re.captures_iter(text).collect();
    hits.iter()
        .enumerate()
        .map(|(i, cap)| {
            let whole = cap.get(0).unwrap();
            let end = hits.get(i + 1).map_or(text.len(), |n| n.get(0).unwrap().start());
            let tag = cap[1].to_ascii_lowercase();
            (tag.starts_with('q'), clean(&text[whole.end()..end]))
        })
        .collect()
}

pub fn parse_generation(text: &str, stage: Stage) -> Result<Generation, PromptError> {
    match stage {
        Stage::CaptionEnrich => {
            let caption = text.trim();
            if caption.is_empty() {
                return Err(failure(stage, text, "empty caption"));
            }
            Ok(Generation::EnrichedCaption(caption.to_string()))
        }
        Stage::ExtractiveGen => {
            let segs = segments(qa_marker(), text);
            if segs.is_empty() {
                return Err(failure(stage, text, "no Question:/Answer: markers"));
            }
            if !segs.len().is_multiple_of(2) {
                return Err(failure(stage, text, "unpaired question or answer"));
            }
            let mut pairs = Vec::with_capacity(segs.len() / 2);
            for chunk in segs.chunks(2) {
                let [(true, q), (false, a)] = chunk else {
                    return Err(failure(stage, text, "markers do not alternate Question/Answer"));
                };
                if q.is_empty() || a.is_empty() {
                    return Err(failure(stage, text, "empty question or answer"));
                }
                pairs.push(QAPair::extractive(q.clone(), a.clone()));
            }
            Ok(Generation::Pairs(pairs))
        }
        Stage::SelfExplainGen => {
            let segs = segments(reasoning_marker(), text);
            match segs.as_slice() {
                [(true, q), (false, a)] if !q.is_empty() && !a.is_empty() => Ok(Generation::Pairs(vec![
                    QAPair::new(PairKind::SelfExplain, q.clone(), a.clone()),
                ])),
                [] => Err(failure(stage, text, "no Reasoning Question:/Reasoning Answer: markers")),
                _ => Err(failure(stage, text, "expected exactly one reasoning question followed by one answer")),
            }
        }
    }
}

/// Renders pairs in the canonical output format that `parse_generation` reads.
pub fn render_generation(pairs: &[QAPair], stage: Stage) -> String {
    let (q, a) = match stage {
        Stage::SelfExplainGen => ("Reasoning Question", "Reasoning Answer"),
        _ => ("Question", "Answer"),
    };
    pairs
        .iter()
        .map(|p| format!("{q}: {}\n{a}: {}", p.question, p.answer))
        .collect::<Vec<_>>()
        .join("\n")
}
