//! Serialization of QA turns into the flat text fed to token-loss providers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::record::QAPair;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DialogueError {
    #[error("dialogue has no pairs")]
    EmptyDialogue,
    #[error("qa_format must contain {{q}} and {{a}} exactly once each: {0:?}")]
    BadTemplate(String),
}

/// How a QA turn is rendered and how turns are joined.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTemplate {
    qa_format: String,
    turn_separator: String,
}

impl Default for DialogueTemplate {
    fn default() -> Self {
        Self {
            qa_format: "Question: {q}\nAnswer: {a}".into(),
            turn_separator: "\n".into(),
        }
    }
}

impl DialogueTemplate {
    pub fn new(qa_format: impl Into<String>, turn_separator: impl Into<String>) -> Result<Self, DialogueError> {
        let qa_format = qa_format.into();
        if qa_format.matches("{q}").count() != 1 || qa_format.matches("{a}").count() != 1 {
            return Err(DialogueError::BadTemplate(qa_format));
        }
        Ok(Self {
            qa_format,
            turn_separator: turn_separator.into(),
        })
    }

    pub fn qa_format(&self) -> &str {
        &self.qa_format
    }

    pub fn turn_separator(&self) -> &str {
        &self.turn_separator
    }

    /// Short digest identifying this template; scores are comparable only under equal ids.
    pub fn template_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.qa_format.as_bytes());
        h.update([0u8]);
        h.update(self.turn_separator.as_bytes());
        hex::encode(&h.finalize()[..6])
    }

    /// Renders one turn. Placeholders are substituted in a single pass, so
    /// a question containing `{a}` is copied literally.
    pub fn render_turn(&self, question: &str, answer: &str) -> String {
        let mut out = String::with_capacity(self.qa_format.len() + question.len() + answer.len());
        let mut rest = self.qa_format.as_str();
        while let Some(pos) = rest.find('{') {
            out.push_str(&rest[..pos]);
            let tail = &rest[pos..];
            if let Some(after) = tail.strip_prefix("{q}") {
                out.push_str(question);
                rest = after;
            } else if let Some(after) = tail.strip_prefix("{a}") {
                out.push_str(answer);
                rest = after;
            } else {
                out.push('{');
                rest = &tail[1..];
            }
        }
        out.push_str(rest);
        out
    }
}

pub fn serialize_dialogue(pairs: &[QAPair], template: &DialogueTemplate) -> Result<String, DialogueError> {
    if pairs.is_empty() {
        return Err(DialogueError::EmptyDialogue);
    }
    Ok(pairs
        .iter()
        .map(|p| template.render_turn(&p.question, &p.answer))
        .collect::<Vec<_>>()
        .join(&template.turn_separator))
}
