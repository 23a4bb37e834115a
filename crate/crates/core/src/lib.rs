//! Curation toolkit for multimodal instruction-tuning datasets.
//!
//! The crate covers four jobs:
//!
//! * generation prompts for caption enrichment, extractive QA and self-explain QA
//!   ([`prompt`]), sent through pluggable chat providers ([`provider`]);
//! * difficulty scores (IFD, VFD, mIFD, FFD) over summed token losses ([`scoring`]);
//! * quantile-based filtering of scored pairs ([`filter`]);
//! * dataset diversity ([`diversity`]) and composition statistics ([`stats`]).
//!
//! [`pipeline`] wires the stages into resumable runs over JSONL datasets.

pub mod dialogue;
pub mod diversity;
pub mod filter;
pub mod jsonl;
pub mod pipeline;
pub mod prompt;
pub mod provider;
pub mod record;
pub mod scoring;
pub mod stats;

pub use dialogue::{serialize_dialogue, DialogueTemplate};
pub use record::{validate_record, ImageRef, InstructionRecord, OcrLine, PairKind, QAPair};
pub use scoring::ScoreCard;
