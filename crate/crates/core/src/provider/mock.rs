//! Deterministic in-process providers. They double as test oracles: every
//! mock LM distribution has a closed form, so summed losses can be checked
//! against an explicit probability-table walk.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    check_embeddings, whitespace_tokens, ChatProvider, EmbedProvider, GenParams, LossProvider, LossRequest,
    LossResult, ProviderError,
};
use crate::jsonl::{self, Plain, ReadMode};
use crate::prompt::{PromptBundle, Stage};

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockMode {
    /// Every token has probability 1/V regardless of inputs.
    Uniform,
    /// Tokens already seen in the context or target prefix share `p_repeat`;
    /// the rest of the mass is uniform over unseen tokens.
    Copycat { p_repeat: f64 },
    /// With an image attached, the image's token bag shares `p_inbag`; the rest
    /// is uniform over tokens outside the bag. Text context is ignored.
    ImageBag { p_inbag: f64 },
}

impl MockMode {
    fn label(&self) -> String {
        match self {
            MockMode::Uniform => "uniform".into(),
            MockMode::Copycat { p_repeat } => format!("copycat({p_repeat})"),
            MockMode::ImageBag { p_inbag } => format!("imagebag({p_inbag})"),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockLmSpec {
    /// Ordered vocabulary. If it contains `<unk>`, out-of-vocabulary tokens map to it.
    pub vocab: Vec<String>,
    pub mode: MockMode,
    /// Token bag per image id, used by `ImageBag`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub bags: BTreeMap<String, Vec<String>>,
    #[serde(default = "default_true")]
    pub accepts_images: bool,
}

impl MockLmSpec {
    pub fn new(vocab: impl IntoIterator<Item = impl Into<String>>, mode: MockMode) -> Self {
        Self {
            vocab: vocab.into_iter().map(Into::into).collect(),
            mode,
            bags: BTreeMap::new(),
            accepts_images: true,
        }
    }

    /// Vocabulary made of every whitespace token in `texts`, sorted.
    pub fn fitted<'a>(texts: impl IntoIterator<Item = &'a str>, mode: MockMode) -> Self {
        let vocab: std::collections::BTreeSet<&str> = texts.into_iter().flat_map(whitespace_tokens).collect();
        Self::new(vocab, mode)
    }

    pub fn with_bag(mut self, image_id: impl Into<String>, tokens: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.bags
            .insert(image_id.into(), tokens.into_iter().map(Into::into).collect());
        self
    }

    pub fn text_only(mut self) -> Self {
        self.accepts_images = false;
        self
    }
}

#[derive(Debug, Clone)]
pub struct MockLm {
    id: String,
    index: HashMap<String, usize>,
    vocab_size: usize,
    unk: Option<usize>,
    mode: MockMode,
    bags: HashMap<String, HashSet<usize>>,
    accepts_images: bool,
}

impl MockLm {
    pub fn new(spec: MockLmSpec) -> Result<Self, String> {
        if spec.vocab.is_empty() {
            return Err("mock vocabulary is empty".into());
        }
        let mut index = HashMap::new();
        for (i, tok) in spec.vocab.iter().enumerate() {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(format!("vocabulary entry {tok:?} is not a whitespace token"));
            }
            if index.insert(tok.clone(), i).is_some() {
                return Err(format!("duplicate vocabulary entry {tok:?}"));
            }
        }
        match spec.mode {
            MockMode::Copycat { p_repeat: p } | MockMode::ImageBag { p_inbag: p } if !(p > 0.0 && p < 1.0) => {
                return Err(format!("mock probability must lie in (0,1), got {p}"));
            }
            _ => {}
        }
        let mut bags = HashMap::new();
        for (image, toks) in &spec.bags {
            let mut set = HashSet::new();
            for t in toks {
                let i = *index
                    .get(t)
                    .ok_or_else(|| format!("bag token {t:?} for image {image} not in vocabulary"))?;
                set.insert(i);
            }
            bags.insert(image.clone(), set);
        }
        let unk = index.get(UNK).copied();
        let vocab_size = spec.vocab.len();
        let mut id = format!("mock-{}-v{vocab_size}", spec.mode.label());
        if !spec.accepts_images {
            id.push_str("-textonly");
        }
        Ok(Self {
            id,
            index,
            vocab_size,
            unk,
            mode: spec.mode,
            bags,
            accepts_images: spec.accepts_images,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn token_ids(&self, text: &str) -> Result<Vec<usize>, ProviderError> {
        whitespace_tokens(text)
            .map(|t| {
                self.index
                    .get(t)
                    .copied()
                    .or(self.unk)
                    .ok_or_else(|| ProviderError::UnknownToken(t.to_string()))
            })
            .collect()
    }

    /// Probability of `token` given the seen-token mask and the image bag.
    fn prob(&self, token: usize, seen: &[bool], seen_count: usize, bag: Option<&HashSet<usize>>) -> f64 {
        let v = self.vocab_size as f64;
        let split = |inside: bool, mass: f64, size: usize| {
            if size == 0 || size == self.vocab_size {
                1.0 / v
            } else if inside {
                mass / size as f64
            } else {
                (1.0 - mass) / (self.vocab_size - size) as f64
            }
        };
        match self.mode {
            MockMode::Uniform => 1.0 / v,
            MockMode::Copycat { p_repeat } => split(seen[token], p_repeat, seen_count),
            MockMode::ImageBag { p_inbag } => match bag {
                Some(b) => split(b.contains(&token), p_inbag, b.len()),
                None => 1.0 / v,
            },
        }
    }
}

impl LossProvider for MockLm {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn supports_images(&self) -> bool {
        self.accepts_images
    }

    fn token_loss(&self, req: &LossRequest) -> Result<LossResult, ProviderError> {
        if req.image.is_some() && !self.accepts_images {
            return Err(ProviderError::ImageUnsupported);
        }
        let target = self.token_ids(&req.target)?;
        if target.is_empty() {
            return Err(ProviderError::EmptyTarget);
        }
        let context = self.token_ids(&req.context)?;
        let empty = HashSet::new();
        let bag = req
            .image
            .as_ref()
            .map(|img| self.bags.get(&img.id).unwrap_or(&empty));

        let mut seen = vec![false; self.vocab_size];
        let mut seen_count = 0;
        let mut mark = |t: usize, seen: &mut Vec<bool>| {
            if !seen[t] {
                seen[t] = true;
                seen_count += 1;
            }
            seen_count
        };
        let mut count = 0;
        for &t in &context {
            count = mark(t, &mut seen);
        }
        let mut sum_nll = 0.0;
        for &t in &target {
            sum_nll -= self.prob(t, &seen, count, bag).ln();
            count = mark(t, &mut seen);
        }
        Ok(LossResult {
            sum_nll,
            token_count: target.len() as u32,
            provider_id: self.id.clone(),
        })
    }
}

/// Feature-hashing sentence embedder: mean of signed one-hot token vectors.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    id: String,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            id: format!("mock-hash-embed-d{dim}"),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_one(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in whitespace_tokens(text) {
            let h = fnv1a(tok.to_lowercase().as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
            n += 1;
        }
        if n > 0 {
            v.iter_mut().for_each(|x| *x /= n as f64);
        }
        v
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbedProvider for HashEmbedder {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        if texts.is_empty() {
            return Err(ProviderError::EmptyInput);
        }
        let out: Vec<Vec<f64>> = texts.iter().map(|t| self.embed_one(t)).collect();
        check_embeddings(texts.len(), &out)?;
        Ok(out)
    }
}

/// One canned reply. Without `image_id` it serves as the stage-wide fallback.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CannedResponse {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub text: String,
}

/// Chat provider that replays fixture texts keyed by stage and image.
#[derive(Debug, Clone, Default)]
pub struct CannedChat {
    responses: HashMap<(Stage, Option<String>), String>,
}

impl CannedChat {
    pub fn new(responses: impl IntoIterator<Item = CannedResponse>) -> Self {
        Self {
            responses: responses
                .into_iter()
                .map(|r| ((r.stage, r.image_id), r.text))
                .collect(),
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, jsonl::JsonlError> {
        let (items, _) = jsonl::read_all::<Plain<CannedResponse>>(path, ReadMode::Strict)?;
        Ok(Self::new(items.into_iter().map(|p| p.0)))
    }
}

impl ChatProvider for CannedChat {
    fn provider_id(&self) -> &str {
        "mock-canned-chat"
    }

    fn chat_complete(&self, bundle: &PromptBundle, _gen: &GenParams) -> Result<String, ProviderError> {
        self.responses
            .get(&(bundle.stage, Some(bundle.image.id.clone())))
            .or_else(|| self.responses.get(&(bundle.stage, None)))
            .cloned()
            .ok_or_else(|| ProviderError::NoFixture(format!("{}/{}", bundle.stage, bundle.image.id)))
    }
}

/// Rule-based chat provider that derives a plausible reply from the prompt payload.
#[derive(Debug, Clone, Default)]
pub struct ScriptedChat;

fn ocr_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\[\[\[[^\]]*\](?:,\[[^\]]*\]){3}\], (.*), [0-9.eE+-]+\]$").unwrap())
}

fn reference_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?s)Reference QA:\nQuestion: (.*?)\nAnswer: (.*)$").unwrap())
}

const REGION_QUESTIONS: [&str; 3] = [
    "What is written in the most prominent text of the image?",
    "What other text appears in the image?",
    "Which words can be read near the bottom of the image?",
];

impl ChatProvider for ScriptedChat {
    fn provider_id(&self) -> &str {
        "mock-scripted-chat"
    }

    fn chat_complete(&self, bundle: &PromptBundle, _gen: &GenParams) -> Result<String, ProviderError> {
        let payload = bundle.target_user_content();
        let caption = payload
            .lines()
            .find_map(|l| l.strip_prefix("Image caption: "))
            .unwrap_or("")
            .trim();
        let texts: Vec<&str> = ocr_line_re()
            .captures_iter(payload)
            .map(|c| c.get(1).unwrap().as_str())
            .collect();
        match bundle.stage {
            Stage::CaptionEnrich => {
                let quoted: Vec<String> = texts.iter().map(|t| format!("\"{t}\"")).collect();
                Ok(format!("{caption} The visible text includes {}.", quoted.join(", ")))
            }
            Stage::ExtractiveGen => {
                let mut out = Vec::new();
                for (q, t) in REGION_QUESTIONS.iter().zip(&texts) {
                    out.push(format!("Question: {q}\nAnswer: The text reads \"{t}\"."));
                }
                out.push(format!(
                    "Question: What is shown in this image?\nAnswer: {caption}"
                ));
                Ok(out.join("\n"))
            }
            Stage::SelfExplainGen => {
                let caps = reference_re()
                    .captures(payload)
                    .ok_or_else(|| ProviderError::Decode("no reference QA in payload".into()))?;
                let (q, a) = (caps[1].trim(), caps[2].trim());
                Ok(format!(
                    "Reasoning Question: How can we tell the answer to \"{q}\"?\nReasoning Answer: Looking at the image, {a}"
                ))
            }
        }
    }
}
