//! Difficulty scores computed from summed token losses.
//!
//! * `IFD(Q, A)  = s(A | Q) / s(A)`
//! * `VFD(D, I)  = s(D | I) / s(D)` over the serialized extractive dialogue
//! * `mIFD       = VFD × IFD` for extractive pairs
//! * `FFD(De, Dr, I) = s(Dr | De, I) / s(Dr | I)` for self-explain pairs
//!
//! `s` is the provider's summed NLL over the target tokens; raw sums are stored
//! in each card so ratios can be audited.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{serialize_dialogue, DialogueError, DialogueTemplate};
use crate::jsonl::{self, JsonlError, Plain, ReadMode};
use crate::provider::{LossProvider, LossRequest, LossResult, ProviderError};
use crate::record::{ImageRef, InstructionRecord, PairKind, QAPair};

/// Denominators below this raise `ZeroDenominator`.
pub const MIN_DENOMINATOR: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("{0} denominator is zero")]
    ZeroDenominator(&'static str),
    #[error("pair {pair_id} is {actual}, expected {expected}")]
    WrongKind {
        pair_id: String,
        expected: PairKind,
        actual: PairKind,
    },
    #[error("self-explain pair {explain} does not explain {source_id}")]
    PairMismatch { explain: String, source_id: String },
    #[error("image-conditioned score unavailable: {0}")]
    ImageUnsupported(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
}

impl ScoreError {
    fn from_provider(e: ProviderError) -> Self {
        match e {
            ProviderError::ImageUnsupported => ScoreError::ImageUnsupported("provider rejected the image".into()),
            other => ScoreError::Provider(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub pair_id: String,
    pub kind: PairKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ifd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vfd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mifd: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ffd: Option<f64>,
    pub provider_id: String,
    pub template_id: String,
    /// False when FFD was computed without the image (text-only fallback).
    pub canonical: bool,
    #[serde(default)]
    pub loss_details: BTreeMap<String, LossResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl ScoreCard {
    fn empty(pair: &QAPair, provider_id: &str, template: &DialogueTemplate) -> Self {
        Self {
            pair_id: pair.pair_id.clone(),
            kind: pair.kind,
            ifd: None,
            vfd: None,
            mifd: None,
            ffd: None,
            provider_id: provider_id.to_string(),
            template_id: template.template_id(),
            canonical: true,
            loss_details: BTreeMap::new(),
            failure: None,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.failure.is_some()
    }
}

/// A loss ratio together with the two raw losses behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub numerator: LossResult,
    pub denominator: LossResult,
}

fn ratio(what: &'static str, numerator: LossResult, denominator: LossResult) -> Result<Ratio, ScoreError> {
    if denominator.sum_nll < MIN_DENOMINATOR {
        return Err(ScoreError::ZeroDenominator(what));
    }
    Ok(Ratio {
        value: numerator.sum_nll / denominator.sum_nll,
        numerator,
        denominator,
    })
}

fn loss(provider: &dyn LossProvider, req: LossRequest) -> Result<LossResult, ScoreError> {
    provider.token_loss(&req).map_err(ScoreError::from_provider)
}

/// Whether FFD conditions on the image (canonical) or runs text-only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfdMode {
    #[default]
    Canonical,
    TextOnly,
}

fn require_image(provider: &dyn LossProvider, image: Option<&ImageRef>) -> Result<ImageRef, ScoreError> {
    if !provider.supports_images() {
        return Err(ScoreError::ImageUnsupported(format!(
            "provider {} is text-only",
            provider.provider_id()
        )));
    }
    match image {
        Some(img) if !img.uri.is_empty() => Ok(img.clone()),
        _ => Err(ScoreError::ImageUnsupported("record has no image".into())),
    }
}

pub fn ifd_ratio(question: &str, answer: &str, provider: &dyn LossProvider) -> Result<Ratio, ScoreError> {
    let conditioned = loss(provider, LossRequest::new(None, question, answer))?;
    let bare = loss(provider, LossRequest::new(None, "", answer))?;
    ratio("IFD", conditioned, bare)
}

pub fn ifd(question: &str, answer: &str, provider: &dyn LossProvider) -> Result<f64, ScoreError> {
    ifd_ratio(question, answer, provider).map(|r| r.value)
}

pub fn vfd_ratio(dialogue: &str, image: Option<&ImageRef>, provider: &dyn LossProvider) -> Result<Ratio, ScoreError> {
    let image = require_image(provider, image)?;
    let with_image = loss(provider, LossRequest::new(Some(&image), "", dialogue))?;
    let without = loss(provider, LossRequest::new(None, "", dialogue))?;
    ratio("VFD", with_image, without)
}

pub fn vfd(dialogue: &str, image: &ImageRef, provider: &dyn LossProvider) -> Result<f64, ScoreError> {
    vfd_ratio(dialogue, Some(image), provider).map(|r| r.value)
}

pub fn mifd(
    pair: &QAPair,
    image: Option<&ImageRef>,
    provider: &dyn LossProvider,
    template: &DialogueTemplate,
) -> Result<ScoreCard, ScoreError> {
    if pair.kind != PairKind::Extractive {
        return Err(ScoreError::WrongKind {
            pair_id: pair.pair_id.clone(),
            expected: PairKind::Extractive,
            actual: pair.kind,
        });
    }
    let dialogue = serialize_dialogue(std::slice::from_ref(pair), template)?;
    let v = vfd_ratio(&dialogue, image, provider)?;
    let i = ifd_ratio(&pair.question, &pair.answer, provider)?;
    let mut card = ScoreCard::empty(pair, provider.provider_id(), template);
    card.vfd = Some(v.value);
    card.ifd = Some(i.value);
    card.mifd = Some(v.value * i.value);
    card.loss_details.insert("vfd_num".into(), v.numerator);
    card.loss_details.insert("vfd_den".into(), v.denominator);
    card.loss_details.insert("ifd_num".into(), i.numerator);
    card.loss_details.insert("ifd_den".into(), i.denominator);
    Ok(card)
}

pub fn ffd_card(
    explain: &QAPair,
    source: &QAPair,
    image: Option<&ImageRef>,
    provider: &dyn LossProvider,
    template: &DialogueTemplate,
    mode: FfdMode,
) -> Result<ScoreCard, ScoreError> {
    if explain.kind != PairKind::SelfExplain {
        return Err(ScoreError::WrongKind {
            pair_id: explain.pair_id.clone(),
            expected: PairKind::SelfExplain,
            actual: explain.kind,
        });
    }
    if explain.explains.as_deref() != Some(source.pair_id.as_str()) || source.kind != PairKind::Extractive {
        return Err(ScoreError::PairMismatch {
            explain: explain.pair_id.clone(),
            source_id: source.pair_id.clone(),
        });
    }
    let image = match mode {
        FfdMode::Canonical => Some(require_image(provider, image)?),
        FfdMode::TextOnly => None,
    };
    let source_text = serialize_dialogue(std::slice::from_ref(source), template)?;
    let explain_text = serialize_dialogue(std::slice::from_ref(explain), template)?;
    let conditioned = loss(provider, LossRequest::new(image.as_ref(), source_text, explain_text.clone()))?;
    let bare = loss(provider, LossRequest::new(image.as_ref(), "", explain_text))?;
    let r = ratio("FFD", conditioned, bare)?;
    let mut card = ScoreCard::empty(explain, provider.provider_id(), template);
    card.ffd = Some(r.value);
    card.canonical = mode == FfdMode::Canonical;
    card.loss_details.insert("ffd_num".into(), r.numerator);
    card.loss_details.insert("ffd_den".into(), r.denominator);
    Ok(card)
}

pub fn ffd(
    explain: &QAPair,
    source: &QAPair,
    image: &ImageRef,
    provider: &dyn LossProvider,
    template: &DialogueTemplate,
) -> Result<f64, ScoreError> {
    ffd_card(explain, source, Some(image), provider, template, FfdMode::Canonical).map(|c| c.ffd.unwrap())
}

/// Scores every extractive and self-explain pair of one record. Failures
/// become cards with `failure` set.
pub fn score_record(
    record: &InstructionRecord,
    provider: &dyn LossProvider,
    template: &DialogueTemplate,
    mode: FfdMode,
) -> BTreeMap<String, ScoreCard> {
    let image = Some(&record.image);
    let mut cards = BTreeMap::new();
    for pair in &record.pairs {
        let result = match pair.kind {
            PairKind::Extractive => mifd(pair, image, provider, template),
            PairKind::SelfExplain => {
                let source = pair
                    .explains
                    .as_deref()
                    .and_then(|id| record.pair(id))
                    .ok_or_else(|| ScoreError::PairMismatch {
                        explain: pair.pair_id.clone(),
                        source_id: pair.explains.clone().unwrap_or_default(),
                    });
                source.and_then(|s| ffd_card(pair, s, image, provider, template, mode))
            }
            PairKind::Caption => continue,
        };
        let card = result.unwrap_or_else(|e| {
            let mut c = ScoreCard::empty(pair, provider.provider_id(), template);
            c.failure = Some(e.to_string());
            c
        });
        cards.insert(pair.pair_id.clone(), card);
    }
    cards
}

#[derive(Debug, Clone)]
pub struct ScoreOptions {
    pub template: DialogueTemplate,
    pub parallelism: usize,
    pub ffd_mode: FfdMode,
    /// Completed records are appended here and skipped on the next run.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        Self {
            template: DialogueTemplate::default(),
            parallelism: 1,
            ffd_mode: FfdMode::Canonical,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointEntry {
    image_id: String,
    provider_id: String,
    template_id: String,
    cards: BTreeMap<String, ScoreCard>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub records: Vec<InstructionRecord>,
    /// `image_id#pair_id: error` for each failed pair.
    pub failures: Vec<String>,
    pub resumed: usize,
}

fn load_checkpoint(
    path: &Path,
    provider_id: &str,
    template_id: &str,
) -> Result<HashMap<String, BTreeMap<String, ScoreCard>>, JsonlError> {
    if !path.exists() {
        return Ok(HashMap::new());
    }
    // Lenient: a crash can leave a torn final line.
    let (entries, torn) = jsonl::read_all::<Plain<CheckpointEntry>>(path, ReadMode::Lenient)?;
    if !torn.is_empty() {
        log::warn!("{}: ignoring {} unreadable checkpoint lines", path.display(), torn.len());
    }
    Ok(entries
        .into_iter()
        .map(|p| p.0)
        .filter(|e| e.provider_id == provider_id && e.template_id == template_id)
        .map(|e| (e.image_id, e.cards))
        .collect())
}

/// Scores a dataset. Record order is preserved; previously checkpointed
/// records are reused as-is.
pub fn score_dataset(
    records: Vec<InstructionRecord>,
    provider: &dyn LossProvider,
    options: &ScoreOptions,
) -> Result<ScoreReport, JsonlError> {
    let template_id = options.template.template_id();
    let done = match &options.checkpoint {
        Some(p) => load_checkpoint(p, provider.provider_id(), &template_id)?,
        None => HashMap::new(),
    };
    let writer = Mutex::new(());
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.parallelism.max(1))
        .build()
        .expect("thread pool");

    let results: Vec<Result<(InstructionRecord, bool), JsonlError>> = pool.install(|| {
        records
            .into_par_iter()
            .map(|mut record| {
                if let Some(cards) = done.get(&record.image.id) {
                    record.scores = cards.clone();
                    return Ok((record, true));
                }
                record.scores = score_record(&record, provider, &options.template, options.ffd_mode);
                let complete = record.scores.values().all(|c| !c.is_failed());
                if let (Some(path), true) = (&options.checkpoint, complete) {
                    let entry = CheckpointEntry {
                        image_id: record.image.id.clone(),
                        provider_id: provider.provider_id().to_string(),
                        template_id: template_id.clone(),
                        cards: record.scores.clone(),
                    };
                    let _guard = writer.lock().unwrap();
                    jsonl::append_line(&Plain(entry), path)?;
                }
                Ok((record, false))
            })
            .collect()
    });

    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    let mut resumed = 0;
    for r in results {
        let (record, reused) = r?;
        resumed += usize::from(reused);
        for card in record.scores.values() {
            if let Some(f) = &card.failure {
                failures.push(format!("{}#{}: {f}", record.image.id, card.pair_id));
            }
        }
        out.push(record);
    }
    Ok(ScoreReport {
        records: out,
        failures,
        resumed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Ifd,
    Vfd,
    Mifd,
    Ffd,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 4] = [ScoreKind::Ifd, ScoreKind::Vfd, ScoreKind::Mifd, ScoreKind::Ffd];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Ifd => "ifd",
            ScoreKind::Vfd => "vfd",
            ScoreKind::Mifd => "mifd",
            ScoreKind::Ffd => "ffd",
        }
    }

    pub fn get(self, card: &ScoreCard) -> Option<f64> {
        match self {
            ScoreKind::Ifd => card.ifd,
            ScoreKind::Vfd => card.vfd,
            ScoreKind::Mifd => card.mifd,
            ScoreKind::Ffd => card.ffd,
        }
    }
}

/// Collects one score kind across a dataset, in record/pair order.
pub fn collect_scores(records: &[InstructionRecord], kind: ScoreKind) -> Vec<f64> {
    records
        .iter()
        .flat_map(|r| r.pairs.iter().filter_map(move |p| r.scores.get(&p.pair_id)))
        .filter_map(|c| kind.get(c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

/// Fixed-width histogram starting at zero. Bins run up to the bin holding the maximum.
pub fn histogram(values: &[f64], bin_width: f64) -> Vec<HistogramBin> {
    assert!(bin_width > 0.0, "bin width must be positive");
    let Some(max) = values.iter().copied().filter(|v| v.is_finite()).reduce(f64::max) else {
        return Vec::new();
    };
    let bins = (max.max(0.0) / bin_width).floor() as usize + 1;
    let mut counts = vec![0usize; bins];
    for v in values.iter().filter(|v| v.is_finite()) {
        let i = ((v.max(0.0) / bin_width).floor() as usize).min(bins - 1);
        counts[i] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, count)| HistogramBin {
            start: i as f64 * bin_width,
            end: (i + 1) as f64 * bin_width,
            count,
        })
        .collect()
}

/// CSV of `score,bin_start,bin_end,count` rows for every score kind present.
pub fn distribution_csv(records: &[InstructionRecord], bin_width: f64) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["score", "bin_start", "bin_end", "count"])?;
    for kind in ScoreKind::ALL {
        for bin in histogram(&collect_scores(records, kind), bin_width) {
            w.write_record([
                kind.as_str().to_string(),
                format!("{:.4}", bin.start),
                format!("{:.4}", bin.end),
                bin.count.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}
