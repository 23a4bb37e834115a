use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ChatSpec, DiversityBackend, EmbedSpec, LossSpec};
use super::{Artifacts, Pipeline, PipelineError, PipelineStage};
use crate::dialogue::DialogueTemplate;
use crate::diversity::{self, Backend, ProbeVocab};
use crate::filter::{self, audit_csv, cascade, sweep_levels, FilterPolicy, Thresholds};
use crate::jsonl::{self, write_atomic, Plain};
use crate::prompt::{self, Generation, Stage};
use crate::provider::http::HttpProvider;
use crate::provider::mock::{CannedChat, HashEmbedder, MockLm, MockLmSpec, ScriptedChat, UNK};
use crate::provider::{whitespace_tokens, ChatProvider, EmbedProvider, LossProvider};
use crate::record::{validate_record, ImageRef, InstructionRecord, OcrLine, PairKind, QAPair, StageStamp};
use crate::scoring::{self, ScoreOptions};
use crate::stats::{self, ReportFormat, Taxonomy};

/// One unusable input or generation, kept for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineEntry {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_id: Option<String>,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

/// `[box, [text, confidence]]`.
type RawDetection = ([[f64; 2]; 4], (String, f64));

/// One line of the raw OCR input: PaddleOCR-style `[box, [text, confidence]]` detections.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    image_id: String,
    image: String,
    #[serde(default)]
    width: Option<u32>,
    #[serde(default)]
    height: Option<u32>,
    caption: String,
    #[serde(default)]
    ocr: Vec<RawDetection>,
}

const CAPTION_QUESTIONS: [&str; 3] = [
    "Describe this image in detail.",
    "Provide a detailed description of the image, including any visible text.",
    "What does this image show? Include the text that appears in it.",
];

fn caption_question(image_id: &str) -> &'static str {
    let d = Sha256::digest(image_id.as_bytes());
    CAPTION_QUESTIONS[d[0] as usize % CAPTION_QUESTIONS.len()]
}

impl Pipeline {
    fn fail(stage: PipelineStage) -> impl Fn(String) -> PipelineError {
        move |message| PipelineError::Stage { stage, message }
    }

    fn read(&self, stage: PipelineStage, path: &Path) -> Result<Vec<InstructionRecord>, PipelineError> {
        jsonl::read_records(path).map_err(|e| Self::fail(stage)(e.to_string()))
    }

    fn write_records(
        &self,
        stage: PipelineStage,
        records: &[InstructionRecord],
        path: &Path,
    ) -> Result<PathBuf, PipelineError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Self::fail(stage)(format!("{}: {e}", dir.display())))?;
        }
        jsonl::write_jsonl(records, path).map_err(|e| Self::fail(stage)(e.to_string()))?;
        Ok(path.to_path_buf())
    }

    fn write_text(&self, stage: PipelineStage, path: &Path, body: &str) -> Result<PathBuf, PipelineError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Self::fail(stage)(format!("{}: {e}", dir.display())))?;
        }
        write_atomic(path, body.as_bytes()).map_err(|e| Self::fail(stage)(e.to_string()))?;
        Ok(path.to_path_buf())
    }

    /// Always rewritten, possibly empty, so reruns never leave stale entries.
    fn write_quarantine(&self, stage: PipelineStage, entries: &[QuarantineEntry]) -> Result<PathBuf, PipelineError> {
        if !entries.is_empty() {
            log::warn!("{stage}: {} items quarantined", entries.len());
        }
        let path = self.workdir.join("quarantine").join(format!("{stage}.jsonl"));
        let items: Vec<Plain<QuarantineEntry>> = entries.iter().cloned().map(Plain).collect();
        let body = jsonl::encode_all(&items).map_err(Self::fail(stage))?;
        self.write_text(stage, &path, &String::from_utf8(body).expect("json is utf-8"))
    }

    fn stamp(&self, generator: &str) -> StageStamp {
        StageStamp {
            generator: generator.to_string(),
            timestamp: self.timestamp.clone(),
        }
    }

    fn pool(&self) -> rayon::ThreadPool {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.parallelism)
            .build()
            .expect("thread pool")
    }

    fn chat_provider(&self) -> Result<Box<dyn ChatProvider>, PipelineError> {
        Ok(match &self.config.providers.chat {
            ChatSpec::Http(c) => Box::new(HttpProvider::new(c.clone()).map_err(|e| PipelineError::Config(e.to_string()))?),
            ChatSpec::Scripted => Box::new(ScriptedChat),
            ChatSpec::Canned { fixtures } => Box::new(
                CannedChat::from_jsonl(fixtures).map_err(|e| PipelineError::Config(e.to_string()))?,
            ),
        })
    }

    fn loss_provider(&self, records: &[InstructionRecord], template: &DialogueTemplate) -> Result<Box<dyn LossProvider>, PipelineError> {
        Ok(match &self.config.providers.loss {
            LossSpec::Http(c) => Box::new(HttpProvider::new(c.clone()).map_err(|e| PipelineError::Config(e.to_string()))?),
            LossSpec::Mock { mode, accepts_images } => {
                let scaffold = template.render_turn("", "") + template.turn_separator();
                let mut texts: Vec<&str> = vec![&scaffold];
                for r in records {
                    texts.push(&r.manual_caption);
                    texts.extend(r.enriched_caption.as_deref());
                    texts.extend(r.ocr.iter().map(|l| l.text.as_str()));
                    for p in &r.pairs {
                        texts.push(&p.question);
                        texts.push(&p.answer);
                    }
                }
                let mut spec = MockLmSpec::fitted(texts, *mode);
                if !spec.vocab.iter().any(|t| t == UNK) {
                    spec.vocab.push(UNK.to_string());
                }
                for r in records {
                    let bag: BTreeSet<&str> = r.ocr.iter().flat_map(|l| whitespace_tokens(&l.text)).collect();
                    spec = spec.with_bag(r.image.id.clone(), bag);
                }
                if !accepts_images {
                    spec = spec.text_only();
                }
                Box::new(MockLm::new(spec).map_err(PipelineError::Config)?)
            }
        })
    }

    fn embed_provider(&self) -> Result<Box<dyn EmbedProvider>, PipelineError> {
        Ok(match &self.config.providers.embed {
            EmbedSpec::Http(c) => Box::new(HttpProvider::new(c.clone()).map_err(|e| PipelineError::Config(e.to_string()))?),
            EmbedSpec::Hash { dim } => Box::new(HashEmbedder::new(*dim)),
        })
    }

    fn template(&self) -> DialogueTemplate {
        DialogueTemplate::new(self.config.score.qa_format.clone(), self.config.score.turn_separator.clone())
            .expect("validated with the config")
    }

    pub(crate) fn ingest(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Ingest;
        let text = std::fs::read_to_string(input).map_err(|e| Self::fail(stage)(format!("{}: {e}", input.display())))?;
        let mut records = Vec::new();
        let mut quarantine = Vec::new();
        let mut seen = HashSet::new();
        let mut count_in = 0;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            count_in += 1;
            let entry = |image_id: Option<String>, reason: String| QuarantineEntry {
                stage: stage.to_string(),
                image_id,
                pair_id: None,
                reason,
                raw: Some(line.to_string()),
            };
            let raw: RawItem = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(e) => {
                    quarantine.push(entry(None, format!("line {}: {e}", i + 1)));
                    continue;
                }
            };
            let mut image = ImageRef::new(raw.image_id.clone(), raw.image);
            image.width = raw.width;
            image.height = raw.height;
            let ocr = raw
                .ocr
                .into_iter()
                .map(|(bbox, (text, conf))| OcrLine::new(bbox, text, conf))
                .collect();
            let mut record = InstructionRecord::new(image, raw.caption, ocr);
            record.provenance.insert(stage.to_string(), self.stamp("ocr-jsonl"));
            let violations = validate_record(&record);
            if !violations.is_empty() {
                let why: Vec<String> = violations.iter().map(ToString::to_string).collect();
                quarantine.push(entry(Some(raw.image_id), why.join("; ")));
                continue;
            }
            if !seen.insert(raw.image_id.clone()) {
                quarantine.push(entry(Some(raw.image_id), "duplicate image id".into()));
                continue;
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(Self::fail(stage)(format!("no usable records in {}", input.display())));
        }
        let out = self.write_records(stage, &records, &self.workdir.join("ingest.jsonl"))?;
        let q = self.write_quarantine(stage, &quarantine)?;
        Ok(Artifacts {
            outputs: vec![out, q],
            count_in,
            count_out: records.len(),
        })
    }

    /// Applies `f` to every record in parallel, preserving order.
    fn map_records<F>(&self, records: Vec<InstructionRecord>, f: F) -> (Vec<InstructionRecord>, Vec<QuarantineEntry>, usize)
    where
        F: Fn(&mut InstructionRecord) -> (usize, Vec<QuarantineEntry>) + Sync + Send,
    {
        let results: Vec<(InstructionRecord, usize, Vec<QuarantineEntry>)> = self.pool().install(|| {
            records
                .into_par_iter()
                .map(|mut r| {
                    let (attempts, q) = f(&mut r);
                    (r, attempts, q)
                })
                .collect()
        });
        let mut out = Vec::with_capacity(results.len());
        let mut quarantine = Vec::new();
        let mut attempts = 0;
        for (r, a, q) in results {
            out.push(r);
            attempts += a;
            quarantine.extend(q);
        }
        (out, quarantine, attempts)
    }

    fn finish_generation(
        &self,
        stage: PipelineStage,
        records: Vec<InstructionRecord>,
        quarantine: Vec<QuarantineEntry>,
        attempts: usize,
        count_in: usize,
    ) -> Result<Artifacts, PipelineError> {
        if attempts > 0 && quarantine.len() >= attempts {
            self.write_quarantine(stage, &quarantine)?;
            let first = quarantine.first().map(|q| q.reason.clone()).unwrap_or_default();
            return Err(Self::fail(stage)(format!("all {attempts} generations failed; first: {first}")));
        }
        let file = stage.dataset_file().expect("generation stages write datasets");
        let out = self.write_records(stage, &records, &self.workdir.join(file))?;
        let q = self.write_quarantine(stage, &quarantine)?;
        Ok(Artifacts {
            outputs: vec![out, q],
            count_in,
            count_out: records.len(),
        })
    }

    pub(crate) fn enrich(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Enrich;
        let records = self.read(stage, input)?;
        let n = records.len();
        let chat = self.chat_provider()?;
        let gen = self.config.gen_params();
        let stamp = self.stamp(chat.provider_id());
        let (records, quarantine, attempts) = self.map_records(records, |r| {
            let quarantined = |reason: String, raw: Option<String>| QuarantineEntry {
                stage: stage.to_string(),
                image_id: Some(r.image.id.clone()),
                pair_id: None,
                reason,
                raw,
            };
            let result = prompt::build_caption_enrichment(r)
                .map_err(|e| (e.to_string(), None))
                .and_then(|b| chat.chat_complete(&b, &gen).map_err(|e| (e.to_string(), None)))
                .and_then(|text| {
                    prompt::parse_generation(&text, Stage::CaptionEnrich).map_err(|e| (e.to_string(), Some(text)))
                });
            match result {
                Ok(Generation::EnrichedCaption(c)) => {
                    let pair = QAPair::caption(caption_question(&r.image.id), c.clone());
                    r.enriched_caption = Some(c);
                    if r.pair(&pair.pair_id).is_none() {
                        r.pairs.push(pair);
                    }
                    r.provenance.insert(stage.to_string(), stamp.clone());
                    (1, vec![])
                }
                Ok(Generation::Pairs(_)) => (1, vec![quarantined("unexpected pairs".into(), None)]),
                Err((reason, raw)) => (1, vec![quarantined(reason, raw)]),
            }
        });
        self.finish_generation(stage, records, quarantine, attempts, n)
    }

    pub(crate) fn gen_extractive(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::GenExtractive;
        let records = self.read(stage, input)?;
        let n = records.len();
        let demos = match &self.config.generation.demonstrations {
            Some(p) => prompt::load_demonstrations(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => prompt::default_demonstrations(),
        };
        let chat = self.chat_provider()?;
        let gen = self.config.gen_params();
        let stamp = self.stamp(chat.provider_id());
        let (records, quarantine, attempts) = self.map_records(records, |r| {
            let quarantined = |reason: String, raw: Option<String>| QuarantineEntry {
                stage: stage.to_string(),
                image_id: Some(r.image.id.clone()),
                pair_id: None,
                reason,
                raw,
            };
            let result = prompt::build_extractive_gen(r, &demos)
                .map_err(|e| (e.to_string(), None))
                .and_then(|b| chat.chat_complete(&b, &gen).map_err(|e| (e.to_string(), None)))
                .and_then(|text| {
                    prompt::parse_generation(&text, Stage::ExtractiveGen).map_err(|e| (e.to_string(), Some(text)))
                });
            match result {
                Ok(Generation::Pairs(pairs)) => {
                    for p in pairs {
                        if r.pair(&p.pair_id).is_none() {
                            r.pairs.push(p);
                        }
                    }
                    r.provenance.insert(stage.to_string(), stamp.clone());
                    (1, vec![])
                }
                Ok(Generation::EnrichedCaption(_)) => (1, vec![quarantined("unexpected caption".into(), None)]),
                Err((reason, raw)) => (1, vec![quarantined(reason, raw)]),
            }
        });
        self.finish_generation(stage, records, quarantine, attempts, n)
    }

    pub(crate) fn gen_selfexplain(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::GenSelfexplain;
        let records = self.read(stage, input)?;
        let n = records.len();
        let chat = self.chat_provider()?;
        let gen = self.config.gen_params();
        let stamp = self.stamp(chat.provider_id());
        let (records, quarantine, attempts) = self.map_records(records, |r| {
            let sources: Vec<QAPair> = r.pairs_of(PairKind::Extractive).cloned().collect();
            let mut quarantine = Vec::new();
            let mut added = Vec::new();
            for source in &sources {
                let result = prompt::build_selfexplain_gen(r, source)
                    .map_err(|e| (e.to_string(), None))
                    .and_then(|b| chat.chat_complete(&b, &gen).map_err(|e| (e.to_string(), None)))
                    .and_then(|text| {
                        prompt::parse_generation(&text, Stage::SelfExplainGen).map_err(|e| (e.to_string(), Some(text)))
                    });
                match result {
                    Ok(Generation::Pairs(p)) if p.len() == 1 => {
                        let pair = QAPair::self_explain(p[0].question.clone(), p[0].answer.clone(), source);
                        if r.pair(&pair.pair_id).is_none() && !added.iter().any(|a: &QAPair| a.pair_id == pair.pair_id) {
                            added.push(pair);
                        }
                    }
                    other => {
                        let (reason, raw) = match other {
                            Err(e) => e,
                            _ => ("expected exactly one reasoning pair".to_string(), None),
                        };
                        quarantine.push(QuarantineEntry {
                            stage: stage.to_string(),
                            image_id: Some(r.image.id.clone()),
                            pair_id: Some(source.pair_id.clone()),
                            reason,
                            raw,
                        });
                    }
                }
            }
            r.pairs.extend(added);
            if !sources.is_empty() {
                r.provenance.insert(stage.to_string(), stamp.clone());
            }
            (sources.len(), quarantine)
        });
        self.finish_generation(stage, records, quarantine, attempts, n)
    }

    pub(crate) fn score(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Score;
        let records = self.read(stage, input)?;
        let n = records.len();
        let template = self.template();
        let provider = self.loss_provider(&records, &template)?;
        let input_sum = super::manifest::sha256_file(input).map_err(Self::fail(stage))?;
        let checkpoint = self.workdir.join(format!("score.{}.checkpoint.jsonl", &input_sum[..12]));
        if self.force && checkpoint.exists() {
            std::fs::remove_file(&checkpoint).map_err(|e| Self::fail(stage)(e.to_string()))?;
        }
        let options = ScoreOptions {
            template,
            parallelism: self.config.parallelism,
            ffd_mode: self.config.score.ffd_mode,
            checkpoint: Some(checkpoint.clone()),
        };
        let report = scoring::score_dataset(records, provider.as_ref(), &options).map_err(|e| Self::fail(stage)(e.to_string()))?;
        if report.resumed > 0 {
            log::info!("{stage}: reused {} checkpointed records", report.resumed);
        }
        let cards: usize = report.records.iter().map(|r| r.scores.len()).sum();
        if cards > 0 && report.failures.len() == cards {
            return Err(Self::fail(stage)(format!(
                "all {cards} pairs failed to score; first: {}",
                report.failures[0]
            )));
        }
        let quarantine: Vec<QuarantineEntry> = report
            .records
            .iter()
            .flat_map(|r| {
                r.scores.values().filter_map(|c| {
                    c.failure.as_ref().map(|f| QuarantineEntry {
                        stage: stage.to_string(),
                        image_id: Some(r.image.id.clone()),
                        pair_id: Some(c.pair_id.clone()),
                        reason: f.clone(),
                        raw: None,
                    })
                })
            })
            .collect();
        let mut records = report.records;
        for r in &mut records {
            r.provenance.insert(stage.to_string(), self.stamp(provider.provider_id()));
        }
        let out = self.write_records(stage, &records, &self.workdir.join("scored.jsonl"))?;
        let csv = scoring::distribution_csv(&records, self.config.score.bin_width).map_err(|e| Self::fail(stage)(e.to_string()))?;
        let dist = self.write_text(stage, &self.workdir.join("score_distribution.csv"), &csv)?;
        let q = self.write_quarantine(stage, &quarantine)?;
        let _ = std::fs::remove_file(&checkpoint);
        Ok(Artifacts {
            outputs: vec![out, dist, q],
            count_in: n,
            count_out: cards - quarantine.len(),
        })
    }

    /// Drops pairs without a usable score (and explanations of dropped
    /// extractive pairs) so the filters see only scored pairs.
    fn prune_unscored(records: &[InstructionRecord]) -> (Vec<InstructionRecord>, usize) {
        let mut removed = 0;
        let out = records
            .iter()
            .map(|r| {
                let mut rec = r.clone();
                let usable = |p: &QAPair| {
                    let card = r.scores.get(&p.pair_id);
                    match p.kind {
                        PairKind::Caption => true,
                        PairKind::Extractive => card.and_then(|c| c.mifd).is_some_and(f64::is_finite),
                        PairKind::SelfExplain => card.and_then(|c| c.ffd).is_some_and(f64::is_finite),
                    }
                };
                let kept_extractive: HashSet<&str> = r
                    .pairs_of(PairKind::Extractive)
                    .filter(|p| usable(p))
                    .map(|p| p.pair_id.as_str())
                    .collect();
                let before = rec.pairs.len();
                rec.pairs.retain(|p| {
                    usable(p)
                        && (p.kind != PairKind::SelfExplain
                            || p.explains.as_deref().is_some_and(|s| kept_extractive.contains(s)))
                });
                removed += before - rec.pairs.len();
                rec
            })
            .collect();
        (out, removed)
    }

    pub(crate) fn filter(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Filter;
        let records = self.read(stage, input)?;
        let (records, unscored) = Self::prune_unscored(&records);
        let policy = self.config.filter;
        let result = cascade(&records, &policy).map_err(|e| Self::fail(stage)(e.to_string()))?;
        let extractive_in = result.mifd.kept.len() + result.mifd.dropped.len();
        let explain_in = result.orphaned.len() + result.ffd.kept.len() + result.ffd.dropped.len();
        let summary = FilterSummary {
            policy,
            unscored_removed: unscored,
            extractive_in,
            extractive_kept: result.mifd.kept.len(),
            mifd_dropped_fraction: if extractive_in == 0 {
                0.0
            } else {
                result.mifd.dropped.len() as f64 / extractive_in as f64
            },
            selfexplain_in: explain_in,
            orphaned: result.orphaned.len(),
            ffd_low_dropped: count_reason(&result.ffd.dropped, filter::DropReason::LowFfd),
            ffd_high_dropped: count_reason(&result.ffd.dropped, filter::DropReason::HighFfd),
            selfexplain_kept: result.ffd.kept.len(),
            mifd_thresholds: result.mifd.thresholds_used.clone(),
            ffd_thresholds: result.ffd.thresholds_used.clone(),
            records_out: result.records.len(),
        };
        log::info!(
            "{stage}: kept {}/{} extractive pairs ({:.0}% dropped), {}/{} self-explain pairs",
            summary.extractive_kept,
            extractive_in,
            100.0 * summary.mifd_dropped_fraction,
            summary.selfexplain_kept,
            explain_in
        );
        let mut records_out = result.records;
        for r in &mut records_out {
            r.provenance.insert(stage.to_string(), self.stamp("quantile-filter"));
        }
        let out = self.write_records(stage, &records_out, &self.workdir.join("filtered.jsonl"))?;
        let audit = audit_csv(&result.audit).map_err(|e| Self::fail(stage)(e.to_string()))?;
        let audit = self.write_text(stage, &self.workdir.join("audit.csv"), &audit)?;
        let body = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
        let sum = self.write_text(stage, &self.workdir.join("filter_summary.json"), &body)?;
        Ok(Artifacts {
            outputs: vec![out, audit, sum],
            count_in: records.len(),
            count_out: records_out.len(),
        })
    }

    pub(crate) fn sweep(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Sweep;
        let records = self.read(stage, input)?;
        let (records, _) = Self::prune_unscored(&records);
        let results = filter::sweep(&records, &self.config.filter, &sweep_levels()).map_err(|e| Self::fail(stage)(e.to_string()))?;
        let mut outputs = Vec::new();
        let mut summary = String::from("keep_fraction,file,records,extractive_kept,selfexplain_kept,dropped\n");
        for (level, r) in &results {
            let name = format!("keep_{:02}.jsonl", (level * 100.0).round() as u32);
            outputs.push(self.write_records(stage, &r.records, &self.workdir.join("sweep").join(&name))?);
            let _ = writeln!(
                summary,
                "{level},{name},{},{},{},{}",
                r.records.len(),
                r.mifd.kept.len(),
                r.ffd.kept.len(),
                r.dropped_count()
            );
        }
        outputs.push(self.write_text(stage, &self.workdir.join("sweep").join("summary.csv"), &summary)?);
        Ok(Artifacts {
            outputs,
            count_in: records.len(),
            count_out: results.len(),
        })
    }

    pub(crate) fn diversity(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Diversity;
        let records = self.read(stage, input)?;
        let instructions: Vec<String> = records
            .iter()
            .flat_map(|r| r.pairs.iter().filter(|p| p.kind.is_vqa()).map(|p| p.question.clone()))
            .collect();
        let cfg = &self.config.diversity;
        let embedder;
        let vocab;
        let backend = match cfg.backend {
            DiversityBackend::Embedding => {
                embedder = self.embed_provider()?;
                Backend::MeanEmbedding(embedder.as_ref())
            }
            DiversityBackend::Task2vec => {
                vocab = ProbeVocab::build(instructions.iter().map(String::as_str), cfg.probe.vocab_cap);
                Backend::Probe {
                    spec: cfg.probe,
                    vocab: &vocab,
                }
            }
        };
        let (report, result) = self.pool().install(|| {
            diversity::measure(&instructions, &self.config.batch_spec(), &backend, cfg.pairing)
                .map_err(|e| Self::fail(stage)(e.to_string()))
        })?;
        log::info!("{stage}: div = {:.4} (std {:.4}, {} pairs)", report.div, report.std, report.num_pairs);
        let dir = self.workdir.join("diversity");
        let body = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        let a = self.write_text(stage, &dir.join("report.json"), &body)?;
        let b = self.write_text(stage, &dir.join("pairs.csv"), &diversity::pairs_csv(&result))?;
        Ok(Artifacts {
            outputs: vec![a, b],
            count_in: instructions.len(),
            count_out: report.num_pairs,
        })
    }

    pub(crate) fn stats(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Stats;
        let records = self.read(stage, input)?;
        let taxonomy = match &self.config.stats.taxonomy {
            Some(p) => Taxonomy::load(p).map_err(|e| PipelineError::Config(e.to_string()))?,
            None => Taxonomy::default(),
        };
        let report = stats::build_report(&records, &taxonomy, self.config.stats.bin_width).map_err(|e| Self::fail(stage)(e.to_string()))?;
        let questions = report.summary.vqa_pairs;
        if !report.is_consistent(questions) {
            return Err(Self::fail(stage)("taxonomy counts are inconsistent".into()));
        }
        let dir = self.config.stats.out.clone().unwrap_or_else(|| self.workdir.join("stats"));
        let outputs = stats::emit_report(&report, &ReportFormat::ALL, &dir)
            .map_err(|e| Self::fail(stage)(e.to_string()))?;
        Ok(Artifacts {
            outputs,
            count_in: records.len(),
            count_out: questions,
        })
    }

    pub(crate) fn report(&self, input: &Path) -> Result<Artifacts, PipelineError> {
        let stage = PipelineStage::Report;
        let records = self.read(stage, input)?;
        let out_dir = self.config.output_dir();
        let bytes = std::fs::read(input).map_err(|e| Self::fail(stage)(e.to_string()))?;
        let dataset = out_dir.join("dataset.jsonl");
        std::fs::create_dir_all(&out_dir).map_err(|e| Self::fail(stage)(format!("{}: {e}", out_dir.display())))?;
        write_atomic(&dataset, &bytes).map_err(|e| Self::fail(stage)(e.to_string()))?;

        let mut md = String::from("# Curation report\n\n## Stages\n\n| stage | status | in | out |\n|---|---|---|---|\n");
        for s in PipelineStage::ALL {
            if let Some(e) = self.manifest.stages.get(s.as_str()) {
                if s != stage {
                    let _ = writeln!(md, "| {s} | {:?} | {} | {} |", e.status, e.count_in, e.count_out);
                }
            }
        }
        let s = stats::dataset_summary(&records);
        let _ = write!(
            md,
            "\n## Dataset\n\nSource: `{}`\n\n| metric | value |\n|---|---|\n\
             | images | {} |\n| enriched captions | {} |\n| caption pairs | {} |\n| VQA pairs | {} |\n\
             | extractive pairs | {} |\n| self-explain pairs | {} |\n| words per enriched caption | {} |\n\
             | words per question | {} |\n| words per answer | {} |\n",
            self.key(input),
            s.images,
            s.enriched_captions,
            s.caption_pairs,
            s.vqa_pairs,
            s.extractive_pairs,
            s.selfexplain_pairs,
            stats::fmt_mean(s.words_per_caption()),
            stats::fmt_mean(s.words_per_question()),
            stats::fmt_mean(s.words_per_answer()),
        );
        let filter_summary = self.workdir.join("filter_summary.json");
        if self.manifest.is_done(PipelineStage::Filter.as_str()) {
            let text = std::fs::read_to_string(&filter_summary).map_err(|e| Self::fail(stage)(e.to_string()))?;
            let f: FilterSummary = serde_json::from_str(&text).map_err(|e| Self::fail(stage)(e.to_string()))?;
            let _ = write!(
                md,
                "\n## Filtering\n\n- extractive pairs kept: {} of {} ({:.1}% dropped by mIFD)\n\
                 - self-explain pairs kept: {} of {} ({} orphaned, {} below the FFD band, {} above)\n",
                f.extractive_kept,
                f.extractive_in,
                100.0 * f.mifd_dropped_fraction,
                f.selfexplain_kept,
                f.selfexplain_in,
                f.orphaned,
                f.ffd_low_dropped,
                f.ffd_high_dropped
            );
        }
        if self.manifest.is_done(PipelineStage::Diversity.as_str()) {
            let text = std::fs::read_to_string(self.workdir.join("diversity/report.json"))
                .map_err(|e| Self::fail(stage)(e.to_string()))?;
            let d: diversity::DiversityReport = serde_json::from_str(&text).map_err(|e| Self::fail(stage)(e.to_string()))?;
            let _ = write!(
                md,
                "\n## Diversity\n\n- backend: {}\n- div: {:.4} (std {:.4}, {} batch pairs)\n",
                d.backend, d.div, d.std, d.num_pairs
            );
        }
        let report = self.write_text(stage, &out_dir.join("report.md"), &md)?;
        Ok(Artifacts {
            outputs: vec![dataset, report],
            count_in: records.len(),
            count_out: records.len(),
        })
    }
}

fn count_reason(dropped: &[(String, filter::DropReason)], reason: filter::DropReason) -> usize {
    dropped.iter().filter(|(_, r)| *r == reason).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub policy: FilterPolicy,
    pub unscored_removed: usize,
    pub extractive_in: usize,
    pub extractive_kept: usize,
    pub mifd_dropped_fraction: f64,
    pub selfexplain_in: usize,
    pub orphaned: usize,
    pub ffd_low_dropped: usize,
    pub ffd_high_dropped: usize,
    pub selfexplain_kept: usize,
    pub mifd_thresholds: Thresholds,
    pub ffd_thresholds: Thresholds,
    pub records_out: usize,
}
