//! Resumable stage runner. Every stage reads and writes files under the
//! workdir and records checksums in `manifest.json`; a finished stage whose
//! inputs and outputs are unchanged is skipped on the next run.

pub mod config;
pub mod manifest;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::RunConfig;
pub use manifest::{Manifest, StageEntry, StageStatus};
pub use stages::{FilterSummary, QuarantineEntry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{stage}: requires {needs} to be done first")]
    Dependency { stage: PipelineStage, needs: PipelineStage },
    #[error("{stage} failed: {message}")]
    Stage { stage: PipelineStage, message: String },
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineStage {
    Ingest,
    Enrich,
    GenExtractive,
    GenSelfexplain,
    Score,
    Filter,
    Sweep,
    Diversity,
    Stats,
    Report,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 10] = [
        PipelineStage::Ingest,
        PipelineStage::Enrich,
        PipelineStage::GenExtractive,
        PipelineStage::GenSelfexplain,
        PipelineStage::Score,
        PipelineStage::Filter,
        PipelineStage::Sweep,
        PipelineStage::Diversity,
        PipelineStage::Stats,
        PipelineStage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineStage::Ingest => "ingest",
            PipelineStage::Enrich => "enrich",
            PipelineStage::GenExtractive => "gen-extractive",
            PipelineStage::GenSelfexplain => "gen-selfexplain",
            PipelineStage::Score => "score",
            PipelineStage::Filter => "filter",
            PipelineStage::Sweep => "sweep",
            PipelineStage::Diversity => "diversity",
            PipelineStage::Stats => "stats",
            PipelineStage::Report => "report",
        }
    }

    /// Stages that must be done before this one can run.
    pub fn requires(self) -> &'static [PipelineStage] {
        use PipelineStage::*;
        match self {
            Ingest => &[],
            Enrich | Diversity | Stats | Report => &[Ingest],
            GenExtractive => &[Ingest],
            GenSelfexplain => &[GenExtractive],
            Score => &[GenExtractive],
            Filter | Sweep => &[Score],
        }
    }

    /// Dataset file written by this stage, if it produces one.
    pub fn dataset_file(self) -> Option<&'static str> {
        match self {
            PipelineStage::Ingest => Some("ingest.jsonl"),
            PipelineStage::Enrich => Some("enrich.jsonl"),
            PipelineStage::GenExtractive => Some("extractive.jsonl"),
            PipelineStage::GenSelfexplain => Some("selfexplain.jsonl"),
            PipelineStage::Score => Some("scored.jsonl"),
            PipelineStage::Filter => Some("filtered.jsonl"),
            _ => None,
        }
    }
}

impl fmt::Display for PipelineStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PipelineStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: PipelineStage,
    pub skipped: bool,
    pub count_in: usize,
    pub count_out: usize,
}

/// What a stage produced.
#[derive(Debug, Default)]
pub(crate) struct Artifacts {
    outputs: Vec<PathBuf>,
    count_in: usize,
    count_out: usize,
}

#[derive(Debug)]
pub struct Pipeline {
    config: RunConfig,
    workdir: PathBuf,
    manifest: Manifest,
    force: bool,
    timestamp: String,
}

fn absolute(p: &Path) -> Result<PathBuf, PipelineError> {
    std::path::absolute(p).map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))
}

impl Pipeline {
    /// Validates the config and opens (or creates) the workdir and its manifest.
    pub fn open(mut config: RunConfig, force: bool) -> Result<Self, PipelineError> {
        config.validate().map_err(PipelineError::Config)?;
        config.paths.input = absolute(&config.paths.input)?;
        config.paths.workdir = absolute(&config.paths.workdir)?;
        config.paths.output = Some(absolute(&config.output_dir())?);
        if let Some(out) = config.stats.out.take() {
            config.stats.out = Some(absolute(&out)?);
        }
        let workdir = config.paths.workdir.clone();
        std::fs::create_dir_all(&workdir)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", workdir.display())))?;
        let manifest = match Manifest::load(&workdir).map_err(PipelineError::Config)? {
            Some(m) => m,
            None => {
                let created = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true);
                let m = Manifest::new(created);
                m.save(&workdir).map_err(PipelineError::Config)?;
                m
            }
        };
        let timestamp = config.timestamp.clone().unwrap_or_else(|| manifest.created.clone());
        Ok(Self {
            config,
            workdir,
            manifest,
            force,
            timestamp,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    /// Most recent dataset produced before `stage` in pipeline order.
    fn latest_dataset_before(&self, stage: PipelineStage) -> Option<PathBuf> {
        PipelineStage::ALL
            .iter()
            .take_while(|s| **s != stage)
            .filter(|s| self.manifest.is_done(s.as_str()))
            .filter_map(|s| s.dataset_file())
            .last()
            .map(|f| self.path(f))
    }

    fn inputs_for(&self, stage: PipelineStage) -> Vec<PathBuf> {
        use PipelineStage::*;
        match stage {
            Ingest => vec![self.config.paths.input.clone()],
            GenSelfexplain => vec![self.path("extractive.jsonl")],
            Filter | Sweep => vec![self.path("scored.jsonl")],
            Score => vec![if self.manifest.is_done(GenSelfexplain.as_str()) {
                self.path("selfexplain.jsonl")
            } else {
                self.path("extractive.jsonl")
            }],
            Report => {
                let mut v: Vec<PathBuf> = self.latest_dataset_before(stage).into_iter().collect();
                if self.manifest.is_done(Filter.as_str()) {
                    v.push(self.path("filter_summary.json"));
                }
                if self.manifest.is_done(Diversity.as_str()) {
                    v.push(self.path("diversity/report.json"));
                }
                v
            }
            _ => self.latest_dataset_before(stage).into_iter().collect(),
        }
    }

    fn key(&self, path: &Path) -> String {
        manifest::manifest_key(&self.workdir, path)
    }

    fn checksums(&self, stage: PipelineStage, paths: &[PathBuf]) -> Result<BTreeMap<String, String>, PipelineError> {
        paths
            .iter()
            .map(|p| {
                manifest::sha256_file(p)
                    .map(|sum| (self.key(p), sum))
                    .map_err(|message| PipelineError::Stage { stage, message })
            })
            .collect()
    }

    fn save_manifest(&self, stage: PipelineStage) -> Result<(), PipelineError> {
        self.manifest
            .save(&self.workdir)
            .map_err(|message| PipelineError::Stage { stage, message })
    }

    /// Runs one stage, or verifies and skips it when already done.
    pub fn run(&mut self, stage: PipelineStage) -> Result<StageOutcome, PipelineError> {
        for &need in stage.requires() {
            if !self.manifest.is_done(need.as_str()) {
                return Err(PipelineError::Dependency { stage, needs: need });
            }
        }
        let inputs = self.inputs_for(stage);
        let input_sums = self.checksums(stage, &inputs)?;

        if let Some(entry) = self.manifest.stages.get(stage.as_str()) {
            if entry.status == StageStatus::Done && !self.force {
                if entry.inputs == input_sums {
                    let changed = manifest::changed_files(&self.workdir, &entry.outputs);
                    if changed.is_empty() {
                        log::info!("{stage}: done, checksums verified; skipping");
                        return Ok(StageOutcome {
                            stage,
                            skipped: true,
                            count_in: entry.count_in,
                            count_out: entry.count_out,
                        });
                    }
                    return Err(PipelineError::Stage {
                        stage,
                        message: format!(
                            "outputs changed since they were recorded ({}); rerun with --force",
                            changed.join(", ")
                        ),
                    });
                }
                log::info!("{stage}: inputs changed since last run; rerunning");
            }
        }

        let mut entry = StageEntry::running();
        entry.inputs = input_sums;
        self.manifest.stages.insert(stage.as_str().to_string(), entry.clone());
        self.save_manifest(stage)?;

        log::info!("{stage}: running");
        match self.execute(stage) {
            Ok(art) => {
                entry.outputs = self.checksums(stage, &art.outputs)?;
                entry.status = StageStatus::Done;
                entry.count_in = art.count_in;
                entry.count_out = art.count_out;
                self.manifest.stages.insert(stage.as_str().to_string(), entry);
                self.save_manifest(stage)?;
                log::info!("{stage}: done ({} in, {} out)", art.count_in, art.count_out);
                Ok(StageOutcome {
                    stage,
                    skipped: false,
                    count_in: art.count_in,
                    count_out: art.count_out,
                })
            }
            Err(err) => {
                entry.status = StageStatus::Failed;
                entry.error = Some(err.to_string());
                self.manifest.stages.insert(stage.as_str().to_string(), entry);
                self.save_manifest(stage)?;
                Err(err)
            }
        }
    }

    fn enabled(&self, stage: PipelineStage) -> bool {
        let t = &self.config.stages;
        match stage {
            PipelineStage::Enrich => t.enrich,
            PipelineStage::GenSelfexplain => t.gen_selfexplain,
            PipelineStage::Filter => t.filter,
            PipelineStage::Sweep => t.sweep,
            PipelineStage::Diversity => t.diversity,
            PipelineStage::Stats => t.stats,
            _ => true,
        }
    }

    /// Runs every enabled stage in order, stopping after `stop_after` if given.
    pub fn run_all(&mut self, stop_after: Option<PipelineStage>) -> Result<Vec<StageOutcome>, PipelineError> {
        let mut out = Vec::new();
        for stage in PipelineStage::ALL {
            if self.enabled(stage) {
                out.push(self.run(stage)?);
            }
            if Some(stage) == stop_after {
                break;
            }
        }
        Ok(out)
    }

    fn execute(&mut self, stage: PipelineStage) -> Result<Artifacts, PipelineError> {
        let inputs = self.inputs_for(stage);
        let wrap = |message: String| PipelineError::Stage { stage, message };
        let input = inputs.first().cloned().ok_or_else(|| wrap("no input dataset".into()))?;
        match stage {
            PipelineStage::Ingest => self.ingest(&input),
            PipelineStage::Enrich => self.enrich(&input),
            PipelineStage::GenExtractive => self.gen_extractive(&input),
            PipelineStage::GenSelfexplain => self.gen_selfexplain(&input),
            PipelineStage::Score => self.score(&input),
            PipelineStage::Filter => self.filter(&input),
            PipelineStage::Sweep => self.sweep(&input),
            PipelineStage::Diversity => self.diversity(&input),
            PipelineStage::Stats => self.stats(&input),
            PipelineStage::Report => self.report(&input),
        }
    }
}
