use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::diversity::{BatchSpec, Pairing, ProbeSpec};
use crate::filter::FilterPolicy;
use crate::provider::mock::MockMode;
use crate::provider::{GenParams, ProviderConfig};
use crate::scoring::FfdMode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Raw OCR JSONL consumed by `ingest`.
    pub input: PathBuf,
    pub workdir: PathBuf,
    /// Final dataset and report. Defaults to `<workdir>/output`.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatSpec {
    Http(ProviderConfig),
    /// Rule-based replies derived from the prompt payload.
    Scripted,
    /// Replies read from a JSONL fixture file.
    Canned { fixtures: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    Http(ProviderConfig),
    /// Mock LM with a vocabulary fitted to the dataset. Image bags are the
    /// OCR tokens of each image.
    Mock {
        mode: MockMode,
        #[serde(default = "yes")]
        accepts_images: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedSpec {
    Http(ProviderConfig),
    Hash { dim: usize },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Providers {
    pub chat: ChatSpec,
    pub loss: LossSpec,
    pub embed: EmbedSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageToggles {
    #[serde(default = "yes")]
    pub enrich: bool,
    #[serde(default = "yes")]
    pub gen_selfexplain: bool,
    #[serde(default = "yes")]
    pub filter: bool,
    #[serde(default)]
    pub sweep: bool,
    #[serde(default = "yes")]
    pub diversity: bool,
    #[serde(default = "yes")]
    pub stats: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            enrich: true,
            gen_selfexplain: true,
            filter: true,
            sweep: false,
            diversity: true,
            stats: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Few-shot examples for extractive generation; bundled ones when unset.
    #[serde(default)]
    pub demonstrations: Option<PathBuf>,
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            demonstrations: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    #[serde(default = "default_qa_format")]
    pub qa_format: String,
    #[serde(default = "default_separator")]
    pub turn_separator: String,
    #[serde(default)]
    pub ffd_mode: FfdMode,
    #[serde(default = "default_bin_width")]
    pub bin_width: f64,
}

fn default_qa_format() -> String {
    "Question: {q}\nAnswer: {a}".into()
}
fn default_separator() -> String {
    "\n".into()
}
fn default_bin_width() -> f64 {
    0.05
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            qa_format: default_qa_format(),
            turn_separator: default_separator(),
            ffd_mode: FfdMode::default(),
            bin_width: default_bin_width(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiversityBackend {
    Embedding,
    Task2vec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityConfig {
    pub backend: DiversityBackend,
    pub batch_size: usize,
    pub num_batches: usize,
    #[serde(default = "all_pairs")]
    pub pairing: Pairing,
    #[serde(default)]
    pub probe: ProbeSpec,
}

fn all_pairs() -> Pairing {
    Pairing::AllPairs
}

impl Default for DiversityConfig {
    fn default() -> Self {
        Self {
            backend: DiversityBackend::Embedding,
            batch_size: 512,
            num_batches: 200,
            pairing: Pairing::AllPairs,
            probe: ProbeSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    #[serde(default = "default_length_bin")]
    pub bin_width: usize,
    /// Artifact directory. Defaults to `<workdir>/stats`.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_length_bin() -> usize {
    5
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            taxonomy: None,
            bin_width: default_length_bin(),
            out: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    pub providers: Providers,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub filter: FilterPolicy,
    #[serde(default)]
    pub diversity: DiversityConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub seed: u64,
    /// Provenance timestamp. When unset the manifest's creation time is reused,
    /// so resumed runs stamp records identically.
    #[serde(default)]
    pub timestamp: Option<String>,
}

fn one() -> usize {
    1
}

fn env_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Replaces `${VAR}` with the variable's value. Unset variables are an error.
pub fn interpolate_env(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, String> {
    let mut missing = Vec::new();
    let out = env_re().replace_all(text, |c: &regex::Captures| {
        lookup(&c[1]).unwrap_or_else(|| {
            missing.push(c[1].to_string());
            String::new()
        })
    });
    if missing.is_empty() {
        Ok(out.into_owned())
    } else {
        Err(format!("unset environment variables: {}", missing.join(", ")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, String> {
        let text = interpolate_env(text, |k| std::env::var(k).ok())?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| e.to_string())?;
        Ok(config)
    }

    /// Loads a config file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config = Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if let Some(base) = path.parent() {
            config.rebase(base);
        }
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.input);
        fix(&mut self.paths.workdir);
        if let Some(o) = self.paths.output.as_mut() {
            fix(o);
        }
        if let ChatSpec::Canned { fixtures } = &mut self.providers.chat {
            fix(fixtures);
        }
        if let Some(d) = self.generation.demonstrations.as_mut() {
            fix(d);
        }
        if let Some(t) = self.stats.taxonomy.as_mut() {
            fix(t);
        }
        if let Some(t) = self.stats.out.as_mut() {
            fix(t);
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.paths
            .output
            .clone()
            .unwrap_or_else(|| self.paths.workdir.join("output"))
    }

    pub fn gen_params(&self) -> GenParams {
        GenParams {
            temperature: self.generation.temperature,
            max_tokens: self.generation.max_tokens,
            seed: Some(self.seed),
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.diversity.batch_size,
            num_batches: self.diversity.num_batches,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism == 0 {
            return Err("parallelism must be at least 1".into());
        }
        let p = &self.paths;
        let out = self.output_dir();
        if p.input == p.workdir || p.input == out || p.workdir == out {
            return Err("paths.input, paths.workdir and paths.output must be distinct".into());
        }
        self.filter.validate().map_err(|e| e.to_string())?;
        self.diversity.probe.validate()?;
        if self.diversity.batch_size == 0 || self.diversity.num_batches < 2 {
            return Err("diversity needs batch_size >= 1 and num_batches >= 2".into());
        }
        if self.stats.bin_width == 0 || self.score.bin_width.is_nan() || self.score.bin_width <= 0.0 {
            return Err("bin widths must be positive".into());
        }
        crate::dialogue::DialogueTemplate::new(self.score.qa_format.clone(), self.score.turn_separator.clone())
            .map_err(|e| e.to_string())?;
        for spec in [
            match &self.providers.chat {
                ChatSpec::Http(c) => Some(c),
                _ => None,
            },
            match &self.providers.loss {
                LossSpec::Http(c) => Some(c),
                _ => None,
            },
            match &self.providers.embed {
                EmbedSpec::Http(c) => Some(c),
                _ => None,
            },
        ]
        .into_iter()
        .flatten()
        {
            spec.validate()?;
        }
        if let EmbedSpec::Hash { dim: 0 } = self.providers.embed {
            return Err("hash embedder dim must be positive".into());
        }
        Ok(())
    }
}
