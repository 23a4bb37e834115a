//! Dataset composition: question taxonomy, length distributions and summary counters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jsonl::write_atomic;
use crate::record::{InstructionRecord, PairKind};

/// Published reference figures for the full curated dataset. Documentation
/// only; nothing in this crate tries to reproduce them.
pub mod reference {
    pub const IMAGES: u64 = 42_870;
    pub const VQA_PAIRS: u64 = 382_406;
    pub const WORDS_PER_ENRICHED_CAPTION: f64 = 114.5;
    pub const WORDS_PER_QUESTION: f64 = 12.4;
    pub const WORDS_PER_ANSWER: f64 = 38.9;
    /// Words per question and answer for the earlier text-rich VQA set used as a comparison.
    pub const BASELINE_WORDS_PER_QUESTION: f64 = 10.6;
    pub const BASELINE_WORDS_PER_ANSWER: f64 = 24.3;
    /// Diversity coefficients (mean-embedding, probe) for the curated set and the baseline.
    pub const DIV_EMBEDDING: (f64, f64) = (0.1444, 0.1156);
    pub const DIV_PROBE: (f64, f64) = (0.6334, 0.5410);
}

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("bad taxonomy: {0}")]
    BadTaxonomy(String),
    #[error("bin width must be positive")]
    BadBinWidth,
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    Extract,
    Abstract,
    Other,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Extract, Category::Abstract, Category::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Extract => "Extract",
            Category::Abstract => "Abstract",
            Category::Other => "Other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

pub const OTHER_WORD: &str = "other";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub extract_keywords: Vec<String>,
    pub abstract_keywords: Vec<String>,
    pub question_words: Vec<String>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self::from_toml(include_str!("../assets/taxonomy.toml")).expect("bundled taxonomy is valid")
    }
}

impl Taxonomy {
    pub fn from_toml(text: &str) -> Result<Self, StatsError> {
        let mut t: Taxonomy = toml::from_str(text).map_err(|e| StatsError::BadTaxonomy(e.to_string()))?;
        for list in [&mut t.extract_keywords, &mut t.abstract_keywords, &mut t.question_words] {
            for k in list.iter_mut() {
                *k = k.to_lowercase();
            }
        }
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, StatsError> {
        let text = std::fs::read_to_string(path).map_err(|source| StatsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.question_words.is_empty() {
            return Err(StatsError::BadTaxonomy("question_words is empty".into()));
        }
        if let Some(k) = self.extract_keywords.iter().find(|k| self.abstract_keywords.contains(k)) {
            return Err(StatsError::BadTaxonomy(format!("keyword {k:?} is in both lists")));
        }
        if self.extract_keywords.iter().chain(&self.abstract_keywords).any(|k| k.is_empty()) {
            return Err(StatsError::BadTaxonomy("empty keyword".into()));
        }
        Ok(())
    }
}

pub fn classify_question(question: &str, taxonomy: &Taxonomy) -> (Category, String) {
    let lower = question.to_lowercase();
    let category = if taxonomy.extract_keywords.iter().any(|k| lower.contains(k.as_str())) {
        Category::Extract
    } else if taxonomy.abstract_keywords.iter().any(|k| lower.contains(k.as_str())) {
        Category::Abstract
    } else {
        Category::Other
    };
    let tokens: Vec<&str> = lower
        .split_whitespace()
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
        .collect();
    let first = tokens.first().copied().unwrap_or("");
    let word = if taxonomy.question_words.iter().any(|w| w == first) {
        first.to_string()
    } else {
        taxonomy
            .question_words
            .iter()
            .find(|w| tokens.contains(&w.as_str()))
            .cloned()
            .unwrap_or_else(|| OTHER_WORD.to_string())
    };
    (category, word)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bin_width: usize,
    /// Bin start → count.
    pub bins: BTreeMap<usize, usize>,
    pub total_words: usize,
    pub n: usize,
}

impl LengthHistogram {
    fn new(bin_width: usize) -> Self {
        Self {
            bin_width,
            bins: BTreeMap::new(),
            total_words: 0,
            n: 0,
        }
    }

    fn add(&mut self, words: usize) {
        *self.bins.entry(words / self.bin_width * self.bin_width).or_default() += 1;
        self.total_words += words;
        self.n += 1;
    }

    fn merge(mut self, other: Self) -> Self {
        for (k, v) in other.bins {
            *self.bins.entry(k).or_default() += v;
        }
        self.total_words += other.total_words;
        self.n += other.n;
        self
    }

    /// `None` for an empty histogram.
    pub fn mean(&self) -> Option<f64> {
        (self.n > 0).then(|| self.total_words as f64 / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub question: LengthHistogram,
    pub answer: LengthHistogram,
}

impl LengthStats {
    pub fn mean_question(&self) -> Option<f64> {
        self.question.mean()
    }

    pub fn mean_answer(&self) -> Option<f64> {
        self.answer.mean()
    }
}

/// Formats a mean to one decimal, or `n/a` when absent.
pub fn fmt_mean(mean: Option<f64>) -> String {
    mean.map_or_else(|| "n/a".to_string(), |m| format!("{m:.1}"))
}

/// Word-count histograms over VQA (extractive and self-explain) pairs.
pub fn length_stats(records: &[InstructionRecord], bin_width: usize) -> Result<LengthStats, StatsError> {
    if bin_width == 0 {
        return Err(StatsError::BadBinWidth);
    }
    let empty = || LengthStats {
        question: LengthHistogram::new(bin_width),
        answer: LengthHistogram::new(bin_width),
    };
    Ok(records
        .par_iter()
        .map(|r| {
            let mut s = empty();
            for p in r.pairs.iter().filter(|p| p.kind.is_vqa()) {
                s.question.add(word_count(&p.question));
                s.answer.add(word_count(&p.answer));
            }
            s
        })
        .reduce(empty, |a, b| LengthStats {
            question: a.question.merge(b.question),
            answer: a.answer.merge(b.answer),
        }))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub enriched_captions: usize,
    pub caption_pairs: usize,
    pub vqa_pairs: usize,
    pub extractive_pairs: usize,
    pub selfexplain_pairs: usize,
    pub caption_words: usize,
    pub question_words: usize,
    pub answer_words: usize,
}

impl DatasetSummary {
    fn merge(mut self, o: Self) -> Self {
        self.images += o.images;
        self.enriched_captions += o.enriched_captions;
        self.caption_pairs += o.caption_pairs;
        self.vqa_pairs += o.vqa_pairs;
        self.extractive_pairs += o.extractive_pairs;
        self.selfexplain_pairs += o.selfexplain_pairs;
        self.caption_words += o.caption_words;
        self.question_words += o.question_words;
        self.answer_words += o.answer_words;
        self
    }

    pub fn words_per_caption(&self) -> Option<f64> {
        ratio(self.caption_words, self.enriched_captions)
    }

    pub fn words_per_question(&self) -> Option<f64> {
        ratio(self.question_words, self.vqa_pairs)
    }

    pub fn words_per_answer(&self) -> Option<f64> {
        ratio(self.answer_words, self.vqa_pairs)
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn dataset_summary(records: &[InstructionRecord]) -> DatasetSummary {
    records
        .par_iter()
        .map(|r| {
            let mut s = DatasetSummary {
                images: 1,
                ..Default::default()
            };
            if let Some(c) = &r.enriched_caption {
                s.enriched_captions = 1;
                s.caption_words = word_count(c);
            }
            for p in &r.pairs {
                match p.kind {
                    PairKind::Caption => s.caption_pairs += 1,
                    PairKind::Extractive => s.extractive_pairs += 1,
                    PairKind::SelfExplain => s.selfexplain_pairs += 1,
                }
                if p.kind.is_vqa() {
                    s.vqa_pairs += 1;
                    s.question_words += word_count(&p.question);
                    s.answer_words += word_count(&p.answer);
                }
            }
            s
        })
        .reduce(DatasetSummary::default, DatasetSummary::merge)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub inner: BTreeMap<Category, usize>,
    pub outer: BTreeMap<(Category, String), usize>,
    pub lengths: LengthStats,
    pub summary: DatasetSummary,
}

impl TaxonomyReport {
    pub fn classified(&self) -> usize {
        self.inner.values().sum()
    }

    /// Inner totals equal the matching outer totals, and both equal `expected`.
    pub fn is_consistent(&self, expected: usize) -> bool {
        let outer_total: usize = self.outer.values().sum();
        let per_category = Category::ALL.iter().all(|c| {
            let inner = self.inner.get(c).copied().unwrap_or(0);
            let outer: usize = self.outer.iter().filter(|((oc, _), _)| oc == c).map(|(_, v)| v).sum();
            inner == outer
        });
        per_category && outer_total == expected && self.classified() == expected
    }
}

/// Classifies every VQA question and gathers the length and summary counters.
pub fn build_report(
    records: &[InstructionRecord],
    taxonomy: &Taxonomy,
    bin_width: usize,
) -> Result<TaxonomyReport, StatsError> {
    let outer = records
        .par_iter()
        .map(|r| {
            let mut m: BTreeMap<(Category, String), usize> = BTreeMap::new();
            for p in r.pairs.iter().filter(|p| p.kind.is_vqa()) {
                *m.entry(classify_question(&p.question, taxonomy)).or_default() += 1;
            }
            m
        })
        .reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_default() += v;
            }
            a
        });
    let mut inner = BTreeMap::new();
    for ((c, _), v) in &outer {
        *inner.entry(*c).or_default() += v;
    }
    Ok(TaxonomyReport {
        inner,
        outer,
        lengths: length_stats(records, bin_width)?,
        summary: dataset_summary(records),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ReportFormat {
    Csv,
    SvgSunburst,
    SvgHistogram,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::SvgSunburst, ReportFormat::SvgHistogram];
}

pub fn taxonomy_csv(report: &TaxonomyReport) -> String {
    let mut out = String::from("level,category,question_word,count\n");
    for c in Category::ALL {
        if let Some(v) = report.inner.get(&c) {
            let _ = writeln!(out, "inner,{},,{v}", c.as_str());
        }
    }
    for ((c, w), v) in &report.outer {
        let _ = writeln!(out, "outer,{},{},{v}", c.as_str(), csv_field(w));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Inverse of [`taxonomy_csv`].
pub fn read_taxonomy_csv(
    text: &str,
) -> Result<(BTreeMap<Category, usize>, BTreeMap<(Category, String), usize>), StatsError> {
    let mut inner = BTreeMap::new();
    let mut outer = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    for row in rdr.records() {
        let row = row.map_err(|e| StatsError::Csv(e.to_string()))?;
        let bad = || StatsError::Csv(format!("bad row {row:?}"));
        let cat = Category::parse(row.get(1).ok_or_else(bad)?).ok_or_else(bad)?;
        let count: usize = row.get(3).ok_or_else(bad)?.parse().map_err(|_| bad())?;
        match row.get(0) {
            Some("inner") => {
                inner.insert(cat, count);
            }
            Some("outer") => {
                outer.insert((cat, row.get(2).ok_or_else(bad)?.to_string()), count);
            }
            _ => return Err(bad()),
        }
    }
    Ok((inner, outer))
}

pub fn lengths_csv(lengths: &LengthStats) -> String {
    let mut out = String::from("kind,bin_start,bin_end,count\n");
    for (kind, h) in [("question", &lengths.question), ("answer", &lengths.answer)] {
        for (start, count) in &h.bins {
            let _ = writeln!(out, "{kind},{start},{},{count}", start + h.bin_width);
        }
    }
    out
}

pub fn summary_csv(s: &DatasetSummary) -> String {
    let mut out = String::from("metric,value\n");
    for (k, v) in [
        ("images", s.images),
        ("enriched_captions", s.enriched_captions),
        ("caption_pairs", s.caption_pairs),
        ("vqa_pairs", s.vqa_pairs),
        ("extractive_pairs", s.extractive_pairs),
        ("selfexplain_pairs", s.selfexplain_pairs),
    ] {
        let _ = writeln!(out, "{k},{v}");
    }
    for (k, v) in [
        ("words_per_enriched_caption", s.words_per_caption()),
        ("words_per_question", s.words_per_question()),
        ("words_per_answer", s.words_per_answer()),
    ] {
        let _ = writeln!(out, "{k},{}", fmt_mean(v));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    /// 0 for the category ring, 1 for the question-word ring.
    pub ring: u8,
    pub label: String,
    pub count: usize,
    pub start_deg: f64,
    pub sweep_deg: f64,
}

/// Arc layout of the sunburst. Outer arcs sit inside their category's arc.
pub fn sunburst_arcs(report: &TaxonomyReport) -> Vec<Arc> {
    let total = report.classified();
    if total == 0 {
        return Vec::new();
    }
    let scale = 360.0 / total as f64;
    let mut arcs = Vec::new();
    let mut start = 0.0;
    for c in Category::ALL {
        let Some(&count) = report.inner.get(&c) else { continue };
        arcs.push(Arc {
            ring: 0,
            label: c.as_str().to_string(),
            count,
            start_deg: start,
            sweep_deg: count as f64 * scale,
        });
        let mut sub = start;
        for ((_, w), &n) in report.outer.iter().filter(|((oc, _), _)| *oc == c) {
            arcs.push(Arc {
                ring: 1,
                label: format!("{}/{w}", c.as_str()),
                count: n,
                start_deg: sub,
                sweep_deg: n as f64 * scale,
            });
            sub += n as f64 * scale;
        }
        start += count as f64 * scale;
    }
    arcs
}

const PALETTE: [&str; 3] = ["#4e79a7", "#f28e2b", "#bab0ac"];

fn polar(cx: f64, cy: f64, r: f64, deg: f64) -> (f64, f64) {
    let rad = (deg - 90.0).to_radians();
    (cx + r * rad.cos(), cy + r * rad.sin())
}

fn sector_path(r0: f64, r1: f64, start: f64, sweep: f64) -> String {
    let (cx, cy) = (200.0, 200.0);
    let end = start + sweep;
    let large = if sweep > 180.0 { 1 } else { 0 };
    let (a, b) = (polar(cx, cy, r1, start), polar(cx, cy, r1, end));
    let (c, d) = (polar(cx, cy, r0, end), polar(cx, cy, r0, start));
    format!(
        "M{:.3},{:.3} A{r1},{r1} 0 {large} 1 {:.3},{:.3} L{:.3},{:.3} A{r0},{r0} 0 {large} 0 {:.3},{:.3} Z",
        a.0, a.1, b.0, b.1, c.0, c.1, d.0, d.1
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn sunburst_svg(report: &TaxonomyReport) -> String {
    let mut out = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"400\" height=\"400\" viewBox=\"0 0 400 400\">\n",
    );
    for arc in sunburst_arcs(report) {
        let (r0, r1) = if arc.ring == 0 { (40.0, 110.0) } else { (115.0, 185.0) };
        let cat = arc.label.split('/').next().unwrap_or("");
        let color = Category::parse(cat).map_or(PALETTE[2], |c| PALETTE[c as usize]);
        let opacity = if arc.ring == 0 { 1.0 } else { 0.6 };
        // A full circle cannot be one SVG arc; draw it as two halves.
        let pieces: Vec<(f64, f64)> = if arc.sweep_deg >= 359.999 {
            vec![(arc.start_deg, 180.0), (arc.start_deg + 180.0, 180.0)]
        } else {
            vec![(arc.start_deg, arc.sweep_deg)]
        };
        let d: Vec<String> = pieces.iter().map(|&(s, w)| sector_path(r0, r1, s, w)).collect();
        let _ = writeln!(
            out,
            "  <path data-ring=\"{}\" data-label=\"{}\" data-count=\"{}\" data-angle=\"{:.1}\" d=\"{}\" fill=\"{color}\" fill-opacity=\"{opacity}\" stroke=\"white\"><title>{} ({})</title></path>",
            arc.ring,
            escape(&arc.label),
            arc.count,
            arc.sweep_deg,
            d.join(" "),
            escape(&arc.label),
            arc.count
        );
    }
    out.push_str("</svg>\n");
    out
}

pub fn histogram_svg(lengths: &LengthStats) -> String {
    let (w, h, pad) = (600.0, 260.0, 30.0);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{}\" viewBox=\"0 0 {w} {}\">\n",
        2.0 * h,
        2.0 * h
    );
    for (panel, (kind, hist)) in [("question", &lengths.question), ("answer", &lengths.answer)]
        .into_iter()
        .enumerate()
    {
        let top = panel as f64 * h;
        let _ = writeln!(
            out,
            "  <text x=\"{pad}\" y=\"{}\" font-size=\"12\">{kind} words (mean {})</text>",
            top + 16.0,
            fmt_mean(hist.mean())
        );
        let Some(&last) = hist.bins.keys().last() else { continue };
        let nbins = last / hist.bin_width + 1;
        let max = hist.bins.values().copied().max().unwrap_or(1) as f64;
        let bar_w = (w - 2.0 * pad) / nbins as f64;
        let base = top + h - pad;
        for (&start, &count) in &hist.bins {
            let bh = (h - 3.0 * pad) * count as f64 / max;
            let _ = writeln!(
                out,
                "  <rect data-kind=\"{kind}\" data-bin=\"{start}\" data-count=\"{count}\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                pad + (start / hist.bin_width) as f64 * bar_w,
                base - bh,
                (bar_w - 1.0).max(0.5),
                bh,
                PALETTE[panel]
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Writes the requested artifacts into `dir` and returns their paths.
pub fn emit_report(report: &TaxonomyReport, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>, StatsError> {
    std::fs::create_dir_all(dir).map_err(|source| StatsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut files: Vec<(&str, String)> = Vec::new();
    let mut formats = formats.to_vec();
    formats.sort();
    formats.dedup();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                files.push(("taxonomy.csv", taxonomy_csv(report)));
                files.push(("lengths.csv", lengths_csv(&report.lengths)));
                files.push(("summary.csv", summary_csv(&report.summary)));
            }
            ReportFormat::SvgSunburst => files.push(("taxonomy_sunburst.svg", sunburst_svg(report))),
            ReportFormat::SvgHistogram => files.push(("lengths_histogram.svg", histogram_svg(&report.lengths))),
        }
    }
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(|e| StatsError::Io {
            path: path.clone(),
            source: std::io::Error::other(e.to_string()),
        })?;
        written.push(path);
    }
    Ok(written)
}
