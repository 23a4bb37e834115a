//! Quantile-based exclusion of scored pairs.
//!
//! Extractive pairs are ranked by mIFD and only the lowest `mifd_keep_fraction`
//! survive. Self-explain pairs whose source was dropped are orphaned; the rest
//! are banded by FFD, dropping the over-related low tail and the unrelated
//! high tail.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::{InstructionRecord, PairKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("no scores to take a quantile of")]
    EmptyScores,
    #[error("quantile {0} outside [0, 1]")]
    BadQuantile(f64),
    #[error("pair {0} has no usable score")]
    UnscoredPair(String),
    #[error("invalid filter policy: {0}")]
    BadPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    #[default]
    ByPairId,
}

/// Whether the mIFD keep fraction applies to the whole dataset or to each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterScope {
    #[default]
    Global,
    PerImage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterPolicy {
    pub mifd_keep_fraction: f64,
    pub ffd_low_quantile: f64,
    pub ffd_high_quantile: f64,
    #[serde(default)]
    pub tie_break: TieBreak,
    #[serde(default)]
    pub scope: FilterScope,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            mifd_keep_fraction: 0.30,
            ffd_low_quantile: 0.02,
            ffd_high_quantile: 0.98,
            tie_break: TieBreak::ByPairId,
            scope: FilterScope::Global,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |m: String| Err(FilterError::BadPolicy(m));
        if !(self.mifd_keep_fraction > 0.0 && self.mifd_keep_fraction <= 1.0) {
            return bad(format!("mifd_keep_fraction {} not in (0, 1]", self.mifd_keep_fraction));
        }
        if !(0.0..0.5).contains(&self.ffd_low_quantile) {
            return bad(format!("ffd_low_quantile {} not in [0, 0.5)", self.ffd_low_quantile));
        }
        if !(self.ffd_high_quantile > 0.5 && self.ffd_high_quantile <= 1.0) {
            return bad(format!("ffd_high_quantile {} not in (0.5, 1]", self.ffd_high_quantile));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DropReason {
    HighMifd,
    HighFfd,
    LowFfd,
    OrphanedExplain,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DropReason::HighMifd => "HighMifd",
            DropReason::HighFfd => "HighFfd",
            DropReason::LowFfd => "LowFfd",
            DropReason::OrphanedExplain => "OrphanedExplain",
        })
    }
}

/// One pair as seen by the filters. `key` must be unique across the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub key: String,
    pub image_id: String,
    pub score: Option<f64>,
}

impl ScoredPair {
    pub fn new(key: impl Into<String>, image_id: impl Into<String>, score: Option<f64>) -> Self {
        Self {
            key: key.into(),
            image_id: image_id.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Largest kept mIFD (global scope only).
    pub mifd_cut: Option<f64>,
    pub ffd_low: Option<f64>,
    pub ffd_high: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterOutcome {
    pub kept: Vec<String>,
    pub dropped: Vec<(String, DropReason)>,
    pub thresholds_used: Thresholds,
}

/// Decision for one pair, as written to the audit CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub pair_id: String,
    pub stage: String,
    pub score: Option<f64>,
    pub decision: String,
    pub reason: Option<DropReason>,
    pub threshold: Option<f64>,
}

/// `round` if `x` is within floating-point noise of an integer, otherwise `ceil`/`floor`.
fn snap(x: f64, up: bool) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r
    } else if up {
        x.ceil()
    } else {
        x.floor()
    }
}

/// Number of pairs kept by a keep fraction: ⌈fraction·n⌉.
pub fn keep_count(n: usize, fraction: f64) -> usize {
    (snap(fraction * n as f64, true) as usize).min(n)
}

fn sorted(scores: &[f64]) -> Vec<f64> {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn check_q(q: f64) -> Result<(), FilterError> {
    if (0.0..=1.0).contains(&q) {
        Ok(())
    } else {
        Err(FilterError::BadQuantile(q))
    }
}

/// Nearest-rank quantile: element ⌈q·N⌉−1 of the ascending sort (q = 0 gives the minimum).
pub fn quantile(scores: &[f64], q: f64) -> Result<f64, FilterError> {
    check_q(q)?;
    if scores.is_empty() {
        return Err(FilterError::EmptyScores);
    }
    let v = sorted(scores);
    let rank = snap(q * v.len() as f64, true) as usize;
    Ok(v[rank.saturating_sub(1).min(v.len() - 1)])
}

/// Nearest-rank quantile taken from the top: element ⌊q·N⌋ of the ascending sort.
/// Scores strictly below it are at most a `q` fraction of the data, mirroring
/// how scores strictly above `quantile(1 - q)` are at most a `q` fraction.
pub fn lower_quantile(scores: &[f64], q: f64) -> Result<f64, FilterError> {
    check_q(q)?;
    if scores.is_empty() {
        return Err(FilterError::EmptyScores);
    }
    let v = sorted(scores);
    let idx = snap(q * v.len() as f64, false) as usize;
    Ok(v[idx.min(v.len() - 1)])
}

fn require_scores(pairs: &[ScoredPair]) -> Result<Vec<f64>, FilterError> {
    pairs
        .iter()
        .map(|p| match p.score {
            Some(s) if s.is_finite() => Ok(s),
            _ => Err(FilterError::UnscoredPair(p.key.clone())),
        })
        .collect()
}

fn keep_lowest(pairs: &[&ScoredPair], fraction: f64, out: &mut FilterOutcome) -> Option<f64> {
    let mut order: Vec<&ScoredPair> = pairs.to_vec();
    order.sort_by(|a, b| {
        a.score
            .unwrap()
            .total_cmp(&b.score.unwrap())
            .then_with(|| a.key.cmp(&b.key))
    });
    let k = keep_count(order.len(), fraction);
    let cut = k.checked_sub(1).map(|i| order[i].score.unwrap());
    for (i, p) in order.iter().enumerate() {
        if i < k {
            out.kept.push(p.key.clone());
        } else {
            out.dropped.push((p.key.clone(), DropReason::HighMifd));
        }
    }
    cut
}

/// Keeps the ⌈keep_fraction·N⌉ lowest-mIFD pairs; ties at the cut go to the smaller key.
pub fn filter_mifd(pairs: &[ScoredPair], policy: &FilterPolicy) -> Result<FilterOutcome, FilterError> {
    policy.validate()?;
    require_scores(pairs)?;
    let mut out = FilterOutcome::default();
    match policy.scope {
        FilterScope::Global => {
            let refs: Vec<&ScoredPair> = pairs.iter().collect();
            out.thresholds_used.mifd_cut = keep_lowest(&refs, policy.mifd_keep_fraction, &mut out);
        }
        FilterScope::PerImage => {
            let mut groups: BTreeMap<&str, Vec<&ScoredPair>> = BTreeMap::new();
            for p in pairs {
                groups.entry(p.image_id.as_str()).or_default().push(p);
            }
            for group in groups.values() {
                keep_lowest(group, policy.mifd_keep_fraction, &mut out);
            }
        }
    }
    out.kept.sort();
    out.dropped.sort();
    Ok(out)
}

/// Low and high FFD thresholds for a score set.
pub fn ffd_band(scores: &[f64], policy: &FilterPolicy) -> Result<(f64, f64), FilterError> {
    Ok((
        lower_quantile(scores, policy.ffd_low_quantile)?,
        quantile(scores, policy.ffd_high_quantile)?,
    ))
}

/// Drops pairs strictly below the low threshold (`LowFfd`) or strictly above
/// the high threshold (`HighFfd`).
pub fn filter_ffd(pairs: &[ScoredPair], policy: &FilterPolicy) -> Result<FilterOutcome, FilterError> {
    policy.validate()?;
    let scores = require_scores(pairs)?;
    let mut out = FilterOutcome::default();
    if pairs.is_empty() {
        return Ok(out);
    }
    let (low, high) = ffd_band(&scores, policy)?;
    out.thresholds_used.ffd_low = Some(low);
    out.thresholds_used.ffd_high = Some(high);
    for (p, s) in pairs.iter().zip(scores) {
        if s < low {
            out.dropped.push((p.key.clone(), DropReason::LowFfd));
        } else if s > high {
            out.dropped.push((p.key.clone(), DropReason::HighFfd));
        } else {
            out.kept.push(p.key.clone());
        }
    }
    out.kept.sort();
    out.dropped.sort();
    Ok(out)
}

/// Dataset-unique key for a pair.
pub fn pair_key(image_id: &str, pair_id: &str) -> String {
    format!("{image_id}#{pair_id}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeResult {
    pub records: Vec<InstructionRecord>,
    pub mifd: FilterOutcome,
    pub orphaned: Vec<String>,
    pub ffd: FilterOutcome,
    pub audit: Vec<AuditRow>,
}

impl CascadeResult {
    pub fn dropped_count(&self) -> usize {
        self.mifd.dropped.len() + self.orphaned.len() + self.ffd.dropped.len()
    }
}

fn scored(records: &[InstructionRecord], kind: PairKind) -> Vec<ScoredPair> {
    records
        .iter()
        .flat_map(|r| {
            r.pairs_of(kind).map(move |p| {
                let card = r.scores.get(&p.pair_id);
                let score = card.and_then(|c| match kind {
                    PairKind::Extractive => c.mifd,
                    _ => c.ffd,
                });
                ScoredPair::new(pair_key(&r.image.id, &p.pair_id), &r.image.id, score)
            })
        })
        .collect()
}

/// mIFD filter on extractive pairs, then orphan removal, then the FFD band on
/// the surviving self-explain pairs. Records left with no pairs are removed.
pub fn cascade(records: &[InstructionRecord], policy: &FilterPolicy) -> Result<CascadeResult, FilterError> {
    policy.validate()?;
    let extractive = scored(records, PairKind::Extractive);
    let mifd = filter_mifd(&extractive, policy)?;
    let kept_extractive: HashSet<&str> = mifd.kept.iter().map(String::as_str).collect();

    let mut orphaned = Vec::new();
    let mut explain_candidates = Vec::new();
    let mut explain_scores: BTreeMap<String, Option<f64>> = BTreeMap::new();
    for r in records {
        for p in r.pairs_of(PairKind::SelfExplain) {
            let key = pair_key(&r.image.id, &p.pair_id);
            let score = r.scores.get(&p.pair_id).and_then(|c| c.ffd);
            explain_scores.insert(key.clone(), score);
            let source_kept = p
                .explains
                .as_deref()
                .map(|s| kept_extractive.contains(pair_key(&r.image.id, s).as_str()))
                .unwrap_or(false);
            if source_kept {
                explain_candidates.push(ScoredPair::new(key, &r.image.id, score));
            } else {
                orphaned.push(key);
            }
        }
    }
    orphaned.sort();
    let ffd = filter_ffd(&explain_candidates, policy)?;

    let survivors: HashSet<&str> = mifd.kept.iter().chain(&ffd.kept).map(String::as_str).collect();
    let mut out_records = Vec::new();
    for r in records {
        let mut rec = r.clone();
        rec.pairs
            .retain(|p| p.kind == PairKind::Caption || survivors.contains(pair_key(&r.image.id, &p.pair_id).as_str()));
        let ids: BTreeSet<&str> = rec.pairs.iter().map(|p| p.pair_id.as_str()).collect();
        rec.scores.retain(|id, _| ids.contains(id.as_str()));
        if !rec.pairs.is_empty() {
            out_records.push(rec);
        }
    }

    let mifd_scores: BTreeMap<&str, Option<f64>> =
        extractive.iter().map(|p| (p.key.as_str(), p.score)).collect();
    let mut audit = Vec::new();
    let mifd_cut = mifd.thresholds_used.mifd_cut;
    let per_image_cut = per_image_cuts(&extractive, &mifd);
    let cut_for = |key: &str| {
        mifd_cut.or_else(|| {
            let image = key.rsplit_once('#').map(|(i, _)| i).unwrap_or(key);
            per_image_cut.get(image).copied()
        })
    };
    for key in &mifd.kept {
        audit.push(AuditRow {
            pair_id: key.clone(),
            stage: "mifd".into(),
            score: mifd_scores[key.as_str()],
            decision: "keep".into(),
            reason: None,
            threshold: cut_for(key),
        });
    }
    for (key, reason) in &mifd.dropped {
        audit.push(AuditRow {
            pair_id: key.clone(),
            stage: "mifd".into(),
            score: mifd_scores[key.as_str()],
            decision: "drop".into(),
            reason: Some(*reason),
            threshold: cut_for(key),
        });
    }
    for key in &orphaned {
        audit.push(AuditRow {
            pair_id: key.clone(),
            stage: "ffd".into(),
            score: explain_scores[key],
            decision: "drop".into(),
            reason: Some(DropReason::OrphanedExplain),
            threshold: None,
        });
    }
    for key in &ffd.kept {
        audit.push(AuditRow {
            pair_id: key.clone(),
            stage: "ffd".into(),
            score: explain_scores[key],
            decision: "keep".into(),
            reason: None,
            threshold: None,
        });
    }
    for (key, reason) in &ffd.dropped {
        let threshold = match reason {
            DropReason::LowFfd => ffd.thresholds_used.ffd_low,
            _ => ffd.thresholds_used.ffd_high,
        };
        audit.push(AuditRow {
            pair_id: key.clone(),
            stage: "ffd".into(),
            score: explain_scores[key],
            decision: "drop".into(),
            reason: Some(*reason),
            threshold,
        });
    }

    Ok(CascadeResult {
        records: out_records,
        mifd,
        orphaned,
        ffd,
        audit,
    })
}

fn per_image_cuts(pairs: &[ScoredPair], outcome: &FilterOutcome) -> BTreeMap<String, f64> {
    let kept: HashSet<&str> = outcome.kept.iter().map(String::as_str).collect();
    let mut cuts: BTreeMap<String, f64> = BTreeMap::new();
    for p in pairs.iter().filter(|p| kept.contains(p.key.as_str())) {
        let s = p.score.unwrap();
        cuts.entry(p.image_id.clone())
            .and_modify(|c| *c = c.max(s))
            .or_insert(s);
    }
    cuts
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Audit log as CSV: `pair_id,stage,score,decision,reason,threshold`.
pub fn audit_csv(rows: &[AuditRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["pair_id", "stage", "score", "decision", "reason", "threshold"])?;
    for r in rows {
        w.write_record([
            r.pair_id.clone(),
            r.stage.clone(),
            fmt_opt(r.score),
            r.decision.clone(),
            r.reason.map(|x| x.to_string()).unwrap_or_default(),
            fmt_opt(r.threshold),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv output is utf-8"))
}

/// Keep levels 10%, 20%, ..., 90% for the filtering ablation.
pub fn sweep_levels() -> Vec<f64> {
    (1..=9).map(|i| f64::from(i) / 10.0).collect()
}

/// Runs the cascade once per keep level, all other policy fields unchanged.
pub fn sweep(
    records: &[InstructionRecord],
    policy: &FilterPolicy,
    levels: &[f64],
) -> Result<Vec<(f64, CascadeResult)>, FilterError> {
    levels
        .iter()
        .map(|&level| {
            let p = FilterPolicy {
                mifd_keep_fraction: level,
                ..*policy
            };
            cascade(records, &p).map(|r| (level, r))
        })
        .collect()
}
