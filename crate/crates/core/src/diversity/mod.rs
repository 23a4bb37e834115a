//! Batch-level diversity coefficient: the mean pairwise cosine distance between
//! per-batch embeddings of instruction text.

pub mod probe;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{EmbedProvider, ProviderError};
pub use probe::{FisherMode, Probe, ProbeSpec, ProbeVocab};

#[derive(Debug, Error)]
pub enum DiversityError {
    #[error("batch size {batch_size} exceeds the {available} available instructions")]
    BatchTooLarge { batch_size: usize, available: usize },
    #[error("need at least two batches, got {0}")]
    TooFewBatches(usize),
    #[error("batch {0} has fewer than 2 tokens")]
    BatchTooShort(usize),
    #[error("embedding of batch {0} is the zero vector")]
    ZeroVector(usize),
    #[error("embedding dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("bad probe spec: {0}")]
    BadProbe(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub batch_size: usize,
    pub num_batches: usize,
    pub seed: u64,
}

/// Indices into the instruction list. Batches are drawn independently; within
/// a batch indices are distinct.
pub fn sample_batches(available: usize, spec: &BatchSpec) -> Result<Vec<Vec<usize>>, DiversityError> {
    if spec.batch_size == 0 || spec.batch_size > available {
        return Err(DiversityError::BatchTooLarge {
            batch_size: spec.batch_size,
            available,
        });
    }
    if spec.num_batches < 2 {
        return Err(DiversityError::TooFewBatches(spec.num_batches));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..spec.num_batches)
        .map(|_| sample(&mut rng, available, spec.batch_size).into_vec())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pairing {
    AllPairs,
    /// `count` unordered pairs of distinct batches, drawn with replacement.
    Sampled { count: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistance {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityResult {
    pub div: f64,
    pub std: f64,
    pub pairs: Vec<PairDistance>,
}

pub fn cosine_distance(x: &[f64], y: &[f64]) -> Result<f64, DiversityError> {
    if x.len() != y.len() {
        return Err(DiversityError::DimensionMismatch(x.len(), y.len()));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 {
        return Err(DiversityError::ZeroVector(0));
    }
    if ny == 0.0 {
        return Err(DiversityError::ZeroVector(1));
    }
    Ok(1.0 - dot(x, y) / (nx * ny))
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn diversity_coefficient(embeddings: &[Vec<f64>], pairing: Pairing) -> Result<DiversityResult, DiversityError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(DiversityError::TooFewBatches(n));
    }
    let dim = embeddings[0].len();
    let mut norms = Vec::with_capacity(n);
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != dim {
            return Err(DiversityError::DimensionMismatch(dim, e.len()));
        }
        let v = norm(e);
        if v == 0.0 {
            return Err(DiversityError::ZeroVector(i));
        }
        norms.push(v);
    }
    let index_pairs: Vec<(usize, usize)> = match pairing {
        Pairing::AllPairs => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
        Pairing::Sampled { count, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count.max(1))
                .map(|_| {
                    let i = rng.random_range(0..n);
                    let j = (i + rng.random_range(1..n)) % n;
                    (i.min(j), i.max(j))
                })
                .collect()
        }
    };
    let pairs: Vec<PairDistance> = index_pairs
        .par_iter()
        .map(|&(a, b)| PairDistance {
            a,
            b,
            distance: 1.0 - dot(&embeddings[a], &embeddings[b]) / (norms[a] * norms[b]),
        })
        .collect();
    let m = pairs.len() as f64;
    let div = pairs.iter().map(|p| p.distance).sum::<f64>() / m;
    let var = pairs.iter().map(|p| (p.distance - div).powi(2)).sum::<f64>() / m;
    Ok(DiversityResult {
        div,
        std: var.sqrt(),
        pairs,
    })
}

/// How a batch of instructions becomes a vector.
pub enum Backend<'a> {
    MeanEmbedding(&'a dyn EmbedProvider),
    Probe { spec: ProbeSpec, vocab: &'a ProbeVocab },
}

impl Backend<'_> {
    pub fn label(&self) -> String {
        match self {
            Backend::MeanEmbedding(p) => format!("mean-embedding:{}", p.provider_id()),
            Backend::Probe { spec, vocab } => format!("probe:v{}d{}", vocab.size(), spec.embed_dim),
        }
    }
}

pub fn mean_embedding(texts: &[&str], provider: &dyn EmbedProvider) -> Result<Vec<f64>, DiversityError> {
    let owned: Vec<String> = texts.iter().map(|s| s.to_string()).collect();
    let vectors = provider.embed(&owned)?;
    let dim = vectors.first().map(Vec::len).unwrap_or(0);
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        if v.len() != dim {
            return Err(DiversityError::DimensionMismatch(dim, v.len()));
        }
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    let n = vectors.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// Trains a fresh probe (same seeded init for every batch) and returns its Fisher diagonal.
pub fn probe_embedding(texts: &[&str], spec: &ProbeSpec, vocab: &ProbeVocab) -> Result<Vec<f64>, DiversityError> {
    spec.validate().map_err(DiversityError::BadProbe)?;
    let positions = vocab.positions(texts.iter().copied());
    if positions.len() < 2 {
        return Err(DiversityError::BatchTooShort(0));
    }
    let mut probe = Probe::new(vocab.size(), spec.embed_dim, spec.seed);
    probe.train(&positions, spec.train_steps, spec.learning_rate);
    Ok(probe.fisher_diagonal(&positions, spec.fisher, spec.seed))
}

pub fn embed_batches(
    instructions: &[String],
    batches: &[Vec<usize>],
    backend: &Backend<'_>,
) -> Result<Vec<Vec<f64>>, DiversityError> {
    batches
        .par_iter()
        .enumerate()
        .map(|(i, idx)| {
            let texts: Vec<&str> = idx.iter().map(|&j| instructions[j].as_str()).collect();
            let out = match backend {
                Backend::MeanEmbedding(p) => mean_embedding(&texts, *p),
                Backend::Probe { spec, vocab } => probe_embedding(&texts, spec, vocab),
            };
            out.map_err(|e| match e {
                DiversityError::BatchTooShort(_) => DiversityError::BatchTooShort(i),
                other => other,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub backend: String,
    pub batch: BatchSpec,
    pub pairing: Pairing,
    pub div: f64,
    pub std: f64,
    pub num_pairs: usize,
}

/// Samples batches, embeds them and computes the coefficient.
pub fn measure(
    instructions: &[String],
    batch: &BatchSpec,
    backend: &Backend<'_>,
    pairing: Pairing,
) -> Result<(DiversityReport, DiversityResult), DiversityError> {
    let batches = sample_batches(instructions.len(), batch)?;
    let embeddings = embed_batches(instructions, &batches, backend)?;
    let result = diversity_coefficient(&embeddings, pairing)?;
    let report = DiversityReport {
        backend: backend.label(),
        batch: *batch,
        pairing,
        div: result.div,
        std: result.std,
        num_pairs: result.pairs.len(),
    };
    Ok((report, result))
}

pub fn pairs_csv(result: &DiversityResult) -> String {
    let mut out = String::from("batch_a,batch_b,distance\n");
    for p in &result.pairs {
        out.push_str(&format!("{},{},{}\n", p.a, p.b, p.distance));
    }
    out
}
