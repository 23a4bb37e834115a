//! Small next-token probe used for Task2Vec-style batch embeddings.
//!
//! Architecture: token embedding table `E` (V×d) → linear layer `W` (V×d) plus
//! bias `b` (V) → softmax over the vocabulary. Each instruction contributes the
//! positions `(<bos>, t1), (t1, t2), ...`. The batch embedding is the diagonal
//! of the Fisher information, estimated as the per-parameter mean over positions
//! of the squared NLL gradient.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const UNK_ID: usize = 0;
pub const BOS_ID: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSpec {
    pub embed_dim: usize,
    pub vocab_cap: usize,
    pub train_steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub fisher: FisherMode,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            vocab_cap: 2048,
            train_steps: 10,
            learning_rate: 0.5,
            seed: 0,
            fisher: FisherMode::Empirical,
        }
    }
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.embed_dim == 0 || self.vocab_cap == 0 || self.train_steps == 0 {
            return Err("embed_dim, vocab_cap and train_steps must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

/// Which labels the Fisher estimate uses: the observed next tokens, or tokens
/// sampled from the probe's own predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    #[default]
    Empirical,
    Sampled,
}

/// Lowercased whitespace tokens.
pub fn probe_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Frequency-capped vocabulary. Ids 0 and 1 are `<unk>` and `<bos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVocab {
    index: HashMap<String, usize>,
    size: usize,
}

impl ProbeVocab {
    /// Keeps the `cap` most frequent tokens; ties broken alphabetically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, cap: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in probe_tokens(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let index: HashMap<String, usize> = ranked
            .into_iter()
            .enumerate()
            .map(|(i, (tok, _))| (tok, i + 2))
            .collect();
        let size = index.len() + 2;
        Self { index, size }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// `(input, target)` id pairs for every token position of the texts.
    pub fn positions<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for t in texts {
            let mut prev = BOS_ID;
            for tok in probe_tokens(t) {
                let id = self.id(&tok);
                out.push((prev, id));
                prev = id;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    vocab: usize,
    dim: usize,
    /// `E` (V×d), then `W` (V×d), then `b` (V), row-major.
    params: Vec<f64>,
}

impl Probe {
    /// Seeded initialization: uniform in ±0.1 for `E` and `W`, zero bias.
    pub fn new(vocab: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 * vocab * dim + vocab;
        let mut params = vec![0.0; n];
        for p in params.iter_mut().take(2 * vocab * dim) {
            *p = rng.random_range(-0.1..0.1);
        }
        Self { vocab, dim, params }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn w_offset(&self) -> usize {
        self.vocab * self.dim
    }

    fn b_offset(&self) -> usize {
        2 * self.vocab * self.dim
    }

    /// Softmax probabilities for one input token.
    fn predict(&self, input: usize, probs: &mut [f64]) {
        let d = self.dim;
        let e = &self.params[input * d..(input + 1) * d];
        let w = &self.params[self.w_offset()..self.b_offset()];
        let b = &self.params[self.b_offset()..];
        let mut max = f64::NEG_INFINITY;
        for v in 0..self.vocab {
            let row = &w[v * d..(v + 1) * d];
            let z = b[v] + row.iter().zip(e).map(|(x, y)| x * y).sum::<f64>();
            probs[v] = z;
            max = max.max(z);
        }
        let mut total = 0.0;
        for p in probs.iter_mut() {
            *p = (*p - max).exp();
            total += *p;
        }
        for p in probs.iter_mut() {
            *p /= total;
        }
    }

    /// Mean NLL over positions.
    pub fn loss(&self, positions: &[(usize, usize)]) -> f64 {
        let mut probs = vec![0.0; self.vocab];
        let mut total = 0.0;
        for &(x, y) in positions {
            self.predict(x, &mut probs);
            total -= probs[y].ln();
        }
        total / positions.len() as f64
    }

    /// Calls `visit(param_index, grad)` for every nonzero gradient entry of the
    /// NLL at one position with label `y`. `g` is scratch space of length V.
    fn position_grad(&self, x: usize, y: usize, g: &mut [f64], mut visit: impl FnMut(usize, f64)) {
        let d = self.dim;
        self.predict(x, g);
        g[y] -= 1.0;
        let (wo, bo) = (self.w_offset(), self.b_offset());
        let e = &self.params[x * d..(x + 1) * d];
        let w = &self.params[wo..bo];
        let mut de = vec![0.0; d];
        for v in 0..self.vocab {
            let gv = g[v];
            visit(bo + v, gv);
            for k in 0..d {
                visit(wo + v * d + k, gv * e[k]);
                de[k] += w[v * d + k] * gv;
            }
        }
        for (k, val) in de.into_iter().enumerate() {
            visit(x * d + k, val);
        }
    }

    /// Gradient of the mean NLL.
    pub fn gradient(&self, positions: &[(usize, usize)]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        let mut g = vec![0.0; self.vocab];
        for &(x, y) in positions {
            self.position_grad(x, y, &mut g, |i, v| grad[i] += v);
        }
        let n = positions.len() as f64;
        grad.iter_mut().for_each(|v| *v /= n);
        grad
    }

    /// Plain gradient descent on the mean NLL.
    pub fn train(&mut self, positions: &[(usize, usize)], steps: usize, learning_rate: f64) {
        for _ in 0..steps {
            let grad = self.gradient(positions);
            for (p, g) in self.params.iter_mut().zip(grad) {
                *p -= learning_rate * g;
            }
        }
    }

    /// Diagonal Fisher estimate: mean over positions of squared per-position gradients.
    pub fn fisher_diagonal(&self, positions: &[(usize, usize)], mode: FisherMode, seed: u64) -> Vec<f64> {
        let mut fim = vec![0.0; self.params.len()];
        let mut g = vec![0.0; self.vocab];
        let mut probs = vec![0.0; self.vocab];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &(x, observed) in positions {
            let y = match mode {
                FisherMode::Empirical => observed,
                FisherMode::Sampled => {
                    self.predict(x, &mut probs);
                    sample_index(&probs, rng.random::<f64>())
                }
            };
            self.position_grad(x, y, &mut g, |i, v| fim[i] += v * v);
        }
        let n = positions.len() as f64;
        fim.iter_mut().for_each(|v| *v /= n);
        fim
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
