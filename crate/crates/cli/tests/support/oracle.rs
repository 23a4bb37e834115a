//! Brute-force reference for the mock language models: builds the full
//! next-token probability table at every step and reads off the target's NLL.

use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy)]
pub enum Law {
    Uniform,
    Copycat(f64),
    ImageBag(f64),
}

pub struct Oracle<'a> {
    pub vocab: Vec<&'a str>,
    pub law: Law,
    pub bag: BTreeSet<&'a str>,
}

impl<'a> Oracle<'a> {
    fn table(&self, seen: &BTreeSet<&'a str>, image: bool) -> BTreeMap<&'a str, f64> {
        let v = self.vocab.len() as f64;
        let split = |group: &BTreeSet<&'a str>, mass: f64| -> BTreeMap<&'a str, f64> {
            let inside = self.vocab.iter().filter(|t| group.contains(*t)).count() as f64;
            self.vocab
                .iter()
                .map(|&t| {
                    let p = if inside == 0.0 || inside == v {
                        1.0 / v
                    } else if group.contains(t) {
                        mass / inside
                    } else {
                        (1.0 - mass) / (v - inside)
                    };
                    (t, p)
                })
                .collect()
        };
        match self.law {
            Law::Uniform => self.vocab.iter().map(|&t| (t, 1.0 / v)).collect(),
            Law::Copycat(p) => split(seen, p),
            Law::ImageBag(p) if image => split(&self.bag, p),
            Law::ImageBag(_) => self.vocab.iter().map(|&t| (t, 1.0 / v)).collect(),
        }
    }

    /// Summed NLL of `target` after `context`, optionally with the image.
    pub fn nll(&self, image: bool, context: &[&'a str], target: &[&'a str]) -> f64 {
        let mut seen: BTreeSet<&str> = context.iter().copied().collect();
        let mut total = 0.0;
        for &t in target {
            let table = self.table(&seen, image);
            let mass: f64 = table.values().sum();
            assert!((mass - 1.0).abs() < 1e-12, "table mass {mass}");
            total -= table[t].ln();
            seen.insert(t);
        }
        total
    }
}

/// `Question: q.. Answer: a..` as tokens.
pub fn dialogue<'a>(q: &[&'a str], a: &[&'a str]) -> Vec<&'a str> {
    let mut d = vec!["Question:"];
    d.extend_from_slice(q);
    d.push("Answer:");
    d.extend_from_slice(a);
    d
}

pub struct Expected {
    pub ifd: f64,
    pub vfd: f64,
    pub mifd: f64,
    /// FFD of the pair `(a, q)` explaining `(q, a)`.
    pub ffd: f64,
}

pub fn expected(o: &Oracle, q: &[&str], a: &[&str]) -> Expected {
    let ifd = o.nll(false, q, a) / o.nll(false, &[], a);
    let d = dialogue(q, a);
    let vfd = o.nll(true, &[], &d) / o.nll(false, &[], &d);
    let explain = dialogue(a, q);
    let ffd = o.nll(true, &d, &explain) / o.nll(true, &[], &explain);
    Expected {
        ifd,
        vfd,
        mifd: vfd * ifd,
        ffd,
    }
}
