//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any attainable criterion fails.

mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use curate_core::dialogue::DialogueTemplate;
use curate_core::diversity::{
    self, diversity_coefficient, probe_embedding, Backend, BatchSpec, FisherMode, Pairing, Probe, ProbeSpec, ProbeVocab,
};
use curate_core::filter::{self, filter_ffd, filter_mifd, DropReason, FilterPolicy, ScoredPair};
use curate_core::jsonl;
use curate_core::pipeline::{Pipeline, PipelineStage, RunConfig};
use curate_core::provider::mock::{HashEmbedder, MockLm, MockLmSpec, MockMode, UNK};
use curate_core::record::{ImageRef, InstructionRecord, OcrLine, PairKind, QAPair};
use curate_core::scoring::{score_dataset, score_record, FfdMode, ScoreOptions};
use curate_core::stats::{self, Taxonomy};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::oracle::{expected, Law, Oracle};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- scoring

const GRID_TOKENS: [&str; 4] = ["a", "b", "c", "d"];
const GRID_VOCAB: [&str; 6] = ["a", "b", "c", "d", "Question:", "Answer:"];

fn sequences() -> Vec<Vec<&'static str>> {
    let mut out: Vec<Vec<&str>> = GRID_TOKENS.iter().map(|t| vec![*t]).collect();
    for x in GRID_TOKENS {
        for y in GRID_TOKENS {
            out.push(vec![x, y]);
        }
    }
    out
}

fn grid_laws() -> [(Law, MockMode); 3] {
    [
        (Law::Uniform, MockMode::Uniform),
        (Law::Copycat(0.7), MockMode::Copycat { p_repeat: 0.7 }),
        (Law::ImageBag(0.5), MockMode::ImageBag { p_inbag: 0.5 }),
    ]
}

fn grid_record(q: &[&str], a: &[&str]) -> InstructionRecord {
    let mut r = InstructionRecord::new(ImageRef::new("img", "img.png"), "grid", vec![]);
    let src = QAPair::extractive(q.join(" "), a.join(" "));
    let explain = QAPair::self_explain(a.join(" "), q.join(" "), &src);
    r.pairs = vec![src, explain];
    r
}

fn oracle_grid() -> Outcome {
    let start = Instant::now();
    let template = DialogueTemplate::default();
    let seqs = sequences();
    let mut cases = 0;
    let mut worst = 0.0f64;
    for (law, mode) in grid_laws() {
        let lm = MockLm::new(MockLmSpec::new(GRID_VOCAB, mode).with_bag("img", ["a", "b"])).unwrap();
        let oracle = Oracle {
            vocab: GRID_VOCAB.to_vec(),
            law,
            bag: ["a", "b"].into_iter().collect(),
        };
        for q in &seqs {
            for a in &seqs {
                let record = grid_record(q, a);
                let cards = score_record(&record, &lm, &template, FfdMode::Canonical);
                let src = &cards[&record.pairs[0].pair_id];
                let exp = &cards[&record.pairs[1].pair_id];
                let e = expected(&oracle, q, a);
                for (name, got, want) in [
                    ("ifd", src.ifd, e.ifd),
                    ("vfd", src.vfd, e.vfd),
                    ("mifd", src.mifd, e.mifd),
                    ("ffd", exp.ffd, e.ffd),
                ] {
                    let got = got.ok_or_else(|| format!("{law:?} q={q:?} a={a:?}: {name} missing"))?;
                    let err = (got - want).abs();
                    worst = worst.max(err);
                    ensure(err <= 1e-9, || format!("{law:?} q={q:?} a={a:?}: {name} {got} vs oracle {want}"))?;
                }
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("{cases} cases, max abs error {worst:.1e}, {:.2}s", elapsed.as_secs_f64()))
}

fn check_mifd_identity(records: &[InstructionRecord]) -> Result<usize, String> {
    let mut n = 0;
    for r in records {
        for c in r.scores.values() {
            if let (Some(m), Some(v), Some(i)) = (c.mifd, c.vfd, c.ifd) {
                let rel = (m - v * i).abs() / (v * i).abs().max(f64::MIN_POSITIVE);
                ensure(rel <= 1e-12, || format!("{}#{}: mifd {m} vs {}", r.image.id, c.pair_id, v * i))?;
                n += 1;
            }
        }
    }
    Ok(n)
}

fn fixture_scored(mode: MockMode) -> Vec<InstructionRecord> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = support::write_config(dir.path(), "");
    let mut config = RunConfig::load(&cfg).unwrap();
    config.providers.loss = curate_core::pipeline::config::LossSpec::Mock {
        mode,
        accepts_images: true,
    };
    let mut p = Pipeline::open(config, false).unwrap();
    p.run_all(Some(PipelineStage::Score)).unwrap();
    jsonl::read_records(&p.workdir().join("scored.jsonl")).unwrap()
}

fn mifd_identity() -> Outcome {
    let mut total = 0;
    let template = DialogueTemplate::default();
    let seqs = sequences();
    for (_, mode) in grid_laws() {
        let lm = MockLm::new(MockLmSpec::new(GRID_VOCAB, mode).with_bag("img", ["a", "b"])).unwrap();
        let records: Vec<InstructionRecord> = seqs
            .iter()
            .flat_map(|q| seqs.iter().map(move |a| (q, a)))
            .map(|(q, a)| {
                let mut r = grid_record(q, a);
                r.scores = score_record(&r, &lm, &template, FfdMode::Canonical);
                r
            })
            .collect();
        total += check_mifd_identity(&records)?;
        total += check_mifd_identity(&fixture_scored(mode))?;
    }
    total += check_mifd_identity(&ffd_corpus().0)?;
    Ok(format!("{total} scored pairs"))
}

fn uniform_baseline() -> Outcome {
    let template = DialogueTemplate::default();
    let lm = MockLm::new(MockLmSpec::new(GRID_VOCAB, MockMode::Uniform).with_bag("img", ["a", "b"])).unwrap();
    let seqs = sequences();
    let mut records: Vec<InstructionRecord> = Vec::new();
    for q in &seqs {
        for a in &seqs {
            let mut r = grid_record(q, a);
            r.scores = score_record(&r, &lm, &template, FfdMode::Canonical);
            records.push(r);
        }
    }
    records.extend(fixture_scored(MockMode::Uniform));
    let mut n = 0;
    for r in &records {
        for c in r.scores.values() {
            for (name, v) in [("ifd", c.ifd), ("vfd", c.vfd), ("ffd", c.ffd)] {
                if let Some(v) = v {
                    ensure(v == 1.0, || format!("{}#{}: {name} = {v}", r.image.id, c.pair_id))?;
                    n += 1;
                }
            }
            ensure(c.failure.is_none(), || format!("failure: {:?}", c.failure))?;
        }
    }
    Ok(format!("{n} ratios all exactly 1.0"))
}

// ---------------------------------------------------------------- filtering

fn synthetic_pairs(n: usize, seed: u64, coarse: bool) -> Vec<ScoredPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let mut s: f64 = rng.random_range(0.0..2.0);
            if coarse {
                s = (s * 10.0).round() / 10.0;
            }
            ScoredPair::new(format!("img{:03}#p{i:04}", i % 97), format!("img{:03}", i % 97), Some(s))
        })
        .collect()
}

fn filter_policy() -> Outcome {
    let policy = FilterPolicy {
        mifd_keep_fraction: 0.30,
        ..FilterPolicy::default()
    };
    for coarse in [false, true] {
        let pairs = synthetic_pairs(1000, 11, coarse);
        let base = filter_mifd(&pairs, &policy).map_err(|e| e.to_string())?;
        ensure(base.kept.len() == 300, || format!("kept {}", base.kept.len()))?;
        ensure(base.dropped.len() == 700, || format!("dropped {}", base.dropped.len()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut shuffled = pairs.clone();
            shuffled.shuffle(&mut rng);
            let o = filter_mifd(&shuffled, &policy).map_err(|e| e.to_string())?;
            ensure(o.kept == base.kept, || "kept set depends on input order".into())?;
        }
        let mut prev: BTreeSet<String> = BTreeSet::new();
        for step in 1..=20 {
            let f = step as f64 / 20.0;
            let p = FilterPolicy {
                mifd_keep_fraction: f,
                ..policy
            };
            let kept: BTreeSet<String> = filter_mifd(&pairs, &p).map_err(|e| e.to_string())?.kept.into_iter().collect();
            ensure(prev.is_subset(&kept), || format!("not monotone at keep fraction {f}"))?;
            prev = kept;
        }
    }

    // Through the CLI: audit log and the 9-variant sweep.
    let dir = tempfile::tempdir().unwrap();
    let cfg = support::write_config(dir.path(), "");
    let o = support::curate(&cfg, &["run", "--stop-after", "score"]);
    ensure(o.status.success(), || support::stderr(&o))?;
    let o = support::curate(&cfg, &["filter", "--mifd-keep", "0.3"]);
    ensure(o.status.success(), || support::stderr(&o))?;
    let work = dir.path().join("work");
    let audit = std::fs::read_to_string(work.join("audit.csv")).unwrap();
    let mifd_rows: Vec<&str> = audit.lines().filter(|l| l.contains(",mifd,")).collect();
    let dropped = mifd_rows.iter().filter(|l| l.contains(",drop,")).count();
    let frac = dropped as f64 / mifd_rows.len() as f64;
    ensure((frac - 0.7).abs() < 1e-12, || format!("audit drop fraction {frac}"))?;
    let o = support::curate(&cfg, &["sweep"]);
    ensure(o.status.success(), || support::stderr(&o))?;
    let variants: Vec<String> = std::fs::read_dir(work.join("sweep"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("keep_"))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let want: Vec<String> = (1..=9).map(|i| format!("keep_{}0.jsonl", i)).collect();
    ensure(variants == want, || format!("sweep files {variants:?}"))?;
    Ok(format!(
        "300/1000 kept, order-invariant, monotone; audit drops {:.0}% of {} pairs; sweep wrote {}",
        100.0 * frac,
        mifd_rows.len(),
        variants.len()
    ))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Kind {
    Normal,
    Repeat,
    Unrelated,
}

const SHARED: [&str; 24] = [
    "red", "blue", "sale", "open", "store", "menu", "price", "daily", "coffee", "tea", "bread", "cake", "north",
    "south", "street", "river", "hall", "ticket", "book", "title", "author", "guide", "night", "jazz",
];
const FOREIGN: [&str; 12] = [
    "zephyr", "quasar", "nebula", "glyph", "vortex", "onyx", "prism", "sigil", "tundra", "zenith", "lumen", "krypton",
];

/// 1,000 records with one extractive and one self-explain pair each; 5% of
/// the explanations repeat their source verbatim and 5% use a foreign vocabulary.
fn ffd_corpus() -> (Vec<InstructionRecord>, BTreeMap<String, Kind>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let pick = |rng: &mut ChaCha8Rng, words: &[&str], n: usize| -> Vec<String> {
        (0..n).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let mut records = Vec::new();
    let mut kinds = BTreeMap::new();
    for i in 0..1000 {
        let kind = match i % 20 {
            0 => Kind::Repeat,
            10 => Kind::Unrelated,
            _ => Kind::Normal,
        };
        let ocr_words = pick(&mut rng, &SHARED, 4);
        let q = format!("what does the {} sign say", ocr_words[0]);
        let a = format!("it says {}", ocr_words.join(" "));
        let src = QAPair::extractive(q.clone(), a.clone());
        let (eq, ea) = match kind {
            Kind::Repeat => (q.clone(), a.clone()),
            Kind::Unrelated => (pick(&mut rng, &FOREIGN, 4).join(" "), pick(&mut rng, &FOREIGN, 8).join(" ")),
            Kind::Normal => {
                let reused = rng.random_range(1..=3);
                let mut words = ocr_words[..reused].to_vec();
                words.extend(pick(&mut rng, &SHARED, 6 - reused));
                (
                    format!("how can we tell what the {} sign says", pick(&mut rng, &SHARED, 1)[0]),
                    format!("the image shows {}", words.join(" ")),
                )
            }
        };
        let explain = QAPair::self_explain(eq, ea, &src);
        let id = format!("img{i:04}");
        let ocr = vec![OcrLine::new([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]], ocr_words.join(" "), 0.9)];
        let mut r = InstructionRecord::new(ImageRef::new(id.clone(), format!("{id}.png")), "a sign", ocr);
        kinds.insert(filter::pair_key(&id, &explain.pair_id), kind);
        r.pairs = vec![src, explain];
        records.push(r);
    }
    let mut vocab: BTreeSet<String> = SHARED.iter().chain(&FOREIGN).map(|s| s.to_string()).collect();
    for r in &records {
        for p in &r.pairs {
            vocab.extend(p.question.split_whitespace().map(String::from));
            vocab.extend(p.answer.split_whitespace().map(String::from));
        }
    }
    vocab.extend(["Question:".to_string(), "Answer:".to_string(), UNK.to_string()]);
    let lm = MockLm::new(MockLmSpec::new(vocab, MockMode::Copycat { p_repeat: 0.7 })).unwrap();
    let report = score_dataset(records, &lm, &ScoreOptions::default()).unwrap();
    assert!(report.failures.is_empty(), "{:?}", report.failures);
    (report.records, kinds)
}

fn explain_pairs(records: &[InstructionRecord]) -> Vec<ScoredPair> {
    records
        .iter()
        .flat_map(|r| {
            r.pairs_of(PairKind::SelfExplain).map(move |p| {
                ScoredPair::new(filter::pair_key(&r.image.id, &p.pair_id), &r.image.id, r.scores[&p.pair_id].ffd)
            })
        })
        .collect()
}

fn frac(n: usize, d: usize) -> f64 {
    n as f64 / d as f64
}

/// Band taken from the unremarkable explanations; both failure groups must fall outside it.
fn ffd_band() -> Outcome {
    let (records, kinds) = ffd_corpus();
    let policy = FilterPolicy::default();
    let pairs = explain_pairs(&records);
    let of = |k: Kind| -> Vec<f64> {
        pairs.iter().filter(|p| kinds[&p.key] == k).map(|p| p.score.unwrap()).collect()
    };
    let (normal, repeats, unrelated) = (of(Kind::Normal), of(Kind::Repeat), of(Kind::Unrelated));
    let (low, high) = filter::ffd_band(&normal, &policy).map_err(|e| e.to_string())?;
    let below = frac(repeats.iter().filter(|s| **s < low).count(), repeats.len());
    let above = frac(unrelated.iter().filter(|s| **s > high).count(), unrelated.len());
    ensure(below >= 0.9, || format!("only {:.0}% of repeats below {low:.4}", 100.0 * below))?;
    ensure(above >= 0.9, || format!("only {:.0}% of unrelated above {high:.4}", 100.0 * above))?;

    let outcome = filter_ffd(&pairs, &policy).map_err(|e| e.to_string())?;
    for (key, reason) in &outcome.dropped {
        let want = match reason {
            DropReason::LowFfd => Kind::Repeat,
            _ => Kind::Unrelated,
        };
        ensure(kinds[key] == want, || format!("{key} dropped as {reason} but is {:?}", kinds[key]))?;
    }
    let low_n = outcome.dropped.iter().filter(|(_, r)| *r == DropReason::LowFfd).count();
    Ok(format!(
        "band [{low:.4}, {high:.4}] from normal pairs: {:.0}% of repeats below, {:.0}% of unrelated above; \
         corpus filter drops {low_n} low / {} high, all correctly typed",
        100.0 * below,
        100.0 * above,
        outcome.dropped.len() - low_n
    ))
}

/// Band taken from the whole corpus, as literally stated. At most ⌊0.02·N⌋ pairs
/// can lie below the lower quantile, i.e. 40% of a 5% repeat group.
fn ffd_band_corpus_quantiles() -> Outcome {
    let (records, kinds) = ffd_corpus();
    let pairs = explain_pairs(&records);
    let scores: Vec<f64> = pairs.iter().map(|p| p.score.unwrap()).collect();
    let (low, high) = filter::ffd_band(&scores, &FilterPolicy::default()).map_err(|e| e.to_string())?;
    let count = |k: Kind, pred: &dyn Fn(f64) -> bool| {
        let group: Vec<f64> = pairs.iter().filter(|p| kinds[&p.key] == k).map(|p| p.score.unwrap()).collect();
        frac(group.iter().filter(|s| pred(**s)).count(), group.len())
    };
    let below = count(Kind::Repeat, &|s| s < low);
    let above = count(Kind::Unrelated, &|s| s > high);
    let msg = format!(
        "{:.0}% of repeats below {low:.4}, {:.0}% of unrelated above {high:.4}",
        100.0 * below,
        100.0 * above
    );
    if below >= 0.9 && above >= 0.9 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// ---------------------------------------------------------------- diversity

const NOUNS: [&str; 10] = ["book", "poster", "sign", "menu", "label", "ticket", "map", "card", "banner", "receipt"];
const PLACES: [&str; 6] = ["wall", "door", "table", "shelf", "window", "street"];
const COLORS: [&str; 5] = ["red", "blue", "green", "gold", "black"];

fn one_family(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| format!("what is the title of the {} on the {}", NOUNS[i % 10], PLACES[(i / 10) % 6]))
        .collect()
}

fn two_families(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            if i % 2 == 0 {
                format!("what is the title of the {} on the {}", NOUNS[(i / 2) % 10], PLACES[(i / 20) % 6])
            } else {
                format!("why does the {} design use {} letters", NOUNS[(i / 2) % 10], COLORS[(i / 20) % 5])
            }
        })
        .collect()
}

fn small_probe() -> ProbeSpec {
    ProbeSpec {
        embed_dim: 4,
        train_steps: 5,
        ..ProbeSpec::default()
    }
}

fn div_of(instr: &[String], task2vec: bool, batch: &BatchSpec) -> Result<(f64, Vec<f64>), String> {
    let embedder = HashEmbedder::new(256);
    let vocab = ProbeVocab::build(instr.iter().map(String::as_str), 2048);
    let backend = if task2vec {
        Backend::Probe {
            spec: small_probe(),
            vocab: &vocab,
        }
    } else {
        Backend::MeanEmbedding(&embedder)
    };
    let (report, result) = diversity::measure(instr, batch, &backend, Pairing::AllPairs).map_err(|e| e.to_string())?;
    Ok((report.div, result.pairs.iter().map(|p| p.distance).collect()))
}

fn diversity_properties() -> Outcome {
    let batch = BatchSpec {
        batch_size: 8,
        num_batches: 30,
        seed: 1,
    };
    let mut notes = Vec::new();
    for task2vec in [false, true] {
        let name = if task2vec { "task2vec" } else { "embedding" };
        let same = vec!["what is the title of the book".to_string(); 40];
        let (d0, _) = div_of(&same, task2vec, &batch)?;
        ensure(d0.abs() < 1e-12, || format!("{name}: identical batches give {d0}"))?;
        let (d1, _) = div_of(&one_family(200), task2vec, &batch)?;
        let (d2, dists) = div_of(&two_families(200), task2vec, &batch)?;
        ensure(d2 > d1, || format!("{name}: two families {d2} <= one family {d1}"))?;
        if task2vec {
            ensure(dists.iter().all(|d| (-1e-12..=1.0 + 1e-12).contains(d)), || "distance outside [0,1]".into())?;
            ensure((0.0..=1.0).contains(&d2), || format!("div {d2} outside [0,1]"))?;
        }
        notes.push(format!("{name} one={d1:.4} two={d2:.4}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 2 * 500 * 8 + 500;
    let embeddings: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..dim).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let start = Instant::now();
    let r = diversity_coefficient(&embeddings, Pairing::AllPairs).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(r.pairs.len() == 19_900, || format!("{} pairs", r.pairs.len()))?;
    ensure(elapsed < Duration::from_secs(5), || format!("AllPairs took {elapsed:?}"))?;
    notes.push(format!("nb=200 AllPairs (dim {dim}) {:.2}s", elapsed.as_secs_f64()));
    Ok(notes.join("; "))
}

fn probe_gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let positions: Vec<(usize, usize)> = (0..16).map(|_| (rng.random_range(0..4), rng.random_range(0..4))).collect();
    let mut worst = 0.0f64;
    for trained in [false, true] {
        let mut probe = Probe::new(4, 3, 9);
        if trained {
            probe.train(&positions, 20, 0.5);
        }
        let analytic = probe.gradient(&positions);
        let h = 1e-5;
        for i in 0..probe.param_count() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = probe.loss(&positions);
            probe.params_mut()[i] = orig - h;
            let down = probe.loss(&positions);
            probe.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let scale = analytic[i].abs().max(numeric.abs());
            if scale < 1e-8 {
                ensure((analytic[i] - numeric).abs() < 1e-10, || format!("param {i}: {} vs {numeric}", analytic[i]))?;
                continue;
            }
            let rel = (analytic[i] - numeric).abs() / scale;
            worst = worst.max(rel);
            ensure(rel <= 1e-5, || format!("param {i}: analytic {} numeric {numeric} rel {rel:.2e}", analytic[i]))?;
        }
        for mode in [FisherMode::Empirical, FisherMode::Sampled] {
            let f = probe.fisher_diagonal(&positions, mode, 4);
            ensure(f.iter().all(|v| *v >= 0.0), || "negative Fisher entry".into())?;
        }
    }
    let texts = one_family(40);
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let vocab = ProbeVocab::build(refs.iter().copied(), 2048);
    for fisher in [FisherMode::Empirical, FisherMode::Sampled] {
        let spec = ProbeSpec {
            fisher,
            ..small_probe()
        };
        let a = probe_embedding(&refs, &spec, &vocab).map_err(|e| e.to_string())?;
        let b = probe_embedding(&refs, &spec, &vocab).map_err(|e| e.to_string())?;
        let same = a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("{fisher:?} embedding not bit-reproducible"))?;
    }
    Ok(format!("max relative error {worst:.1e}; Fisher entries >= 0; bit-reproducible"))
}

// ---------------------------------------------------------------- statistics

fn stats_exactness() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = support::write_config(dir.path(), "");
    let mut p = Pipeline::open(RunConfig::load(&cfg).unwrap(), false).unwrap();
    p.run_all(Some(PipelineStage::GenSelfexplain)).map_err(|e| e.to_string())?;
    let records = jsonl::read_records(&p.workdir().join("selfexplain.jsonl")).unwrap();
    ensure(records.len() == 50, || format!("{} records", records.len()))?;

    // Naive recount.
    let words = |s: &str| s.split_whitespace().count();
    let (mut images, mut enriched, mut caption_pairs, mut vqa) = (0usize, 0usize, 0usize, 0usize);
    let (mut cap_words, mut q_words, mut a_words) = (0usize, 0usize, 0usize);
    let mut q_hist: BTreeMap<usize, usize> = BTreeMap::new();
    let mut a_hist: BTreeMap<usize, usize> = BTreeMap::new();
    let bin = 5;
    for r in &records {
        images += 1;
        if let Some(c) = &r.enriched_caption {
            enriched += 1;
            cap_words += words(c);
        }
        for p in &r.pairs {
            if p.kind == PairKind::Caption {
                caption_pairs += 1;
            } else {
                vqa += 1;
                q_words += words(&p.question);
                a_words += words(&p.answer);
                *q_hist.entry(words(&p.question) - words(&p.question) % bin).or_default() += 1;
                *a_hist.entry(words(&p.answer) - words(&p.answer) % bin).or_default() += 1;
            }
        }
    }

    let s = stats::dataset_summary(&records);
    ensure(s.images == images && s.enriched_captions == enriched, || format!("{s:?}"))?;
    ensure(s.caption_pairs == caption_pairs && s.vqa_pairs == vqa, || format!("{s:?}"))?;
    ensure(s.words_per_caption() == Some(cap_words as f64 / enriched as f64), || "caption mean".into())?;
    ensure(s.words_per_question() == Some(q_words as f64 / vqa as f64), || "question mean".into())?;
    ensure(s.words_per_answer() == Some(a_words as f64 / vqa as f64), || "answer mean".into())?;

    let l = stats::length_stats(&records, bin).map_err(|e| e.to_string())?;
    ensure(l.question.bins == q_hist && l.answer.bins == a_hist, || "histograms differ".into())?;
    ensure(l.mean_question() == Some(q_words as f64 / vqa as f64), || "length mean".into())?;

    let report = stats::build_report(&records, &Taxonomy::default(), bin).map_err(|e| e.to_string())?;
    ensure(report.is_consistent(vqa), || "taxonomy sums inconsistent".into())?;
    let mut recount: BTreeMap<stats::Category, usize> = BTreeMap::new();
    for r in &records {
        for p in r.pairs.iter().filter(|p| p.kind != PairKind::Caption) {
            *recount.entry(stats::classify_question(&p.question, &Taxonomy::default()).0).or_default() += 1;
        }
    }
    ensure(recount == report.inner, || format!("{recount:?} vs {:?}", report.inner))?;
    Ok(format!(
        "{images} images, {vqa} VQA pairs, {:.1}/{:.1} words per question/answer, taxonomy {:?}",
        s.words_per_question().unwrap(),
        s.words_per_answer().unwrap(),
        report.inner
    ))
}

// ---------------------------------------------------------------- end to end

const COMPARED: [&str; 8] = [
    "output",
    "sweep",
    "stats",
    "diversity",
    "filtered.jsonl",
    "scored.jsonl",
    "audit.csv",
    "filter_summary.json",
];

fn snapshot(work: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for name in COMPARED {
        let p = work.join(name);
        if p.is_dir() {
            for f in support::files_under(&p) {
                out.insert(format!("{name}/{}", f.display()), std::fs::read(p.join(&f)).unwrap());
            }
        } else {
            out.insert(name.to_string(), std::fs::read(&p).unwrap());
        }
    }
    out
}

fn resumability() -> Outcome {
    let start = Instant::now();
    let run = |cfg: &Path, args: &[&str]| -> Result<String, String> {
        let o = support::curate(cfg, args);
        if o.status.success() {
            Ok(support::stdout(&o))
        } else {
            Err(format!("{args:?}: {}", support::stderr(&o)))
        }
    };

    let straight = tempfile::tempdir().unwrap();
    let cfg_a = support::write_config(straight.path(), "");
    run(&cfg_a, &["run"])?;
    let reference = snapshot(&straight.path().join("work"));

    // One process per stage, as if killed at every boundary.
    let staged = tempfile::tempdir().unwrap();
    let cfg_b = support::write_config(staged.path(), "");
    for stage in PipelineStage::ALL {
        run(&cfg_b, &[stage.as_str()])?;
    }
    let resumed = run(&cfg_b, &["run"])?;
    ensure(resumed.lines().all(|l| l.contains("up to date")), || format!("rerun not a no-op:\n{resumed}"))?;

    // `run` stopped after each stage in turn, with a torn manifest write in between.
    let stopped = tempfile::tempdir().unwrap();
    let cfg_c = support::write_config(stopped.path(), "");
    for stage in PipelineStage::ALL {
        run(&cfg_c, &["run", "--stop-after", stage.as_str()])?;
        std::fs::write(stopped.path().join("work").join(".manifest.json.tmp"), b"{\"trunc").unwrap();
    }

    for (name, dir) in [("staged", &staged), ("stopped", &stopped)] {
        let snap = snapshot(&dir.path().join("work"));
        ensure(snap.keys().eq(reference.keys()), || format!("{name}: different file sets"))?;
        for (k, v) in &reference {
            ensure(&snap[k] == v, || format!("{name}: {k} differs"))?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} artifacts byte-identical across 3 schedules, {:.1}s",
        reference.len(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- driver

/// Criteria that cannot hold as literally stated; reported but not counted.
const UNATTAINABLE: [&str; 1] = ["5b"];

fn main() {
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("1", "scoring matches brute-force oracle", oracle_grid),
        ("2", "mifd equals vfd times ifd", mifd_identity),
        ("3", "uniform mock gives ratios of exactly 1", uniform_baseline),
        ("4", "mifd keep fraction, invariance, monotonicity, sweep", filter_policy),
        ("5", "ffd band separates repeats and unrelated explanations", ffd_band),
        ("5b", "ffd band from whole-corpus quantiles", ffd_band_corpus_quantiles),
        ("6", "diversity coefficient properties", diversity_properties),
        ("7", "probe gradients and Fisher diagonal", probe_gradient_check),
        ("8", "statistics match naive recount", stats_exactness),
        ("9", "interrupted runs resume byte-identically", resumability),
    ];
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    let mut out = std::io::stdout().lock();
    for (id, name, f) in criteria {
        if filter.as_deref().is_some_and(|p| !name.contains(p) && id != p) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let line = match &result {
            Ok(detail) => format!("criterion {id:<3} PASS  {name}: {detail}"),
            Err(detail) if UNATTAINABLE.contains(&id) => {
                format!("criterion {id:<3} FAIL  {name}: {detail} (unattainable as stated; not counted)")
            }
            Err(detail) => {
                failed.push(id);
                format!("criterion {id:<3} FAIL  {name}: {detail}")
            }
        };
        writeln!(out, "{line}").unwrap();
    }
    if failed.is_empty() {
        writeln!(out, "acceptance: all counted criteria passed").unwrap();
    } else {
        writeln!(out, "acceptance: failed {}", failed.join(", ")).unwrap();
        std::process::exit(1);
    }
}
