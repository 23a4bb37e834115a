#![allow(dead_code)]

pub mod oracle;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

/// Writes a mock-provider config for the fixture corpus into `dir`.
pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let corpus = fixture("corpus.jsonl");
    let text = format!(
        r#"seed = 1
parallelism = 4
timestamp = "2026-01-01T00:00:00Z"
{extra}

[paths]
input = "{}"
workdir = "work"

[providers.chat]
kind = "scripted"

[providers.loss]
kind = "mock"
mode = {{ kind = "copycat", p_repeat = 0.7 }}

[providers.embed]
kind = "hash"
dim = 64

[stages]
sweep = true

[diversity]
backend = "task2vec"
batch_size = 16
num_batches = 12

[diversity.probe]
embed_dim = 4
train_steps = 5
"#,
        corpus.display()
    );
    let path = dir.join("curate.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn curate(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Every file under `root`, as sorted relative paths.
pub fn files_under(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(&p, root, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
