//! Drives the `sage` binary inside scratch directories.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Small enough for a full pipeline in seconds, large enough to cluster.
pub const TINY_CONFIG: &str = r#"
seed = 3

[backbone]
layers = 1
dim = 16
tokens = 3
heads = 2
input_dim = 8
hidden = 32

[train]
lr = 0.002
epochs_source = 3
epochs_adapt = 2
epochs_gate = 1

[data]
latent_dim = 6

[[data.sources]]
n_identities = 12
samples_per_identity = 8
n_cameras = 2

[[data.sources]]
n_identities = 12
samples_per_identity = 8
n_cameras = 2

[data.target]
n_identities = 20
eval_identities = 8
samples_per_identity = 8
n_cameras = 2
"#;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    fn from(out: Output) -> Self {
        Self {
            code: out.status.code().unwrap_or(-1),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    pub fn ok(self) -> Self {
        assert_eq!(self.code, 0, "stdout:\n{}\nstderr:\n{}", self.stdout, self.stderr);
        self
    }
}

pub fn sage(dir: &Path, args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_sage"))
        .current_dir(dir)
        .env("SAGE_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs");
    Run::from(out)
}

/// Writes `config.toml` into `dir` and returns its path as a string.
pub fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

/// Every file under `dir`, relative path and bytes, sorted by path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// gen-data, pretrain every source, adapt, merge-train, then eval every
/// checkpoint. Returns the eval lines in order.
pub fn full_pipeline(dir: &Path, config: &str, sources: usize) -> Vec<String> {
    let cfg = write_config(dir, config);
    sage(dir, &["gen-data", "--config", &cfg]).ok();
    for s in 0..sources {
        sage(dir, &["pretrain", "--config", &cfg, "--source", &s.to_string()]).ok();
    }
    sage(dir, &["adapt", "--config", &cfg, "--parallel-experts", "2"]).ok();
    sage(dir, &["merge-train", "--config", &cfg]).ok();
    let mut lines = Vec::new();
    let mut models: Vec<String> = (0..sources)
        .flat_map(|s| [format!("source{s}"), format!("expert{s}")])
        .collect();
    models.push("merged".into());
    for m in models {
        let path = format!("models/{m}.sage");
        let run = sage(dir, &["eval", "--config", &cfg, "--model", &path]).ok();
        lines.extend(run.stdout.lines().filter(|l| l.starts_with("eval ")).map(str::to_owned));
    }
    lines
}
