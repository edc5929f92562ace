#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use specular::checkpoint::Checkpoint;
use specular::nets::{ModelConfig, Toggles};
use specular::train::{TrainConfig, TrainState};

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    /// The parsed trailing `RESULT {...}` line.
    pub fn result(&self) -> Value {
        let last = self.stdout.lines().last().unwrap_or_default();
        let json = last.strip_prefix("RESULT ").unwrap_or_else(|| panic!("no RESULT line in:\n{}", self.stdout));
        serde_json::from_str(json).unwrap()
    }
}

pub fn specular(args: &[&str]) -> Run {
    let out = Command::new(env!("CARGO_BIN_EXE_specular")).args(args).output().unwrap();
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        hfe_widths: [4, 4, 8, 8],
        gen_widths: [8, 8],
        disc_widths: [4, 4, 4, 4],
        toggles: Toggles::default(),
    }
}

/// Freshly initialized small checkpoint.
pub fn tiny_checkpoint(dir: &Path) -> PathBuf {
    let config = TrainConfig {
        model: tiny_model(),
        ..TrainConfig::default()
    };
    let state = TrainState::new(&config);
    let path = dir.join("tiny.ckpt");
    Checkpoint::new(config, state).save(&path).unwrap();
    path
}

/// Sorted file names of `dir`.
pub fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

pub fn same_tree(a: &Path, b: &Path) -> bool {
    let (la, lb) = (listing(a), listing(b));
    la == lb && la.iter().all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap())
}
