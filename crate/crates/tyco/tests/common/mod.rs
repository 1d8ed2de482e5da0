#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tyco_core::model::ModelConfig;

/// A run config with the tiny model and a small corpus.
pub fn tiny_config(out: &Path, steps: usize) -> Value {
    json!({
        "data": { "sizes": [40, 40, 40, 40] },
        "model": ModelConfig::tiny(),
        "schedule": { "stage_i_steps": steps, "stage_ii_steps": steps, "batch_size": 4, "lr": 0.003 },
        "out": out,
    })
}

pub fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn tyco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tyco")).args(args).output().expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
