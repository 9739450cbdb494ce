#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name).canonicalize().unwrap()
}

/// Config for the five-dialogue corpus with a small, fast-converging model.
pub fn micro_config(train: serde_json::Value) -> serde_json::Value {
    let mut base = serde_json::json!({
        "embed_dim": 32, "hidden_dim": 32, "attn_dim": 32, "learning_rate": 0.005,
        "batch_size": 2, "dropout_rate": 0.0, "min_count": 1, "epochs": 150, "seed": 1
    });
    base.as_object_mut().unwrap().extend(train.as_object().unwrap().clone());
    serde_json::json!({
        "corpus": {
            "format": "camrest",
            "train": fixture("camrest_micro.json"),
            "kb": fixture("camrest_micro_db.json"),
            "manifest": { "train": 5, "dev": 0, "test": 0, "kb_records": 6 }
        },
        "train": base
    })
}

pub fn write_config(dir: &Path, name: &str, value: &serde_json::Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn fsdm(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fsdm"));
    cmd.args(args).env("RUST_LOG", "warn");
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("FSDM_")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub struct Trained {
    pub dir: tempfile::TempDir,
    pub config: PathBuf,
    pub checkpoint: PathBuf,
}

/// One overfit training run shared by every test in the binary.
pub fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = write_config(dir.path(), "micro.json", &micro_config(serde_json::json!({})));
        let out = dir.path().join("run");
        let o = fsdm(&["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        Trained { checkpoint: out.join("best"), config, dir }
    })
}
