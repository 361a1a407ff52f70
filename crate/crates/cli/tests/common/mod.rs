#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use siamman::model::ModelConfig;
use siamman_cli::RunConfig;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_siamman"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Tiny model, few short phases, small data set.
pub fn quick_config() -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::tiny(),
        ..RunConfig::default()
    };
    cfg.data.tracks = 4;
    cfg.synthetic.frames_per_track = 20;
    cfg.train.steps_per_epoch = 1;
    cfg.train.batch_size = 2;
    cfg.train.grad_clip = 2.0;
    for p in &mut cfg.train.phases {
        p.epochs = 1;
    }
    cfg
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

/// Every file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}
