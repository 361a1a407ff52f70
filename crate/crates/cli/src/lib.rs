//! Command implementations behind the `siamman` binary.
//!
//! Every command takes a [`RunConfig`] (TOML, unknown keys rejected) and
//! writes plain files: checkpoints in the tensor container format, training
//! logs as JSON lines, trajectories as corner-form CSV.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use siamman::anchors::BBox;
use siamman::evaluation::{self, EaoRange, MetricReport, Protocol, Trajectory};
use siamman::gradsuite::{self, CaseResult};
use siamman::image::{load_sequence, save_sequence};
use siamman::inference::{track_sequence, FusionConfig};
use siamman::model::{ModelConfig, SiamMan};
use siamman::params::ParamStore;
use siamman::synthetic::{constant_velocity_track, SyntheticConfig, TrackStore};
use siamman::training::{train_stages, TrainConfig};

/// Digits after the decimal point in trajectory files.
pub const TRAJ_PRECISION: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] siamman::Error),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

impl CliError {
    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Training data: how many synthetic tracks and from which seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub tracks: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { tracks: 24, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub synthetic: SyntheticConfig,
    pub data: DataConfig,
    pub eao: EaoRange,
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.fusion.validate()?;
        self.train.validate()?;
        if self.data.tracks == 0 {
            return Err(CliError::Config("data.tracks must be positive".into()));
        }
        Ok(())
    }

    /// Overrides the training and data seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.data.seed = seed;
        self.model.backbone.seed = seed;
        self
    }
}

/// Runs the finite-difference suite; `Ok(false)` when any case fails.
pub fn cmd_gradcheck(filter: Option<&str>, seeds: usize, fault: Option<&str>, out: &mut impl Write) -> CliResult<bool> {
    let fault = fault.map(gradsuite::parse_op_kind).transpose()?;
    gradsuite::select(filter)?;
    let results = gradsuite::run_suite(filter, seeds, fault)?;
    write_gradcheck_report(&results, out).map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
    Ok(results.iter().all(CaseResult::passed))
}

fn write_gradcheck_report(results: &[CaseResult], out: &mut impl Write) -> std::io::Result<()> {
    for r in results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(out, "{:<20} seeds {:>3}  max rel err {:.3e}  {status}", r.name, r.seeds, r.max_rel_error)?;
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    writeln!(out, "{} cases, {failed} failed (tolerance {:e})", results.len(), gradsuite::TOLERANCE)
}

pub fn stage_checkpoint(out_dir: &Path, stage: usize) -> PathBuf {
    out_dir.join(format!("stage{stage}.ckpt"))
}

pub fn write_params(path: &Path, params: &ParamStore) -> CliResult<()> {
    let f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(f);
    params.write(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_params(path: &Path) -> CliResult<ParamStore> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(ParamStore::read(&mut f)?)
}

/// Trains from scratch on synthetic tracks. Writes `train.jsonl`,
/// `stage{n}.ckpt` per stage and `config.toml` under `out_dir`.
/// Returns the path of the last checkpoint.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> CliResult<PathBuf> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    // open the log first so an unwritable destination fails before any work
    let log_path = out_dir.join("train.jsonl");
    let log = fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = BufWriter::new(log);
    let cfg_path = out_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| CliError::io(&cfg_path, e))?;

    let dataset = TrackStore::generate(&cfg.synthetic, cfg.data.tracks, cfg.data.seed);
    let mut model = SiamMan::new(cfg.model.clone())?;
    let mut io_err = None;
    let outcome = train_stages(&mut model, &cfg.train, &dataset, |r| {
        if io_err.is_none() {
            let line = serde_json::to_string(r).expect("records serialize");
            if let Err(e) = writeln!(log, "{line}") {
                io_err = Some(e);
            }
        }
    })?;
    if let Some(e) = io_err {
        return Err(CliError::io(&log_path, e));
    }
    log.flush().map_err(|e| CliError::io(&log_path, e))?;
    let mut last = None;
    for (stage, params) in &outcome.checkpoints {
        let p = stage_checkpoint(out_dir, *stage);
        write_params(&p, params)?;
        last = Some(p);
    }
    last.ok_or_else(|| CliError::Config("no training phases configured".into()))
}

/// Sidecar metadata written next to a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackSummary {
    pub frames: usize,
    pub init: [f64; 4],
    pub mean_score: f64,
    pub fusion: FusionConfig,
}

/// Tracks `init` (corner form) through the frames in `sequence`; writes the
/// CSV trajectory to `out` and a JSON sidecar to `out` with `.json` appended.
pub fn cmd_track(cfg: &RunConfig, checkpoint: &Path, sequence: &Path, init: [f64; 4], out: &Path) -> CliResult<TrackSummary> {
    cfg.validate()?;
    let params = read_params(checkpoint)?;
    let model = SiamMan::with_params(cfg.model.clone(), params)?;
    let frames = load_sequence(sequence)?;
    let init_box = BBox::from_corners(init[0], init[1], init[2], init[3])?;
    let states = track_sequence(&model, &frames, init_box, &cfg.fusion)?;
    let traj = Trajectory::with_confidences(
        states.iter().map(|s| Some(s.bbox)).collect(),
        states.iter().map(|s| s.score).collect(),
    )?;
    fs::write(out, traj.to_csv(TRAJ_PRECISION)).map_err(|e| CliError::io(out, e))?;
    let summary = TrackSummary {
        frames: states.len(),
        init,
        mean_score: states.iter().map(|s| s.score).sum::<f64>() / states.len() as f64,
        fusion: cfg.fusion.clone(),
    };
    let side = sidecar_path(out);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&side, json + "\n").map_err(|e| CliError::io(&side, e))?;
    Ok(summary)
}

pub fn sidecar_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Worker count for scoring: `SIAMMAN_THREADS` when set, else available cores.
pub fn scoring_threads() -> usize {
    std::env::var("SIAMMAN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn load_pairs(pairs: &[(PathBuf, PathBuf)], threads: usize) -> CliResult<Vec<(Trajectory, Trajectory)>> {
    let chunk = pairs.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|c| {
                s.spawn(move || {
                    c.iter()
                        .map(|(t, g)| Ok((Trajectory::load(t)?, Trajectory::load(g)?)))
                        .collect::<CliResult<Vec<_>>>()
                })
            })
            .collect();
        let mut all = Vec::with_capacity(pairs.len());
        for h in handles {
            all.extend(h.join().expect("scoring worker panicked")?);
        }
        Ok(all)
    })
}

/// Scores trajectory/ground-truth file pairs. Writes `report.json` and one
/// `{curve}.csv` per curve under `out_dir`.
pub fn cmd_score(protocol: Protocol, pairs: &[(PathBuf, PathBuf)], eao: EaoRange, out_dir: &Path) -> CliResult<MetricReport> {
    let loaded = load_pairs(pairs, scoring_threads())?;
    let (report, curves) = evaluation::score(protocol, &loaded, eao)?;
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&path, json + "\n").map_err(|e| CliError::io(&path, e))?;
    for (name, csv) in curves {
        let p = out_dir.join(format!("{name}.csv"));
        fs::write(&p, csv).map_err(|e| CliError::io(&p, e))?;
    }
    Ok(report)
}

/// Renders a constant-velocity synthetic sequence into `out_dir` with its
/// ground truth in `groundtruth.txt`; returns the first-frame box in corners.
pub fn cmd_synth(cfg: &SyntheticConfig, frames: usize, velocity: (f64, f64), seed: u64, out_dir: &Path) -> CliResult<[f64; 4]> {
    use rand::SeedableRng;
    if frames == 0 {
        return Err(CliError::Config("frames must be positive".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let track = constant_velocity_track(cfg, frames, velocity, &mut rng);
    save_sequence(out_dir, &track.render_all())?;
    let gt = Trajectory::new(track.boxes.iter().map(|b| Some(*b)).collect());
    let p = out_dir.join("groundtruth.txt");
    fs::write(&p, gt.to_csv(TRAJ_PRECISION)).map_err(|e| CliError::io(&p, e))?;
    Ok(track.boxes[0].corners())
}
