use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use siamman::evaluation::Protocol;
use siamman_cli::{cmd_gradcheck, cmd_score, cmd_synth, cmd_track, cmd_train, CliResult, RunConfig};

/// Siamese tracker: verification, desk training, tracking and scoring.
#[derive(Parser)]
#[command(name = "siamman", version)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every op and head.
    Gradcheck {
        /// Only cases whose name contains this.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = siamman::gradsuite::DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Three-stage training on synthetic tracks.
    Train {
        /// Output directory for checkpoints and the log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Tracks a box through a directory of numbered PPM frames.
    Track {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sequence: PathBuf,
        /// First-frame box as x1,y1,x2,y2.
        #[arg(long, value_parser = parse_list::<4>)]
        init: [f64; 4],
        /// Trajectory CSV; the JSON sidecar goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores trajectories against ground truth.
    Score {
        #[arg(long)]
        protocol: Protocol,
        /// Trajectory file; repeat for several sequences.
        #[arg(long, required = true)]
        traj: Vec<PathBuf>,
        /// Ground-truth file, paired with --traj in order.
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        /// Directory for report.json and curve CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a constant-velocity synthetic sequence and its ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        frames: usize,
        /// Pixels per frame as vx,vy.
        #[arg(long, value_parser = parse_list::<2>, default_value = "2,1")]
        velocity: [f64; 2],
    },
    /// Prints the effective configuration as TOML.
    Config,
}

/// `N` comma-separated numbers.
fn parse_list<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected {N} comma-separated values, got {}", v.len()))
}

enum Outcome {
    Ok,
    VerificationFailed,
}

fn run(cli: Cli) -> CliResult<Outcome> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    match cli.command {
        Command::Gradcheck {
            filter,
            seeds,
            inject_fault,
        } => {
            let ok = cmd_gradcheck(filter.as_deref(), seeds, inject_fault.as_deref(), &mut std::io::stdout())?;
            return Ok(if ok { Outcome::Ok } else { Outcome::VerificationFailed });
        }
        Command::Train { out } => {
            let last = cmd_train(&cfg, &out)?;
            println!("final checkpoint {}", last.display());
        }
        Command::Track {
            checkpoint,
            sequence,
            init,
            out,
        } => {
            let s = cmd_track(&cfg, &checkpoint, &sequence, init, &out)?;
            println!("{} frames, mean score {:.4}", s.frames, s.mean_score);
        }
        Command::Score { protocol, traj, gt, out } => {
            if traj.len() != gt.len() {
                return Err(siamman_cli::CliError::Config(format!(
                    "{} trajectories but {} ground-truth files",
                    traj.len(),
                    gt.len()
                )));
            }
            let pairs: Vec<_> = traj.into_iter().zip(gt).collect();
            let report = cmd_score(protocol, &pairs, cfg.eao, &out)?;
            println!("{}", serde_json::to_string(&report).expect("report serializes"));
        }
        Command::Synth { out, frames, velocity } => {
            let seed = cli.seed.unwrap_or(cfg.data.seed);
            let init = cmd_synth(&cfg.synthetic, frames, (velocity[0], velocity[1]), seed, &out)?;
            println!("{:.4},{:.4},{:.4},{:.4}", init[0], init[1], init[2], init[3]);
        }
        Command::Config => print!("{}", cfg.to_toml()?),
    }
    Ok(Outcome::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::VerificationFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
