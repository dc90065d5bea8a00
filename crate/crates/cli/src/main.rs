use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hlgp::experiment::{self, ExperimentConfig, Profile};
use hlgp::store;
use hlgp::{ContinualState32, Error};

/// Exit status for a failed gradient check.
const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser)]
#[command(
    name = "hlgp",
    version,
    about = "Layer-grouped prompt tuning on a frozen ViT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config, merged over the profile it names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (training and stream).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Bundled profile used when no config is given.
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and freeze the backbone on the base split.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Run the task stream and write metrics plus the final state.
    Train {
        #[command(flatten)]
        common: Common,
        /// Frozen backbone checkpoint (default `<out>/backbone.ckpt`).
        #[arg(long)]
        backbone: Option<PathBuf>,
        /// Continue from a saved state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop before epoch E of task T, written `T:E`.
        #[arg(long, value_parser = parse_stop)]
        stop_at: Option<(usize, usize)>,
    },
    /// Re-score a saved state on every finished task.
    Eval {
        #[command(flatten)]
        common: Common,
        /// State checkpoint (default `<out>/state.ckpt`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Analytic vs finite-difference gradients on the tiny model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Shared-layer and PIE sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Trainable-parameter breakdown, desk and full scale.
    Params {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    match s {
        "easy" => Ok(Profile::Easy),
        "hard" => Ok(Profile::Hard),
        _ => Err(format!("unknown profile {s:?} (easy or hard)")),
    }
}

fn parse_stop(s: &str) -> Result<(usize, usize), String> {
    let (t, e) = s.split_once(':').ok_or("expected TASK:EPOCH")?;
    Ok((
        t.parse().map_err(|_| format!("bad task {t:?}"))?,
        e.parse().map_err(|_| format!("bad epoch {e:?}"))?,
    ))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) => 3,
        Error::Numeric(_) => 4,
        Error::Contract(_) | Error::Dimension(_) => 6,
        Error::Format(_)
        | Error::Version { .. }
        | Error::Checksum { .. }
        | Error::Truncated(_)
        | Error::Json(_) => 7,
        Error::Io(_) => 8,
    }
}

fn load_config(c: &Common) -> hlgp::Result<ExperimentConfig> {
    let mut cfg = match (&c.config, c.profile) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (Some(_), Some(_)) => {
            return Err(Error::Config("--profile and --config are exclusive".into()))
        }
        (None, p) => ExperimentConfig::profile(p.unwrap_or(Profile::Easy)),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out)?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> hlgp::Result<()> {
    store::write_atomic(path, text.as_bytes())
}

fn json<T: serde::Serialize>(v: &T) -> hlgp::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn run(cli: Cli) -> hlgp::Result<u8> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            let (backbone, report) = experiment::cmd_pretrain(&cfg)?;
            store::save_backbone(&backbone, &cfg.out.join("backbone.ckpt"))?;
            write(&cfg.out.join("pretrain.json"), &json(&report)?)?;
            println!(
                "pretrain: test accuracy {:.2}%, train {:.2}%, hash {}",
                report.test_accuracy, report.train_accuracy, report.backbone_hash
            );
        }
        Command::Train {
            common,
            backbone,
            resume,
            stop_at,
        } => {
            let cfg = load_config(&common)?;
            let bb = store::load_backbone::<f32>(
                &backbone.unwrap_or_else(|| cfg.out.join("backbone.ckpt")),
            )?;
            let resume = resume.map(|p| store::load_state::<f32>(&p)).transpose()?;
            let (state, summary) = experiment::cmd_train(&cfg, bb, resume, stop_at)?;
            store::save_state(&state, &cfg.out.join("state.ckpt"))?;
            if summary.completed {
                write(
                    &cfg.out.join("metrics.csv"),
                    &experiment::metrics_csv(&state.accuracy)?,
                )?;
            }
            write(&cfg.out.join("summary.json"), &json(&summary)?)?;
            match (summary.faa, summary.af) {
                (Some(faa), af) if summary.completed => {
                    println!(
                        "train: FAA {faa:.2}, AF {}",
                        af.map_or("n/a".into(), |a| format!("{a:.2}"))
                    )
                }
                _ => println!("train: stopped after {} finished tasks", summary.tasks_done),
            }
        }
        Command::Eval { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let state: ContinualState32 =
                store::load_state(&checkpoint.unwrap_or_else(|| cfg.out.join("state.ckpt")))?;
            let report = experiment::cmd_eval(&cfg, &state)?;
            write(&cfg.out.join("eval.json"), &json(&report)?)?;
            println!(
                "eval: {} tasks, mean accuracy {:.2}%",
                report.tasks, report.mean_accuracy
            );
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let report = experiment::cmd_gradcheck(&cfg.gradcheck)?;
            write(&cfg.out.join("gradcheck.json"), &json(&report)?)?;
            println!(
                "gradcheck: {} scalars, max relative error {:.3e} (tolerance {:e}) {}",
                report.scalars,
                report.max_rel_err,
                report.tolerance,
                if report.passed { "PASS" } else { "FAIL" }
            );
            if !report.passed {
                return Ok(EXIT_GRADCHECK);
            }
        }
        Command::Ablate { common, backbone } => {
            let cfg = load_config(&common)?;
            let bb = store::load_backbone::<f32>(
                &backbone.unwrap_or_else(|| cfg.out.join("backbone.ckpt")),
            )?;
            let rows = experiment::cmd_ablate(&cfg, &bb)?;
            let csv = experiment::ablation_csv(&rows);
            write(&cfg.out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Params { common } => {
            let cfg = load_config(&common)?;
            let report = experiment::cmd_params(&cfg)?;
            let csv = experiment::params_csv(&report);
            write(&cfg.out.join("params.csv"), &csv)?;
            write(&cfg.out.join("params.json"), &json(&report)?)?;
            print!("{csv}");
            for (name, r) in &report.ratios {
                println!("{name}: hlgp_pie / independent_layerwise = {r:.4}");
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
