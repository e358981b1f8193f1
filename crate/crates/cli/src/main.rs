use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flatdiff::harness::{self, EvalInputs, Metric, RunConfig, TrainOptions};
use flatdiff::Error;
use flatdiff_theory::{run_suite, SuiteConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_INVARIANT: u8 = 4;

#[derive(Parser)]
#[command(name = "flatdiff", version, about = "Train toy diffusion models and measure flatness and robustness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the training seed (train) or the evaluation seed (others).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
struct Target {
    /// Finished run directory; its stored config is used.
    #[arg(long, value_name = "DIR", conflicts_with = "checkpoint")]
    run: Option<PathBuf>,
    /// A single checkpoint, evaluated under `--config` or the defaults.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, metrics.csv and summary.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the newest resumable checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate a checkpoint or run with the listed metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Comma-separated metric names.
        #[arg(long, default_value = "loss")]
        metrics: String,
    },
    /// Distance to the data under 32/8/4-bit weights and several chain lengths.
    QuantizeSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// ‖ε_θ‖² on reference versus sampling trajectories.
    Exposure {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// LPF value and perturbation curve.
    Flatness {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Loss on a 2-D slice through parameter space.
    Surface {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
    },
    /// Sample quality under adversarial initial latents.
    Attack {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        target: Target,
        /// Overrides eval.attack.strength.
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Run the random-feature certification suite; exits 4 on any violation.
    TheoryVerify {
        #[command(flatten)]
        common: Common,
    },
    /// Merge sweep reports of several runs into one comparison table.
    Report {
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        #[arg(required = true, value_name = "RUN_DIR")]
        runs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Numeric { .. } | Error::SamplingDivergence { .. } | Error::AttackDivergence { .. } => EXIT_NUMERIC,
        _ => EXIT_FAILURE,
    }
}

fn load_config(common: &Common) -> flatdiff::Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn eval_inputs(common: &Common, target: &Target) -> flatdiff::Result<(EvalInputs, PathBuf)> {
    let mut inputs = match (&target.run, &target.checkpoint) {
        (Some(run), _) => {
            if common.config.is_some() {
                return Err(Error::Usage("--config cannot be combined with --run".into()));
            }
            EvalInputs::from_run(run)?
        }
        (None, Some(ck)) => EvalInputs::from_checkpoint(load_config(common)?, ck),
        (None, None) => return Err(Error::Usage("give --run DIR or --checkpoint PATH".into())),
    };
    if let Some(seed) = common.seed {
        inputs.cfg.eval.seed = seed;
    }
    let out = match (&common.out, &target.run) {
        (Some(o), _) => o.clone(),
        (None, Some(run)) => run.join(harness::train::files::REPORTS),
        (None, None) => inputs
            .primary
            .parent()
            .unwrap_or(Path::new("."))
            .join(harness::train::files::REPORTS),
    };
    Ok((inputs, out))
}

fn run_eval(common: &Common, target: &Target, metrics: &[Metric], tweak: impl FnOnce(&mut RunConfig)) -> flatdiff::Result<()> {
    let (mut inputs, out) = eval_inputs(common, target)?;
    tweak(&mut inputs.cfg);
    inputs.cfg.validate()?;
    for p in harness::evaluate(&inputs, metrics, &out)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> flatdiff::Result<u8> {
    match cli.command {
        Command::Train { common, resume, steps } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(o) = &common.out {
                cfg.out_dir = Some(o.clone());
            }
            cfg.validate()?;
            let dir = cfg
                .out_dir
                .clone()
                .ok_or_else(|| Error::Usage("no output directory; pass --out or set out_dir".into()))?;
            let opts = TrainOptions {
                resume,
                ..TrainOptions::default()
            };
            if let Some(s) = harness::train(&cfg, &dir, &opts)? {
                println!(
                    "{} seed {}: {} steps, eval loss {:.6} (EMA {:.6}, SWA {:.6}) in {:.1}s",
                    s.algorithm, s.seed, s.steps, s.final_eval_loss, s.ema_eval_loss, s.swa_eval_loss, s.wall_time_s
                );
            }
        }
        Command::Eval { common, target, metrics } => {
            let metrics = Metric::parse_list(&metrics)?;
            run_eval(&common, &target, &metrics, |_| {})?;
        }
        Command::QuantizeSweep { common, target } => run_eval(&common, &target, &[Metric::Sweep], |_| {})?,
        Command::Exposure { common, target } => run_eval(&common, &target, &[Metric::Exposure], |_| {})?,
        Command::Flatness { common, target } => {
            run_eval(&common, &target, &[Metric::Lpf, Metric::Curve], |_| {})?
        }
        Command::Surface { common, target } => run_eval(&common, &target, &[Metric::Surface], |_| {})?,
        Command::Attack {
            common,
            target,
            strength,
        } => run_eval(&common, &target, &[Metric::Attack], |c| {
            if let Some(s) = strength {
                c.eval.attack.strength = s;
            }
        })?,
        Command::TheoryVerify { common } => {
            let mut cfg: SuiteConfig = match &common.config {
                Some(p) => {
                    let s = std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?;
                    toml::from_str(&s).map_err(|e| Error::Usage(format!("{}: {e}", p.display())))?
                }
                None => SuiteConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let report = run_suite(&cfg)?;
            for c in &report.checks {
                println!(
                    "{} {:<22} measured {:.3e} tol {:.1e} ({} instances)",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.measured,
                    c.tolerance,
                    c.instances
                );
            }
            if let Some(out) = &common.out {
                std::fs::create_dir_all(out).map_err(|e| Error::Usage(format!("{}: {e}", out.display())))?;
                let path = out.join("theory.json");
                let s = serde_json::to_string_pretty(&report).map_err(|e| Error::Serde(e.to_string()))?;
                std::fs::write(&path, s).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
                println!("wrote {}", path.display());
            }
            if !report.passed {
                eprintln!("theory-verify: certification failed");
                return Ok(EXIT_INVARIANT);
            }
        }
        Command::Report { out, runs } => {
            let merged = harness::merge_reports(&runs);
            print!("{}", merged.summary());
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            let (csv, txt) = harness::write_report(&merged, &out)?;
            println!("wrote {} and {}", csv.display(), txt.display());
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
