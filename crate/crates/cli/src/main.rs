use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use steerbench::pipeline::{
    self, audit_route_stage, audit_score_stage, audit_train_stage, derive_stage, evaluate_stage,
    irt_stage, report_stage, run_selfcheck, stats_stage, sweep_stage, Config, IrtInput,
    PipelineError, RouteInputs, StageContext,
};
use steerbench::schema::Emotion;

#[derive(Parser, Debug)]
#[command(
    name = "steerbench",
    version,
    about = "Emotion steering benchmark: derive, sweep, evaluate, test, calibrate, audit"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Steering strengths, comma separated or repeated.
    #[arg(long = "alpha", global = true, value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Emotions to steer toward, comma separated or repeated.
    #[arg(long = "emotion", global = true, value_delimiter = ',')]
    emotions: Vec<Emotion>,
    /// Control layers, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    layers: Vec<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive steering vectors from activation dumps (files or directories of *.bin).
    Derive {
        #[arg(required = true)]
        dumps: Vec<PathBuf>,
    },
    /// Run the mock model over items under every condition.
    Sweep {
        #[arg(long)]
        steering: PathBuf,
        /// Items JSONL; synthesized when omitted.
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// NDM/NAD per cell and the results grid.
    Evaluate {
        #[command(flatten)]
        log: LogArgs,
    },
    /// McNemar, BH, CMH and Breslow-Day per cell; optional confound CV.
    Stats {
        #[command(flatten)]
        log: LogArgs,
        /// JSON {features, labels} for the random-forest confound audit.
        #[arg(long)]
        confound: Option<PathBuf>,
    },
    /// IRT calibration, validity gates and the item-drift regression.
    Irt {
        #[arg(long, required_unless_present = "responses")]
        items: Option<PathBuf>,
        #[arg(long, required_unless_present = "responses")]
        decisions: Option<PathBuf>,
        #[arg(long)]
        directions: Option<PathBuf>,
        /// Response matrix JSON instead of a decision log.
        #[arg(long, conflicts_with_all = ["items", "decisions"])]
        responses: Option<PathBuf>,
    },
    /// Gatekeeper audit of reasoning text.
    Audit {
        #[command(subcommand)]
        command: AuditCommand,
    },
    /// Render report.txt from metrics.json and stats.json.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        /// Self-report margin JSONL.
        #[arg(long)]
        margins: Option<PathBuf>,
    },
    /// Synthetic end-to-end run, twice, compared byte for byte.
    Selfcheck,
}

#[derive(Subcommand, Debug)]
enum AuditCommand {
    /// Fit gatekeepers on CoT records labeled by decision change from neutral
    Train {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        decisions: PathBuf,
    },
    /// Score CoT records and flag those at or above each model's threshold
    Score {
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        decisions: PathBuf,
    },
    /// Substitute second-turn decisions for flagged records and compare NDM
    Route {
        #[arg(long)]
        models: PathBuf,
        #[command(flatten)]
        log: LogArgs,
        /// Second-turn decisions JSONL for flagged records.
        #[arg(long)]
        second_turn: PathBuf,
        /// Override every model's threshold.
        #[arg(long)]
        tau: Option<f64>,
    },
}

#[derive(Args, Debug)]
struct LogArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    decisions: PathBuf,
    /// Direction table JSON; the bundled table when omitted.
    #[arg(long)]
    directions: Option<PathBuf>,
}

fn load_config(global: &Global, selfcheck: bool) -> Result<Config, PipelineError> {
    let mut cfg = match &global.config {
        Some(p) => Config::load(p)?,
        None if selfcheck => Config::selfcheck(),
        None => Config::default(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if !global.alphas.is_empty() {
        cfg.alphas = global.alphas.clone();
    }
    if !global.emotions.is_empty() {
        cfg.emotions = global.emotions.clone();
    }
    if !global.layers.is_empty() {
        cfg.layers = Some(global.layers.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    if let Some(jobs) = cli.global.jobs {
        pipeline::configure_threads(jobs)?;
    }
    let selfcheck = matches!(cli.command, Command::Selfcheck);
    let config = load_config(&cli.global, selfcheck)?;
    let ctx = StageContext::new(config, cli.global.config.clone(), &cli.global.out);
    let out = |m: steerbench::pipeline::RunManifest| {
        for f in &m.outputs {
            println!("{}", ctx.out_dir.join(&f.path).display());
        }
    };
    match cli.command {
        Command::Derive { dumps } => out(derive_stage(&ctx, &dumps)?),
        Command::Sweep { steering, items } => out(sweep_stage(&ctx, &steering, items.as_deref())?),
        Command::Evaluate { log } => out(evaluate_stage(
            &ctx,
            &log.items,
            &log.decisions,
            log.directions.as_deref(),
        )?),
        Command::Stats { log, confound } => out(stats_stage(
            &ctx,
            &log.items,
            &log.decisions,
            log.directions.as_deref(),
            confound.as_deref(),
        )?),
        Command::Irt {
            items,
            decisions,
            directions,
            responses,
        } => {
            let input = match (&responses, &items, &decisions) {
                (Some(r), _, _) => IrtInput::Matrix(r),
                (None, Some(i), Some(d)) => IrtInput::Log {
                    items: i,
                    decisions: d,
                    directions: directions.as_deref(),
                },
                _ => {
                    return Err(PipelineError::Usage(
                        "irt needs --items and --decisions, or --responses".into(),
                    ))
                }
            };
            out(irt_stage(&ctx, input)?)
        }
        Command::Audit { command } => match command {
            AuditCommand::Train { items, decisions } => {
                out(audit_train_stage(&ctx, &items, &decisions)?)
            }
            AuditCommand::Score {
                models,
                items,
                decisions,
            } => out(audit_score_stage(&ctx, &models, &items, &decisions)?),
            AuditCommand::Route {
                models,
                log,
                second_turn,
                tau,
            } => out(audit_route_stage(
                &ctx,
                RouteInputs {
                    models: &models,
                    items: &log.items,
                    decisions: &log.decisions,
                    second_turn: &second_turn,
                    directions: log.directions.as_deref(),
                    tau,
                },
            )?),
        },
        Command::Report {
            metrics,
            stats,
            margins,
        } => out(report_stage(&ctx, &metrics, &stats, margins.as_deref())?),
        Command::Selfcheck => {
            let outcome = run_selfcheck(&ctx)?;
            for c in &outcome.checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            let runtimes: Vec<String> = outcome
                .runtime_secs
                .iter()
                .map(|s| format!("{s:.1}s"))
                .collect();
            println!("runs: {}", runtimes.join(", "));
            if !outcome.passed {
                return Err(PipelineError::Selfcheck(format!(
                    "see {}",
                    Path::new(&ctx.out_dir).join("selfcheck.json").display()
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STEERBENCH_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.diagnostic());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
