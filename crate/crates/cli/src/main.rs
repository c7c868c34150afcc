use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vqanon::corpus::Corpus;
use vqanon::f0::F0Track;
use vqanon::harness::{
    default_condition_name, dump_features, eval_model, f0_transform, gen_data, run_sweep, summarize,
    train_model, ConfigFile, ExperimentPlan, RunOutcome, FEATURES_DIR,
};
use vqanon::model::{BottleneckModel, Tap};
use vqanon::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vqanon",
    version,
    about = "Vector-quantized speaker anonymization lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with optional [corpus], [model] and [f0] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a corpus; writes model.ckpt and loss.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out utterances of a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "post_vq")]
        tap: Tap,
        /// Label for the report; defaults to no-vq or vq-<V>.
        #[arg(long)]
        condition: Option<String>,
        /// Also write per-utterance feature matrices under <out>/features.
        #[arg(long)]
        dump_features: bool,
    },
    /// Run a full experiment plan.
    Sweep {
        /// Experiment plan; the bundled privacy sweep when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces every condition's seed list with this one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; overrides the plan's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Shift an F0 track to target statistics, optionally adding noise.
    F0 {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        target_mean: Option<f64>,
        #[arg(long)]
        target_std: Option<f64>,
        #[arg(long)]
        snr_db: Option<f64>,
        /// Signal power for the SNR: variance or mean_square.
        #[arg(long)]
        power: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::GenData { common, out } => {
            let mut cfg = ConfigFile::read_or_default(common.config.as_deref())?.corpus;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let corpus = gen_data(&cfg, &out)?;
            println!(
                "wrote {} utterances from {} speakers to {}",
                corpus.utterances.len(),
                corpus.speakers.len(),
                out.display()
            );
        }
        Command::Train { common, corpus, out } => {
            let mut cfg = ConfigFile::read_or_default(common.config.as_deref())?.model;
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let corpus = Corpus::load(&corpus)?;
            let t = train_model(&corpus, &cfg, &out)?;
            if let Some(last) = t.history.last() {
                println!(
                    "steps={} task={} l_vq={} total={}",
                    t.history.len(),
                    last.loss.task_loss,
                    last.loss.l_vq,
                    last.loss.total
                );
            }
        }
        Command::Eval {
            corpus,
            checkpoint,
            out,
            tap,
            condition,
            dump_features: dump,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let model = BottleneckModel::load(&checkpoint)?;
            let condition = condition.unwrap_or_else(|| default_condition_name(model.config().codebook_size));
            let ev = eval_model(&model, &corpus, tap, &condition, &out)?;
            if dump {
                dump_features(&model, &corpus, tap, &out.join(FEATURES_DIR))?;
            }
            print!("{}", ev.report.to_text()?);
        }
        Command::Sweep { config, seed, out } => {
            let mut plan = match &config {
                Some(path) => ExperimentPlan::read(path)?,
                None => ExperimentPlan::default_sweep(),
            };
            if let Some(seed) = seed {
                plan.override_seed(seed);
            }
            let out = out
                .or_else(|| plan.out.clone().map(|o| resolve(config.as_deref(), o)))
                .ok_or_else(|| Error::Config("no output directory: pass --out or set `out`".into()))?;
            let result = run_sweep(&plan, &out)?;
            let reports: Vec<_> = result.reports().cloned().collect();
            println!("condition V runs content_err probe_acc eer d_sys (medians)");
            for s in summarize(&reports) {
                println!(
                    "{} {} {} {:.4} {:.4} {:.4} {:.4}",
                    s.condition,
                    s.codebook_size.map_or_else(|| "none".into(), |v| v.to_string()),
                    s.runs,
                    s.content_error_rate,
                    s.speaker_probe_accuracy,
                    s.eer,
                    s.d_sys
                );
            }
            for row in &result.f0 {
                println!("{}", row.csv());
            }
            for r in &result.runs {
                if let RunOutcome::Failed {
                    condition,
                    seed,
                    message,
                    ..
                } = r
                {
                    eprintln!("failed: {condition} seed {seed}: {message}");
                }
            }
            return Ok(result.exit_code() as u8);
        }
        Command::F0 {
            common,
            input,
            out,
            target_mean,
            target_std,
            snr_db,
            power,
        } => {
            let mut cfg = ConfigFile::read_or_default(common.config.as_deref())?.f0;
            cfg.target_mean = target_mean.or(cfg.target_mean);
            cfg.target_std = target_std.or(cfg.target_std);
            cfg.awgn_snr_db = snr_db.or(cfg.awgn_snr_db);
            cfg.signal_power = power.or(cfg.signal_power);
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            let track = F0Track::read(&input)?;
            let outcome = f0_transform(&track, &cfg)?;
            outcome.track.write(&out)?;
            println!("{}", outcome.stats_line());
        }
    }
    Ok(0)
}

/// A relative `out` in a plan file is taken relative to the plan.
fn resolve(plan: Option<&Path>, out: PathBuf) -> PathBuf {
    match plan.and_then(Path::parent) {
        Some(dir) if out.is_relative() => dir.join(out),
        _ => out,
    }
}
