//! End-to-end commands: corpus generation, training, evaluation, sweeps and
//! F0 transforms. Each command is a pure function of its configuration;
//! seeds come from configuration files or flags, never from the clock.

pub mod eval;
mod f0_eval;
mod plan;

pub use f0_eval::{f0_experiment, F0Row, F0_CSV_HEADER};
pub use plan::{Condition, ExperimentPlan, F0Plan, CAPACITY_SWEEP, DEFAULT_SWEEP};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2D;
use crate::corpus::{generate_corpus, push_reals, split_corpus, utterance_path, Corpus, CorpusConfig};
use crate::error::{Error, Result};
use crate::f0::{add_awgn_with, f0_stats, linear_shift, measured_snr, F0Stats, F0Track, SignalPower};
use crate::metrics::{csv_row, MetricsReport, CSV_HEADER};
use crate::model::{loss_history_csv, train, BottleneckModel, ModelConfig, StepRecord, Tap};
use eval::{evaluate, Evaluation};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const FAILURES_FILE: &str = "failures.txt";
pub const PROVENANCE_FILE: &str = "provenance.txt";
pub const F0_REPORT_FILE: &str = "f0_report.csv";
pub const FEATURES_DIR: &str = "features";

/// Settings for the `f0` command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct F0CommandConfig {
    pub target_mean: Option<f64>,
    pub target_std: Option<f64>,
    pub awgn_snr_db: Option<f64>,
    /// `"variance"` (default) or `"mean_square"`.
    pub signal_power: Option<String>,
    pub seed: u64,
}

/// A configuration file: any subset of the `[corpus]`, `[model]` and `[f0]`
/// sections. Missing sections take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub f0: F0CommandConfig,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Defaults when `path` is `None`.
    pub fn read_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::read)
    }
}

pub fn parse_signal_power(name: Option<&str>) -> Result<SignalPower> {
    match name {
        None | Some("variance") => Ok(SignalPower::Variance),
        Some("mean_square") => Ok(SignalPower::MeanSquare),
        Some(other) => Err(Error::Config(format!(
            "signal_power must be variance or mean_square, got `{other}`"
        ))),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Generates a corpus and writes it under `out`.
pub fn gen_data(config: &CorpusConfig, out: &Path) -> Result<Corpus> {
    let corpus = generate_corpus(config)?;
    corpus.save(out)?;
    Ok(corpus)
}

pub struct TrainOutcome {
    pub model: BottleneckModel,
    pub history: Vec<StepRecord>,
}

/// Trains on the training side of the corpus split and writes
/// `model.ckpt` and `loss.csv` under `out`.
pub fn train_model(corpus: &Corpus, config: &ModelConfig, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let split = split_corpus(corpus, config.train_fraction, config.seed)?;
    let mut model = BottleneckModel::for_corpus(config.clone(), corpus, &split.train)?;
    let history = train(&mut model, corpus, &split.train)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(LOSS_FILE), loss_history_csv(&history))?;
    Ok(TrainOutcome { model, history })
}

pub fn default_condition_name(codebook_size: Option<usize>) -> String {
    codebook_size.map_or_else(|| "no-vq".to_string(), |v| format!("vq-{v}"))
}

/// Evaluates on the held-out side of the split the model was trained with
/// and writes the report and its supporting files under `out`.
pub fn eval_model(
    model: &BottleneckModel,
    corpus: &Corpus,
    tap: Tap,
    condition: &str,
    out: &Path,
) -> Result<Evaluation> {
    let cfg = model.config();
    let split = split_corpus(corpus, cfg.train_fraction, cfg.seed)?;
    let evaluation = evaluate(model, corpus, &split, tap, condition)?;
    evaluation.write(out)?;
    Ok(evaluation)
}

/// Per-utterance feature matrices under `dir/utterances/`, named like the
/// corpus files. Each line is one subsampled frame.
pub fn dump_features(model: &BottleneckModel, corpus: &Corpus, tap: Tap, dir: &Path) -> Result<()> {
    for utt in &corpus.utterances {
        let feats = model.extract_features(&utt.frames, tap)?;
        write_file(&utterance_path(dir, utt.utterance_id), matrix_text(&feats))?;
    }
    Ok(())
}

fn matrix_text(m: &Tensor2D) -> String {
    let mut out = String::with_capacity(m.len() * 24);
    for row in m.row_iter() {
        push_reals(&mut out, row);
        out.push('\n');
    }
    out
}

/// Outcome of one planned (condition, seed) pair.
#[derive(Clone, Debug, PartialEq)]
pub enum RunOutcome {
    Report(MetricsReport),
    Failed {
        condition: String,
        seed: u64,
        exit_code: i32,
        message: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    /// In plan order.
    pub runs: Vec<RunOutcome>,
    pub f0: Vec<F0Row>,
    pub version: String,
    pub timestamp: String,
}

impl SweepResult {
    pub fn reports(&self) -> impl Iterator<Item = &MetricsReport> {
        self.runs.iter().filter_map(|r| match r {
            RunOutcome::Report(rep) => Some(rep),
            RunOutcome::Failed { .. } => None,
        })
    }

    /// The largest exit code among failed runs, 0 when all succeeded.
    pub fn exit_code(&self) -> i32 {
        self.runs
            .iter()
            .map(|r| match r {
                RunOutcome::Report(_) => 0,
                RunOutcome::Failed { exit_code, .. } => *exit_code,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in self.reports() {
            out.push_str(&csv_row(r));
            out.push('\n');
        }
        out
    }
}

pub fn run_dir(out: &Path, condition: &str, seed: u64) -> PathBuf {
    out.join("runs").join(condition).join(format!("seed-{seed}"))
}

pub fn corpus_dir(out: &Path, seed: u64) -> PathBuf {
    out.join("corpora").join(format!("seed-{seed}"))
}

/// Runs generation, training and evaluation for every planned pair and
/// writes the combined table. A failed pair is recorded and the sweep
/// continues.
pub fn run_sweep(plan: &ExperimentPlan, out: &Path) -> Result<SweepResult> {
    plan.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut corpora = Vec::new();
    for seed in plan.seeds() {
        let corpus = gen_data(&plan.corpus_config(seed), &corpus_dir(out, seed))?;
        corpora.push((seed, corpus));
    }
    let corpus_for = |seed: u64| {
        &corpora
            .iter()
            .find(|(s, _)| *s == seed)
            .expect("every plan seed has a corpus")
            .1
    };

    let mut runs = Vec::new();
    for cond in &plan.conditions {
        for &seed in &cond.seeds {
            let config = cond.model_config(&plan.model, seed);
            let dir = run_dir(out, &cond.name, seed);
            let corpus = corpus_for(seed);
            let outcome = train_model(corpus, &config, &dir)
                .and_then(|t| eval_model(&t.model, corpus, Tap::PostVq, &cond.name, &dir));
            runs.push(match outcome {
                Ok(ev) => RunOutcome::Report(ev.report),
                Err(e) => RunOutcome::Failed {
                    condition: cond.name.clone(),
                    seed,
                    exit_code: e.exit_code(),
                    message: e.to_string(),
                },
            });
        }
    }

    let mut f0 = Vec::new();
    if plan.f0.shift_to_common_target || plan.f0.awgn_snr_db.is_some() {
        for (seed, corpus) in &corpora {
            let split = split_corpus(corpus, plan.model.train_fraction, *seed)?;
            f0.extend(f0_experiment(corpus, &split, &plan.f0, *seed)?);
        }
    }

    let result = SweepResult {
        runs,
        f0,
        version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: plan.timestamp.clone().unwrap_or_else(|| "unset".into()),
    };
    write_file(&out.join(RESULTS_FILE), result.csv())?;
    let mut failures = String::from("# condition seed exit_code message\n");
    for r in &result.runs {
        if let RunOutcome::Failed {
            condition,
            seed,
            exit_code,
            message,
        } = r
        {
            writeln!(failures, "{condition} {seed} {exit_code} {message}").expect("write to String");
        }
    }
    write_file(&out.join(FAILURES_FILE), failures)?;
    write_file(
        &out.join(PROVENANCE_FILE),
        format!(
            "version = \"{}\"\ntimestamp = \"{}\"\n",
            result.version, result.timestamp
        ),
    )?;
    if !result.f0.is_empty() {
        let mut text = String::from(F0_CSV_HEADER);
        text.push('\n');
        for row in &result.f0 {
            text.push_str(&row.csv());
            text.push('\n');
        }
        write_file(&out.join(F0_REPORT_FILE), text)?;
    }
    Ok(result)
}

/// Median of the values; the mean of the middle two for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Per-condition medians across seeds, in plan order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSummary {
    pub condition: String,
    pub codebook_size: Option<usize>,
    pub runs: usize,
    pub content_error_rate: f64,
    pub speaker_probe_accuracy: f64,
    pub eer: f64,
    pub d_sys: f64,
}

pub fn summarize(reports: &[MetricsReport]) -> Vec<ConditionSummary> {
    let mut names: Vec<&str> = Vec::new();
    for r in reports {
        if !names.contains(&r.condition.as_str()) {
            names.push(&r.condition);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let rs: Vec<&MetricsReport> = reports.iter().filter(|r| r.condition == name).collect();
            let med = |f: fn(&MetricsReport) -> f64| {
                median(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("nonempty group")
            };
            ConditionSummary {
                condition: name.to_string(),
                codebook_size: rs[0].codebook_size,
                runs: rs.len(),
                content_error_rate: med(|r| r.content_error_rate),
                speaker_probe_accuracy: med(|r| r.speaker_probe_accuracy),
                eer: med(|r| r.eer),
                d_sys: med(|r| r.d_sys),
            }
        })
        .collect()
}

/// Result of the `f0` command.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Outcome {
    pub track: F0Track,
    pub source: F0Stats,
    pub target: F0Stats,
    pub measured_snr_db: Option<f64>,
}

impl F0Outcome {
    pub fn stats_line(&self) -> String {
        let mut line = format!(
            "src_mean={} src_std={} tgt_mean={} tgt_std={}",
            self.source.mean, self.source.std, self.target.mean, self.target.std
        );
        if let Some(snr) = self.measured_snr_db {
            write!(line, " measured_snr_db={snr}").expect("write to String");
        }
        line
    }
}

/// Shifts `track` to the target statistics, then optionally adds noise at
/// `snr_db`. Missing target fields keep the track's own value.
pub fn f0_transform(track: &F0Track, config: &F0CommandConfig) -> Result<F0Outcome> {
    let source = f0_stats(track)?;
    let target = F0Stats {
        mean: config.target_mean.unwrap_or(source.mean),
        std: config.target_std.unwrap_or(source.std),
        voiced_count: source.voiced_count,
    };
    let shifted = linear_shift(track, &source, &target)?;
    let power = parse_signal_power(config.signal_power.as_deref())?;
    let (track, measured_snr_db) = match config.awgn_snr_db {
        Some(snr) => {
            let mut rng = crate::model::stream(config.seed, 0);
            let noisy = add_awgn_with(&shifted, snr, power, &mut rng)?;
            let m = if snr == f64::INFINITY {
                None
            } else {
                Some(measured_snr(&shifted, &noisy)?)
            };
            (noisy, m)
        }
        None => (shifted, None),
    };
    Ok(F0Outcome {
        track,
        source,
        target,
        measured_snr_db,
    })
}
