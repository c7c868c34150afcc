//! Scoring a trained model on the held-out utterances, and the files that
//! let every reported number be recomputed later.
//!
//! ```text
//! <dir>/report.txt        the report record
//! <dir>/pooled.txt        one line per utterance: id speaker side mean-feature...
//! <dir>/content.txt       "errors frames"
//! <dir>/scores/mated.txt, <dir>/scores/nonmated.txt
//! ```

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor2D;
use crate::corpus::{parse_reals, push_reals, Corpus, CorpusSplit};
use crate::error::{Error, Result};
use crate::metrics::{eer, linkability, MetricsReport, ScoreSet, DEFAULT_BINS};
use crate::model::{
    score_trials, train_speaker_probe, utterance_embedding, BottleneckModel, ProbeConfig, Tap,
};

pub const REPORT_FILE: &str = "report.txt";
pub const POOLED_FILE: &str = "pooled.txt";
pub const CONTENT_FILE: &str = "content.txt";
pub const SCORES_DIR: &str = "scores";

/// Frame-mean feature of one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub utterance_id: usize,
    pub speaker: usize,
    pub train: bool,
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub pooled: Vec<PooledFeature>,
    pub content_errors: usize,
    pub content_frames: usize,
    pub scores: ScoreSet,
}

/// Probe accuracy, trial scores and the derived metrics from pooled
/// features alone. The probe is fit on the training side and tested on
/// the held-out side; trials use held-out utterances only.
pub struct SpeakerMetrics {
    pub probe_accuracy: f64,
    pub scores: ScoreSet,
    pub eer: f64,
    pub d_sys: f64,
}

pub fn speaker_metrics(pooled: &[PooledFeature], trial_seed: u64) -> Result<SpeakerMetrics> {
    let (train, held): (Vec<&PooledFeature>, Vec<&PooledFeature>) = pooled.iter().partition(|p| p.train);
    if train.is_empty() || held.is_empty() {
        return Err(Error::InvalidArgument(
            "need pooled features on both sides".into(),
        ));
    }
    let xs: Vec<Vec<f64>> = train.iter().map(|p| p.mean.clone()).collect();
    let ys: Vec<usize> = train.iter().map(|p| p.speaker).collect();
    let probe = train_speaker_probe(&xs, &ys, &ProbeConfig::default())?;
    let xe: Vec<Vec<f64>> = held.iter().map(|p| p.mean.clone()).collect();
    let ye: Vec<usize> = held.iter().map(|p| p.speaker).collect();
    let probe_accuracy = probe.accuracy(&xe, &ye)?;

    let embeddings = xe
        .iter()
        .map(|m| utterance_embedding(&Tensor2D::new(1, m.len(), m.clone())?))
        .collect::<Result<Vec<_>>>()?;
    let scores = score_trials(&embeddings, &ye, trial_seed)?;
    let e = eer(&scores)?.eer;
    let d = linkability(&scores, DEFAULT_BINS)?.d_sys;
    Ok(SpeakerMetrics {
        probe_accuracy,
        scores,
        eer: e,
        d_sys: d,
    })
}

/// Features at `tap` for every utterance in the split, pooled per utterance.
pub fn pooled_features(
    model: &BottleneckModel,
    corpus: &Corpus,
    split: &CorpusSplit,
    tap: Tap,
) -> Result<Vec<PooledFeature>> {
    let mut out = Vec::with_capacity(split.train.len() + split.eval.len());
    for (ids, train) in [(&split.train, true), (&split.eval, false)] {
        for &id in ids {
            let utt = corpus.utterance(id);
            let feats = model.extract_features(&utt.frames, tap)?;
            out.push(PooledFeature {
                utterance_id: id,
                speaker: utt.speaker,
                train,
                mean: feats.mean_rows(),
            });
        }
    }
    out.sort_by_key(|p| p.utterance_id);
    Ok(out)
}

pub fn evaluate(
    model: &BottleneckModel,
    corpus: &Corpus,
    split: &CorpusSplit,
    tap: Tap,
    condition: &str,
) -> Result<Evaluation> {
    let held = split.eval.iter().map(|&id| corpus.utterance(id));
    let (content_errors, content_frames) = model.content_errors(held)?;
    let pooled = pooled_features(model, corpus, split, tap)?;
    let seed = model.config().seed;
    let sm = speaker_metrics(&pooled, seed)?;
    let report = MetricsReport::assemble(
        condition,
        model.config().codebook_size,
        content_errors as f64 / content_frames as f64,
        sm.probe_accuracy,
        sm.eer,
        sm.d_sys,
        model.config().to_toml(),
        seed,
    )?;
    Ok(Evaluation {
        report,
        pooled,
        content_errors,
        content_frames,
        scores: sm.scores,
    })
}

impl Evaluation {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.report.write(&dir.join(REPORT_FILE))?;
        let path = dir.join(POOLED_FILE);
        fs::write(&path, pooled_text(&self.pooled)).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(CONTENT_FILE);
        fs::write(
            &path,
            format!("{} {}\n", self.content_errors, self.content_frames),
        )
        .map_err(|e| Error::io(&path, e))?;
        self.scores.write(&dir.join(SCORES_DIR))
    }
}

pub fn pooled_text(pooled: &[PooledFeature]) -> String {
    let mut out = String::from("# utterance_id speaker side mean...\n");
    for p in pooled {
        out.push_str(&format!(
            "{} {} {} ",
            p.utterance_id,
            p.speaker,
            if p.train { "train" } else { "eval" }
        ));
        push_reals(&mut out, &p.mean);
        out.push('\n');
    }
    out
}

pub fn read_pooled(path: &Path) -> Result<Vec<PooledFeature>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: malformed pooled feature", n + 1));
        let mut parts = line.splitn(4, ' ');
        let mut next = || parts.next().ok_or_else(bad);
        let utterance_id = next()?.parse().map_err(|_| bad())?;
        let speaker = next()?.parse().map_err(|_| bad())?;
        let train = match next()? {
            "train" => true,
            "eval" => false,
            _ => return Err(bad()),
        };
        let mean = parse_reals(next()?, path, n + 1)?;
        out.push(PooledFeature {
            utterance_id,
            speaker,
            train,
            mean,
        });
    }
    Ok(out)
}

/// Recomputes a report from the files [`Evaluation::write`] produced.
pub fn rederive_report(dir: &Path) -> Result<MetricsReport> {
    let stored = MetricsReport::read(&dir.join(REPORT_FILE))?;
    let pooled = read_pooled(&dir.join(POOLED_FILE))?;
    let content_path = dir.join(CONTENT_FILE);
    let content = fs::read_to_string(&content_path).map_err(|e| Error::io(&content_path, e))?;
    let counts: Vec<usize> = content
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::format(&content_path, "expected two counts"))
        })
        .collect::<Result<_>>()?;
    let [errors, frames] = counts[..] else {
        return Err(Error::format(&content_path, "expected two counts"));
    };
    let sm = speaker_metrics(&pooled, stored.seed)?;
    let scores = ScoreSet::read(&dir.join(SCORES_DIR))?;
    if scores != sm.scores {
        return Err(Error::format(
            dir.join(SCORES_DIR),
            "scores differ from pooled features",
        ));
    }
    MetricsReport::assemble(
        stored.condition,
        stored.codebook_size,
        errors as f64 / frames as f64,
        sm.probe_accuracy,
        eer(&scores)?.eer,
        linkability(&scores, DEFAULT_BINS)?.d_sys,
        stored.config,
        stored.seed,
    )
}
