use crate::corpus::{Corpus, CorpusSplit};
use crate::error::Result;
use crate::f0::{add_awgn, f0_stats, linear_shift, measured_snr, F0Stats, F0Track};
use crate::model::{stream, train_speaker_probe, ProbeConfig};

use super::{median, F0Plan};

pub const F0_CSV_HEADER: &str = "condition,seed,probe_acc,chance,measured_snr_db";

/// RNG streams for F0 noise start here, one per utterance id.
const NOISE_STREAM_BASE: u64 = 1 << 32;

/// Speaker probe on per-utterance (F0 mean, F0 std) under one F0 condition.
#[derive(Clone, Debug, PartialEq)]
pub struct F0Row {
    pub condition: String,
    pub seed: u64,
    pub probe_accuracy: f64,
    /// `1 / speakers`.
    pub chance: f64,
    /// Median per-utterance SNR when noise was added.
    pub measured_snr_db: Option<f64>,
}

impl F0Row {
    pub fn csv(&self) -> String {
        let snr = self
            .measured_snr_db
            .map_or_else(|| "none".to_string(), |s| s.to_string());
        format!(
            "{},{},{},{},{}",
            self.condition, self.seed, self.probe_accuracy, self.chance, snr
        )
    }
}

/// Population statistics of a speaker's pooled training-side voiced frames.
fn pooled_stats(tracks: &[&F0Track]) -> Result<F0Stats> {
    let values: Vec<f64> = tracks.iter().flat_map(|t| t.voiced_values()).collect();
    let flags = vec![true; values.len()];
    f0_stats(&F0Track::new(values, flags, tracks[0].frame_rate())?)
}

/// Probe accuracy for the original tracks, the tracks shifted to a shared
/// target, and (when configured) the shifted tracks with added noise.
///
/// Each speaker is shifted with statistics estimated from its own training
/// utterances. The shared target has the mean of those speakers' means and
/// the mean of their standard deviations.
pub fn f0_experiment(corpus: &Corpus, split: &CorpusSplit, plan: &F0Plan, seed: u64) -> Result<Vec<F0Row>> {
    let tracks: Vec<F0Track> = (0..corpus.utterances.len())
        .map(|id| corpus.f0_track(id))
        .collect::<Result<_>>()?;
    let speakers = corpus.speakers.len();
    let chance = 1.0 / speakers as f64;

    let mut rows = vec![F0Row {
        condition: "f0-original".into(),
        seed,
        probe_accuracy: probe_accuracy(corpus, split, &tracks)?,
        chance,
        measured_snr_db: None,
    }];
    if !plan.shift_to_common_target && plan.awgn_snr_db.is_none() {
        return Ok(rows);
    }

    let mut source = Vec::with_capacity(speakers);
    for s in 0..speakers {
        let own: Vec<&F0Track> = split
            .train
            .iter()
            .filter(|&&id| corpus.utterance(id).speaker == s)
            .map(|&id| &tracks[id])
            .collect();
        source.push(pooled_stats(&own)?);
    }

    let shifted: Vec<F0Track> = if plan.shift_to_common_target {
        let target = F0Stats {
            mean: source.iter().map(|s| s.mean).sum::<f64>() / speakers as f64,
            std: source.iter().map(|s| s.std).sum::<f64>() / speakers as f64,
            voiced_count: 0,
        };
        let shifted = tracks
            .iter()
            .zip(&corpus.utterances)
            .map(|(t, u)| linear_shift(t, &source[u.speaker], &target))
            .collect::<Result<Vec<_>>>()?;
        rows.push(F0Row {
            condition: "f0-shift".into(),
            seed,
            probe_accuracy: probe_accuracy(corpus, split, &shifted)?,
            chance,
            measured_snr_db: None,
        });
        shifted
    } else {
        tracks
    };

    if let Some(snr) = plan.awgn_snr_db {
        let mut noisy = Vec::with_capacity(shifted.len());
        let mut snrs = Vec::new();
        for (id, clean) in shifted.iter().enumerate() {
            let mut rng = stream(seed, NOISE_STREAM_BASE + id as u64);
            let n = add_awgn(clean, snr, &mut rng)?;
            if snr.is_finite() {
                snrs.push(measured_snr(clean, &n)?);
            }
            noisy.push(n);
        }
        let label = if plan.shift_to_common_target {
            "f0-shift-awgn"
        } else {
            "f0-awgn"
        };
        rows.push(F0Row {
            condition: label.into(),
            seed,
            probe_accuracy: probe_accuracy(corpus, split, &noisy)?,
            chance,
            measured_snr_db: median(&snrs),
        });
    }
    Ok(rows)
}

fn stats_feature(track: &F0Track) -> Result<Vec<f64>> {
    let s = f0_stats(track)?;
    Ok(vec![s.mean, s.std])
}

/// Fit on the training side, score on the held-out side.
pub fn probe_accuracy(corpus: &Corpus, split: &CorpusSplit, tracks: &[F0Track]) -> Result<f64> {
    let side = |ids: &[usize]| -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
        let xs = ids
            .iter()
            .map(|&id| stats_feature(&tracks[id]))
            .collect::<Result<_>>()?;
        let ys = ids.iter().map(|&id| corpus.utterance(id).speaker).collect();
        Ok((xs, ys))
    };
    let (xt, yt) = side(&split.train)?;
    let (xe, ye) = side(&split.eval)?;
    let probe = train_speaker_probe(&xt, &yt, &ProbeConfig::default())?;
    probe.accuracy(&xe, &ye)
}
