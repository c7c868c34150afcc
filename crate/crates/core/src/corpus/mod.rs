//! Synthetic speech-like corpus with a known content factor and a known
//! speaker factor.
//!
//! Each content class `c` has a unit-norm base vector `mu_c`; a frame spoken
//! by speaker `s` is `scale_s * mu_c + offset_s + noise`. Content labels come
//! in runs of 3 to 8 frames, like phone durations. Everything is a pure
//! function of [`CorpusConfig`]: speaker profiles come from one RNG stream
//! and each utterance from its own stream keyed by utterance id.

mod io;

pub(crate) use io::{parse_reals, push_reals};
pub use io::{utterance_file_name, utterance_path, HEADER_FILE, UTTERANCE_DIR};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor2D;
use crate::error::{Error, Result};
use crate::f0::{F0Track, DEFAULT_FRAME_RATE};

pub const MIN_RUN: usize = 3;
pub const MAX_RUN: usize = 8;
pub const MIN_PROTOTYPE_DISTANCE: f64 = 0.5;
pub const MAX_PROTOTYPE_DRAWS: usize = 10_000;

const PROFILE_STREAM: u64 = 0;
const UTTERANCE_STREAM_BASE: u64 = 1;
const F0_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_speakers: usize,
    pub num_content_classes: usize,
    pub frame_dim: usize,
    pub utterances_per_speaker: usize,
    pub frames_per_utterance: usize,
    pub noise_sigma: f64,
    /// Per-dimension std of the additive speaker offset.
    pub speaker_offset_std: f64,
    /// Speaker scales are `exp(u)` with `u ~ U(-spread, spread)` per dimension.
    pub speaker_scale_spread: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_speakers: 50,
            num_content_classes: 40,
            frame_dim: 24,
            utterances_per_speaker: 40,
            frames_per_utterance: 200,
            noise_sigma: 0.1,
            speaker_offset_std: 0.1,
            speaker_scale_spread: 0.25,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_speakers", self.num_speakers),
            ("num_content_classes", self.num_content_classes),
            ("frame_dim", self.frame_dim),
            ("utterances_per_speaker", self.utterances_per_speaker),
            ("frames_per_utterance", self.frames_per_utterance),
        ];
        for (name, value) in counts {
            if value < 2 {
                return Err(Error::Config(format!("{name} must be >= 2, got {value}")));
            }
        }
        if self.frames_per_utterance < 10 {
            return Err(Error::Config(format!(
                "frames_per_utterance must be >= 10, got {}",
                self.frames_per_utterance
            )));
        }
        if !(self.noise_sigma >= 0.0) || !(self.speaker_offset_std >= 0.0) {
            return Err(Error::Config("noise and offset stds must be >= 0".into()));
        }
        if !(0.0..=std::f64::consts::LN_2).contains(&self.speaker_scale_spread) {
            return Err(Error::Config(format!(
                "speaker_scale_spread must lie in [0, ln 2], got {}",
                self.speaker_scale_spread
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProfile {
    pub id: usize,
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
    pub f0_mean: f64,
    pub f0_std: f64,
}

impl SpeakerProfile {
    /// Offset 0, scale 1.
    pub fn neutral(id: usize, dim: usize, f0_mean: f64, f0_std: f64) -> Self {
        Self {
            id,
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
            f0_mean,
            f0_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub utterance_id: usize,
    pub speaker: usize,
    /// T x F.
    pub frames: Tensor2D,
    pub content_labels: Vec<usize>,
}

impl FrameSequence {
    pub fn len(&self) -> usize {
        self.content_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.content_labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    /// C x F unit-norm class base vectors.
    pub content_prototypes: Tensor2D,
    pub speakers: Vec<SpeakerProfile>,
    /// Ordered by utterance id; ids are speaker-major.
    pub utterances: Vec<FrameSequence>,
}

impl Corpus {
    pub fn utterance(&self, id: usize) -> &FrameSequence {
        &self.utterances[id]
    }

    /// F0 trajectory for an utterance, drawn from its own RNG stream.
    pub fn f0_track(&self, utterance_id: usize) -> Result<F0Track> {
        let utt = self.utterance(utterance_id);
        let mut rng = stream(self.config.seed, F0_STREAM_BASE + utterance_id as u64);
        generate_f0_track(&self.speakers[utt.speaker], utt.len(), &mut rng)
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = stream(config.seed, PROFILE_STREAM);
    let content_prototypes = draw_content_prototypes(config, &mut rng)?;
    let speakers: Vec<SpeakerProfile> = (0..config.num_speakers)
        .map(|id| draw_speaker(id, config, &mut rng))
        .collect();

    let utterances = (0..config.num_speakers * config.utterances_per_speaker)
        .map(|utterance_id| {
            let speaker = utterance_id / config.utterances_per_speaker;
            let mut rng = stream(config.seed, UTTERANCE_STREAM_BASE + utterance_id as u64);
            let labels =
                draw_content_labels(config.frames_per_utterance, config.num_content_classes, &mut rng);
            let frames = synthesize_frames(
                &speakers[speaker],
                &content_prototypes,
                &labels,
                config.noise_sigma,
                &mut rng,
            )?;
            Ok(FrameSequence {
                utterance_id,
                speaker,
                frames,
                content_labels: labels,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(Corpus {
        config: config.clone(),
        content_prototypes,
        speakers,
        utterances,
    })
}

fn draw_content_prototypes<R: Rng>(config: &CorpusConfig, rng: &mut R) -> Result<Tensor2D> {
    let (c, f) = (config.num_content_classes, config.frame_dim);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut draws = 0;
    while accepted.len() < c {
        if draws == MAX_PROTOTYPE_DRAWS {
            return Err(Error::Config(format!(
                "could not place {c} unit vectors in {f} dimensions at distance >= \
                 {MIN_PROTOTYPE_DISTANCE} within {MAX_PROTOTYPE_DRAWS} draws"
            )));
        }
        draws += 1;
        let mut v: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let far_enough = accepted.iter().all(|u| {
            let d2: f64 = u.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= MIN_PROTOTYPE_DISTANCE
        });
        if far_enough {
            accepted.push(v);
        }
    }
    Tensor2D::from_rows(&accepted)
}

fn draw_speaker<R: Rng>(id: usize, config: &CorpusConfig, rng: &mut R) -> SpeakerProfile {
    let f = config.frame_dim;
    let offset = (0..f)
        .map(|_| config.speaker_offset_std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let spread = config.speaker_scale_spread;
    let scale = (0..f)
        .map(|_| {
            let u = if spread > 0.0 {
                rng.random_range(-spread..=spread)
            } else {
                0.0
            };
            u.exp().clamp(0.5, 2.0)
        })
        .collect();
    SpeakerProfile {
        id,
        offset,
        scale,
        f0_mean: rng.random_range(80.0..=300.0),
        f0_std: rng.random_range(5.0..=40.0),
    }
}

/// Content labels in runs of [`MIN_RUN`]..=[`MAX_RUN`] frames; adjacent runs
/// carry different labels.
pub fn draw_content_labels<R: Rng>(len: usize, classes: usize, rng: &mut R) -> Vec<usize> {
    let mut labels = Vec::with_capacity(len);
    let mut prev: Option<usize> = None;
    while labels.len() < len {
        let remaining = len - labels.len();
        let run = if remaining <= MAX_RUN {
            remaining
        } else {
            // Never leave a tail shorter than MIN_RUN.
            let hi = MAX_RUN.min(remaining - MIN_RUN);
            rng.random_range(MIN_RUN..=hi)
        };
        let label = loop {
            let l = rng.random_range(0..classes);
            if Some(l) != prev {
                break l;
            }
        };
        labels.extend(std::iter::repeat_n(label, run));
        prev = Some(label);
    }
    labels
}

/// `scale * mu_label + offset + N(0, noise_sigma^2)` for each label.
pub fn synthesize_frames<R: Rng>(
    speaker: &SpeakerProfile,
    content_prototypes: &Tensor2D,
    labels: &[usize],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Tensor2D> {
    let f = content_prototypes.cols();
    if speaker.offset.len() != f || speaker.scale.len() != f {
        return Err(Error::shape(
            "synthesize_frames",
            format!("speaker dims {} vs frame dim {f}", speaker.offset.len()),
        ));
    }
    let mut frames = Tensor2D::zeros(labels.len(), f);
    for (t, &c) in labels.iter().enumerate() {
        let mu = content_prototypes.row(c);
        for (k, x) in frames.row_mut(t).iter_mut().enumerate() {
            let noise = if noise_sigma > 0.0 {
                noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            *x = speaker.scale[k] * mu[k] + speaker.offset[k] + noise;
        }
    }
    Ok(frames)
}

pub const MIN_F0_TRACK_LEN: usize = 20;
/// Fraction of the deviation from the speaker mean removed at every step.
pub const F0_REVERSION: f64 = 0.9;

/// Mean-reverting pitch walk around `f0_mean` with innovation std
/// `f0_std / 10`, clipped to [50, 500] Hz, over alternating voiced
/// (10..=40 frames) and unvoiced (2..=10 frames) runs, starting voiced.
pub fn generate_f0_track<R: Rng>(speaker: &SpeakerProfile, length: usize, rng: &mut R) -> Result<F0Track> {
    if length < MIN_F0_TRACK_LEN {
        return Err(Error::InvalidArgument(format!(
            "F0 track length must be >= {MIN_F0_TRACK_LEN}, got {length}"
        )));
    }
    let step_std = speaker.f0_std / 10.0;
    let innovation = Normal::new(0.0, step_std)
        .map_err(|e| Error::InvalidArgument(format!("f0 step std {step_std}: {e}")))?;
    let mut values = Vec::with_capacity(length);
    let mut voiced = Vec::with_capacity(length);
    let mut level = speaker.f0_mean;
    let mut is_voiced = true;
    while values.len() < length {
        let run = if is_voiced {
            rng.random_range(10..=40)
        } else {
            rng.random_range(2..=10)
        };
        for _ in 0..run.min(length - values.len()) {
            if is_voiced {
                let eps = innovation.sample(rng);
                level = level - F0_REVERSION * (level - speaker.f0_mean) + eps;
                values.push(level.clamp(50.0, 500.0));
            } else {
                values.push(0.0);
            }
            voiced.push(is_voiced);
        }
        is_voiced = !is_voiced;
    }
    F0Track::new(values, voiced, DEFAULT_FRAME_RATE)
}

/// Utterance ids assigned to training and evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

/// Splits by utterance within each speaker, then checks that every content
/// class occurs on both sides.
pub fn split_corpus(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_speaker: Vec<Vec<usize>> = vec![Vec::new(); corpus.speakers.len()];
    for u in &corpus.utterances {
        by_speaker[u.speaker].push(u.utterance_id);
    }
    let mut split = CorpusSplit {
        train: Vec::new(),
        eval: Vec::new(),
    };
    for (speaker, mut ids) in by_speaker.into_iter().enumerate() {
        if ids.len() < 2 {
            return Err(Error::Config(format!(
                "speaker {speaker} has {} utterances; need 2 to appear on both sides",
                ids.len()
            )));
        }
        let mut rng = stream(seed, speaker as u64);
        ids.shuffle(&mut rng);
        let n_train = ((ids.len() as f64 * train_fraction).round() as usize).clamp(1, ids.len() - 1);
        split.train.extend_from_slice(&ids[..n_train]);
        split.eval.extend_from_slice(&ids[n_train..]);
    }
    split.train.sort_unstable();
    split.eval.sort_unstable();

    let classes = corpus.config.num_content_classes;
    for (side, ids) in [("train", &split.train), ("eval", &split.eval)] {
        let mut seen = vec![false; classes];
        for &id in ids {
            for &l in &corpus.utterances[id].content_labels {
                seen[l] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::Config(format!(
                "content class {missing} never occurs in the {side} partition"
            )));
        }
    }
    Ok(split)
}
