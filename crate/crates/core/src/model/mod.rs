//! Encoder, quantizer and frame classifier.
//!
//! ```text
//! frames (T x F) --every stride-th--> (J x F) --encoder--> h (J x D)
//!   --nearest prototype + straight-through--> q --classifier--> logits (J x C)
//! ```
//!
//! The encoder is `depth` linear layers with ReLU between them; its last
//! layer is linear so that `h` can take either sign. The classifier is
//! linear, ReLU, linear. Without a codebook `q = h`.

mod checkpoint;
mod probe;
mod train;

pub use probe::{
    cosine_score, score_trials, train_speaker_probe, utterance_embedding, ProbeConfig, SpeakerProbe,
    MAX_NONMATED_RATIO,
};
pub use train::{loss_history_csv, train, StepRecord, LOSS_CSV_HEADER};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor2D, Var};
use crate::corpus::{Corpus, FrameSequence};
use crate::error::{Error, Result};
use crate::serde_util;
use crate::vq::{
    quantize, Codebook, DEFAULT_BETA, DEFAULT_DEAD_THRESHOLD, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS,
};

pub const MAX_ENCODER_DEPTH: usize = 8;

const INIT_STREAM: u64 = 0;
const CODEBOOK_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const RESEED_STREAM: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_depth: usize,
    /// Width of every hidden layer and of the latent `h` (the codebook `D`).
    pub hidden_dim: usize,
    /// `V`, or `"none"` for an identity bottleneck.
    #[serde(with = "serde_util")]
    pub codebook_size: Option<usize>,
    pub subsample_stride: usize,
    pub beta: f64,
    pub epochs: usize,
    pub batch_utterances: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub ema_decay: f64,
    pub laplace_eps: f64,
    pub dead_code_threshold: f64,
    /// Share of each speaker's utterances used for training; the rest is
    /// held out for evaluation.
    pub train_fraction: f64,
    pub codebook_learning: CodebookLearning,
}

/// How prototypes are learned during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodebookLearning {
    /// Moving averages of assigned latents, with dead-code reseeding; the
    /// codebook loss is only monitored.
    #[default]
    Ema,
    /// The codebook loss is added to the objective and prototypes take Adam
    /// steps like any other parameter.
    Gradient,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 3,
            hidden_dim: 256,
            codebook_size: Some(256),
            subsample_stride: 3,
            beta: DEFAULT_BETA,
            epochs: 10,
            batch_utterances: 8,
            seed: 0,
            learning_rate: 1e-3,
            ema_decay: DEFAULT_DECAY,
            laplace_eps: DEFAULT_LAPLACE_EPS,
            dead_code_threshold: DEFAULT_DEAD_THRESHOLD,
            train_fraction: 0.5,
            codebook_learning: CodebookLearning::Ema,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(1..=MAX_ENCODER_DEPTH).contains(&self.encoder_depth) {
            return bad(format!(
                "encoder_depth must lie in 1..={MAX_ENCODER_DEPTH}, got {}",
                self.encoder_depth
            ));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        if self.codebook_size == Some(0) {
            return bad("codebook_size must be >= 1 or \"none\"".into());
        }
        if !matches!(self.subsample_stride, 1 | 3) {
            return bad(format!(
                "subsample_stride must be 1 or 3, got {}",
                self.subsample_stride
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.batch_utterances == 0 {
            return bad("batch_utterances must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        if !(self.laplace_eps > 0.0 && self.laplace_eps.is_finite()) {
            return bad(format!("laplace_eps must be > 0, got {}", self.laplace_eps));
        }
        if !(self.dead_code_threshold >= 0.0) {
            return bad(format!(
                "dead_code_threshold must be >= 0, got {}",
                self.dead_code_threshold
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if self.seed > i64::MAX as u64 {
            return bad(format!("seed {} exceeds 2^63 - 1", self.seed));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config always encodes")
    }
}

/// Which representation [`BottleneckModel::extract_features`] returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tap {
    PreVq,
    PostVq,
}

impl Tap {
    pub fn as_str(self) -> &'static str {
        match self {
            Tap::PreVq => "pre_vq",
            Tap::PostVq => "post_vq",
        }
    }
}

impl std::str::FromStr for Tap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_vq" => Ok(Tap::PreVq),
            "post_vq" => Ok(Tap::PostVq),
            other => Err(Error::InvalidArgument(format!(
                "tap must be pre_vq or post_vq, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// J x C.
    pub logits: Tensor2D,
    pub h: Tensor2D,
    /// Equal to `h` when there is no codebook.
    pub q: Tensor2D,
    /// Prototype index per frame; `None` without a codebook.
    pub indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckModel {
    pub(crate) config: ModelConfig,
    pub(crate) input_dim: usize,
    pub(crate) num_classes: usize,
    /// Weight then bias for each encoder layer, then for both classifier
    /// layers.
    pub(crate) params: Vec<Tensor2D>,
    pub(crate) codebook: Option<Codebook>,
}

/// Number of frames left after keeping every `stride`-th one.
pub fn subsampled_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Rows `0, stride, 2*stride, ...`.
pub fn subsample(frames: &Tensor2D, stride: usize) -> Tensor2D {
    let idx: Vec<usize> = (0..frames.rows()).step_by(stride).collect();
    frames.select_rows(&idx)
}

pub fn subsample_labels(labels: &[usize], stride: usize) -> Vec<usize> {
    labels.iter().step_by(stride).copied().collect()
}

impl BottleneckModel {
    /// Random weights (He-normal, zero biases). With a codebook, the
    /// prototypes are `V` distinct encoder outputs for `init_frames`
    /// (already subsampled), so they start where the data lives.
    pub fn new(
        config: ModelConfig,
        input_dim: usize,
        num_classes: usize,
        init_frames: &Tensor2D,
    ) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "need input_dim >= 1 and >= 2 classes, got {input_dim} and {num_classes}"
            )));
        }
        let mut rng = stream(config.seed, INIT_STREAM);
        let d = config.hidden_dim;
        let mut shapes = Vec::new();
        let mut fan_in = input_dim;
        for _ in 0..config.encoder_depth {
            shapes.push((fan_in, d));
            fan_in = d;
        }
        shapes.push((d, d));
        shapes.push((d, num_classes));
        let mut params = Vec::with_capacity(2 * shapes.len());
        for (i, o) in shapes {
            let normal = Normal::new(0.0, (2.0 / i as f64).sqrt()).expect("positive std");
            let w: Vec<f64> = (0..i * o).map(|_| normal.sample(&mut rng)).collect();
            params.push(Tensor2D::new(i, o, w)?);
            params.push(Tensor2D::zeros(1, o));
        }
        let mut model = Self {
            config,
            input_dim,
            num_classes,
            params,
            codebook: None,
        };
        if let Some(v) = model.config.codebook_size {
            if init_frames.cols() != input_dim {
                return Err(Error::shape(
                    "BottleneckModel::new",
                    format!(
                        "init frames have {} dims, model expects {input_dim}",
                        init_frames.cols()
                    ),
                ));
            }
            let h = model.encode(init_frames)?;
            let mut rng = stream(model.config.seed, CODEBOOK_STREAM);
            model.codebook = Some(Codebook::from_frames(
                &h,
                v,
                model.config.ema_decay,
                model.config.laplace_eps,
                &mut rng,
            )?);
        }
        Ok(model)
    }

    /// Builds a model whose codebook is seeded from the training utterances
    /// of `corpus`.
    pub fn for_corpus(config: ModelConfig, corpus: &Corpus, train_ids: &[usize]) -> Result<Self> {
        let stride = config.subsample_stride;
        let parts: Vec<Tensor2D> = train_ids
            .iter()
            .map(|&id| subsample(&corpus.utterance(id).frames, stride))
            .collect();
        let init = stack_rows(&parts, corpus.config.frame_dim)?;
        Self::new(
            config,
            corpus.config.frame_dim,
            corpus.config.num_content_classes,
            &init,
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub fn params(&self) -> &[Tensor2D] {
        &self.params
    }

    fn encoder_layers(&self) -> usize {
        self.config.encoder_depth
    }

    pub(crate) fn record_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect()
    }

    pub(crate) fn record_encoder(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut a = x;
        let depth = self.encoder_layers();
        for layer in 0..depth {
            a = tape.linear(a, vars[2 * layer], vars[2 * layer + 1])?;
            if layer + 1 < depth {
                a = tape.relu(a);
            }
        }
        Ok(a)
    }

    pub(crate) fn record_classifier(&self, tape: &mut Tape, vars: &[Var], q: Var) -> Result<Var> {
        let base = 2 * self.encoder_layers();
        let a = tape.linear(q, vars[base], vars[base + 1])?;
        let a = tape.relu(a);
        tape.linear(a, vars[base + 2], vars[base + 3])
    }

    fn check_input(&self, frames: &Tensor2D) -> Result<()> {
        if frames.cols() != self.input_dim {
            return Err(Error::shape(
                "forward",
                format!(
                    "frames have {} dims, model expects {}",
                    frames.cols(),
                    self.input_dim
                ),
            ));
        }
        if frames.rows() == 0 {
            return Err(Error::InvalidArgument("forward needs at least one frame".into()));
        }
        Ok(())
    }

    /// Encoder output for frames that are already subsampled.
    pub fn encode(&self, frames: &Tensor2D) -> Result<Tensor2D> {
        self.check_input(frames)?;
        let mut tape = Tape::new();
        let vars = self.record_params(&mut tape, false);
        let x = tape.constant(frames.clone());
        let h = self.record_encoder(&mut tape, &vars, x)?;
        Ok(tape.value(h).clone())
    }

    /// Full pass over a `T x F` sequence; subsamples first.
    pub fn forward(&self, frames: &Tensor2D) -> Result<ForwardOutput> {
        self.check_input(frames)?;
        let x = subsample(frames, self.config.subsample_stride);
        let mut tape = Tape::new();
        let vars = self.record_params(&mut tape, false);
        let xv = tape.constant(x);
        let h = self.record_encoder(&mut tape, &vars, xv)?;
        let h_val = tape.value(h).clone();
        let (q_var, q_val, indices) = match &self.codebook {
            Some(cb) => {
                let qb = quantize(&h_val, cb)?;
                let q = tape.straight_through(h, qb.q.clone())?;
                (q, qb.q, Some(qb.indices))
            }
            None => (h, h_val.clone(), None),
        };
        let logits = self.record_classifier(&mut tape, &vars, q_var)?;
        let logits = tape.value(logits).clone();
        if !logits.is_finite() || !h_val.is_finite() {
            return Err(Error::Numerical("forward produced non-finite values".into()));
        }
        Ok(ForwardOutput {
            logits,
            h: h_val,
            q: q_val,
            indices,
        })
    }

    /// `h` for [`Tap::PreVq`], `q` for [`Tap::PostVq`].
    pub fn extract_features(&self, frames: &Tensor2D, tap: Tap) -> Result<Tensor2D> {
        let out = self.forward(frames)?;
        Ok(match tap {
            Tap::PreVq => out.h,
            Tap::PostVq => out.q,
        })
    }

    /// Frame-level argmax errors and the number of frames scored, over the
    /// subsampled labels of `utterances`.
    pub fn content_errors<'a>(
        &self,
        utterances: impl IntoIterator<Item = &'a FrameSequence>,
    ) -> Result<(usize, usize)> {
        let (mut wrong, mut total) = (0, 0);
        for utt in utterances {
            let out = self.forward(&utt.frames)?;
            let labels = subsample_labels(&utt.content_labels, self.config.subsample_stride);
            for (row, &label) in out.logits.row_iter().zip(&labels) {
                if argmax(row) != label {
                    wrong += 1;
                }
            }
            total += labels.len();
        }
        Ok((wrong, total))
    }

    pub fn content_error_rate<'a>(
        &self,
        utterances: impl IntoIterator<Item = &'a FrameSequence>,
    ) -> Result<f64> {
        let (wrong, total) = self.content_errors(utterances)?;
        if total == 0 {
            return Err(Error::InvalidArgument("no frames to score".into()));
        }
        Ok(wrong as f64 / total as f64)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn stack_rows(parts: &[Tensor2D], cols: usize) -> Result<Tensor2D> {
    let rows = parts.iter().map(Tensor2D::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        if p.cols() != cols {
            return Err(Error::shape(
                "stack_rows",
                format!("{} vs {cols} columns", p.cols()),
            ));
        }
        data.extend_from_slice(p.data());
    }
    Tensor2D::new(rows, cols, data)
}
