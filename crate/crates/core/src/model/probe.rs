//! Post-hoc attackers on frozen features: a linear speaker classifier and
//! cosine scoring of pooled utterance embeddings.

use rand::seq::index;

use super::{argmax, stream};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tape, Tensor2D};
use crate::error::{Error, Result};
use crate::metrics::ScoreSet;

/// Nonmated trials are capped at this multiple of the mated count.
pub const MAX_NONMATED_RATIO: usize = 10;

/// Relative spread below which a feature is treated as constant.
const CONSTANT_FEATURE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch Adam steps.
    pub steps: usize,
    pub learning_rate: f64,
    /// L2 penalty on the weights (not the biases).
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            learning_rate: 0.05,
            weight_decay: 1e-3,
        }
    }
}

/// Standardizing affine map followed by a softmax layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    w: Tensor2D,
    b: Tensor2D,
}

impl SpeakerProbe {
    pub fn num_classes(&self) -> usize {
        self.w.cols()
    }

    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::shape(
                "SpeakerProbe",
                format!("feature dim {} vs probe dim {}", x.len(), self.mean.len()),
            ));
        }
        let z = Tensor2D::new(1, x.len(), self.standardize(x))?;
        let mut out = z.matmul(&self.w)?;
        for (o, b) in out.data_mut().iter_mut().zip(self.b.data()) {
            *o += b;
        }
        Ok(out.into_data())
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        Ok(argmax(&self.logits(x)?))
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        let mut hits = 0;
        for (x, &y) in features.iter().zip(labels) {
            if self.predict(x)? == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / labels.len() as f64)
    }
}

/// Fits a linear softmax classifier from one pooled feature vector per
/// utterance to its speaker label. Features are standardized with the
/// training mean and deviation; near-constant features are only centered.
pub fn train_speaker_probe(
    features: &[Vec<f64>],
    labels: &[usize],
    config: &ProbeConfig,
) -> Result<SpeakerProbe> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidArgument(
            "feature rows must share a nonzero dim".into(),
        ));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::InvalidArgument(
            "speaker probe needs at least two distinct speakers".into(),
        ));
    }
    if !(config.learning_rate > 0.0) || !(config.weight_decay >= 0.0) {
        return Err(Error::InvalidArgument(format!("bad probe config {config:?}")));
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, x) in mean.iter_mut().zip(f) {
            *m += x / n;
        }
    }
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, x), m) in scale.iter_mut().zip(f).zip(&mean) {
            *s += (x - m) * (x - m) / n;
        }
    }
    for (s, m) in scale.iter_mut().zip(&mean) {
        let sd = s.sqrt();
        *s = if sd > CONSTANT_FEATURE_TOL * m.abs().max(1.0) {
            sd
        } else {
            1.0
        };
    }

    let mut probe = SpeakerProbe {
        mean,
        scale,
        w: Tensor2D::zeros(dim, classes),
        b: Tensor2D::zeros(1, classes),
    };
    let rows: Vec<Vec<f64>> = features.iter().map(|f| probe.standardize(f)).collect();
    let x = Tensor2D::from_rows(&rows)?;
    let zeros = Tensor2D::zeros(dim, classes);
    let adam = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut params = vec![probe.w.clone(), probe.b.clone()];
    let mut state = AdamState::for_params(&params);
    for _ in 0..config.steps {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let logits = tape.linear(xv, w, b)?;
        let mut loss = tape.softmax_cross_entropy(logits, labels)?;
        if config.weight_decay > 0.0 {
            let z = tape.constant(zeros.clone());
            let l2 = tape.squared_distance(w, z)?;
            let l2 = tape.scale(l2, config.weight_decay);
            loss = tape.add(loss, l2)?;
        }
        if !tape.value(loss).is_finite() {
            return Err(Error::Numerical("speaker probe loss became non-finite".into()));
        }
        tape.backward(loss)?;
        let grads = [
            tape.grad(w).expect("param has a gradient").clone(),
            tape.grad(b).expect("param has a gradient").clone(),
        ];
        adam_step(&mut params, &grads, &mut state, &adam)?;
    }
    probe.b = params.pop().expect("two params");
    probe.w = params.pop().expect("two params");
    Ok(probe)
}

/// Frame mean scaled to unit length; the zero vector stays zero.
pub fn utterance_embedding(features: &Tensor2D) -> Result<Vec<f64>> {
    if features.rows() == 0 {
        return Err(Error::InvalidArgument(
            "embedding needs at least one frame".into(),
        ));
    }
    let mut mean = features.mean_rows();
    let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        mean.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(mean)
}

/// Cosine similarity; 0 when either side is the zero vector.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_score",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Scores every same-speaker pair, and every different-speaker pair up to
/// [`MAX_NONMATED_RATIO`] times the mated count, beyond which a seeded
/// sample is taken. Pairs are unordered and never self-pairs.
pub fn score_trials(embeddings: &[Vec<f64>], speakers: &[usize], seed: u64) -> Result<ScoreSet> {
    if embeddings.len() != speakers.len() {
        return Err(Error::InvalidArgument(format!(
            "{} embeddings for {} speaker labels",
            embeddings.len(),
            speakers.len()
        )));
    }
    let n = embeddings.len();
    let mut mated_pairs = Vec::new();
    let mut nonmated_pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if speakers[i] == speakers[j] {
                mated_pairs.push((i, j));
            } else {
                nonmated_pairs.push((i, j));
            }
        }
    }
    if mated_pairs.is_empty() || nonmated_pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "need two utterances of one speaker and two distinct speakers".into(),
        ));
    }
    let cap = MAX_NONMATED_RATIO * mated_pairs.len();
    if nonmated_pairs.len() > cap {
        let mut rng = stream(seed, 0);
        let mut keep = index::sample(&mut rng, nonmated_pairs.len(), cap).into_vec();
        keep.sort_unstable();
        nonmated_pairs = keep.into_iter().map(|k| nonmated_pairs[k]).collect();
    }
    let score = |&(i, j): &(usize, usize)| cosine_score(&embeddings[i], &embeddings[j]);
    Ok(ScoreSet {
        mated: mated_pairs.iter().map(score).collect::<Result<_>>()?,
        nonmated: nonmated_pairs.iter().map(score).collect::<Result<_>>()?,
    })
}
