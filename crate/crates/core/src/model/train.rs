use std::fmt::Write as _;

use rand::seq::SliceRandom;

use super::{
    stack_rows, stream, subsample, subsample_labels, BottleneckModel, CodebookLearning, RESEED_STREAM,
    SHUFFLE_STREAM,
};
use crate::autodiff::{adam_step, AdamConfig, AdamState, Tensor2D};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::vq::{codebook_perplexity, combined_loss, quantize, vq_loss, vq_loss_on_tape, LossBreakdown};

pub const LOSS_CSV_HEADER: &str = "step,task,l_vq,l_vq_reg,total,perplexity";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
    /// Prototype-usage perplexity of the batch; `None` without a codebook.
    pub perplexity: Option<f64>,
}

/// Minimizes frame cross-entropy plus `beta` times the commitment loss with
/// Adam. Both quantizer losses are averaged over the frames of the batch.
///
/// With [`CodebookLearning::Ema`] prototypes follow the moving-average rule
/// and dead ones are reseeded after every step; the codebook loss does not
/// enter the gradient and is recorded for monitoring only. With
/// [`CodebookLearning::Gradient`] the codebook loss joins the objective and
/// the prototypes are updated by their own Adam state.
pub fn train(model: &mut BottleneckModel, corpus: &Corpus, train_ids: &[usize]) -> Result<Vec<StepRecord>> {
    if train_ids.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if corpus.config.frame_dim != model.input_dim || corpus.config.num_content_classes != model.num_classes {
        return Err(Error::Config(format!(
            "corpus has {} dims and {} classes, model expects {} and {}",
            corpus.config.frame_dim, corpus.config.num_content_classes, model.input_dim, model.num_classes
        )));
    }
    let cfg = model.config.clone();
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut state = AdamState::for_params(&model.params);
    let gradient_codebook = cfg.codebook_learning == CodebookLearning::Gradient;
    let mut codebook_state = model
        .codebook
        .as_ref()
        .map(|cb| AdamState::for_params(std::slice::from_ref(cb.prototypes())));
    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut reseed_rng = stream(cfg.seed, RESEED_STREAM);
    let mut order = train_ids.to_vec();
    let mut history: Vec<StepRecord> = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(cfg.batch_utterances) {
            let mut parts = Vec::with_capacity(batch.len());
            let mut labels = Vec::new();
            for &id in batch {
                let utt = corpus.utterance(id);
                parts.push(subsample(&utt.frames, cfg.subsample_stride));
                labels.extend(subsample_labels(&utt.content_labels, cfg.subsample_stride));
            }
            let x = stack_rows(&parts, model.input_dim)?;
            let frames = x.rows() as f64;

            let mut tape = crate::autodiff::Tape::new();
            let vars = model.record_params(&mut tape, true);
            let xv = tape.constant(x);
            let h = model.record_encoder(&mut tape, &vars, xv)?;
            let h_val = tape.value(h).clone();

            let quantized = match &model.codebook {
                Some(cb) => Some(quantize(&h_val, cb)?),
                None => None,
            };
            let mut codebook_var = None;
            let mut codebook_term = None;
            let (q, commitment) = match &quantized {
                Some(qb) => {
                    let q = tape.straight_through(h, qb.q.clone())?;
                    let target = tape.constant(qb.q.clone());
                    let c = tape.squared_distance(h, target)?;
                    if gradient_codebook {
                        let cb = model.codebook.as_ref().expect("quantized implies codebook");
                        let e = tape.param(cb.prototypes().clone());
                        let chosen = tape.gather_rows(e, &qb.indices)?;
                        let l = vq_loss_on_tape(&mut tape, h, chosen)?;
                        codebook_var = Some(e);
                        codebook_term = Some(tape.scale(l, 1.0 / frames));
                    }
                    (q, Some(tape.scale(c, 1.0 / frames)))
                }
                None => (h, None),
            };
            let logits = model.record_classifier(&mut tape, &vars, q)?;
            let task = tape.softmax_cross_entropy(logits, &labels)?;
            let objective = match commitment {
                Some(c) => {
                    let weighted = tape.scale(c, cfg.beta);
                    tape.add(task, weighted)?
                }
                None => task,
            };
            let objective = match codebook_term {
                Some(l) => tape.add(objective, l)?,
                None => objective,
            };

            let task_value = tape.value(task).data()[0];
            let reg_value = commitment.map_or(0.0, |c| tape.value(c).data()[0]);
            let vq_value = match &quantized {
                Some(qb) => vq_loss(&qb.h, &qb.q)? * (1.0 / frames),
                None => 0.0,
            };
            let loss = combined_loss(task_value, vq_value, reg_value, cfg.beta)?;
            if !loss.total.is_finite() {
                return Err(diverged(&history, epoch, batch, &loss));
            }

            tape.backward(objective)?;
            let grads: Vec<Tensor2D> = vars
                .iter()
                .zip(&model.params)
                .map(|(&v, p)| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor2D::zeros(p.rows(), p.cols()))
                })
                .collect();
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(&history, epoch, batch, &loss));
            }
            let codebook_grad = match codebook_var {
                Some(e) => {
                    let g = tape.grad(e).cloned().expect("prototypes are on the tape");
                    if !g.is_finite() {
                        return Err(diverged(&history, epoch, batch, &loss));
                    }
                    Some(g)
                }
                None => None,
            };
            adam_step(&mut model.params, &grads, &mut state, &adam)?;

            let perplexity = match (&mut model.codebook, &quantized) {
                (Some(cb), Some(qb)) => {
                    let p = codebook_perplexity(&qb.indices, cb.size())?;
                    match (codebook_grad, codebook_state.as_mut()) {
                        (Some(g), Some(st)) => {
                            let mut protos = vec![cb.prototypes().clone()];
                            adam_step(&mut protos, &[g], st, &adam)?;
                            cb.set_prototypes(protos.pop().expect("one tensor"))?;
                        }
                        _ => {
                            cb.ema_update(&qb.h, &qb.indices)?;
                            cb.dead_code_reseed(&qb.h, cfg.dead_code_threshold, &mut reseed_rng)?;
                        }
                    }
                    Some(p)
                }
                _ => None,
            };
            history.push(StepRecord {
                step: history.len(),
                epoch,
                loss,
                perplexity,
            });
        }
    }
    Ok(history)
}

fn diverged(history: &[StepRecord], epoch: usize, batch: &[usize], loss: &LossBreakdown) -> Error {
    let last = match history.last() {
        Some(r) => format!(
            "last finite step {}: task={} l_vq={} l_vq_reg={} total={}",
            r.step, r.loss.task_loss, r.loss.l_vq, r.loss.l_vq_reg, r.loss.total
        ),
        None => "no finite step recorded".into(),
    };
    Error::Numerical(format!(
        "training diverged at step {} (epoch {epoch}, utterances {batch:?}): task={} l_vq={} \
         l_vq_reg={}; {last}",
        history.len(),
        loss.task_loss,
        loss.l_vq,
        loss.l_vq_reg
    ))
}

/// One row per step under [`LOSS_CSV_HEADER`].
pub fn loss_history_csv(history: &[StepRecord]) -> String {
    let mut out = String::with_capacity(64 * (history.len() + 1));
    out.push_str(LOSS_CSV_HEADER);
    out.push('\n');
    for r in history {
        let p = r.perplexity.map_or_else(|| "none".to_string(), |p| p.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.step, r.loss.task_loss, r.loss.l_vq, r.loss.l_vq_reg, r.loss.total, p
        )
        .expect("write to String");
    }
    out
}
