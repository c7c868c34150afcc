use super::Codebook;
use crate::autodiff::{Tape, Tensor2D, Var};
use crate::error::{Error, Result};

/// Latents `h`, their nearest prototypes `q`, and the prototype indices.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBatch {
    pub h: Tensor2D,
    pub q: Tensor2D,
    pub indices: Vec<usize>,
}

/// Index of the prototype nearest to `x` in squared Euclidean distance.
/// Ties go to the lowest index.
pub fn nearest_prototype(x: &[f64], prototypes: &Tensor2D) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, e) in prototypes.row_iter().enumerate() {
        let d: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Replaces every row of `h` with its nearest prototype.
pub fn quantize(h: &Tensor2D, codebook: &Codebook) -> Result<QuantizedBatch> {
    if h.cols() != codebook.dim() {
        return Err(Error::shape(
            "quantize",
            format!("latent dim {} vs codebook dim {}", h.cols(), codebook.dim()),
        ));
    }
    if h.rows() == 0 {
        return Err(Error::InvalidArgument("quantize needs at least one frame".into()));
    }
    let indices: Vec<usize> = h
        .row_iter()
        .map(|row| nearest_prototype(row, codebook.prototypes()).0)
        .collect();
    let q = codebook.prototypes().select_rows(&indices);
    Ok(QuantizedBatch {
        h: h.clone(),
        q,
        indices,
    })
}

/// Records the quantized value on the tape with a straight-through backward
/// rule: the gradient arriving at the output is handed to `h` unchanged.
pub fn straight_through(tape: &mut Tape, h: Var, q: &Tensor2D) -> Result<Var> {
    tape.straight_through(h, q.clone())
}

fn check_pair(op: &'static str, h: &Tensor2D, q: &Tensor2D) -> Result<()> {
    if !h.same_shape(q) {
        return Err(Error::shape(
            op,
            format!("h {:?} vs q {:?}", h.shape(), q.shape()),
        ));
    }
    Ok(())
}

fn sum_sq(h: &Tensor2D, q: &Tensor2D) -> f64 {
    h.data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Codebook loss `sum_j ||sg[h_j] - q_j||^2` (value only).
pub fn vq_loss(h: &Tensor2D, q: &Tensor2D) -> Result<f64> {
    check_pair("vq_loss", h, q)?;
    Ok(sum_sq(h, q))
}

/// Commitment loss `sum_j ||h_j - sg[q_j]||^2` (value only).
pub fn commitment_loss(h: &Tensor2D, q: &Tensor2D) -> Result<f64> {
    check_pair("commitment_loss", h, q)?;
    Ok(sum_sq(h, q))
}

/// Codebook loss on the tape; only `q` (and whatever produced it) receives
/// a gradient.
pub fn vq_loss_on_tape(tape: &mut Tape, h: Var, q: Var) -> Result<Var> {
    let h_stopped = tape.detach(h);
    tape.squared_distance(h_stopped, q)
}

/// Commitment loss on the tape; only `h` receives a gradient.
pub fn commitment_loss_on_tape(tape: &mut Tape, h: Var, q: Var) -> Result<Var> {
    let q_stopped = tape.detach(q);
    tape.squared_distance(h, q_stopped)
}

/// Per-step objective: task loss plus codebook loss plus weighted commitment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub task_loss: f64,
    pub l_vq: f64,
    pub l_vq_reg: f64,
    pub beta: f64,
    pub total: f64,
}

pub const DEFAULT_BETA: f64 = 0.25;

pub fn combined_loss(task: f64, l_vq: f64, l_reg: f64, beta: f64) -> Result<LossBreakdown> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!("beta must be >= 0, got {beta}")));
    }
    Ok(LossBreakdown {
        task_loss: task,
        l_vq,
        l_vq_reg: l_reg,
        beta,
        total: task + l_vq + beta * l_reg,
    })
}
