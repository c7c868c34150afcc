//! Vector-quantization bottleneck.
//!
//! Each latent frame is replaced by its nearest prototype from a finite
//! dictionary. Gradients pass the non-differentiable lookup by the
//! straight-through rule, the encoder is pulled toward its prototypes by a
//! commitment penalty, and prototypes track the running mean of the frames
//! assigned to them.

mod codebook;
mod quantize;

pub use codebook::{
    codebook_perplexity, Codebook, DEFAULT_DEAD_THRESHOLD, DEFAULT_DECAY, DEFAULT_LAPLACE_EPS,
};
pub(crate) use codebook::{read_array, read_f64s};
pub use quantize::{
    combined_loss, commitment_loss, commitment_loss_on_tape, nearest_prototype, quantize, straight_through,
    vq_loss, vq_loss_on_tape, LossBreakdown, QuantizedBatch, DEFAULT_BETA,
};
