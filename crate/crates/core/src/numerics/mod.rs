//! Dense neural-network substrate: matrices, layers, losses, optimizers,
//! a seeded random stream and a finite-difference gradient checker.

mod gradcheck;
mod layer;
mod loss;
mod matrix;
mod optim;
mod rng;

pub use gradcheck::{gradcheck, GradcheckReport, Probe};
pub use layer::{Activation, DenseLayer, LayerGrads, Network};
pub use loss::{mse_loss, softmax_xent_loss};
pub use matrix::Matrix;
pub use optim::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, Param};
pub use rng::{mix_seed, tag_of, Rng};

/// Bytes per stored parameter or activation value.
pub const F32_BYTES: u64 = 4;

/// Splits `0..n` into consecutive batches of at most `size` (the last one may be partial).
pub fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size.max(1))
}
