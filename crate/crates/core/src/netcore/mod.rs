//! Residual MLP engine: forward/backward passes, Adam, gradient checks and
//! the checkpoint container.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod mlp;
mod scalar;

pub use adam::{adam_step, OptimizerState};
pub use checkpoint::{Checkpoint, LatentBlock, StatsBlock};
pub use mlp::{Activation, ForwardTrace, GradTarget, GradientBuffer, MlpShape, ResidualMlp};
pub use scalar::Real;

/// Hex SHA-256 over the little-endian bytes of a parameter vector.
pub fn param_hash<T: Real>(params: &[T]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in params {
        h.update(p.as_f64().to_le_bytes());
    }
    hex::encode(h.finalize())
}
