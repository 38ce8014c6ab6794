//! Minimal differentiable compute core with hand-derived gradients.

pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;

pub use attention::{AttentionBlock, AttentionCache};
pub use layers::{Activation, Linear, Mlp, MlpCache};
pub use loss::{mse, mse_matrix, softmax, softmax_ce};
pub use optim::{Adam, AdamConfig, LrSchedule};
pub use params::{read_checkpoint_header, CheckpointHeader, ParamId, ParamStore};
