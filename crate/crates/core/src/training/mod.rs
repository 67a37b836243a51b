//! Set-prediction training: matching, loss, optimizer and the training loop.

pub mod hungarian;
pub mod loss;
pub mod optim;
pub mod trainer;

pub use hungarian::{hungarian_match, CostMatrix, MatchResult};
pub use loss::{compute_loss, match_cost, ImageTargets, LossBreakdown, LossWeights};
pub use optim::{Adam, AdamConfig};
pub use trainer::{train, LossRecord, Sample, TrainConfig};
