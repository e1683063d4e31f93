//! Density-reweighted preference optimisation.

mod density;
mod dpo;
mod margins;

pub use density::{
    joint_probability, pair_weight, reweight_dataset, BetaMode, BinSummary, ReweightConfig, ScoreHistogram,
    DEFAULT_ALPHA, DEFAULT_BIN_WIDTH,
};
pub use dpo::{
    dpo_loss, dpo_row, mean_dpo_loss, phydpo_loss, phydpo_loss_and_grad, train_toy, DpoConfig, PairIndex, PairLoss,
    RowLoss, ToyPolicy, TrainOutcome, DEFAULT_GAMMA,
};
pub use margins::{margin_gains, MarginComparison, MarginGain};
