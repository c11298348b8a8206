//! Per-instance cache schedules from a small decision network.
//!
//! After a full-compute prefix the network reads the intermediate latent and
//! the conditioning and emits one cache probability per remaining step. A
//! Bernoulli sample (greedy threshold at inference) of those probabilities is
//! the schedule. Training maximizes `R = C + λQ`, where `C` is the fraction of
//! reuse steps and `Q` scores the output against full compute, with the
//! score-function gradient estimator and Adam.

pub mod adam;
pub mod net;
pub mod policy;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use net::{DecisionNet, DecisionNetConfig, ForwardCache, ParamSpec};
pub use policy::{
    compute_reward, greedy_actions, log_prob, log_prob_grad, quality_proxy, reinforce_grad, sample_actions, sigmoid,
    softplus, PolicySample, QualityOracle, Reward, RewardConfig,
};
pub use train::{
    build_instances, greedy_decisions, mean_decision, rollout, rollout_schedule, EpochStats, PolicyTrainer, RolloutSetup, TrainConfig,
    TrainingInstance,
};
