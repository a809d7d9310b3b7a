//! Nonparametric POMDP planning with kernel mean embeddings.
//!
//! Beliefs are weight vectors over training samples, updated with the kernel
//! Bayes' rule and scored by kernel value iteration. Exact discrete-model
//! baselines and two simulated environments are included.

pub mod dataset;
pub mod embed;
pub mod envs;
pub mod error;
pub mod exact;
pub mod kernel;
pub mod linalg;
pub mod online;
pub mod oracle;
pub mod plan;

pub use dataset::{Dataset, Space, Spaces, Transition};
pub use embed::{
    expectation, normalize, BeliefWeights, KbrVariant, ModelParams, PosteriorOperator,
    Regularizers, TrainedModel,
};
pub use envs::{
    collect_dataset, exhaustive_dataset, CollectMode, DiscreteEnv, Environment, GridWorld, Pendulum,
    Rng,
};
pub use error::{Error, Result};
pub use exact::{
    exact_belief_update, exact_value_iteration, histogram_estimate, qmdp, qmdp_on_samples, Belief,
    DiscretePomdp, ExactPlan,
};
pub use kernel::{KernelChoice, KernelSpec, MedianSource, MedianSpread, Point};
pub use linalg::LowRank;
pub use online::{
    evaluate, run_episode, Controller, EpisodeLog, ExactController, KernelController, ReturnKind,
    Summary,
};
pub use plan::{
    build_reward_table, init_value, kernel_value_iteration, qmdp_prune, ActionTable, InitMode,
    InitQTable, PlanConfig, PlanResult, RewardTable,
};
