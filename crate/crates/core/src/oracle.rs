//! Two-state discrete POMDP with an exhaustive balanced dataset. Under delta
//! kernels and vanishing regularizers the kernel filter and planner reproduce
//! the exact Bayes filter and value iteration on it.

use nalgebra::{DMatrix, DVector};

use crate::dataset::Dataset;
use crate::embed::{KbrVariant, ModelParams, Regularizers, TrainedModel};
use crate::envs::exhaustive_dataset;
use crate::error::Result;
use crate::exact::DiscretePomdp;
use crate::kernel::{KernelSpec, Point};
use crate::linalg::LowRank;
use crate::plan::{build_reward_table, RewardTable};

/// Tuples per `(s, a)` pair in [`dataset`].
pub const PER_PAIR: usize = 16;

/// All probabilities are positive multiples of 1/4; rewards are asymmetric so
/// the test beliefs have no argmax ties.
pub fn pomdp(discount: f64) -> DiscretePomdp {
    DiscretePomdp::new(
        vec![
            DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]),
            DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]),
        ],
        DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.3, -0.2, 0.6]),
        discount,
    )
    .expect("valid fixture")
}

pub fn dataset(model: &DiscretePomdp) -> Dataset {
    exhaustive_dataset(model, PER_PAIR).expect("fixture probabilities are multiples of 1/16")
}

pub fn params(eps: f64, kbr: KbrVariant, low_rank: LowRank) -> ModelParams {
    ModelParams {
        state_kernel: KernelSpec::Delta,
        action_kernel: KernelSpec::Delta,
        obs_kernel: KernelSpec::Delta,
        regularizers: Regularizers::uniform(eps),
        kbr,
        low_rank,
    }
}

pub fn train(model: &DiscretePomdp, params: ModelParams) -> Result<TrainedModel> {
    let actions: Vec<Point> = (0..model.num_actions()).map(Point::Symbol).collect();
    TrainedModel::train(&dataset(model), &actions, params)
}

/// `b = (1 - p, p)` for `p = 0, 0.1, ..., 1`.
pub fn beliefs() -> Vec<DVector<f64>> {
    (0..=10)
        .map(|k| {
            let p = k as f64 / 10.0;
            DVector::from_vec(vec![1.0 - p, p])
        })
        .collect()
}

/// Sample weights `alpha_i = b(s_i) / #{j : s_j = s_i}`.
pub fn weights_for(m: &TrainedModel, b: &DVector<f64>) -> DVector<f64> {
    let states: Vec<usize> = m.states().iter().map(|p| p.symbol().expect("discrete")).collect();
    let mut counts = vec![0usize; b.len()];
    for &s in &states {
        counts[s] += 1;
    }
    DVector::from_iterator(states.len(), states.iter().map(|&s| b[s] / counts[s] as f64))
}

/// Aggregates weights on the sample states into a vector over discrete states.
pub fn aggregate(m: &TrainedModel, alpha: &DVector<f64>, num_states: usize) -> DVector<f64> {
    let mut out = DVector::zeros(num_states);
    for (p, a) in m.states().iter().zip(alpha.iter()) {
        out[p.symbol().expect("discrete")] += a;
    }
    out
}

/// Aggregates observation weights into a distribution over symbols.
pub fn aggregate_observations(m: &TrainedModel, beta: &DVector<f64>, num_obs: usize) -> DVector<f64> {
    let mut out = DVector::zeros(num_obs);
    for (p, b) in m.observations().iter().zip(beta.iter()) {
        out[p.symbol().expect("discrete")] += b;
    }
    out
}

pub fn rewards(model: &DiscretePomdp, m: &TrainedModel) -> RewardTable {
    build_reward_table(
        |s, a| Ok(model.reward[(s.symbol().expect("discrete"), a)]),
        m.states(),
        model.num_actions(),
    )
    .expect("finite rewards")
}
