//! Benchmark fixtures.

use kpomdp::{
    build_reward_table, collect_dataset, kernel, normalize, BeliefWeights, CollectMode,
    Environment, KbrVariant, KernelSpec, LowRank, ModelParams, Pendulum, Point, Regularizers, RewardTable, Rng,
    TrainedModel,
};
use rand::SeedableRng;

pub struct PendulumFixture {
    pub env: Pendulum,
    pub model: TrainedModel,
    pub rewards: RewardTable,
    pub belief: BeliefWeights,
    pub observation: Point,
}

/// Pendulum model on `n` restart samples with the benchmark kernel settings.
pub fn pendulum(n: usize, low_rank: LowRank) -> PendulumFixture {
    let env = Pendulum::default();
    let mut rng = Rng::seed_from_u64(7);
    let data = collect_dataset(&env, n, CollectMode::Restart, 0, &mut rng).expect("collect");
    let states = data.states();
    let med = kernel::coordinate_medians(&states, 2).expect("median");
    let params = ModelParams {
        state_kernel: KernelSpec::gaussian(vec![med[0] / 30.0, med[1] / 10.0]).expect("kernel"),
        action_kernel: KernelSpec::Delta,
        obs_kernel: KernelSpec::gaussian(vec![med[0] / 30.0]).expect("kernel"),
        regularizers: Regularizers::default_for(n),
        kbr: KbrVariant::Plain,
        low_rank,
    };
    let model = TrainedModel::train(&data, &env.action_points(), params).expect("train");
    let rewards = build_reward_table(|p, a| env.reward_at(p, a), model.states(), env.num_actions()).expect("rewards");
    let s = env.initial_state(&mut rng);
    let observation = env.observe(&s, &mut rng);
    let belief = normalize(&model.initial_belief(&observation).expect("belief")).expect("normalize");
    PendulumFixture {
        env,
        model,
        rewards,
        belief,
        observation,
    }
}
