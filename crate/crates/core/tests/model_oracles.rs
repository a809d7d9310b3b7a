//! Trained-model, planner and controller behaviour against exact or sampled references.

use std::sync::Arc;

use kpomdp::exact::{exact_init_value, qmdp_default};
use kpomdp::online::episode_rng;
use kpomdp::*;
use nalgebra::DVector;
use rand::{Rng as _, SeedableRng};

fn pendulum_model(n: usize) -> (Pendulum, TrainedModel) {
    let env = Pendulum::default();
    let mut rng = Rng::seed_from_u64(8);
    let data = collect_dataset(&env, n, CollectMode::Restart, 0, &mut rng).unwrap();
    let states = data.states();
    let med = kernel::coordinate_medians(&states, 2).unwrap();
    let params = ModelParams {
        state_kernel: KernelSpec::gaussian(vec![med[0] / 30.0, med[1] / 10.0]).unwrap(),
        action_kernel: KernelSpec::Delta,
        obs_kernel: KernelSpec::gaussian(vec![med[0] / 30.0]).unwrap(),
        regularizers: Regularizers::default_for(n),
        kbr: KbrVariant::Plain,
        low_rank: LowRank::Off,
    };
    let m = TrainedModel::train(&data, &env.action_points(), params).unwrap();
    (env, m)
}

#[test]
fn initial_weights_concentrate_on_the_observed_angle() {
    let (env, m) = pendulum_model(2000);
    let KernelSpec::GaussianProduct { bandwidths } = &m.params().state_kernel else {
        panic!("gaussian state kernel");
    };
    let width = bandwidths[0];
    let mut rng = Rng::seed_from_u64(9);
    for _ in 0..10 {
        let s = env.uniform_state(&mut rng);
        let o = env.observe(&s, &mut rng);
        let alpha = normalize(&m.initial_belief(&o).unwrap()).unwrap();
        let near: f64 = m
            .states()
            .iter()
            .zip(alpha.iter())
            .filter(|(p, _)| (p.coords().unwrap()[0] - s.0).abs() <= width)
            .map(|(_, a)| a)
            .sum();
        assert!(near >= 0.8, "{near}");
        let omegas: Vec<f64> = m
            .states()
            .iter()
            .zip(alpha.iter())
            .filter(|(_, a)| **a > 1e-3)
            .map(|(p, _)| p.coords().unwrap()[1])
            .collect();
        let spread = omegas.iter().copied().fold(f64::MIN, f64::max) - omegas.iter().copied().fold(f64::MAX, f64::min);
        assert!(spread > 1.0, "{spread}");
    }
}

#[test]
fn training_observations_give_valid_initial_beliefs() {
    let (_, m) = pendulum_model(300);
    for o in m.observations().iter().take(50) {
        match normalize(&m.initial_belief(o).unwrap()) {
            Ok(b) => {
                assert!((b.sum() - 1.0).abs() < 1e-12);
                assert!(b.iter().all(|x| *x >= 0.0));
            }
            Err(e) => assert!(matches!(e, Error::DegenerateWeights)),
        }
    }
}

#[test]
fn uniform_weights_estimate_the_mean() {
    let mut rng = Rng::seed_from_u64(10);
    let sigma = (1.0f64 / 5.0 - 1.0 / 9.0).sqrt();
    for n in [100, 1000, 10_000] {
        let f = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0f64).powi(2));
        let alpha = DVector::from_element(n, 1.0 / n as f64);
        let est = expectation(&alpha, &f).unwrap();
        assert!((est - 1.0 / 3.0).abs() <= 3.0 * sigma / (n as f64).sqrt(), "n={n}: {est}");
    }
}

#[test]
fn reward_table_agrees_with_the_environment() {
    let (env, m) = pendulum_model(100);
    let table = build_reward_table(|p, a| env.reward_at(p, a), m.states(), 7).unwrap();
    for (i, p) in m.states().iter().enumerate() {
        let s = env.from_point(p).unwrap();
        for a in 0..7 {
            assert_eq!(table.column(a)[i], env.reward(&s, a));
        }
    }
}

#[test]
fn initial_value_matches_the_exact_initial_value() {
    let pomdp = oracle::pomdp(0.9);
    let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off)).unwrap();
    let rewards = oracle::rewards(&pomdp, &m);
    for b in oracle::beliefs() {
        let (v, a) = init_value(&oracle::weights_for(&m, &b), &rewards);
        let e = exact_init_value(&b, &pomdp.reward);
        assert!((v - e.value).abs() < 1e-12);
        assert_eq!(a, e.action);
    }
}

#[test]
fn pruning_preserves_decisions_on_the_oracle() {
    let pomdp = oracle::pomdp(0.9);
    let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off)).unwrap();
    let rewards = oracle::rewards(&pomdp, &m);
    let q = qmdp_on_samples(&qmdp_default(&pomdp), m.states(), |p| p.symbol()).unwrap();
    for depth in [1, 2, 3] {
        let plain = PlanConfig {
            depth,
            discount: 0.9,
            init_mode: InitMode::Qmdp,
            ..PlanConfig::default()
        };
        let pruned = PlanConfig {
            pruning: true,
            ..plain.clone()
        };
        for b in oracle::beliefs() {
            let alpha = oracle::weights_for(&m, &b);
            let x = kernel_value_iteration(&m, &alpha, &plain, &rewards, &q).unwrap();
            let y = kernel_value_iteration(&m, &alpha, &pruned, &rewards, &q).unwrap();
            assert!((x.value - y.value).abs() < 1e-12);
            assert_eq!(x.action, y.action);
        }
    }
}

#[test]
fn kernel_controller_follows_the_exact_controller() {
    let pomdp = oracle::pomdp(0.9);
    let env = DiscreteEnv::new(pomdp.clone());
    let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off)).unwrap();
    let rewards = oracle::rewards(&pomdp, &m);
    let cfg = PlanConfig {
        depth: 2,
        discount: 0.9,
        ..PlanConfig::default()
    };
    let model = Arc::new(pomdp.clone());
    let q0 = Arc::new(pomdp.reward.clone());
    for ep in 0..10 {
        let mut kernel = KernelController::new(&m, &cfg, &rewards, &rewards);
        let mut exact = ExactController::new(model.clone(), q0.clone(), 2, env.prior.clone(), ExactController::symbols());
        let a = run_episode(&env, &mut kernel, 30, 0.9, &mut episode_rng(3, ep)).unwrap();
        let b = run_episode(&env, &mut exact, 30, 0.9, &mut episode_rng(3, ep)).unwrap();
        let actions = |log: &EpisodeLog| log.steps.iter().map(|s| s.action).collect::<Vec<_>>();
        assert_eq!(actions(&a), actions(&b), "episode {ep}");
        assert!(a.steps.iter().all(|s| !s.reset));
    }
}

#[test]
fn unseen_observation_resets_the_belief() {
    let pomdp = oracle::pomdp(0.9);
    let mut data = oracle::dataset(&pomdp);
    data.records
        .retain(|r| r.observation != Point::Symbol(1) && r.next_observation != Point::Symbol(1));
    let actions: Vec<Point> = (0..2).map(Point::Symbol).collect();
    let m = TrainedModel::train(&data, &actions, oracle::params(1e-6, KbrVariant::Plain, LowRank::Off)).unwrap();
    let rewards = oracle::rewards(&pomdp, &m);
    let cfg = PlanConfig::default();
    let mut c = KernelController::new(&m, &cfg, &rewards, &rewards);
    c.start(&Point::Symbol(0)).unwrap();
    let unseen = Point::Symbol(1);
    assert!(c.update(0, 0.0, &unseen).unwrap());
    assert_eq!(c.belief().unwrap(), &m.initial_belief(&unseen).unwrap());

    let mut strict = KernelController::new(&m, &cfg, &rewards, &rewards);
    strict.reset_enabled = false;
    strict.start(&Point::Symbol(0)).unwrap();
    assert!(strict.update(0, 0.0, &unseen).is_err());
}

#[test]
fn episode_logs_are_consistent() {
    let pomdp = oracle::pomdp(0.9);
    let env = DiscreteEnv::new(pomdp.clone());
    let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off)).unwrap();
    let rewards = oracle::rewards(&pomdp, &m);
    let cfg = PlanConfig {
        discount: 0.9,
        ..PlanConfig::default()
    };
    let make = || KernelController::new(&m, &cfg, &rewards, &rewards);

    let empty = run_episode(&env, &mut make(), 0, 0.9, &mut episode_rng(1, 0)).unwrap();
    assert!(empty.steps.is_empty());
    assert_eq!(empty.discounted_return, 0.0);

    let log = run_episode(&env, &mut make(), 50, 0.9, &mut episode_rng(1, 1)).unwrap();
    assert_eq!(log.steps.len(), 50);
    assert!((log.recompute_discounted(0.9) - log.discounted_return).abs() < 1e-12);

    let one = evaluate(&env, make, 20, 1, 0.9, ReturnKind::Discounted, 5).unwrap();
    assert_eq!(one.mean, one.logs[0].discounted_return);
    assert_eq!(one.stderr, 0.0);

    let a = evaluate(&env, make, 20, 6, 0.9, ReturnKind::Discounted, 5).unwrap();
    let b = evaluate(&env, make, 20, 6, 0.9, ReturnKind::Discounted, 5).unwrap();
    assert_eq!(a, b);
}
