//! Delta-kernel filter and planner against the exact discrete machinery.

use kpomdp::exact::{exact_belief_update, exact_value_iteration};
use kpomdp::oracle;
use kpomdp::plan::{kernel_value_iteration, InitMode, PlanConfig};
use kpomdp::{normalize, KbrVariant, LowRank, Point};

fn tv(a: &nalgebra::DVector<f64>, b: &nalgebra::DVector<f64>) -> f64 {
    0.5 * (a - b).abs().sum()
}

fn filter_error(variant: KbrVariant, low_rank: LowRank) -> f64 {
    let pomdp = oracle::pomdp(0.9);
    let m = oracle::train(&pomdp, oracle::params(1e-10, variant, low_rank)).unwrap();
    let mut worst: f64 = 0.0;
    for b in oracle::beliefs() {
        let alpha = normalize(&oracle::weights_for(&m, &b)).unwrap();
        for a in 0..2 {
            let beta = m.predict_obs_weights(&alpha, a).unwrap();
            let pred = oracle::aggregate_observations(&m, &normalize(&beta).unwrap(), 2);
            worst = worst.max(tv(&pred, &pomdp.predictive(&b, a).unwrap()));
            for o in 0..2 {
                let post = m.kbr_posterior(&beta, &Point::Symbol(o)).unwrap();
                let post = oracle::aggregate(&m, &normalize(&post).unwrap(), 2);
                let exact = exact_belief_update(&pomdp, &b, a, o).unwrap();
                worst = worst.max(tv(&post, &exact));
            }
        }
    }
    worst
}

#[test]
fn predictive_and_posterior_match_bayes_filter() {
    let e = filter_error(KbrVariant::Plain, LowRank::Off);
    assert!(e < 1e-4, "{e}");
}

#[test]
fn squared_variant_matches_bayes_filter() {
    assert!(filter_error(KbrVariant::Squared, LowRank::Off) < 1e-3);
}

#[test]
fn low_rank_path_matches_bayes_filter() {
    assert!(filter_error(KbrVariant::Plain, LowRank::Tolerance { tolerance: 1e-12 }) < 1e-4);
    assert!(filter_error(KbrVariant::Plain, LowRank::Rank { rank: 64, tolerance: 0.0 }) < 1e-4);
}

#[test]
fn variants_agree() {
    let pomdp = oracle::pomdp(0.9);
    let plain = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off)).unwrap();
    for b in oracle::beliefs() {
        let alpha = oracle::weights_for(&plain, &b);
        for a in 0..2 {
            let beta = plain.predict_obs_weights(&alpha, a).unwrap();
            for o in 0..2 {
                let x = plain.kbr_posterior(&beta, &Point::Symbol(o)).unwrap();
                let y = plain.kbr_posterior_squared(&beta, &Point::Symbol(o)).unwrap();
                assert!((x - y).amax() < 1e-3);
            }
        }
    }
}

#[test]
fn planner_matches_exact_value_iteration() {
    let pomdp = oracle::pomdp(0.9);
    let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off)).unwrap();
    let rewards = oracle::rewards(&pomdp, &m);
    for depth in [0, 1, 2, 3] {
        let cfg = PlanConfig {
            depth,
            discount: 0.9,
            init_mode: InitMode::Reward,
            ..PlanConfig::default()
        };
        for b in oracle::beliefs() {
            let alpha = oracle::weights_for(&m, &b);
            let k = kernel_value_iteration(&m, &alpha, &cfg, &rewards, &rewards).unwrap();
            let e = exact_value_iteration(&pomdp, &b, depth, &pomdp.reward).unwrap();
            assert!((k.value - e.value).abs() < 1e-4, "depth {depth} b {b:?}: {} vs {}", k.value, e.value);
            assert_eq!(k.action, e.action, "depth {depth} b {b:?}: {:?} vs {:?}", k.q_values, e.q_values);
        }
    }
}
