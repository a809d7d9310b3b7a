//! Exact discrete machinery against brute-force enumeration and sampling oracles.

use kpomdp::exact::qmdp_default;
use kpomdp::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng as _, SeedableRng};

fn stochastic_rows(rng: &mut Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(0.05..1.0));
    for mut r in m.row_iter_mut() {
        r /= r.sum();
    }
    m
}

fn random_pomdp(rng: &mut Rng, s: usize, a: usize, o: usize, discount: f64) -> DiscretePomdp {
    let transition = (0..a).map(|_| stochastic_rows(rng, s, s)).collect();
    let observation = stochastic_rows(rng, s, o);
    let reward = DMatrix::from_fn(s, a, |_, _| rng.random_range(-1.0..1.0));
    DiscretePomdp::new(transition, observation, reward, discount).unwrap()
}

fn random_belief(rng: &mut Rng, s: usize) -> DVector<f64> {
    let b = DVector::from_fn(s, |_, _| rng.random_range(0.01..1.0));
    &b / b.sum()
}

#[test]
fn posterior_matches_joint_enumeration() {
    let mut rng = Rng::seed_from_u64(1);
    for _ in 0..20 {
        let m = random_pomdp(&mut rng, 4, 3, 3, 0.9);
        let b = random_belief(&mut rng, 4);
        for a in 0..3 {
            for o in 0..3 {
                let mut joint = [0.0; 4];
                for s in 0..4 {
                    for s2 in 0..4 {
                        joint[s2] += b[s] * m.transition[a][(s, s2)] * m.observation[(s2, o)];
                    }
                }
                let p: f64 = joint.iter().sum();
                let post = exact_belief_update(&m, &b, a, o).unwrap();
                for s2 in 0..4 {
                    assert!((post[s2] - joint[s2] / p).abs() < 1e-12);
                }
                assert!((post.sum() - 1.0).abs() < 1e-12);
                assert!(post.iter().all(|x| *x >= 0.0));
            }
        }
    }
}

/// Best action-observation tree value by enumerating the full sequence space,
/// weighting each terminal belief by its path probability.
fn flat_enumeration(m: &DiscretePomdp, b: &DVector<f64>, depth: usize) -> f64 {
    if depth == 0 {
        return (0..m.num_actions())
            .map(|a| m.reward.column(a).dot(b))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    let mut best = f64::NEG_INFINITY;
    for a in 0..m.num_actions() {
        let mut q = m.reward.column(a).dot(b);
        for o in 0..m.num_observations() {
            let mut joint = DVector::<f64>::zeros(b.len());
            for s in 0..b.len() {
                for s2 in 0..b.len() {
                    joint[s2] += b[s] * m.transition[a][(s, s2)] * m.observation[(s2, o)];
                }
            }
            let p: f64 = joint.sum();
            if p > 0.0 {
                q += m.discount * p * flat_enumeration(m, &(joint / p), depth - 1);
            }
        }
        best = best.max(q);
    }
    best
}

#[test]
fn value_iteration_matches_sequence_enumeration() {
    let mut rng = Rng::seed_from_u64(2);
    for _ in 0..10 {
        let m = random_pomdp(&mut rng, 2, 2, 2, 0.9);
        let b = random_belief(&mut rng, 2);
        let v = exact_value_iteration(&m, &b, 3, &m.reward).unwrap();
        assert!((v.value - flat_enumeration(&m, &b, 3)).abs() < 1e-12);
    }
}

#[test]
fn qmdp_matches_long_finite_horizon_backup() {
    // 3-state chain: move right or stay, reward at the end
    let right = DMatrix::from_row_slice(3, 3, &[0.1, 0.9, 0.0, 0.0, 0.1, 0.9, 0.0, 0.0, 1.0]);
    let stay = DMatrix::identity(3, 3);
    let reward = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.0, 0.2, 1.0, 1.0]);
    let m = DiscretePomdp::new(vec![right, stay], DMatrix::identity(3, 3), reward, 0.5).unwrap();
    let mut q = m.reward.clone();
    for _ in 0..50 {
        let v: Vec<f64> = (0..3).map(|s| q.row(s).max()).collect();
        let v = DVector::from_vec(v);
        q = DMatrix::from_fn(3, 2, |s, a| m.reward[(s, a)] + m.discount * m.transition[a].row(s).transpose().dot(&v));
    }
    let table = qmdp(&m, 10_000, 1e-12);
    assert!((table - q).amax() < 1e-8);
}

#[test]
fn qmdp_bounds_the_pomdp_value() {
    let mut rng = Rng::seed_from_u64(3);
    for _ in 0..10 {
        let m = random_pomdp(&mut rng, 3, 2, 2, 0.9);
        let q = qmdp_default(&m);
        for _ in 0..5 {
            let b = random_belief(&mut rng, 3);
            let bound = (0..2).map(|a| q.column(a).dot(&b)).fold(f64::NEG_INFINITY, f64::max);
            for d in 0..4 {
                assert!(bound >= exact_value_iteration(&m, &b, d, &q).unwrap().value - 1e-8);
            }
        }
    }
}

#[test]
fn value_error_shrinks_geometrically_with_depth() {
    let mut rng = Rng::seed_from_u64(4);
    let m = random_pomdp(&mut rng, 2, 2, 2, 0.5);
    let zero = DMatrix::zeros(2, 2);
    let scale = m.reward.amax() / (1.0 - m.discount);
    for _ in 0..10 {
        let b = random_belief(&mut rng, 2);
        let reference = exact_value_iteration(&m, &b, 9, &zero).unwrap().value;
        let slack = m.discount.powi(9) * scale;
        for d in 0..6 {
            let err = (exact_value_iteration(&m, &b, d, &zero).unwrap().value - reference).abs();
            assert!(err <= m.discount.powi(d as i32) * scale + slack, "depth {d}: {err}");
        }
    }
}

#[test]
fn histogram_rows_stay_within_multinomial_bands() {
    let m = oracle::pomdp(0.9);
    let env = DiscreteEnv::new(m.clone());
    let mut rng = Rng::seed_from_u64(5);
    let n = 10_000;
    let data = collect_dataset(&env, n, CollectMode::Restart, 0, &mut rng).unwrap();
    let est = histogram_estimate(&data, 2, 2, 2, 0.9).unwrap();
    let mut sa = DMatrix::<f64>::zeros(2, 2);
    let mut s_count = [0.0; 2];
    for r in &data.records {
        let s = r.state.symbol().unwrap();
        sa[(s, r.action)] += 1.0;
        s_count[s] += 1.0;
    }
    for a in 0..2 {
        for s in 0..2 {
            for s2 in 0..2 {
                let p = m.transition[a][(s, s2)];
                let sigma = (p * (1.0 - p) / sa[(s, a)]).sqrt();
                assert!((est.transition[a][(s, s2)] - p).abs() <= 3.0 * sigma);
            }
        }
    }
    for s in 0..2 {
        for o in 0..2 {
            let p = m.observation[(s, o)];
            let sigma = (p * (1.0 - p) / s_count[s]).sqrt();
            assert!((est.observation[(s, o)] - p).abs() <= 3.0 * sigma);
        }
    }
}

#[test]
fn grid_qmdp_survives_histogram_estimation() {
    let grid = GridWorld::default();
    let truth = grid.to_pomdp(0.95).unwrap();
    let mut rng = Rng::seed_from_u64(6);
    let data = collect_dataset(&grid, 100_000, CollectMode::Trajectory, 0, &mut rng).unwrap();
    let est = histogram_estimate(&data, grid.num_cells(), 4, 9, 0.95).unwrap();
    let gap = (qmdp_default(&truth) - qmdp_default(&est)).amax();
    assert!(gap < 0.05, "{gap}");
}
