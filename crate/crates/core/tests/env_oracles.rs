//! Simulators against frequency, distribution and integration oracles.

use kpomdp::envs::wrap_angle;
use kpomdp::*;
use ode_solvers::dopri5::Dopri5;
use ode_solvers::{System, Vector2};
use rand::SeedableRng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn goal_teleport_is_uniform_over_non_goal_cells() {
    let grid = GridWorld::default();
    let mut rng = Rng::seed_from_u64(1);
    let draws = 10_000;
    let mut counts = vec![0usize; grid.num_cells()];
    for i in 0..draws {
        let st = grid.step(&grid.goal, i % 4, &mut rng);
        assert_eq!(st.reward, 1.0);
        counts[grid.index(st.state)] += 1;
    }
    let g = grid.index(grid.goal);
    assert_eq!(counts[g], 0);
    let cells = grid.num_cells() - 1;
    let expected = draws as f64 / cells as f64;
    let chi2: f64 = (0..grid.num_cells())
        .filter(|&c| c != g)
        .map(|c| (counts[c] as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 0.001, "chi2 {chi2} p {p}");
}

#[test]
fn wall_patterns_partition_the_grid() {
    let grid = GridWorld::default();
    let mut rng = Rng::seed_from_u64(0);
    let mut counts = vec![0usize; 9];
    for i in 0..grid.num_cells() {
        counts[grid.observe(&grid.cell(i), &mut rng).symbol().unwrap()] += 1;
    }
    assert_eq!(counts, [64, 8, 8, 8, 8, 1, 1, 1, 1]);
}

#[test]
fn random_walk_stays_in_bounds() {
    let grid = GridWorld::default();
    let mut rng = Rng::seed_from_u64(2);
    let data = collect_dataset(&grid, 4 * grid.size * 50, CollectMode::Trajectory, 0, &mut rng).unwrap();
    for r in &data.records {
        assert!(r.next_state.symbol().unwrap() < grid.num_cells());
    }
}

struct Field(Pendulum, f64);

impl System<f64, Vector2<f64>> for Field {
    fn system(&self, _t: f64, y: &Vector2<f64>, dy: &mut Vector2<f64>) {
        dy[0] = y[1];
        dy[1] = self.0.acceleration(y[0], y[1], self.1);
    }
}

fn reference_step(env: &Pendulum, theta: f64, omega: f64, u: f64) -> (f64, f64) {
    let mut solver = Dopri5::new(Field(env.clone(), u), 0.0, env.dt, env.dt / 10.0, Vector2::new(theta, omega), 1e-12, 1e-12);
    solver.integrate().unwrap();
    assert!((solver.x_out().last().unwrap() - env.dt).abs() < 1e-12);
    let y = solver.y_out().last().unwrap();
    (y[0], y[1])
}

#[test]
fn one_step_matches_adaptive_integration() {
    let env = Pendulum::default();
    let mut rng = Rng::seed_from_u64(0);
    let st = env.step(&(0.1, 0.0), 3, &mut rng);
    let (theta, _) = reference_step(&env, 0.1, 0.0, 0.0);
    assert!((st.state.0 - theta).abs() < 1e-6, "{} vs {theta}", st.state.0);
    for (t, w, a) in [(0.5, -1.0, 0), (-0.9, 2.5, 6), (0.0, 0.3, 2)] {
        let st = env.step(&(t, w), a, &mut rng);
        let (rt, rw) = reference_step(&env, t, w, env.forces[a]);
        assert!((st.state.0 - wrap_angle(rt)).abs() < 1e-6);
        assert!((st.state.1 - rw).abs() < 1e-5);
    }
}

#[test]
fn unforced_energy_drift_is_small() {
    let env = Pendulum::default();
    let (mut t, mut w) = (0.3, 0.5);
    let e0 = env.energy(t, w);
    for _ in 0..100 {
        (t, w) = env.integrate(t, w, 0.0);
    }
    let drift = (env.energy(t, w) - e0).abs() / e0.abs();
    assert!(drift < 0.01, "{drift}");
}

#[test]
fn trajectory_actions_are_uniform() {
    let grid = GridWorld::default();
    let mut rng = Rng::seed_from_u64(3);
    let n = 10_000;
    let data = collect_dataset(&grid, n, CollectMode::Trajectory, 0, &mut rng).unwrap();
    let mut counts = [0usize; 4];
    for r in &data.records {
        counts[r.action] += 1;
    }
    let p = 0.25;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma, "{counts:?}");
    }
}

/// Asymptotic Kolmogorov distribution tail with the small-sample correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        p += 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
    }
    p.clamp(0.0, 1.0)
}

#[test]
fn restart_angles_are_uniform() {
    let env = Pendulum::default();
    let mut rng = Rng::seed_from_u64(4);
    let n = 10_000;
    let data = collect_dataset(&env, n, CollectMode::Restart, 0, &mut rng).unwrap();
    let r = env.theta_range;
    let mut theta: Vec<f64> = data.states().iter().map(|p| p.coords().unwrap()[0]).collect();
    theta.sort_by(f64::total_cmp);
    let d = theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = (t + r) / (2.0 * r);
            (f - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - f)
        })
        .fold(0.0, f64::max);
    let p = ks_p_value(d, n);
    assert!(p > 0.001, "D {d} p {p}");
}

#[test]
fn tuples_replay_through_the_simulator() {
    let env = Pendulum::default();
    let mut rng = Rng::seed_from_u64(5);
    let data = collect_dataset(&env, 200, CollectMode::Restart, 0, &mut rng).unwrap();
    for r in &data.records {
        let s = env.from_point(&r.state).unwrap();
        let st = env.step(&s, r.action, &mut rng);
        assert_eq!(env.to_point(&st.state), r.next_state);
        assert_eq!(st.reward, r.reward);
        assert_eq!(env.observe(&s, &mut rng), r.observation);
    }
}

