//! Verification suite: oracle equivalence, operator properties, micro
//! invariants and, with `full`, the end-to-end benchmark criteria.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use kpomdp::exact::{exact_belief_update, exact_value_iteration};
use kpomdp::oracle;
use kpomdp::plan::{bellman_operator, expand, Backup};
use kpomdp::{
    build_reward_table, collect_dataset, expectation, kernel_value_iteration, normalize, CollectMode, Environment,
    GridWorld, InitMode, KbrVariant, KernelSpec, LowRank, ModelParams, Pendulum, PlanConfig, Point, Regularizers,
    RewardTable, Rng, TrainedModel,
};
use nalgebra::{DVector, SymmetricEigen};
use rand::{Rng as _, SeedableRng};

use crate::config::{ControllerKind, ExperimentConfig, Preset};
use crate::error::Result;
use crate::experiment::{run_sweep, ControllerRun};
use crate::results::RESULT_HEADER;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: &'static str,
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
    pub secs: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "{status} {} {}: {} ({:.1} s)", self.id, self.name, self.detail, self.secs)
    }
}

/// Deliberate defects used to confirm that the checks can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mutation {
    #[default]
    None,
    /// Negates the observation features entering the posterior.
    FlipPosteriorSign,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    /// Also run the benchmark sweeps.
    pub full: bool,
    /// Corrected (normalized) operator; the operator-property check is skipped without it.
    pub corrected: Option<bool>,
    pub mutation: Mutation,
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn get(&self, id: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.id == id)
    }
}

fn timed(id: &'static str, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (status, detail) = match f() {
        Ok((ok, detail)) => (if ok { Status::Pass } else { Status::Fail }, detail),
        Err(e) => (Status::Fail, format!("error: {e}")),
    };
    Check {
        id,
        name,
        status,
        detail,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn tv(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    0.5 * (a - b).abs().sum()
}

/// Kernel filter against the Bayes filter on the two-state POMDP.
pub fn filter_oracle(mutation: Mutation) -> Check {
    timed("P1", "filter oracle", || {
        let pomdp = oracle::pomdp(0.9);
        let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off))?;
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for b in oracle::beliefs() {
            let alpha = normalize(&oracle::weights_for(&m, &b))?;
            for a in 0..pomdp.num_actions() {
                let beta_hat = m.predict_obs_weights(&alpha, a)?;
                for o in 0..pomdp.num_observations() {
                    let obs = Point::Symbol(o);
                    let post = match mutation {
                        Mutation::None => m.kbr_posterior(&beta_hat, &obs)?,
                        Mutation::FlipPosteriorSign => {
                            m.posterior_operator(&beta_hat)?.apply(&-m.obs_features(&obs)?)?
                        }
                    };
                    let post = match normalize(&post) {
                        Ok(p) => oracle::aggregate(&m, &p, pomdp.num_states()),
                        Err(_) => return Ok((false, "posterior weights degenerate".into())),
                    };
                    worst = worst.max(tv(&post, &exact_belief_update(&pomdp, &b, a, o)?));
                    cases += 1;
                }
            }
        }
        Ok((worst < 1e-4, format!("max TV {worst:.2e} over {cases} cases (< 1e-4)")))
    })
}

/// Kernel value iteration against exact value iteration at depths 1 and 2.
pub fn planning_oracle() -> Check {
    timed("P2", "planning oracle", || {
        let pomdp = oracle::pomdp(0.9);
        let m = oracle::train(&pomdp, oracle::params(1e-10, KbrVariant::Plain, LowRank::Off))?;
        let rewards = oracle::rewards(&pomdp, &m);
        let mut worst: f64 = 0.0;
        let mut mismatches = 0;
        for depth in [1, 2] {
            let cfg = PlanConfig {
                depth,
                discount: 0.9,
                init_mode: InitMode::Reward,
                ..PlanConfig::default()
            };
            for b in oracle::beliefs() {
                let k = kernel_value_iteration(&m, &oracle::weights_for(&m, &b), &cfg, &rewards, &rewards)?;
                let e = exact_value_iteration(&pomdp, &b, depth, &pomdp.reward)?;
                worst = worst.max((k.value - e.value).abs());
                mismatches += usize::from(k.action != e.action);
            }
        }
        Ok((
            worst < 1e-4 && mismatches == 0,
            format!("max value gap {worst:.2e} (< 1e-4), {mismatches} action mismatches"),
        ))
    })
}

/// Small dense pendulum model shared by the property and invariant checks.
pub struct PropertyFixture {
    pub model: TrainedModel,
    pub rewards: RewardTable,
}

pub fn property_fixture(n: usize, low_rank: LowRank) -> Result<PropertyFixture> {
    let env = Pendulum::default();
    let mut rng = Rng::seed_from_u64(5);
    let data = collect_dataset(&env, n, CollectMode::Restart, 0, &mut rng)?;
    let states = data.states();
    let kernels = ExperimentConfig::preset(Preset::Pendulum).kernels;
    let params = ModelParams {
        state_kernel: kernels.state.resolve(&states, &states)?,
        action_kernel: KernelSpec::Delta,
        obs_kernel: kernels.observation.resolve(&data.observations(), &states)?,
        regularizers: Regularizers::default_for(n),
        kbr: KbrVariant::Plain,
        low_rank,
    };
    let model = TrainedModel::train(&data, &env.action_points(), params)?;
    let rewards = build_reward_table(|p, a| env.reward_at(p, a), model.states(), env.num_actions())?;
    Ok(PropertyFixture { model, rewards })
}

fn random_weights(rng: &mut Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(0.0..1.0) + 1e-3)
}

fn random_values(rng: &mut Rng, backups: &[Option<Backup>]) -> Vec<Vec<Option<f64>>> {
    backups
        .iter()
        .map(|b| {
            let k = b.as_ref().map_or(0, Backup::num_children);
            (0..k).map(|_| Some(rng.random_range(-10.0..10.0))).collect()
        })
        .collect()
}

/// Contraction, isotonicity and the constant-shift identity of the corrected backup.
pub fn operator_properties(corrected: bool, instances: usize) -> Check {
    if !corrected {
        return Check {
            id: "P3",
            name: "corrected-operator properties",
            status: Status::Skip,
            detail: "corrected operator is off".into(),
            secs: 0.0,
        };
    }
    timed("P3", "corrected-operator properties", || {
        let f = property_fixture(60, LowRank::Off)?;
        let cfg = PlanConfig {
            discount: 0.9,
            ..PlanConfig::default()
        };
        let mut rng = Rng::seed_from_u64(17);
        let (mut contraction, mut isotone) = (0, 0);
        let mut shift_err: f64 = 0.0;
        for _ in 0..instances {
            let alpha = random_weights(&mut rng, f.model.n());
            let backups = expand(&f.model, &alpha, &cfg, &f.rewards)?;
            let v = random_values(&mut rng, &backups);
            let w = random_values(&mut rng, &backups);
            let gap = v
                .iter()
                .flatten()
                .zip(w.iter().flatten())
                .map(|(x, y)| (x.unwrap_or(0.0) - y.unwrap_or(0.0)).abs())
                .fold(0.0, f64::max);
            let h = |vals: &[Vec<Option<f64>>]| bellman_operator(&backups, cfg.discount, vals).map(|(v, _)| v);
            let (Some(hv), Some(hw)) = (h(&v), h(&w)) else {
                return Ok((false, "every action degenerated".into()));
            };
            if (hv - hw).abs() > cfg.discount * gap + 1e-12 {
                contraction += 1;
            }
            let up: Vec<Vec<Option<f64>>> = w
                .iter()
                .map(|c| c.iter().map(|x| x.map(|x| x + rng.random_range(0.0..1.0))).collect())
                .collect();
            if h(&up).is_none_or(|hu| hu < hw) {
                isotone += 1;
            }
            let c = rng.random_range(-50.0..50.0);
            let shifted: Vec<Vec<Option<f64>>> =
                v.iter().map(|col| col.iter().map(|x| x.map(|x| x + c)).collect()).collect();
            if let Some(hs) = h(&shifted) {
                shift_err = shift_err.max((hs - hv - cfg.discount * c).abs());
            } else {
                shift_err = f64::INFINITY;
            }
        }
        Ok((
            contraction == 0 && isotone == 0 && shift_err <= 1e-10,
            format!(
                "{instances} instances: {contraction} contraction and {isotone} isotonicity violations, shift error {shift_err:.1e} (<= 1e-10)"
            ),
        ))
    })
}

/// Planner outputs with an untruncated incomplete Cholesky factor against the dense path.
pub fn full_rank_fidelity() -> Check {
    timed("P7a", "full-rank low-rank fidelity", || {
        let mut worst: f64 = 0.0;
        let mut mismatches = 0;
        let full = LowRank::Rank {
            rank: usize::MAX,
            tolerance: 0.0,
        };
        let mut compare = |dense: &TrainedModel, lr: &TrainedModel, rewards: &RewardTable, cfg: &PlanConfig| -> Result<()> {
            let mut rng = Rng::seed_from_u64(23);
            for _ in 0..10 {
                let alpha = random_weights(&mut rng, dense.n());
                let a = kernel_value_iteration(dense, &alpha, cfg, rewards, rewards)?;
                let b = kernel_value_iteration(lr, &alpha, cfg, rewards, rewards)?;
                worst = worst.max((a.value - b.value).abs());
                for (x, y) in a.q_values.iter().zip(&b.q_values) {
                    match (x, y) {
                        (Some(x), Some(y)) => worst = worst.max((x - y).abs()),
                        (None, None) => {}
                        _ => mismatches += 1,
                    }
                }
                mismatches += usize::from(a.action != b.action);
            }
            Ok(())
        };
        let dense = property_fixture(200, LowRank::Off)?;
        let lr = property_fixture(200, full)?;
        compare(&dense.model, &lr.model, &dense.rewards, &PlanConfig::default())?;

        let grid = GridWorld::default();
        let mut rng = Rng::seed_from_u64(29);
        let data = collect_dataset(&grid, 300, CollectMode::Trajectory, 0, &mut rng)?;
        let params = |low_rank| ModelParams {
            state_kernel: KernelSpec::Delta,
            action_kernel: KernelSpec::Delta,
            obs_kernel: KernelSpec::Delta,
            regularizers: Regularizers::default_for(300),
            kbr: KbrVariant::Plain,
            low_rank,
        };
        let gd = TrainedModel::train(&data, &grid.action_points(), params(LowRank::Off))?;
        let gl = TrainedModel::train(&data, &grid.action_points(), params(full))?;
        let rewards = build_reward_table(|p, a| grid.reward_at(p, a), gd.states(), grid.num_actions())?;
        let cfg = PlanConfig {
            depth: 2,
            ..PlanConfig::default()
        };
        compare(&gd, &gl, &rewards, &cfg)?;
        Ok((
            worst <= 1e-6 && mismatches == 0,
            format!("max planner gap {worst:.2e} (<= 1e-6), {mismatches} mismatches"),
        ))
    })
}

fn determinism() -> Result<(bool, String)> {
    let mut cfg = ExperimentConfig::preset(Preset::Oracle);
    cfg.data.sizes = vec![32, 64];
    cfg.eval.episodes = 3;
    cfg.eval.horizon = 8;
    let csv = |runs: &[ControllerRun]| {
        let mut s = String::from(RESULT_HEADER);
        for r in runs {
            s.push('\n');
            s.push_str(&r.row.to_csv());
        }
        s
    };
    let a = csv(&run_sweep(&cfg, None)?);
    let b = csv(&run_sweep(&cfg, None)?);
    Ok((a == b, "identical result tables".into()))
}

/// Normalization, expectation, prediction linearity, Gram PSD and run determinism.
pub fn micro_invariants() -> Check {
    timed("P8", "micro-invariants", || {
        let f = property_fixture(60, LowRank::Off)?;
        let m = &f.model;
        let mut rng = Rng::seed_from_u64(31);
        let mut failures = Vec::new();
        let (mut scale_err, mut linear_err): (f64, f64) = (0.0, 0.0);
        for _ in 0..200 {
            let w = random_weights(&mut rng, m.n());
            let once = normalize(&w)?;
            if normalize(&once)? != once {
                failures.push("normalize not idempotent");
            }
            let c = rng.random_range(1e-3..1e3);
            scale_err = scale_err.max((normalize(&(&w * c))? - &once).amax());
            let fv = random_weights(&mut rng, m.n());
            if expectation(&w, &fv)? != w.dot(&fv) {
                failures.push("expectation differs from the dot product");
            }
            let v = random_weights(&mut rng, m.n());
            let lambda = rng.random_range(-3.0..3.0);
            let a = rng.random_range(0..m.num_actions());
            let lhs = m.predict_obs_weights(&(&w + &v * lambda), a)?;
            let rhs = m.predict_obs_weights(&w, a)? + m.predict_obs_weights(&v, a)? * lambda;
            linear_err = linear_err.max((lhs - &rhs).amax() / rhs.amax().max(1.0));
        }
        if scale_err > 1e-15 {
            failures.push("normalize not scale invariant");
        }
        if linear_err > 1e-9 {
            failures.push("prediction not linear");
        }
        let mut min_eig = f64::INFINITY;
        for g in [m.gram_states(), m.gram_observations()] {
            if g != &g.transpose() {
                failures.push("Gram matrix not symmetric");
            }
            min_eig = min_eig.min(SymmetricEigen::new(g.clone()).eigenvalues.min());
        }
        if min_eig < -1e-10 * m.n() as f64 {
            failures.push("Gram matrix not PSD");
        }
        let (same, _) = determinism()?;
        if !same {
            failures.push("results differ between identical runs");
        }
        failures.dedup();
        let detail = if failures.is_empty() {
            format!("scale error {scale_err:.1e}, linearity error {linear_err:.1e}, min Gram eigenvalue {min_eig:.1e}, deterministic")
        } else {
            failures.join("; ")
        };
        Ok((failures.is_empty(), detail))
    })
}

fn find(runs: &[ControllerRun], n: usize, kind: ControllerKind) -> Option<&ControllerRun> {
    runs.iter().find(|r| r.row.n == n && r.row.controller == kind)
}

/// Grid-world sweep: kernel return trend in `n` and the gap to the exact controller.
pub fn grid_trend(data_dir: Option<&std::path::Path>) -> Check {
    timed("P4", "grid-world trend", || {
        let mut cfg = ExperimentConfig::preset(Preset::Grid);
        cfg.eval.controllers = vec![ControllerKind::Kernel, ControllerKind::Exact];
        let runs = run_sweep(&cfg, data_dir)?;
        let sizes = cfg.data.sizes.clone();
        let kernel: Vec<&ControllerRun> = sizes
            .iter()
            .map(|&n| find(&runs, n, ControllerKind::Kernel).expect("kernel cell"))
            .collect();
        let mut inversions = 0;
        let mut large_inversion = false;
        for w in kernel.windows(2) {
            if w[1].row.mean < w[0].row.mean {
                inversions += 1;
                let se = w[0].row.stderr.max(w[1].row.stderr);
                large_inversion |= w[0].row.mean - w[1].row.mean > se;
            }
        }
        let last = *sizes.last().expect("nonempty sweep");
        let exact = find(&runs, last, ControllerKind::Exact).expect("exact cell").row.mean;
        let k_last = kernel.last().expect("nonempty sweep").row.mean;
        let means: Vec<String> = kernel.iter().map(|r| format!("{}:{:.3}", r.row.n, r.row.mean)).collect();
        let trend_ok = inversions == 0 || (inversions == 1 && !large_inversion);
        let ratio = k_last / exact;
        Ok((
            trend_ok && ratio >= 0.85,
            format!(
                "kernel means [{}], {inversions} inversions, n={last}: {k_last:.3} vs exact {exact:.3} (ratio {ratio:.3} >= 0.85)",
                means.join(" ")
            ),
        ))
    })
}

/// Pendulum protocol: the return target, the histogram comparison and the rank-capped ablation.
pub fn pendulum_suite(data_dir: Option<&std::path::Path>) -> Vec<Check> {
    let t = Instant::now();
    let cfg = ExperimentConfig::preset(Preset::Pendulum);
    let base = run_sweep(&cfg, data_dir);
    let secs = t.elapsed().as_secs_f64();
    let n = cfg.data.sizes[0];
    let (kernel, hist) = match &base {
        Ok(runs) => (
            find(runs, n, ControllerKind::Kernel).map(|r| r.row.clone()),
            find(runs, n, ControllerKind::Histogram).map(|r| r.row.clone()),
        ),
        Err(_) => (None, None),
    };
    let err_detail = |e: &Option<String>| e.clone().unwrap_or_else(|| "missing result".into());
    let base_err = base.as_ref().err().map(|e| format!("error: {e}"));
    let mk = |id, name, ok: bool, detail: String, secs| Check {
        id,
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
        secs,
    };
    let mut checks = Vec::new();
    match &kernel {
        Some(k) => checks.push(mk(
            "P5",
            "pendulum return",
            k.mean >= 85.0,
            format!("mean height return {:.2} +/- {:.2} over {} episodes (>= 85)", k.mean, k.stderr, k.episodes),
            secs,
        )),
        None => checks.push(mk("P5", "pendulum return", false, err_detail(&base_err), secs)),
    }
    match (&kernel, &hist) {
        (Some(k), Some(h)) => checks.push(mk(
            "P6",
            "baseline ordering",
            k.mean > h.mean,
            format!("kernel {:.2} vs 5x5 histogram {:.2}", k.mean, h.mean),
            0.0,
        )),
        _ => checks.push(mk("P6", "baseline ordering", false, err_detail(&base_err), 0.0)),
    }
    let t = Instant::now();
    let mut capped = cfg.clone();
    capped.eval.controllers = vec![ControllerKind::Kernel];
    capped.model.low_rank = LowRank::Fraction {
        fraction: 0.25,
        tolerance: match cfg.model.low_rank {
            LowRank::Tolerance { tolerance } => tolerance,
            _ => 0.0,
        },
    };
    let capped_row = run_sweep(&capped, data_dir).map(|runs| find(&runs, n, ControllerKind::Kernel).map(|r| r.row.clone()));
    let secs = t.elapsed().as_secs_f64();
    match (&kernel, capped_row) {
        (Some(k), Ok(Some(c))) => {
            let drop = (k.mean - c.mean) / k.mean.abs().max(1e-12);
            checks.push(mk(
                "P7b",
                "rank-capped pendulum return",
                drop < 0.10,
                format!("rank <= n/4: {:.2} vs full {:.2} (degradation {:.1}% < 10%)", c.mean, k.mean, 100.0 * drop),
                secs,
            ))
        }
        (_, Err(e)) => checks.push(mk("P7b", "rank-capped pendulum return", false, format!("error: {e}"), secs)),
        _ => checks.push(mk("P7b", "rank-capped pendulum return", false, err_detail(&base_err), secs)),
    }
    checks
}

pub fn run_verify(opts: &VerifyOptions) -> Report {
    let corrected = opts.corrected.unwrap_or(true);
    let mut checks = vec![
        filter_oracle(opts.mutation),
        planning_oracle(),
        operator_properties(corrected, 100),
        full_rank_fidelity(),
        micro_invariants(),
    ];
    if opts.full {
        let dir = opts.data_dir.as_deref();
        checks.push(grid_trend(dir));
        checks.extend(pendulum_suite(dir));
    }
    Report { checks }
}
