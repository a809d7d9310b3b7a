//! Sweeps over training-set sizes: collect or load data, train, and evaluate
//! every configured controller on a shared episode seed.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use kpomdp::exact::{histogram_estimate_with, qmdp_default, qmdp_on_samples};
use kpomdp::online::ObservationMap;
use kpomdp::oracle;
use kpomdp::{
    build_reward_table, collect_dataset, evaluate, Controller, Dataset, DiscreteEnv, DiscretePomdp, Environment,
    ExactController, GridWorld, InitMode, InitQTable, KernelController, ModelParams, Pendulum, Point, Regularizers,
    RewardTable, Rng, Summary, TrainedModel,
};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{ControllerKind, EnvConfig, ExperimentConfig, HistogramConfig};
use crate::error::{HarnessError, Result};

/// Seed for stage `tag` of the cell with `n` samples.
pub fn derive_seed(master: u64, tag: &str, n: usize) -> u64 {
    let d = Sha256::digest(format!("{master}/{tag}/{n}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("eight bytes"))
}

pub type StateMap = Arc<dyn Fn(&Point) -> Option<usize> + Send + Sync>;

/// Discrete view of an environment used by the histogram baseline and the QMDP bound.
#[derive(Clone)]
pub struct Discretizer {
    pub num_states: usize,
    pub num_observations: usize,
    pub state_index: StateMap,
    pub observation_index: ObservationMap,
    /// Start belief over the discrete states.
    pub prior: DVector<f64>,
}

/// An environment the harness can sweep.
pub trait Benchmark: Environment {
    fn discretizer(&self, hist: &HistogramConfig) -> Discretizer;
    /// The generating discrete model, when there is one.
    fn true_model(&self, discount: f64) -> Option<DiscretePomdp>;
}

fn symbols(num_states: usize, num_observations: usize, prior: DVector<f64>) -> Discretizer {
    Discretizer {
        num_states,
        num_observations,
        state_index: Arc::new(|p: &Point| p.symbol()),
        observation_index: Arc::new(|p: &Point| p.symbol()),
        prior,
    }
}

impl Benchmark for GridWorld {
    fn discretizer(&self, _hist: &HistogramConfig) -> Discretizer {
        symbols(self.num_cells(), kpomdp::envs::WALL_PATTERNS.len(), self.start_prior())
    }

    fn true_model(&self, discount: f64) -> Option<DiscretePomdp> {
        self.to_pomdp(discount).ok()
    }
}

impl Benchmark for DiscreteEnv {
    fn discretizer(&self, _hist: &HistogramConfig) -> Discretizer {
        symbols(self.model.num_states(), self.model.num_observations(), self.prior.clone())
    }

    fn true_model(&self, discount: f64) -> Option<DiscretePomdp> {
        let mut m = self.model.clone();
        m.discount = discount;
        Some(m)
    }
}

/// Index of `x` among `bins` equal cells of `[-range, range]`, clamped to the edge cells.
fn bin(x: f64, range: f64, bins: usize) -> usize {
    let u = (x + range) / (2.0 * range);
    ((u * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

impl Benchmark for Pendulum {
    fn discretizer(&self, hist: &HistogramConfig) -> Discretizer {
        let (bt, bw) = (hist.state_bins[0], hist.state_bins[1]);
        let bo = hist.observation_bins;
        let (rt, rw) = (self.theta_range, self.omega_range);
        let states = bt * bw;
        Discretizer {
            num_states: states,
            num_observations: bo,
            state_index: Arc::new(move |p: &Point| match p.coords() {
                Some([t, w]) => Some(bin(*t, rt, bt) * bw + bin(*w, rw, bw)),
                _ => None,
            }),
            observation_index: Arc::new(move |p: &Point| match p.coords() {
                Some([t]) => Some(bin(*t, rt, bo)),
                _ => None,
            }),
            prior: DVector::from_element(states, 1.0 / states as f64),
        }
    }

    fn true_model(&self, _discount: f64) -> Option<DiscretePomdp> {
        None
    }
}

/// The environment named by a config.
#[derive(Debug, Clone)]
pub enum BenchEnv {
    Grid(GridWorld),
    Pendulum(Pendulum),
    Discrete(DiscreteEnv),
}

impl BenchEnv {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match &cfg.env {
            EnvConfig::Grid(g) => BenchEnv::Grid(GridWorld::new(g.size, g.goal)?),
            EnvConfig::Pendulum(p) => BenchEnv::Pendulum(p.clone()),
            EnvConfig::Oracle => BenchEnv::Discrete(DiscreteEnv::new(oracle::pomdp(cfg.plan.discount))),
            EnvConfig::Discrete { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
                let model = DiscretePomdp::from_toml(&text)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
                BenchEnv::Discrete(DiscreteEnv::new(model))
            }
        })
    }
}

/// Runs `$body` with `$e` bound to the concrete environment.
#[macro_export]
macro_rules! with_env {
    ($env:expr, $e:ident => $body:expr) => {
        match $env {
            $crate::experiment::BenchEnv::Grid($e) => $body,
            $crate::experiment::BenchEnv::Pendulum($e) => $body,
            $crate::experiment::BenchEnv::Discrete($e) => $body,
        }
    };
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub fingerprint: String,
    pub env: String,
    pub n: usize,
    pub controller: ControllerKind,
    pub depth: usize,
    pub discount: f64,
    pub episodes: usize,
    pub mean: f64,
    pub stderr: f64,
    pub reset_rate: f64,
    pub mean_nodes: f64,
    pub seed: u64,
}

/// Wall-clock seconds per stage; kept out of the results table so that it stays reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub n: usize,
    pub controller: ControllerKind,
    pub data_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

#[derive(Debug, Clone)]
pub struct ControllerRun {
    pub row: ResultRow,
    pub timing: Timing,
    pub summary: Summary,
}

/// File name of the cached dataset for `n` samples.
pub fn dataset_file(cfg: &ExperimentConfig, n: usize) -> String {
    let key = format!(
        "{}|{}|{}",
        toml::to_string(&cfg.env).expect("env serializes"),
        toml::to_string(&cfg.data).expect("data serializes"),
        cfg.seed
    );
    let digest = Sha256::digest(key.as_bytes());
    let tag: String = digest[..4].iter().map(|b| format!("{b:02x}")).collect();
    format!("{}-n{n}-{tag}.csv", cfg.env.label())
}

pub fn collect<E: Benchmark>(env: &E, cfg: &ExperimentConfig, n: usize) -> Result<Dataset> {
    let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, "data", n));
    Ok(collect_dataset(env, n, cfg.data.mode, cfg.data.prior_samples, &mut rng)?)
}

pub fn write_dataset<E: Benchmark>(env: &E, data: &Dataset, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    data.write_csv(BufWriter::new(file), &env.spaces())?;
    Ok(())
}

pub fn read_dataset<E: Benchmark>(env: &E, path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Dataset::read_csv(BufReader::new(file), &env.spaces())?)
}

/// Loads the cached dataset from `data_dir` or collects and caches it.
pub fn obtain_dataset<E: Benchmark>(
    env: &E,
    cfg: &ExperimentConfig,
    n: usize,
    data_dir: Option<&Path>,
) -> Result<Dataset> {
    let Some(dir) = data_dir else {
        return collect(env, cfg, n);
    };
    let path = dir.join(dataset_file(cfg, n));
    if path.exists() {
        return read_dataset(env, &path);
    }
    let data = collect(env, cfg, n)?;
    write_dataset(env, &data, &path)?;
    Ok(data)
}

/// Kernel and regularizer settings resolved against a dataset.
pub fn resolve_params<E: Benchmark>(env: &E, cfg: &ExperimentConfig, data: &Dataset) -> Result<ModelParams> {
    let states = data.states();
    let actions = env.action_points();
    Ok(ModelParams {
        state_kernel: cfg.kernels.state.resolve(&states, &states)?,
        action_kernel: cfg.kernels.action.resolve(&actions, &states)?,
        obs_kernel: cfg.kernels.observation.resolve(&data.observations(), &states)?,
        regularizers: cfg
            .model
            .regularizers
            .unwrap_or_else(|| Regularizers::default_for(data.len())),
        kbr: cfg.model.kbr,
        low_rank: cfg.model.low_rank,
    })
}

pub fn train<E: Benchmark>(env: &E, cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainedModel> {
    let params = resolve_params(env, cfg, data)?;
    Ok(TrainedModel::train(data, &env.action_points(), params)?)
}

/// Histogram model of `data` on the environment's discretization.
pub fn histogram_model<E: Benchmark>(env: &E, cfg: &ExperimentConfig, data: &Dataset) -> Result<DiscretePomdp> {
    let d = env.discretizer(&cfg.histogram);
    let (si, oi) = (d.state_index.clone(), d.observation_index.clone());
    Ok(histogram_estimate_with(
        data,
        d.num_states,
        env.num_actions(),
        d.num_observations,
        cfg.plan.discount,
        move |p| si(p),
        move |p| oi(p),
    )?)
}

fn discrete_q0(model: &DiscretePomdp, mode: InitMode) -> DMatrix<f64> {
    match mode {
        InitMode::Reward => model.reward.clone(),
        InitMode::Qmdp => qmdp_default(model),
    }
}

/// Reward table and initial Q table of the kernel controller. The QMDP bound
/// comes from the histogram model of the same samples.
pub fn kernel_tables<E: Benchmark>(
    env: &E,
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &TrainedModel,
) -> Result<(RewardTable, InitQTable)> {
    let rewards = build_reward_table(|p, a| env.reward_at(p, a), model.states(), env.num_actions())?;
    let q0 = match cfg.plan.init_mode {
        InitMode::Reward => rewards.clone(),
        InitMode::Qmdp => {
            let q = qmdp_default(&histogram_model(env, cfg, data)?);
            let index = env.discretizer(&cfg.histogram).state_index;
            qmdp_on_samples(&q, model.states(), move |p| index(p))?
        }
    };
    Ok((rewards, q0))
}

fn run_episodes<E, C, F>(env: &E, cfg: &ExperimentConfig, seed: u64, make: F) -> Result<Summary>
where
    E: Benchmark,
    C: Controller,
    F: Fn() -> C + Sync,
{
    Ok(evaluate(
        env,
        make,
        cfg.eval.horizon,
        cfg.eval.episodes,
        cfg.plan.discount,
        cfg.returns(),
        seed,
    )?)
}

/// Evaluates one controller on `data`; `model` is trained on demand and kept for reuse.
pub fn evaluate_controller<E: Benchmark>(
    env: &E,
    cfg: &ExperimentConfig,
    data: &Dataset,
    model: &mut Option<(TrainedModel, f64)>,
    kind: ControllerKind,
    seed: u64,
) -> Result<(Summary, f64)> {
    match kind {
        ControllerKind::Kernel => {
            if model.is_none() {
                let t = Instant::now();
                let m = train(env, cfg, data)?;
                *model = Some((m, t.elapsed().as_secs_f64()));
            }
            let (m, train_secs) = model.as_ref().expect("trained above");
            let (rewards, q0) = kernel_tables(env, cfg, data, m)?;
            let summary = run_episodes(env, cfg, seed, || {
                let mut c = KernelController::new(m, &cfg.plan, &rewards, &q0);
                c.reset_enabled = cfg.eval.reset;
                c
            })?;
            Ok((summary, *train_secs))
        }
        ControllerKind::Histogram | ControllerKind::Exact => {
            let t = Instant::now();
            let disc = env.discretizer(&cfg.histogram);
            let pomdp = if kind == ControllerKind::Histogram {
                histogram_model(env, cfg, data)?
            } else {
                env.true_model(cfg.plan.discount).ok_or_else(|| {
                    HarnessError::Config(format!("`controllers`: no exact model for {}", cfg.env.label()))
                })?
            };
            let q0 = Arc::new(discrete_q0(&pomdp, cfg.plan.init_mode));
            let pomdp = Arc::new(pomdp);
            let train_secs = t.elapsed().as_secs_f64();
            let summary = run_episodes(env, cfg, seed, || {
                ExactController::new(
                    pomdp.clone(),
                    q0.clone(),
                    cfg.plan.depth,
                    disc.prior.clone(),
                    disc.observation_index.clone(),
                )
            })?;
            Ok((summary, train_secs))
        }
    }
}

fn run_cell<E: Benchmark>(env: &E, cfg: &ExperimentConfig, n: usize, data_dir: Option<&Path>) -> Result<Vec<ControllerRun>> {
    let t = Instant::now();
    let data = obtain_dataset(env, cfg, n, data_dir)?;
    let data_secs = t.elapsed().as_secs_f64();
    let seed = derive_seed(cfg.seed, "eval", n);
    let fingerprint = cfg.fingerprint();
    let mut model = None;
    let mut runs = Vec::new();
    for &kind in &cfg.eval.controllers {
        let t = Instant::now();
        let (summary, train_secs) = evaluate_controller(env, cfg, &data, &mut model, kind, seed)?;
        let total = t.elapsed().as_secs_f64();
        runs.push(ControllerRun {
            row: ResultRow {
                fingerprint: fingerprint.clone(),
                env: cfg.env.label().to_string(),
                n,
                controller: kind,
                depth: cfg.plan.depth,
                discount: cfg.plan.discount,
                episodes: summary.episodes,
                mean: summary.mean,
                stderr: summary.stderr,
                reset_rate: summary.reset_rate,
                mean_nodes: summary.mean_nodes,
                seed,
            },
            timing: Timing {
                n,
                controller: kind,
                data_secs,
                train_secs,
                eval_secs: (total - train_secs).max(0.0),
            },
            summary,
        });
    }
    Ok(runs)
}

/// All cells of the sweep, in `(n, controller)` config order.
pub fn run_sweep(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<Vec<ControllerRun>> {
    cfg.validate()?;
    let env = BenchEnv::build(cfg)?;
    let cells = cfg
        .data
        .sizes
        .par_iter()
        .map(|&n| with_env!(&env, e => run_cell(e, cfg, n, data_dir)))
        .collect::<Result<Vec<_>>>()?;
    Ok(cells.into_iter().flatten().collect())
}

/// Data directory: the override if set, else `<output dir>/data`.
pub fn data_dir(cfg: &ExperimentConfig, override_dir: Option<PathBuf>) -> PathBuf {
    override_dir.unwrap_or_else(|| cfg.output.dir.join("data"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_clamp_to_the_edges() {
        assert_eq!(bin(-10.0, 1.0, 5), 0);
        assert_eq!(bin(-1.0, 1.0, 5), 0);
        assert_eq!(bin(0.0, 1.0, 5), 2);
        assert_eq!(bin(0.999, 1.0, 5), 4);
        assert_eq!(bin(1.0, 1.0, 5), 4);
        assert_eq!(bin(3.0, 1.0, 5), 4);
    }

    #[test]
    fn seeds_differ_by_stage_and_size() {
        let a = derive_seed(1, "data", 10);
        assert_eq!(a, derive_seed(1, "data", 10));
        assert_ne!(a, derive_seed(1, "eval", 10));
        assert_ne!(a, derive_seed(1, "data", 11));
        assert_ne!(a, derive_seed(2, "data", 10));
    }

    #[test]
    fn pendulum_bins_cover_the_box() {
        let p = Pendulum::default();
        let d = p.discretizer(&HistogramConfig::default());
        assert_eq!(d.num_states, 25);
        let idx = |t: f64, w: f64| (d.state_index)(&Point::Vector(vec![t, w])).unwrap();
        assert_eq!(idx(-p.theta_range, -p.omega_range), 0);
        assert_eq!(idx(p.theta_range, p.omega_range), 24);
        assert_eq!(idx(0.0, 0.0), 12);
        assert_eq!((d.observation_index)(&Point::scalar(0.0)), Some(2));
    }
}
