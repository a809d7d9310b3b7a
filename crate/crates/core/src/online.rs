//! Online planning loop: sense, plan, act, update the belief.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rayon::prelude::*;

use crate::dataset::format_f64;
use crate::embed::{normalize, BeliefWeights, TrainedModel};
use crate::envs::{Environment, Rng};
use crate::error::{Error, Result};
use crate::exact::{exact_belief_update, exact_value_iteration, Belief, DiscretePomdp};
use crate::kernel::Point;
use crate::plan::{kernel_value_iteration, InitQTable, PlanConfig, RewardTable};

/// What a controller reports for one planning call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: usize,
    pub value: f64,
    pub nodes_expanded: usize,
    pub prune_count: usize,
}

/// A policy that only sees observations and rewards.
pub trait Controller: Send {
    /// Starts an episode from its first observation.
    fn start(&mut self, observation: &Point) -> Result<()>;
    fn act(&mut self) -> Result<Decision>;
    /// Incorporates the outcome of `action`; returns true if the belief was reset.
    fn update(&mut self, action: usize, reward: f64, observation: &Point) -> Result<bool>;
}

fn recoverable(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateWeights | Error::PredictionFailure | Error::Singular
    )
}

/// Kernel value iteration on belief weights, resetting to the observation-only
/// estimate whenever the prediction fails.
#[derive(Debug, Clone)]
pub struct KernelController<'a> {
    pub model: &'a TrainedModel,
    pub cfg: &'a PlanConfig,
    pub rewards: &'a RewardTable,
    pub q0: &'a InitQTable,
    /// When false, failures are returned as errors instead of triggering a reset.
    pub reset_enabled: bool,
    alpha: Option<BeliefWeights>,
}

impl<'a> KernelController<'a> {
    pub fn new(
        model: &'a TrainedModel,
        cfg: &'a PlanConfig,
        rewards: &'a RewardTable,
        q0: &'a InitQTable,
    ) -> Self {
        KernelController {
            model,
            cfg,
            rewards,
            q0,
            reset_enabled: true,
            alpha: None,
        }
    }

    pub fn belief(&self) -> Option<&BeliefWeights> {
        self.alpha.as_ref()
    }

    fn posterior(&self, alpha: &BeliefWeights, action: usize, observation: &Point) -> Result<BeliefWeights> {
        if self.cfg.normalize_weights {
            let alpha_hat = normalize(alpha)?;
            let beta = self.model.predict_obs_weights(&alpha_hat, action)?;
            let mut beta_hat = normalize(&beta)?;
            if self.cfg.branch_threshold > 0.0 {
                let cut = self.cfg.branch_threshold * beta_hat.max();
                beta_hat = normalize(&beta_hat.map(|b| if b < cut { 0.0 } else { b }))?;
            }
            self.model.kbr_posterior(&beta_hat, observation)
        } else {
            let beta = self.model.predict_obs_weights(alpha, action)?;
            self.model.kbr_posterior_raw(&beta, observation)
        }
    }
}

impl Controller for KernelController<'_> {
    fn start(&mut self, observation: &Point) -> Result<()> {
        self.alpha = Some(self.model.initial_belief(observation)?);
        Ok(())
    }

    fn act(&mut self) -> Result<Decision> {
        let alpha = self.alpha.as_ref().ok_or_else(|| Error::InvalidModel("episode not started".into()))?;
        match kernel_value_iteration(self.model, alpha, self.cfg, self.rewards, self.q0) {
            Ok(r) => Ok(Decision {
                action: r.action,
                value: r.value,
                nodes_expanded: r.nodes_expanded,
                prune_count: r.prune_count,
            }),
            Err(e) if self.reset_enabled && recoverable(&e) => Ok(Decision {
                action: 0,
                value: f64::NEG_INFINITY,
                nodes_expanded: 0,
                prune_count: 0,
            }),
            Err(e) => Err(e),
        }
    }

    fn update(&mut self, action: usize, _reward: f64, observation: &Point) -> Result<bool> {
        let alpha = self.alpha.take().ok_or_else(|| Error::InvalidModel("episode not started".into()))?;
        match self.posterior(&alpha, action, observation) {
            Ok(next) => {
                self.alpha = Some(next);
                Ok(false)
            }
            Err(e) if self.reset_enabled && recoverable(&e) => {
                self.alpha = Some(self.model.initial_belief(observation)?);
                Ok(true)
            }
            Err(e) => Err(e),
        }
    }
}

/// Maps environment observations to discrete indices.
pub type ObservationMap = Arc<dyn Fn(&Point) -> Option<usize> + Send + Sync>;

/// Bayes filter plus depth-`depth` exact search on a discrete model (the
/// true model, or one estimated from samples).
#[derive(Clone)]
pub struct ExactController {
    pub model: Arc<DiscretePomdp>,
    pub q0: Arc<DMatrix<f64>>,
    pub depth: usize,
    /// Prior combined with the first observation.
    pub prior: DVector<f64>,
    pub observation_index: ObservationMap,
    belief: Option<Belief>,
}

impl std::fmt::Debug for ExactController {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExactController")
            .field("depth", &self.depth)
            .field("belief", &self.belief)
            .finish_non_exhaustive()
    }
}

impl ExactController {
    pub fn new(
        model: Arc<DiscretePomdp>,
        q0: Arc<DMatrix<f64>>,
        depth: usize,
        prior: DVector<f64>,
        observation_index: ObservationMap,
    ) -> Self {
        ExactController {
            model,
            q0,
            depth,
            prior,
            observation_index,
            belief: None,
        }
    }

    /// Identity observation map for symbol observations.
    pub fn symbols() -> ObservationMap {
        Arc::new(|p: &Point| p.symbol())
    }

    pub fn belief(&self) -> Option<&Belief> {
        self.belief.as_ref()
    }

    fn conditioned_prior(&self, o: Option<usize>) -> Belief {
        if let Some(o) = o.filter(|&o| o < self.model.num_observations()) {
            let joint = self.prior.component_mul(&self.model.observation.column(o));
            let total = joint.sum();
            if total > 0.0 {
                return joint / total;
            }
        }
        self.prior.clone() / self.prior.sum()
    }
}

impl Controller for ExactController {
    fn start(&mut self, observation: &Point) -> Result<()> {
        self.belief = Some(self.conditioned_prior((self.observation_index)(observation)));
        Ok(())
    }

    fn act(&mut self) -> Result<Decision> {
        let b = self.belief.as_ref().ok_or_else(|| Error::InvalidModel("episode not started".into()))?;
        let p = exact_value_iteration(&self.model, b, self.depth, &self.q0)?;
        Ok(Decision {
            action: p.action,
            value: p.value,
            nodes_expanded: 0,
            prune_count: 0,
        })
    }

    fn update(&mut self, action: usize, _reward: f64, observation: &Point) -> Result<bool> {
        let b = self.belief.take().ok_or_else(|| Error::InvalidModel("episode not started".into()))?;
        let o = (self.observation_index)(observation);
        let next = o
            .ok_or(Error::ImpossibleObservation)
            .and_then(|o| exact_belief_update(&self.model, &b, action, o));
        match next {
            Ok(nb) => {
                self.belief = Some(nb);
                Ok(false)
            }
            Err(Error::ImpossibleObservation) => {
                self.belief = Some(self.conditioned_prior(o));
                Ok(true)
            }
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    /// Observation received after acting.
    pub observation: Point,
    pub action: usize,
    pub reward: f64,
    pub value: f64,
    pub reset: bool,
    pub metric: f64,
    pub nodes_expanded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub initial_observation: Point,
    pub steps: Vec<StepRecord>,
    pub discounted_return: f64,
    pub undiscounted_return: f64,
    pub metric_return: f64,
}

fn point_text(p: &Point) -> String {
    match p {
        Point::Symbol(s) => s.to_string(),
        Point::Vector(v) => v.iter().map(|x| format_f64(*x)).collect::<Vec<_>>().join(";"),
    }
}

impl EpisodeLog {
    pub fn resets(&self) -> usize {
        self.steps.iter().filter(|s| s.reset).count()
    }

    /// `sum_t gamma^t R_t` recomputed from the step records.
    pub fn recompute_discounted(&self, discount: f64) -> f64 {
        let mut total = 0.0;
        let mut g = 1.0;
        for s in &self.steps {
            total += g * s.reward;
            g *= discount;
        }
        total
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,observation,action,reward,value,reset,metric,nodes")?;
        writeln!(w, "0,{},,,,,,", point_text(&self.initial_observation))?;
        for (t, s) in self.steps.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                t + 1,
                point_text(&s.observation),
                s.action,
                format_f64(s.reward),
                format_f64(s.value),
                u8::from(s.reset),
                format_f64(s.metric),
                s.nodes_expanded
            )?;
        }
        Ok(())
    }
}

/// Runs `horizon` plan-act-update steps. The controller never sees the state.
pub fn run_episode<E: Environment, C: Controller>(
    env: &E,
    controller: &mut C,
    horizon: usize,
    discount: f64,
    rng: &mut Rng,
) -> Result<EpisodeLog> {
    let mut state = env.initial_state(rng);
    let first = env.observe(&state, rng);
    controller.start(&first)?;
    let mut log = EpisodeLog {
        initial_observation: first,
        steps: Vec::with_capacity(horizon),
        discounted_return: 0.0,
        undiscounted_return: 0.0,
        metric_return: 0.0,
    };
    let mut g = 1.0;
    for _ in 0..horizon {
        let d = controller.act()?;
        let st = env.step(&state, d.action, rng);
        let metric = env.metric(&st.state, st.reward);
        log.discounted_return += g * st.reward;
        log.undiscounted_return += st.reward;
        log.metric_return += metric;
        g *= discount;
        let reset = controller.update(d.action, st.reward, &st.observation)?;
        log.steps.push(StepRecord {
            observation: st.observation.clone(),
            action: d.action,
            reward: st.reward,
            value: d.value,
            reset,
            metric,
            nodes_expanded: d.nodes_expanded,
        });
        state = st.state;
    }
    Ok(log)
}

/// Which per-episode total the summary reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReturnKind {
    Discounted,
    Metric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub episodes: usize,
    pub mean: f64,
    pub stderr: f64,
    pub reset_rate: f64,
    pub mean_nodes: f64,
    pub logs: Vec<EpisodeLog>,
}

impl Summary {
    pub fn from_logs(logs: Vec<EpisodeLog>, kind: ReturnKind) -> Self {
        let returns: Vec<f64> = logs
            .iter()
            .map(|l| match kind {
                ReturnKind::Discounted => l.discounted_return,
                ReturnKind::Metric => l.metric_return,
            })
            .collect();
        let k = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / k;
        let stderr = if returns.len() > 1 {
            let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (k - 1.0);
            (var / k).sqrt()
        } else {
            0.0
        };
        let steps: usize = logs.iter().map(|l| l.steps.len()).sum();
        let resets: usize = logs.iter().map(EpisodeLog::resets).sum();
        let nodes: usize = logs
            .iter()
            .flat_map(|l| l.steps.iter().map(|s| s.nodes_expanded))
            .sum();
        Summary {
            episodes: logs.len(),
            mean,
            stderr,
            reset_rate: if steps > 0 { resets as f64 / steps as f64 } else { 0.0 },
            mean_nodes: if steps > 0 { nodes as f64 / steps as f64 } else { 0.0 },
            logs,
        }
    }
}

/// Stream `i` of the evaluation seed, shared across controllers so they face
/// the same episode randomness.
pub fn episode_rng(seed: u64, episode: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(episode as u64);
    rng
}

/// Runs `episodes` independently seeded episodes in parallel; the result
/// does not depend on scheduling.
pub fn evaluate<E, C, F>(
    env: &E,
    make_controller: F,
    horizon: usize,
    episodes: usize,
    discount: f64,
    kind: ReturnKind,
    seed: u64,
) -> Result<Summary>
where
    E: Environment,
    C: Controller,
    F: Fn() -> C + Sync,
{
    if episodes == 0 {
        return Err(Error::InvalidModel("at least one episode is required".into()));
    }
    let logs = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut c = make_controller();
            run_episode(env, &mut c, horizon, discount, &mut episode_rng(seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Summary::from_logs(logs, kind))
}
