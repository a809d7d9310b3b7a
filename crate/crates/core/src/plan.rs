//! Kernel Bellman backups and finite-depth kernel value iteration.
//!
//! Each search node holds belief weights `alpha`. Expanding action `a` gives
//! predictive observation weights `beta'`, one child posterior per distinct
//! training observation in the support of `beta'`, and the backup
//!
//! ```text
//! Q(alpha, a) = alpha^T R_a + gamma * sum_i beta'_i V(alpha'_{a, o_i})
//! ```
//!
//! With `normalize_weights` both `alpha` and `beta'` are replaced by their
//! clipped probability vectors first, which makes the backup a convex
//! combination of child values.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::embed::{normalize, BeliefWeights, TrainedModel};
use crate::error::{Error, Result};
use crate::exact::argmax_first;
use crate::kernel::Point;

/// One n-vector per action, indexed by training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTable {
    columns: Vec<DVector<f64>>,
}

/// `R_a[i] = R(s_i, a)`.
pub type RewardTable = ActionTable;
/// `Q0_a[i] = Q_0(s_i, a)`.
pub type InitQTable = ActionTable;

impl ActionTable {
    pub fn new(columns: Vec<DVector<f64>>) -> Self {
        ActionTable { columns }
    }

    pub fn num_actions(&self) -> usize {
        self.columns.len()
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, a: usize) -> &DVector<f64> {
        &self.columns[a]
    }

    /// `alpha^T column_a` for every action.
    pub fn scores(&self, alpha: &DVector<f64>) -> Vec<f64> {
        self.columns.iter().map(|c| c.dot(alpha)).collect()
    }

    fn check(&self, n: usize, actions: usize, what: &str) -> Result<()> {
        if self.num_actions() != actions || self.columns.iter().any(|c| c.len() != n) {
            return Err(Error::ShapeMismatch(format!(
                "{what} must have {actions} columns of length {n}"
            )));
        }
        Ok(())
    }
}

/// Reward table from an oracle evaluated at every sample state.
pub fn build_reward_table(
    reward: impl Fn(&Point, usize) -> Result<f64>,
    states: &[Point],
    num_actions: usize,
) -> Result<RewardTable> {
    let columns = (0..num_actions)
        .map(|a| {
            let v = states
                .iter()
                .map(|s| {
                    let r = reward(s, a)?;
                    if r.is_finite() {
                        Ok(r)
                    } else {
                        Err(Error::InvalidModel(format!("non-finite reward at {s:?}")))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DVector::from_vec(v))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActionTable::new(columns))
}

/// How leaf values are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    /// `Q_0 = R`
    #[default]
    Reward,
    /// `Q_0 = Q^MDP`
    Qmdp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub depth: usize,
    pub discount: f64,
    pub init_mode: InitMode,
    /// Skip actions whose `alpha^T Q0_a` bound is below the best value so far.
    /// The initial table must then upper-bound the search values.
    pub pruning: bool,
    pub normalize_weights: bool,
    /// Entries of `beta'` below this fraction of its largest entry are dropped
    /// before the posterior is formed. Zero keeps every positive entry.
    pub branch_threshold: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            depth: 1,
            discount: 0.95,
            init_mode: InitMode::Reward,
            pruning: false,
            normalize_weights: true,
            branch_threshold: 0.0,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount >= 0.0 && self.discount < 1.0) {
            return Err(Error::InvalidModel(format!(
                "discount {} outside [0, 1)",
                self.discount
            )));
        }
        if !(0.0..1.0).contains(&self.branch_threshold) {
            return Err(Error::InvalidModel(format!(
                "branch threshold {} outside [0, 1)",
                self.branch_threshold
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanResult {
    pub value: f64,
    pub action: usize,
    /// `None` for pruned or degenerate actions.
    pub q_values: Vec<Option<f64>>,
    pub nodes_expanded: usize,
    pub prune_count: usize,
}

/// `V_0(alpha) = max_a alpha^T Q0_a`, first action on ties.
pub fn init_value(alpha: &BeliefWeights, q0: &InitQTable) -> (f64, usize) {
    let (a, v) = argmax_first(q0.scores(alpha)).expect("nonempty action set");
    (v, a)
}

/// True when action `a` can be skipped: its bound `alpha^T Q^MDP_a` is below `current_best`.
pub fn qmdp_prune(q_mdp: &InitQTable, alpha: &BeliefWeights, current_best: f64, a: usize) -> bool {
    q_mdp.column(a).dot(alpha) < current_best
}

/// The children of one `(alpha, a)` expansion.
#[derive(Debug, Clone)]
pub struct Backup {
    pub action: usize,
    /// `alpha^T R_a`
    pub immediate: f64,
    /// `beta'` mass of each child (a probability vector in normalized mode).
    pub weights: Vec<f64>,
    /// Representative observation sample index of each child.
    pub observations: Vec<usize>,
    /// Sample indices the child weights live on; `None` means all `n`.
    support: Option<Vec<usize>>,
    /// Column `c` holds child `c`'s posterior weights on `support`.
    alphas: DMatrix<f64>,
    n: usize,
    normalized: bool,
}

impl Backup {
    pub fn num_children(&self) -> usize {
        self.weights.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Full length-n posterior weights of child `c`.
    pub fn child(&self, c: usize) -> BeliefWeights {
        let col = self.alphas.column(c);
        match &self.support {
            None => col.clone_owned(),
            Some(support) => {
                let mut out = DVector::zeros(self.n);
                for (k, &i) in support.iter().enumerate() {
                    out[i] = col[k];
                }
                out
            }
        }
    }

    /// `immediate + gamma * sum_c w_c V_c`. Children with `None` are dropped and,
    /// in normalized mode, the remaining mass is renormalized. Returns `None`
    /// when no child survives.
    pub fn q_value(&self, discount: f64, values: &[Option<f64>]) -> Option<f64> {
        debug_assert_eq!(values.len(), self.num_children());
        let mut acc = 0.0;
        let mut mass = 0.0;
        let mut any = false;
        for (w, v) in self.weights.iter().zip(values) {
            if let Some(v) = v {
                acc += w * v;
                mass += w;
                any = true;
            }
        }
        if !any {
            return None;
        }
        let future = if self.normalized { acc / mass } else { acc };
        Some(self.immediate + discount * future)
    }

    /// `max_a alpha'^T Q0_a` for every child, with `alpha'` clipped and
    /// normalized in normalized mode. `None` marks degenerate children.
    pub fn leaf_values(&self, q0: &InitQTable) -> Vec<Option<f64>> {
        let rows: Vec<usize> = match &self.support {
            Some(s) => s.clone(),
            None => (0..self.n).collect(),
        };
        let q_rows = DMatrix::from_fn(rows.len(), q0.num_actions(), |k, a| q0.column(a)[rows[k]]);
        let mut alphas = self.alphas.clone();
        let mut mass = vec![1.0; alphas.ncols()];
        if self.normalized {
            alphas.apply(|x| *x = x.max(0.0));
            for (c, col) in alphas.column_iter().enumerate() {
                mass[c] = col.sum();
            }
        }
        let scores = alphas.tr_mul(&q_rows);
        (0..alphas.ncols())
            .map(|c| {
                if self.normalized && !(mass[c] > 0.0) {
                    return None;
                }
                let best = scores.row(c).iter().copied().fold(f64::NEG_INFINITY, f64::max);
                Some(if self.normalized { best / mass[c] } else { best })
            })
            .collect()
    }
}

fn is_branch_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateWeights | Error::PredictionFailure | Error::Singular
    )
}

fn thresholded(beta_hat: DVector<f64>, threshold: f64) -> Result<DVector<f64>> {
    if threshold <= 0.0 {
        return Ok(beta_hat);
    }
    let cut = threshold * beta_hat.max();
    normalize(&beta_hat.map(|b| if b < cut { 0.0 } else { b }))
}

/// Expands action `a` from weights `alpha` that are already normalized when
/// `cfg.normalize_weights` is set; `products` is `G_S alpha`.
pub fn expand_action(
    model: &TrainedModel,
    alpha: &BeliefWeights,
    products: &DVector<f64>,
    a: usize,
    cfg: &PlanConfig,
    rewards: &RewardTable,
) -> Result<Backup> {
    let immediate = rewards.column(a).dot(alpha);
    let beta = model.predict_from_products(products, a)?;
    let n = model.n();
    if cfg.normalize_weights {
        let beta_hat = thresholded(normalize(&beta)?, cfg.branch_threshold)?;
        let op = model.posterior_operator(&beta_hat)?;
        let (weights, observations) = group_children(model, op.support(), &beta_hat);
        let alphas = op.apply_samples(model, &observations)?;
        Ok(Backup {
            action: a,
            immediate,
            weights,
            observations,
            support: Some(op.support().to_vec()),
            alphas,
            n,
            normalized: true,
        })
    } else {
        let support: Vec<usize> = (0..n).filter(|&i| beta[i] != 0.0).collect();
        if support.is_empty() {
            return Err(Error::DegenerateWeights);
        }
        let op = model.raw_posterior_operator(&beta)?;
        let (weights, observations) = group_children(model, &support, &beta);
        let alphas = op.apply_samples(model, &observations)?;
        Ok(Backup {
            action: a,
            immediate,
            weights,
            observations,
            support: None,
            alphas,
            n,
            normalized: false,
        })
    }
}

/// Merges support indices with identical observations; their posteriors coincide.
fn group_children(model: &TrainedModel, support: &[usize], beta: &DVector<f64>) -> (Vec<f64>, Vec<usize>) {
    let mut slot = std::collections::HashMap::new();
    let mut weights = Vec::new();
    let mut reps = Vec::new();
    for &i in support {
        let class = model.observation_class(i);
        let c = *slot.entry(class).or_insert_with(|| {
            weights.push(0.0);
            reps.push(class);
            reps.len() - 1
        });
        weights[c] += beta[i];
    }
    (weights, reps)
}

/// Normalizes `alpha` per `cfg` and expands every action. Degenerate actions are `None`.
pub fn expand(
    model: &TrainedModel,
    alpha: &BeliefWeights,
    cfg: &PlanConfig,
    rewards: &RewardTable,
) -> Result<Vec<Option<Backup>>> {
    let alpha_hat = if cfg.normalize_weights {
        normalize(alpha)?
    } else {
        alpha.clone()
    };
    let products = model.state_products(&alpha_hat)?;
    (0..model.num_actions())
        .map(|a| match expand_action(model, &alpha_hat, &products, a, cfg, rewards) {
            Ok(b) => Ok(Some(b)),
            Err(e) if is_branch_failure(&e) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// `max_a Q(alpha, a; V_a)` over the expanded actions, first action on ties.
/// `values[a]` holds the child values for action `a`.
pub fn bellman_operator(
    backups: &[Option<Backup>],
    discount: f64,
    values: &[Vec<Option<f64>>],
) -> Option<(f64, usize)> {
    let q = backups.iter().zip(values).map(|(b, v)| {
        b.as_ref()
            .and_then(|b| b.q_value(discount, v))
            .unwrap_or(f64::NEG_INFINITY)
    });
    argmax_first(q)
        .filter(|(_, v)| *v > f64::NEG_INFINITY)
        .map(|(a, v)| (v, a))
}

struct Search<'a> {
    model: &'a TrainedModel,
    cfg: &'a PlanConfig,
    rewards: &'a RewardTable,
    q0: &'a InitQTable,
    nodes: usize,
    pruned: usize,
}

impl Search<'_> {
    fn node(&mut self, alpha: &BeliefWeights, depth: usize) -> Result<PlanResult> {
        self.nodes += 1;
        let alpha_hat = if self.cfg.normalize_weights {
            normalize(alpha)?
        } else {
            alpha.clone()
        };
        let num_actions = self.model.num_actions();
        if depth == 0 {
            let (value, action) = init_value(&alpha_hat, self.q0);
            return Ok(PlanResult {
                value,
                action,
                q_values: self.q0.scores(&alpha_hat).into_iter().map(Some).collect(),
                nodes_expanded: 0,
                prune_count: 0,
            });
        }
        let products = self.model.state_products(&alpha_hat)?;
        let mut order: Vec<usize> = (0..num_actions).collect();
        let bounds = self.q0.scores(&alpha_hat);
        if self.cfg.pruning {
            order.sort_by(|&x, &y| bounds[y].total_cmp(&bounds[x]));
        }
        let mut q_values = vec![None; num_actions];
        let mut best = f64::NEG_INFINITY;
        for (pos, &a) in order.iter().enumerate() {
            if self.cfg.pruning && bounds[a] < best {
                self.pruned += order.len() - pos;
                break;
            }
            let backup = match expand_action(self.model, &alpha_hat, &products, a, self.cfg, self.rewards) {
                Ok(b) => b,
                Err(e) if is_branch_failure(&e) => continue,
                Err(e) => return Err(e),
            };
            let values = if depth == 1 {
                self.nodes += backup.num_children();
                backup.leaf_values(self.q0)
            } else {
                let mut v = Vec::with_capacity(backup.num_children());
                for c in 0..backup.num_children() {
                    v.push(match self.node(&backup.child(c), depth - 1) {
                        Ok(r) if r.value > f64::NEG_INFINITY => Some(r.value),
                        Ok(_) => None,
                        Err(e) if is_branch_failure(&e) => None,
                        Err(e) => return Err(e),
                    });
                }
                v
            };
            if let Some(q) = backup.q_value(self.cfg.discount, &values) {
                q_values[a] = Some(q);
                best = best.max(q);
            }
        }
        let (action, value) = argmax_first(q_values.iter().map(|q| q.unwrap_or(f64::NEG_INFINITY)))
            .expect("nonempty action set");
        Ok(PlanResult {
            value,
            action,
            q_values,
            nodes_expanded: 0,
            prune_count: 0,
        })
    }
}

/// Depth-`cfg.depth` kernel value iteration from belief weights `alpha`.
///
/// If every action at the root degenerates the value is `-inf` and the first
/// action is returned.
pub fn kernel_value_iteration(
    model: &TrainedModel,
    alpha: &BeliefWeights,
    cfg: &PlanConfig,
    rewards: &RewardTable,
    q0: &InitQTable,
) -> Result<PlanResult> {
    cfg.validate()?;
    let (n, na) = (model.n(), model.num_actions());
    rewards.check(n, na, "reward table")?;
    q0.check(n, na, "initial Q table")?;
    if alpha.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: alpha.len(),
        });
    }
    let mut search = Search {
        model,
        cfg,
        rewards,
        q0,
        nodes: 0,
        pruned: 0,
    };
    let mut result = search.node(alpha, cfg.depth)?;
    result.nodes_expanded = search.nodes;
    result.prune_count = search.pruned;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_value_examples() {
        let alpha = DVector::from_vec(vec![1.0, 0.0]);
        let q0 = ActionTable::new(vec![
            DVector::from_vec(vec![5.0, 0.0]),
            DVector::from_vec(vec![3.0, 9.0]),
        ]);
        assert_eq!(init_value(&alpha, &q0), (5.0, 0));
        let same = ActionTable::new(vec![DVector::from_vec(vec![2.0, 4.0]); 3]);
        let alpha = DVector::from_vec(vec![0.25, 0.75]);
        assert_eq!(init_value(&alpha, &same), (3.5, 0));
    }

    #[test]
    fn prune_rule() {
        let q = ActionTable::new(vec![DVector::from_vec(vec![1.0, 1.0]); 2]);
        let alpha = DVector::from_vec(vec![0.5, 0.5]);
        assert!(!qmdp_prune(&q, &alpha, f64::NEG_INFINITY, 1));
        let q = ActionTable::new(vec![
            DVector::from_vec(vec![4.0, 4.0]),
            DVector::from_vec(vec![2.0, 2.0]),
        ]);
        let alpha = DVector::from_vec(vec![1.0, 0.0]);
        assert!(qmdp_prune(&q, &alpha, 3.0, 1));
        assert!(!qmdp_prune(&q, &alpha, 3.0, 0));
    }

    #[test]
    fn q_value_renormalizes_surviving_children() {
        let b = Backup {
            action: 0,
            immediate: 1.0,
            weights: vec![0.25, 0.75],
            observations: vec![0, 1],
            support: None,
            alphas: DMatrix::zeros(2, 2),
            n: 2,
            normalized: true,
        };
        assert_eq!(b.q_value(0.5, &[Some(2.0), Some(4.0)]), Some(1.0 + 0.5 * 3.5));
        assert_eq!(b.q_value(0.5, &[None, Some(4.0)]), Some(3.0));
        assert_eq!(b.q_value(0.5, &[None, None]), None);
    }

    #[test]
    fn reward_table_from_oracle() {
        let states = [Point::Symbol(0), Point::Symbol(1)];
        let t = build_reward_table(|s, a| Ok((s.symbol().unwrap() * 10 + a) as f64), &states, 2).unwrap();
        assert_eq!(t.column(1).as_slice(), &[1.0, 11.0]);
        assert!(build_reward_table(|_, _| Ok(f64::NAN), &states, 1).is_err());
    }
}
