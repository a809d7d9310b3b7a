//! Exact discrete POMDPs: Bayes filter, finite-depth value iteration, QMDP
//! and histogram estimation from samples.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::Point;
use crate::plan::ActionTable;

/// Probability vector over the discrete states.
pub type Belief = DVector<f64>;

const ROW_TOL: f64 = 1e-9;

/// `<S, A, T, R, O, Z>` with a discount.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePomdp {
    /// `transition[a][(s, s')] = T(s, a, s')`.
    pub transition: Vec<DMatrix<f64>>,
    /// `observation[(s, o)] = Z(s, o)`.
    pub observation: DMatrix<f64>,
    /// `reward[(s, a)] = R(s, a)`.
    pub reward: DMatrix<f64>,
    pub discount: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PomdpText {
    states: usize,
    actions: usize,
    observations: usize,
    discount: f64,
    /// Row `s * actions + a` holds `T(s, a, .)`.
    transition: Vec<Vec<f64>>,
    observation: Vec<Vec<f64>>,
    reward: Vec<Vec<f64>>,
}

fn table(rows: &[Vec<f64>], nrows: usize, ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidModel(format!("{what} table must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl DiscretePomdp {
    pub fn new(
        transition: Vec<DMatrix<f64>>,
        observation: DMatrix<f64>,
        reward: DMatrix<f64>,
        discount: f64,
    ) -> Result<Self> {
        let m = DiscretePomdp {
            transition,
            observation,
            reward,
            discount,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn num_states(&self) -> usize {
        self.observation.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.transition.len()
    }

    pub fn num_observations(&self) -> usize {
        self.observation.ncols()
    }

    fn validate(&self) -> Result<()> {
        let s = self.num_states();
        if s == 0 || self.num_actions() == 0 || self.num_observations() == 0 {
            return Err(Error::InvalidModel("empty state, action or observation set".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidModel(format!(
                "discount {} outside [0, 1)",
                self.discount
            )));
        }
        if self.reward.shape() != (s, self.num_actions()) {
            return Err(Error::InvalidModel("reward must be |S| x |A|".into()));
        }
        if self.reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidModel("non-finite reward".into()));
        }
        for (a, t) in self.transition.iter().enumerate() {
            if t.shape() != (s, s) {
                return Err(Error::InvalidModel(format!("transition {a} must be |S| x |S|")));
            }
            check_rows(t, &format!("T(., {a}, .)"))?;
        }
        check_rows(&self.observation, "Z")
    }

    /// Parses the TOML text form.
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: PomdpText = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        let (ns, na, no) = (raw.states, raw.actions, raw.observations);
        let flat = table(&raw.transition, ns * na, ns, "transition")?;
        let transition = (0..na)
            .map(|a| DMatrix::from_fn(ns, ns, |s, t| flat[(s * na + a, t)]))
            .collect();
        Self::new(
            transition,
            table(&raw.observation, ns, no, "observation")?,
            table(&raw.reward, ns, na, "reward")?,
            raw.discount,
        )
    }

    pub fn to_toml(&self) -> String {
        let (ns, na) = (self.num_states(), self.num_actions());
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        };
        let raw = PomdpText {
            states: ns,
            actions: na,
            observations: self.num_observations(),
            discount: self.discount,
            transition: (0..ns * na)
                .map(|k| self.transition[k % na].row(k / na).iter().copied().collect())
                .collect(),
            observation: rows(&self.observation),
            reward: rows(&self.reward),
        };
        toml::to_string(&raw).expect("plain tables serialize")
    }

    /// Next-state distribution `sum_s b(s) T(s, a, .)`.
    pub fn propagate(&self, b: &Belief, a: usize) -> Result<DVector<f64>> {
        let t = self.transition.get(a).ok_or(Error::UnknownAction(a))?;
        if b.len() != self.num_states() {
            return Err(Error::DimensionMismatch {
                expected: self.num_states(),
                got: b.len(),
            });
        }
        Ok(t.tr_mul(b))
    }

    /// `P(o' | a; b)` for every `o'`.
    pub fn predictive(&self, b: &Belief, a: usize) -> Result<DVector<f64>> {
        Ok(self.observation.tr_mul(&self.propagate(b, a)?))
    }

    pub fn check_belief(&self, b: &Belief) -> Result<()> {
        if b.len() != self.num_states() {
            return Err(Error::DimensionMismatch {
                expected: self.num_states(),
                got: b.len(),
            });
        }
        Ok(())
    }
}

fn check_rows(m: &DMatrix<f64>, what: &str) -> Result<()> {
    for (i, row) in m.row_iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidModel(format!("{what} row {i} has a negative entry")));
        }
        if (row.sum() - 1.0).abs() > ROW_TOL {
            return Err(Error::InvalidModel(format!("{what} row {i} does not sum to 1")));
        }
    }
    Ok(())
}

/// Bayes filter `b'(s') = Z(s', o') sum_s b(s) T(s, a, s') / P(o' | a; b)`.
pub fn exact_belief_update(model: &DiscretePomdp, b: &Belief, a: usize, o: usize) -> Result<Belief> {
    if o >= model.num_observations() {
        return Err(Error::ImpossibleObservation);
    }
    let pred = model.propagate(b, a)?;
    let joint = pred.component_mul(&model.observation.column(o));
    let p = joint.sum();
    if !(p > 0.0) {
        return Err(Error::ImpossibleObservation);
    }
    Ok(joint / p)
}

/// `(value, action)` from a finite-depth search.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactPlan {
    pub value: f64,
    pub action: usize,
    pub q_values: Vec<f64>,
}

/// Picks the largest value, keeping the first index on ties.
pub(crate) fn argmax_first(values: impl IntoIterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best
}

/// `V_0(b) = max_a sum_s b(s) Q_0(s, a)` with `q0` an `|S| x |A|` table.
pub fn exact_init_value(b: &Belief, q0: &DMatrix<f64>) -> ExactPlan {
    let q: Vec<f64> = (0..q0.ncols()).map(|a| q0.column(a).dot(b)).collect();
    let (action, value) = argmax_first(q.iter().copied()).expect("nonempty action set");
    ExactPlan {
        value,
        action,
        q_values: q,
    }
}

/// `V_d(b) = max_a [b^T R_a + gamma sum_o P(o | a; b) V_{d-1}(b^{a,o})]`,
/// expanding every `(a, o)` branch with nonzero probability.
pub fn exact_value_iteration(
    model: &DiscretePomdp,
    b: &Belief,
    depth: usize,
    q0: &DMatrix<f64>,
) -> Result<ExactPlan> {
    model.check_belief(b)?;
    if q0.shape() != (model.num_states(), model.num_actions()) {
        return Err(Error::ShapeMismatch("initial Q table must be |S| x |A|".into()));
    }
    Ok(search(model, b, depth, q0))
}

fn search(model: &DiscretePomdp, b: &Belief, depth: usize, q0: &DMatrix<f64>) -> ExactPlan {
    if depth == 0 {
        return exact_init_value(b, q0);
    }
    let mut q = Vec::with_capacity(model.num_actions());
    for a in 0..model.num_actions() {
        let pred = model.transition[a].tr_mul(b);
        let mut future = 0.0;
        for o in 0..model.num_observations() {
            let joint = pred.component_mul(&model.observation.column(o));
            let p = joint.sum();
            if p > 0.0 {
                future += p * search(model, &(joint / p), depth - 1, q0).value;
            }
        }
        q.push(model.reward.column(a).dot(b) + model.discount * future);
    }
    let (action, value) = argmax_first(q.iter().copied()).expect("nonempty action set");
    ExactPlan {
        value,
        action,
        q_values: q,
    }
}

/// QMDP table `Q(s, a) = R(s, a) + gamma sum_s' T(s, a, s') max_a' Q(s', a')`,
/// iterated from `Q = R` until the sup-norm change is below `tol`.
pub fn qmdp(model: &DiscretePomdp, max_iterations: usize, tol: f64) -> DMatrix<f64> {
    let mut q = model.reward.clone();
    for _ in 0..max_iterations {
        let v = DVector::from_iterator(
            model.num_states(),
            q.row_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        );
        let mut next = model.reward.clone();
        for a in 0..model.num_actions() {
            let future = &model.transition[a] * &v;
            next.column_mut(a).axpy(model.discount, &future, 1.0);
        }
        let change = (&next - &q).amax();
        q = next;
        if change < tol {
            break;
        }
    }
    q
}

/// Default QMDP stopping rule.
pub fn qmdp_default(model: &DiscretePomdp) -> DMatrix<f64> {
    qmdp(model, 100_000, 1e-9)
}

/// Empirical model from a discrete dataset. Unseen `(s, a)` or `s` rows are
/// uniform; rewards are per-`(s, a)` sample means, zero when unseen.
pub fn histogram_estimate(
    data: &Dataset,
    num_states: usize,
    num_actions: usize,
    num_observations: usize,
    discount: f64,
) -> Result<DiscretePomdp> {
    histogram_estimate_with(data, num_states, num_actions, num_observations, discount, |p| {
        p.symbol()
    }, |p| p.symbol())
}

/// As [`histogram_estimate`] with explicit maps from points to discrete indices.
pub fn histogram_estimate_with(
    data: &Dataset,
    num_states: usize,
    num_actions: usize,
    num_observations: usize,
    discount: f64,
    state_index: impl Fn(&Point) -> Option<usize>,
    obs_index: impl Fn(&Point) -> Option<usize>,
) -> Result<DiscretePomdp> {
    if num_states == 0 || num_actions == 0 || num_observations == 0 {
        return Err(Error::InvalidModel("empty vocabulary".into()));
    }
    let mut counts = vec![DMatrix::<f64>::zeros(num_states, num_states); num_actions];
    let mut obs = DMatrix::<f64>::zeros(num_states, num_observations);
    let mut reward_sum = DMatrix::<f64>::zeros(num_states, num_actions);
    let mut reward_n = DMatrix::<f64>::zeros(num_states, num_actions);
    let lookup = |f: &dyn Fn(&Point) -> Option<usize>, p: &Point, bound: usize| {
        f(p).filter(|&i| i < bound)
            .ok_or_else(|| Error::InvalidModel(format!("unmappable point {p:?}")))
    };
    for r in &data.records {
        let s = lookup(&state_index, &r.state, num_states)?;
        let s2 = lookup(&state_index, &r.next_state, num_states)?;
        let o = lookup(&obs_index, &r.observation, num_observations)?;
        if r.action >= num_actions {
            return Err(Error::UnknownAction(r.action));
        }
        counts[r.action][(s, s2)] += 1.0;
        obs[(s, o)] += 1.0;
        reward_sum[(s, r.action)] += r.reward;
        reward_n[(s, r.action)] += 1.0;
    }
    for t in &mut counts {
        normalize_rows(t);
    }
    normalize_rows(&mut obs);
    let reward = reward_sum.zip_map(&reward_n, |s, c| if c > 0.0 { s / c } else { 0.0 });
    DiscretePomdp::new(counts, obs, reward, discount)
}

fn normalize_rows(m: &mut DMatrix<f64>) {
    let width = m.ncols() as f64;
    for mut row in m.row_iter_mut() {
        let total = row.sum();
        if total > 0.0 {
            row /= total;
        } else {
            row.fill(1.0 / width);
        }
    }
}

/// `Q0_a[i] = Q(state(s_i), a)` for the training states.
pub fn qmdp_on_samples(
    q: &DMatrix<f64>,
    samples: &[Point],
    state_index: impl Fn(&Point) -> Option<usize>,
) -> Result<ActionTable> {
    let idx = samples
        .iter()
        .map(|p| {
            state_index(p)
                .filter(|&i| i < q.nrows())
                .ok_or_else(|| Error::InvalidModel(format!("unmappable sample state {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActionTable::new(
        (0..q.ncols())
            .map(|a| DVector::from_iterator(idx.len(), idx.iter().map(|&s| q[(s, a)])))
            .collect(),
    ))
}
