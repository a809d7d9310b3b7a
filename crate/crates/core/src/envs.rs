//! Simulated environments and training-data collection.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::distr::{Distribution, Uniform};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Space, Spaces, Transition};
use crate::error::{Error, Result};
use crate::exact::DiscretePomdp;
use crate::kernel::Point;

/// Random stream used by every simulator.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub state: S,
    pub reward: f64,
    pub observation: Point,
}

/// A POMDP simulator with ground-truth state access.
pub trait Environment: Sync {
    type State: Clone + std::fmt::Debug + Send + Sync;

    fn name(&self) -> &str;
    fn spaces(&self) -> Spaces;
    fn num_actions(&self) -> usize;
    fn default_discount(&self) -> f64;

    /// Action points seen by the action kernel.
    fn action_points(&self) -> Vec<Point> {
        (0..self.num_actions()).map(Point::Symbol).collect()
    }

    /// Start state of an evaluation episode.
    fn initial_state(&self, rng: &mut Rng) -> Self::State;
    /// State drawn uniformly over the training domain.
    fn uniform_state(&self, rng: &mut Rng) -> Self::State;
    fn step(&self, s: &Self::State, a: usize, rng: &mut Rng) -> Step<Self::State>;
    fn observe(&self, s: &Self::State, rng: &mut Rng) -> Point;
    fn reward(&self, s: &Self::State, a: usize) -> f64;
    fn to_point(&self, s: &Self::State) -> Point;
    fn from_point(&self, p: &Point) -> Result<Self::State>;

    /// `R(s, a)` at a sample point.
    fn reward_at(&self, p: &Point, a: usize) -> Result<f64> {
        if a >= self.num_actions() {
            return Err(Error::UnknownAction(a));
        }
        Ok(self.reward(&self.from_point(p)?, a))
    }

    /// Per-step evaluation metric; the reward unless overridden.
    fn metric(&self, _next: &Self::State, reward: f64) -> f64 {
        reward
    }
}

// ---------------------------------------------------------------- grid world

pub const WALL_PATTERNS: [&str; 9] = [
    "no-walls", "walls-N", "walls-E", "walls-S", "walls-W", "walls-N-E", "walls-S-E", "walls-S-W",
    "walls-N-W",
];

pub const GRID_ACTIONS: [&str; 4] = ["N", "E", "S", "W"];

/// `size x size` grid, row 0 at the north edge. Moves are deterministic;
/// any action at the goal pays 1 and teleports to a uniform non-goal cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorld {
    pub size: usize,
    pub goal: (usize, usize),
}

impl Default for GridWorld {
    fn default() -> Self {
        GridWorld {
            size: 10,
            goal: (9, 9),
        }
    }
}

impl GridWorld {
    pub fn new(size: usize, goal: (usize, usize)) -> Result<Self> {
        if size < 2 || goal.0 >= size || goal.1 >= size {
            return Err(Error::InvalidModel(format!(
                "grid of size {size} with goal {goal:?}"
            )));
        }
        Ok(GridWorld { size, goal })
    }

    pub fn num_cells(&self) -> usize {
        self.size * self.size
    }

    pub fn index(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.size + cell.1
    }

    pub fn cell(&self, index: usize) -> (usize, usize) {
        (index / self.size, index % self.size)
    }

    /// Wall pattern index into [`WALL_PATTERNS`].
    pub fn wall_pattern(&self, (r, c): (usize, usize)) -> usize {
        let last = self.size - 1;
        match (r == 0, c == last, r == last, c == 0) {
            (false, false, false, false) => 0,
            (true, false, false, false) => 1,
            (false, true, false, false) => 2,
            (false, false, true, false) => 3,
            (false, false, false, true) => 4,
            (true, true, false, false) => 5,
            (false, true, true, false) => 6,
            (false, false, true, true) => 7,
            (true, false, false, true) => 8,
            _ => unreachable!("a cell touches at most two walls when size >= 2"),
        }
    }

    /// Deterministic move, ignoring the goal rule.
    pub fn moved(&self, (r, c): (usize, usize), a: usize) -> (usize, usize) {
        let last = self.size - 1;
        match a {
            0 => (r.saturating_sub(1), c),
            1 => (r, (c + 1).min(last)),
            2 => ((r + 1).min(last), c),
            3 => (r, c.saturating_sub(1)),
            _ => (r, c),
        }
    }

    fn random_non_goal(&self, rng: &mut Rng) -> (usize, usize) {
        let g = self.index(self.goal);
        let k = rng.random_range(0..self.num_cells() - 1);
        self.cell(if k >= g { k + 1 } else { k })
    }

    /// Exact discrete model of the same dynamics.
    pub fn to_pomdp(&self, discount: f64) -> Result<DiscretePomdp> {
        let n = self.num_cells();
        let g = self.index(self.goal);
        let mut transition = vec![DMatrix::zeros(n, n); 4];
        let mut reward = DMatrix::zeros(n, 4);
        for (a, t) in transition.iter_mut().enumerate() {
            for s in 0..n {
                if s == g {
                    reward[(s, a)] = 1.0;
                    for s2 in (0..n).filter(|&x| x != g) {
                        t[(s, s2)] = 1.0 / (n - 1) as f64;
                    }
                } else {
                    t[(s, self.index(self.moved(self.cell(s), a)))] = 1.0;
                }
            }
        }
        let observation = DMatrix::from_fn(n, WALL_PATTERNS.len(), |s, o| {
            if self.wall_pattern(self.cell(s)) == o {
                1.0
            } else {
                0.0
            }
        });
        DiscretePomdp::new(transition, observation, reward, discount)
    }

    /// Uniform belief over the non-goal start cells.
    pub fn start_prior(&self) -> DVector<f64> {
        let n = self.num_cells();
        let g = self.index(self.goal);
        DVector::from_fn(n, |s, _| if s == g { 0.0 } else { 1.0 / (n - 1) as f64 })
    }
}

impl Environment for GridWorld {
    type State = (usize, usize);

    fn name(&self) -> &str {
        "grid"
    }

    fn spaces(&self) -> Spaces {
        Spaces {
            state: Space::discrete((0..self.num_cells()).map(|i| {
                let (r, c) = self.cell(i);
                format!("r{r}c{c}")
            })),
            observation: Space::discrete(WALL_PATTERNS),
            actions: GRID_ACTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn num_actions(&self) -> usize {
        4
    }

    fn default_discount(&self) -> f64 {
        0.95
    }

    fn initial_state(&self, rng: &mut Rng) -> Self::State {
        self.random_non_goal(rng)
    }

    fn uniform_state(&self, rng: &mut Rng) -> Self::State {
        self.cell(rng.random_range(0..self.num_cells()))
    }

    fn step(&self, s: &Self::State, a: usize, rng: &mut Rng) -> Step<Self::State> {
        let (state, reward) = if *s == self.goal {
            (self.random_non_goal(rng), 1.0)
        } else {
            (self.moved(*s, a), 0.0)
        };
        Step {
            state,
            reward,
            observation: Point::Symbol(self.wall_pattern(state)),
        }
    }

    fn observe(&self, s: &Self::State, _rng: &mut Rng) -> Point {
        Point::Symbol(self.wall_pattern(*s))
    }

    fn reward(&self, s: &Self::State, _a: usize) -> f64 {
        if *s == self.goal {
            1.0
        } else {
            0.0
        }
    }

    fn to_point(&self, s: &Self::State) -> Point {
        Point::Symbol(self.index(*s))
    }

    fn from_point(&self, p: &Point) -> Result<Self::State> {
        match p.symbol() {
            Some(i) if i < self.num_cells() => Ok(self.cell(i)),
            _ => Err(Error::DomainMismatch),
        }
    }
}

// ------------------------------------------------------------------ pendulum

/// Inverted pendulum on a cart; the state is `(theta, theta_dot)` and only
/// `theta` is observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Pendulum {
    pub pole_mass: f64,
    pub cart_mass: f64,
    pub length: f64,
    pub gravity: f64,
    pub dt: f64,
    /// RK4 substeps per control step.
    pub substeps: usize,
    pub forces: Vec<f64>,
    pub theta_range: f64,
    pub omega_range: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Pendulum {
            pole_mass: 2.0,
            cart_mass: 8.0,
            length: 0.5,
            gravity: 9.8,
            dt: 0.1,
            substeps: 10,
            forces: vec![-250.0, -150.0, -50.0, 0.0, 50.0, 150.0, 250.0],
            theta_range: PI / 3.0,
            omega_range: 3.0,
        }
    }
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

impl Pendulum {
    /// `theta_ddot` for force `u`.
    pub fn acceleration(&self, theta: f64, omega: f64, u: f64) -> f64 {
        let (m, l, g) = (self.pole_mass, self.length, self.gravity);
        let am = 1.0 / (self.pole_mass + self.cart_mass);
        let (s, c) = theta.sin_cos();
        (g * s - am * m * l * omega * omega * (2.0 * theta).sin() / 2.0 - am * c * u)
            / (4.0 * l / 3.0 - am * m * l * c * c)
    }

    /// One control step of length `dt` with RK4, without angle wrapping.
    pub fn integrate(&self, theta: f64, omega: f64, u: f64) -> (f64, f64) {
        let h = self.dt / self.substeps.max(1) as f64;
        let f = |t: f64, w: f64| (w, self.acceleration(t, w, u));
        let (mut t, mut w) = (theta, omega);
        for _ in 0..self.substeps.max(1) {
            let k1 = f(t, w);
            let k2 = f(t + 0.5 * h * k1.0, w + 0.5 * h * k1.1);
            let k3 = f(t + 0.5 * h * k2.0, w + 0.5 * h * k2.1);
            let k4 = f(t + h * k3.0, w + h * k3.1);
            t += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            w += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        (t, w)
    }

    /// `exp(-theta^2 / (2 s1) - theta_dot^2 / (10 s2))` with the variances of
    /// the uniform training ranges.
    pub fn reward_of(&self, theta: f64, omega: f64) -> f64 {
        let s1 = self.theta_range * self.theta_range / 3.0;
        let s2 = self.omega_range * self.omega_range / 3.0;
        (-theta * theta / (2.0 * s1) - omega * omega / (10.0 * s2)).exp()
    }

    /// Mechanical energy conserved by the unforced dynamics, up to a constant.
    pub fn energy(&self, theta: f64, omega: f64) -> f64 {
        let (m, l, g) = (self.pole_mass, self.length, self.gravity);
        let am = 1.0 / (self.pole_mass + self.cart_mass);
        let c = theta.cos();
        0.5 * m * l * l * omega * omega * (4.0 / 3.0 - am * m * c * c) + m * g * l * c
    }
}

impl Environment for Pendulum {
    type State = (f64, f64);

    fn name(&self) -> &str {
        "pendulum"
    }

    fn spaces(&self) -> Spaces {
        Spaces {
            state: Space::Continuous { dim: 2 },
            observation: Space::Continuous { dim: 1 },
            actions: self.forces.iter().map(|f| format!("{f}")).collect(),
        }
    }

    fn num_actions(&self) -> usize {
        self.forces.len()
    }

    fn default_discount(&self) -> f64 {
        0.95
    }

    fn initial_state(&self, rng: &mut Rng) -> Self::State {
        self.uniform_state(rng)
    }

    fn uniform_state(&self, rng: &mut Rng) -> Self::State {
        let theta = Uniform::new_inclusive(-self.theta_range, self.theta_range)
            .expect("finite range")
            .sample(rng);
        let omega = Uniform::new_inclusive(-self.omega_range, self.omega_range)
            .expect("finite range")
            .sample(rng);
        (theta, omega)
    }

    fn step(&self, s: &Self::State, a: usize, _rng: &mut Rng) -> Step<Self::State> {
        let (t, w) = self.integrate(s.0, s.1, self.forces[a]);
        let state = (wrap_angle(t), w);
        Step {
            state,
            reward: self.reward_of(s.0, s.1),
            observation: Point::scalar(state.0),
        }
    }

    fn observe(&self, s: &Self::State, _rng: &mut Rng) -> Point {
        Point::scalar(s.0)
    }

    fn reward(&self, s: &Self::State, _a: usize) -> f64 {
        self.reward_of(s.0, s.1)
    }

    fn to_point(&self, s: &Self::State) -> Point {
        Point::Vector(vec![s.0, s.1])
    }

    fn from_point(&self, p: &Point) -> Result<Self::State> {
        match p.coords() {
            Some([t, w]) => Ok((*t, *w)),
            _ => Err(Error::DomainMismatch),
        }
    }

    /// Height `cos(theta)` of the state reached.
    fn metric(&self, next: &Self::State, _reward: f64) -> f64 {
        next.0.cos()
    }
}

// ------------------------------------------------------- discrete simulator

/// Samples trajectories from a [`DiscretePomdp`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteEnv {
    pub model: DiscretePomdp,
    /// Start distribution of evaluation episodes.
    pub prior: DVector<f64>,
}

impl DiscreteEnv {
    pub fn new(model: DiscretePomdp) -> Self {
        let s = model.num_states();
        DiscreteEnv {
            prior: DVector::from_element(s, 1.0 / s as f64),
            model,
        }
    }
}

fn sample_row(row: impl Iterator<Item = f64>, rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in row.enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

impl Environment for DiscreteEnv {
    type State = usize;

    fn name(&self) -> &str {
        "discrete"
    }

    fn spaces(&self) -> Spaces {
        Spaces {
            state: Space::discrete((0..self.model.num_states()).map(|i| format!("s{i}"))),
            observation: Space::discrete((0..self.model.num_observations()).map(|i| format!("o{i}"))),
            actions: (0..self.model.num_actions()).map(|i| format!("a{i}")).collect(),
        }
    }

    fn num_actions(&self) -> usize {
        self.model.num_actions()
    }

    fn default_discount(&self) -> f64 {
        self.model.discount
    }

    fn initial_state(&self, rng: &mut Rng) -> usize {
        sample_row(self.prior.iter().copied(), rng)
    }

    fn uniform_state(&self, rng: &mut Rng) -> usize {
        rng.random_range(0..self.model.num_states())
    }

    fn step(&self, s: &usize, a: usize, rng: &mut Rng) -> Step<usize> {
        let next = sample_row(self.model.transition[a].row(*s).iter().copied(), rng);
        Step {
            state: next,
            reward: self.model.reward[(*s, a)],
            observation: self.observe(&next, rng),
        }
    }

    fn observe(&self, s: &usize, rng: &mut Rng) -> Point {
        Point::Symbol(sample_row(self.model.observation.row(*s).iter().copied(), rng))
    }

    fn reward(&self, s: &usize, a: usize) -> f64 {
        self.model.reward[(*s, a)]
    }

    fn to_point(&self, s: &usize) -> Point {
        Point::Symbol(*s)
    }

    fn from_point(&self, p: &Point) -> Result<usize> {
        match p.symbol() {
            Some(i) if i < self.model.num_states() => Ok(i),
            _ => Err(Error::DomainMismatch),
        }
    }
}

// ---------------------------------------------------------------- collection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CollectMode {
    /// One trajectory of uniform random actions from a random start.
    #[default]
    Trajectory,
    /// Every tuple starts from an independent uniform state.
    Restart,
}

/// `n` tuples in `mode`, followed by `prior_samples` tuples from uniform `(s, a)`.
pub fn collect_dataset<E: Environment>(
    env: &E,
    n: usize,
    mode: CollectMode,
    prior_samples: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::EmptySampleSet);
    }
    let na = env.num_actions();
    let mut records = Vec::with_capacity(n + prior_samples);
    let mut state = env.uniform_state(rng);
    let mut obs = env.observe(&state, rng);
    let push = |records: &mut Vec<Transition>, s: &E::State, o: Point, a: usize, st: &Step<E::State>| {
        records.push(Transition {
            state: env.to_point(s),
            observation: o,
            action: a,
            reward: st.reward,
            next_state: env.to_point(&st.state),
            next_observation: st.observation.clone(),
        });
    };
    for _ in 0..n {
        if mode == CollectMode::Restart {
            state = env.uniform_state(rng);
            obs = env.observe(&state, rng);
        }
        let a = rng.random_range(0..na);
        let st = env.step(&state, a, rng);
        push(&mut records, &state, obs, a, &st);
        obs = st.observation.clone();
        state = st.state;
    }
    for _ in 0..prior_samples {
        let s = env.uniform_state(rng);
        let o = env.observe(&s, rng);
        let a = rng.random_range(0..na);
        let st = env.step(&s, a, rng);
        push(&mut records, &s, o, a, &st);
    }
    Ok(Dataset::new(records))
}

/// A dataset whose empirical frequencies equal the model exactly: for every
/// `(s, a)`, `per_pair` tuples with next states in proportion `T(s, a, .)`,
/// current observations in proportion `Z(s, .)` and next observations in
/// proportion `Z(s', .)`. All those proportions times `per_pair` must be integers.
pub fn exhaustive_dataset(model: &DiscretePomdp, per_pair: usize) -> Result<Dataset> {
    let counts = |probs: Vec<f64>, total: usize| -> Result<Vec<usize>> {
        let k: Vec<f64> = probs.iter().map(|p| p * total as f64).collect();
        if k.iter().any(|x| (x - x.round()).abs() > 1e-9) {
            return Err(Error::InvalidModel(format!(
                "probabilities {probs:?} are not multiples of 1/{total}"
            )));
        }
        Ok(k.iter().map(|x| x.round() as usize).collect())
    };
    let expand = |c: Vec<usize>| -> Vec<usize> {
        c.iter()
            .enumerate()
            .flat_map(|(i, &k)| std::iter::repeat_n(i, k))
            .collect()
    };
    let mut records = Vec::new();
    for s in 0..model.num_states() {
        let obs_now = expand(counts(model.observation.row(s).iter().copied().collect(), per_pair)?);
        for a in 0..model.num_actions() {
            let next = counts(model.transition[a].row(s).iter().copied().collect(), per_pair)?;
            let mut pairs = Vec::with_capacity(per_pair);
            for (s2, &k) in next.iter().enumerate() {
                if k == 0 {
                    continue;
                }
                let o2 = expand(counts(model.observation.row(s2).iter().copied().collect(), k)?);
                pairs.extend(o2.into_iter().map(|o| (s2, o)));
            }
            for (&o, &(s2, o2)) in obs_now.iter().zip(&pairs) {
                records.push(Transition {
                    state: Point::Symbol(s),
                    observation: Point::Symbol(o),
                    action: a,
                    reward: model.reward[(s, a)],
                    next_state: Point::Symbol(s2),
                    next_observation: Point::Symbol(o2),
                });
            }
        }
    }
    Ok(Dataset::new(records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn grid_examples() {
        let g = GridWorld::default();
        let mut rng = Rng::seed_from_u64(0);
        let st = g.step(&(5, 5), 0, &mut rng);
        assert_eq!(st.state, (4, 5));
        assert_eq!(st.reward, 0.0);
        assert_eq!(WALL_PATTERNS[st.observation.symbol().unwrap()], "no-walls");
        let st = g.step(&(0, 0), 0, &mut rng);
        assert_eq!(st.state, (0, 0));
        assert_eq!(WALL_PATTERNS[st.observation.symbol().unwrap()], "walls-N-W");
        let st = g.step(&(9, 9), 2, &mut rng);
        assert_eq!(st.reward, 1.0);
        assert_ne!(st.state, (9, 9));
    }

    #[test]
    fn pendulum_equilibria() {
        let p = Pendulum::default();
        let mut rng = Rng::seed_from_u64(0);
        let st = p.step(&(0.0, 0.0), 3, &mut rng);
        assert_eq!(st.state, (0.0, 0.0));
        assert_eq!(st.reward, 1.0);
        let st = p.step(&(PI, 0.0), 3, &mut rng);
        assert!((st.state.0.abs() - PI).abs() < 1e-12 && st.state.1.abs() < 1e-12);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0);
    }

    #[test]
    fn single_tuple_dataset() {
        let mut rng = Rng::seed_from_u64(1);
        let d = collect_dataset(&GridWorld::default(), 1, CollectMode::Trajectory, 0, &mut rng).unwrap();
        assert_eq!(d.len(), 1);
        assert!(collect_dataset(&GridWorld::default(), 0, CollectMode::Trajectory, 0, &mut rng).is_err());
    }

    #[test]
    fn exhaustive_counts() {
        let m = DiscretePomdp::new(
            vec![DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.5, 0.5])],
            DMatrix::from_row_slice(2, 2, &[0.75, 0.25, 0.25, 0.75]),
            DMatrix::zeros(2, 1),
            0.9,
        )
        .unwrap();
        let d = exhaustive_dataset(&m, 16).unwrap();
        assert_eq!(d.len(), 32);
        let c = d
            .records
            .iter()
            .filter(|r| r.state == Point::Symbol(0) && r.next_state == Point::Symbol(1))
            .count();
        assert_eq!(c, 4);
        assert!(exhaustive_dataset(&m, 3).is_err());
    }
}
