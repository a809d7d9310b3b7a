//! Belief embeddings as weight vectors over training samples.
//!
//! A belief is a vector `alpha` over the `n` training states; the predictive
//! observation embedding is a vector `beta'` over the training observations
//! and the kernel Bayes' rule maps it back to posterior state weights.
//!
//! ```text
//! alpha --L_a--> beta' --normalize--> beta_hat --R(beta_hat) k_O(o')--> alpha'
//! ```
//!
//! `L_a = (G_S + eps_S n I)^-1 G_SS' (G_SA + eps_SA n I)^-1 D(k_A(a)) G_S` is
//! never formed; `L_a alpha` is evaluated right to left with the two factored
//! regularized systems shared by all actions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::kernel::{feature_column, gram, hadamard, KernelSpec, Point};
use crate::linalg::{icf, LowRank, LowRankFactor, RegularizedSystem, Woodbury};

/// Weight vector over the training samples.
pub type BeliefWeights = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularizers {
    pub state: f64,
    pub state_action: f64,
    pub kbr: f64,
    pub obs: f64,
}

impl Regularizers {
    pub fn uniform(eps: f64) -> Self {
        Regularizers {
            state: eps,
            state_action: eps,
            kbr: eps,
            obs: eps,
        }
    }

    /// `0.1 / sqrt(n)` for every regularizer.
    pub fn default_for(n: usize) -> Self {
        Self::uniform(0.1 / (n.max(1) as f64).sqrt())
    }
}

/// Which Gram-matrix form of the kernel Bayes' rule to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum KbrVariant {
    /// `(D G_O + delta n I)^-1 D`
    #[default]
    Plain,
    /// `D G_O ((D G_O)^2 + delta n I)^-1 D`
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub state_kernel: KernelSpec,
    pub action_kernel: KernelSpec,
    pub obs_kernel: KernelSpec,
    pub regularizers: Regularizers,
    pub kbr: KbrVariant,
    pub low_rank: LowRank,
}

#[derive(Debug, Clone)]
enum TransitionOp {
    Dense {
        next_gram: DMatrix<f64>,
        state_action: RegularizedSystem,
    },
    LowRank {
        next: NextGram,
        state_action: RegularizedSystem,
    },
}

/// `G_SS'`, kept factored as `L_S L_S'^T` when the state factor compresses.
#[derive(Debug, Clone)]
enum NextGram {
    Dense(DMatrix<f64>),
    Factored(DMatrix<f64>),
}

#[derive(Debug, Clone)]
enum StateProducts {
    Dense,
    LowRank(LowRankFactor),
}

/// Gram matrices, factorizations and transition operators learned from a dataset.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    params: ModelParams,
    states: Vec<Point>,
    observations: Vec<Point>,
    action_points: Vec<Point>,
    /// Smallest sample index with a bit-identical observation.
    obs_class: Vec<usize>,
    gram_s: DMatrix<f64>,
    gram_o: DMatrix<f64>,
    action_columns: Vec<DVector<f64>>,
    state_system: RegularizedSystem,
    state_products: StateProducts,
    obs_system: RegularizedSystem,
    obs_factor: Option<LowRankFactor>,
    factor_ranks: Option<(usize, usize, usize)>,
    transition: TransitionOp,
}

impl TrainedModel {
    /// Builds every Gram matrix and the transition operator. `action_points`
    /// is the finite action set, indexed by the dataset's action ids.
    pub fn train(data: &Dataset, action_points: &[Point], params: ModelParams) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptySampleSet);
        }
        if action_points.is_empty() {
            return Err(Error::InvalidModel("empty action set".into()));
        }
        let n = data.len();
        let states = data.states();
        let observations = data.observations();
        let next_states = data.next_states();
        let sample_actions = data
            .actions()
            .into_iter()
            .map(|a| action_points.get(a).cloned().ok_or(Error::UnknownAction(a)))
            .collect::<Result<Vec<_>>>()?;
        let regs = params.regularizers;

        let gram_s = gram(&params.state_kernel, &states, &states)?;
        let gram_o = gram(&params.obs_kernel, &observations, &observations)?;
        let gram_a = gram(&params.action_kernel, &sample_actions, &sample_actions)?;
        let gram_sa = hadamard(&gram_s, &gram_a)?;
        drop(gram_a);
        let action_columns = action_points
            .iter()
            .map(|p| feature_column(&params.action_kernel, &sample_actions, p))
            .collect::<Result<Vec<_>>>()?;

        let mut factor_ranks = None;
        let (state_system, state_products, obs_system, obs_factor, transition) =
            match params.low_rank.limits(n) {
                None => {
                    let state_system = RegularizedSystem::dense(&gram_s, regs.state, n)?;
                    let sa_system = RegularizedSystem::dense(&gram_sa, regs.state_action, n)?;
                    let next_gram = gram(&params.state_kernel, &states, &next_states)?;
                    let obs_system = RegularizedSystem::dense(&gram_o, regs.obs, n)?;
                    (
                        state_system,
                        StateProducts::Dense,
                        obs_system,
                        None,
                        TransitionOp::Dense {
                            next_gram,
                            state_action: sa_system,
                        },
                    )
                }
                Some((cap, tol)) => {
                    let fs = icf(&gram_s, cap, tol)?;
                    let fsa = icf(&gram_sa, cap, tol)?;
                    let fo = icf(&gram_o, cap, tol)?;
                    factor_ranks = Some((fs.rank(), fsa.rank(), fo.rank()));
                    // a factor that does not compress is solved densely
                    let compresses = |f: &LowRankFactor| 2 * f.rank() <= n;
                    let next = if !compresses(&fs) {
                        NextGram::Dense(gram(&params.state_kernel, &states, &next_states)?)
                    } else if fs.rank() == 0 {
                        NextGram::Factored(DMatrix::zeros(n, 0))
                    } else {
                        let pivot_states: Vec<Point> =
                            fs.pivots.iter().map(|&p| states[p].clone()).collect();
                        let cross = gram(&params.state_kernel, &next_states, &pivot_states)?;
                        NextGram::Factored(fs.extend(&cross)?)
                    };
                    let state_system = if compresses(&fs) {
                        RegularizedSystem::low_rank(&fs, regs.state, n)?
                    } else {
                        RegularizedSystem::dense(&gram_s, regs.state, n)?
                    };
                    let state_action = if compresses(&fsa) {
                        RegularizedSystem::low_rank(&fsa, regs.state_action, n)?
                    } else {
                        RegularizedSystem::dense(&gram_sa, regs.state_action, n)?
                    };
                    let obs_system = if compresses(&fo) {
                        RegularizedSystem::low_rank(&fo, regs.obs, n)?
                    } else {
                        RegularizedSystem::dense(&gram_o, regs.obs, n)?
                    };
                    (
                        state_system,
                        StateProducts::LowRank(fs),
                        obs_system,
                        Some(fo),
                        TransitionOp::LowRank { next, state_action },
                    )
                }
            };

        let mut first_seen = std::collections::HashMap::new();
        let obs_class = observations
            .iter()
            .enumerate()
            .map(|(i, o)| *first_seen.entry(o.key()).or_insert(i))
            .collect();

        Ok(TrainedModel {
            params,
            states,
            observations,
            action_points: action_points.to_vec(),
            obs_class,
            gram_s,
            gram_o,
            action_columns,
            state_system,
            state_products,
            obs_system,
            obs_factor,
            factor_ranks,
            transition,
        })
    }

    pub fn n(&self) -> usize {
        self.states.len()
    }

    pub fn num_actions(&self) -> usize {
        self.action_points.len()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn states(&self) -> &[Point] {
        &self.states
    }

    pub fn observations(&self) -> &[Point] {
        &self.observations
    }

    /// Representative sample index of the observation at sample `i`.
    pub fn observation_class(&self, i: usize) -> usize {
        self.obs_class[i]
    }

    pub fn gram_states(&self) -> &DMatrix<f64> {
        &self.gram_s
    }

    pub fn gram_observations(&self) -> &DMatrix<f64> {
        &self.gram_o
    }

    /// Ranks of the state, state-action and observation factors when low-rank is on.
    pub fn factor_ranks(&self) -> Option<(usize, usize, usize)> {
        self.factor_ranks
    }

    fn check_len(&self, v: &DVector<f64>) -> Result<()> {
        if v.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// `G_S alpha`, shared by every action expanded from the same belief.
    pub fn state_products(&self, alpha: &BeliefWeights) -> Result<DVector<f64>> {
        self.check_len(alpha)?;
        Ok(match &self.state_products {
            StateProducts::Dense => sparse_aware_matvec(&self.gram_s, alpha),
            StateProducts::LowRank(f) => &f.l * f.l.tr_mul(alpha),
        })
    }

    /// `beta' = L_a alpha` given precomputed `G_S alpha`.
    pub fn predict_from_products(&self, products: &DVector<f64>, action: usize) -> Result<DVector<f64>> {
        let ka = self
            .action_columns
            .get(action)
            .ok_or(Error::UnknownAction(action))?;
        self.check_len(products)?;
        let v = ka.component_mul(products);
        Ok(match &self.transition {
            TransitionOp::Dense {
                next_gram,
                state_action,
            } => self
                .state_system
                .solve_vec(&(next_gram * state_action.solve_vec(&v))),
            TransitionOp::LowRank { next, state_action } => {
                let w = state_action.solve_vec(&v);
                let x = match next {
                    NextGram::Dense(g) => g * w,
                    NextGram::Factored(rows) => {
                        let StateProducts::LowRank(fs) = &self.state_products else {
                            unreachable!("low-rank transition without state factor")
                        };
                        &fs.l * rows.tr_mul(&w)
                    }
                };
                self.state_system.solve_vec(&x)
            }
        })
    }

    /// Predictive observation weights `beta' = L_{O|S,a} alpha`.
    pub fn predict_obs_weights(&self, alpha: &BeliefWeights, action: usize) -> Result<DVector<f64>> {
        let products = self.state_products(alpha)?;
        self.predict_from_products(&products, action)
    }

    /// Materializes the `n x n` matrix `L_{O|S,a}`.
    pub fn transition_matrix(&self, action: usize) -> Result<DMatrix<f64>> {
        let n = self.n();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.predict_obs_weights(&e, action)?);
        }
        Ok(out)
    }

    /// `k_O(o)` over the training observations.
    pub fn obs_features(&self, o: &Point) -> Result<DVector<f64>> {
        feature_column(&self.params.obs_kernel, &self.observations, o)
    }

    /// `(G_O + n eps_O I)^-1 k_O(o)`: belief weights from one observation and no prior.
    pub fn initial_belief(&self, o: &Point) -> Result<BeliefWeights> {
        Ok(self.obs_system.solve_vec(&self.obs_features(o)?))
    }

    /// Per-belief posterior operator `R_{S|O}(beta_hat)`. `beta_hat` must be
    /// nonnegative; callers normalize first.
    pub fn posterior_operator(&self, beta_hat: &DVector<f64>) -> Result<PosteriorOperator> {
        self.check_len(beta_hat)?;
        if beta_hat.iter().any(|&b| b < 0.0 || !b.is_finite()) {
            return Err(Error::DegenerateWeights);
        }
        let support: Vec<usize> = (0..beta_hat.len()).filter(|&i| beta_hat[i] > 0.0).collect();
        if support.is_empty() {
            return Err(Error::DegenerateWeights);
        }
        let m = support.len();
        let shift = self.params.regularizers.kbr * self.n() as f64;
        let sqrt_b = DVector::from_iterator(m, support.iter().map(|&i| beta_hat[i].sqrt()));

        let kind = match (&self.obs_factor, self.params.kbr) {
            (None, variant) => {
                // K = D^1/2 G_O[S,S] D^1/2
                let k = DMatrix::from_fn(m, m, |a, b| {
                    sqrt_b[a] * self.gram_o[(support[a], support[b])] * sqrt_b[b]
                });
                match variant {
                    KbrVariant::Plain => {
                        PosteriorKind::Dense(crate::linalg::regularized_cholesky(&k, shift)?)
                    }
                    KbrVariant::Squared => {
                        let eig = SymmetricEigen::new(k);
                        let filter = eig.eigenvalues.map(|l| l / (l * l + shift));
                        if filter.iter().any(|f| !f.is_finite()) {
                            return Err(Error::Singular);
                        }
                        PosteriorKind::Spectral {
                            basis: eig.eigenvectors,
                            filter,
                        }
                    }
                }
            }
            (Some(fo), variant) => {
                let w = DMatrix::from_fn(m, fo.rank(), |a, k| sqrt_b[a] * fo.l[(support[a], k)]);
                match variant {
                    KbrVariant::Plain => PosteriorKind::Woodbury(Woodbury::new(w, shift)?),
                    KbrVariant::Squared => {
                        // K = W W^T; K (K^2 + c)^-1 = W Q diag(1/(l^2 + c)) Q^T W^T with W^T W = Q diag(l) Q^T.
                        let eig = SymmetricEigen::new(w.tr_mul(&w));
                        let filter = eig.eigenvalues.map(|l| 1.0 / (l * l + shift));
                        if filter.iter().any(|f| !f.is_finite()) {
                            return Err(Error::Singular);
                        }
                        PosteriorKind::Spectral {
                            basis: &w * eig.eigenvectors,
                            filter,
                        }
                    }
                }
            }
        };
        Ok(PosteriorOperator {
            n: self.n(),
            support,
            sqrt_b,
            kind,
        })
    }

    /// Kernel Bayes' rule posterior after observing `o` under predictive
    /// weights `beta`. `beta` is normalized first, so only its direction matters.
    pub fn kbr_posterior(&self, beta: &DVector<f64>, o: &Point) -> Result<BeliefWeights> {
        let beta_hat = normalize(beta)?;
        let op = self.posterior_operator(&beta_hat)?;
        op.apply(&self.obs_features(o)?)
    }

    /// Same as [`Self::kbr_posterior`] with the squared-regularized form.
    pub fn kbr_posterior_squared(&self, beta: &DVector<f64>, o: &Point) -> Result<BeliefWeights> {
        let mut model = self.clone();
        model.params.kbr = KbrVariant::Squared;
        model.kbr_posterior(beta, o)
    }

    /// Posterior with raw, possibly negative weights: `(D(beta) G_O + delta n I)^-1 D(beta) k_O(o)`.
    /// Always dense.
    pub fn kbr_posterior_raw(&self, beta: &DVector<f64>, o: &Point) -> Result<BeliefWeights> {
        self.check_len(beta)?;
        let k = self.obs_features(o)?;
        let dk = beta.component_mul(&k);
        if dk.iter().all(|&x| x == 0.0) {
            return Err(Error::PredictionFailure);
        }
        let n = self.n();
        let shift = self.params.regularizers.kbr * n as f64;
        let mut dg = self.gram_o.clone();
        for (i, mut row) in dg.row_iter_mut().enumerate() {
            row *= beta[i];
        }
        match self.params.kbr {
            KbrVariant::Plain => {
                for i in 0..n {
                    dg[(i, i)] += shift;
                }
                dg.lu().solve(&dk).ok_or(Error::Singular)
            }
            KbrVariant::Squared => {
                let mut sq = &dg * &dg;
                for i in 0..n {
                    sq[(i, i)] += shift;
                }
                let x = sq.lu().solve(&dk).ok_or(Error::Singular)?;
                Ok(dg * x)
            }
        }
    }
}

/// `(D(beta) G_O + delta n I)^-1 D(beta)` for raw, possibly negative `beta`,
/// factored once by LU. Used by the uncorrected operator.
#[derive(Debug, Clone)]
pub struct RawPosteriorOperator {
    beta: DVector<f64>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    /// `D(beta) G_O` for the squared form.
    scaled_gram: Option<DMatrix<f64>>,
}

impl RawPosteriorOperator {
    /// Full length-n posterior weights, one column per observation sample.
    pub fn apply_samples(&self, model: &TrainedModel, samples: &[usize]) -> Result<DMatrix<f64>> {
        let n = self.beta.len();
        let mut rhs = DMatrix::zeros(n, samples.len());
        for (c, &j) in samples.iter().enumerate() {
            let g = model.gram_o.column(j);
            let mut col = rhs.column_mut(c);
            for i in 0..n {
                col[i] = self.beta[i] * g[i];
            }
            if col.iter().all(|&x| x == 0.0) {
                return Err(Error::PredictionFailure);
            }
        }
        let x = self.lu.solve(&rhs).ok_or(Error::Singular)?;
        Ok(match &self.scaled_gram {
            None => x,
            Some(dg) => dg * x,
        })
    }
}

impl TrainedModel {
    pub fn raw_posterior_operator(&self, beta: &DVector<f64>) -> Result<RawPosteriorOperator> {
        self.check_len(beta)?;
        let n = self.n();
        let shift = self.params.regularizers.kbr * n as f64;
        let mut dg = self.gram_o.clone();
        for (i, mut row) in dg.row_iter_mut().enumerate() {
            row *= beta[i];
        }
        let (system, scaled_gram) = match self.params.kbr {
            KbrVariant::Plain => (dg, None),
            KbrVariant::Squared => (&dg * &dg, Some(dg)),
        };
        let mut system = system;
        for i in 0..n {
            system[(i, i)] += shift;
        }
        let lu = system.lu();
        if !lu.is_invertible() {
            return Err(Error::Singular);
        }
        Ok(RawPosteriorOperator {
            beta: beta.clone(),
            lu,
            scaled_gram,
        })
    }
}

fn sparse_aware_matvec(g: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let nnz = v.iter().filter(|x| **x != 0.0).count();
    if nnz * 4 < v.len() {
        let mut out = DVector::zeros(g.nrows());
        for (j, &x) in v.iter().enumerate() {
            if x != 0.0 {
                out.axpy(x, &g.column(j), 1.0);
            }
        }
        out
    } else {
        g * v
    }
}

#[derive(Debug, Clone)]
enum PosteriorKind {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Woodbury(Woodbury),
    /// `basis diag(filter) basis^T`
    Spectral {
        basis: DMatrix<f64>,
        filter: DVector<f64>,
    },
}

/// `R_{S|O}(beta_hat)` factored once per belief and action, applied per observation.
///
/// With `D = diag(beta_hat)` restricted to its support `S`, the plain form is
/// evaluated as `D^1/2 (D^1/2 G_O[S,S] D^1/2 + delta n I)^-1 D^1/2 k_O(o)[S]`,
/// which equals `(D G_O + delta n I)^-1 D k_O(o)` and is zero off `S`.
#[derive(Debug, Clone)]
pub struct PosteriorOperator {
    n: usize,
    support: Vec<usize>,
    sqrt_b: DVector<f64>,
    kind: PosteriorKind,
}

impl PosteriorOperator {
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// Posterior weights for an observation with feature column `k_obs` (length n).
    pub fn apply(&self, k_obs: &DVector<f64>) -> Result<BeliefWeights> {
        if k_obs.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: k_obs.len(),
            });
        }
        let rhs = DVector::from_iterator(
            self.support.len(),
            self.support
                .iter()
                .zip(self.sqrt_b.iter())
                .map(|(&i, &s)| s * k_obs[i]),
        );
        if rhs.iter().all(|&x| x == 0.0) {
            return Err(Error::PredictionFailure);
        }
        let z = match &self.kind {
            PosteriorKind::Dense(c) => c.solve(&rhs),
            PosteriorKind::Woodbury(w) => w.solve_vec(&rhs),
            PosteriorKind::Spectral { basis, filter } => {
                basis * basis.tr_mul(&rhs).component_mul(filter)
            }
        };
        let mut out = DVector::zeros(self.n);
        for ((&i, &s), zi) in self.support.iter().zip(self.sqrt_b.iter()).zip(z.iter()) {
            out[i] = s * zi;
        }
        Ok(out)
    }

    /// Posterior for the training observation at sample index `j`, using column `j` of `G_O`.
    pub fn apply_sample(&self, model: &TrainedModel, j: usize) -> Result<BeliefWeights> {
        self.apply(&model.gram_o.column(j).clone_owned())
    }

    /// Posteriors for several training observations at once. Column `c` of
    /// the result holds the weights on `support()` for observation sample
    /// `samples[c]`; entries off the support are zero.
    pub fn apply_samples(&self, model: &TrainedModel, samples: &[usize]) -> Result<DMatrix<f64>> {
        let m = self.support.len();
        for &j in samples {
            if j >= self.n {
                return Err(Error::DimensionMismatch {
                    expected: self.n,
                    got: j,
                });
            }
            let g = model.gram_o.column(j);
            if self.support.iter().all(|&i| g[i] == 0.0) {
                return Err(Error::PredictionFailure);
            }
        }
        let mut z = if let (PosteriorKind::Woodbury(w), Some(fo)) = (&self.kind, &model.obs_factor) {
            // D^1/2 G_O[S, j] = W l_j in the factored model
            let y = DMatrix::from_fn(fo.rank(), samples.len(), |k, c| fo.l[(samples[c], k)]);
            w.solve_range(&y)
        } else {
            let rhs = DMatrix::from_fn(m, samples.len(), |a, c| {
                self.sqrt_b[a] * model.gram_o[(self.support[a], samples[c])]
            });
            match &self.kind {
                PosteriorKind::Dense(c) => c.solve(&rhs),
                PosteriorKind::Woodbury(w) => w.solve(&rhs),
                PosteriorKind::Spectral { basis, filter } => {
                    let mut p = basis.tr_mul(&rhs);
                    for (k, mut row) in p.row_iter_mut().enumerate() {
                        row *= filter[k];
                    }
                    basis * p
                }
            }
        };
        for (a, mut row) in z.row_iter_mut().enumerate() {
            row *= self.sqrt_b[a];
        }
        Ok(z)
    }

    /// Expands weights on `support()` to a full length-n vector.
    pub fn scatter(&self, values: impl IntoIterator<Item = f64>) -> BeliefWeights {
        let mut out = DVector::zeros(self.n);
        for (&i, v) in self.support.iter().zip(values) {
            out[i] = v;
        }
        out
    }
}

/// `w_i = max(w_i, 0) / sum_j max(w_j, 0)`.
///
/// Weights whose positive part already sums to one up to rounding are only
/// clamped, so applying `normalize` twice gives bit-identical output.
pub fn normalize(w: &DVector<f64>) -> Result<DVector<f64>> {
    let total: f64 = w.iter().map(|x| x.max(0.0)).sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    if (total - 1.0).abs() <= 4.0 * w.len() as f64 * f64::EPSILON {
        return Ok(w.map(|x| x.max(0.0)));
    }
    Ok(w.map(|x| x.max(0.0) / total))
}

/// `<mu_hat, f> = alpha^T f`.
pub fn expectation(alpha: &BeliefWeights, f_values: &DVector<f64>) -> Result<f64> {
    if alpha.len() != f_values.len() {
        return Err(Error::DimensionMismatch {
            expected: alpha.len(),
            got: f_values.len(),
        });
    }
    Ok(alpha.dot(f_values))
}
