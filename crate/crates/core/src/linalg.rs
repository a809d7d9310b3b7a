//! Regularized solves `(G + eps n I) X = B`, dense or through a pivoted
//! incomplete Cholesky factor and the Woodbury identity.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which factorization backs the regularized solves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "mode", deny_unknown_fields)]
pub enum LowRank {
    /// Dense Cholesky.
    #[default]
    Off,
    /// Incomplete Cholesky truncated at `rank` columns, or earlier once the
    /// residual trace drops below `tolerance`.
    Rank {
        rank: usize,
        #[serde(default)]
        tolerance: f64,
    },
    /// As `Rank` with the cap `ceil(fraction * n)`.
    Fraction {
        fraction: f64,
        #[serde(default)]
        tolerance: f64,
    },
    /// Incomplete Cholesky stopped once the residual trace drops below `tolerance`.
    Tolerance { tolerance: f64 },
}

impl LowRank {
    pub fn is_off(&self) -> bool {
        matches!(self, LowRank::Off)
    }

    /// `(rank_cap, residual trace tolerance)` for an `n x n` Gram matrix.
    pub fn limits(&self, n: usize) -> Option<(usize, f64)> {
        match *self {
            LowRank::Off => None,
            LowRank::Rank { rank, tolerance } => Some((rank.min(n), tolerance)),
            LowRank::Fraction { fraction, tolerance } => Some((
                ((fraction.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n),
                tolerance,
            )),
            LowRank::Tolerance { tolerance } => Some((n, tolerance)),
        }
    }
}

/// Solves `(G + eps n I) X = B` with a dense Cholesky factorization.
pub fn reg_solve(g: &DMatrix<f64>, eps: f64, n: usize, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = regularized_cholesky(g, eps * n as f64)?;
    if b.nrows() != g.nrows() {
        return Err(Error::DimensionMismatch {
            expected: g.nrows(),
            got: b.nrows(),
        });
    }
    Ok(chol.solve(b))
}

pub fn reg_solve_vec(g: &DMatrix<f64>, eps: f64, n: usize, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = regularized_cholesky(g, eps * n as f64)?;
    if b.len() != g.nrows() {
        return Err(Error::DimensionMismatch {
            expected: g.nrows(),
            got: b.len(),
        });
    }
    Ok(chol.solve(b))
}

pub(crate) fn regularized_cholesky(g: &DMatrix<f64>, shift: f64) -> Result<Cholesky<f64, Dyn>> {
    if !g.is_square() {
        return Err(Error::ShapeMismatch(format!("{:?} is not square", g.shape())));
    }
    if shift < 0.0 {
        return Err(Error::InvalidModel(format!("negative regularizer {shift}")));
    }
    let mut m = g.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += shift;
    }
    let chol = Cholesky::new(m).ok_or(Error::Singular)?;
    // A numerically zero pivot means the regularized system is singular.
    let l = chol.l_dirty();
    let max_diag = (0..l.nrows()).map(|i| l[(i, i)]).fold(0.0, f64::max);
    if (0..l.nrows()).any(|i| l[(i, i)] <= max_diag * 1e-12) {
        return Err(Error::Singular);
    }
    Ok(chol)
}

/// Greedy pivoted (incomplete) Cholesky factor `L` with `L L^T ~ G`.
#[derive(Debug, Clone)]
pub struct LowRankFactor {
    /// `n x r` factor.
    pub l: DMatrix<f64>,
    /// Sample index chosen at each step.
    pub pivots: Vec<usize>,
    /// Residual trace after each accepted column (index `k` holds the trace after `k+1` columns).
    pub trace_history: Vec<f64>,
    pub residual_trace: f64,
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.l.nrows()
    }

    /// Factor rows for points outside the sample set. `cross[(i, k)]` must hold
    /// `k(x_i, sample[pivots[k]])`.
    pub fn extend(&self, cross: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let r = self.rank();
        if cross.ncols() != r {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: cross.ncols(),
            });
        }
        let mut out = DMatrix::zeros(cross.nrows(), r);
        for k in 0..r {
            let p = self.pivots[k];
            let pivot = self.l[(p, k)];
            for i in 0..cross.nrows() {
                let mut v = cross[(i, k)];
                for j in 0..k {
                    v -= out[(i, j)] * self.l[(p, j)];
                }
                out[(i, k)] = v / pivot;
            }
        }
        Ok(out)
    }

    /// Factor with every row `i` multiplied by `scale[i]`.
    pub fn scale_rows(&self, scale: &DVector<f64>) -> DMatrix<f64> {
        let mut l = self.l.clone();
        for (i, mut row) in l.row_iter_mut().enumerate() {
            row *= scale[i];
        }
        l
    }
}

/// Relative size below which a residual pivot is treated as exhausted.
const PIVOT_FLOOR: f64 = 1e-13;

/// Pivoted incomplete Cholesky of a symmetric PSD matrix.
///
/// Columns are added greedily on the largest residual diagonal until
/// `rank_cap` columns exist, the residual trace falls to `tol` or below, or
/// the residual is exhausted numerically.
pub fn icf(g: &DMatrix<f64>, rank_cap: usize, tol: f64) -> Result<LowRankFactor> {
    if !g.is_square() {
        return Err(Error::ShapeMismatch(format!("{:?} is not square", g.shape())));
    }
    let n = g.nrows();
    let mut diag: Vec<f64> = (0..n).map(|i| g[(i, i)]).collect();
    let scale = diag.iter().copied().fold(0.0, f64::max);
    let neg_tol = 1e-8 * scale.max(f64::MIN_POSITIVE);
    if diag.iter().any(|&d| d < -neg_tol) {
        return Err(Error::NotPsd);
    }
    let cap = rank_cap.min(n);
    let mut l = DMatrix::<f64>::zeros(n, cap);
    let mut pivots = Vec::with_capacity(cap);
    let mut history = Vec::with_capacity(cap);
    let mut trace: f64 = diag.iter().map(|d| d.max(0.0)).sum();
    let mut taken = vec![false; n];
    let mut col = DVector::<f64>::zeros(n);

    while pivots.len() < cap && trace > tol {
        let k = pivots.len();
        let (p, &dp) = diag
            .iter()
            .enumerate()
            .filter(|(i, _)| !taken[*i])
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("remaining pivots");
        if dp <= PIVOT_FLOOR * scale {
            break;
        }
        let sq = dp.sqrt();
        col.copy_from(&g.column(p));
        if k > 0 {
            let prev = l.columns(0, k);
            let row = prev.row(p).transpose();
            col.gemv(-1.0, &prev, &row, 1.0);
        }
        col /= sq;
        for &q in &pivots {
            col[q] = 0.0;
        }
        col[p] = sq;
        for i in 0..n {
            diag[i] -= col[i] * col[i];
        }
        if diag.iter().any(|&d| d < -neg_tol) {
            return Err(Error::NotPsd);
        }
        diag[p] = 0.0;
        for &q in &pivots {
            diag[q] = 0.0;
        }
        taken[p] = true;
        pivots.push(p);
        l.set_column(k, &col);
        trace = diag.iter().map(|d| d.max(0.0)).sum();
        history.push(trace);
    }

    let rank = pivots.len();
    let l = l.columns(0, rank).into_owned();
    Ok(LowRankFactor {
        l,
        pivots,
        trace_history: history,
        residual_trace: trace,
    })
}

/// `(L L^T + c I)^{-1}` applied through the `r x r` inner system.
#[derive(Debug, Clone)]
pub struct Woodbury {
    l: DMatrix<f64>,
    shift: f64,
    inner: Option<Cholesky<f64, Dyn>>,
}

impl Woodbury {
    pub fn new(l: DMatrix<f64>, shift: f64) -> Result<Self> {
        if !(shift > 0.0) {
            return Err(Error::Singular);
        }
        let inner = if l.ncols() == 0 {
            None
        } else {
            let mut m = l.tr_mul(&l);
            for i in 0..m.nrows() {
                m[(i, i)] += shift;
            }
            Some(Cholesky::new(m).ok_or(Error::Singular)?)
        };
        Ok(Woodbury { l, shift, inner })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match &self.inner {
            None => b / self.shift,
            Some(inner) => {
                let y = inner.solve(&self.l.tr_mul(b));
                (b - &self.l * y) / self.shift
            }
        }
    }

    /// `(L L^T + c I)^{-1} L y = L (L^T L + c I)^{-1} y`.
    pub fn solve_range(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inner {
            None => DMatrix::zeros(self.l.nrows(), y.ncols()),
            Some(inner) => &self.l * inner.solve(y),
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.inner {
            None => b / self.shift,
            Some(inner) => {
                let y = inner.solve(&self.l.tr_mul(b));
                (b - &self.l * y) / self.shift
            }
        }
    }
}

/// `(L L^T + eps n I)^{-1} b` for an incomplete Cholesky factor.
pub fn woodbury_solve(factor: &LowRankFactor, eps: f64, n: usize, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != factor.nrows() {
        return Err(Error::DimensionMismatch {
            expected: factor.nrows(),
            got: b.len(),
        });
    }
    Ok(Woodbury::new(factor.l.clone(), eps * n as f64)?.solve_vec(b))
}

/// A factored `(G + eps n I)` ready for repeated solves.
#[derive(Debug, Clone)]
pub enum RegularizedSystem {
    Dense(Cholesky<f64, Dyn>),
    LowRank(Woodbury),
}

impl RegularizedSystem {
    pub fn dense(g: &DMatrix<f64>, eps: f64, n: usize) -> Result<Self> {
        Ok(RegularizedSystem::Dense(regularized_cholesky(g, eps * n as f64)?))
    }

    pub fn low_rank(factor: &LowRankFactor, eps: f64, n: usize) -> Result<Self> {
        Ok(RegularizedSystem::LowRank(Woodbury::new(
            factor.l.clone(),
            eps * n as f64,
        )?))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            RegularizedSystem::Dense(c) => c.solve(b),
            RegularizedSystem::LowRank(w) => w.solve_vec(b),
        }
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            RegularizedSystem::Dense(c) => c.solve(b),
            RegularizedSystem::LowRank(w) => w.solve(b),
        }
    }
}
