//! Positive-definite kernels on states, actions and observations.
//!
//! Two families are supported: a product of one-dimensional Gaussians with a
//! bandwidth per coordinate, and the delta (identity) kernel on discrete
//! symbols. Every routine here is a pure function of its inputs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A sample point: either a real coordinate vector or a discrete symbol id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Point {
    Vector(Vec<f64>),
    Symbol(usize),
}

impl Point {
    pub fn scalar(x: f64) -> Self {
        Point::Vector(vec![x])
    }

    pub fn coords(&self) -> Option<&[f64]> {
        match self {
            Point::Vector(v) => Some(v),
            Point::Symbol(_) => None,
        }
    }

    pub fn symbol(&self) -> Option<usize> {
        match self {
            Point::Symbol(s) => Some(*s),
            Point::Vector(_) => None,
        }
    }

    /// Bitwise identity key, used to merge search branches with equal observations.
    pub(crate) fn key(&self) -> PointKey {
        match self {
            Point::Symbol(s) => PointKey::Symbol(*s),
            Point::Vector(v) => PointKey::Vector(v.iter().map(|x| x.to_bits()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub(crate) enum PointKey {
    Symbol(usize),
    Vector(Vec<u64>),
}

/// A resolved kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum KernelSpec {
    /// `prod_d exp(-(x_d - y_d)^2 / (2 sigma_d^2))`
    GaussianProduct { bandwidths: Vec<f64> },
    /// `1[x = y]` on discrete symbols.
    Delta,
}

impl KernelSpec {
    pub fn gaussian(bandwidths: Vec<f64>) -> Result<Self> {
        if bandwidths.is_empty() {
            return Err(Error::InvalidKernel("no bandwidths".into()));
        }
        if let Some(b) = bandwidths.iter().find(|b| !(b.is_finite() && **b > 0.0)) {
            return Err(Error::InvalidKernel(format!("bandwidth {b} is not positive")));
        }
        Ok(KernelSpec::GaussianProduct { bandwidths })
    }

    /// Product Gaussian with bandwidths `MedDist_d / divisor_d`, where `MedDist_d`
    /// is the median pairwise distance along coordinate `d`.
    pub fn gaussian_median(points: &[Point], divisors: &[f64]) -> Result<Self> {
        check_dims(points, divisors.len())?;
        let med = coordinate_medians(points, divisors.len())?;
        Self::gaussian(med.iter().zip(divisors).map(|(m, d)| m / d).collect())
    }

    /// Product Gaussian with bandwidths `MedDist / divisor_d`, where MedDist
    /// is the median pairwise Euclidean distance between the full points.
    pub fn gaussian_joint_median(points: &[Point], divisors: &[f64]) -> Result<Self> {
        check_dims(points, divisors.len())?;
        let med = median_heuristic(points, 1.0)?;
        Self::gaussian_scaled(med, divisors)
    }

    /// Product Gaussian with bandwidths `scale / divisor_d`.
    pub fn gaussian_scaled(scale: f64, divisors: &[f64]) -> Result<Self> {
        if let Some(d) = divisors.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(Error::InvalidKernel(format!("divisor {d} is not positive")));
        }
        Self::gaussian(divisors.iter().map(|d| scale / d).collect())
    }

    pub fn eval(&self, x: &Point, y: &Point) -> Result<f64> {
        match (self, x, y) {
            (KernelSpec::Delta, Point::Symbol(a), Point::Symbol(b)) => {
                Ok(if a == b { 1.0 } else { 0.0 })
            }
            (KernelSpec::GaussianProduct { bandwidths }, Point::Vector(a), Point::Vector(b))
                if a.len() == bandwidths.len() && b.len() == bandwidths.len() =>
            {
                let mut e = 0.0;
                for ((xa, xb), s) in a.iter().zip(b).zip(bandwidths) {
                    let d = xa - xb;
                    e += d * d / (2.0 * s * s);
                }
                Ok((-e).exp())
            }
            _ => Err(Error::DomainMismatch),
        }
    }

    fn check_domain(&self, points: &[Point]) -> Result<()> {
        let ok = match self {
            KernelSpec::Delta => points.iter().all(|p| matches!(p, Point::Symbol(_))),
            KernelSpec::GaussianProduct { bandwidths } => points
                .iter()
                .all(|p| matches!(p, Point::Vector(v) if v.len() == bandwidths.len())),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::DomainMismatch)
        }
    }
}

/// Point set whose median pairwise distance sets a median-heuristic bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianSource {
    /// The points the kernel is evaluated on.
    #[default]
    Own,
    /// The training states, even for a kernel on observations. Per coordinate,
    /// the kernel's dimensions take the leading state coordinates.
    States,
}

/// Distances behind a median-heuristic bandwidth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MedianSpread {
    /// One median per coordinate.
    #[default]
    PerCoordinate,
    /// One median of full-point Euclidean distances shared by all coordinates.
    Joint,
}

/// How a kernel is chosen before seeing data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KernelChoice {
    Delta,
    /// Fixed bandwidths.
    Gaussian { bandwidths: Vec<f64> },
    /// Bandwidths `MedDist / divisor_d`.
    Median {
        divisors: Vec<f64>,
        #[serde(default)]
        distances: MedianSource,
        #[serde(default)]
        spread: MedianSpread,
    },
}

impl KernelChoice {
    /// `points` are the kernel's own inputs, `states` the training states.
    pub fn resolve(&self, points: &[Point], states: &[Point]) -> Result<KernelSpec> {
        match self {
            KernelChoice::Delta => Ok(KernelSpec::Delta),
            KernelChoice::Gaussian { bandwidths } => KernelSpec::gaussian(bandwidths.clone()),
            KernelChoice::Median {
                divisors,
                distances,
                spread,
            } => {
                check_dims(points, divisors.len())?;
                match (distances, spread) {
                    (MedianSource::Own, MedianSpread::PerCoordinate) => KernelSpec::gaussian_median(points, divisors),
                    (MedianSource::Own, MedianSpread::Joint) => KernelSpec::gaussian_joint_median(points, divisors),
                    (MedianSource::States, MedianSpread::PerCoordinate) => {
                        let med = coordinate_medians(states, divisors.len())?;
                        KernelSpec::gaussian(med.iter().zip(divisors).map(|(m, d)| m / d).collect())
                    }
                    (MedianSource::States, MedianSpread::Joint) => {
                        KernelSpec::gaussian_scaled(median_heuristic(states, 1.0)?, divisors)
                    }
                }
            }
        }
    }
}

fn check_dims(points: &[Point], dims: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    if points.iter().any(|p| p.coords().map(<[f64]>::len) != Some(dims)) {
        return Err(Error::DomainMismatch);
    }
    Ok(())
}

/// Median pairwise distance along each of the first `dims` coordinates.
pub fn coordinate_medians(points: &[Point], dims: usize) -> Result<Vec<f64>> {
    (0..dims)
        .map(|d| {
            let column = points
                .iter()
                .map(|p| match p.coords() {
                    Some(c) if c.len() > d => Ok(Point::scalar(c[d])),
                    _ => Err(Error::DomainMismatch),
                })
                .collect::<Result<Vec<_>>>()?;
            median_heuristic(&column, 1.0)
        })
        .collect()
}

/// Gram matrix `K[i, j] = k(rows_i, cols_j)`.
pub fn gram(k: &KernelSpec, rows: &[Point], cols: &[Point]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    k.check_domain(rows)?;
    k.check_domain(cols)?;
    let symmetric = std::ptr::eq(rows, cols);
    let mut g = DMatrix::zeros(rows.len(), cols.len());
    match k {
        KernelSpec::Delta => {
            for (j, c) in cols.iter().enumerate() {
                let c = c.symbol();
                for (i, r) in rows.iter().enumerate() {
                    if r.symbol() == c {
                        g[(i, j)] = 1.0;
                    }
                }
            }
        }
        KernelSpec::GaussianProduct { bandwidths } => {
            let scale: Vec<f64> = bandwidths.iter().map(|s| 0.5 / (s * s)).collect();
            let sqdist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter()
                    .zip(b)
                    .zip(&scale)
                    .map(|((x, y), w)| (x - y) * (x - y) * w)
                    .sum()
            };
            let rc: Vec<&[f64]> = rows.iter().filter_map(Point::coords).collect();
            let cc: Vec<&[f64]> = cols.iter().filter_map(Point::coords).collect();
            for j in 0..cc.len() {
                let start = if symmetric { j } else { 0 };
                for i in start..rc.len() {
                    let v = (-sqdist(rc[i], cc[j])).exp();
                    g[(i, j)] = v;
                    if symmetric {
                        g[(j, i)] = v;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// Kernel evaluations of `x` against every sample.
pub fn feature_column(k: &KernelSpec, samples: &[Point], x: &Point) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut out = DVector::zeros(samples.len());
    for (i, s) in samples.iter().enumerate() {
        out[i] = k.eval(s, x)?;
    }
    Ok(out)
}

/// Median of pairwise Euclidean distances over index pairs `i < j`, divided by `divisor`.
pub fn median_heuristic(points: &[Point], divisor: f64) -> Result<f64> {
    if !(divisor > 0.0) {
        return Err(Error::InvalidKernel(format!("divisor {divisor} is not positive")));
    }
    let coords: Vec<&[f64]> = points
        .iter()
        .map(|p| p.coords().ok_or(Error::DomainMismatch))
        .collect::<Result<_>>()?;
    if let Some(first) = coords.first() {
        if coords.iter().any(|c| c.len() != first.len()) {
            return Err(Error::DomainMismatch);
        }
    }
    let mut dists = Vec::with_capacity(coords.len() * coords.len().saturating_sub(1) / 2);
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            let d: f64 = coords[i]
                .iter()
                .zip(coords[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dists.push(d);
        }
    }
    median_of(dists).map(|m| m / divisor)
}

fn median_of(mut v: Vec<f64>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::ZeroMedianDistance);
    }
    let len = v.len();
    let (lower, upper, _) = v.select_nth_unstable_by(len / 2, f64::total_cmp);
    let upper = *upper;
    let m = if len % 2 == 1 {
        upper
    } else {
        0.5 * (lower.iter().copied().fold(f64::NEG_INFINITY, f64::max) + upper)
    };
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::ZeroMedianDistance)
    }
}

/// Element-wise product of two equally shaped matrices.
pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.component_mul(b))
}
