//! Canonical full exponential families.
//!
//! A family is specified by its sufficient statistic `phi(x)`, log-partition
//! `log Z(theta)`, natural-parameter domain, and a fixed reference measure
//! folded into the density as `log h(x)`. Densities are
//!
//! ```text
//! log p(x | theta) = theta' phi(x) - log Z(theta) + log h(x)     (nats)
//! ```
//!
//! The moment map `mu(theta) = E_theta[phi(x)] = d log Z / d theta` is a
//! bijection onto the moment range for the minimal families shipped here, and
//! the full-data MLE is exactly `mu^{-1}` of the empirical moment vector.
//!
//! Two concrete instances are provided: the zero-mean scalar Gaussian keyed by
//! its variance (with variance / standard-deviation / precision charts), and
//! the bivariate Gaussian with unit covariance keyed by its mean.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::RngCore;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::tagged_rng;

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// A batch of data points, stored row-contiguous, with optional integer labels
/// used by label-wise partitioning.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    dim: usize,
    data: Vec<f64>,
    labels: Option<Vec<i64>>,
}

impl SampleSet {
    /// Build from a flat row-major buffer. Rejects empty or misaligned data.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::DimensionMismatch(
                "point dimension must be >= 1".into(),
            ));
        }
        if data.is_empty() {
            return Err(Error::EmptySample);
        }
        if data.len() % dim != 0 {
            return Err(Error::DimensionMismatch(format!(
                "buffer of {} values is not a multiple of dim {}",
                data.len(),
                dim
            )));
        }
        Ok(Self {
            dim,
            data,
            labels: None,
        })
    }

    /// Attach one label per point.
    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels for {} points",
                labels.len(),
                self.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySample);
        }
        let dim = points[0].len();
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            if p.len() != dim {
                return Err(Error::DimensionMismatch("ragged point list".into()));
            }
            data.extend_from_slice(p);
        }
        SampleSet::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// A user-supplied chart with explicit conversion functions.
pub struct CustomParameterization {
    pub name: String,
    pub to_natural: Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>,
    pub from_natural: Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>,
}

impl fmt::Debug for CustomParameterization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomParameterization")
            .field("name", &self.name)
            .finish()
    }
}

/// A chart on parameter space. The built-in non-natural charts are the
/// variance, standard-deviation and precision coordinates of the zero-mean
/// scalar Gaussian; `Natural` is the identity chart for any family.
#[derive(Debug, Clone)]
pub enum Parameterization {
    Natural,
    Variance,
    Std,
    Precision,
    Custom(Arc<CustomParameterization>),
}

impl Parameterization {
    pub fn label(&self) -> &str {
        match self {
            Parameterization::Natural => "natural",
            Parameterization::Variance => "variance",
            Parameterization::Std => "std",
            Parameterization::Precision => "precision",
            Parameterization::Custom(c) => &c.name,
        }
    }

    /// Map a parameter vector in this chart to natural parameters.
    pub fn to_natural(&self, value: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Parameterization::Natural => Ok(value.clone()),
            Parameterization::Custom(c) => (c.to_natural)(value),
            _ => {
                let v = scalar_chart_value(self, value)?;
                let theta = match self {
                    Parameterization::Variance => -0.5 / v,
                    Parameterization::Std => -0.5 / (v * v),
                    Parameterization::Precision => -0.5 * v,
                    _ => unreachable!(),
                };
                Ok(DVector::from_element(1, theta))
            }
        }
    }

    /// Map natural parameters back into this chart.
    pub fn from_natural(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Parameterization::Natural => Ok(theta.clone()),
            Parameterization::Custom(c) => (c.from_natural)(theta),
            _ => {
                if theta.len() != 1 {
                    return Err(Error::DimensionMismatch(format!(
                        "{} chart is scalar, got dim {}",
                        self.label(),
                        theta.len()
                    )));
                }
                let t = theta[0];
                if t >= 0.0 || !t.is_finite() {
                    return Err(Error::DomainViolation(format!(
                        "natural parameter {t} not in (-inf, 0)"
                    )));
                }
                let out = match self {
                    Parameterization::Variance => -0.5 / t,
                    Parameterization::Std => (-0.5 / t).sqrt(),
                    Parameterization::Precision => -2.0 * t,
                    _ => unreachable!(),
                };
                Ok(DVector::from_element(1, out))
            }
        }
    }

    pub fn same_label(&self, other: &Parameterization) -> bool {
        self.label() == other.label()
    }
}

fn scalar_chart_value(param: &Parameterization, value: &DVector<f64>) -> Result<f64> {
    if value.len() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "{} chart is scalar, got dim {}",
            param.label(),
            value.len()
        )));
    }
    let v = value[0];
    if v <= 0.0 || !v.is_finite() {
        return Err(Error::DomainViolation(format!(
            "{} value {v} must be positive and finite",
            param.label()
        )));
    }
    Ok(v)
}

/// A canonical full exponential family. All methods are pure; implementations
/// are immutable values, safe to share across threads.
pub trait ExponentialFamily: Send + Sync {
    /// Dimension m of the sufficient statistic / natural parameter.
    fn stat_dim(&self) -> usize;

    /// Dimension of a data point.
    fn data_dim(&self) -> usize;

    /// Natural-parameter domain predicate.
    fn in_domain(&self, theta: &DVector<f64>) -> bool;

    /// Sufficient statistic phi(x).
    fn suff_stat(&self, x: &[f64]) -> DVector<f64>;

    /// log Z(theta), finite on the domain.
    fn log_partition(&self, theta: &DVector<f64>) -> f64;

    /// log of the fixed reference measure term at x.
    fn log_base_measure(&self, x: &[f64]) -> f64;

    /// Moment map mu(theta) = grad log Z.
    fn moment_map(&self, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Covariance of phi(x) under theta, i.e. the Hessian of log Z.
    fn covariance(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Interior-of-moment-range predicate.
    fn in_moment_range(&self, mu: &DVector<f64>) -> bool;

    /// Inverse moment map; closed form for the shipped instances.
    fn inverse_moment_map(&self, mu: &DVector<f64>) -> Result<DVector<f64>>;

    /// One draw from p(. | theta) written into `out` (length `data_dim`).
    fn sample_into(&self, theta: &DVector<f64>, rng: &mut dyn RngCore, out: &mut [f64]);

    fn check_domain(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.stat_dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta dim {} != stat dim {}",
                theta.len(),
                self.stat_dim()
            )));
        }
        if !self.in_domain(theta) {
            return Err(Error::DomainViolation(format!(
                "theta = {:?}",
                theta.as_slice()
            )));
        }
        Ok(())
    }
}

/// Zero-mean scalar Gaussian in natural coordinates, theta = -1/(2 sigma^2),
/// with phi(x) = x^2. Domain theta < 0; moment parameter is the variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct GaussianVarianceFamily;

impl ExponentialFamily for GaussianVarianceFamily {
    fn stat_dim(&self) -> usize {
        1
    }

    fn data_dim(&self) -> usize {
        1
    }

    fn in_domain(&self, theta: &DVector<f64>) -> bool {
        theta.len() == 1 && theta[0].is_finite() && theta[0] < 0.0
    }

    fn suff_stat(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_element(1, x[0] * x[0])
    }

    fn log_partition(&self, theta: &DVector<f64>) -> f64 {
        -0.5 * (-2.0 * theta[0]).ln()
    }

    fn log_base_measure(&self, _x: &[f64]) -> f64 {
        -0.5 * LN_2PI
    }

    fn moment_map(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_domain(theta)?;
        Ok(DVector::from_element(1, -0.5 / theta[0]))
    }

    fn covariance(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_domain(theta)?;
        Ok(DMatrix::from_element(1, 1, 0.5 / (theta[0] * theta[0])))
    }

    fn in_moment_range(&self, mu: &DVector<f64>) -> bool {
        mu.len() == 1 && mu[0].is_finite() && mu[0] > 0.0
    }

    fn inverse_moment_map(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.in_moment_range(mu) {
            return Err(Error::MomentRange(format!(
                "second moment must be positive, got {:?}",
                mu.as_slice()
            )));
        }
        Ok(DVector::from_element(1, -0.5 / mu[0]))
    }

    fn sample_into(&self, theta: &DVector<f64>, rng: &mut dyn RngCore, out: &mut [f64]) {
        let sigma = (-0.5 / theta[0]).sqrt();
        let z: f64 = rng.sample(StandardNormal);
        out[0] = sigma * z;
    }
}

/// Bivariate Gaussian with identity covariance; the natural parameter equals
/// the mean and phi(x) = x.
#[derive(Debug, Clone, Copy, Default)]
pub struct BivariateStdGaussian;

impl ExponentialFamily for BivariateStdGaussian {
    fn stat_dim(&self) -> usize {
        2
    }

    fn data_dim(&self) -> usize {
        2
    }

    fn in_domain(&self, theta: &DVector<f64>) -> bool {
        theta.len() == 2 && theta.iter().all(|t| t.is_finite())
    }

    fn suff_stat(&self, x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(&x[..2])
    }

    fn log_partition(&self, theta: &DVector<f64>) -> f64 {
        0.5 * (theta[0] * theta[0] + theta[1] * theta[1])
    }

    fn log_base_measure(&self, x: &[f64]) -> f64 {
        -LN_2PI - 0.5 * (x[0] * x[0] + x[1] * x[1])
    }

    fn moment_map(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_domain(theta)?;
        Ok(theta.clone())
    }

    fn covariance(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_domain(theta)?;
        Ok(DMatrix::identity(2, 2))
    }

    fn in_moment_range(&self, mu: &DVector<f64>) -> bool {
        self.in_domain(mu)
    }

    fn inverse_moment_map(&self, mu: &DVector<f64>) -> Result<DVector<f64>> {
        if !self.in_moment_range(mu) {
            return Err(Error::MomentRange(format!(
                "mean must be finite, got {:?}",
                mu.as_slice()
            )));
        }
        Ok(mu.clone())
    }

    fn sample_into(&self, theta: &DVector<f64>, rng: &mut dyn RngCore, out: &mut [f64]) {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        out[0] = theta[0] + z0;
        out[1] = theta[1] + z1;
    }
}

/// Log-density log p(x | theta) in nats.
pub fn log_density<F: ExponentialFamily + ?Sized>(
    family: &F,
    theta: &DVector<f64>,
    x: &[f64],
) -> Result<f64> {
    family.check_domain(theta)?;
    if x.len() != family.data_dim() {
        return Err(Error::DimensionMismatch(format!(
            "point dim {} != data dim {}",
            x.len(),
            family.data_dim()
        )));
    }
    let phi = family.suff_stat(x);
    Ok(theta.dot(&phi) - family.log_partition(theta) + family.log_base_measure(x))
}

/// Empirical mean of the sufficient statistic, (1/n) sum phi(x_i).
pub fn suff_stat_mean<F: ExponentialFamily + ?Sized>(
    family: &F,
    sample: &SampleSet,
) -> Result<DVector<f64>> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if sample.dim() != family.data_dim() {
        return Err(Error::DimensionMismatch(format!(
            "sample dim {} != data dim {}",
            sample.dim(),
            family.data_dim()
        )));
    }
    let mut acc = DVector::zeros(family.stat_dim());
    for x in sample.points() {
        acc += family.suff_stat(x);
    }
    Ok(acc / sample.len() as f64)
}

/// Full-family MLE: the inverse moment map applied to the empirical moments.
pub fn mle_full<F: ExponentialFamily + ?Sized>(
    family: &F,
    sample: &SampleSet,
) -> Result<DVector<f64>> {
    let mu_hat = suff_stat_mean(family, sample)?;
    family.inverse_moment_map(&mu_hat)
}

/// Draw n i.i.d. points from p(. | theta); deterministic given the seed.
pub fn sample_full<F: ExponentialFamily + ?Sized>(
    family: &F,
    theta: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    family.check_domain(theta)?;
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be >= 1".into()));
    }
    let mut rng = tagged_rng(seed, &[]);
    let dim = family.data_dim();
    let mut data = vec![0.0; n * dim];
    for row in data.chunks_exact_mut(dim) {
        family.sample_into(theta, &mut rng, row);
    }
    SampleSet::new(dim, data)
}

/// Generic inverse-moment-map fallback: damped Newton on the moment residual
/// with a bisection backup in the scalar case. Tolerance is on
/// ||mu(theta) - mu||, matching the exactness needs of moment-map averaging.
pub fn invert_moment_map_newton<F: ExponentialFamily + ?Sized>(
    family: &F,
    mu: &DVector<f64>,
    theta0: &DVector<f64>,
    tol: f64,
) -> Result<DVector<f64>> {
    if !family.in_moment_range(mu) {
        return Err(Error::MomentRange(format!("mu = {:?}", mu.as_slice())));
    }
    family.check_domain(theta0)?;
    let mut theta = theta0.clone();
    let mut resid = family.moment_map(&theta)? - mu;
    let mut rnorm = resid.norm();

    for _ in 0..200 {
        if rnorm <= tol {
            return Ok(theta);
        }
        let sigma = family.covariance(&theta)?;
        let step = sigma
            .clone()
            .lu()
            .solve(&resid)
            .ok_or_else(|| Error::NoConvergence("singular covariance in Newton step".into()))?;

        let mut lambda = 1.0;
        let mut advanced = false;
        for _ in 0..60 {
            let cand = &theta - &step * lambda;
            if family.in_domain(&cand) {
                let cand_resid = family.moment_map(&cand)? - mu;
                let cand_norm = cand_resid.norm();
                if cand_norm < rnorm {
                    theta = cand;
                    resid = cand_resid;
                    rnorm = cand_norm;
                    advanced = true;
                    break;
                }
            }
            lambda *= 0.5;
        }

        if !advanced {
            if family.stat_dim() == 1 {
                // fall back to bisection on the scalar residual
                let (mut lo, mut hi) = scalar_bracket(family, mu, theta[0])?;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let t = DVector::from_element(1, mid);
                    let r = family.moment_map(&t)?[0] - mu[0];
                    if r.abs() <= tol {
                        return Ok(t);
                    }
                    let r_lo = family.moment_map(&DVector::from_element(1, lo))?[0] - mu[0];
                    if (r_lo > 0.0) == (r > 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Err(Error::NoConvergence("bisection stalled".into()));
            }
            return Err(Error::NoConvergence(format!(
                "moment inversion stalled at residual {rnorm:.3e}"
            )));
        }
    }
    if rnorm <= tol {
        Ok(theta)
    } else {
        Err(Error::NoConvergence(format!(
            "moment inversion residual {rnorm:.3e} > {tol:.1e}"
        )))
    }
}

fn scalar_bracket<F: ExponentialFamily + ?Sized>(
    family: &F,
    mu: &DVector<f64>,
    start: f64,
) -> Result<(f64, f64)> {
    // expand around the start point until the residual changes sign
    let resid_at =
        |t: f64| -> Result<f64> { Ok(family.moment_map(&DVector::from_element(1, t))?[0] - mu[0]) };
    let r0 = resid_at(start)?;
    let mut width = start.abs().max(1e-3);
    for _ in 0..200 {
        for cand in [start - width, start + width] {
            let v = DVector::from_element(1, cand);
            if family.in_domain(&v) {
                let r = resid_at(cand)?;
                if (r > 0.0) != (r0 > 0.0) {
                    return Ok((start.min(cand), start.max(cand)));
                }
            }
        }
        width *= 2.0;
    }
    Err(Error::NoConvergence(
        "no sign change found for bisection bracket".into(),
    ))
}
