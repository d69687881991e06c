//! Curved exponential families.
//!
//! A curved family constrains the natural parameters of a base full family to
//! a smooth embedding `eta(theta)` with `q = dim(theta) < m = dim(eta)`:
//!
//! ```text
//! log p(x | theta) = eta(theta)' phi(x) - log Z(eta(theta)) + log h(x)
//! ```
//!
//! The module carries the embedding jets (first and second derivatives),
//! Fisher information `I = eta_dot' Sigma eta_dot`, statistical curvature in
//! both its scalar and vector-parameter forms, a grid+Newton scalar MLE, and
//! sampling. The shipped instance is the bivariate normal with mean restricted
//! to an ellipse; `LinearEmbedding` gives the flat (full-subfamily) case used
//! in tests and by the theory module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::{suff_stat_mean, ExponentialFamily, SampleSet};
use crate::theory;

/// Grid resolution for the scalar maximizer.
pub const MLE_GRID_POINTS: usize = 1024;
/// Stationarity tolerance |l'(theta_hat)| for the scalar MLE.
pub const MLE_GRAD_TOL: f64 = 1e-10;

/// Embedding value with first derivative (m x q) and the q second-derivative
/// matrices eta_ddot_i = d eta_dot / d theta_i (each m x q).
#[derive(Debug, Clone)]
pub struct EmbeddingJet {
    pub eta: DVector<f64>,
    pub eta_dot: DMatrix<f64>,
    pub eta_ddot: Vec<DMatrix<f64>>,
}

/// A curved exponential family over a full base family.
pub trait CurvedFamily: Send + Sync {
    type Base: ExponentialFamily;

    fn base(&self) -> &Self::Base;

    /// Parameter dimension q (< stat_dim of the base).
    fn param_dim(&self) -> usize;

    fn stat_dim(&self) -> usize {
        self.base().stat_dim()
    }

    /// Box bounds of the parameter domain.
    fn theta_bounds(&self) -> (DVector<f64>, DVector<f64>);

    /// Whether the (scalar) chart wraps around at the bounds.
    fn periodic(&self) -> bool {
        false
    }

    fn contains(&self, theta: &DVector<f64>) -> bool {
        let (lo, hi) = self.theta_bounds();
        theta.len() == self.param_dim()
            && theta
                .iter()
                .enumerate()
                .all(|(i, t)| t.is_finite() && lo[i] < *t && *t <= hi[i])
    }

    /// Analytic embedding jet at theta.
    fn embedding_jet(&self, theta: &DVector<f64>) -> Result<EmbeddingJet>;

    /// Mean log-likelihood terms (l, l', l'') at scalar theta against a fixed
    /// empirical moment vector, excluding the base-measure constant.
    /// Implementations with closed forms may override for speed.
    fn scalar_loglik_terms(&self, theta: f64, mu_hat: &[f64]) -> Result<(f64, f64, f64)> {
        if self.param_dim() != 1 {
            return Err(Error::Unsupported(
                "scalar log-likelihood needs q = 1".into(),
            ));
        }
        let tv = DVector::from_element(1, theta);
        let jet = self.embedding_jet(&tv)?;
        let mu = self.base().moment_map(&jet.eta)?;
        let sigma = self.base().covariance(&jet.eta)?;
        let mu_hat = DVector::from_column_slice(mu_hat);
        let resid = &mu_hat - &mu;
        let eta_dot = jet.eta_dot.column(0);
        let eta_ddot = jet.eta_ddot[0].column(0);
        let value = jet.eta.dot(&mu_hat) - self.base().log_partition(&jet.eta);
        let grad = eta_dot.dot(&resid);
        let hess = eta_ddot.dot(&resid) - (eta_dot.transpose() * &sigma * eta_dot)[(0, 0)];
        Ok((value, grad, hess))
    }

    /// E_theta[d^3/dtheta^3 log p(x|theta)] for scalar models, when a closed
    /// form is available. `None` routes callers to a finite-difference path.
    fn expected_third_loglik_deriv(&self, _theta: f64) -> Option<f64> {
        None
    }

    fn check_theta(&self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.param_dim() {
            return Err(Error::DimensionMismatch(format!(
                "theta dim {} != param dim {}",
                theta.len(),
                self.param_dim()
            )));
        }
        if !self.contains(theta) {
            return Err(Error::DomainViolation(format!(
                "theta = {:?}",
                theta.as_slice()
            )));
        }
        Ok(())
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = (theta + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        w
    }
}

/// Squared angular difference with wrap-around.
pub fn angular_sq_error(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    d * d
}

/// Bivariate normal with identity covariance and mean on the ellipse
/// `eta(theta) = (a cos theta, b sin theta)`, theta in (-pi, pi].
#[derive(Debug, Clone)]
pub struct EllipseModel {
    a: f64,
    b: f64,
    base: crate::expfam::BivariateStdGaussian,
}

impl EllipseModel {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ellipse axes must be positive, got a={a}, b={b}"
            )));
        }
        Ok(Self {
            a,
            b,
            base: crate::expfam::BivariateStdGaussian,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }
}

impl CurvedFamily for EllipseModel {
    type Base = crate::expfam::BivariateStdGaussian;

    fn base(&self) -> &Self::Base {
        &self.base
    }

    fn param_dim(&self) -> usize {
        1
    }

    fn theta_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(1, -std::f64::consts::PI),
            DVector::from_element(1, std::f64::consts::PI),
        )
    }

    fn periodic(&self) -> bool {
        true
    }

    fn embedding_jet(&self, theta: &DVector<f64>) -> Result<EmbeddingJet> {
        self.check_theta(theta)?;
        let (s, c) = theta[0].sin_cos();
        Ok(EmbeddingJet {
            eta: DVector::from_column_slice(&[self.a * c, self.b * s]),
            eta_dot: DMatrix::from_column_slice(2, 1, &[-self.a * s, self.b * c]),
            eta_ddot: vec![DMatrix::from_column_slice(
                2,
                1,
                &[-self.a * c, -self.b * s],
            )],
        })
    }

    fn scalar_loglik_terms(&self, theta: f64, mu_hat: &[f64]) -> Result<(f64, f64, f64)> {
        let (s, c) = theta.sin_cos();
        let (ex, ey) = (self.a * c, self.b * s);
        let (rx, ry) = (mu_hat[0] - ex, mu_hat[1] - ey);
        let value = ex * mu_hat[0] + ey * mu_hat[1] - 0.5 * (ex * ex + ey * ey);
        let grad = -self.a * s * rx + self.b * c * ry;
        let fisher = self.a * self.a * s * s + self.b * self.b * c * c;
        let hess = -ex * rx - ey * ry - fisher;
        Ok((value, grad, hess))
    }

    fn expected_third_loglik_deriv(&self, theta: f64) -> Option<f64> {
        // Sigma is constant along the curve, so the expectation reduces to
        // -3 eta_ddot' Sigma eta_dot.
        let (s, c) = theta.sin_cos();
        Some(-3.0 * (self.a * self.a - self.b * self.b) * s * c)
    }
}

/// Linear embedding eta(theta) = A theta: a full exponential subfamily with
/// zero curvature. Used as the flat reference model.
#[derive(Debug, Clone)]
pub struct LinearEmbedding<F: ExponentialFamily> {
    matrix: DMatrix<f64>,
    base: F,
    lo: DVector<f64>,
    hi: DVector<f64>,
}

impl<F: ExponentialFamily> LinearEmbedding<F> {
    pub fn new(matrix: DMatrix<f64>, base: F, lo: DVector<f64>, hi: DVector<f64>) -> Result<Self> {
        if matrix.nrows() != base.stat_dim() {
            return Err(Error::DimensionMismatch(format!(
                "embedding rows {} != base stat dim {}",
                matrix.nrows(),
                base.stat_dim()
            )));
        }
        if lo.len() != matrix.ncols() || hi.len() != matrix.ncols() {
            return Err(Error::DimensionMismatch(
                "bounds must match parameter dim".into(),
            ));
        }
        Ok(Self {
            matrix,
            base,
            lo,
            hi,
        })
    }
}

impl<F: ExponentialFamily> CurvedFamily for LinearEmbedding<F> {
    type Base = F;

    fn base(&self) -> &Self::Base {
        &self.base
    }

    fn param_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn theta_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (self.lo.clone(), self.hi.clone())
    }

    fn embedding_jet(&self, theta: &DVector<f64>) -> Result<EmbeddingJet> {
        self.check_theta(theta)?;
        let q = self.param_dim();
        let m = self.stat_dim();
        Ok(EmbeddingJet {
            eta: &self.matrix * theta,
            eta_dot: self.matrix.clone(),
            eta_ddot: vec![DMatrix::zeros(m, q); q],
        })
    }
}

/// Curvature summary at one parameter point.
#[derive(Debug, Clone)]
pub struct CurvatureReport {
    pub theta: DVector<f64>,
    pub fisher_info: DMatrix<f64>,
    pub gamma_sq: f64,
    pub lambda: DMatrix<f64>,
}

/// Fisher information I_theta = eta_dot' Sigma eta_dot (q x q).
pub fn fisher_info<M: CurvedFamily>(model: &M, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    let jet = model.embedding_jet(theta)?;
    let sigma = model.base().covariance(&jet.eta)?;
    Ok(jet.eta_dot.transpose() * sigma * &jet.eta_dot)
}

/// Statistical curvature gamma for scalar-parameter models:
/// gamma^2 = (ed' S ed)^{-3} [ (edd' S edd)(ed' S ed) - (edd' S ed)^2 ].
pub fn curvature_scalar<M: CurvedFamily>(model: &M, theta: f64) -> Result<f64> {
    if model.param_dim() != 1 {
        return Err(Error::Unsupported("scalar curvature needs q = 1".into()));
    }
    let tv = DVector::from_element(1, theta);
    let jet = model.embedding_jet(&tv)?;
    let sigma = model.base().covariance(&jet.eta)?;
    let ed = jet.eta_dot.column(0).into_owned();
    let edd = jet.eta_ddot[0].column(0).into_owned();
    let s_ed = &sigma * &ed;
    let s_edd = &sigma * &edd;
    let dd = ed.dot(&s_ed);
    let aa = edd.dot(&s_edd);
    let ad = edd.dot(&s_ed);
    let gamma_sq = (aa * dd - ad * ad) / (dd * dd * dd);
    Ok(gamma_sq.max(0.0).sqrt())
}

/// Vector-parameter statistical curvature via the normal projection:
/// Lambda_ij = tr(I^{-1} edd_i' N Sigma N' edd_j), gamma^2 = tr(Lambda I^{-1}).
pub fn curvature_general<M: CurvedFamily>(
    model: &M,
    theta: &DVector<f64>,
) -> Result<CurvatureReport> {
    let jet = model.embedding_jet(theta)?;
    let sigma = model.base().covariance(&jet.eta)?;
    let fisher = jet.eta_dot.transpose() * &sigma * &jet.eta_dot;
    let fisher_inv = fisher.clone().lu().try_inverse().ok_or_else(|| {
        Error::RankDeficient(format!(
            "Fisher information singular at {:?}",
            theta.as_slice()
        ))
    })?;
    let pair = theory::projection_matrices(model, theta)?;
    let n_star = &pair.n_star;
    let q = model.param_dim();
    let middle = n_star * &sigma * n_star.transpose();
    let mut lambda = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..q {
            let m_ij = &fisher_inv * jet.eta_ddot[i].transpose() * &middle * &jet.eta_ddot[j];
            lambda[(i, j)] = m_ij.trace();
        }
    }
    let gamma_sq = (&lambda * &fisher_inv).trace().max(0.0);
    Ok(CurvatureReport {
        theta: theta.clone(),
        fisher_info: fisher,
        gamma_sq,
        lambda,
    })
}

/// Result of a scalar maximization.
#[derive(Debug, Clone, Copy)]
pub struct ScalarFit {
    pub theta: f64,
    pub value: f64,
    pub grad: f64,
}

/// Grid + Newton maximizer for scalar curved-family objectives of the form
/// `l(theta) = eta(theta)' v - log Z(eta(theta))`.
///
/// The grid (eta and log Z at `MLE_GRID_POINTS` points) is precomputed once so
/// repeated fits against different moment vectors are cheap. The dense scan
/// guards against multimodal likelihoods; Newton then polishes the winning
/// grid point. Grid ties go to the smaller theta.
pub struct ScalarFitter<'a, M: CurvedFamily> {
    model: &'a M,
    lo: f64,
    hi: f64,
    step: f64,
    grid_theta: Vec<f64>,
    grid_eta: Vec<f64>,
    grid_logz: Vec<f64>,
    m: usize,
}

impl<'a, M: CurvedFamily> ScalarFitter<'a, M> {
    pub fn new(model: &'a M) -> Result<Self> {
        if model.param_dim() != 1 {
            return Err(Error::Unsupported("grid fitter needs q = 1".into()));
        }
        let (lo_v, hi_v) = model.theta_bounds();
        let (lo, hi) = (lo_v[0], hi_v[0]);
        let step = (hi - lo) / MLE_GRID_POINTS as f64;
        let m = model.stat_dim();
        let mut grid_theta = Vec::with_capacity(MLE_GRID_POINTS);
        let mut grid_eta = Vec::with_capacity(MLE_GRID_POINTS * m);
        let mut grid_logz = Vec::with_capacity(MLE_GRID_POINTS);
        for j in 0..MLE_GRID_POINTS {
            // right-endpoint grid over (lo, hi]
            let theta = if j + 1 == MLE_GRID_POINTS {
                hi
            } else {
                lo + step * (j + 1) as f64
            };
            let jet = model.embedding_jet(&DVector::from_element(1, theta))?;
            grid_logz.push(model.base().log_partition(&jet.eta));
            grid_eta.extend_from_slice(jet.eta.as_slice());
            grid_theta.push(theta);
        }
        Ok(Self {
            model,
            lo,
            hi,
            step,
            grid_theta,
            grid_eta,
            grid_logz,
            m,
        })
    }

    pub fn model(&self) -> &M {
        self.model
    }

    /// Maximize against a moment vector, to |l'| < grad_tol.
    pub fn maximize(&self, mu_hat: &[f64], grad_tol: f64) -> Result<ScalarFit> {
        if mu_hat.len() != self.m {
            return Err(Error::DimensionMismatch(format!(
                "moment dim {} != stat dim {}",
                mu_hat.len(),
                self.m
            )));
        }
        if mu_hat.iter().any(|v| !v.is_finite()) {
            return Err(Error::FitFailure("non-finite moment vector".into()));
        }

        let mut best_j = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        if self.m == 2 {
            // dominant case; keep the scan tight
            let (m0, m1) = (mu_hat[0], mu_hat[1]);
            for j in 0..MLE_GRID_POINTS {
                let v =
                    self.grid_eta[2 * j] * m0 + self.grid_eta[2 * j + 1] * m1 - self.grid_logz[j];
                if v > best_v {
                    best_v = v;
                    best_j = j;
                }
            }
        } else {
            for j in 0..MLE_GRID_POINTS {
                let eta = &self.grid_eta[j * self.m..(j + 1) * self.m];
                let v = eta.iter().zip(mu_hat).map(|(e, m)| e * m).sum::<f64>() - self.grid_logz[j];
                if v > best_v {
                    best_v = v;
                    best_j = j;
                }
            }
        }

        self.refine(self.grid_theta[best_j], best_v, mu_hat, grad_tol)
    }

    fn terms(&self, theta: f64, mu_hat: &[f64]) -> Result<(f64, f64, f64)> {
        self.model.scalar_loglik_terms(self.clamp(theta), mu_hat)
    }

    fn clamp(&self, theta: f64) -> f64 {
        if self.model.periodic() {
            wrap_angle(theta)
        } else {
            theta.clamp(
                self.lo + f64::EPSILON * self.lo.abs().max(1.0) * 4.0,
                self.hi,
            )
        }
    }

    fn refine(
        &self,
        center: f64,
        center_val: f64,
        mu_hat: &[f64],
        grad_tol: f64,
    ) -> Result<ScalarFit> {
        let (_, gc, _) = self.terms(center, mu_hat)?;
        let mut best = ScalarFit {
            theta: self.clamp(center),
            value: center_val,
            grad: gc,
        };
        if gc.abs() < grad_tol {
            return Ok(best);
        }

        // the maximum lies within one grid step on the uphill side
        let (mut a, mut b, mut ga, mut gb) = if gc > 0.0 {
            let hi = center + self.step;
            let (_, ghi, _) = self.terms(hi, mu_hat)?;
            (center, hi, gc, ghi)
        } else {
            let lo = center - self.step;
            let (_, glo, _) = self.terms(lo, mu_hat)?;
            (lo, center, glo, gc)
        };

        if ga > 0.0 && gb < 0.0 {
            // safeguarded Newton on l' inside the bracket
            let mut x = 0.5 * (a + b);
            for _ in 0..200 {
                let (v, g, h) = self.terms(x, mu_hat)?;
                if v >= best.value {
                    best = ScalarFit {
                        theta: self.clamp(x),
                        value: v,
                        grad: g,
                    };
                }
                if g.abs() < grad_tol || (b - a) < 1e-16 {
                    return Ok(best);
                }
                if g > 0.0 {
                    a = x;
                    ga = g;
                } else {
                    b = x;
                    gb = g;
                }
                let newton = if h < 0.0 { x - g / h } else { f64::NAN };
                x = if newton.is_finite() && newton > a && newton < b {
                    newton
                } else {
                    0.5 * (a + b)
                };
                let _ = (ga, gb);
            }
            return Ok(best);
        }

        // no derivative sign change (boundary optimum or a flat stretch):
        // golden-section on the objective inside [a, b]
        let phi = 0.5 * (3.0 - 5.0f64.sqrt());
        let (mut x1, mut x2) = (a + phi * (b - a), b - phi * (b - a));
        let (mut f1, _, _) = self.terms(x1, mu_hat)?;
        let (mut f2, _, _) = self.terms(x2, mu_hat)?;
        for _ in 0..160 {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = b - phi * (b - a);
                let t = self.terms(x2, mu_hat)?;
                f2 = t.0;
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = a + phi * (b - a);
                let t = self.terms(x1, mu_hat)?;
                f1 = t.0;
            }
            if (b - a).abs() < 1e-15 {
                break;
            }
        }
        let x = 0.5 * (a + b);
        let (v, g, _) = self.terms(x, mu_hat)?;
        if v >= best.value {
            best = ScalarFit {
                theta: self.clamp(x),
                value: v,
                grad: g,
            };
        }
        Ok(best)
    }
}

/// MLE for scalar curved models: dense grid scan plus Newton refinement.
pub fn mle_curved<M: CurvedFamily>(model: &M, sample: &SampleSet) -> Result<f64> {
    let mu_hat = suff_stat_mean(model.base(), sample)?;
    let fitter = ScalarFitter::new(model)?;
    Ok(fitter.maximize(mu_hat.as_slice(), MLE_GRAD_TOL)?.theta)
}

/// Draw n i.i.d. points from the curved model at theta.
pub fn sample_curved<M: CurvedFamily>(
    model: &M,
    theta: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    let jet = model.embedding_jet(theta)?;
    crate::expfam::sample_full(model.base(), &jet.eta, n, seed)
}
