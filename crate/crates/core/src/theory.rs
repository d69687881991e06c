//! Asymptotic theory for one-shot combination of local MLEs.
//!
//! For a curved family with Fisher information `I`, statistical curvature
//! `gamma^2`, and a combiner-specific coefficient `beta`, splitting the data
//! across d machines costs (relative to the pooled MLE, to leading order)
//!
//! ```text
//! bias      = (d-1)/n   * beta
//! mse       = (d-1)/n^2 * ( gamma^2 / I + (d+1) beta^2 )
//! mse floor = (d-1)/n^2 *   gamma^2 / I                    (any combiner)
//! ```
//!
//! KL averaging attains the floor (`beta = 0`); linear averaging carries
//! `beta = I^{-2} (eta_ddot' Sigma eta_dot + E[l''']/2)`, generally nonzero.
//! The module also provides the tangent-space projection pair used by the
//! vector-parameter curvature, and Wishart trace moments with a Monte-Carlo
//! counterpart that serve as the distributional oracle in tests.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::curved::CurvedFamily;
use crate::error::{Error, Result};
use crate::expfam::ExponentialFamily;
use crate::rng::tagged_rng;

/// Projection onto the tangent space of the embedded family in moment space
/// (`p_star`), and its complement (`n_star`), under the Sigma^{-1} inner
/// product: P = Sigma ed (ed' Sigma ed)^{-1} ed'.
#[derive(Debug, Clone)]
pub struct ProjectionPair {
    pub p_star: DMatrix<f64>,
    pub n_star: DMatrix<f64>,
}

pub fn projection_matrices<M: CurvedFamily>(
    model: &M,
    theta: &DVector<f64>,
) -> Result<ProjectionPair> {
    let jet = model.embedding_jet(theta)?;
    let min_sv = jet
        .eta_dot
        .clone()
        .svd(false, false)
        .singular_values
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(min_sv > 1e-8) {
        return Err(Error::RankDeficient(format!(
            "smallest singular value {min_sv:.2e} at theta = {:?}",
            theta.as_slice()
        )));
    }
    let sigma = model.base().covariance(&jet.eta)?;
    let gram = jet.eta_dot.transpose() * &sigma * &jet.eta_dot;
    let gram_inv = gram
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("singular tangent Gram matrix".into()))?;
    let p_star = &sigma * &jet.eta_dot * gram_inv * jet.eta_dot.transpose();
    let m = model.stat_dim();
    let n_star = DMatrix::identity(m, m) - &p_star;
    Ok(ProjectionPair { p_star, n_star })
}

/// The linear-averaging bias coefficient for scalar-parameter models:
/// `beta = I^{-2} (eta_ddot' Sigma eta_dot + E[d^3 log p / dtheta^3] / 2)`.
///
/// The third-derivative expectation uses the model's closed form when one is
/// provided; otherwise it is taken by five-point central differences of
/// `E_theta*[log p(x|theta)] = eta(theta)' mu* - log Z(eta(theta))`, which is
/// exact in x (no quadrature) because the expectation only enters through mu*.
pub fn beta_linear<M: CurvedFamily>(model: &M, theta_star: f64) -> Result<f64> {
    if model.param_dim() != 1 {
        return Err(Error::Unsupported("beta_linear needs q = 1".into()));
    }
    let tv = DVector::from_element(1, theta_star);
    let jet = model.embedding_jet(&tv)?;
    let sigma = model.base().covariance(&jet.eta)?;
    let eta_dot = jet.eta_dot.column(0).into_owned();
    let eta_ddot = jet.eta_ddot[0].column(0).into_owned();
    let fisher = (eta_dot.transpose() * &sigma * &eta_dot)[(0, 0)];
    if !(fisher > 0.0) {
        return Err(Error::RankDeficient(format!(
            "fisher = {fisher} at theta = {theta_star}"
        )));
    }
    let cross = (eta_ddot.transpose() * &sigma * &eta_dot)[(0, 0)];
    let third = match model.expected_third_loglik_deriv(theta_star) {
        Some(t) => t,
        None => expected_third_deriv_fd(model, theta_star)?,
    };
    Ok((cross + 0.5 * third) / (fisher * fisher))
}

fn expected_third_deriv_fd<M: CurvedFamily>(model: &M, theta_star: f64) -> Result<f64> {
    let tv = DVector::from_element(1, theta_star);
    let mu_star = model.base().moment_map(&model.embedding_jet(&tv)?.eta)?;
    let h = |t: f64| -> Result<f64> {
        let jet = model.embedding_jet(&DVector::from_element(1, t))?;
        Ok(jet.eta.dot(&mu_star) - model.base().log_partition(&jet.eta))
    };
    // shrink the stencil if the domain boundary is close
    let (lo, hi) = model.theta_bounds();
    let mut step = 7.4e-4 * theta_star.abs().max(1.0);
    let room = (theta_star - lo[0]).min(hi[0] - theta_star);
    if room <= 0.0 {
        return Err(Error::DomainViolation(format!(
            "theta* = {theta_star} outside bounds"
        )));
    }
    if 2.0 * step >= room {
        step = 0.4 * room;
    }
    let f2p = h(theta_star + 2.0 * step)?;
    let f1p = h(theta_star + step)?;
    let f1m = h(theta_star - step)?;
    let f2m = h(theta_star - 2.0 * step)?;
    Ok((f2p - f2m - 2.0 * (f1p - f1m)) / (2.0 * step * step * step))
}

/// Closed-form predictions for a (n, d) regime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymptoticPrediction {
    /// Leading-order bias of the combiner relative to the pooled MLE.
    pub bias_vs_mle: f64,
    /// Leading-order E||combined - pooled MLE||^2.
    pub mse_vs_mle: f64,
    /// Additive excess of E||combined - theta*||^2 over E||MLE - theta*||^2.
    pub mse_excess_vs_true: f64,
    pub regime: Regime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub n: usize,
    pub d: usize,
    pub gamma_sq: f64,
    pub fisher: f64,
    pub beta: f64,
}

pub fn predict_asymptotics(
    gamma_sq: f64,
    fisher: f64,
    beta: f64,
    n: usize,
    d: usize,
) -> Result<AsymptoticPrediction> {
    if !(fisher > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "fisher must be positive, got {fisher}"
        )));
    }
    if gamma_sq < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "gamma_sq must be >= 0, got {gamma_sq}"
        )));
    }
    if n == 0 || d == 0 {
        return Err(Error::InvalidConfig("need n >= 1 and d >= 1".into()));
    }
    let nf = n as f64;
    let dm1 = (d - 1) as f64;
    let rate = dm1 / (nf * nf);
    Ok(AsymptoticPrediction {
        bias_vs_mle: dm1 * beta / nf,
        mse_vs_mle: rate * (gamma_sq / fisher + (d as f64 + 1.0) * beta * beta),
        mse_excess_vs_true: rate * (gamma_sq / fisher + 2.0 * beta * beta),
        regime: Regime {
            n,
            d,
            gamma_sq,
            fisher,
            beta,
        },
    })
}

/// Scale matrix and degrees of freedom of a Wishart distribution.
#[derive(Debug, Clone)]
pub struct WishartSpec {
    sigma: DMatrix<f64>,
    dof: usize,
}

impl WishartSpec {
    pub fn new(sigma: DMatrix<f64>, dof: usize) -> Result<Self> {
        if sigma.nrows() != sigma.ncols() {
            return Err(Error::DimensionMismatch(
                "scale matrix must be square".into(),
            ));
        }
        if !is_symmetric(&sigma, 1e-10) {
            return Err(Error::NotSpd("scale matrix not symmetric".into()));
        }
        if nalgebra::Cholesky::new(sigma.clone()).is_none() {
            return Err(Error::NotSpd("scale matrix not positive definite".into()));
        }
        if dof == 0 {
            return Err(Error::InvalidConfig(
                "degrees of freedom must be >= 1".into(),
            ));
        }
        Ok(Self { sigma, dof })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn dof(&self) -> usize {
        self.dof
    }
}

fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Closed-form trace moments of W ~ Wishart(Sigma, dof) for symmetric A, B:
/// E tr(AW), E (tr AW)^2, and E tr(AW) tr(BW).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WishartMoments {
    pub e_tr_aw: f64,
    pub e_tr_aw_sq: f64,
    pub e_tr_aw_tr_bw: f64,
}

pub fn wishart_moments(
    spec: &WishartSpec,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<WishartMoments> {
    let m = spec.sigma.nrows();
    for (name, mat) in [("A", a), ("B", b)] {
        if mat.nrows() != m || mat.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "{name} is {}x{}, scale is {m}x{m}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        if !is_symmetric(mat, 1e-10) {
            return Err(Error::DimensionMismatch(format!(
                "{name} must be symmetric"
            )));
        }
    }
    let d = spec.dof as f64;
    let a_sigma = a * &spec.sigma;
    let b_sigma = b * &spec.sigma;
    let tr_a = a_sigma.trace();
    let tr_b = b_sigma.trace();
    Ok(WishartMoments {
        e_tr_aw: d * tr_a,
        e_tr_aw_sq: 2.0 * d * (&a_sigma * &a_sigma).trace() + d * d * tr_a * tr_a,
        e_tr_aw_tr_bw: 2.0 * d * (&a_sigma * &b_sigma).trace() + d * d * tr_a * tr_b,
    })
}

/// Monte-Carlo estimate of the tr(AW) moments, with standard errors.
///
/// W is built definitionally: dof+1 i.i.d. N(0, Sigma) vectors are centered
/// and their outer products summed, which is Wishart(Sigma, dof).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WishartMcEstimate {
    pub mean_tr: f64,
    pub mean_tr_sq: f64,
    pub se_tr: f64,
    pub se_tr_sq: f64,
}

pub fn wishart_mc_estimate(
    spec: &WishartSpec,
    a: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<WishartMcEstimate> {
    if samples < 2 {
        return Err(Error::InvalidConfig(
            "need at least 2 Monte-Carlo samples".into(),
        ));
    }
    let m = spec.sigma.nrows();
    if a.nrows() != m || a.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "A is {}x{}, scale is {m}x{m}",
            a.nrows(),
            a.ncols()
        )));
    }
    let chol = nalgebra::Cholesky::new(spec.sigma.clone())
        .ok_or_else(|| Error::NotSpd("scale matrix not positive definite".into()))?;
    let l = chol.l();
    let k = spec.dof + 1;

    // one substream per sample index keeps the estimate independent of
    // parallel scheduling
    let traces: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = tagged_rng(seed, &[s as u64]);
            let mut zs = DMatrix::zeros(m, k);
            for col in 0..k {
                for row in 0..m {
                    zs[(row, col)] =
                        rand::Rng::sample::<f64, _>(&mut rng, rand_distr::StandardNormal);
                }
            }
            let zs = &l * zs;
            let mut mean = DVector::zeros(m);
            for col in 0..k {
                mean += zs.column(col);
            }
            mean /= k as f64;
            let mut w = DMatrix::zeros(m, m);
            for col in 0..k {
                let c = zs.column(col) - &mean;
                w += &c * c.transpose();
            }
            (a * w).trace()
        })
        .collect();

    let nf = samples as f64;
    let mean_tr = traces.iter().sum::<f64>() / nf;
    let mean_tr_sq = traces.iter().map(|t| t * t).sum::<f64>() / nf;
    let var_tr = traces.iter().map(|t| (t - mean_tr).powi(2)).sum::<f64>() / (nf - 1.0);
    let var_tr_sq = traces
        .iter()
        .map(|t| (t * t - mean_tr_sq).powi(2))
        .sum::<f64>()
        / (nf - 1.0);
    Ok(WishartMcEstimate {
        mean_tr,
        mean_tr_sq,
        se_tr: (var_tr / nf).sqrt(),
        se_tr_sq: (var_tr_sq / nf).sqrt(),
    })
}
