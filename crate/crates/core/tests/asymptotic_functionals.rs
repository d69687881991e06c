//! The trace functionals behind the combination-error limits.
//!
//! For a scalar curved family, the scaled gaps n*I*(combined - pooled MLE)
//! converge to tr(C W) for a coefficient matrix C built from the embedding
//! jets and a Wishart matrix W with d-1 degrees of freedom:
//!
//! * KL averaging:     C = G = sym(eta_dot I^{-1} eta_ddot' N)
//! * linear averaging: C = L = sym(eta_ddot I^{-1} eta_dot') +
//!                         eta_dot I^{-1} (J/2) I^{-1} eta_dot'
//!
//! where N is the normal projector and J the expected third log-likelihood
//! derivative. These tests assemble G and L for the ellipse model and verify
//! the algebra that the public surface relies on — tr(G Sigma) = 0,
//! 2 tr((G Sigma)^2) = Lambda, tr(L Sigma) = I beta — and then check the
//! implied Wishart moments against Monte-Carlo sampling.

use mlefuse_core::curved::{curvature_general, CurvedFamily, EllipseModel};
use mlefuse_core::expfam::ExponentialFamily;
use mlefuse_core::theory::{
    beta_linear, projection_matrices, wishart_mc_estimate, wishart_moments, WishartSpec,
};
use nalgebra::{DMatrix, DVector};

const THETA: f64 = std::f64::consts::FRAC_PI_4;
const D: usize = 10;

struct Pieces {
    sigma: DMatrix<f64>,
    fisher: f64,
    g: DMatrix<f64>,
    l: DMatrix<f64>,
    tr_b: f64,
}

fn build_pieces(model: &EllipseModel, theta: f64) -> Pieces {
    let tv = DVector::from_element(1, theta);
    let jet = model.embedding_jet(&tv).unwrap();
    let sigma = model.base().covariance(&jet.eta).unwrap();
    let eta_dot = jet.eta_dot.column(0).into_owned();
    let eta_ddot = jet.eta_ddot[0].column(0).into_owned();
    let fisher = (eta_dot.transpose() * &sigma * &eta_dot)[(0, 0)];
    let n_star = projection_matrices(model, &tv).unwrap().n_star;

    let g0 = &eta_dot * eta_ddot.transpose() * &n_star / fisher;
    let g = (&g0 + g0.transpose()) * 0.5;

    let j = model.expected_third_loglik_deriv(theta).unwrap();
    let l0 = &eta_ddot * eta_dot.transpose() / fisher;
    let l = (&l0 + l0.transpose()) * 0.5
        + &eta_dot * eta_dot.transpose() * (0.5 * j / (fisher * fisher));

    let cross = (eta_ddot.transpose() * &sigma * &eta_dot)[(0, 0)];
    let tr_b = (cross + 0.5 * j) / fisher;

    Pieces {
        sigma,
        fisher,
        g,
        l,
        tr_b,
    }
}

#[test]
fn kl_trace_functional_reproduces_the_curvature() {
    let model = EllipseModel::new(1.0, 5.0).unwrap();
    let p = build_pieces(&model, THETA);
    let lambda = curvature_general(&model, &DVector::from_element(1, THETA))
        .unwrap()
        .lambda[(0, 0)];

    // first moment vanishes: N Sigma eta_dot = 0 kills tr(G Sigma)
    let g_sigma = &p.g * &p.sigma;
    assert!(g_sigma.trace().abs() < 1e-12);

    // second moment: 2 tr((G Sigma)^2) equals Lambda
    let second = 2.0 * (&g_sigma * &g_sigma).trace();
    assert!(
        (second - lambda).abs() < 1e-10 * lambda,
        "2 tr((G Sigma)^2) = {second} vs Lambda = {lambda}"
    );

    // through the Wishart moments: E tr(GW) = 0 and E (tr GW)^2 = (d-1) Lambda
    let spec = WishartSpec::new(p.sigma.clone(), D - 1).unwrap();
    let closed = wishart_moments(&spec, &p.g, &p.g).unwrap();
    assert!(closed.e_tr_aw.abs() < 1e-12);
    let want_sq = (D as f64 - 1.0) * lambda;
    assert!((closed.e_tr_aw_sq - want_sq).abs() < 1e-10 * want_sq);

    // and distributionally, on synthetic Wishart draws
    let mc = wishart_mc_estimate(&spec, &p.g, 200_000, 0x61).unwrap();
    assert!(mc.mean_tr.abs() <= 4.0 * mc.se_tr, "{mc:?}");
    assert!(
        (mc.mean_tr_sq - want_sq).abs() <= 4.0 * mc.se_tr_sq,
        "{mc:?}"
    );
}

#[test]
fn linear_trace_functional_reproduces_the_bias_coefficient() {
    let model = EllipseModel::new(1.0, 5.0).unwrap();
    let p = build_pieces(&model, THETA);
    let beta = beta_linear(&model, THETA).unwrap();

    // tr(L Sigma) = tr(B) = I * beta
    let l_sigma = &p.l * &p.sigma;
    let tr = l_sigma.trace();
    assert!(
        (tr - p.tr_b).abs() < 1e-12,
        "tr(L Sigma) = {tr} vs tr(B) = {}",
        p.tr_b
    );
    assert!(
        (tr - p.fisher * beta).abs() < 1e-12,
        "tr(L Sigma) = {tr} vs I beta = {}",
        p.fisher * beta
    );

    // second moment decomposition: 2 tr((L Sigma)^2) = 2 tr(B)^2 + Lambda
    let lambda = curvature_general(&model, &DVector::from_element(1, THETA))
        .unwrap()
        .lambda[(0, 0)];
    let second = 2.0 * (&l_sigma * &l_sigma).trace();
    let want = 2.0 * p.tr_b * p.tr_b + lambda;
    assert!((second - want).abs() < 1e-10 * want, "{second} vs {want}");

    // mean of tr(LW) over synthetic Wisharts matches (d-1) tr(B)
    let spec = WishartSpec::new(p.sigma.clone(), D - 1).unwrap();
    let mc = wishart_mc_estimate(&spec, &p.l, 200_000, 0x62).unwrap();
    let want_mean = (D as f64 - 1.0) * p.tr_b;
    assert!(
        (mc.mean_tr - want_mean).abs() <= 4.0 * mc.se_tr,
        "{mc:?} vs {want_mean}"
    );
}
