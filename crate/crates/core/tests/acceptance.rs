//! Acceptance suite. Each criterion prints one PASS line with its measured
//! quantities (visible with `--nocapture`); the assertions pin the
//! tolerances. Monte-Carlo criteria run on frozen master seeds and
//! scheduling-independent substreams, so their outcomes are reproducible.

use std::time::Instant;

use mlefuse_core::combine::{kl_average_full, linear_average, LocalFit};
use mlefuse_core::curved::{
    angular_sq_error, curvature_general, curvature_scalar, fisher_info, EllipseModel,
};
use mlefuse_core::expfam::{mle_full, sample_full, GaussianVarianceFamily, Parameterization};
use mlefuse_core::harness::{
    gmm_demo, partition_data, run_experiment, test_ll_by_trial, CombinerChoice, ExperimentConfig,
    GmmDemoConfig, ModelSpec, PartitionScheme, TrialRecord,
};
use mlefuse_core::rng::{substream_seed, tagged_rng};
use mlefuse_core::theory::{beta_linear, wishart_mc_estimate, wishart_moments, WishartSpec};
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const FRAC_PI_2: f64 = std::f64::consts::FRAC_PI_2;
const FRAC_PI_4: f64 = std::f64::consts::FRAC_PI_4;

fn ellipse_gamma_closed_form(a: f64, b: f64, theta: f64) -> f64 {
    a * b * (a * a * theta.sin().powi(2) + b * b * theta.cos().powi(2)).powf(-1.5)
}

fn ellipse_config(a: f64, b: f64, theta_star: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ModelSpec::Ellipse { a, b, theta_star });
    cfg.master_seed = seed;
    cfg
}

fn mean<'a>(vals: impl Iterator<Item = &'a f64>) -> f64 {
    let v: Vec<f64> = vals.copied().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// AC-1: on the full variance family, KL averaging of equal-split local MLEs
/// recovers the pooled-data MLE to 1e-9 over 200 random datasets, in < 5 s.
#[test]
fn ac1_kl_average_recovers_pooled_mle_exactly() {
    let fam = GaussianVarianceFamily;
    let t0 = Instant::now();
    let (n, d) = (200usize, 10usize);
    let mut worst: f64 = 0.0;
    for run in 0..200u64 {
        let mut rng = tagged_rng(substream_seed(0xac1, &[run]), &[]);
        let sigma_sq = 0.2 + 4.8 * rng.random::<f64>();
        let theta_star = DVector::from_element(1, -0.5 / sigma_sq);
        let sample = sample_full(&fam, &theta_star, n, substream_seed(0xac1, &[run, 1])).unwrap();
        let parts = partition_data(
            &sample,
            d,
            PartitionScheme::IidRandom,
            substream_seed(0xac1, &[run, 2]),
        )
        .unwrap();
        let locals: Vec<LocalFit> = parts
            .iter()
            .enumerate()
            .map(|(k, p)| {
                LocalFit::new(
                    mle_full(&fam, p).unwrap(),
                    Parameterization::Natural,
                    n / d,
                    k,
                )
                .unwrap()
            })
            .collect();
        let kl = kl_average_full(&fam, &locals).unwrap();
        let pooled = mle_full(&fam, &sample).unwrap();
        worst = worst.max((kl.theta[0] - pooled[0]).abs());
    }
    let elapsed = t0.elapsed();
    assert!(worst < 1e-9, "max |kl - pooled| = {worst:.3e}");
    assert!(elapsed.as_secs_f64() < 5.0, "took {elapsed:.2?}");
    println!("AC-1 PASS: max |kl_average_full - mle_full| = {worst:.2e} over 200 datasets in {elapsed:.2?}");
}

/// AC-2: the power-mean table for variance locals {1, 4}: linear averaging
/// gives variance {2.5, 2.25, 1.6} under the variance/std/precision charts;
/// KL averaging gives 2.5 under all three. Tolerance 1e-12.
#[test]
fn ac2_linear_power_means_and_chart_free_kl() {
    let fam = GaussianVarianceFamily;
    let tol = 1e-12;
    let cases: [(Parameterization, [f64; 2], f64); 3] = [
        (Parameterization::Variance, [1.0, 4.0], 2.5),
        (Parameterization::Std, [1.0, 2.0], 2.25),
        (Parameterization::Precision, [1.0, 0.25], 1.6),
    ];
    let mut linear_vars = Vec::new();
    for (chart, values, want_variance) in &cases {
        let locals: Vec<LocalFit> = values
            .iter()
            .enumerate()
            .map(|(k, &v)| LocalFit::scalar(v, chart.clone(), 10, k))
            .collect();

        let lin = linear_average(&locals).unwrap();
        let lin_nat = chart.to_natural(&lin.theta).unwrap();
        let lin_var = Parameterization::Variance.from_natural(&lin_nat).unwrap()[0];
        assert!(
            (lin_var - want_variance).abs() < tol,
            "linear under {}: variance {lin_var} != {want_variance}",
            chart.label()
        );
        linear_vars.push(lin_var);

        let kl = kl_average_full(&fam, &locals).unwrap();
        let kl_var = Parameterization::Variance.from_natural(&kl.theta).unwrap()[0];
        assert!(
            (kl_var - 2.5).abs() < tol,
            "kl under {}: variance {kl_var} != 2.5",
            chart.label()
        );
    }
    println!(
        "AC-2 PASS: linear variances {:?} (chart-dependent), KL variance 2.5 under all charts",
        linear_vars
    );
}

/// AC-3: ellipse a=1, b=5, theta*=pi/4, d=10, n=1000, 5000 trials:
/// n^2 E[I (kl - mle)^2] / ((d-1) gamma^2) lands in [0.8, 1.25].
#[test]
fn ac3_kl_attains_lower_bound_rate() {
    let (a, b, theta_star, d, n, trials) = (1.0, 5.0, FRAC_PI_4, 10usize, 1000usize, 5000usize);
    let model = EllipseModel::new(a, b).unwrap();
    let gamma = curvature_scalar(&model, theta_star).unwrap();
    let fisher = fisher_info(&model, &DVector::from_element(1, theta_star)).unwrap()[(0, 0)];

    let mut cfg = ellipse_config(a, b, theta_star, 0xac3);
    cfg.n_grid = vec![n];
    cfg.d = d;
    cfg.trials = trials;
    cfg.combiners = vec![CombinerChoice::Kl];

    let t0 = Instant::now();
    let records = run_experiment(&cfg).unwrap();
    let elapsed = t0.elapsed();
    assert_eq!(records.len(), trials);
    assert!(records.iter().all(|r| r.flag.is_none()));

    let mse = mean(records.iter().map(|r| &r.err_vs_mle));
    let ratio = (n * n) as f64 * fisher * mse / ((d as f64 - 1.0) * gamma * gamma);
    assert!(
        (0.8..=1.25).contains(&ratio),
        "normalized MSE ratio {ratio:.4} outside [0.8, 1.25]"
    );
    assert!(elapsed.as_secs_f64() < 600.0, "took {elapsed:.2?}");
    println!(
        "AC-3 PASS: n^2 E[I (kl-mle)^2] / ((d-1) gamma^2) = {ratio:.4} over {trials} trials in {elapsed:.2?}"
    );
}

/// AC-4: same regime over n in {500, 1000, 2000}: the KL bias is smaller in
/// magnitude than the linear bias, and the linear bias matches
/// (d-1) beta_linear / n within 30% at every n.
#[test]
fn ac4_bias_ordering_and_linear_bias_rate() {
    let (a, b, theta_star, d, trials) = (1.0, 5.0, FRAC_PI_4, 10usize, 20_000usize);
    let model = EllipseModel::new(a, b).unwrap();
    let beta = beta_linear(&model, theta_star).unwrap();

    let mut cfg = ellipse_config(a, b, theta_star, 0xac4);
    cfg.n_grid = vec![500, 1000, 2000];
    cfg.d = d;
    cfg.trials = trials;

    let t0 = Instant::now();
    let records = run_experiment(&cfg).unwrap();
    let elapsed = t0.elapsed();

    let mut report = String::new();
    for &n in &cfg.n_grid {
        let bias_of = |c: CombinerChoice| {
            mean(
                records
                    .iter()
                    .filter(|r| r.n == n && r.combiner == c)
                    .map(|r| &r.bias_vs_mle[0]),
            )
        };
        let lin = bias_of(CombinerChoice::Linear);
        let kl = bias_of(CombinerChoice::Kl);
        let predicted = (d as f64 - 1.0) * beta / n as f64;
        assert!(
            kl.abs() < lin.abs(),
            "n={n}: |kl bias| {:.3e} not below |linear bias| {:.3e}",
            kl.abs(),
            lin.abs()
        );
        assert!(
            (lin - predicted).abs() <= 0.30 * predicted.abs(),
            "n={n}: linear bias {lin:.4e} vs predicted {predicted:.4e}"
        );
        report.push_str(&format!(" n={n}: lin/pred={:.3}", lin / predicted));
    }
    println!("AC-4 PASS:{report} (beta={beta:.5}, {trials} trials/n, {elapsed:.2?})");
}

/// AC-5: the projection-based curvature equals the ellipse closed form at
/// 100 grid points within 1e-8 relative, and circles give gamma = 1/r to
/// 1e-10.
#[test]
fn ac5_curvature_cross_validation() {
    let model = EllipseModel::new(1.0, 5.0).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let theta = -std::f64::consts::PI + (i as f64 + 0.5) * (2.0 * std::f64::consts::PI / 100.0);
        let general = curvature_general(&model, &DVector::from_element(1, theta)).unwrap();
        let closed = ellipse_gamma_closed_form(1.0, 5.0, theta);
        let rel = (general.gamma_sq - closed * closed).abs() / (closed * closed);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-8, "worst relative deviation {worst:.3e}");

    let mut worst_circle: f64 = 0.0;
    for r in [0.5, 1.0, 2.0, 7.0] {
        let circle = EllipseModel::new(r, r).unwrap();
        for i in 0..25 {
            let theta = -3.0 + 0.24 * i as f64;
            let gamma = curvature_scalar(&circle, theta).unwrap();
            worst_circle = worst_circle.max((gamma - 1.0 / r).abs());
            let general = curvature_general(&circle, &DVector::from_element(1, theta)).unwrap();
            worst_circle = worst_circle.max((general.gamma_sq.sqrt() - 1.0 / r).abs());
        }
    }
    assert!(
        worst_circle < 1e-10,
        "worst circle deviation {worst_circle:.3e}"
    );
    println!(
        "AC-5 PASS: closed-form deviation {worst:.2e} (rel, 100 pts); circle gamma-1/r {worst_circle:.2e}"
    );
}

/// AC-6: misspecified truth N((0, 1/2), I) on the wide ellipse (a=5, b=1,
/// so the projections of the truth sit at theta = +/- pi/2). At n=10 the MLE
/// and KL estimates concentrate near the modes while linear averaging lands
/// far from both; at n=1000 the minority mode at -pi/2 dies out.
#[test]
fn ac6_misspecification_bimodality() {
    let trials = 5000usize;
    let mut cfg = ellipse_config(5.0, 1.0, 0.0, 0xac6);
    cfg.n_grid = vec![10, 1000];
    cfg.trials = trials;
    cfg.misspecified_truth = Some([0.0, 0.5]);

    let t0 = Instant::now();
    let records = run_experiment(&cfg).unwrap();
    let elapsed = t0.elapsed();

    let near = |t: f64, m: f64| angular_sq_error(t, m).sqrt() < 0.5;
    let near_modes = |t: f64| near(t, FRAC_PI_2) || near(t, -FRAC_PI_2);
    let collect = |n: usize, c: CombinerChoice, f: &dyn Fn(&TrialRecord) -> f64| -> Vec<f64> {
        records
            .iter()
            .filter(|r| r.n == n && r.combiner == c)
            .map(f)
            .collect()
    };
    let frac = |v: &[f64], pred: &dyn Fn(f64) -> bool| {
        v.iter().filter(|t| pred(**t)).count() as f64 / v.len() as f64
    };

    // n = 10: concentration on the two modes
    let mle10 = collect(10, CombinerChoice::Kl, &|r| r.theta_hat_mle[0]);
    let kl10 = collect(10, CombinerChoice::Kl, &|r| r.theta_hat_f[0]);
    let lin10 = collect(10, CombinerChoice::Linear, &|r| r.theta_hat_f[0]);
    let mle_near = frac(&mle10, &near_modes);
    let kl_near = frac(&kl10, &near_modes);
    assert!(mle_near >= 0.8, "MLE near-mode fraction {mle_near:.3}");
    assert!(kl_near >= 0.8, "KL near-mode fraction {kl_near:.3}");

    let lin_far = frac(&lin10, &|t| !near_modes(t));
    let kl_far = frac(&kl10, &|t| !near_modes(t));
    assert!(
        lin_far > 0.0 && lin_far >= 2.0 * kl_far,
        "linear far-fraction {lin_far:.3} does not exceed 2x KL far-fraction {kl_far:.3}"
    );

    // n = 1000: the less favorable mode at -pi/2 vanishes
    let mle1000 = collect(1000, CombinerChoice::Kl, &|r| r.theta_hat_mle[0]);
    let minority = frac(&mle1000, &|t| near(t, -FRAC_PI_2));
    assert!(minority < 0.05, "minority-mode fraction {minority:.4}");

    println!(
        "AC-6 PASS: n=10 near-mode fractions mle={mle_near:.3} kl={kl_near:.3}, far fractions lin={lin_far:.3} kl={kl_far:.3}; n=1000 minority mode {minority:.4} ({trials} trials, {elapsed:.2?})"
    );
}

/// AC-7: synthetic well-separated 2-D K=3 mixture, d=10, n=500, 100 trials,
/// label-wise-style skewed partitions: held-out log-likelihood orders
/// kl_bootstrap >= matched_linear and matched_linear >= naive_linear in at
/// least 80% of trials (m_per_local = 500 draws per local model).
#[test]
fn ac7_gmm_fusion_ordering_under_skew() {
    assert_eq!(mlefuse_core::gmm::DEFAULT_M_PER_LOCAL, 500);
    let mut cfg = GmmDemoConfig::synthetic(3, 10, 500, 100, 0xac7);
    cfg.partition = PartitionScheme::LabelWise;
    cfg.skew = 0.85;
    cfg.n_test = 2000;

    let t0 = Instant::now();
    let (_, per_trial) = gmm_demo(&cfg).unwrap();
    let elapsed = t0.elapsed();
    let by_trial = test_ll_by_trial(&per_trial);
    assert_eq!(by_trial.len(), 100);

    let mut kl_ge_matched = 0usize;
    let mut matched_ge_naive = 0usize;
    for methods in by_trial.values() {
        if methods["kl_bootstrap"] >= methods["matched_linear"] {
            kl_ge_matched += 1;
        }
        if methods["matched_linear"] >= methods["naive_linear"] {
            matched_ge_naive += 1;
        }
    }
    assert!(
        kl_ge_matched >= 80,
        "kl >= matched in only {kl_ge_matched}/100 trials"
    );
    assert!(
        matched_ge_naive >= 80,
        "matched >= naive in only {matched_ge_naive}/100 trials"
    );
    println!(
        "AC-7 PASS: held-out LL orderings kl>=matched {kl_ge_matched}/100, matched>=naive {matched_ge_naive}/100 ({elapsed:.2?})"
    );
}

/// AC-8: closed-form Wishart trace moments agree with the Monte-Carlo
/// estimator within 4 standard errors for 20 random (A, Sigma, dof) triples,
/// in < 30 s.
#[test]
fn ac8_wishart_moments_vs_monte_carlo() {
    let t0 = Instant::now();
    let samples = 40_000usize;
    for case in 0..20u64 {
        let mut rng = tagged_rng(substream_seed(0xac8, &[case]), &[]);
        let m = 1 + (case % 3) as usize;
        let dof = 1 + (rng.random::<f64>() * 5.0) as usize;
        let rand_mat = |rng: &mut rand::rngs::StdRng| {
            DMatrix::from_fn(m, m, |_, _| rng.random::<f64>() * 2.0 - 1.0)
        };
        let root = rand_mat(&mut rng);
        let sigma = &root * root.transpose() + DMatrix::identity(m, m) * 0.1;
        let raw = rand_mat(&mut rng);
        let a = (&raw + raw.transpose()) * 0.5;

        let spec = WishartSpec::new(sigma, dof).unwrap();
        let closed = wishart_moments(&spec, &a, &a).unwrap();
        let mc =
            wishart_mc_estimate(&spec, &a, samples, substream_seed(0xac8, &[case, 7])).unwrap();
        assert!(
            (mc.mean_tr - closed.e_tr_aw).abs() <= 4.0 * mc.se_tr,
            "case {case}: tr mean {:.5} vs {:.5} (se {:.2e})",
            mc.mean_tr,
            closed.e_tr_aw,
            mc.se_tr
        );
        assert!(
            (mc.mean_tr_sq - closed.e_tr_aw_sq).abs() <= 4.0 * mc.se_tr_sq,
            "case {case}: tr^2 mean {:.5} vs {:.5} (se {:.2e})",
            mc.mean_tr_sq,
            closed.e_tr_aw_sq,
            mc.se_tr_sq
        );
    }
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 30.0, "took {elapsed:.2?}");
    println!("AC-8 PASS: 20 random (A, Sigma, dof) triples within 4 SE in {elapsed:.2?}");
}

/// AC-9: in the AC-3 regime at n=1000, the excess of the KL combiner's MSE
/// against the true parameter over the pooled MLE's matches the predicted
/// (d-1) gamma^2 / (I n^2) within a factor of [0.7, 1.4]. The excess is four
/// orders of magnitude below each MSE and its per-trial estimator is
/// dominated by the cross term 2(kl - mle)(mle - theta*), so resolving the
/// ratio to better than +-10% takes millions of trials; this runs 6,000,000
/// moment-sampled trials in chunks.
#[test]
fn ac9_excess_mse_against_truth_matches_prediction() {
    let (a, b, theta_star, d, n) = (1.0, 5.0, FRAC_PI_4, 10usize, 1000usize);
    let model = EllipseModel::new(a, b).unwrap();
    let gamma = curvature_scalar(&model, theta_star).unwrap();
    let fisher = fisher_info(&model, &DVector::from_element(1, theta_star)).unwrap()[(0, 0)];
    let predicted = (d as f64 - 1.0) * gamma * gamma / (fisher * (n * n) as f64);

    let chunks = 60usize;
    let chunk_trials = 100_000usize;
    let total = chunks * chunk_trials;
    assert!(total >= 20_000);

    let t0 = Instant::now();
    let mut sum_excess = 0.0;
    for chunk in 0..chunks {
        let mut cfg = ellipse_config(a, b, theta_star, substream_seed(0xac9, &[chunk as u64]));
        cfg.n_grid = vec![n];
        cfg.d = d;
        cfg.trials = chunk_trials;
        cfg.combiners = vec![CombinerChoice::Kl];
        cfg.exact_moment_sampling = true;
        let records = run_experiment(&cfg).unwrap();
        for r in &records {
            let mle_err = angular_sq_error(r.theta_hat_mle[0], r.theta_star[0]);
            sum_excess += r.err_vs_true - mle_err;
        }
    }
    let elapsed = t0.elapsed();
    let ratio = sum_excess / total as f64 / predicted;
    assert!(
        (0.7..=1.4).contains(&ratio),
        "excess-MSE ratio {ratio:.4} outside [0.7, 1.4] (predicted {predicted:.3e})"
    );
    println!(
        "AC-9 PASS: (MSE_kl(theta*) - MSE_mle(theta*)) / prediction = {ratio:.4} over {total} trials in {elapsed:.2?}"
    );
}
