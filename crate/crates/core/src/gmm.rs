//! Gaussian mixture models: seeded EM, closed-form symmetric KL between
//! components, optimal component matching, and the three fusion strategies
//! for locally fitted mixtures.
//!
//! Mixture parameters are only identified up to component relabeling, which
//! is what breaks naive linear averaging. The matched linear average first
//! aligns component indices across machines by minimizing the total symmetric
//! KL to a reference model; the Monte-Carlo KL average sidesteps labels
//! entirely by sampling from each local mixture and refitting on the pool.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::RngCore;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::expfam::SampleSet;
use crate::rng::{substream_seed, tagged_rng};

const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Eigenvalue floor applied to every mixture covariance.
pub const COVARIANCE_FLOOR: f64 = 1e-6;
/// Bootstrap draws per local model used by the Monte-Carlo KL average.
pub const DEFAULT_M_PER_LOCAL: usize = 500;
/// Default EM iteration cap.
pub const EM_MAX_ITERS: usize = 200;
/// Default EM stopping tolerance, in mean nats per point.
pub const EM_TOL: f64 = 1e-7;

/// Weights, means and covariances of a K-component Gaussian mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
}

impl GmmParams {
    /// Validates the simplex and SPD invariants (covariances are floored).
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "component counts disagree: {} weights, {} means, {} covariances",
                k,
                means.len(),
                covariances.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "weights must be >= 0, got {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidConfig(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let p = means[0].len();
        let mut floored = Vec::with_capacity(k);
        for (mean, cov) in means.iter().zip(&covariances) {
            if mean.len() != p || cov.nrows() != p || cov.ncols() != p {
                return Err(Error::DimensionMismatch("component shapes disagree".into()));
            }
            floored.push(floor_spd(cov));
        }
        Ok(Self {
            weights,
            means,
            covariances: floored,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Components reordered by a permutation: slot i takes component perm[i].
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.k() {
            return Err(Error::DimensionMismatch("permutation length != K".into()));
        }
        GmmParams::new(
            perm.iter().map(|&j| self.weights[j]).collect(),
            perm.iter().map(|&j| self.means[j].clone()).collect(),
            perm.iter().map(|&j| self.covariances[j].clone()).collect(),
        )
    }
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Symmetrize and clamp eigenvalues at the covariance floor.
fn floor_spd(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut vals = eig.eigenvalues;
    for v in vals.iter_mut() {
        if !(*v >= COVARIANCE_FLOOR) {
            *v = COVARIANCE_FLOOR;
        }
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

struct ComponentDensity {
    mean: DVector<f64>,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    log_norm: f64, // -(p ln 2pi + ln det) / 2
}

impl ComponentDensity {
    fn new(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let p = mean.len() as f64;
        let chol = nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| Error::NotSpd(format!("covariance {cov}")))?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self {
            mean: mean.clone(),
            chol,
            log_norm: -0.5 * (p * LN_2PI + log_det),
        })
    }

    fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut diff = DVector::from_column_slice(x);
        diff -= &self.mean;
        let z = self
            .chol
            .l()
            .solve_lower_triangular(&diff)
            .expect("nonsingular Cholesky factor");
        self.log_norm - 0.5 * z.norm_squared()
    }
}

fn component_densities(params: &GmmParams) -> Result<Vec<ComponentDensity>> {
    params
        .means
        .iter()
        .zip(&params.covariances)
        .map(|(m, c)| ComponentDensity::new(m, c))
        .collect()
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean log-likelihood of `data` under the mixture, in nats per point.
pub fn gmm_loglik(params: &GmmParams, data: &SampleSet) -> Result<f64> {
    if data.dim() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data dim {} != mixture dim {}",
            data.dim(),
            params.dim()
        )));
    }
    let comps = component_densities(params)?;
    let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();
    let mut buf = vec![0.0; params.k()];
    let mut total = 0.0;
    for x in data.points() {
        for (k, comp) in comps.iter().enumerate() {
            buf[k] = log_w[k] + comp.log_pdf(x);
        }
        total += log_sum_exp(&buf);
    }
    Ok(total / data.len() as f64)
}

/// A fitted mixture plus the per-iteration log-likelihood trace.
#[derive(Debug, Clone)]
pub struct GmmFit {
    pub params: GmmParams,
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// EM from a deterministic seeded start: K distinct data points as means,
/// the pooled covariance, uniform weights. Stops when the mean log-likelihood
/// improves by less than `tol` or after `max_iters` sweeps.
pub fn em_fit(data: &SampleSet, k: usize, seed: u64, max_iters: usize, tol: f64) -> Result<GmmFit> {
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one component".into()));
    }
    let n = data.len();
    if n < k {
        return Err(Error::InvalidConfig(format!(
            "{n} points cannot support {k} components"
        )));
    }
    let p = data.dim();
    let mut warnings: Vec<String> = Vec::new();

    // seeded init: a random first point, then greedy farthest-point picks.
    // Using spread-out data points as the K means keeps a wide pooled
    // covariance from flattening the first E-step into a collapsed solution.
    let mut rng = tagged_rng(seed, &[0x05]);
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut means: Vec<DVector<f64>> = vec![DVector::from_column_slice(data.point(order[0]))];
    while means.len() < k {
        let mut best: Option<(f64, usize)> = None;
        for &i in &order {
            let cand = data.point(i);
            let dist = means
                .iter()
                .map(|m| {
                    m.iter()
                        .zip(cand)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| dist > bd) {
                best = Some((dist, i));
            }
        }
        let (dist, i) = best.expect("nonempty sample");
        if dist == 0.0 && !warnings.iter().any(|w| w.contains("distinct")) {
            warnings.push(format!(
                "fewer than {k} distinct points; duplicating initial means"
            ));
        }
        means.push(DVector::from_column_slice(data.point(i)));
    }

    // pooled covariance
    let mut grand = DVector::zeros(p);
    for x in data.points() {
        grand += DVector::from_column_slice(x);
    }
    grand /= n as f64;
    let mut pooled = DMatrix::zeros(p, p);
    for x in data.points() {
        let d = DVector::from_column_slice(x) - &grand;
        pooled += &d * d.transpose();
    }
    pooled /= n as f64;
    let pooled = floor_spd(&pooled);
    if min_eigenvalue(&pooled) <= COVARIANCE_FLOOR * 1.0001 {
        warnings.push("covariance floor engaged at initialization".into());
    }

    let mut params = GmmParams::new(vec![1.0 / k as f64; k], means, vec![pooled; k])?;

    let mut trace = Vec::new();
    let mut resp = vec![0.0; n * k];
    let mut iterations = 0;

    for iter in 0..max_iters {
        iterations = iter + 1;
        let comps = component_densities(&params)?;
        let log_w: Vec<f64> = params.weights.iter().map(|w| w.ln()).collect();

        // E step
        let mut ll = 0.0;
        let mut buf = vec![0.0; k];
        for (i, x) in data.points().enumerate() {
            for (j, comp) in comps.iter().enumerate() {
                buf[j] = log_w[j] + comp.log_pdf(x);
            }
            let lse = log_sum_exp(&buf);
            ll += lse;
            for j in 0..k {
                resp[i * k + j] = (buf[j] - lse).exp();
            }
        }
        ll /= n as f64;
        trace.push(ll);

        // M step
        let mut weights = vec![0.0; k];
        let mut new_means = vec![DVector::zeros(p); k];
        for (i, x) in data.points().enumerate() {
            let xv = DVector::from_column_slice(x);
            for j in 0..k {
                let r = resp[i * k + j];
                weights[j] += r;
                new_means[j] += &xv * r;
            }
        }
        let mut floored = false;
        let mut covs = Vec::with_capacity(k);
        for j in 0..k {
            let nk = weights[j].max(1e-300);
            new_means[j] /= nk;
            let mut cov = DMatrix::zeros(p, p);
            for (i, x) in data.points().enumerate() {
                let d = DVector::from_column_slice(x) - &new_means[j];
                cov += &d * d.transpose() * resp[i * k + j];
            }
            cov /= nk;
            if min_eigenvalue(&cov) < COVARIANCE_FLOOR {
                floored = true;
            }
            covs.push(floor_spd(&cov));
        }
        if floored
            && !warnings
                .iter()
                .any(|w| w.contains("floor engaged during EM"))
        {
            warnings.push("covariance floor engaged during EM".into());
        }
        let total: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= total;
        }
        params = GmmParams::new(weights, new_means, covs)?;

        if iter > 0 && trace[iter] - trace[iter - 1] < tol {
            break;
        }
    }

    Ok(GmmFit {
        params,
        loglik_trace: trace,
        iterations,
        warnings,
    })
}

/// Closed-form symmetric KL divergence between two Gaussian components,
/// KL(c1 || c2) + KL(c2 || c1).
pub fn gaussian_sym_kl(
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mean2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    if mean1.len() != mean2.len() || cov1.nrows() != cov2.nrows() {
        return Err(Error::DimensionMismatch("component shapes disagree".into()));
    }
    let p = mean1.len() as f64;
    let chol1 = nalgebra::Cholesky::new(cov1.clone())
        .ok_or_else(|| Error::NotSpd("first covariance".into()))?;
    let chol2 = nalgebra::Cholesky::new(cov2.clone())
        .ok_or_else(|| Error::NotSpd("second covariance".into()))?;
    let diff = mean2 - mean1;
    let kl = |from_cov: &DMatrix<f64>,
              to: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
              from: &nalgebra::Cholesky<f64, nalgebra::Dyn>|
     -> f64 {
        let trace = to.solve(from_cov).trace();
        let maha = diff.dot(&to.solve(&diff));
        let log_det_to = 2.0 * to.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_det_from = 2.0 * from.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        0.5 * (trace + maha - p + log_det_to - log_det_from)
    };
    Ok(kl(cov1, &chol2, &chol1) + kl(cov2, &chol1, &chol2))
}

/// Index alignment of several mixtures to a reference model.
#[derive(Debug, Clone)]
pub struct Matching {
    /// One permutation per model; slot i of the aligned model is component
    /// `permutations[m][i]` of the original, matched to reference slot i.
    pub permutations: Vec<Vec<usize>>,
    /// Sum of matched symmetric KLs over all models.
    pub total_cost: f64,
}

/// Exact min-cost assignment by subset dynamic programming. Rows are assigned
/// in order, so ties resolve deterministically.
fn min_cost_assignment(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let k = cost.len();
    let full = 1usize << k;
    let mut dp = vec![f64::INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    dp[0] = 0.0;
    for mask in 0..full {
        if !dp[mask].is_finite() {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row == k {
            continue;
        }
        for j in 0..k {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let c = dp[mask] + cost[row][j];
                if c < dp[next] {
                    dp[next] = c;
                    choice[next] = j;
                }
            }
        }
    }
    let mut perm = vec![0usize; k];
    let mut mask = full - 1;
    for row in (0..k).rev() {
        let j = choice[mask];
        perm[row] = j;
        mask ^= 1 << j;
    }
    (perm, dp[full - 1])
}

/// Match every model's component indices to `models[reference_index]` by
/// minimizing the summed symmetric KL, solved exactly per model.
pub fn match_components(models: &[GmmParams], reference_index: usize) -> Result<Matching> {
    if models.is_empty() {
        return Err(Error::EmptySample);
    }
    if reference_index >= models.len() {
        return Err(Error::InvalidConfig(format!(
            "reference index {reference_index} out of range"
        )));
    }
    let k = models[0].k();
    let p = models[0].dim();
    if k > 20 {
        return Err(Error::Unsupported(format!(
            "assignment supports K <= 20, got {k}"
        )));
    }
    for m in models {
        if m.k() != k || m.dim() != p {
            return Err(Error::DimensionMismatch(format!(
                "all mixtures must share K={k}, p={p}"
            )));
        }
    }
    let reference = &models[reference_index];
    let mut permutations = Vec::with_capacity(models.len());
    let mut total_cost = 0.0;
    for model in models {
        let mut cost = vec![vec![0.0; k]; k];
        for (i, row) in cost.iter_mut().enumerate() {
            for (j, c) in row.iter_mut().enumerate() {
                *c = gaussian_sym_kl(
                    &reference.means[i],
                    &reference.covariances[i],
                    &model.means[j],
                    &model.covariances[j],
                )?;
            }
        }
        let (perm, c) = min_cost_assignment(&cost);
        permutations.push(perm);
        total_cost += c;
    }
    Ok(Matching {
        permutations,
        total_cost,
    })
}

/// Index-alignment policy for linear mixture averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AverageMode {
    Naive,
    Matched,
}

/// Componentwise arithmetic mean of the local mixtures. `Matched` first
/// aligns indices to the first model via [`match_components`]; `Naive`
/// averages in given index order. Averaged weights are renormalized and
/// averaged covariances re-floored.
pub fn matched_linear_average(models: &[GmmParams], mode: AverageMode) -> Result<GmmParams> {
    if models.is_empty() {
        return Err(Error::EmptySample);
    }
    let k = models[0].k();
    let p = models[0].dim();
    for m in models {
        if m.k() != k || m.dim() != p {
            return Err(Error::DimensionMismatch(
                "all mixtures must share K and p".into(),
            ));
        }
    }
    let aligned: Vec<GmmParams> = match mode {
        AverageMode::Naive => models.to_vec(),
        AverageMode::Matched => {
            let matching = match_components(models, 0)?;
            models
                .iter()
                .zip(&matching.permutations)
                .map(|(m, perm)| m.permuted(perm))
                .collect::<Result<_>>()?
        }
    };
    let dn = models.len() as f64;
    let mut weights = vec![0.0; k];
    let mut means = vec![DVector::zeros(p); k];
    let mut covs = vec![DMatrix::zeros(p, p); k];
    for m in &aligned {
        for j in 0..k {
            weights[j] += m.weights[j] / dn;
            means[j] += &m.means[j] / dn;
            covs[j] += &m.covariances[j] / dn;
        }
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    GmmParams::new(weights, means, covs)
}

/// Draw n points from the mixture; labels record the source component.
pub fn sample_gmm(params: &GmmParams, n: usize, rng: &mut dyn RngCore) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be >= 1".into()));
    }
    let p = params.dim();
    let chols: Vec<_> = params
        .covariances
        .iter()
        .map(|c| {
            nalgebra::Cholesky::new(c.clone())
                .ok_or_else(|| Error::NotSpd("mixture covariance".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cum = Vec::with_capacity(params.k());
    let mut acc = 0.0;
    for w in &params.weights {
        acc += w;
        cum.push(acc);
    }
    let mut data = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    let mut z = DVector::zeros(p);
    for _ in 0..n {
        let u: f64 = rng.random();
        let comp = cum.iter().position(|c| u <= *c).unwrap_or(params.k() - 1);
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &params.means[comp] + chols[comp].l() * &z;
        data.extend_from_slice(x.as_slice());
        labels.push(comp as i64);
    }
    SampleSet::new(p, data)?.with_labels(labels)
}

/// Monte-Carlo KL average of local mixtures: draw `m_per_local` points from
/// each local model (substreams keyed by list position), pool, and refit a
/// K-component mixture with EM. Deterministic given the seed.
pub fn kl_average_gmm(
    models: &[GmmParams],
    m_per_local: usize,
    k: usize,
    seed: u64,
) -> Result<GmmParams> {
    if models.is_empty() {
        return Err(Error::EmptySample);
    }
    if m_per_local < k {
        return Err(Error::InvalidConfig(format!(
            "m_per_local = {m_per_local} must be >= K = {k}"
        )));
    }
    let p = models[0].dim();
    let mut pool: Vec<f64> = Vec::with_capacity(models.len() * m_per_local * p);
    for (idx, model) in models.iter().enumerate() {
        if model.dim() != p {
            return Err(Error::DimensionMismatch("all mixtures must share p".into()));
        }
        let mut rng = tagged_rng(substream_seed(seed, &[idx as u64, 0x03]), &[]);
        let draws = sample_gmm(model, m_per_local, &mut rng)?;
        pool.extend_from_slice(draws.raw());
    }
    let pool = SampleSet::new(p, pool)?;
    let fit = em_fit(
        &pool,
        k,
        substream_seed(seed, &[0x05]),
        EM_MAX_ITERS,
        EM_TOL,
    )?;
    Ok(fit.params)
}

/// Assignment-minimized squared parameter distance between two mixtures with
/// the same shape: weights, means and covariance entries all enter the cost.
/// This is the parameter-space error metric used by the experiment harness,
/// where raw index order is meaningless.
pub fn matched_param_distance_sq(a: &GmmParams, b: &GmmParams) -> Result<(f64, Vec<f64>)> {
    if a.k() != b.k() || a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(
            "mixtures must share K and p".into(),
        ));
    }
    let k = a.k();
    let mut cost = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in 0..k {
            let dw = a.weights[i] - b.weights[j];
            let dm = (&a.means[i] - &b.means[j]).norm_squared();
            let dc = (&a.covariances[i] - &b.covariances[j]).norm_squared();
            cost[i][j] = dw * dw + dm + dc;
        }
    }
    let (perm, total) = min_cost_assignment(&cost);
    let mut diff = Vec::new();
    for i in 0..k {
        let j = perm[i];
        diff.push(a.weights[i] - b.weights[j]);
        diff.extend((&a.means[i] - &b.means[j]).iter());
        diff.extend((&a.covariances[i] - &b.covariances[j]).iter());
    }
    Ok((total, diff))
}

/// Convenience map of summary diagnostics for a fit.
pub fn fit_diagnostics(fit: &GmmFit) -> BTreeMap<String, f64> {
    let mut map = BTreeMap::new();
    map.insert("iterations".into(), fit.iterations as f64);
    if let Some(ll) = fit.loglik_trace.last() {
        map.insert("final_loglik".into(), *ll);
    }
    map.insert("warnings".into(), fit.warnings.len() as f64);
    map
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_gmm(means: &[(f64, f64)]) -> GmmParams {
        let k = means.len();
        GmmParams::new(
            vec![1.0 / k as f64; k],
            means
                .iter()
                .map(|&(x, y)| DVector::from_column_slice(&[x, y]))
                .collect(),
            vec![DMatrix::identity(2, 2); k],
        )
        .unwrap()
    }

    #[test]
    fn params_invariants() {
        assert!(GmmParams::new(vec![0.6, 0.39], vec![], vec![]).is_err());
        let bad_sum = GmmParams::new(
            vec![0.6, 0.39],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DMatrix::identity(1, 1); 2],
        );
        assert!(bad_sum.is_err());

        // degenerate covariance gets floored at construction
        let g = GmmParams::new(
            vec![1.0],
            vec![DVector::zeros(2)],
            vec![DMatrix::zeros(2, 2)],
        )
        .unwrap();
        let eig = g.covariances()[0].clone().symmetric_eigen();
        assert!(eig
            .eigenvalues
            .iter()
            .all(|v| *v >= COVARIANCE_FLOOR * 0.999));
    }

    #[test]
    fn em_single_component_closed_form() {
        let data = SampleSet::new(1, vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let fit = em_fit(&data, 1, 0, 50, 1e-10).unwrap();
        assert_eq!(fit.params.weights(), &[1.0]);
        assert_relative_eq!(fit.params.means()[0][0], 3.0, epsilon = 1e-9);
        // MLE covariance: mean squared deviation
        let want = (4.0 + 1.0 + 0.0 + 9.0) / 4.0;
        assert_relative_eq!(fit.params.covariances()[0][(0, 0)], want, epsilon = 1e-9);
    }

    #[test]
    fn em_recovers_separated_clusters() {
        let mut rng = tagged_rng(2024, &[]);
        let truth = GmmParams::new(
            vec![0.5, 0.5],
            vec![
                DVector::from_element(1, -10.0),
                DVector::from_element(1, 10.0),
            ],
            vec![DMatrix::identity(1, 1); 2],
        )
        .unwrap();
        let data = sample_gmm(&truth, 2000, &mut rng).unwrap();
        let fit = em_fit(&data, 2, 7, 200, 1e-9).unwrap();
        let mut means: Vec<f64> = fit.params.means().iter().map(|m| m[0]).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((means[0] + 10.0).abs() < 0.2, "means {means:?}");
        assert!((means[1] - 10.0).abs() < 0.2, "means {means:?}");
        assert!((fit.params.weights()[0] - 0.5).abs() < 0.05);
    }

    #[test]
    fn em_is_deterministic_and_monotone() {
        let mut rng = tagged_rng(5, &[]);
        let truth = unit_gmm(&[(0.0, 0.0), (4.0, 4.0)]);
        let data = sample_gmm(&truth, 300, &mut rng).unwrap();
        let a = em_fit(&data, 2, 99, 100, 1e-9).unwrap();
        let b = em_fit(&data, 2, 99, 100, 1e-9).unwrap();
        assert_eq!(a.params, b.params);
        for w in a.loglik_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9, "trace decreased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn em_monotone_on_random_instances() {
        for inst in 0..100u64 {
            let mut rng = tagged_rng(800 + inst, &[]);
            let truth = unit_gmm(&[
                (
                    rng.random::<f64>() * 6.0 - 3.0,
                    rng.random::<f64>() * 6.0 - 3.0,
                ),
                (
                    rng.random::<f64>() * 6.0 - 3.0,
                    rng.random::<f64>() * 6.0 - 3.0,
                ),
            ]);
            let data = sample_gmm(&truth, 40, &mut rng).unwrap();
            let fit = em_fit(&data, 2, inst, 30, 0.0).unwrap();
            for w in fit.loglik_trace.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "instance {inst}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn em_rejects_too_few_points_and_floors_identical_data() {
        let data = SampleSet::new(1, vec![1.0, 2.0]).unwrap();
        assert!(em_fit(&data, 3, 0, 10, 1e-6).is_err());

        let same = SampleSet::new(1, vec![5.0; 10]).unwrap();
        let fit = em_fit(&same, 1, 0, 10, 1e-6).unwrap();
        assert!(!fit.warnings.is_empty());
        assert_relative_eq!(
            fit.params.covariances()[0][(0, 0)],
            COVARIANCE_FLOOR,
            max_relative = 1e-6
        );
    }

    #[test]
    fn loglik_examples() {
        // standard normal at the origin, 1-D
        let g = GmmParams::new(
            vec![1.0],
            vec![DVector::zeros(1)],
            vec![DMatrix::identity(1, 1)],
        )
        .unwrap();
        let data = SampleSet::new(1, vec![0.0]).unwrap();
        assert_relative_eq!(
            gmm_loglik(&g, &data).unwrap(),
            -0.5 * LN_2PI,
            epsilon = 1e-12
        );

        // duplicated component with split weights collapses to the same model
        let dup = GmmParams::new(
            vec![0.5, 0.5],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DMatrix::identity(1, 1); 2],
        )
        .unwrap();
        let data = SampleSet::new(1, vec![0.3, -1.2, 0.8]).unwrap();
        assert_relative_eq!(
            gmm_loglik(&dup, &data).unwrap(),
            gmm_loglik(&g, &data).unwrap(),
            epsilon = 1e-12
        );

        let wrong = SampleSet::new(2, vec![0.0, 0.0]).unwrap();
        assert!(gmm_loglik(&g, &wrong).is_err());
    }

    #[test]
    fn loglik_finite_on_random_instances() {
        for inst in 0..100u64 {
            let mut rng = tagged_rng(31 + inst, &[]);
            let g = GmmParams::new(
                vec![0.3, 0.7],
                vec![
                    DVector::from_fn(2, |_, _| rng.random::<f64>() * 8.0 - 4.0),
                    DVector::from_fn(2, |_, _| rng.random::<f64>() * 8.0 - 4.0),
                ],
                vec![DMatrix::identity(2, 2) * rng.random::<f64>().max(1e-9); 2],
            )
            .unwrap();
            let data = {
                let mut rng2 = tagged_rng(1031 + inst, &[]);
                sample_gmm(&g, 20, &mut rng2).unwrap()
            };
            let ll = gmm_loglik(&g, &data).unwrap();
            assert!(ll.is_finite());
        }
    }

    #[test]
    fn sym_kl_examples() {
        let m0 = DVector::zeros(1);
        let m1 = DVector::from_element(1, 1.0);
        let i1 = DMatrix::identity(1, 1);
        assert_relative_eq!(
            gaussian_sym_kl(&m0, &i1, &m0, &i1).unwrap(),
            0.0,
            epsilon = 1e-14
        );
        assert_relative_eq!(
            gaussian_sym_kl(&m0, &i1, &m1, &i1).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let a = gaussian_sym_kl(&m0, &(i1.clone() * 2.0), &m1, &i1).unwrap();
        let b = gaussian_sym_kl(&m1, &i1, &m0, &(i1.clone() * 2.0)).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn matching_examples() {
        let a = unit_gmm(&[(0.0, 0.0), (10.0, 10.0)]);
        let matching = match_components(&[a.clone(), a.clone(), a.clone()], 0).unwrap();
        assert!(matching.permutations.iter().all(|p| p == &[0, 1]));
        assert!(matching.total_cost < 1e-12);

        let swapped = a.permuted(&[1, 0]).unwrap();
        let matching = match_components(&[a.clone(), swapped], 0).unwrap();
        assert_eq!(matching.permutations[1], vec![1, 0]);
    }

    #[test]
    fn matching_agrees_with_brute_force() {
        fn permutations(k: usize) -> Vec<Vec<usize>> {
            fn rec(
                remaining: &mut Vec<usize>,
                current: &mut Vec<usize>,
                out: &mut Vec<Vec<usize>>,
            ) {
                if remaining.is_empty() {
                    out.push(current.clone());
                    return;
                }
                for i in 0..remaining.len() {
                    let v = remaining.remove(i);
                    current.push(v);
                    rec(remaining, current, out);
                    current.pop();
                    remaining.insert(i, v);
                }
            }
            let mut out = Vec::new();
            rec(&mut (0..k).collect(), &mut Vec::new(), &mut out);
            out
        }

        for inst in 0..50u64 {
            let mut rng = tagged_rng(60 + inst, &[]);
            let k = 3 + (inst % 3) as usize; // K in {3,4,5}
            let rand_model = |rng: &mut rand::rngs::StdRng| {
                let means: Vec<DVector<f64>> = (0..k)
                    .map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>() * 6.0 - 3.0))
                    .collect();
                let covs: Vec<DMatrix<f64>> = (0..k)
                    .map(|_| DMatrix::identity(2, 2) * (0.5 + rng.random::<f64>()))
                    .collect();
                GmmParams::new(vec![1.0 / k as f64; k], means, covs).unwrap()
            };
            let reference = rand_model(&mut rng);
            let other = rand_model(&mut rng);
            let matching = match_components(&[reference.clone(), other.clone()], 0).unwrap();

            let mut cost = vec![vec![0.0; k]; k];
            for i in 0..k {
                for j in 0..k {
                    cost[i][j] = gaussian_sym_kl(
                        &reference.means()[i],
                        &reference.covariances()[i],
                        &other.means()[j],
                        &other.covariances()[j],
                    )
                    .unwrap();
                }
            }
            let dp_cost: f64 = (0..k).map(|i| cost[i][matching.permutations[1][i]]).sum();
            let brute = permutations(k)
                .into_iter()
                .map(|perm| (0..k).map(|i| cost[i][perm[i]]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            assert!(
                (dp_cost - brute).abs() < 1e-10,
                "dp {dp_cost} vs brute {brute}"
            );
        }
    }

    #[test]
    fn matched_average_recovers_swapped_models() {
        let a = unit_gmm(&[(-10.0, 0.0), (10.0, 0.0)]);
        let swapped = a.permuted(&[1, 0]).unwrap();

        let matched =
            matched_linear_average(&[a.clone(), swapped.clone()], AverageMode::Matched).unwrap();
        let (dist, _) = matched_param_distance_sq(&matched, &a).unwrap();
        assert!(
            dist < 1e-18,
            "matched average should recover the model, dist {dist}"
        );

        let naive = matched_linear_average(&[a.clone(), swapped], AverageMode::Naive).unwrap();
        for m in naive.means() {
            assert!(
                m[0].abs() < 1e-12,
                "naive average collapses to the midpoint"
            );
        }

        // identical models: both modes return the model itself
        let same = matched_linear_average(&[a.clone(), a.clone()], AverageMode::Matched).unwrap();
        let (dist, _) = matched_param_distance_sq(&same, &a).unwrap();
        assert!(dist < 1e-18);
    }

    #[test]
    fn matched_average_density_invariant_to_input_order() {
        let mut rng = tagged_rng(91, &[]);
        let models: Vec<GmmParams> = (0..4)
            .map(|_| {
                unit_gmm(&[
                    (-8.0 + rng.random::<f64>(), rng.random::<f64>()),
                    (8.0 + rng.random::<f64>(), rng.random::<f64>()),
                ])
            })
            .collect();
        let probe = {
            let mut rng2 = tagged_rng(92, &[]);
            sample_gmm(&models[0], 400, &mut rng2).unwrap()
        };
        let fwd = matched_linear_average(&models, AverageMode::Matched).unwrap();
        let mut rev = models.clone();
        rev.reverse();
        let bwd = matched_linear_average(&rev, AverageMode::Matched).unwrap();
        let ll_f = gmm_loglik(&fwd, &probe).unwrap();
        let ll_b = gmm_loglik(&bwd, &probe).unwrap();
        assert!((ll_f - ll_b).abs() < 1e-8, "{ll_f} vs {ll_b}");
    }

    #[test]
    fn kl_average_gmm_consistency_and_label_invariance() {
        let common = unit_gmm(&[(-6.0, 0.0), (6.0, 0.0)]);
        let locals = vec![common.clone(); 4];
        let fused = kl_average_gmm(&locals, 5000, 2, 13).unwrap();
        let probe = {
            let mut rng = tagged_rng(14, &[]);
            sample_gmm(&common, 2000, &mut rng).unwrap()
        };
        let ll_common = gmm_loglik(&common, &probe).unwrap();
        let ll_fused = gmm_loglik(&fused, &probe).unwrap();
        assert!(
            (ll_common - ll_fused).abs() < 0.05,
            "{ll_common} vs {ll_fused}"
        );

        // permuting component order inside each local only changes the
        // sampling stream through the weight lookup, not the density
        let permuted: Vec<GmmParams> = locals
            .iter()
            .map(|m| m.permuted(&[1, 0]).unwrap())
            .collect();
        let fused_p = kl_average_gmm(&permuted, 5000, 2, 13).unwrap();
        let ll_p = gmm_loglik(&fused_p, &probe).unwrap();
        assert!((ll_fused - ll_p).abs() < 0.05, "{ll_fused} vs {ll_p}");

        // single local model: a parametric-bootstrap refit
        let single = kl_average_gmm(&locals[..1], 2000, 2, 15).unwrap();
        assert_eq!(single.k(), 2);

        assert!(kl_average_gmm(&locals, 1, 2, 16).is_err());
    }
}
