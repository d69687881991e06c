//! Combination rules for local fits at the fusion center.
//!
//! * `linear_average` — arithmetic mean of the local parameter vectors; the
//!   result depends on the chart the locals are expressed in.
//! * `kl_average_full` — KL averaging on a full exponential family, done
//!   exactly through the moment map: theta = mu^{-1}(mean_k mu(theta_k)).
//!   With equal-size subsamples this reproduces the pooled-data MLE.
//! * `kl_average_curved` — KL averaging on a scalar curved family, minimized
//!   numerically with the same grid+Newton scheme as the curved MLE.
//! * `kl_average_bootstrap` — parametric-bootstrap KL averaging: draw from
//!   each local model, pool, refit.
//!
//! Every combiner is symmetric in its inputs at the bit level: local
//! summaries are reduced in a canonical sorted order, and bootstrap
//! substreams are keyed by source id rather than list position.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use nalgebra::DVector;

use crate::curved::{CurvedFamily, ScalarFitter};
use crate::error::{Error, Result};
use crate::expfam::{ExponentialFamily, Parameterization, SampleSet};
use crate::rng;

/// Which operation produced a combined estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combiner {
    Linear,
    KlExact,
    KlNumeric,
    KlBootstrap,
    MatchedLinear,
    NaiveLinear,
}

impl Combiner {
    pub fn as_str(self) -> &'static str {
        match self {
            Combiner::Linear => "linear",
            Combiner::KlExact => "kl_exact",
            Combiner::KlNumeric => "kl_numeric",
            Combiner::KlBootstrap => "kl_bootstrap",
            Combiner::MatchedLinear => "matched_linear",
            Combiner::NaiveLinear => "naive_linear",
        }
    }
}

/// A local MLE tagged with its chart and provenance.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub theta: DVector<f64>,
    pub param: Parameterization,
    pub subsample_size: usize,
    pub source_id: usize,
}

impl LocalFit {
    pub fn new(
        theta: DVector<f64>,
        param: Parameterization,
        subsample_size: usize,
        source_id: usize,
    ) -> Result<Self> {
        if subsample_size == 0 {
            return Err(Error::InvalidConfig("subsample_size must be >= 1".into()));
        }
        Ok(Self {
            theta,
            param,
            subsample_size,
            source_id,
        })
    }

    /// Shorthand for a scalar fit in a given chart.
    pub fn scalar(
        theta: f64,
        param: Parameterization,
        subsample_size: usize,
        source_id: usize,
    ) -> Self {
        Self {
            theta: DVector::from_element(1, theta),
            param,
            subsample_size,
            source_id,
        }
    }
}

/// A fused estimate with solver diagnostics.
#[derive(Debug, Clone)]
pub struct CombinedEstimate {
    pub theta: DVector<f64>,
    pub combiner: Combiner,
    pub diagnostics: BTreeMap<String, f64>,
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.partial_cmp(y) {
            Some(Ordering::Equal) => continue,
            Some(o) => return o,
            None => return Ordering::Equal, // unreachable: inputs validated finite
        }
    }
    Ordering::Equal
}

fn check_finite(name: &str, v: &DVector<f64>) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::FitFailure(format!(
            "{name} contains non-finite values: {:?}",
            v.as_slice()
        )));
    }
    Ok(())
}

/// Mean of vectors in a canonical (sorted) order so that the result is
/// bit-identical under permutation of the inputs and exact when all inputs
/// coincide. `weights` must be positive if given.
fn canonical_mean(mut items: Vec<(DVector<f64>, f64)>) -> DVector<f64> {
    items.sort_by(|a, b| lex_cmp(a.0.as_slice(), b.0.as_slice()));
    let base = items[0].0.clone();
    let mut acc = DVector::zeros(base.len());
    let mut total = 0.0;
    for (v, w) in &items {
        acc += (v - &base) * *w;
        total += w;
    }
    base + acc / total
}

/// Arithmetic mean of the local estimates, in their shared chart.
pub fn linear_average(locals: &[LocalFit]) -> Result<CombinedEstimate> {
    if locals.is_empty() {
        return Err(Error::EmptySample);
    }
    let dim = locals[0].theta.len();
    let label = locals[0].param.label().to_owned();
    for l in locals {
        if l.theta.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "local {} has dim {}, expected {dim}",
                l.source_id,
                l.theta.len()
            )));
        }
        if l.param.label() != label {
            return Err(Error::MixedParameterizations(format!(
                "local {} uses '{}', expected '{}'",
                l.source_id,
                l.param.label(),
                label
            )));
        }
        check_finite("local theta", &l.theta)?;
    }
    let theta = canonical_mean(locals.iter().map(|l| (l.theta.clone(), 1.0)).collect());
    Ok(CombinedEstimate {
        theta,
        combiner: Combiner::Linear,
        diagnostics: BTreeMap::new(),
    })
}

fn kl_average_full_impl<F: ExponentialFamily + ?Sized>(
    family: &F,
    locals: &[LocalFit],
    weighted: bool,
) -> Result<CombinedEstimate> {
    if locals.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut naturals = Vec::with_capacity(locals.len());
    for l in locals {
        check_finite("local theta", &l.theta)?;
        let nat = l.param.to_natural(&l.theta)?;
        family.check_domain(&nat)?;
        naturals.push(nat);
    }

    // all locals identical: the average is that model, exactly
    if naturals.iter().all(|t| t == &naturals[0]) {
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("weighted".into(), if weighted { 1.0 } else { 0.0 });
        return Ok(CombinedEstimate {
            theta: naturals.into_iter().next().unwrap(),
            combiner: Combiner::KlExact,
            diagnostics,
        });
    }

    let items: Vec<(DVector<f64>, f64)> = naturals
        .iter()
        .zip(locals)
        .map(|(nat, l)| {
            let w = if weighted {
                l.subsample_size as f64
            } else {
                1.0
            };
            family.moment_map(nat).map(|mu| (mu, w))
        })
        .collect::<Result<_>>()?;
    let mu_bar = canonical_mean(items);
    let theta = family.inverse_moment_map(&mu_bar)?;
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("weighted".into(), if weighted { 1.0 } else { 0.0 });
    Ok(CombinedEstimate {
        theta,
        combiner: Combiner::KlExact,
        diagnostics,
    })
}

/// Exact KL average on a full family via moment-map averaging. Locals in any
/// chart are first mapped to natural parameters, so the result does not
/// depend on the parameterization they were reported in.
pub fn kl_average_full<F: ExponentialFamily + ?Sized>(
    family: &F,
    locals: &[LocalFit],
) -> Result<CombinedEstimate> {
    kl_average_full_impl(family, locals, false)
}

/// Size-weighted variant for unequal subsamples: moment averages use weights
/// proportional to `subsample_size`, which restores pooled-MLE exactness.
pub fn kl_average_full_weighted<F: ExponentialFamily + ?Sized>(
    family: &F,
    locals: &[LocalFit],
) -> Result<CombinedEstimate> {
    kl_average_full_impl(family, locals, true)
}

fn kl_average_curved_impl<M: CurvedFamily>(
    model: &M,
    fitter: Option<&ScalarFitter<'_, M>>,
    locals: &[LocalFit],
    weighted: bool,
) -> Result<CombinedEstimate> {
    if locals.is_empty() {
        return Err(Error::EmptySample);
    }
    if model.param_dim() != 1 {
        return Err(Error::Unsupported(
            "numerical KL averaging needs q = 1".into(),
        ));
    }
    // per-local moment vector mu_k and entropy-like constant
    // c_k = mu_k' eta_k - log Z(eta_k)
    let mut items = Vec::with_capacity(locals.len());
    for l in locals {
        if l.theta.len() != 1 {
            return Err(Error::DimensionMismatch("curved locals are scalar".into()));
        }
        check_finite("local theta", &l.theta)?;
        model.check_theta(&l.theta)?;
        let jet = model.embedding_jet(&l.theta)?;
        let mu = model.base().moment_map(&jet.eta)?;
        let c = mu.dot(&jet.eta) - model.base().log_partition(&jet.eta);
        let w = if weighted {
            l.subsample_size as f64
        } else {
            1.0
        };
        items.push((mu, c, w));
    }
    items.sort_by(|a, b| lex_cmp(a.0.as_slice(), b.0.as_slice()));

    let base_mu = items[0].0.clone();
    let mut acc = DVector::zeros(base_mu.len());
    let mut const_sum = 0.0;
    let mut total_w = 0.0;
    for (mu, c, w) in &items {
        acc += (mu - &base_mu) * *w;
        const_sum += c * w;
        total_w += w;
    }
    let mu_bar = &base_mu + &acc / total_w;

    let owned_fitter;
    let fitter = match fitter {
        Some(f) => f,
        None => {
            owned_fitter = ScalarFitter::new(model)?;
            &owned_fitter
        }
    };
    // the KL objective is total_w * (log Z(eta(theta)) - eta(theta)' mu_bar)
    // plus a theta-free constant; share the MLE stationarity budget across it
    let grad_tol = crate::curved::MLE_GRAD_TOL / total_w;
    let fit = fitter.maximize(mu_bar.as_slice(), grad_tol)?;

    let theta_hat = DVector::from_element(1, fit.theta);
    let jet_hat = model.embedding_jet(&theta_hat)?;
    // acc already holds sum_k w_k (mu_k - base)
    let sum_mu = base_mu * total_w + acc;
    let objective =
        total_w * model.base().log_partition(&jet_hat.eta) - jet_hat.eta.dot(&sum_mu) + const_sum;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("kl_objective".into(), objective);
    diagnostics.insert("stationarity".into(), (total_w * fit.grad).abs());
    diagnostics.insert("weighted".into(), if weighted { 1.0 } else { 0.0 });
    Ok(CombinedEstimate {
        theta: theta_hat,
        combiner: Combiner::KlNumeric,
        diagnostics,
    })
}

/// Numerical KL average for scalar curved families: minimizes
/// `sum_k KL(p(.|theta_k) || p(.|theta))` with the curved-MLE grid+Newton
/// scheme. Diagnostics carry the achieved objective and stationarity.
pub fn kl_average_curved<M: CurvedFamily>(
    model: &M,
    locals: &[LocalFit],
) -> Result<CombinedEstimate> {
    kl_average_curved_impl(model, None, locals, false)
}

/// Size-weighted variant of [`kl_average_curved`].
pub fn kl_average_curved_weighted<M: CurvedFamily>(
    model: &M,
    locals: &[LocalFit],
) -> Result<CombinedEstimate> {
    kl_average_curved_impl(model, None, locals, true)
}

/// As [`kl_average_curved`], reusing a prebuilt fitter (grid cache).
pub fn kl_average_curved_with<M: CurvedFamily>(
    model: &M,
    fitter: &ScalarFitter<'_, M>,
    locals: &[LocalFit],
) -> Result<CombinedEstimate> {
    kl_average_curved_impl(model, Some(fitter), locals, false)
}

/// Parametric-bootstrap KL averaging.
///
/// Each `(source_id, simulator)` draws `m_per_local` points from its local
/// model using a substream derived from `(seed, source_id)`; the draws are
/// pooled in ascending source order and `fitter` is run on the pool. The
/// result is deterministic given the seed and invariant to the list order of
/// the simulators.
pub fn kl_average_bootstrap<Fit, Sim>(
    fitter: Fit,
    simulators: &[(usize, Sim)],
    m_per_local: usize,
    seed: u64,
) -> Result<CombinedEstimate>
where
    Fit: Fn(&SampleSet) -> Result<DVector<f64>>,
    Sim: Fn(usize, u64) -> Result<SampleSet>,
{
    if simulators.is_empty() {
        return Err(Error::EmptySample);
    }
    if m_per_local == 0 {
        return Err(Error::InvalidConfig("m_per_local must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..simulators.len()).collect();
    order.sort_by_key(|&i| simulators[i].0);
    for pair in order.windows(2) {
        if simulators[pair[0]].0 == simulators[pair[1]].0 {
            return Err(Error::InvalidConfig(format!(
                "duplicate source_id {}",
                simulators[pair[0]].0
            )));
        }
    }

    let mut pool: Vec<f64> = Vec::new();
    let mut dim = 0usize;
    for &i in &order {
        let (source_id, sim) = &simulators[i];
        let local_seed = rng::substream_seed(seed, &[*source_id as u64, 0x03]);
        let draws = sim(m_per_local, local_seed).map_err(|e| {
            Error::FitFailure(format!(
                "bootstrap simulator for source {source_id} failed: {e}"
            ))
        })?;
        if draws.len() != m_per_local {
            return Err(Error::FitFailure(format!(
                "simulator for source {source_id} returned {} points, expected {m_per_local}",
                draws.len()
            )));
        }
        if dim == 0 {
            dim = draws.dim();
        } else if draws.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "simulator for source {source_id} returned dim {}, expected {dim}",
                draws.dim()
            )));
        }
        pool.extend_from_slice(draws.raw());
    }
    let pool = SampleSet::new(dim, pool)?;
    let theta = fitter(&pool)
        .map_err(|e| Error::FitFailure(format!("bootstrap pooled fit failed: {e}")))?;

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("m_per_local".into(), m_per_local as f64);
    diagnostics.insert("pool_size".into(), (m_per_local * simulators.len()) as f64);
    Ok(CombinedEstimate {
        theta,
        combiner: Combiner::KlBootstrap,
        diagnostics,
    })
}
