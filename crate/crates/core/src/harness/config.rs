//! Experiment configuration and validation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::expfam::Parameterization;
use crate::gmm::GmmParams;
use crate::rng::tagged_rng;

/// The data-generating model of an experiment.
#[derive(Debug, Clone)]
pub enum ModelSpec {
    /// Bivariate normal on an ellipse; theta_star in (-pi, pi].
    Ellipse { a: f64, b: f64, theta_star: f64 },
    /// Zero-mean scalar Gaussian with known true variance.
    Variance { sigma_sq_star: f64 },
    /// K-component Gaussian mixture.
    Gmm { truth: GmmTruth, k: usize },
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Ellipse { .. } => "ellipse",
            ModelSpec::Variance { .. } => "variance",
            ModelSpec::Gmm { .. } => "gmm",
        }
    }
}

/// True mixture parameters, given explicitly or generated from a seed.
#[derive(Debug, Clone)]
pub enum GmmTruth {
    Explicit(GmmParams),
    /// Well-separated synthetic mixture: means on a circle of the given
    /// radius (jittered by the seed), unit covariances, near-uniform weights.
    Generated {
        k: usize,
        dim: usize,
        separation: f64,
        seed: u64,
    },
}

impl GmmTruth {
    pub fn realize(&self) -> Result<GmmParams> {
        match self {
            GmmTruth::Explicit(p) => Ok(p.clone()),
            GmmTruth::Generated {
                k,
                dim,
                separation,
                seed,
            } => {
                if *k == 0 || *dim < 2 {
                    return Err(Error::InvalidConfig(
                        "generated mixture needs k >= 1 and dim >= 2".into(),
                    ));
                }
                let mut rng = tagged_rng(*seed, &[0x6d]);
                use rand::Rng;
                let mut weights = Vec::with_capacity(*k);
                let mut means = Vec::with_capacity(*k);
                for c in 0..*k {
                    let angle = 2.0 * std::f64::consts::PI * c as f64 / *k as f64;
                    let mut mean = DVector::zeros(*dim);
                    mean[0] = separation * angle.cos() + rng.random::<f64>() - 0.5;
                    mean[1] = separation * angle.sin() + rng.random::<f64>() - 0.5;
                    means.push(mean);
                    weights.push(1.0 + 0.5 * rng.random::<f64>());
                }
                let total: f64 = weights.iter().sum();
                for w in weights.iter_mut() {
                    *w /= total;
                }
                GmmParams::new(weights, means, vec![DMatrix::identity(*dim, *dim); *k])
            }
        }
    }
}

/// How a pooled sample is split across machines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionScheme {
    IidRandom,
    LabelWise,
}

impl PartitionScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionScheme::IidRandom => "iid_random",
            PartitionScheme::LabelWise => "label_wise",
        }
    }
}

/// Combination strategies selectable in an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CombinerChoice {
    Linear,
    Kl,
    NaiveLinear,
    MatchedLinear,
    KlBootstrap,
}

impl CombinerChoice {
    pub fn as_str(self) -> &'static str {
        match self {
            CombinerChoice::Linear => "linear",
            CombinerChoice::Kl => "kl",
            CombinerChoice::NaiveLinear => "naive_linear",
            CombinerChoice::MatchedLinear => "matched_linear",
            CombinerChoice::KlBootstrap => "kl_bootstrap",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(CombinerChoice::Linear),
            "kl" => Ok(CombinerChoice::Kl),
            "naive_linear" => Ok(CombinerChoice::NaiveLinear),
            "matched_linear" => Ok(CombinerChoice::MatchedLinear),
            "kl_bootstrap" => Ok(CombinerChoice::KlBootstrap),
            other => Err(Error::InvalidConfig(format!("unknown combiner '{other}'"))),
        }
    }
}

/// Full description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    pub n_grid: Vec<usize>,
    pub d: usize,
    pub trials: usize,
    pub combiners: Vec<CombinerChoice>,
    pub partition: PartitionScheme,
    /// Chart used by linear averaging (and for reporting) on the variance
    /// model; ignored by the other models.
    pub parameterization: Parameterization,
    pub master_seed: u64,
    /// Optional misspecified truth for the ellipse model: data are drawn from
    /// N(mean, I) with this mean instead of a point on the ellipse.
    pub misspecified_truth: Option<[f64; 2]>,
    /// Bootstrap draws per local model for `kl_bootstrap`.
    pub m_per_local: usize,
    /// Ellipse-only fast path: simulate subsample moment vectors directly.
    /// Every estimator depends on the data only through these moments, and
    /// for the Gaussian base their law is exactly Gaussian, so trial results
    /// are distributed identically to the full pipeline.
    pub exact_moment_sampling: bool,
}

impl ExperimentConfig {
    pub fn new(model: ModelSpec) -> Self {
        let combiners = match model {
            ModelSpec::Gmm { .. } => vec![
                CombinerChoice::NaiveLinear,
                CombinerChoice::MatchedLinear,
                CombinerChoice::KlBootstrap,
            ],
            _ => vec![CombinerChoice::Linear, CombinerChoice::Kl],
        };
        Self {
            model,
            n_grid: vec![1000],
            d: 10,
            trials: 100,
            combiners,
            partition: PartitionScheme::IidRandom,
            parameterization: Parameterization::Variance,
            master_seed: 0,
            misspecified_truth: None,
            m_per_local: crate::gmm::DEFAULT_M_PER_LOCAL,
            exact_moment_sampling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be >= 1".into()));
        }
        if self.d == 0 {
            return Err(Error::InvalidConfig("d must be >= 1".into()));
        }
        if self.n_grid.is_empty() {
            return Err(Error::InvalidConfig("n_grid must be nonempty".into()));
        }
        if self.combiners.is_empty() {
            return Err(Error::InvalidConfig("select at least one combiner".into()));
        }
        for &n in &self.n_grid {
            if n < self.d || n % self.d != 0 {
                return Err(Error::InvalidConfig(format!(
                    "n = {n} must be a positive multiple of d = {}",
                    self.d
                )));
            }
        }
        let gmm = matches!(self.model, ModelSpec::Gmm { .. });
        for &c in &self.combiners {
            let ok = match c {
                CombinerChoice::Linear | CombinerChoice::Kl => !gmm,
                _ => gmm,
            };
            if !ok {
                return Err(Error::InvalidConfig(format!(
                    "combiner '{}' does not apply to the {} model",
                    c.as_str(),
                    self.model.name()
                )));
            }
        }
        match &self.model {
            ModelSpec::Ellipse { a, b, theta_star } => {
                if !(*a > 0.0 && *b > 0.0) {
                    return Err(Error::InvalidConfig("ellipse axes must be positive".into()));
                }
                if !theta_star.is_finite() {
                    return Err(Error::InvalidConfig("theta_star must be finite".into()));
                }
                if self.partition == PartitionScheme::LabelWise {
                    return Err(Error::InvalidConfig(
                        "label_wise partitioning needs labeled (mixture) data".into(),
                    ));
                }
            }
            ModelSpec::Variance { sigma_sq_star } => {
                if !(*sigma_sq_star > 0.0) {
                    return Err(Error::InvalidConfig(
                        "sigma_sq_star must be positive".into(),
                    ));
                }
                if self.misspecified_truth.is_some() {
                    return Err(Error::InvalidConfig(
                        "misspecified truth is an ellipse-model option".into(),
                    ));
                }
                if self.partition == PartitionScheme::LabelWise {
                    return Err(Error::InvalidConfig(
                        "label_wise partitioning needs labeled (mixture) data".into(),
                    ));
                }
                if self.exact_moment_sampling {
                    return Err(Error::InvalidConfig(
                        "exact moment sampling is an ellipse-model option".into(),
                    ));
                }
            }
            ModelSpec::Gmm { truth, k } => {
                if *k == 0 {
                    return Err(Error::InvalidConfig("k must be >= 1".into()));
                }
                let realized = truth.realize()?;
                if realized.k() != *k {
                    return Err(Error::InvalidConfig(format!(
                        "truth has {} components, config says {k}",
                        realized.k()
                    )));
                }
                if self.m_per_local < *k {
                    return Err(Error::InvalidConfig("m_per_local must be >= k".into()));
                }
                if self.misspecified_truth.is_some() || self.exact_moment_sampling {
                    return Err(Error::InvalidConfig(
                        "misspecified/exact-moment options are ellipse-only".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
