//! Gaussian-mixture experiments: the parameter-error grid runner used by
//! `run_experiment`, and the log-likelihood demo pipeline behind the
//! `gmm-demo` CLI subcommand.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::expfam::SampleSet;
use crate::gmm::{
    em_fit, gmm_loglik, kl_average_gmm, matched_linear_average, matched_param_distance_sq,
    sample_gmm, AverageMode, GmmParams, EM_MAX_ITERS, EM_TOL,
};
use crate::harness::config::{CombinerChoice, ExperimentConfig, GmmTruth, PartitionScheme};
use crate::harness::partition::partition_data;
use crate::harness::run::{flagged_records, trial_tasks, TrialRecord};
use crate::rng::{substream_seed, tagged_rng, Stage};

fn flatten_gmm(params: &GmmParams) -> Vec<f64> {
    let mut out = Vec::new();
    for j in 0..params.k() {
        out.push(params.weights()[j]);
        out.extend(params.means()[j].iter());
        out.extend(params.covariances()[j].iter());
    }
    out
}

/// Group labels for a "label-wise style" heterogeneous split of synthetic
/// mixture data: points are mostly routed to groups owned by their source
/// component (`skew` is the routing probability), with the remainder spread
/// uniformly. Groups g with g mod K == c are owned by component c.
pub(crate) fn skewed_group_labels(
    component_labels: &[i64],
    d: usize,
    k: usize,
    skew: f64,
    seed: u64,
) -> Vec<i64> {
    let mut rng = tagged_rng(seed, &[0x6c]);
    let mut labels = Vec::with_capacity(component_labels.len());
    for &c in component_labels {
        let g = if rng.random::<f64>() < skew {
            let owners: Vec<usize> = (0..d).filter(|g| g % k == (c as usize % k)).collect();
            owners[rng.random_range(0..owners.len())]
        } else {
            rng.random_range(0..d)
        };
        labels.push(g as i64);
    }
    // pin the first d points to distinct groups so every group is nonempty
    for (i, l) in labels.iter_mut().take(d).enumerate() {
        *l = i as i64;
    }
    labels
}

fn partition_gmm_sample(
    config_partition: PartitionScheme,
    sample: &SampleSet,
    d: usize,
    k: usize,
    skew: f64,
    seed: u64,
) -> Result<Vec<SampleSet>> {
    match config_partition {
        PartitionScheme::IidRandom => partition_data(sample, d, PartitionScheme::IidRandom, seed),
        PartitionScheme::LabelWise => {
            let comp_labels = sample
                .labels()
                .ok_or_else(|| Error::InvalidConfig("label_wise needs labels".into()))?;
            let groups = skewed_group_labels(comp_labels, d, k, skew, seed);
            let relabeled =
                SampleSet::new(sample.dim(), sample.raw().to_vec())?.with_labels(groups)?;
            partition_data(&relabeled, d, PartitionScheme::LabelWise, seed)
        }
    }
}

pub(crate) fn run_gmm_experiment(
    config: &ExperimentConfig,
    truth: &GmmTruth,
    k: usize,
) -> Result<Vec<TrialRecord>> {
    let truth_params = truth.realize()?;
    let truth_flat = flatten_gmm(&truth_params);

    let records: Vec<Vec<TrialRecord>> = trial_tasks(config)
        .into_par_iter()
        .map(|(n, trial)| {
            let seed = substream_seed(config.master_seed, &[n as u64, trial as u64]);
            gmm_trial(config, &truth_params, &truth_flat, k, n, trial, seed)
                .unwrap_or_else(|e| flagged_records(config, n, trial, seed, &e.to_string()))
        })
        .collect();
    Ok(records.into_iter().flatten().collect())
}

fn gmm_trial(
    config: &ExperimentConfig,
    truth: &GmmParams,
    truth_flat: &[f64],
    k: usize,
    n: usize,
    trial: usize,
    seed: u64,
) -> Result<Vec<TrialRecord>> {
    let d = config.d;
    let master = config.master_seed;
    let nt = n as u64;
    let tt = trial as u64;

    let mut data_rng = tagged_rng(substream_seed(master, &[nt, tt, Stage::Data.tag()]), &[]);
    let sample = sample_gmm(truth, n, &mut data_rng)?;
    let parts = partition_gmm_sample(
        config.partition,
        &sample,
        d,
        k,
        1.0,
        substream_seed(master, &[nt, tt, Stage::Partition.tag()]),
    )?;

    let locals = parts
        .iter()
        .enumerate()
        .map(|(j, p)| {
            Ok(em_fit(
                p,
                k,
                substream_seed(master, &[nt, tt, Stage::Fit.tag(), j as u64]),
                EM_MAX_ITERS,
                EM_TOL,
            )?
            .params)
        })
        .collect::<Result<Vec<_>>>()?;
    let global = em_fit(
        &sample,
        k,
        substream_seed(master, &[nt, tt, Stage::Fit.tag(), u64::MAX]),
        EM_MAX_ITERS,
        EM_TOL,
    )?
    .params;
    let global_flat = flatten_gmm(&global);

    let mut records = Vec::with_capacity(config.combiners.len());
    for &combiner in &config.combiners {
        let fused = match combiner {
            CombinerChoice::NaiveLinear => matched_linear_average(&locals, AverageMode::Naive)?,
            CombinerChoice::MatchedLinear => matched_linear_average(&locals, AverageMode::Matched)?,
            CombinerChoice::KlBootstrap => kl_average_gmm(
                &locals,
                config.m_per_local,
                k,
                substream_seed(master, &[nt, tt, Stage::Bootstrap.tag()]),
            )?,
            _ => unreachable!("validated combiners"),
        };
        let (err_vs_mle, bias) = matched_param_distance_sq(&fused, &global)?;
        let (err_vs_true, _) = matched_param_distance_sq(&fused, truth)?;
        records.push(TrialRecord {
            model: "gmm".into(),
            combiner,
            n,
            d,
            trial,
            seed,
            theta_hat_f: flatten_gmm(&fused),
            theta_hat_mle: global_flat.clone(),
            theta_star: truth_flat.to_vec(),
            err_vs_mle,
            err_vs_true,
            bias_vs_mle: bias,
            flag: None,
        });
    }
    Ok(records)
}

/// Configuration for the log-likelihood demo pipeline.
#[derive(Debug, Clone)]
pub struct GmmDemoConfig {
    pub k: usize,
    pub d: usize,
    pub n: usize,
    pub n_test: usize,
    pub trials: usize,
    pub m_per_local: usize,
    pub partition: PartitionScheme,
    /// Purity of label-wise-style grouping in [1/d, 1]; 1 routes every point
    /// to a group owned by its source component.
    pub skew: f64,
    pub seed: u64,
    pub truth: GmmTruth,
    /// Optional pre-loaded dataset (e.g. from CSV); overrides synthetic
    /// sampling. Train/test splits are resampled per trial.
    pub data: Option<SampleSet>,
}

impl GmmDemoConfig {
    pub fn synthetic(k: usize, d: usize, n: usize, trials: usize, seed: u64) -> Self {
        Self {
            k,
            d,
            n,
            n_test: 2000,
            trials,
            m_per_local: crate::gmm::DEFAULT_M_PER_LOCAL,
            partition: PartitionScheme::IidRandom,
            skew: 1.0,
            seed,
            truth: GmmTruth::Generated {
                k,
                dim: 2,
                separation: 8.0,
                seed,
            },
            data: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.trials == 0 {
            return Err(Error::InvalidConfig("k, d, trials must be >= 1".into()));
        }
        if self.n < self.d || self.n % self.d != 0 {
            return Err(Error::InvalidConfig(format!(
                "n = {} must be a positive multiple of d = {}",
                self.n, self.d
            )));
        }
        if self.m_per_local < self.k {
            return Err(Error::InvalidConfig("m_per_local must be >= k".into()));
        }
        if !(self.skew >= 1.0 / self.d as f64 && self.skew <= 1.0) {
            return Err(Error::InvalidConfig("skew must lie in [1/d, 1]".into()));
        }
        if let Some(data) = &self.data {
            if data.len() < self.n + self.n_test {
                return Err(Error::InvalidConfig(format!(
                    "dataset has {} points, need n + n_test = {}",
                    data.len(),
                    self.n + self.n_test
                )));
            }
        }
        Ok(())
    }
}

/// Per-trial, per-method log-likelihoods (mean nats per point).
#[derive(Debug, Clone)]
pub struct GmmDemoTrial {
    pub trial: usize,
    pub method: String,
    pub train_ll: f64,
    pub test_ll: f64,
}

/// Aggregated demo summary for one method.
#[derive(Debug, Clone)]
pub struct GmmDemoRow {
    pub method: String,
    pub trials: usize,
    pub train_ll: f64,
    pub test_ll: f64,
    pub se_test_ll: Option<f64>,
}

pub const GMM_DEMO_METHODS: [&str; 5] = [
    "global_mle",
    "kl_bootstrap",
    "matched_linear",
    "naive_linear",
    "local_mles",
];

/// Run the mixture fusion pipeline and report train/held-out log-likelihoods
/// per method, aggregated over trials.
pub fn gmm_demo(config: &GmmDemoConfig) -> Result<(Vec<GmmDemoRow>, Vec<GmmDemoTrial>)> {
    config.validate()?;
    let truth = match config.data {
        Some(_) => None,
        None => Some(config.truth.realize()?),
    };

    let per_trial: Vec<Result<Vec<GmmDemoTrial>>> = (0..config.trials)
        .into_par_iter()
        .map(|trial| gmm_demo_trial(config, truth.as_ref(), trial))
        .collect();

    let mut trials_flat = Vec::new();
    for t in per_trial {
        trials_flat.extend(t?);
    }

    let mut rows = Vec::new();
    for method in GMM_DEMO_METHODS {
        let vals: Vec<&GmmDemoTrial> = trials_flat.iter().filter(|t| t.method == method).collect();
        if vals.is_empty() {
            continue;
        }
        let tn = vals.len() as f64;
        let train = vals.iter().map(|t| t.train_ll).sum::<f64>() / tn;
        let test = vals.iter().map(|t| t.test_ll).sum::<f64>() / tn;
        let se = if vals.len() >= 2 {
            let var = vals.iter().map(|t| (t.test_ll - test).powi(2)).sum::<f64>() / (tn - 1.0);
            Some((var / tn).sqrt())
        } else {
            None
        };
        rows.push(GmmDemoRow {
            method: method.to_string(),
            trials: vals.len(),
            train_ll: train,
            test_ll: test,
            se_test_ll: se,
        });
    }
    Ok((rows, trials_flat))
}

fn gmm_demo_trial(
    config: &GmmDemoConfig,
    truth: Option<&GmmParams>,
    trial: usize,
) -> Result<Vec<GmmDemoTrial>> {
    let master = config.seed;
    let tt = trial as u64;
    let (train, test) = match (&config.data, truth) {
        (Some(data), _) => {
            // deterministic per-trial train/test resample without replacement
            let mut idx: Vec<usize> = (0..data.len()).collect();
            use rand::seq::SliceRandom;
            idx.shuffle(&mut tagged_rng(
                substream_seed(master, &[tt, Stage::Data.tag()]),
                &[],
            ));
            let take = |ids: &[usize]| -> Result<SampleSet> {
                let mut buf = Vec::with_capacity(ids.len() * data.dim());
                for &i in ids {
                    buf.extend_from_slice(data.point(i));
                }
                let set = SampleSet::new(data.dim(), buf)?;
                match data.labels() {
                    Some(labels) => set.with_labels(ids.iter().map(|&i| labels[i]).collect()),
                    None => Ok(set),
                }
            };
            (
                take(&idx[..config.n])?,
                take(&idx[config.n..config.n + config.n_test])?,
            )
        }
        (None, Some(truth)) => {
            let mut train_rng = tagged_rng(substream_seed(master, &[tt, Stage::Data.tag()]), &[]);
            let mut test_rng = tagged_rng(substream_seed(master, &[tt, Stage::Heldout.tag()]), &[]);
            (
                sample_gmm(truth, config.n, &mut train_rng)?,
                sample_gmm(truth, config.n_test, &mut test_rng)?,
            )
        }
        (None, None) => unreachable!(),
    };

    let part_seed = substream_seed(master, &[tt, Stage::Partition.tag()]);
    let parts = match (&config.data, config.partition) {
        // user-supplied labels are group assignments already
        (Some(_), PartitionScheme::LabelWise) => {
            partition_data(&train, config.d, PartitionScheme::LabelWise, part_seed)?
        }
        _ => partition_gmm_sample(
            config.partition,
            &train,
            config.d,
            config.k,
            config.skew,
            part_seed,
        )?,
    };
    let locals = parts
        .iter()
        .enumerate()
        .map(|(j, p)| {
            Ok(em_fit(
                p,
                config.k,
                substream_seed(master, &[tt, Stage::Fit.tag(), j as u64]),
                EM_MAX_ITERS,
                EM_TOL,
            )?
            .params)
        })
        .collect::<Result<Vec<_>>>()?;

    let global = em_fit(
        &train,
        config.k,
        substream_seed(master, &[tt, Stage::Fit.tag(), u64::MAX]),
        EM_MAX_ITERS,
        EM_TOL,
    )?
    .params;
    let kl = kl_average_gmm(
        &locals,
        config.m_per_local,
        config.k,
        substream_seed(master, &[tt, Stage::Bootstrap.tag()]),
    )?;
    let matched = matched_linear_average(&locals, AverageMode::Matched)?;
    let naive = matched_linear_average(&locals, AverageMode::Naive)?;

    let mut out = Vec::new();
    let mut push = |method: &str, model: &GmmParams| -> Result<()> {
        out.push(GmmDemoTrial {
            trial,
            method: method.to_string(),
            train_ll: gmm_loglik(model, &train)?,
            test_ll: gmm_loglik(model, &test)?,
        });
        Ok(())
    };
    push("global_mle", &global)?;
    push("kl_bootstrap", &kl)?;
    push("matched_linear", &matched)?;
    push("naive_linear", &naive)?;

    // baseline: average log-likelihood of the local models themselves
    let mut train_sum = 0.0;
    let mut test_sum = 0.0;
    for l in &locals {
        train_sum += gmm_loglik(l, &train)?;
        test_sum += gmm_loglik(l, &test)?;
    }
    out.push(GmmDemoTrial {
        trial,
        method: "local_mles".to_string(),
        train_ll: train_sum / locals.len() as f64,
        test_ll: test_sum / locals.len() as f64,
    });
    Ok(out)
}

/// Map per-trial results to (trial -> method -> test LL) for comparisons.
pub fn test_ll_by_trial(trials: &[GmmDemoTrial]) -> BTreeMap<usize, BTreeMap<String, f64>> {
    let mut map: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for t in trials {
        map.entry(t.trial)
            .or_default()
            .insert(t.method.clone(), t.test_ll);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewed_labels_cover_all_groups() {
        let comps: Vec<i64> = (0..400).map(|i| (i % 3) as i64).collect();
        let labels = skewed_group_labels(&comps, 10, 3, 1.0, 4);
        let mut seen = std::collections::BTreeSet::new();
        for &l in &labels {
            assert!((0..10).contains(&l));
            seen.insert(l);
        }
        assert_eq!(seen.len(), 10);
        // pure skew: beyond the pinned prefix, the owner relation holds
        for (i, (&c, &g)) in comps.iter().zip(&labels).enumerate().skip(10) {
            assert_eq!(g as usize % 3, c as usize % 3, "point {i}");
        }
    }

    #[test]
    fn demo_runs_and_orders_sanely_on_iid_partitions() {
        let mut cfg = GmmDemoConfig::synthetic(3, 10, 500, 4, 99);
        cfg.n_test = 800;
        let (rows, trials) = gmm_demo(&cfg).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(trials.len(), 4 * 5);
        let get = |m: &str| rows.iter().find(|r| r.method == m).unwrap().test_ll;
        // with iid partitions and well-separated clusters, everything beats
        // the naive average
        assert!(get("global_mle") > get("naive_linear"));
        assert!(get("kl_bootstrap") > get("naive_linear"));
    }

    #[test]
    fn demo_is_deterministic() {
        let cfg = GmmDemoConfig::synthetic(2, 5, 200, 2, 123);
        let (a, _) = gmm_demo(&cfg).unwrap();
        let (b, _) = gmm_demo(&cfg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.test_ll.to_bits(), y.test_ll.to_bits());
        }
    }
}
