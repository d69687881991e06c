//! Aggregation of trial records into bias/MSE summaries with Monte-Carlo
//! standard errors, plus the closed-form predictions column.

use std::collections::BTreeMap;

use crate::curved::{curvature_scalar, fisher_info, EllipseModel, LinearEmbedding};
use crate::error::{Error, Result};
use crate::expfam::GaussianVarianceFamily;
use crate::harness::config::{CombinerChoice, ExperimentConfig, ModelSpec};
use crate::harness::run::TrialRecord;
use crate::theory::{beta_linear, predict_asymptotics};
use nalgebra::{DMatrix, DVector};

/// One summary line per (model, combiner, n, d) cell.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub model: String,
    pub combiner: CombinerChoice,
    pub n: usize,
    pub d: usize,
    /// Completed (unflagged) trials contributing to the cell.
    pub trials: usize,
    /// Mean of theta_hat_f - theta_hat_mle, per coordinate.
    pub bias: Vec<f64>,
    pub mse_vs_mle: f64,
    pub se_mse_vs_mle: Option<f64>,
    pub mse_vs_true: f64,
    pub se_mse_vs_true: Option<f64>,
    /// Theory prediction for E||f - MLE||^2 where available.
    pub predicted_mse_vs_mle: Option<f64>,
}

impl SummaryRow {
    /// Scalar bias for tabular output: signed for one-parameter models, the
    /// euclidean norm of the mean bias vector otherwise.
    pub fn bias_scalar(&self) -> f64 {
        match self.bias.len() {
            0 => f64::NAN,
            1 => self.bias[0],
            _ => self.bias.iter().map(|b| b * b).sum::<f64>().sqrt(),
        }
    }
}

fn mean_and_se(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some((var / n).sqrt()))
}

/// Collapse records into per-cell summaries. Flagged records are excluded;
/// cells with no completed trials are dropped. Rows come out sorted by
/// (model, combiner, n, d).
pub fn aggregate(records: &[TrialRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut groups: BTreeMap<(String, &'static str, usize, usize), Vec<&TrialRecord>> =
        BTreeMap::new();
    for r in records.iter().filter(|r| r.flag.is_none()) {
        groups
            .entry((r.model.clone(), r.combiner.as_str(), r.n, r.d))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::with_capacity(groups.len());
    for ((model, _, n, d), group) in groups {
        let dim = group[0].bias_vs_mle.len();
        let mut bias = vec![0.0; dim];
        for r in &group {
            if r.bias_vs_mle.len() != dim {
                return Err(Error::DimensionMismatch(
                    "records in one cell disagree on parameter dimension".into(),
                ));
            }
            for (acc, b) in bias.iter_mut().zip(&r.bias_vs_mle) {
                *acc += b;
            }
        }
        for b in bias.iter_mut() {
            *b /= group.len() as f64;
        }
        let errs_mle: Vec<f64> = group.iter().map(|r| r.err_vs_mle).collect();
        let errs_true: Vec<f64> = group.iter().map(|r| r.err_vs_true).collect();
        let (mse_vs_mle, se_mse_vs_mle) = mean_and_se(&errs_mle);
        let (mse_vs_true, se_mse_vs_true) = mean_and_se(&errs_true);
        rows.push(SummaryRow {
            model,
            combiner: group[0].combiner,
            n,
            d,
            trials: group.len(),
            bias,
            mse_vs_mle,
            se_mse_vs_mle,
            mse_vs_true,
            se_mse_vs_true,
            predicted_mse_vs_mle: None,
        });
    }
    Ok(rows)
}

/// Fill the `predicted_mse_vs_mle` column from the asymptotic theory, where
/// it applies: the well-specified ellipse (KL and linear) and the variance
/// model (KL always exact; linear exact in the variance chart, predicted from
/// the bias coefficient in the natural chart). Cells without a closed-form
/// prediction keep `None`.
pub fn attach_predictions(rows: &mut [SummaryRow], config: &ExperimentConfig) -> Result<()> {
    match &config.model {
        ModelSpec::Ellipse { a, b, theta_star } => {
            if config.misspecified_truth.is_some() {
                return Ok(());
            }
            let model = EllipseModel::new(*a, *b)?;
            let theta = crate::curved::wrap_angle(*theta_star);
            let gamma = curvature_scalar(&model, theta)?;
            let fisher = fisher_info(&model, &DVector::from_element(1, theta))?[(0, 0)];
            let beta_lin = beta_linear(&model, theta)?;
            for row in rows.iter_mut() {
                let beta = match row.combiner {
                    CombinerChoice::Kl => 0.0,
                    CombinerChoice::Linear => beta_lin,
                    _ => continue,
                };
                row.predicted_mse_vs_mle = Some(
                    predict_asymptotics(gamma * gamma, fisher, beta, row.n, row.d)?.mse_vs_mle,
                );
            }
        }
        ModelSpec::Variance { sigma_sq_star } => {
            let theta_star = -0.5 / sigma_sq_star;
            for row in rows.iter_mut() {
                row.predicted_mse_vs_mle = match (row.combiner, config.parameterization.label()) {
                    // moment-map averaging recovers the pooled MLE exactly
                    (CombinerChoice::Kl, _) => Some(0.0),
                    // the variance chart is the moment chart: linear = KL
                    (CombinerChoice::Linear, "variance") => Some(0.0),
                    (CombinerChoice::Linear, "natural") => {
                        let lin = LinearEmbedding::new(
                            DMatrix::from_element(1, 1, 1.0),
                            GaussianVarianceFamily,
                            DVector::from_element(1, theta_star * 100.0),
                            DVector::from_element(1, -1e-8),
                        )?;
                        let beta = beta_linear(&lin, theta_star)?;
                        let fisher = 0.5 / (theta_star * theta_star);
                        Some(predict_asymptotics(0.0, fisher, beta, row.n, row.d)?.mse_vs_mle)
                    }
                    _ => None,
                };
            }
        }
        ModelSpec::Gmm { .. } => {}
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(combiner: CombinerChoice, n: usize, err_mle: f64, err_true: f64) -> TrialRecord {
        TrialRecord {
            model: "variance".into(),
            combiner,
            n,
            d: 10,
            trial: 0,
            seed: 0,
            theta_hat_f: vec![0.0],
            theta_hat_mle: vec![0.0],
            theta_star: vec![0.0],
            err_vs_mle: err_mle,
            err_vs_true: err_true,
            bias_vs_mle: vec![err_mle.sqrt()],
            flag: None,
        }
    }

    #[test]
    fn single_record_has_null_se() {
        let rows = aggregate(&[record(CombinerChoice::Kl, 100, 0.04, 0.09)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].trials, 1);
        assert_eq!(rows[0].mse_vs_mle, 0.04);
        assert!(rows[0].se_mse_vs_mle.is_none());
    }

    #[test]
    fn equal_records_have_zero_se() {
        let rows = aggregate(&[
            record(CombinerChoice::Kl, 100, 0.04, 0.09),
            record(CombinerChoice::Kl, 100, 0.04, 0.09),
        ])
        .unwrap();
        assert_eq!(rows[0].trials, 2);
        assert_eq!(rows[0].mse_vs_mle, 0.04);
        assert_eq!(rows[0].se_mse_vs_mle, Some(0.0));
    }

    #[test]
    fn aggregate_matches_hand_computation_and_sorts() {
        let recs = vec![
            record(CombinerChoice::Linear, 200, 0.02, 0.03),
            record(CombinerChoice::Kl, 100, 0.01, 0.02),
            record(CombinerChoice::Linear, 100, 0.04, 0.05),
            record(CombinerChoice::Linear, 100, 0.08, 0.07),
        ];
        let rows = aggregate(&recs).unwrap();
        // sorted by (model, combiner-name, n): kl before linear
        assert_eq!(rows[0].combiner, CombinerChoice::Kl);
        assert_eq!(rows[1].combiner, CombinerChoice::Linear);
        assert_eq!(rows[1].n, 100);
        assert_eq!(rows[2].n, 200);
        let lin100 = &rows[1];
        assert!((lin100.mse_vs_mle - 0.06).abs() < 1e-15);
        assert!((lin100.bias[0] - (0.04f64.sqrt() + 0.08f64.sqrt()) / 2.0).abs() < 1e-15);
        let mean = 0.06;
        let var = ((0.04f64 - mean).powi(2) + (0.08f64 - mean).powi(2)) / 1.0;
        assert!((lin100.se_mse_vs_mle.unwrap() - (var / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn flagged_records_are_excluded() {
        let mut bad = record(CombinerChoice::Kl, 100, 123.0, 456.0);
        bad.flag = Some("boom".into());
        let rows = aggregate(&[bad, record(CombinerChoice::Kl, 100, 0.04, 0.09)]).unwrap();
        assert_eq!(rows[0].trials, 1);
        assert_eq!(rows[0].mse_vs_mle, 0.04);
    }

    #[test]
    fn empty_aggregate_is_an_error() {
        assert!(aggregate(&[]).is_err());
    }
}
