//! Evaluation diagnostics: errors of the ensemble mean, derivative errors,
//! spread, member-error fidelity statistics and covariance blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::ReferencePartition;
use crate::enkf::forecast_anomalies;
use crate::interp;
use crate::models::ModelState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no data")]
    Empty,
}

/// A member interpolated periodically onto `grid`.
pub fn on_grid(nodes: &[f64], values: &[f64], length: f64, grid: &[f64]) -> Vec<f64> {
    interp::periodic_linear_many(nodes, values, length, grid)
}

/// Pointwise mean over members of their interpolants on the reference nodes.
pub fn mean_on_reference(members: &[ModelState], partition: &ReferencePartition) -> Vec<f64> {
    let fields = members_on_reference(members, partition);
    pointwise_mean(&fields)
}

/// Each member interpolated onto the reference nodes.
pub fn members_on_reference(
    members: &[ModelState],
    partition: &ReferencePartition,
) -> Vec<Vec<f64>> {
    let grid = partition.gammas();
    members
        .iter()
        .map(|m| on_grid(m.nodes(), &m.u, partition.length(), &grid))
        .collect()
}

pub fn pointwise_mean(fields: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = fields.first() else {
        return Vec::new();
    };
    let n = fields.len() as f64;
    (0..first.len())
        .map(|i| fields.iter().map(|f| f[i]).sum::<f64>() / n)
        .collect()
}

/// Root mean squared pointwise difference.
pub fn rmse(field: &[f64], truth: &[f64]) -> Result<f64, MetricsError> {
    if field.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(field.len(), truth.len()));
    }
    if field.is_empty() {
        return Err(MetricsError::Empty);
    }
    let sum: f64 = field.iter().zip(truth).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((sum / field.len() as f64).sqrt())
}

/// Periodic central difference `(f[i+1] - f[i-1]) / (2 spacing)`.
pub fn derivative_field(values: &[f64], partition: &ReferencePartition) -> Vec<f64> {
    let m = values.len();
    let h2 = 2.0 * partition.spacing();
    (0..m)
        .map(|i| (values[(i + 1) % m] - values[(i + m - 1) % m]) / h2)
        .collect()
}

/// Ensemble standard deviation about the mean, root-mean-squared over
/// reference nodes.
pub fn spread(fields: &[Vec<f64>]) -> f64 {
    let ne = fields.len();
    if ne < 2 {
        return 0.0;
    }
    let mean = pointwise_mean(fields);
    let var_sum: f64 = mean
        .iter()
        .enumerate()
        .map(|(i, mu)| fields.iter().map(|f| (f[i] - mu).powi(2)).sum::<f64>() / (ne - 1) as f64)
        .sum();
    (var_sum / mean.len() as f64).sqrt()
}

/// Scores of one ensemble against the truth at one time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub time: f64,
    pub rmse_analysis_mean: f64,
    pub rmse_derivative: f64,
    pub spread: f64,
    /// Member minus truth on the reference nodes, one row per member.
    #[serde(skip)]
    pub per_member_errors: Vec<Vec<f64>>,
}

impl DiagnosticRecord {
    pub fn evaluate(
        time: f64,
        members: &[ModelState],
        truth: &ModelState,
        partition: &ReferencePartition,
    ) -> Result<Self, MetricsError> {
        if members.is_empty() {
            return Err(MetricsError::Empty);
        }
        let grid = partition.gammas();
        let truth_on_grid = on_grid(truth.nodes(), &truth.u, partition.length(), &grid);
        let fields = members_on_reference(members, partition);
        let mean = pointwise_mean(&fields);
        let per_member_errors = fields
            .iter()
            .map(|f| f.iter().zip(&truth_on_grid).map(|(a, b)| a - b).collect())
            .collect();
        Ok(Self {
            time,
            rmse_analysis_mean: rmse(&mean, &truth_on_grid)?,
            rmse_derivative: rmse(
                &derivative_field(&mean, partition),
                &derivative_field(&truth_on_grid, partition),
            )?,
            spread: spread(&fields),
            per_member_errors,
        })
    }
}

/// Member-averaged, time-averaged spatial statistics of member errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub sigma_ens: f64,
    /// `None` when every spatial variance was zero.
    pub k_ens: Option<f64>,
    /// `(1/M) sqrt(sum d^2)` averaged over members and times.
    pub rmse_ens: f64,
    /// `sqrt((1/M) sum d^2)` averaged over members and times.
    pub rmse_ens_conventional: f64,
    /// Member-time pairs left out of `k_ens` for zero variance.
    pub kurtosis_skipped: usize,
}

/// Fidelity statistics from member errors indexed `[time][member][node]`.
pub fn ensemble_fidelity(errors: &[Vec<Vec<f64>>]) -> Result<Fidelity, MetricsError> {
    let mut count = 0usize;
    let mut var_sum = 0.0;
    let mut rmse_sum = 0.0;
    let mut rmse_conv_sum = 0.0;
    let mut kurt_sum = 0.0;
    let mut kurt_count = 0usize;
    for snapshot in errors {
        for d in snapshot {
            if d.is_empty() {
                return Err(MetricsError::Empty);
            }
            let m = d.len() as f64;
            let mean = d.iter().sum::<f64>() / m;
            let m2 = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m;
            let m4 = d.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / m;
            let sq = d.iter().map(|x| x * x).sum::<f64>();
            var_sum += m2;
            rmse_sum += sq.sqrt() / m;
            rmse_conv_sum += (sq / m).sqrt();
            if m2 > 0.0 {
                kurt_sum += m4 / (m2 * m2);
                kurt_count += 1;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(MetricsError::Empty);
    }
    let n = count as f64;
    Ok(Fidelity {
        sigma_ens: var_sum / n,
        k_ens: (kurt_count > 0).then(|| kurt_sum / kurt_count as f64),
        rmse_ens: rmse_sum / n,
        rmse_ens_conventional: rmse_conv_sum / n,
        kurtosis_skipped: count - kurt_count,
    })
}

/// Blocks of `X X^T` for a `2M x Ne` matched ensemble matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlocks {
    pub uu: DMatrix<f64>,
    pub uz: DMatrix<f64>,
    pub zz: DMatrix<f64>,
    pub diag_uz: Vec<f64>,
}

pub fn covariance_blocks(ensemble: &DMatrix<f64>, alpha: f64) -> CovarianceBlocks {
    let m = ensemble.nrows() / 2;
    let x = forecast_anomalies(ensemble, alpha);
    let c = &x * x.transpose();
    let uz = c.view((0, m), (m, m)).into_owned();
    CovarianceBlocks {
        uu: c.view((0, 0), (m, m)).into_owned(),
        diag_uz: uz.diagonal().iter().copied().collect(),
        uz,
        zz: c.view((m, m), (m, m)).into_owned(),
    }
}

/// Sample Pearson correlation; `None` if either input is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}
