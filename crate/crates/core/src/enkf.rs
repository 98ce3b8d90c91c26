//! Stochastic ensemble Kalman filter analysis on dimension-matched
//! ensembles, with multiplicative inflation and additive jitter.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::{MatchedMember, ReferencePartition};
use crate::observations::{ObservationOperator, ObservationSet};
use crate::seeding;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("invalid filter configuration: {0}")]
    Config(String),
    #[error("innovation covariance is singular (collapsed ensemble with exact observations?)")]
    Degenerate,
    #[error("ensemble shape mismatch: {0}")]
    Shape(String),
}

/// How the jitter amplitude's value range is gathered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterRange {
    /// Range over the values of all analysis members together.
    #[default]
    Pooled,
    /// Range over each member's own values.
    PerMember,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_ensemble: usize,
    pub inflation: f64,
    pub jitter: f64,
    pub jitter_range: JitterRange,
}

impl FilterConfig {
    pub fn new(n_ensemble: usize, inflation: f64, jitter: f64) -> Result<Self, FilterError> {
        let config = Self {
            n_ensemble,
            inflation,
            jitter,
            jitter_range: JitterRange::Pooled,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.n_ensemble < 2 {
            return Err(FilterError::Config(format!(
                "ensemble size {} is below 2",
                self.n_ensemble
            )));
        }
        if !(self.inflation.is_finite() && self.inflation >= 0.0) {
            return Err(FilterError::Config(format!(
                "inflation {} must be finite and non-negative",
                self.inflation
            )));
        }
        if !(0.0..=1.0).contains(&self.jitter) {
            return Err(FilterError::Config(format!(
                "jitter {} outside [0, 1]",
                self.jitter
            )));
        }
        Ok(())
    }
}

/// Members that share one state length `2M`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedEnsemble {
    members: Vec<MatchedMember>,
    partition: ReferencePartition,
}

impl MatchedEnsemble {
    pub fn new(
        members: Vec<MatchedMember>,
        partition: ReferencePartition,
    ) -> Result<Self, FilterError> {
        let len = 2 * partition.m();
        if let Some(bad) = members.iter().find(|m| m.state.len() != len) {
            return Err(FilterError::Shape(format!(
                "member of length {} in ensemble of length {len}",
                bad.state.len()
            )));
        }
        Ok(Self { members, partition })
    }

    pub fn members(&self) -> &[MatchedMember] {
        &self.members
    }

    pub fn members_mut(&mut self) -> &mut [MatchedMember] {
        &mut self.members
    }

    pub fn into_members(self) -> Vec<MatchedMember> {
        self.members
    }

    pub fn partition(&self) -> &ReferencePartition {
        &self.partition
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Ensemble matrix with one member per column.
    pub fn matrix(&self) -> DMatrix<f64> {
        let rows = 2 * self.partition.m();
        DMatrix::from_fn(rows, self.members.len(), |i, j| self.members[j].state[i])
    }

    /// Replace each member's state with the matching column of `e`.
    pub fn with_matrix(&self, e: &DMatrix<f64>) -> Result<Self, FilterError> {
        if e.ncols() != self.members.len() || e.nrows() != 2 * self.partition.m() {
            return Err(FilterError::Shape(format!(
                "{}x{} matrix for {} members",
                e.nrows(),
                e.ncols(),
                self.members.len()
            )));
        }
        let members = self
            .members
            .iter()
            .zip(e.column_iter())
            .map(|(m, col)| {
                m.with_state(col.iter().copied().collect())
                    .map_err(|err| FilterError::Shape(err.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            members,
            partition: self.partition,
        })
    }
}

/// Row means, computed as an offset from the first column so that a row of
/// identical entries has exactly that entry as its mean.
pub fn ensemble_mean(e: &DMatrix<f64>) -> DVector<f64> {
    let n = e.ncols() as f64;
    DVector::from_fn(e.nrows(), |i, _| {
        let base = e[(i, 0)];
        base + e.row(i).iter().map(|&x| x - base).sum::<f64>() / n
    })
}

/// Inflated anomalies `alpha (x_j - mean) / sqrt(Ne - 1)`.
pub fn forecast_anomalies(e: &DMatrix<f64>, alpha: f64) -> DMatrix<f64> {
    let mean = ensemble_mean(e);
    let scale = alpha / ((e.ncols() - 1) as f64).sqrt();
    DMatrix::from_fn(e.nrows(), e.ncols(), |i, j| scale * (e[(i, j)] - mean[i]))
}

/// Perturbed observation copies, one column per member, and the ensemble
/// observation error covariance built from the same perturbations.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedObservations {
    pub values: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

impl PerturbedObservations {
    /// From explicit perturbations, one column per member.
    pub fn from_noise(obs: &[f64], noise: DMatrix<f64>) -> Self {
        let scale = 1.0 / ((noise.ncols().max(2) - 1) as f64).sqrt();
        let yo = &noise * scale;
        let covariance = &yo * yo.transpose();
        let values = DMatrix::from_fn(noise.nrows(), noise.ncols(), |i, j| obs[i] + noise[(i, j)]);
        Self { values, covariance }
    }
}

/// Draw `y_j = y + eps_j` with `eps_j ~ N(0, sigma_o^2 I)`; member `j` uses its
/// own stream derived from `seed`.
pub fn perturb_observations(
    obs: &ObservationSet,
    n_ensemble: usize,
    seed: u64,
) -> PerturbedObservations {
    let p = obs.len();
    let mut noise = DMatrix::zeros(p, n_ensemble);
    for j in 0..n_ensemble {
        let mut rng = seeding::stream(seed, &[j as u64]);
        for i in 0..p {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise[(i, j)] = obs.sigma_o * z;
        }
    }
    PerturbedObservations::from_noise(&obs.values, noise)
}

/// Result of one analysis in matrix form.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub analysis: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    /// Euclidean norm of `y - h(mean)`.
    pub innovation_norm: f64,
}

fn observe_columns<F>(e: &DMatrix<f64>, observe: &F) -> DMatrix<f64>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let cols: Vec<DVector<f64>> = e
        .column_iter()
        .map(|c| {
            let x: Vec<f64> = c.iter().copied().collect();
            DVector::from_vec(observe(&x))
        })
        .collect();
    DMatrix::from_columns(&cols)
}

fn solve_spd(s: DMatrix<f64>, rhs: DMatrix<f64>) -> Result<DMatrix<f64>, FilterError> {
    let solution = match s.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => s.lu().solve(&rhs).ok_or(FilterError::Degenerate)?,
    };
    if solution.iter().all(|v| v.is_finite()) {
        Ok(solution)
    } else {
        Err(FilterError::Degenerate)
    }
}

/// Stochastic EnKF update of the ensemble matrix `forecast` (one member per
/// column).
///
/// With `X` the inflated state anomalies and `Y` the inflated predicted
/// observation anomalies `alpha (h(x_j) - h(mean)) / sqrt(Ne - 1)`, the gain is
/// `K = X Y^T (Y Y^T + R^e)^-1` and member `j` becomes
/// `x_j + K (y_j - h(x_j))`. Inflation only shapes the gain; members are
/// updated from their own forecasts.
pub fn analysis_matrix<F>(
    forecast: &DMatrix<f64>,
    perturbed: &PerturbedObservations,
    obs: &[f64],
    alpha: f64,
    observe: F,
) -> Result<AnalysisOutput, FilterError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let ne = forecast.ncols();
    if ne < 2 {
        return Err(FilterError::Shape(format!("{ne} member(s)")));
    }
    if perturbed.values.ncols() != ne || perturbed.values.nrows() != obs.len() {
        return Err(FilterError::Shape(format!(
            "{}x{} perturbed observations for {} observations and {ne} members",
            perturbed.values.nrows(),
            perturbed.values.ncols(),
            obs.len()
        )));
    }
    let x = forecast_anomalies(forecast, alpha);
    let hx = observe_columns(forecast, &observe);
    let mean = ensemble_mean(forecast);
    let h_mean = DVector::from_vec(observe(mean.as_slice()));
    let scale = alpha / ((ne - 1) as f64).sqrt();
    let y = DMatrix::from_fn(hx.nrows(), ne, |i, j| scale * (hx[(i, j)] - h_mean[i]));

    let s = &y * y.transpose() + &perturbed.covariance;
    // K^T = S^-1 Y X^T since S is symmetric
    let gain = solve_spd(s, &y * x.transpose())?.transpose();
    let innovations = &perturbed.values - &hx;
    let analysis = forecast + &gain * innovations;
    let innovation_norm = obs
        .iter()
        .zip(h_mean.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(AnalysisOutput {
        analysis,
        gain,
        innovation_norm,
    })
}

/// Analyse a matched ensemble, drawing observation perturbations from `seed`.
pub fn analysis(
    ensemble: &MatchedEnsemble,
    obs: &ObservationSet,
    config: &FilterConfig,
    operator: &ObservationOperator,
    seed: u64,
) -> Result<(MatchedEnsemble, AnalysisOutput), FilterError> {
    config.validate()?;
    if ensemble.len() != config.n_ensemble {
        return Err(FilterError::Shape(format!(
            "{} members but n_ensemble = {}",
            ensemble.len(),
            config.n_ensemble
        )));
    }
    let perturbed = perturb_observations(obs, ensemble.len(), seed);
    let out = analysis_matrix(
        &ensemble.matrix(),
        &perturbed,
        &obs.values,
        config.inflation,
        |x| operator.apply(x),
    )?;
    Ok((ensemble.with_matrix(&out.analysis)?, out))
}

fn value_range<'a>(values: impl IntoIterator<Item = &'a f64>) -> f64 {
    let (lo, hi) = values
        .into_iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi >= lo {
        hi - lo
    } else {
        0.0
    }
}

/// Jitter standard deviation `alpha_j * (max u - min u)` over `u_blocks`.
pub fn jitter_sigma<'a>(u_blocks: impl IntoIterator<Item = &'a [f64]>, alpha_j: f64) -> f64 {
    alpha_j * value_range(u_blocks.into_iter().flatten())
}

/// Add `N(0, sigma^2)` noise to every value.
pub fn apply_jitter<R: Rng + ?Sized>(u_block: &mut [f64], sigma: f64, rng: &mut R) {
    if sigma == 0.0 {
        return;
    }
    for v in u_block {
        let z: f64 = StandardNormal.sample(rng);
        *v += sigma * z;
    }
}

/// Jitter the value blocks of all members; member `j` draws from its own
/// stream derived from `seed`. Position blocks are never touched.
pub fn jitter_ensemble(members: &mut [MatchedMember], alpha_j: f64, range: JitterRange, seed: u64) {
    if alpha_j == 0.0 {
        return;
    }
    let pooled = jitter_sigma(members.iter().map(|m| m.u_block()), alpha_j);
    for (j, member) in members.iter_mut().enumerate() {
        let sigma = match range {
            JitterRange::Pooled => pooled,
            JitterRange::PerMember => jitter_sigma([member.u_block()], alpha_j),
        };
        let mut rng = seeding::stream(seed, &[j as u64]);
        apply_jitter(member.u_block_mut(), sigma, &mut rng);
    }
}
