//! Twin experiments: nature run, ensemble initialisation, forecast and
//! analysis cycling, tuning sweeps and sensitivity suites.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::{self, DimensionError, GhostSpread, MatchedMember, ReferencePartition};
use crate::enkf::{self, FilterConfig, FilterError, JitterRange, MatchedEnsemble};
use crate::interp;
use crate::mesh::{divisions, AdaptiveMesh, MeshError, MeshTolerances};
use crate::metrics::{self, DiagnosticRecord, Fidelity, MetricsError};
use crate::models::{self, ModelError, ModelKind, ModelSpec, ModelState};
use crate::observations::{self, ObservationError, ObservationOperator, ObservationSet};
use crate::seeding;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("mesh: {0}")]
    Mesh(#[from] MeshError),
    #[error("dimension matching: {0}")]
    Dimension(#[from] DimensionError),
    #[error("filter: {0}")]
    Filter(#[from] FilterError),
    #[error("observations: {0}")]
    Observation(#[from] ObservationError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("config parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    Free,
    Hr,
    Hra,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Self::Free => "FREE",
            Self::Hr => "HR",
            Self::Hra => "HRA",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "FREE" => Ok(Self::Free),
            "HR" => Ok(Self::Hr),
            "HRA" => Ok(Self::Hra),
            other => Err(format!(
                "unknown scheme {other:?} (expected FREE, HR or HRA)"
            )),
        }
    }
}

/// Model section; unset values fall back to the preset for `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub viscosity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta2: Option<f64>,
    #[serde(default = "default_true")]
    pub advect_nodes: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn preset(kind: ModelKind) -> Self {
        Self {
            kind,
            viscosity: None,
            dt: None,
            delta1: None,
            delta2: None,
            advect_nodes: true,
        }
    }

    pub fn spec(&self) -> Result<ModelSpec, ExperimentError> {
        let base = ModelSpec::preset(self.kind);
        let delta1 = self.delta1.unwrap_or(base.tolerances.delta1());
        let delta2 = self.delta2.unwrap_or(base.tolerances.delta2());
        let tolerances = MeshTolerances::new(delta1, delta2, self.kind.domain_length())?;
        let mut spec = ModelSpec::new(
            self.kind,
            self.viscosity.unwrap_or(base.viscosity),
            self.dt.unwrap_or(base.dt),
            tolerances,
        )?;
        spec.advect_nodes = self.advect_nodes;
        Ok(spec)
    }
}

/// Seeds of every random stream in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub nature: u64,
    pub ensemble: u64,
    pub obs_noise: u64,
    pub ghost: u64,
    pub jitter: u64,
    pub perturbed_obs: u64,
}

impl Seeds {
    /// All seeds derived from one base seed.
    pub fn from_base(base: u64) -> Self {
        let s = |tag: u64| seeding::derive(base, &[tag]);
        Self {
            nature: s(1),
            ensemble: s(2),
            obs_noise: s(3),
            ghost: s(4),
            jitter: s(5),
            perturbed_obs: s(6),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub alpha_j: Vec<f64>,
}

impl SweepGrid {
    pub fn preset(kind: ModelKind) -> Self {
        let alpha_j_max = match kind {
            ModelKind::Bgm => 0.1,
            ModelKind::Ksm => 0.5,
        };
        Self {
            alpha: linspace(0.0, 1.6, 9),
            alpha_j: linspace(0.0, alpha_j_max, 6),
        }
    }
}

/// Parameter values for the three sensitivity experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitivityGrid {
    pub ensemble: Vec<usize>,
    pub mesh: Vec<usize>,
    pub obs_error: Vec<f64>,
}

impl SensitivityGrid {
    pub fn preset(kind: ModelKind) -> Self {
        Self {
            ensemble: (2..=9).map(|k| 10 * k).collect(),
            mesh: (5..=9).map(|k| 10 * k).collect(),
            obs_error: match kind {
                ModelKind::Bgm => linspace(0.01, 0.07, 7),
                ModelKind::Ksm => linspace(0.6, 2.0, 8),
            },
        }
    }
}

/// `n` evenly spaced values from `a` to `b`, rounded to 12 decimals.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n)
        .map(|k| {
            let v = a + (b - a) * k as f64 / (n - 1) as f64;
            (v * 1e12).round() / 1e12
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub scheme: Scheme,
    pub n_ensemble: usize,
    /// Node count of every member's initial uniform mesh.
    pub initial_mesh_size: usize,
    pub sigma_o: f64,
    pub n_obs: usize,
    pub assim_interval: f64,
    /// Length of the assimilation period after spin-up.
    pub duration: f64,
    /// Free nature integration before the ensemble is created.
    #[serde(default)]
    pub spin_up: f64,
    /// Time averages use analysis times strictly after this model time.
    pub averaging_start: f64,
    pub alpha: f64,
    pub alpha_j: f64,
    #[serde(default)]
    pub jitter_range: JitterRange,
    #[serde(default)]
    pub ghost_spread_is_variance: bool,
    /// Initial ensemble perturbation; defaults to `sigma_o`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_pert: Option<f64>,
    /// Nature run node count; defaults to `L / delta1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nature_nodes: Option<usize>,
    /// Standard deviation of noise added to the nature initial condition.
    #[serde(default)]
    pub nature_perturbation: f64,
    /// Dump forecast covariance blocks at every analysis time.
    #[serde(default)]
    pub dump_covariance: bool,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<SensitivityGrid>,
}

impl ExperimentConfig {
    pub fn bgm() -> Self {
        Self {
            model: ModelConfig::preset(ModelKind::Bgm),
            scheme: Scheme::Hra,
            n_ensemble: 30,
            initial_mesh_size: 70,
            sigma_o: 0.01,
            n_obs: 10,
            assim_interval: 0.05,
            duration: 2.0,
            spin_up: 0.0,
            averaging_start: 1.0,
            alpha: 1.0,
            alpha_j: 0.0,
            jitter_range: JitterRange::Pooled,
            ghost_spread_is_variance: false,
            sigma_pert: None,
            nature_nodes: None,
            nature_perturbation: 0.0,
            dump_covariance: false,
            seeds: Seeds::default(),
            sweep: None,
            sensitivity: None,
        }
    }

    pub fn ksm() -> Self {
        Self {
            model: ModelConfig::preset(ModelKind::Ksm),
            n_ensemble: 40,
            sigma_o: 0.798,
            n_obs: 20,
            duration: 5.0,
            spin_up: 20.0,
            averaging_start: 21.0,
            ..Self::bgm()
        }
    }

    pub fn preset(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Bgm => Self::bgm(),
            ModelKind::Ksm => Self::ksm(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        toml::from_str(text).map_err(|e| ExperimentError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        self.sweep
            .clone()
            .unwrap_or_else(|| SweepGrid::preset(self.model.kind))
    }

    pub fn sensitivity_grid(&self) -> SensitivityGrid {
        self.sensitivity
            .clone()
            .unwrap_or_else(|| SensitivityGrid::preset(self.model.kind))
    }

    pub fn filter(&self) -> FilterConfig {
        FilterConfig {
            n_ensemble: self.n_ensemble,
            inflation: self.alpha,
            jitter: self.alpha_j,
            jitter_range: self.jitter_range,
        }
    }

    pub fn ghost_spread(&self) -> GhostSpread {
        if self.ghost_spread_is_variance {
            GhostSpread::Variance
        } else {
            GhostSpread::StdDev
        }
    }

    pub fn cycles(&self) -> usize {
        (self.duration / self.assim_interval).round() as usize
    }

    /// Check every invariant without running anything.
    pub fn validate(&self) -> Result<ModelSpec, ExperimentError> {
        let bad = |msg: String| Err(ExperimentError::Config(msg));
        let spec = self.model.spec()?;
        self.filter().validate()?;
        if !(self.sigma_o.is_finite() && self.sigma_o >= 0.0) {
            return bad(format!("sigma_o = {} must be non-negative", self.sigma_o));
        }
        if let Some(s) = self.sigma_pert {
            if !(s.is_finite() && s >= 0.0) {
                return bad(format!("sigma_pert = {s} must be non-negative"));
            }
        }
        if !(self.nature_perturbation.is_finite() && self.nature_perturbation >= 0.0) {
            return bad("nature_perturbation must be non-negative".into());
        }
        if self.n_obs == 0 {
            return bad("n_obs must be positive".into());
        }
        let whole = |x: f64, d: f64| {
            let n = (x / d).round();
            n >= 0.0 && (n * d - x).abs() <= 1e-9 * x.max(d)
        };
        if !(self.assim_interval > 0.0 && whole(self.assim_interval, spec.dt)) {
            return bad(format!(
                "assim_interval = {} is not a multiple of dt = {}",
                self.assim_interval, spec.dt
            ));
        }
        if !(self.duration > 0.0 && whole(self.duration, self.assim_interval)) {
            return bad(format!(
                "duration = {} is not a positive multiple of assim_interval = {}",
                self.duration, self.assim_interval
            ));
        }
        if !(self.spin_up >= 0.0 && whole(self.spin_up, spec.dt)) {
            return bad(format!(
                "spin_up = {} is not a multiple of dt",
                self.spin_up
            ));
        }
        if !self.averaging_start.is_finite() {
            return bad("averaging_start must be finite".into());
        }
        if self.averaging_start >= self.spin_up + self.duration {
            return bad(format!(
                "averaging_start = {} leaves no analysis times",
                self.averaging_start
            ));
        }
        AdaptiveMesh::uniform(self.initial_mesh_size, spec.tolerances)
            .ok()
            .filter(|m| m.is_valid())
            .ok_or_else(|| {
                ExperimentError::Config(format!(
                    "initial_mesh_size = {} does not give a valid uniform mesh",
                    self.initial_mesh_size
                ))
            })?;
        let nature = self.nature_node_count(&spec)?;
        if !AdaptiveMesh::uniform(nature, spec.tolerances)?.is_valid() {
            return bad(format!(
                "nature_nodes = {nature} does not give a valid mesh"
            ));
        }
        if let Some(grid) = &self.sweep {
            if grid.alpha.is_empty() || grid.alpha_j.is_empty() {
                return bad("sweep grids must be non-empty".into());
            }
            for &a in &grid.alpha {
                if !(a.is_finite() && a >= 0.0) {
                    return bad(format!("sweep alpha {a} must be non-negative"));
                }
            }
            for &aj in &grid.alpha_j {
                if !(0.0..=1.0).contains(&aj) {
                    return bad(format!("sweep alpha_j {aj} outside [0, 1]"));
                }
            }
        }
        if let Some(grid) = &self.sensitivity {
            if grid.ensemble.iter().any(|&n| n < 2) {
                return bad("sensitivity ensemble sizes must be at least 2".into());
            }
            for &n in &grid.mesh {
                let ok = AdaptiveMesh::uniform(n, spec.tolerances).is_ok_and(|m| m.is_valid());
                if !ok {
                    return bad(format!(
                        "sensitivity mesh size {n} is not a valid uniform mesh"
                    ));
                }
            }
            if grid.obs_error.iter().any(|&s| !(s.is_finite() && s >= 0.0)) {
                return bad("sensitivity obs_error values must be non-negative".into());
            }
        }
        Ok(spec)
    }

    fn nature_node_count(&self, spec: &ModelSpec) -> Result<usize, ExperimentError> {
        match self.nature_nodes {
            Some(n) => Ok(n),
            None => divisions(spec.domain_length(), spec.tolerances.delta1())
                .ok_or_else(|| ExperimentError::Config("delta1 does not divide the domain".into())),
        }
    }

    /// Short identifier built from the swept parameters.
    pub fn run_id(&self) -> String {
        format!(
            "{}-{}-ne{}-im{}-so{}-a{}-aj{}",
            self.model.kind.name(),
            self.scheme.name().to_ascii_lowercase(),
            self.n_ensemble,
            self.initial_mesh_size,
            self.sigma_o,
            self.alpha,
            self.alpha_j
        )
    }
}

/// Nature state at the start of assimilation.
pub fn nature_initial_state(
    config: &ExperimentConfig,
    spec: &ModelSpec,
) -> Result<ModelState, ExperimentError> {
    let n = config.nature_node_count(spec)?;
    let mut state = models::initial_state(spec, n)?;
    if config.nature_perturbation > 0.0 {
        let mut rng = seeding::stream(config.seeds.nature, &[]);
        for v in &mut state.u {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += config.nature_perturbation * z;
        }
    }
    if config.spin_up > 0.0 {
        state = models::integrate(&state, spec, config.spin_up)?;
    }
    Ok(state)
}

/// Members on uniform meshes of `initial_mesh_size` nodes carrying the
/// nature state plus independent Gaussian noise.
pub fn init_ensemble(
    nature_ic: &ModelState,
    config: &ExperimentConfig,
    spec: &ModelSpec,
) -> Result<Vec<ModelState>, ExperimentError> {
    let sigma = config.sigma_pert.unwrap_or(config.sigma_o);
    let length = spec.domain_length();
    let mesh = AdaptiveMesh::uniform(config.initial_mesh_size, spec.tolerances)?;
    if !mesh.is_valid() {
        return Err(ExperimentError::Config(format!(
            "initial_mesh_size = {} does not give a valid uniform mesh",
            config.initial_mesh_size
        )));
    }
    let base = interp::periodic_linear_many(nature_ic.nodes(), &nature_ic.u, length, mesh.nodes());
    (0..config.n_ensemble)
        .map(|j| {
            let mut rng = seeding::stream(config.seeds.ensemble, &[j as u64]);
            let u = base
                .iter()
                .map(|&v| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v + sigma * z
                })
                .collect();
            Ok(ModelState::new(mesh.clone(), u, nature_ic.t)?)
        })
        .collect()
}

/// Time-averaged scores of one phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub rmse: f64,
    pub rmse_derivative: f64,
    pub spread: f64,
    pub fidelity: Fidelity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub forecast: PhaseSummary,
    pub analysis: PhaseSummary,
    /// Analysis times inside the averaging window.
    pub averaged_cycles: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub time: f64,
    pub forecast: DiagnosticRecord,
    pub analysis: DiagnosticRecord,
    /// Correlation of the forecast `u`-`z` covariance diagonal with the
    /// forecast-mean gradient (augmented scheme only).
    pub cov_gradient_corr: Option<f64>,
    pub innovation_norm: Option<f64>,
    pub ghosts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub time: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub config: ExperimentConfig,
    pub cycles: Vec<CycleRecord>,
    pub summary: Option<RunSummary>,
    pub failure: Option<RunFailure>,
    pub wall_clock_s: f64,
}

impl RunRecord {
    /// Time-averaged analysis-mean RMSE, if the run completed.
    pub fn rmse(&self) -> Option<f64> {
        self.summary.map(|s| s.analysis.rmse)
    }
}

/// What an observer sees at each analysis time.
pub struct CycleView<'a> {
    pub cycle: usize,
    pub time: f64,
    pub truth: &'a ModelState,
    pub observations: &'a ObservationSet,
    pub forecast: &'a [ModelState],
    pub matched_forecast: Option<&'a MatchedEnsemble>,
    pub matched_analysis: Option<&'a MatchedEnsemble>,
    pub analysis: &'a [ModelState],
}

/// Run a twin experiment. Solver blow-ups and filter failures end the run
/// and are recorded rather than returned as errors.
pub fn run_twin(config: &ExperimentConfig) -> Result<RunRecord, ExperimentError> {
    run_twin_with(config, |_| {})
}

pub fn run_twin_with<F>(
    config: &ExperimentConfig,
    mut observer: F,
) -> Result<RunRecord, ExperimentError>
where
    F: FnMut(&CycleView<'_>),
{
    let started = Instant::now();
    let spec = config.validate()?;
    let partition = ReferencePartition::new(&spec.tolerances)?;
    let mut cycles = Vec::with_capacity(config.cycles());
    let failure = match cycle_loop(config, &spec, &partition, &mut cycles, &mut observer) {
        Ok(()) => None,
        Err((time, err)) => Some(RunFailure {
            time,
            message: err.to_string(),
        }),
    };
    let summary = if failure.is_none() {
        Some(summarise(&cycles, config.averaging_start)?)
    } else {
        None
    };
    for c in &mut cycles {
        c.forecast.per_member_errors = Vec::new();
        c.analysis.per_member_errors = Vec::new();
    }
    Ok(RunRecord {
        id: config.run_id(),
        config: config.clone(),
        cycles,
        summary,
        failure,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

type Failure = (f64, ExperimentError);

fn cycle_loop<F>(
    config: &ExperimentConfig,
    spec: &ModelSpec,
    partition: &ReferencePartition,
    records: &mut Vec<CycleRecord>,
    observer: &mut F,
) -> Result<(), Failure>
where
    F: FnMut(&CycleView<'_>),
{
    let fail0 = |e: ExperimentError| (config.spin_up, e);
    let mut truth = nature_initial_state(config, spec).map_err(fail0)?;
    let mut members = init_ensemble(&truth, config, spec).map_err(fail0)?;
    let filter = config.filter();
    let length = spec.domain_length();
    let locations = observations::regular_locations(config.n_obs, length);
    let operator = match config.scheme {
        Scheme::Hr => Some(ObservationOperator::hr(*partition, &locations)),
        Scheme::Hra => Some(ObservationOperator::hra(length, &locations)),
        Scheme::Free => None,
    }
    .transpose()
    .map_err(|e| fail0(e.into()))?;
    let t0 = truth.t;

    for cycle in 1..=config.cycles() {
        let time = t0 + cycle as f64 * config.assim_interval;
        let fail = |e: ExperimentError| (time, e);
        let c = cycle as u64;

        truth =
            models::integrate(&truth, spec, config.assim_interval).map_err(|e| fail(e.into()))?;
        truth.t = time;
        members = members
            .par_iter()
            .map(|m| {
                let mut next = models::integrate(m, spec, config.assim_interval)?;
                next.t = time;
                Ok(next)
            })
            .collect::<Result<_, ModelError>>()
            .map_err(|e| fail(e.into()))?;

        let mut obs_rng = seeding::stream(config.seeds.obs_noise, &[c]);
        let obs =
            observations::generate_observations(&truth, config.n_obs, config.sigma_o, &mut obs_rng)
                .map_err(|e| fail(e.into()))?;
        let forecast_diag = DiagnosticRecord::evaluate(time, &members, &truth, partition)
            .map_err(|e| fail(e.into()))?;

        let Some(operator) = operator.as_ref() else {
            observer(&CycleView {
                cycle,
                time,
                truth: &truth,
                observations: &obs,
                forecast: &members,
                matched_forecast: None,
                matched_analysis: None,
                analysis: &members,
            });
            records.push(CycleRecord {
                cycle,
                time,
                analysis: forecast_diag.clone(),
                forecast: forecast_diag,
                cov_gradient_corr: None,
                innovation_norm: None,
                ghosts: 0,
            });
            continue;
        };

        let matched: Vec<MatchedMember> = members
            .par_iter()
            .enumerate()
            .map(|(j, m)| match config.scheme {
                Scheme::Hr => dimension::match_hr(m, partition),
                _ => {
                    let mut rng = seeding::stream(config.seeds.ghost, &[c, j as u64]);
                    dimension::match_hra(m, partition, config.ghost_spread(), &mut rng)
                }
            })
            .collect::<Result<_, _>>()
            .map_err(|e| fail(e.into()))?;
        let ghosts = matched.iter().map(MatchedMember::ghost_count).sum();
        let forecast_ens = MatchedEnsemble::new(matched, *partition).map_err(|e| fail(e.into()))?;

        let cov_gradient_corr = (config.scheme == Scheme::Hra)
            .then(|| {
                let blocks = metrics::covariance_blocks(&forecast_ens.matrix(), 1.0);
                let mean = metrics::mean_on_reference(&members, partition);
                metrics::correlation(
                    &blocks.diag_uz,
                    &metrics::derivative_field(&mean, partition),
                )
            })
            .flatten();

        let seed = seeding::derive(config.seeds.perturbed_obs, &[c]);
        let (mut analysis_ens, out) = enkf::analysis(&forecast_ens, &obs, &filter, operator, seed)
            .map_err(|e| fail(e.into()))?;
        enkf::jitter_ensemble(
            analysis_ens.members_mut(),
            filter.jitter,
            filter.jitter_range,
            seeding::derive(config.seeds.jitter, &[c]),
        );
        let returned: Vec<ModelState> = analysis_ens
            .members()
            .par_iter()
            .map(|m| match config.scheme {
                Scheme::Hr => dimension::return_hr(m),
                _ => dimension::return_hra(m),
            })
            .collect::<Result<_, _>>()
            .map_err(|e| fail(e.into()))?;
        let analysis_diag = DiagnosticRecord::evaluate(time, &returned, &truth, partition)
            .map_err(|e| fail(e.into()))?;

        observer(&CycleView {
            cycle,
            time,
            truth: &truth,
            observations: &obs,
            forecast: &members,
            matched_forecast: Some(&forecast_ens),
            matched_analysis: Some(&analysis_ens),
            analysis: &returned,
        });
        records.push(CycleRecord {
            cycle,
            time,
            forecast: forecast_diag,
            analysis: analysis_diag,
            cov_gradient_corr,
            innovation_norm: Some(out.innovation_norm),
            ghosts,
        });
        members = returned;
    }
    Ok(())
}

fn summarise(cycles: &[CycleRecord], start: f64) -> Result<RunSummary, ExperimentError> {
    let window: Vec<&CycleRecord> = cycles.iter().filter(|c| c.time > start + 1e-9).collect();
    if window.is_empty() {
        return Err(ExperimentError::Config(
            "no analysis times inside the averaging window".into(),
        ));
    }
    let phase =
        |pick: fn(&CycleRecord) -> &DiagnosticRecord| -> Result<PhaseSummary, ExperimentError> {
            let n = window.len() as f64;
            let avg = |f: fn(&DiagnosticRecord) -> f64| {
                window.iter().map(|c| f(pick(c))).sum::<f64>() / n
            };
            let errors: Vec<Vec<Vec<f64>>> = window
                .iter()
                .map(|c| pick(c).per_member_errors.clone())
                .collect();
            Ok(PhaseSummary {
                rmse: avg(|d| d.rmse_analysis_mean),
                rmse_derivative: avg(|d| d.rmse_derivative),
                spread: avg(|d| d.spread),
                fidelity: metrics::ensemble_fidelity(&errors)?,
            })
        };
    Ok(RunSummary {
        forecast: phase(|c| &c.forecast)?,
        analysis: phase(|c| &c.analysis)?,
        averaged_cycles: window.len(),
    })
}

/// One cell of a tuning sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub alpha: f64,
    pub alpha_j: f64,
    pub summary: Option<RunSummary>,
    pub failure: Option<RunFailure>,
}

impl SweepCell {
    pub fn rmse(&self) -> Option<f64> {
        self.summary.map(|s| s.analysis.rmse)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub template: ExperimentConfig,
    pub cells: Vec<SweepCell>,
    /// Index into `cells` of the lowest analysis RMSE.
    pub best: Option<usize>,
}

impl SweepResult {
    pub fn best_cell(&self) -> Option<&SweepCell> {
        self.best.map(|i| &self.cells[i])
    }

    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failure.is_some()).count()
    }
}

/// Index of the lowest RMSE, ties going to smaller `alpha_j`, then smaller
/// `alpha`. Failed cells are skipped.
pub fn argmin(cells: &[SweepCell]) -> Option<usize> {
    cells
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.rmse().filter(|r| r.is_finite()).map(|r| (i, r, c)))
        .min_by(|a, b| {
            a.1.total_cmp(&b.1)
                .then(a.2.alpha_j.total_cmp(&b.2.alpha_j))
                .then(a.2.alpha.total_cmp(&b.2.alpha))
        })
        .map(|(i, _, _)| i)
}

fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, ExperimentError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| ExperimentError::Config(format!("thread pool: {e}")))
}

/// Full-factorial `(alpha, alpha_j)` sweep sharing the template's seeds.
pub fn sweep(
    template: &ExperimentConfig,
    grid: &SweepGrid,
    jobs: Option<usize>,
) -> Result<SweepResult, ExperimentError> {
    template.validate()?;
    if grid.alpha.is_empty() || grid.alpha_j.is_empty() {
        return Err(ExperimentError::Config(
            "sweep grids must be non-empty".into(),
        ));
    }
    let configs: Vec<ExperimentConfig> = grid
        .alpha_j
        .iter()
        .flat_map(|&aj| {
            grid.alpha.iter().map(move |&a| ExperimentConfig {
                alpha: a,
                alpha_j: aj,
                ..template.clone()
            })
        })
        .collect();
    let cells = pool(jobs)?.install(|| {
        configs
            .par_iter()
            .map(|c| {
                let record = run_twin(c)?;
                Ok(SweepCell {
                    alpha: c.alpha,
                    alpha_j: c.alpha_j,
                    summary: record.summary,
                    failure: record.failure,
                })
            })
            .collect::<Result<Vec<_>, ExperimentError>>()
    })?;
    Ok(SweepResult {
        template: template.clone(),
        best: argmin(&cells),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SensitivityKind {
    Ensemble,
    Mesh,
    ObsError,
}

impl SensitivityKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Ensemble => "ensemble",
            Self::Mesh => "mesh",
            Self::ObsError => "obs-error",
        }
    }

    /// Template for this row with the fixed parameters of the other two.
    pub fn base_config(self, base: &ExperimentConfig) -> ExperimentConfig {
        let kind = base.model.kind;
        let (n_ensemble, sigma_o) = match (self, kind) {
            (Self::Ensemble, ModelKind::Bgm) => (base.n_ensemble, 0.01),
            (_, ModelKind::Bgm) => (30, 0.01),
            (Self::Ensemble, ModelKind::Ksm) => (base.n_ensemble, 0.798),
            (_, ModelKind::Ksm) => (40, 0.798),
        };
        ExperimentConfig {
            n_ensemble,
            initial_mesh_size: 70,
            sigma_o,
            ..base.clone()
        }
    }

    pub fn values(self, grid: &SensitivityGrid) -> Vec<f64> {
        match self {
            Self::Ensemble => grid.ensemble.iter().map(|&n| n as f64).collect(),
            Self::Mesh => grid.mesh.iter().map(|&n| n as f64).collect(),
            Self::ObsError => grid.obs_error.clone(),
        }
    }

    pub fn apply(self, config: &mut ExperimentConfig, value: f64) {
        match self {
            Self::Ensemble => config.n_ensemble = value as usize,
            Self::Mesh => config.initial_mesh_size = value as usize,
            Self::ObsError => config.sigma_o = value,
        }
    }
}

impl std::str::FromStr for SensitivityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ensemble" => Ok(Self::Ensemble),
            "mesh" => Ok(Self::Mesh),
            "obs-error" | "obs_error" => Ok(Self::ObsError),
            other => Err(format!(
                "unknown sensitivity experiment {other:?} (expected ensemble, mesh or obs-error)"
            )),
        }
    }
}

/// Best scores of one scheme at one parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub parameter: f64,
    pub scheme: Scheme,
    pub alpha: Option<f64>,
    pub alpha_j: Option<f64>,
    pub rmse: Option<f64>,
    pub rmse_derivative: Option<f64>,
    pub failures: usize,
}

/// For each parameter value: one free run and a tuning sweep per filter
/// scheme, all on the same nature run and observations.
pub fn sensitivity_suite(
    base: &ExperimentConfig,
    kind: SensitivityKind,
    jobs: Option<usize>,
) -> Result<Vec<SensitivityRow>, ExperimentError> {
    let template = kind.base_config(base);
    let grid = base.sweep_grid();
    let mut rows = Vec::new();
    for value in kind.values(&base.sensitivity_grid()) {
        let mut cfg = template.clone();
        kind.apply(&mut cfg, value);
        let free = run_twin(&ExperimentConfig {
            scheme: Scheme::Free,
            ..cfg.clone()
        })?;
        rows.push(SensitivityRow {
            parameter: value,
            scheme: Scheme::Free,
            alpha: None,
            alpha_j: None,
            rmse: free.summary.map(|s| s.analysis.rmse),
            rmse_derivative: free.summary.map(|s| s.analysis.rmse_derivative),
            failures: usize::from(free.failure.is_some()),
        });
        for scheme in [Scheme::Hr, Scheme::Hra] {
            let result = sweep(
                &ExperimentConfig {
                    scheme,
                    ..cfg.clone()
                },
                &grid,
                jobs,
            )?;
            let best = result.best_cell();
            rows.push(SensitivityRow {
                parameter: value,
                scheme,
                alpha: best.map(|c| c.alpha),
                alpha_j: best.map(|c| c.alpha_j),
                rmse: best.and_then(SweepCell::rmse),
                rmse_derivative: best.and_then(|c| c.summary.map(|s| s.analysis.rmse_derivative)),
                failures: result.failures(),
            });
        }
    }
    Ok(rows)
}

/// Write `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn diagnostics_csv(record: &RunRecord) -> String {
    let mut out = String::from(
        "cycle,time,phase,rmse,rmse_derivative,spread,cov_gradient_corr,innovation_norm,ghosts\n",
    );
    for c in &record.cycles {
        for (phase, d) in [("forecast", &c.forecast), ("analysis", &c.analysis)] {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                c.cycle,
                c.time,
                phase,
                d.rmse_analysis_mean,
                d.rmse_derivative,
                d.spread,
                opt(c.cov_gradient_corr),
                opt(c.innovation_norm),
                c.ghosts
            ));
        }
    }
    out
}

/// One row per scalar metric: scheme, parameters, metric, phase, value.
pub fn metrics_csv(records: &[&RunRecord]) -> String {
    let mut out = String::from(
        "scheme,n_ensemble,initial_mesh_size,sigma_o,alpha,alpha_j,metric,phase,value\n",
    );
    for r in records {
        let Some(s) = r.summary else { continue };
        let c = &r.config;
        for (phase, p) in [("forecast", s.forecast), ("analysis", s.analysis)] {
            let metrics = [
                ("rmse", Some(p.rmse)),
                ("rmse_derivative", Some(p.rmse_derivative)),
                ("spread", Some(p.spread)),
                ("sigma_ens", Some(p.fidelity.sigma_ens)),
                ("k_ens", p.fidelity.k_ens),
                ("rmse_ens", Some(p.fidelity.rmse_ens)),
                (
                    "rmse_ens_conventional",
                    Some(p.fidelity.rmse_ens_conventional),
                ),
            ];
            for (name, value) in metrics {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    c.scheme,
                    c.n_ensemble,
                    c.initial_mesh_size,
                    c.sigma_o,
                    c.alpha,
                    c.alpha_j,
                    name,
                    phase,
                    opt(value)
                ));
            }
        }
    }
    out
}

/// `runs/<id>/record.json`, `diagnostics.csv` and `metrics.csv` under `root`.
pub fn write_run(root: &Path, record: &RunRecord) -> Result<PathBuf, ExperimentError> {
    let dir = root.join("runs").join(&record.id);
    let json = serde_json::to_vec_pretty(record).map_err(io::Error::other)?;
    write_atomic(&dir.join("record.json"), &json)?;
    write_atomic(
        &dir.join("diagnostics.csv"),
        diagnostics_csv(record).as_bytes(),
    )?;
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&[record]).as_bytes())?;
    Ok(dir)
}

pub fn sweep_summary_csv(result: &SweepResult) -> String {
    let t = &result.template;
    let mut out = String::from(
        "scheme,n_ensemble,initial_mesh_size,sigma_o,alpha,alpha_j,status,rmse_analysis,rmse_forecast,rmse_derivative,spread,best\n",
    );
    for (i, c) in result.cells.iter().enumerate() {
        let s = c.summary;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            t.scheme,
            t.n_ensemble,
            t.initial_mesh_size,
            t.sigma_o,
            c.alpha,
            c.alpha_j,
            if c.failure.is_some() { "failed" } else { "ok" },
            opt(s.map(|s| s.analysis.rmse)),
            opt(s.map(|s| s.forecast.rmse)),
            opt(s.map(|s| s.analysis.rmse_derivative)),
            opt(s.map(|s| s.analysis.spread)),
            u8::from(result.best == Some(i))
        ));
    }
    out
}

pub fn sensitivity_csv(kind: SensitivityKind, rows: &[SensitivityRow]) -> String {
    let mut out =
        String::from("experiment,parameter,scheme,alpha,alpha_j,rmse,rmse_derivative,failures\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            kind.name(),
            r.parameter,
            r.scheme,
            opt(r.alpha),
            opt(r.alpha_j),
            opt(r.rmse),
            opt(r.rmse_derivative),
            r.failures
        ));
    }
    out
}

/// Dense CSV of a matrix, one row per line.
pub fn matrix_csv(m: &nalgebra::DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Forecast covariance `X X^T` of a matched ensemble as `cov_t<cycle>.csv`.
pub fn write_covariance(dir: &Path, cycle: usize, ensemble: &MatchedEnsemble) -> io::Result<()> {
    let x = enkf::forecast_anomalies(&ensemble.matrix(), 1.0);
    let c = &x * x.transpose();
    write_atomic(
        &dir.join(format!("cov_t{cycle}.csv")),
        matrix_csv(&c).as_bytes(),
    )
}
