//! Eulerian observations of the nature run and the observation operators
//! used on dimension-matched state vectors.

use std::io::{self, BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dimension::ReferencePartition;
use crate::interp;
use crate::models::ModelState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObservationError {
    #[error("observation location {location} outside [0, {length})")]
    OutOfDomain { location: f64, length: f64 },
    #[error("observation locations must be strictly increasing")]
    Unsorted,
    #[error("observation noise must be finite and non-negative, got {0}")]
    Sigma(f64),
    #[error("{locations} locations but {values} values")]
    LengthMismatch { locations: usize, values: usize },
    #[error("need at least one observation")]
    Empty,
    #[error("state vector has odd length {0}")]
    StateLength(usize),
    #[error("malformed observation record on line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Observations taken at one assimilation time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub time: f64,
    pub locations: Vec<f64>,
    pub values: Vec<f64>,
    /// Noise standard deviation. Zero describes exact observations.
    pub sigma_o: f64,
}

impl ObservationSet {
    pub fn new(
        time: f64,
        locations: Vec<f64>,
        values: Vec<f64>,
        sigma_o: f64,
    ) -> Result<Self, ObservationError> {
        if locations.is_empty() {
            return Err(ObservationError::Empty);
        }
        if locations.len() != values.len() {
            return Err(ObservationError::LengthMismatch {
                locations: locations.len(),
                values: values.len(),
            });
        }
        if !(sigma_o.is_finite() && sigma_o >= 0.0) {
            return Err(ObservationError::Sigma(sigma_o));
        }
        if locations.windows(2).any(|w| w[1] <= w[0]) {
            return Err(ObservationError::Unsorted);
        }
        Ok(Self {
            time,
            locations,
            values,
            sigma_o,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `n_obs` equally spaced points `k L / n_obs`.
pub fn regular_locations(n_obs: usize, length: f64) -> Vec<f64> {
    (0..n_obs)
        .map(|k| k as f64 * length / n_obs as f64)
        .collect()
}

/// Sample the truth at regularly spaced locations and add Gaussian noise.
pub fn generate_observations<R: Rng + ?Sized>(
    truth: &ModelState,
    n_obs: usize,
    sigma_o: f64,
    rng: &mut R,
) -> Result<ObservationSet, ObservationError> {
    if n_obs == 0 {
        return Err(ObservationError::Empty);
    }
    if !(sigma_o.is_finite() && sigma_o >= 0.0) {
        return Err(ObservationError::Sigma(sigma_o));
    }
    let length = truth.mesh.domain_length();
    let locations = regular_locations(n_obs, length);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let values = locations
        .iter()
        .map(|&x| {
            let clean = interp::periodic_linear(truth.nodes(), &truth.u, length, x);
            // Always draw so the noise stream does not depend on sigma_o.
            clean + sigma_o * noise.sample(rng)
        })
        .collect();
    ObservationSet::new(truth.t, locations, values, sigma_o)
}

fn check_location(location: f64, length: f64) -> Result<(), ObservationError> {
    if location.is_finite() && (0.0..length).contains(&location) {
        Ok(())
    } else {
        Err(ObservationError::OutOfDomain { location, length })
    }
}

/// Linear interpolation of reference-mesh values `u_tilde` (one per `gamma_i`)
/// at `location`, wrapping from the last node to `gamma_1 + L`.
pub fn observe_hr(
    u_tilde: &[f64],
    partition: &ReferencePartition,
    location: f64,
) -> Result<f64, ObservationError> {
    check_location(location, partition.length())?;
    Ok(observe_hr_unchecked(u_tilde, partition, location))
}

fn observe_hr_unchecked(u_tilde: &[f64], partition: &ReferencePartition, location: f64) -> f64 {
    let i = partition.interval_of(location);
    let j = (i + 1) % partition.m();
    let gamma_i = partition.gamma(i);
    let weight = (location - gamma_i) / partition.spacing();
    u_tilde[i] + weight * (u_tilde[j] - u_tilde[i])
}

/// Linear interpolation between the augmented state's own `(z_i, u_i)` pairs.
/// The state is `(u_1..u_M, z_1..z_M)` with `z` increasing.
pub fn observe_hra(state: &[f64], length: f64, location: f64) -> Result<f64, ObservationError> {
    if !state.len().is_multiple_of(2) {
        return Err(ObservationError::StateLength(state.len()));
    }
    check_location(location, length)?;
    let m = state.len() / 2;
    Ok(interp::periodic_linear(
        &state[m..],
        &state[..m],
        length,
        location,
    ))
}

/// An observation operator bound to a fixed set of locations.
#[derive(Debug, Clone, PartialEq)]
pub enum ObservationOperator {
    Hr {
        partition: ReferencePartition,
        locations: Vec<f64>,
    },
    Hra {
        length: f64,
        locations: Vec<f64>,
    },
}

impl ObservationOperator {
    pub fn hr(partition: ReferencePartition, locations: &[f64]) -> Result<Self, ObservationError> {
        for &x in locations {
            check_location(x, partition.length())?;
        }
        Ok(Self::Hr {
            partition,
            locations: locations.to_vec(),
        })
    }

    pub fn hra(length: f64, locations: &[f64]) -> Result<Self, ObservationError> {
        for &x in locations {
            check_location(x, length)?;
        }
        Ok(Self::Hra {
            length,
            locations: locations.to_vec(),
        })
    }

    /// Predicted observations for one matched state vector.
    pub fn apply(&self, state: &[f64]) -> Vec<f64> {
        match self {
            Self::Hr {
                partition,
                locations,
            } => locations
                .iter()
                .map(|&x| observe_hr_unchecked(&state[..partition.m()], partition, x))
                .collect(),
            Self::Hra { length, locations } => {
                let m = state.len() / 2;
                interp::periodic_linear_many(&state[m..], &state[..m], *length, locations)
            }
        }
    }
}

/// Write observation sets as `time,location,value` rows with a header.
pub fn write_csv<W: Write>(out: &mut W, sets: &[ObservationSet]) -> io::Result<()> {
    writeln!(out, "time,location,value")?;
    for set in sets {
        for (x, y) in set.locations.iter().zip(&set.values) {
            writeln!(out, "{},{},{}", set.time, x, y)?;
        }
    }
    Ok(())
}

/// Read observation sets written by [`write_csv`]; rows sharing a time form
/// one set. The noise level is not stored in the file and is supplied here.
pub fn read_csv<R: BufRead>(
    input: R,
    sigma_o: f64,
) -> Result<Vec<ObservationSet>, ObservationError> {
    let mut sets: Vec<ObservationSet> = Vec::new();
    let mut current: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| ObservationError::Parse {
            line: line_no,
            reason: e.to_string(),
        })?;
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("time")) {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| ObservationError::Parse {
                line: line_no,
                reason: e.to_string(),
            })?;
        if fields.len() != 3 {
            return Err(ObservationError::Parse {
                line: line_no,
                reason: format!("expected 3 fields, found {}", fields.len()),
            });
        }
        let (t, x, y) = (fields[0], fields[1], fields[2]);
        match current.as_mut() {
            Some((ct, xs, ys)) if *ct == t => {
                xs.push(x);
                ys.push(y);
            }
            _ => {
                if let Some((ct, xs, ys)) = current.take() {
                    sets.push(ObservationSet::new(ct, xs, ys, sigma_o)?);
                }
                current = Some((t, vec![x], vec![y]));
            }
        }
    }
    if let Some((ct, xs, ys)) = current {
        sets.push(ObservationSet::new(ct, xs, ys, sigma_o)?);
    }
    Ok(sets)
}
