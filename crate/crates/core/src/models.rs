//! Lagrangian solvers for the viscous Burgers and Kuramoto–Sivashinsky
//! testbeds on an adaptive moving mesh.
//!
//! Nodes move with the flow, `dz/dt = u`, so along a node trajectory the
//! material derivative of `u` only carries the non-advective terms:
//!
//! * Burgers: `Du/Dt = nu * u_zz`
//! * Kuramoto–Sivashinsky: `Du/Dt = -nu * u_zzzz - u_zz`
//!
//! With node advection switched off the `u * u_z` term is restored and the
//! scheme is the ordinary fixed-grid central-difference Euler scheme.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{self, AdaptiveMesh, MeshError, MeshTolerances, TaggedNode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("non-finite value at node {node} at t = {time}")]
    BlowUp { time: f64, node: usize },
    #[error("{0} nodes do not give a valid uniform mesh")]
    NodeCount(usize),
    #[error("{values} values for {nodes} nodes")]
    LengthMismatch { nodes: usize, values: usize },
    #[error("duration {duration} is not a multiple of dt = {dt}")]
    Duration { duration: f64, dt: f64 },
    #[error("invalid model parameter: {0}")]
    Parameter(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Viscous Burgers equation on `[0, 1)`.
    Bgm,
    /// Kuramoto–Sivashinsky equation on `[0, 2 pi)`.
    Ksm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Bgm => "bgm",
            ModelKind::Ksm => "ksm",
        }
    }

    pub fn domain_length(self) -> f64 {
        match self {
            ModelKind::Bgm => 1.0,
            ModelKind::Ksm => 2.0 * PI,
        }
    }

    pub fn initial_condition(self, z: f64) -> f64 {
        match self {
            ModelKind::Bgm => (2.0 * PI * z).sin() + 0.5 * (PI * z).sin(),
            ModelKind::Ksm => -(2.0 * PI * z).sin(),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub viscosity: f64,
    pub dt: f64,
    pub tolerances: MeshTolerances,
    /// Move nodes with the flow. Off turns the solver into a fixed-grid
    /// Eulerian scheme.
    pub advect_nodes: bool,
}

impl ModelSpec {
    pub fn new(
        kind: ModelKind,
        viscosity: f64,
        dt: f64,
        tolerances: MeshTolerances,
    ) -> Result<Self, ModelError> {
        if !(viscosity.is_finite() && viscosity > 0.0) {
            return Err(ModelError::Parameter(format!("viscosity {viscosity}")));
        }
        if !(dt.is_finite() && dt > 0.0) {
            return Err(ModelError::Parameter(format!("dt {dt}")));
        }
        Ok(Self {
            kind,
            viscosity,
            dt,
            tolerances,
            advect_nodes: true,
        })
    }

    /// Burgers with `nu = 0.008`, `dt = 1e-3`, `delta = (0.01, 0.02)`.
    pub fn bgm() -> Self {
        let tol = MeshTolerances::new(0.01, 0.02, 1.0).expect("static tolerances");
        Self::new(ModelKind::Bgm, 0.008, 1e-3, tol).expect("static parameters")
    }

    /// Kuramoto–Sivashinsky with `nu = 0.027`, `dt = 1e-5`,
    /// `delta = (0.02 pi, 0.04 pi)`.
    pub fn ksm() -> Self {
        let tol = MeshTolerances::new(0.02 * PI, 0.04 * PI, 2.0 * PI).expect("static tolerances");
        Self::new(ModelKind::Ksm, 0.027, 1e-5, tol).expect("static parameters")
    }

    pub fn preset(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Bgm => Self::bgm(),
            ModelKind::Ksm => Self::ksm(),
        }
    }

    pub fn domain_length(&self) -> f64 {
        self.tolerances.domain_length()
    }
}

/// Mesh, nodal velocities and model time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub mesh: AdaptiveMesh,
    pub u: Vec<f64>,
    pub t: f64,
}

impl ModelState {
    pub fn new(mesh: AdaptiveMesh, u: Vec<f64>, t: f64) -> Result<Self, ModelError> {
        if mesh.len() != u.len() {
            return Err(ModelError::LengthMismatch {
                nodes: mesh.len(),
                values: u.len(),
            });
        }
        if let Some(node) = u.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::BlowUp { time: t, node });
        }
        Ok(Self { mesh, u, t })
    }

    pub fn nodes(&self) -> &[f64] {
        self.mesh.nodes()
    }

    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// Periodic trapezoidal approximation of the integral of `u^2`.
    pub fn energy(&self) -> f64 {
        let z = self.nodes();
        let n = z.len();
        let length = self.mesh.domain_length();
        (0..n)
            .map(|i| {
                let (zr, ur) = if i + 1 < n {
                    (z[i + 1], self.u[i + 1])
                } else {
                    (z[0] + length, self.u[0])
                };
                0.5 * (zr - z[i]) * (self.u[i] * self.u[i] + ur * ur)
            })
            .sum()
    }
}

/// Uniform mesh of `node_count` nodes with the initial condition sampled on it.
pub fn initial_state(spec: &ModelSpec, node_count: usize) -> Result<ModelState, ModelError> {
    let mesh = AdaptiveMesh::uniform(node_count, spec.tolerances)?;
    if !mesh.is_valid() {
        return Err(ModelError::NodeCount(node_count));
    }
    let u = mesh
        .nodes()
        .iter()
        .map(|&z| spec.kind.initial_condition(z))
        .collect();
    ModelState::new(mesh, u, 0.0)
}

/// First and second derivatives at `x1` from the three-point non-uniform
/// central stencil with spacings `hm = x1 - x0`, `hp = x2 - x1`.
#[inline]
pub fn central_first_second(hm: f64, hp: f64, f0: f64, f1: f64, f2: f64) -> (f64, f64) {
    let denom = hm * hp * (hm + hp);
    let d1 = (hm * hm * f2 - hp * hp * f0 + (hp * hp - hm * hm) * f1) / denom;
    let d2 = 2.0 * (hm * f2 - (hm + hp) * f1 + hp * f0) / denom;
    (d1, d2)
}

/// Right-hand side of the value equation at every node.
///
/// The fourth derivative applies the three-point second-derivative stencil
/// twice, a five-point non-uniform stencil. Both stencils telescope under
/// trapezoidal weights, so the value equation conserves the trapezoidal
/// integral of `u` between remeshing events.
fn tendency(spec: &ModelSpec, z: &[f64], u: &[f64], work: &mut Workspace) {
    let n = z.len();
    let length = spec.domain_length();
    let nu = spec.viscosity;
    work.first.clear();
    work.second.clear();
    for i in 0..n {
        let (x0, f0) = if i == 0 {
            (z[n - 1] - length, u[n - 1])
        } else {
            (z[i - 1], u[i - 1])
        };
        let (x2, f2) = if i + 1 == n {
            (z[0] + length, u[0])
        } else {
            (z[i + 1], u[i + 1])
        };
        let (d1, d2) = central_first_second(z[i] - x0, x2 - z[i], f0, u[i], f2);
        work.first.push(d1);
        work.second.push(d2);
    }
    work.rhs.clear();
    match spec.kind {
        ModelKind::Bgm => work.rhs.extend(work.second.iter().map(|d2| nu * d2)),
        ModelKind::Ksm => {
            for i in 0..n {
                let (x0, g0) = if i == 0 {
                    (z[n - 1] - length, work.second[n - 1])
                } else {
                    (z[i - 1], work.second[i - 1])
                };
                let (x2, g2) = if i + 1 == n {
                    (z[0] + length, work.second[0])
                } else {
                    (z[i + 1], work.second[i + 1])
                };
                let (_, d4) = central_first_second(z[i] - x0, x2 - z[i], g0, work.second[i], g2);
                work.rhs.push(-nu * d4 - work.second[i]);
            }
        }
    }
    if !spec.advect_nodes {
        for ((r, ui), d1) in work.rhs.iter_mut().zip(u).zip(&work.first) {
            *r -= ui * d1;
        }
    }
}

/// Mutable solver workspace reused across steps.
#[derive(Debug, Default)]
struct Workspace {
    first: Vec<f64>,
    second: Vec<f64>,
    rhs: Vec<f64>,
}

fn step_in_place(
    z: &mut Vec<f64>,
    u: &mut Vec<f64>,
    t: f64,
    spec: &ModelSpec,
    work: &mut Workspace,
) -> Result<(), ModelError> {
    let dt = spec.dt;
    tendency(spec, z, u, work);
    let t_new = t + dt;
    for (k, (ui, r)) in u.iter_mut().zip(&work.rhs).enumerate() {
        *ui += dt * r;
        if !ui.is_finite() {
            return Err(ModelError::BlowUp {
                time: t_new,
                node: k,
            });
        }
    }
    if !spec.advect_nodes {
        return Ok(());
    }
    // Moving nodes with the updated velocity keeps the trapezoidal integral
    // of u exactly invariant over the step.
    for (zi, ui) in z.iter_mut().zip(u.iter()) {
        *zi += dt * ui;
    }
    let length = spec.domain_length();
    let mut sorted = true;
    for k in 0..z.len() {
        z[k] = mesh::wrap_into_domain(z[k], length)?;
        if k > 0 && z[k] < z[k - 1] {
            sorted = false;
        }
    }
    if !sorted {
        let mut pairs: Vec<(f64, f64)> = z.iter().copied().zip(u.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (k, (zk, uk)) in pairs.into_iter().enumerate() {
            z[k] = zk;
            u[k] = uk;
        }
    }
    if !gaps_valid(z, &spec.tolerances) {
        let nodes = z
            .iter()
            .zip(u.iter())
            .map(|(&z, &u)| TaggedNode { z, u, tag: () })
            .collect();
        let (out, _) = mesh::remesh_tagged(nodes, &spec.tolerances, ())?;
        z.clear();
        u.clear();
        for node in out {
            z.push(node.z);
            u.push(node.u);
        }
    }
    Ok(())
}

fn gaps_valid(z: &[f64], tol: &MeshTolerances) -> bool {
    let n = z.len();
    n >= 2
        && z.windows(2).all(|w| tol.gap_ok(w[1] - w[0]))
        && tol.gap_ok(z[0] + tol.domain_length() - z[n - 1])
}

/// One Euler step: value update, node advection with the new values, wrap
/// and remesh.
pub fn step(state: &ModelState, spec: &ModelSpec) -> Result<ModelState, ModelError> {
    let mut z = state.nodes().to_vec();
    let mut u = state.u.clone();
    step_in_place(&mut z, &mut u, state.t, spec, &mut Workspace::default())?;
    let mesh = AdaptiveMesh::new(z, spec.tolerances)?;
    ModelState::new(mesh, u, state.t + spec.dt)
}

fn step_count(duration: f64, dt: f64) -> Result<usize, ModelError> {
    if !(duration.is_finite() && duration >= 0.0) {
        return Err(ModelError::Duration { duration, dt });
    }
    let n = (duration / dt).round();
    if (n * dt - duration).abs() > 1e-9 * duration.max(dt) {
        return Err(ModelError::Duration { duration, dt });
    }
    Ok(n as usize)
}

/// Advance by `duration`, which must be a whole number of steps.
pub fn integrate(
    state: &ModelState,
    spec: &ModelSpec,
    duration: f64,
) -> Result<ModelState, ModelError> {
    integrate_with(state, spec, duration, 0, |_| {})
}

/// Like [`integrate`], calling `observer` with the state every `stride`
/// steps (and never when `stride` is zero).
pub fn integrate_with<F>(
    state: &ModelState,
    spec: &ModelSpec,
    duration: f64,
    stride: usize,
    mut observer: F,
) -> Result<ModelState, ModelError>
where
    F: FnMut(&ModelState),
{
    let steps = step_count(duration, spec.dt)?;
    let t0 = state.t;
    let mut z = state.nodes().to_vec();
    let mut u = state.u.clone();
    let mut work = Workspace::default();
    for k in 0..steps {
        let t = t0 + k as f64 * spec.dt;
        step_in_place(&mut z, &mut u, t, spec, &mut work)?;
        if stride > 0 && (k + 1) % stride == 0 && k + 1 < steps {
            let snapshot = ModelState {
                mesh: AdaptiveMesh::new(z.clone(), spec.tolerances)?,
                u: u.clone(),
                t: t0 + (k + 1) as f64 * spec.dt,
            };
            observer(&snapshot);
        }
    }
    let end = ModelState::new(AdaptiveMesh::new(z, spec.tolerances)?, u, t0 + duration)?;
    if stride > 0 && steps > 0 {
        observer(&end);
    }
    Ok(end)
}
