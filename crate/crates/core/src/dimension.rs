//! Dimension matching of adaptive-mesh members onto a common state length
//! and the return to each member's own mesh after the analysis.
//!
//! Both schemes build state vectors of length `2M` laid out as a value block
//! followed by a position block, where `M = L / delta1`.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::{
    divisions, is_valid, remesh_tagged, remesh_tagged_preferring, wrap_into_domain, AdaptiveMesh,
    MeshError, MeshTolerances, TaggedNode,
};
use crate::models::{ModelError, ModelState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DimensionError {
    #[error("member mesh is not valid")]
    InvalidMesh,
    #[error("state vector has length {found}, expected {expected}")]
    StateLength { found: usize, expected: usize },
    #[error("member was matched with the {0} scheme")]
    WrongScheme(&'static str),
    #[error("non-finite analysis value at state index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `M` equal intervals of width `delta1` starting at 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePartition {
    m: usize,
    spacing: f64,
    length: f64,
}

impl ReferencePartition {
    pub fn new(tolerances: &MeshTolerances) -> Result<Self, MeshError> {
        let length = tolerances.domain_length();
        let spacing = tolerances.delta1();
        let m = divisions(length, spacing).ok_or_else(|| {
            MeshError::Tolerances(format!("delta1 = {spacing} does not divide L = {length}"))
        })?;
        Ok(Self { m, spacing, length })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn gamma(&self, i: usize) -> f64 {
        i as f64 * self.spacing
    }

    pub fn gammas(&self) -> Vec<f64> {
        (0..self.m).map(|i| self.gamma(i)).collect()
    }

    /// Upper end of interval `i`; the last interval ends at `L`.
    pub fn upper(&self, i: usize) -> f64 {
        if i + 1 == self.m {
            self.length
        } else {
            self.gamma(i + 1)
        }
    }

    /// Index `i` with `gamma(i) <= x < upper(i)` for `x` in `[0, L)`.
    pub fn interval_of(&self, x: f64) -> usize {
        let mut i = ((x / self.spacing).floor().max(0.0) as usize).min(self.m - 1);
        if i > 0 && x < self.gamma(i) {
            i -= 1;
        } else if i + 1 < self.m && x >= self.gamma(i + 1) {
            i += 1;
        }
        i
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Origin {
    /// Reference slot of each original node, if it received one.
    Hr {
        slots: Vec<Option<usize>>,
    },
    Hra,
}

/// One member's dimension-matched state vector plus what is needed to map
/// the analysis back onto its own mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedMember {
    /// Values `(u_1..u_M)` followed by positions `(z_1..z_M)`.
    pub state: Vec<f64>,
    /// True where the entry was not one of the member's own nodes. A node
    /// that loses a slot to a rounding tie keeps its forecast value.
    pub ghost_mask: Vec<bool>,
    source: ModelState,
    origin: Origin,
}

impl MatchedMember {
    pub fn m(&self) -> usize {
        self.ghost_mask.len()
    }

    pub fn u_block(&self) -> &[f64] {
        &self.state[..self.m()]
    }

    pub fn z_block(&self) -> &[f64] {
        &self.state[self.m()..]
    }

    pub fn u_block_mut(&mut self) -> &mut [f64] {
        let m = self.m();
        &mut self.state[..m]
    }

    /// The member as it was before matching.
    pub fn source(&self) -> &ModelState {
        &self.source
    }

    pub fn is_hr(&self) -> bool {
        matches!(self.origin, Origin::Hr { .. })
    }

    pub fn ghost_count(&self) -> usize {
        self.ghost_mask.iter().filter(|&&g| g).count()
    }

    /// Same bookkeeping with a replacement state vector.
    pub fn with_state(&self, state: Vec<f64>) -> Result<Self, DimensionError> {
        if state.len() != self.state.len() {
            return Err(DimensionError::StateLength {
                found: state.len(),
                expected: self.state.len(),
            });
        }
        Ok(Self {
            state,
            ..self.clone()
        })
    }
}

fn require_valid(member: &ModelState) -> Result<(), DimensionError> {
    if is_valid(member.nodes(), member.mesh.tolerances())? {
        Ok(())
    } else {
        Err(DimensionError::InvalidMesh)
    }
}

/// Nodes this close (relative to the spacing) below an interval boundary are
/// counted in the next interval, so meshes with gaps of exactly `delta1`
/// map one node per interval despite rounding.
const SNAP: f64 = 1e-9;

fn periodic_distance(a: f64, b: f64, length: f64) -> f64 {
    let d = (a - b).abs();
    d.min(length - d)
}

/// Assign each node to at most one slot. A valid mesh never puts two nodes
/// in one slot; if rounding does, the node nearer the slot's anchor wins.
fn assign_slots(
    nodes: &[f64],
    length: f64,
    slot_of: impl Fn(f64) -> usize,
    anchor: impl Fn(usize) -> f64,
    m: usize,
) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
    let mut owner: Vec<Option<usize>> = vec![None; m];
    let mut slots: Vec<Option<usize>> = vec![None; nodes.len()];
    for (k, &z) in nodes.iter().enumerate() {
        let s = slot_of(z);
        match owner[s] {
            None => {
                owner[s] = Some(k);
                slots[k] = Some(s);
            }
            Some(prev) => {
                let a = anchor(s);
                if periodic_distance(z, a, length) < periodic_distance(nodes[prev], a, length) {
                    slots[prev] = None;
                    owner[s] = Some(k);
                    slots[k] = Some(s);
                }
            }
        }
    }
    (owner, slots)
}

/// Project a member onto the fixed reference nodes `gamma_i`.
///
/// A node within half a spacing of `gamma_i` supplies `u_i` directly.
/// Otherwise `u_i` is the mean of the bracketing node values, or of the
/// first and last values when `gamma_i` lies outside the node span.
pub fn match_hr(
    member: &ModelState,
    partition: &ReferencePartition,
) -> Result<MatchedMember, DimensionError> {
    require_valid(member)?;
    let m = partition.m();
    let length = partition.length();
    let half = 0.5 * partition.spacing();
    let z = member.nodes();
    let u = &member.u;
    let n = z.len();

    let shifted = |x: f64| {
        let s = x + half + SNAP * partition.spacing();
        partition.interval_of(if s >= length { s - length } else { s })
    };
    let (owner, slots) = assign_slots(z, length, shifted, |i| partition.gamma(i), m);

    let mut state = vec![0.0; 2 * m];
    let mut ghost_mask = vec![false; m];
    for i in 0..m {
        let gamma = partition.gamma(i);
        state[m + i] = gamma;
        state[i] = match owner[i] {
            Some(k) => u[k],
            None => {
                ghost_mask[i] = true;
                let idx = z.partition_point(|&zk| zk <= gamma);
                if idx == 0 || idx == n {
                    0.5 * (u[0] + u[n - 1])
                } else {
                    0.5 * (u[idx - 1] + u[idx])
                }
            }
        };
    }
    Ok(MatchedMember {
        state,
        ghost_mask,
        source: member.clone(),
        origin: Origin::Hr { slots },
    })
}

/// Map an HR analysis back onto the member's own nodes: node `k` takes the
/// updated value of the slot it was projected to. Interpolated entries are
/// discarded and the mesh is left unchanged.
pub fn return_hr(updated: &MatchedMember) -> Result<ModelState, DimensionError> {
    let Origin::Hr { slots } = &updated.origin else {
        return Err(DimensionError::WrongScheme("HRA"));
    };
    let source = &updated.source;
    let u = slots
        .iter()
        .zip(&source.u)
        .map(|(slot, &old)| slot.map_or(old, |s| updated.state[s]))
        .collect();
    Ok(ModelState::new(source.mesh.clone(), u, source.t)?)
}

/// Spread of the ghost position distribution around the interval midpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GhostSpread {
    /// `delta1 / 2` is the standard deviation.
    #[default]
    StdDev,
    /// `delta1 / 2` is the variance.
    Variance,
}

impl GhostSpread {
    pub fn std_dev(self, delta1: f64) -> f64 {
        match self {
            Self::StdDev => 0.5 * delta1,
            Self::Variance => (0.5 * delta1).sqrt(),
        }
    }
}

/// Ghost value by linear interpolation between `(zl, ul)` and `(zr, ur)`.
pub fn ghost_value(z: f64, zl: f64, ul: f64, zr: f64, ur: f64) -> f64 {
    let a = z - zl;
    let b = zr - z;
    (b * ul + a * ur) / (a + b)
}

/// Augment a member to one node per reference interval. Occupied intervals
/// keep their node; each empty interval gets a ghost drawn around its
/// midpoint, valued from its nearest left node (possibly an earlier ghost)
/// and nearest right original node.
pub fn match_hra<R: Rng + ?Sized>(
    member: &ModelState,
    partition: &ReferencePartition,
    spread: GhostSpread,
    rng: &mut R,
) -> Result<MatchedMember, DimensionError> {
    require_valid(member)?;
    let m = partition.m();
    let length = partition.length();
    let z = member.nodes();
    let u = &member.u;
    let n = z.len();

    let (owner, _) = assign_slots(
        z,
        length,
        |x| partition.interval_of((x + SNAP * partition.spacing()).min(length - SNAP)),
        |i| partition.gamma(i) + 0.5 * partition.spacing(),
        m,
    );

    // next occupied interval at or after each index, for right neighbours
    let mut next_owner: Vec<Option<usize>> = vec![None; m + 1];
    for i in (0..m).rev() {
        next_owner[i] = owner[i].or(next_owner[i + 1]);
    }

    let normal = Normal::new(0.0, spread.std_dev(partition.spacing()))
        .map_err(|e| MeshError::Tolerances(e.to_string()))?;
    let mut zs = vec![0.0; m];
    let mut us = vec![0.0; m];
    let mut ghost_mask = vec![false; m];
    for i in 0..m {
        if let Some(k) = owner[i] {
            zs[i] = z[k];
            us[i] = u[k];
            continue;
        }
        ghost_mask[i] = true;
        let lo = partition.gamma(i);
        let hi = partition.upper(i);
        let mid = 0.5 * (lo + hi);
        let zg = loop {
            let draw = mid + normal.sample(rng);
            if draw >= lo && draw < hi && partition.interval_of(draw) == i {
                break draw;
            }
        };
        let (zl, ul) = if i > 0 {
            (zs[i - 1], us[i - 1])
        } else {
            (z[n - 1] - length, u[n - 1])
        };
        let (zr, ur) = match next_owner[i + 1] {
            Some(k) => (z[k], u[k]),
            None => (z[0] + length, u[0]),
        };
        zs[i] = zg;
        us[i] = ghost_value(zg, zl, ul, zr, ur);
    }
    let mut state = us;
    state.extend_from_slice(&zs);
    Ok(MatchedMember {
        state,
        ghost_mask,
        source: member.clone(),
        origin: Origin::Hra,
    })
}

/// Rebuild a member from an HRA analysis: wrap and sort the updated pairs,
/// remesh, drop the pairs that started as ghosts, and remesh again if that
/// left the mesh invalid.
pub fn return_hra(updated: &MatchedMember) -> Result<ModelState, DimensionError> {
    if updated.is_hr() {
        return Err(DimensionError::WrongScheme("HR"));
    }
    let tolerances = *updated.source.mesh.tolerances();
    let length = tolerances.domain_length();
    let m = updated.m();
    let mut nodes = Vec::with_capacity(m);
    for i in 0..m {
        let u = updated.state[i];
        if !u.is_finite() {
            return Err(DimensionError::NonFinite(i));
        }
        let z = wrap_into_domain(updated.state[m + i], length)
            .map_err(|_| DimensionError::NonFinite(m + i))?;
        nodes.push(TaggedNode {
            z,
            u,
            tag: updated.ghost_mask[i],
        });
    }
    nodes.sort_by(|a, b| a.z.total_cmp(&b.z));

    let (remeshed, _) = remesh_tagged_preferring(nodes, &tolerances, false, |&ghost| ghost)?;
    let mut kept: Vec<TaggedNode<bool>> = remeshed.into_iter().filter(|n| !n.tag).collect();
    if kept.len() < 2 {
        return Err(MeshError::Degenerate(kept.len()).into());
    }
    let positions: Vec<f64> = kept.iter().map(|n| n.z).collect();
    if !is_valid(&positions, &tolerances)? {
        kept = remesh_tagged(kept, &tolerances, false)?.0;
    }
    let (z, u): (Vec<f64>, Vec<f64>) = kept.into_iter().map(|n| (n.z, n.u)).unzip();
    Ok(ModelState::new(
        AdaptiveMesh::new(z, tolerances)?,
        u,
        updated.source.t,
    )?)
}

/// Write matched members as `time,member,index,u,z,ghost` rows with a header.
pub fn write_matched_csv<W: Write>(
    out: &mut W,
    time: f64,
    members: &[MatchedMember],
) -> io::Result<()> {
    writeln!(out, "time,member,index,u,z,ghost")?;
    for (j, member) in members.iter().enumerate() {
        for i in 0..member.m() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                time,
                j,
                i,
                member.u_block()[i],
                member.z_block()[i],
                u8::from(member.ghost_mask[i])
            )?;
        }
    }
    Ok(())
}
