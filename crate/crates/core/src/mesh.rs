//! One-dimensional periodic adaptive mesh: validity, remeshing and domain wrapping.
//!
//! A mesh lives on the periodic domain `[0, L)`. It is valid when every gap
//! between consecutive nodes, including the wrap gap `z_1 + L - z_N`, lies in
//! `[delta1, delta2]`. Remeshing deletes the right node of any pair closer than
//! `delta1` and inserts a midpoint node into any gap wider than `delta2`.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative slack on gap comparisons. Uniform meshes built as `k * L / n`
/// produce gaps that differ from `delta1` in the last bits; without slack a
/// mesh with spacing exactly `delta1` would be reported invalid.
pub const GAP_RTOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid mesh tolerances: {0}")]
    Tolerances(String),
    #[error("node {index} at {position} lies outside [0, {length})")]
    OutOfDomain {
        index: usize,
        position: f64,
        length: f64,
    },
    #[error("nodes decrease at index {0}")]
    Unsorted(usize),
    #[error("non-finite position {0}")]
    NonFinite(f64),
    #[error("{nodes} nodes but {values} values")]
    LengthMismatch { nodes: usize, values: usize },
    #[error("remeshing leaves {0} node(s); at least 2 are required")]
    Degenerate(usize),
}

/// Node proximity (`delta1`) and separation (`delta2`) tolerances on a
/// periodic domain of length `domain_length`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshTolerances {
    delta1: f64,
    delta2: f64,
    domain_length: f64,
}

impl MeshTolerances {
    pub fn new(delta1: f64, delta2: f64, domain_length: f64) -> Result<Self, MeshError> {
        let bad = |msg: String| Err(MeshError::Tolerances(msg));
        if !(delta1.is_finite() && delta1 > 0.0) {
            return bad(format!("delta1 must be positive, got {delta1}"));
        }
        if !(delta2.is_finite() && delta2 > 0.0) {
            return bad(format!("delta2 must be positive, got {delta2}"));
        }
        if !(domain_length.is_finite() && domain_length > 0.0) {
            return bad(format!(
                "domain length must be positive, got {domain_length}"
            ));
        }
        if delta2 < 2.0 * delta1 * (1.0 - 1e-12) {
            return bad(format!("delta2/delta1 = {} is below 2", delta2 / delta1));
        }
        for (name, d) in [("delta1", delta1), ("delta2", delta2)] {
            if divisions(domain_length, d).is_none() {
                return bad(format!("{name} = {d} does not divide L = {domain_length}"));
            }
        }
        Ok(Self {
            delta1,
            delta2,
            domain_length,
        })
    }

    pub fn delta1(&self) -> f64 {
        self.delta1
    }

    pub fn delta2(&self) -> f64 {
        self.delta2
    }

    pub fn domain_length(&self) -> f64 {
        self.domain_length
    }

    /// Gap below which the right node of a pair is deleted.
    pub(crate) fn lower(&self) -> f64 {
        self.delta1 * (1.0 - GAP_RTOL)
    }

    /// Gap above which a midpoint is inserted.
    pub(crate) fn upper(&self) -> f64 {
        self.delta2 * (1.0 + GAP_RTOL)
    }

    pub(crate) fn gap_ok(&self, gap: f64) -> bool {
        gap >= self.lower() && gap <= self.upper()
    }
}

/// Number of intervals of width `d` in `length`, if `d` divides `length`
/// within a relative tolerance of 1e-12.
pub fn divisions(length: f64, d: f64) -> Option<usize> {
    let n = (length / d).round();
    if n >= 1.0 && ((n * d - length).abs() <= 1e-12 * length) {
        Some(n as usize)
    } else {
        None
    }
}

/// Map a position onto `[0, L)` periodically.
pub fn wrap_into_domain(position: f64, length: f64) -> Result<f64, MeshError> {
    if !position.is_finite() {
        return Err(MeshError::NonFinite(position));
    }
    let r = position.rem_euclid(length);
    // rem_euclid can round up to exactly `length` for tiny negative inputs.
    Ok(if r >= length { 0.0 } else { r })
}

/// Ordered node positions on the periodic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveMesh {
    nodes: Vec<f64>,
    tolerances: MeshTolerances,
}

impl AdaptiveMesh {
    /// Wrap a node list, checking it is sorted and inside the domain. Validity
    /// of the gaps is not required here; see [`AdaptiveMesh::is_valid`].
    pub fn new(nodes: Vec<f64>, tolerances: MeshTolerances) -> Result<Self, MeshError> {
        check_structure(&nodes, tolerances.domain_length)?;
        Ok(Self { nodes, tolerances })
    }

    /// `n` equally spaced nodes starting at zero.
    pub fn uniform(n: usize, tolerances: MeshTolerances) -> Result<Self, MeshError> {
        let length = tolerances.domain_length;
        let nodes = (0..n).map(|k| k as f64 * length / n as f64).collect();
        Self::new(nodes, tolerances)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tolerances(&self) -> &MeshTolerances {
        &self.tolerances
    }

    pub fn domain_length(&self) -> f64 {
        self.tolerances.domain_length
    }

    pub fn into_nodes(self) -> Vec<f64> {
        self.nodes
    }

    /// Gaps `z_{i+1} - z_i` followed by the wrap gap `z_1 + L - z_N`.
    pub fn gaps(&self) -> Vec<f64> {
        gaps(&self.nodes, self.tolerances.domain_length)
    }

    pub fn is_valid(&self) -> bool {
        self.nodes.len() >= 2 && self.gaps().into_iter().all(|g| self.tolerances.gap_ok(g))
    }
}

fn gaps(nodes: &[f64], length: f64) -> Vec<f64> {
    let n = nodes.len();
    if n == 0 {
        return Vec::new();
    }
    let mut out: Vec<f64> = nodes.windows(2).map(|w| w[1] - w[0]).collect();
    out.push(nodes[0] + length - nodes[n - 1]);
    out
}

fn check_structure(nodes: &[f64], length: f64) -> Result<(), MeshError> {
    for (index, &z) in nodes.iter().enumerate() {
        if !z.is_finite() {
            return Err(MeshError::NonFinite(z));
        }
        if !(0.0..length).contains(&z) {
            return Err(MeshError::OutOfDomain {
                index,
                position: z,
                length,
            });
        }
        if index > 0 && z < nodes[index - 1] {
            return Err(MeshError::Unsorted(index));
        }
    }
    Ok(())
}

/// Validity of a raw node list. Unsorted or out-of-domain input is a
/// structural error rather than `false`.
pub fn is_valid(nodes: &[f64], tolerances: &MeshTolerances) -> Result<bool, MeshError> {
    check_structure(nodes, tolerances.domain_length)?;
    Ok(nodes.len() >= 2
        && gaps(nodes, tolerances.domain_length)
            .into_iter()
            .all(|g| tolerances.gap_ok(g)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RemeshEvent {
    /// Node deleted; `index` refers to the input ordering.
    Deleted { index: usize, position: f64 },
    /// Node inserted; `index` refers to the output ordering.
    Inserted {
        index: usize,
        position: f64,
        value: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RemeshLog {
    pub events: Vec<RemeshEvent>,
}

impl RemeshLog {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn deletions(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e, RemeshEvent::Deleted { .. }))
            .count()
    }

    pub fn insertions(&self) -> usize {
        self.events.len() - self.deletions()
    }
}

/// Enforce validity by deleting and inserting nodes.
///
/// Deletions run first in a left-to-right sweep (the wrap pair last), then
/// one midpoint is inserted into every gap wider than `delta2`. The two
/// passes repeat until the mesh is valid.
pub fn remesh(
    mesh: &AdaptiveMesh,
    values: &[f64],
) -> Result<(AdaptiveMesh, Vec<f64>, RemeshLog), MeshError> {
    if mesh.len() != values.len() {
        return Err(MeshError::LengthMismatch {
            nodes: mesh.len(),
            values: values.len(),
        });
    }
    let tagged = mesh
        .nodes
        .iter()
        .zip(values)
        .enumerate()
        .map(|(k, (&z, &u))| TaggedNode { z, u, tag: Some(k) })
        .collect();
    let (out, log) = remesh_tagged(tagged, &mesh.tolerances, None)?;
    let (nodes, values): (Vec<f64>, Vec<f64>) = out.into_iter().map(|n| (n.z, n.u)).unzip();
    Ok((
        AdaptiveMesh {
            nodes,
            tolerances: mesh.tolerances,
        },
        values,
        log,
    ))
}

/// A node carrying a caller-defined label through remeshing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct TaggedNode<T> {
    pub z: f64,
    pub u: f64,
    pub tag: T,
}

/// Remesh a sorted node list, carrying tags with surviving nodes and giving
/// `inserted` to new ones. Deletion indices in the log are positions in the
/// list being swept, which is the input order on the first pass.
pub(crate) fn remesh_tagged<T: Copy>(
    nodes: Vec<TaggedNode<T>>,
    tolerances: &MeshTolerances,
    inserted: T,
) -> Result<(Vec<TaggedNode<T>>, RemeshLog), MeshError> {
    remesh_tagged_preferring(nodes, tolerances, inserted, |_| false)
}

/// As [`remesh_tagged`], except that when exactly one node of a close pair is
/// `expendable` that node is deleted instead of the right one.
pub(crate) fn remesh_tagged_preferring<T: Copy>(
    nodes: Vec<TaggedNode<T>>,
    tolerances: &MeshTolerances,
    inserted: T,
    expendable: impl Fn(&T) -> bool,
) -> Result<(Vec<TaggedNode<T>>, RemeshLog), MeshError> {
    let length = tolerances.domain_length;
    let positions: Vec<f64> = nodes.iter().map(|n| n.z).collect();
    check_structure(&positions, length)?;

    let mut log = RemeshLog::default();
    let mut current = nodes;
    // Each insertion pass halves the widest gap; this bound is never reached
    // for a structurally sound input.
    let max_passes = 8 + (length / tolerances.delta2).log2().ceil().max(0.0) as usize * 2;
    let mut inserted_positions = Vec::new();
    for pass in 0..max_passes {
        if pass > 0 && current.len() >= 2 && all_gaps_ok(&current, tolerances) {
            break;
        }
        current = delete_pass(current, tolerances, &expendable, &mut log);
        if current.len() < 2 {
            return Err(MeshError::Degenerate(current.len()));
        }
        current = insert_pass(current, tolerances, inserted, &mut inserted_positions);
    }
    if !all_gaps_ok(&current, tolerances) {
        return Err(MeshError::Degenerate(current.len()));
    }
    for (position, value) in inserted_positions {
        if let Some(index) = current.iter().position(|n| n.z == position) {
            log.events.push(RemeshEvent::Inserted {
                index,
                position,
                value,
            });
        }
    }
    Ok((current, log))
}

fn all_gaps_ok<T>(nodes: &[TaggedNode<T>], tolerances: &MeshTolerances) -> bool {
    let n = nodes.len();
    n >= 2
        && (0..n).all(|i| {
            let gap = if i + 1 < n {
                nodes[i + 1].z - nodes[i].z
            } else {
                nodes[0].z + tolerances.domain_length - nodes[n - 1].z
            };
            tolerances.gap_ok(gap)
        })
}

fn delete_pass<T: Copy>(
    nodes: Vec<TaggedNode<T>>,
    tolerances: &MeshTolerances,
    expendable: &impl Fn(&T) -> bool,
    log: &mut RemeshLog,
) -> Vec<TaggedNode<T>> {
    let lower = tolerances.lower();
    let mut kept: Vec<(usize, TaggedNode<T>)> = Vec::with_capacity(nodes.len());
    for (index, node) in nodes.into_iter().enumerate() {
        if let Some((last_index, last)) = kept.last_mut() {
            if node.z - last.z < lower {
                if expendable(&last.tag) && !expendable(&node.tag) {
                    log.events.push(RemeshEvent::Deleted {
                        index: *last_index,
                        position: last.z,
                    });
                    *last_index = index;
                    *last = node;
                } else {
                    log.events.push(RemeshEvent::Deleted {
                        index,
                        position: node.z,
                    });
                }
                continue;
            }
        }
        kept.push((index, node));
    }
    // Wrap pair (z_N, z_1 + L): the right node is z_1.
    if kept.len() >= 2 {
        let wrap = kept[0].1.z + tolerances.domain_length - kept[kept.len() - 1].1.z;
        if wrap < lower {
            let last = kept.len() - 1;
            let victim = if expendable(&kept[last].1.tag) && !expendable(&kept[0].1.tag) {
                last
            } else {
                0
            };
            let (index, node) = kept.remove(victim);
            log.events.push(RemeshEvent::Deleted {
                index,
                position: node.z,
            });
        }
    }
    kept.into_iter().map(|(_, n)| n).collect()
}

fn insert_pass<T: Copy>(
    nodes: Vec<TaggedNode<T>>,
    tolerances: &MeshTolerances,
    inserted: T,
    inserted_positions: &mut Vec<(f64, f64)>,
) -> Vec<TaggedNode<T>> {
    let length = tolerances.domain_length;
    let upper = tolerances.upper();
    let n = nodes.len();
    let mut out = Vec::with_capacity(n + 8);
    let mut wrapped_front = None;
    for i in 0..n {
        let left = nodes[i];
        out.push(left);
        let (right_z, right_u) = if i + 1 < n {
            (nodes[i + 1].z, nodes[i + 1].u)
        } else {
            (nodes[0].z + length, nodes[0].u)
        };
        let gap = right_z - left.z;
        if gap > upper {
            let mut z = left.z + 0.5 * gap;
            let u = 0.5 * (left.u + right_u);
            if z >= length {
                z -= length;
            }
            let node = TaggedNode {
                z,
                u,
                tag: inserted,
            };
            inserted_positions.push((z, u));
            if i + 1 == n && z < left.z {
                wrapped_front = Some(node);
            } else {
                out.push(node);
            }
        }
    }
    if let Some(node) = wrapped_front {
        out.insert(0, node);
    }
    out
}

/// Write `time,node_index,z,u` rows for one snapshot.
pub fn write_snapshot_csv<W: Write>(
    out: &mut W,
    time: f64,
    mesh: &AdaptiveMesh,
    values: &[f64],
) -> io::Result<()> {
    for (k, (z, u)) in mesh.nodes().iter().zip(values).enumerate() {
        writeln!(out, "{time},{k},{z},{u}")?;
    }
    Ok(())
}
