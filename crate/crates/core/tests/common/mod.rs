//! Shared oracles and generators for the integration tests.
#![allow(dead_code)]

use ammenkf::mesh::{AdaptiveMesh, MeshTolerances};
use ammenkf::models::ModelState;
use rand::Rng;

/// Valid mesh of `n` nodes: equal gaps with a zero-sum perturbation, shifted
/// by a random offset and wrapped into `[0, L)`.
pub fn random_valid_nodes<R: Rng>(rng: &mut R, n: usize, tol: &MeshTolerances) -> Vec<f64> {
    let length = tol.domain_length();
    let base = length / n as f64;
    let margin = (base - tol.delta1()).min(tol.delta2() - base).max(0.0);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = r.iter().sum::<f64>() / n as f64;
    let amp = 0.49 * margin;
    let gaps: Vec<f64> = r.iter().map(|x| base + amp * (x - mean)).collect();
    let offset = rng.random_range(0.0..gaps[0]);
    let mut z = Vec::with_capacity(n);
    let mut acc = offset;
    for g in &gaps {
        z.push(acc % length);
        acc += g;
    }
    z.sort_by(f64::total_cmp);
    z
}

/// Node count range for which a valid mesh exists.
pub fn valid_counts(tol: &MeshTolerances) -> (usize, usize) {
    let length = tol.domain_length();
    let lo = (length / tol.delta2()).ceil() as usize;
    let hi = (length / tol.delta1()).floor() as usize;
    (lo, hi)
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize, tol: MeshTolerances) -> ModelState {
    let z = random_valid_nodes(rng, n, &tol);
    let u = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ModelState::new(AdaptiveMesh::new(z, tol).unwrap(), u, 0.0).unwrap()
}

/// Periodic piecewise-linear interpolation by exhaustive segment search over
/// the node list extended by one period on each side.
pub fn generic_periodic_interp(nodes: &[f64], values: &[f64], length: f64, x: f64) -> f64 {
    let n = nodes.len();
    let mut ext: Vec<(f64, f64)> = Vec::with_capacity(3 * n);
    for shift in [-length, 0.0, length] {
        for k in 0..n {
            ext.push((nodes[k] + shift, values[k]));
        }
    }
    for w in ext.windows(2) {
        let (a, ua) = w[0];
        let (b, ub) = w[1];
        if a <= x && x < b {
            let t = (x - a) / (b - a);
            return (1.0 - t) * ua + t * ub;
        }
    }
    panic!("{x} not bracketed");
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&p, &q| m[p][col].abs().total_cmp(&m[q][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        let d = m[col][col];
        assert!(d != 0.0, "singular matrix");
        for v in &mut m[col] {
            *v /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    let pivot_row = m[col].clone();
                    for (v, p) in m[r].iter_mut().zip(&pivot_row) {
                        *v -= f * p;
                    }
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let inner = b.len();
    let cols = b[0].len();
    a.iter()
        .map(|row| {
            (0..cols)
                .map(|j| (0..inner).map(|k| row[k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len())
        .map(|j| a.iter().map(|row| row[j]).collect())
        .collect()
}

/// Stochastic EnKF analysis written out term by term: plain means, inflated
/// anomalies, ensemble observation error covariance from the perturbations
/// and an explicit inverse of the innovation covariance.
///
/// `members[j]` is a state vector, `perturbed[j]` the observations member `j`
/// is compared with.
pub fn dense_enkf<H>(
    members: &[Vec<f64>],
    obs: &[f64],
    perturbed: &[Vec<f64>],
    alpha: f64,
    h: H,
) -> Vec<Vec<f64>>
where
    H: Fn(&[f64]) -> Vec<f64>,
{
    let ne = members.len();
    let n = members[0].len();
    let p = obs.len();
    let c = 1.0 / ((ne - 1) as f64).sqrt();
    let mean: Vec<f64> = (0..n)
        .map(|i| members.iter().map(|x| x[i]).sum::<f64>() / ne as f64)
        .collect();
    let h_mean = h(&mean);
    let hx: Vec<Vec<f64>> = members.iter().map(|x| h(x)).collect();
    // n x ne and p x ne
    let x: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..ne)
                .map(|j| alpha * c * (members[j][i] - mean[i]))
                .collect()
        })
        .collect();
    let y: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..ne)
                .map(|j| alpha * c * (hx[j][i] - h_mean[i]))
                .collect()
        })
        .collect();
    let yo: Vec<Vec<f64>> = (0..p)
        .map(|i| (0..ne).map(|j| c * (perturbed[j][i] - obs[i])).collect())
        .collect();
    let yt = transpose(&y);
    let mut s = matmul(&y, &yt);
    let re = matmul(&yo, &transpose(&yo));
    for i in 0..p {
        for k in 0..p {
            s[i][k] += re[i][k];
        }
    }
    let gain = matmul(&matmul(&x, &yt), &dense_inverse(&s));
    (0..ne)
        .map(|j| {
            (0..n)
                .map(|i| {
                    members[j][i]
                        + (0..p)
                            .map(|k| gain[i][k] * (perturbed[j][k] - hx[j][k]))
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}
