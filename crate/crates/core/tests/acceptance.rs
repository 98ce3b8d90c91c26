//! Acceptance suite. Every criterion prints one PASS/FAIL line; the target
//! fails if any criterion does.

mod common;

use std::time::Instant;

use ammenkf::dimension::{self, GhostSpread, MatchedMember, ReferencePartition};
use ammenkf::enkf::{self, FilterConfig, MatchedEnsemble};
use ammenkf::experiment::{
    self, ExperimentConfig, RunRecord, Scheme, Seeds, SweepGrid, SweepResult,
};
use ammenkf::mesh::{self, AdaptiveMesh, MeshTolerances};
use ammenkf::metrics;
use ammenkf::models::ModelKind;
use ammenkf::observations::{self, ObservationOperator, ObservationSet};
use ammenkf::seeding;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use common::{dense_enkf, generic_periodic_interp, random_state, valid_counts};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn bgm_tolerances() -> MeshTolerances {
    MeshTolerances::new(0.01, 0.02, 1.0).unwrap()
}

fn bgm(scheme: Scheme, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        scheme,
        seeds: Seeds::from_base(seed),
        ..ExperimentConfig::bgm()
    }
}

fn best_rmse(result: &SweepResult) -> f64 {
    result
        .best_cell()
        .and_then(|c| c.rmse())
        .unwrap_or(f64::INFINITY)
}

fn mesh_invariants() -> Outcome {
    let started = Instant::now();
    let tol = bgm_tolerances();
    let mut rng = seeding::stream(101, &[]);
    let mut invalid = 0;
    let mut not_idempotent = 0;
    for case in 0..10_000 {
        let nodes: Vec<f64> = if case % 2 == 0 {
            // arbitrary sorted node sets, from far too sparse to far too dense
            let n = rng.random_range(2..250);
            let mut z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            z.sort_by(f64::total_cmp);
            z
        } else {
            // a valid mesh moved by a random displacement field
            let (lo, hi) = valid_counts(&tol);
            let n = rng.random_range(lo..=hi);
            let mut z = common::random_valid_nodes(&mut rng, n, &tol);
            let amp = rng.random_range(0.0..0.02);
            for v in &mut z {
                *v = mesh::wrap_into_domain(*v + amp * rng.random_range(-1.0..1.0), 1.0).unwrap();
            }
            z.sort_by(f64::total_cmp);
            z
        };
        let u: Vec<f64> = (0..nodes.len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let m = AdaptiveMesh::new(nodes, tol).unwrap();
        let (m1, u1, _) = mesh::remesh(&m, &u).unwrap();
        if !m1.is_valid() {
            invalid += 1;
            continue;
        }
        let (m2, u2, log) = mesh::remesh(&m1, &u1).unwrap();
        if m2 != m1 || u2 != u1 || !log.is_empty() {
            not_idempotent += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        invalid == 0 && not_idempotent == 0 && secs < 10.0,
        format!("10^4 round trips: {invalid} invalid, {not_idempotent} not idempotent, {secs:.2} s (limit 10 s)"),
    )
}

fn random_ensemble<R: Rng>(
    rng: &mut R,
    m: usize,
    ne: usize,
    hr: bool,
) -> (MatchedEnsemble, ReferencePartition) {
    let delta1 = 1.0 / m as f64;
    let tol = MeshTolerances::new(delta1, 2.0 * delta1, 1.0).unwrap();
    let partition = ReferencePartition::new(&tol).unwrap();
    let (lo, hi) = valid_counts(&tol);
    let members: Vec<MatchedMember> = (0..ne)
        .map(|_| {
            let n = rng.random_range(lo.max(2)..=hi);
            let state = random_state(rng, n, tol);
            if hr {
                dimension::match_hr(&state, &partition).unwrap()
            } else {
                dimension::match_hra(&state, &partition, GhostSpread::StdDev, rng).unwrap()
            }
        })
        .collect();
    (MatchedEnsemble::new(members, partition).unwrap(), partition)
}

fn enkf_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = seeding::stream(202, &[]);
    let mut worst: f64 = 0.0;
    for case in 0..50u64 {
        let p = rng.random_range(1..=3usize);
        let ne = rng.random_range((p + 1).max(2)..=5);
        let m = [4usize, 6][rng.random_range(0..2usize)];
        let hr = case % 2 == 0;
        let (ens, partition) = random_ensemble(&mut rng, m, ne, hr);
        let mut locations: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..1.0)).collect();
        locations.sort_by(f64::total_cmp);
        let values: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sigma = rng.random_range(0.05..0.5);
        let obs = ObservationSet::new(0.0, locations.clone(), values.clone(), sigma).unwrap();
        let alpha = rng.random_range(0.5..1.6);
        let config = FilterConfig::new(ne, alpha, 0.0).unwrap();
        let operator = if hr {
            ObservationOperator::hr(partition, &locations).unwrap()
        } else {
            ObservationOperator::hra(1.0, &locations).unwrap()
        };
        let seed = 1000 + case;
        let (updated, _) = enkf::analysis(&ens, &obs, &config, &operator, seed).unwrap();

        let perturbed = enkf::perturb_observations(&obs, ne, seed);
        let perturbed: Vec<Vec<f64>> = (0..ne)
            .map(|j| perturbed.values.column(j).iter().copied().collect())
            .collect();
        let members: Vec<Vec<f64>> = ens.members().iter().map(|mm| mm.state.clone()).collect();
        let h = |x: &[f64]| -> Vec<f64> {
            let (nodes, vals): (Vec<f64>, Vec<f64>) = if hr {
                (partition.gammas(), x[..m].to_vec())
            } else {
                (x[m..].to_vec(), x[..m].to_vec())
            };
            locations
                .iter()
                .map(|&l| generic_periodic_interp(&nodes, &vals, 1.0, l))
                .collect()
        };
        let expected = dense_enkf(&members, &values, &perturbed, alpha, h);
        for (a, b) in updated.members().iter().zip(&expected) {
            for (x, y) in a.state.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-10 && secs < 5.0,
        format!("50 instances: max |diff| {worst:.2e} (limit 1e-10), {secs:.3} s (limit 5 s)"),
    )
}

fn interpolation_oracles() -> Outcome {
    let mut rng = seeding::stream(303, &[]);
    let tol = bgm_tolerances();
    let partition = ReferencePartition::new(&tol).unwrap();
    let gammas = partition.gammas();
    let (lo, hi) = valid_counts(&tol);
    let (mut hr_err, mut hra_err, mut ghost_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let mut ghosts = 0usize;
    for _ in 0..1000 {
        let u: Vec<f64> = (0..partition.m())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = rng.random_range(0.0..1.0);
        let got = observations::observe_hr(&u, &partition, x).unwrap();
        hr_err = hr_err.max((got - generic_periodic_interp(&gammas, &u, 1.0, x)).abs());

        let n = rng.random_range(lo..=hi);
        let state = random_state(&mut rng, n, tol);
        let matched =
            dimension::match_hra(&state, &partition, GhostSpread::StdDev, &mut rng).unwrap();
        let got = observations::observe_hra(&matched.state, 1.0, x).unwrap();
        let want = generic_periodic_interp(matched.z_block(), matched.u_block(), 1.0, x);
        hra_err = hra_err.max((got - want).abs());

        // each ghost lies on the line from its left entry to the next original node
        let z = state.nodes();
        let m = matched.m();
        for i in (0..m).filter(|&i| matched.ghost_mask[i]) {
            let zg = matched.z_block()[i];
            let (zl, ul) = if i > 0 {
                (matched.z_block()[i - 1], matched.u_block()[i - 1])
            } else {
                (z[z.len() - 1], state.u[z.len() - 1])
            };
            let (zr, ur) = match z.iter().position(|&zk| zk > zg) {
                Some(k) => (z[k], state.u[k]),
                None => (z[0], state.u[0]),
            };
            let want =
                generic_periodic_interp(&sorted2(zl, zr), &sorted_vals(zl, ul, zr, ur), 1.0, zg);
            ghost_err = ghost_err.max((matched.u_block()[i] - want).abs());
            ghosts += 1;
        }
    }
    let worst = hr_err.max(hra_err).max(ghost_err);
    outcome(
        worst <= 1e-13 && ghosts > 0,
        format!(
            "10^3 cases: observe_hr {hr_err:.1e}, observe_hra {hra_err:.1e}, ghost values {ghost_err:.1e} over {ghosts} ghosts (limit 1e-13)"
        ),
    )
}

fn sorted2(a: f64, b: f64) -> Vec<f64> {
    if a <= b {
        vec![a, b]
    } else {
        vec![b, a]
    }
}

fn sorted_vals(za: f64, ua: f64, zb: f64, ub: f64) -> Vec<f64> {
    if za <= zb {
        vec![ua, ub]
    } else {
        vec![ub, ua]
    }
}

struct SeedSweeps {
    seed: u64,
    free: f64,
    hr: SweepResult,
    hra: SweepResult,
}

fn seed_sweeps(seed: u64) -> SeedSweeps {
    let grid = SweepGrid::preset(ModelKind::Bgm);
    let free = experiment::run_twin(&bgm(Scheme::Free, seed))
        .unwrap()
        .rmse()
        .unwrap_or(f64::INFINITY);
    SeedSweeps {
        seed,
        free,
        hr: experiment::sweep(&bgm(Scheme::Hr, seed), &grid, None).unwrap(),
        hra: experiment::sweep(&bgm(Scheme::Hra, seed), &grid, None).unwrap(),
    }
}

fn filter_skill(sweeps: &[SeedSweeps], secs: f64) -> Outcome {
    let mut passed = 0;
    let mut lines = Vec::new();
    for s in sweeps {
        let (hr, hra) = (best_rmse(&s.hr), best_rmse(&s.hra));
        let ok = hra <= hr && hr <= s.free && hra < 0.5 * s.free;
        passed += ok as usize;
        lines.push(format!(
            "seed {}: FREE {:.5} HR {:.5} HRA {:.5} {}",
            s.seed,
            s.free,
            hr,
            hra,
            if ok { "ok" } else { "no" }
        ));
    }
    outcome(
        passed >= 4 && secs < 600.0,
        format!(
            "{passed}/5 seeds satisfy HRA <= HR <= FREE and HRA < 0.5 FREE (need 4), {secs:.0} s (limit 600 s)\n      {}",
            lines.join("\n      ")
        ),
    )
}

fn spread_collapse() -> Outcome {
    let run = |scheme| {
        let cfg = ExperimentConfig {
            alpha: 1.0,
            alpha_j: 0.0,
            ..bgm(scheme, 0)
        };
        let record = experiment::run_twin(&cfg).unwrap();
        record
            .cycles
            .iter()
            .find(|c| c.cycle == 20)
            .map(|c| c.forecast.spread)
            .unwrap_or(f64::NAN)
    };
    let (hr, hra) = (run(Scheme::Hr), run(Scheme::Hra));
    let ratio = hra / hr;
    outcome(
        ratio < 0.25,
        format!("forecast spread at cycle 20: HR {hr:.5}, HRA {hra:.5}, ratio {ratio:.3} (limit < 0.25)"),
    )
}

fn hr_positions() -> Outcome {
    let cfg = bgm(Scheme::Hr, 0);
    let tol = cfg.validate().unwrap().tolerances;
    let gammas = ReferencePartition::new(&tol).unwrap().gammas();
    let mut checked = 0usize;
    let mut mismatched = 0usize;
    let record = experiment::run_twin_with(&cfg, |view| {
        if let Some(ens) = view.matched_analysis {
            for member in ens.members() {
                checked += 1;
                let same = member
                    .z_block()
                    .iter()
                    .zip(&gammas)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                mismatched += (!same) as usize;
            }
        }
    })
    .unwrap();
    let complete = record.failure.is_none() && checked == cfg.n_ensemble * cfg.cycles();
    outcome(
        complete && mismatched == 0,
        format!("{checked} analysis states checked, {mismatched} with positions differing from the reference nodes"),
    )
}

fn covariance_gradient() -> Outcome {
    let record = experiment::run_twin(&bgm(Scheme::Hra, 0)).unwrap();
    let after: Vec<Option<f64>> = record
        .cycles
        .iter()
        .filter(|c| c.time > 1.0 + 1e-9)
        .map(|c| c.cov_gradient_corr)
        .collect();
    let good = after.iter().filter(|c| c.is_some_and(|r| r > 0.5)).count();
    let frac = good as f64 / after.len().max(1) as f64;
    let min = after
        .iter()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);
    outcome(
        !after.is_empty() && frac >= 0.8,
        format!(
            "corr(diag C_uz, gradient) > 0.5 at {good}/{} analysis times after t = 1 ({:.0}%, need 80%), min {min:.3}",
            after.len(),
            100.0 * frac
        ),
    )
}

fn jitter_valley(hra: &SweepResult) -> Outcome {
    let global = best_rmse(hra);
    let column = hra
        .cells
        .iter()
        .filter(|c| c.alpha_j == 0.0)
        .filter_map(|c| c.rmse())
        .fold(f64::INFINITY, f64::min);
    outcome(
        column >= 1.1 * global,
        format!(
            "min RMSE at alpha_J = 0: {column:.5}, global min {global:.5}, ratio {:.3} (need >= 1.1)",
            column / global
        ),
    )
}

/// Optimal HRA RMSE averaged over the five acceptance seeds, so that the
/// trend is not decided by the noise of a single nature run.
fn ensemble_saturation(sweeps: &[SeedSweeps]) -> Outcome {
    let grid = SweepGrid::preset(ModelKind::Bgm);
    let mean_best = |ne: usize| {
        let total: f64 = sweeps
            .iter()
            .map(|s| {
                if ne == s.hra.template.n_ensemble {
                    return best_rmse(&s.hra);
                }
                let cfg = ExperimentConfig {
                    n_ensemble: ne,
                    ..bgm(Scheme::Hra, s.seed)
                };
                best_rmse(&experiment::sweep(&cfg, &grid, None).unwrap())
            })
            .sum();
        total / sweeps.len() as f64
    };
    let (r20, r30, r90) = (mean_best(20), mean_best(30), mean_best(90));
    let early = r20 - r30;
    let late = r30 - r90;
    outcome(
        late < 0.2 * early,
        format!(
            "seed-mean optimal HRA RMSE Ne=20 {r20:.5}, Ne=30 {r30:.5}, Ne=90 {r90:.5}; improvement 30->90 {late:.2e} vs 20% of 20->30 {:.2e}",
            0.2 * early
        ),
    )
}

fn metrics_sanity() -> Outcome {
    let mut rng = seeding::stream(1010, &[]);
    let d: Vec<f64> = (0..10_000)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let fid = metrics::ensemble_fidelity(&[vec![d]]).unwrap();
    let k = fid.k_ens.unwrap_or(f64::NAN);
    let kurt_ok = (k - 3.0).abs() <= 0.05 * 3.0;

    // d = (3, 4): sum of squares 25, so (1/M) sqrt(25) = 2.5 and sqrt(25/2)
    let two = metrics::ensemble_fidelity(&[vec![vec![3.0, 4.0]]]).unwrap();
    let two_ok = (two.rmse_ens - 2.5).abs() < 1e-15
        && (two.rmse_ens_conventional - 12.5f64.sqrt()).abs() < 1e-15
        && (two.sigma_ens - 0.25).abs() < 1e-15;
    outcome(
        kurt_ok && two_ok,
        format!(
            "k_ens of 10^4 Gaussian errors {k:.4} (3 +/- 0.15); two-point RMSE_ens {} (2.5), conventional {:.6} ({:.6})",
            two.rmse_ens,
            two.rmse_ens_conventional,
            12.5f64.sqrt()
        ),
    )
}

fn scalars(record: &RunRecord) -> RunRecord {
    RunRecord {
        wall_clock_s: 0.0,
        ..record.clone()
    }
}

fn determinism() -> Outcome {
    let cfg = ExperimentConfig {
        alpha: 1.2,
        alpha_j: 0.02,
        ..bgm(Scheme::Hra, 7)
    };
    let in_pool = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| experiment::run_twin(&cfg).unwrap())
    };
    let a = scalars(&in_pool(1));
    let b = scalars(&in_pool(2));
    let c = scalars(&experiment::run_twin(&cfg).unwrap());
    let runs_equal = a == b && b == c;

    let grid = SweepGrid {
        alpha: vec![0.8, 1.0, 1.2],
        alpha_j: vec![0.0, 0.02],
    };
    let s1 = experiment::sweep(&cfg, &grid, Some(1)).unwrap();
    let s2 = experiment::sweep(&cfg, &grid, Some(2)).unwrap();
    let sweeps_equal =
        s1 == s2 && experiment::sweep_summary_csv(&s1) == experiment::sweep_summary_csv(&s2);
    outcome(
        runs_equal && sweeps_equal,
        format!("repeated runs identical: {runs_equal}; sweep with jobs 1 and 2 identical: {sweeps_equal}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!(
            "criterion {n:>2} {:<28} {}  {}",
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((n, name, o));
    };

    report(1, "mesh invariants", mesh_invariants());
    report(2, "EnKF dense oracle", enkf_oracle());
    report(3, "interpolation oracles", interpolation_oracles());

    let started = Instant::now();
    let sweeps: Vec<SeedSweeps> = (0..5).map(seed_sweeps).collect();
    let secs = started.elapsed().as_secs_f64();
    report(4, "filter skill", filter_skill(&sweeps, secs));
    report(5, "spread collapse", spread_collapse());
    report(6, "HR position invariance", hr_positions());
    report(7, "covariance-gradient", covariance_gradient());
    report(8, "jitter valley", jitter_valley(&sweeps[0].hra));
    report(9, "ensemble-size saturation", ensemble_saturation(&sweeps));
    report(10, "metrics sanity", metrics_sanity());
    report(11, "determinism", determinism());

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed",
        results.len() - failed.len(),
        failed.len()
    );
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
