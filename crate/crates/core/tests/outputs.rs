//! End-to-end runs and their written artefacts.

use ammenkf::experiment::{self, ExperimentConfig, RunRecord, Scheme};

fn short_bgm(scheme: Scheme) -> ExperimentConfig {
    ExperimentConfig {
        scheme,
        n_ensemble: 8,
        duration: 0.5,
        averaging_start: 0.25,
        ..ExperimentConfig::bgm()
    }
}

#[test]
fn run_writes_record_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let record = experiment::run_twin(&short_bgm(Scheme::Hra)).unwrap();
    let out = experiment::write_run(dir.path(), &record).unwrap();
    let json = std::fs::read_to_string(out.join("record.json")).unwrap();
    let back: RunRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back.rmse(), record.rmse());
    assert_eq!(back.cycles.len(), 10);
    let diag = std::fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(diag.starts_with("cycle,time,phase,"));
    assert_eq!(diag.lines().count(), 1 + 2 * 10);
    assert!(out.join("metrics.csv").exists());
    // no temporary files left behind
    let stray = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_string_lossy()
                .contains(".tmp")
        })
        .count();
    assert_eq!(stray, 0);
}

#[test]
fn schemes_share_truth_and_observations() {
    let mut seen: Vec<Vec<Vec<f64>>> = Vec::new();
    for scheme in [Scheme::Free, Scheme::Hr, Scheme::Hra] {
        let mut obs = Vec::new();
        experiment::run_twin_with(&short_bgm(scheme), |view| {
            obs.push(view.observations.values.clone())
        })
        .unwrap();
        seen.push(obs);
    }
    assert_eq!(seen[0], seen[1]);
    assert_eq!(seen[1], seen[2]);
}

#[test]
fn filters_beat_free_run_on_default_seed() {
    let rmse = |s| {
        experiment::run_twin(&ExperimentConfig {
            scheme: s,
            ..ExperimentConfig::bgm()
        })
        .unwrap()
        .rmse()
        .unwrap()
    };
    let free = rmse(Scheme::Free);
    assert!(rmse(Scheme::Hr) < free);
    assert!(rmse(Scheme::Hra) < free);
}

#[test]
fn short_ksm_run_completes() {
    let cfg = ExperimentConfig {
        n_ensemble: 6,
        spin_up: 0.5,
        duration: 0.1,
        averaging_start: 0.55,
        ..ExperimentConfig::ksm()
    };
    let record = experiment::run_twin(&cfg).unwrap();
    assert!(record.failure.is_none(), "{:?}", record.failure);
    assert!(record.rmse().unwrap().is_finite());
}

#[test]
fn sweep_summary_has_one_row_per_cell() {
    let grid = experiment::SweepGrid {
        alpha: vec![1.0, 1.2],
        alpha_j: vec![0.0, 0.01, 0.02],
    };
    let result = experiment::sweep(&short_bgm(Scheme::Hr), &grid, Some(1)).unwrap();
    let csv = experiment::sweep_summary_csv(&result);
    assert_eq!(csv.lines().count(), 1 + 6);
    assert_eq!(csv.lines().skip(1).filter(|l| l.ends_with(",1")).count(), 1);
}
