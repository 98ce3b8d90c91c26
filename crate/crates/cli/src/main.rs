//! `ammenkf`: run twin experiments, sweeps, sensitivity suites and
//! covariance dumps from a TOML configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ammenkf::experiment::{
    self, ExperimentConfig, ExperimentError, RunRecord, Scheme, Seeds, SensitivityKind,
};
use ammenkf::models::ModelKind;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "ammenkf",
    version,
    about = "EnKF twin experiments on 1-D adaptive moving meshes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one twin experiment.
    Run(Common),
    /// Sweep inflation and jitter over the configured grid.
    Sweep(Common),
    /// Tuned scores of every scheme across one parameter.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        /// Parameter to vary: ensemble, mesh or obs-error.
        #[arg(long, value_parser = parse_kind)]
        experiment: SensitivityKind,
    },
    /// Run once and write the forecast covariance at every analysis time.
    DumpCov(Common),
    /// Check a configuration without running it.
    ValidateConfig(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration instead of a file: bgm or ksm.
    #[arg(long, value_parser = parse_model)]
    preset: Option<ModelKind>,
    /// Output root.
    #[arg(long, env = "AMMENKF_OUT", default_value = "out")]
    out: PathBuf,
    /// Assimilation scheme: FREE, HR or HRA.
    #[arg(long)]
    scheme: Option<Scheme>,
    /// Multiplicative inflation.
    #[arg(long)]
    alpha: Option<f64>,
    /// Jitter coefficient.
    #[arg(long = "alpha-j")]
    alpha_j: Option<f64>,
    /// Base seed; every stream seed is derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweeps; defaults to the available cores.
    #[arg(long)]
    jobs: Option<usize>,
}

fn parse_kind(s: &str) -> Result<SensitivityKind, String> {
    s.parse()
}

fn parse_model(s: &str) -> Result<ModelKind, String> {
    match s.to_ascii_lowercase().as_str() {
        "bgm" => Ok(ModelKind::Bgm),
        "ksm" => Ok(ModelKind::Ksm),
        other => Err(format!("unknown preset {other:?} (expected bgm or ksm)")),
    }
}

/// A failure and the exit code it maps to.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            kind: "config",
            message: e.to_string(),
        }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            kind: "runtime",
            message: e.to_string(),
        }
    }
}

impl Common {
    /// File or preset with command-line overrides applied, validated.
    fn load(&self) -> Result<ExperimentConfig, Failure> {
        let mut config = match (&self.config, self.preset) {
            (Some(path), _) => ExperimentConfig::load(path).map_err(|e| match e {
                ExperimentError::Io(io) => Failure::config(format!("{}: {io}", path.display())),
                other => Failure::config(other),
            })?,
            (None, Some(kind)) => ExperimentConfig::preset(kind),
            (None, None) => return Err(Failure::config("either --config or --preset is required")),
        };
        if let Some(s) = self.scheme {
            config.scheme = s;
        }
        if let Some(a) = self.alpha {
            config.alpha = a;
        }
        if let Some(aj) = self.alpha_j {
            config.alpha_j = aj;
        }
        if let Some(seed) = self.seed {
            config.seeds = Seeds::from_base(seed);
        }
        if self.jobs == Some(0) {
            return Err(Failure::config("--jobs must be at least 1"));
        }
        config.validate().map_err(Failure::config)?;
        Ok(config)
    }
}

fn progress(msg: &str) {
    eprintln!("ammenkf: {msg}");
}

fn report_run(record: &RunRecord, dir: &Path) {
    match (&record.failure, record.rmse()) {
        (Some(f), _) => progress(&format!(
            "{} failed at t = {}: {} ({})",
            record.id,
            f.time,
            f.message,
            dir.display()
        )),
        (None, Some(rmse)) => progress(&format!(
            "{} done in {:.2} s, analysis RMSE {rmse:.6} ({})",
            record.id,
            record.wall_clock_s,
            dir.display()
        )),
        (None, None) => progress(&format!("{} done ({})", record.id, dir.display())),
    }
}

fn run(common: &Common, dump: bool) -> Result<(), Failure> {
    let mut config = common.load()?;
    config.dump_covariance |= dump;
    let dir = common.out.join("runs").join(config.run_id());
    progress(&format!(
        "running {} for {} cycles",
        config.run_id(),
        config.cycles()
    ));
    let mut io_error = None;
    let record = experiment::run_twin_with(&config, |view| {
        if !config.dump_covariance || io_error.is_some() {
            return;
        }
        if let Some(ens) = view.matched_forecast {
            if let Err(e) = experiment::write_covariance(&dir, view.cycle, ens) {
                io_error = Some(e);
            }
        }
    })
    .map_err(Failure::runtime)?;
    if let Some(e) = io_error {
        return Err(Failure::runtime(e));
    }
    if config.dump_covariance && config.scheme == Scheme::Free {
        progress("FREE runs have no matched ensemble; no covariance written");
    }
    let dir = experiment::write_run(&common.out, &record).map_err(Failure::runtime)?;
    report_run(&record, &dir);
    match &record.failure {
        Some(f) => Err(Failure::runtime(format!(
            "run failed at t = {}: {}",
            f.time, f.message
        ))),
        None => Ok(()),
    }
}

fn sweep(common: &Common) -> Result<(), Failure> {
    let config = common.load()?;
    let grid = config.sweep_grid();
    progress(&format!(
        "sweeping {} cells ({} alpha x {} alpha_j) for {}",
        grid.alpha.len() * grid.alpha_j.len(),
        grid.alpha.len(),
        grid.alpha_j.len(),
        config.scheme
    ));
    let result = experiment::sweep(&config, &grid, common.jobs).map_err(Failure::runtime)?;
    let path = common.out.join("sweep_summary.csv");
    experiment::write_atomic(&path, experiment::sweep_summary_csv(&result).as_bytes())
        .map_err(Failure::runtime)?;
    let json = serde_json::to_vec_pretty(&result).map_err(Failure::runtime)?;
    experiment::write_atomic(&common.out.join("sweep.json"), &json).map_err(Failure::runtime)?;
    match result.best_cell() {
        Some(best) => progress(&format!(
            "best alpha = {}, alpha_j = {}, RMSE {:.6}; {} failed cells ({})",
            best.alpha,
            best.alpha_j,
            best.rmse().unwrap_or(f64::NAN),
            result.failures(),
            path.display()
        )),
        None => progress(&format!("every cell failed ({})", path.display())),
    }
    Ok(())
}

fn sensitivity(common: &Common, kind: SensitivityKind) -> Result<(), Failure> {
    let config = common.load()?;
    progress(&format!("sensitivity suite over {}", kind.name()));
    let rows =
        experiment::sensitivity_suite(&config, kind, common.jobs).map_err(Failure::runtime)?;
    let path = common.out.join(format!("sensitivity_{}.csv", kind.name()));
    experiment::write_atomic(&path, experiment::sensitivity_csv(kind, &rows).as_bytes())
        .map_err(Failure::runtime)?;
    progress(&format!("{} rows ({})", rows.len(), path.display()));
    Ok(())
}

fn validate(common: &Common) -> Result<(), Failure> {
    let config = common.load()?;
    progress(&format!(
        "configuration valid: {} {}, {} cycles",
        config.model.kind,
        config.scheme,
        config.cycles()
    ));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(c) => run(c, false),
        Command::DumpCov(c) => run(c, true),
        Command::Sweep(c) => sweep(c),
        Command::Sensitivity { common, experiment } => sensitivity(common, *experiment),
        Command::ValidateConfig(c) => validate(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let message = f.message.replace('\n', " ");
            eprintln!("error: kind={} code={} message={message}", f.kind, f.code);
            ExitCode::from(f.code)
        }
    }
}
