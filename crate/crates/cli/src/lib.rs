//! Experiment runner behind the `collapse` binary.
//!
//! Every subcommand resolves a [`RunConfig`], runs, writes its artifacts to
//! `out` (when set) and returns a [`Report`]. The binary maps the outcome to
//! an exit status with [`exit_code`].

pub mod compare;
pub mod config;
pub mod modes;
pub mod table;
pub mod verify;

use std::path::{Path, PathBuf};

use collapse_core::fixture::Fixture;
use collapse_core::hilbert::DensityMatrix;
use collapse_core::io::{write_json, Manifest, Report};
use collapse_core::sde::Simulator;
use collapse_core::{Error, Result};

pub use config::{Command, Mode, Overrides, RunConfig};

/// Exit status: 0 all checks pass, 1 a check failed, 2 configuration, input
/// or validation error, 3 numeric failure.
pub fn exit_code(outcome: &Result<Report>) -> i32 {
    match outcome {
        Ok(r) if r.passed => 0,
        Ok(_) => 1,
        Err(e) if e.is_numeric() => 3,
        Err(_) => 2,
    }
}

/// Resolved inputs shared by every mode.
pub struct Context {
    pub command: Command,
    pub config: RunConfig,
    pub fixture: Fixture,
    pub manifest: Manifest,
}

impl Context {
    pub fn new(command: Command, config: RunConfig) -> Result<Self> {
        let fixture = Fixture::resolve(&config.fixture)?;
        let manifest = Manifest::new(
            command.name(),
            &fixture.name,
            &fixture.hash(),
            config.identity(),
            config.sim.seed,
        );
        Ok(Self {
            command,
            config,
            fixture,
            manifest,
        })
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.config.out.as_deref()
    }

    pub fn out_file(&self, name: &str) -> Option<PathBuf> {
        self.out_dir().map(|d| d.join(name))
    }

    pub fn provenance(&self) -> String {
        self.manifest.provenance()
    }

    pub fn rho0(&self) -> DensityMatrix {
        self.fixture.initial_density()
    }

    /// Simulator for the fixture, with the record stride derived from
    /// `record_points` when that is set.
    pub fn simulator(&self, record_states: bool) -> Result<Simulator> {
        let mut sim_config = self.config.sim.clone();
        sim_config.record_states |= record_states;
        let build =
            |c| Simulator::energy(&self.fixture.decomposition, c, self.fixture.initial.clone());
        let sim = build(sim_config.clone())?;
        match self.config.record_points {
            Some(points) => {
                sim_config.record_stride = sim.resolved().n_steps.div_ceil(points).max(1);
                build(sim_config)
            }
            None => Ok(sim),
        }
    }

    /// Writes `manifest.json` and `report.json`.
    pub fn finish(&self, report: &Report) -> Result<()> {
        if let Some(dir) = self.out_dir() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            write_json(&dir.join("manifest.json"), &self.manifest)?;
            write_json(&dir.join("report.json"), report)?;
        }
        Ok(())
    }
}

/// Resolves the configuration and runs `command`.
pub fn execute(
    command: Command,
    config_file: Option<&Path>,
    overrides: &Overrides,
) -> Result<Report> {
    let config = RunConfig::resolve(command, config_file, overrides)?;
    run(command, config)
}

pub fn run(command: Command, config: RunConfig) -> Result<Report> {
    let ctx = Context::new(command, config)?;
    let report = match command {
        Command::Compare => compare::run(&ctx)?,
        _ => match ctx.config.mode {
            Mode::Sde => modes::sde(&ctx)?,
            Mode::GirsanovScalar => modes::girsanov_scalar(&ctx)?,
            Mode::GirsanovWeighted => modes::girsanov_weighted(&ctx)?,
            Mode::LindbladClosed | Mode::LindbladOde => modes::lindblad(&ctx)?,
            Mode::VerifyAll => verify::run(&ctx)?,
        },
    };
    ctx.finish(&report)?;
    Ok(report)
}
