//! Experiment harness behind the `efcm` binary.

pub mod commands;
pub mod config;
pub mod run;

use std::path::Path;

use anyhow::Result;

pub use commands::Command;
pub use config::RunConfig;
pub use run::{MetricsFile, RunDir, RunRecord};

/// Run `cmd` with a loaded config: create the run directory, echo the
/// config, execute, then write metrics and the run record. A failed run
/// keeps its directory with `status = "failed"` in `run.json`.
pub fn execute(cmd: Command, cfg: &RunConfig) -> Result<RunDir> {
    let dir = RunDir::create(&cfg.out, cmd.name(), cfg.seed)?;
    dir.write_config(cfg)?;
    let mut record = RunRecord::start(cmd.name(), cfg.seed);
    dir.write_json("run.json", &record)?;
    match cmd.run(cfg, &dir) {
        Ok(m) => {
            commands::write_metrics(&dir, &m)?;
            record.finish("ok");
            dir.write_json("run.json", &record)?;
            Ok(dir)
        }
        Err(e) => {
            record.finish("failed");
            dir.write_json("run.json", &record)?;
            Err(e.context(format!("run directory {}", dir.path.display())))
        }
    }
}

/// Load the config at `path` with `overrides` and run `cmd`.
pub fn run_from_file(cmd: Command, path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunDir> {
    let cfg = config::load(path, overrides)?;
    execute(cmd, &cfg)
}
