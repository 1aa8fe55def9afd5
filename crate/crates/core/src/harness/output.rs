use std::io::Write;
use std::time::Duration;

use serde::Serialize;

use super::{ConvergenceCell, NmseRecord, TrajectoryPoint};
use crate::error::Result;

/// `kind,snr_db,nmse,ci`; the noiseless point is written as `inf`.
pub fn write_nmse_csv<W: Write>(records: &[NmseRecord], mut w: W) -> Result<()> {
    writeln!(w, "kind,snr_db,nmse,ci")?;
    for r in records {
        let snr = r.snr_db.map_or_else(|| "inf".to_string(), |s| s.to_string());
        writeln!(w, "{},{snr},{},{}", r.kind.name(), r.nmse, r.ci_half_width)?;
    }
    Ok(())
}

/// `t,x,y`; infeasible points are written as `NaN`.
pub fn write_trajectory_csv<W: Write>(points: &[TrajectoryPoint], mut w: W) -> Result<()> {
    writeln!(w, "t,x,y")?;
    for p in points {
        writeln!(w, "{},{},{}", p.t, p.x_m, p.y_m)?;
    }
    Ok(())
}

pub fn write_convergence_csv<W: Write>(cells: &[ConvergenceCell], mut w: W) -> Result<()> {
    writeln!(w, "dynamic_paths,static_paths,error_proportion,convergence_probability,trials")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{}",
            c.dynamic_paths, c.static_paths, c.error_proportion, c.convergence_probability, c.trials
        )?;
    }
    Ok(())
}

/// Run record written next to every harness output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<S: Serialize> {
    pub command: String,
    pub spec: S,
    pub seed: u64,
    pub software_version: String,
    pub wall_time_s: f64,
    /// SHA-256 of the configuration file the run was started from.
    pub config_sha256: Option<String>,
    /// Extra facts about the outputs, e.g. the NMSE normalisation.
    pub notes: Vec<String>,
}

impl<S: Serialize> RunManifest<S> {
    pub fn new(command: &str, spec: S, seed: u64, wall_time: Duration) -> Self {
        RunManifest {
            command: command.to_string(),
            spec,
            seed,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: wall_time.as_secs_f64(),
            config_sha256: None,
            notes: Vec::new(),
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}
