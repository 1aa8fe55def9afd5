use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use csir::aoa;
use csir::harness::{
    run_convergence_study, run_nmse_sweep, run_spectrum_shapes, write_convergence_csv, write_delay_csv,
    write_nmse_csv, RunManifest,
};
use csir::numerics::{derive_seed, CMatrix, C64};
use csir::pipeline::estimate_paths;
use csir::signal::io::{load_tensor, read_container, save_tensor};
use csir::signal::{generate_offsets, static_component, synthesize_csi, SystemConfig};

use crate::config::{self, RunConfig};
use crate::{CliError, Common, OUT_DIR_ENV};

/// Seed streams derived from the run seed by `simulate`.
const OFFSET_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

/// Parsed config (default when none was given) and its hash.
struct Run {
    config: RunConfig,
    sha256: Option<String>,
    out_dir: PathBuf,
}

impl Run {
    fn load(common: &Common) -> Result<Run, CliError> {
        let (mut config, sha256) = match &common.config {
            Some(path) => {
                let loaded = config::load(path)?;
                (loaded.config, Some(loaded.sha256))
            }
            None => (RunConfig::default(), None),
        };
        if let Some(seed) = common.seed {
            config.override_seed(seed);
        }
        let out_dir = common
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| config.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&out_dir)
            .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", out_dir.display())))?;
        Ok(Run { config, sha256, out_dir })
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let path = self.out_dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn write_manifest<S: Serialize>(&self, command: &str, spec: S, seed: u64, start: Instant, notes: Vec<String>) -> Result<(), CliError> {
        let mut manifest = RunManifest::new(command, spec, seed, start.elapsed());
        manifest.config_sha256 = self.sha256.clone();
        manifest.notes = notes;
        self.write_json("manifest.json", &manifest)
    }

    fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::Input(format!("config has no [{name}] section")))
    }
}

/// `S_n[g]` as `re[g][n]` and `im[g][n]`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StaticFile {
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

impl StaticFile {
    fn from_matrix(s: &CMatrix) -> Self {
        let rows = |f: fn(&C64) -> f64| (0..s.nrows()).map(|g| (0..s.ncols()).map(|n| f(&s[(g, n)])).collect()).collect();
        StaticFile { re: rows(|c| c.re), im: rows(|c| c.im) }
    }

    fn into_matrix(self, cfg: &SystemConfig) -> Result<CMatrix, CliError> {
        let (_, gc, nc) = cfg.dims();
        let shaped = |rows: &Vec<Vec<f64>>| rows.len() == gc && rows.iter().all(|r| r.len() == nc);
        if !shaped(&self.re) || !shaped(&self.im) {
            return Err(CliError::Input(format!("static component must be {gc} x {nc}")));
        }
        Ok(CMatrix::from_fn(gc, nc, |g, n| C64::new(self.re[g][n], self.im[g][n])))
    }
}

pub fn simulate(common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let run = Run::load(common)?;
    let sys = run.config.system.resolve()?;
    let channel = run.section(&run.config.channel, "channel")?;
    let seed = run.config.seed;
    let paths = channel.paths(&sys, seed)?;
    let offsets = generate_offsets(&run.config.offsets(), sys.packet_count, derive_seed(seed, OFFSET_STREAM))?;
    let noise = sys.snr_db.map(|_| derive_seed(seed, NOISE_STREAM));
    let y = synthesize_csi(&sys, &paths, &offsets, noise)?;
    save_tensor(&y, &run.out_dir.join("csi.bin"))?;
    run.write_json("truth.json", &paths)?;
    run.write_json("static.json", &StaticFile::from_matrix(&static_component(&paths, &sys)))?;
    run.write_manifest("simulate", &run.config, seed, start, Vec::new())
}

pub fn estimate(tensor: &Path, static_path: Option<&Path>, common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let run = Run::load(common)?;
    let y = match &common.config {
        Some(_) => {
            let sys = run.config.system.resolve()?;
            let file = File::open(tensor).map_err(|e| CliError::Input(format!("cannot open {}: {e}", tensor.display())))?;
            read_container(BufReader::new(file), sys)?
        }
        None => load_tensor(tensor)?,
    };
    let sys = y.config().clone();
    let est_cfg = run.config.estimator.resolve(&sys)?;
    let paths = run
        .config
        .estimator
        .paths
        .or_else(|| run.config.channel.as_ref().map(|c| c.dynamic_count()))
        .unwrap_or(1);
    if paths == 0 {
        return Err(CliError::Input("nothing to estimate: zero dynamic paths".into()));
    }
    let reference = match static_path {
        Some(p) => {
            let file = File::open(p).map_err(|e| CliError::Input(format!("cannot open {}: {e}", p.display())))?;
            let parsed: StaticFile = serde_json::from_reader(BufReader::new(file))
                .map_err(|e| CliError::Input(format!("static component {}: {e}", p.display())))?;
            Some(parsed.into_matrix(&sys)?)
        }
        None => None,
    };

    let est = estimate_paths(&y, &est_cfg, paths, reference.as_ref());
    run.write_json("estimates.json", &est)?;
    if let Some(trace) = &est.doppler_spectrum {
        let mut w = run.create("doppler_spectrum.csv")?;
        trace.write_doppler_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(trace) = &est.aoa_spectrum {
        let mut w = run.create("aoa_spectrum.csv")?;
        aoa::write_spectrum_csv(trace, &sys, &mut w)?;
        w.flush()?;
    }
    run.write_manifest("estimate", &run.config, run.config.seed, start, Vec::new())?;
    match est.failure {
        Some(msg) => Err(CliError::Estimator(msg)),
        None => Ok(()),
    }
}

pub fn sweep(common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let run = Run::load(common)?;
    let sys = run.config.system.resolve()?;
    let est_cfg = run.config.estimator.resolve(&sys)?;
    let spec = run.section(&run.config.sweep, "sweep")?;
    let report = run_nmse_sweep(&sys, &est_cfg, spec)?;
    let mut w = run.create("nmse.csv")?;
    write_nmse_csv(&report.records, &mut w)?;
    w.flush()?;
    let failures: usize = report.records.iter().map(|r| r.failures).sum();
    let notes = vec![format!("normalisation: {}", report.normalisation), format!("failed trials: {failures}")];
    run.write_manifest("sweep", spec, spec.seed, start, notes)
}

#[derive(Serialize)]
struct SpectrumSummary<'a> {
    truth: &'a csir::signal::PathSet,
    estimate: &'a csir::pipeline::EstimateSet,
    zero_hz_ratio: f64,
    conventional_peak_hz: f64,
}

pub fn spectrum(common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let run = Run::load(common)?;
    let sys = run.config.system.resolve()?;
    let est_cfg = run.config.estimator.resolve(&sys)?;
    let spec = run.section(&run.config.spectrum, "spectrum")?;
    let shapes = run_spectrum_shapes(&sys, &est_cfg, spec).map_err(|e| CliError::Estimator(e.to_string()))?;
    if let Some(trace) = &shapes.estimate.doppler_spectrum {
        let mut w = run.create("doppler_spectrum.csv")?;
        trace.write_doppler_csv(&mut w)?;
        w.flush()?;
    }
    if let Some(trace) = &shapes.estimate.aoa_spectrum {
        let mut w = run.create("aoa_spectrum.csv")?;
        aoa::write_spectrum_csv(trace, &sys, &mut w)?;
        w.flush()?;
    }
    let mut w = run.create("conventional_spectrum.csv")?;
    shapes.conventional.write_doppler_csv(&mut w)?;
    w.flush()?;
    if !shapes.delay_profiles.is_empty() {
        let mut w = run.create("delay_profiles.csv")?;
        write_delay_csv(&shapes.delay_profiles, &mut w)?;
        w.flush()?;
    }
    let summary = SpectrumSummary {
        truth: &shapes.truth,
        estimate: &shapes.estimate,
        zero_hz_ratio: shapes.zero_hz_ratio,
        conventional_peak_hz: shapes.conventional_peak_hz,
    };
    run.write_json("summary.json", &summary)?;
    run.write_manifest("spectrum", spec, spec.seed, start, Vec::new())
}

pub fn convergence(common: &Common) -> Result<(), CliError> {
    let start = Instant::now();
    let run = Run::load(common)?;
    let sys = run.config.system.resolve()?;
    let spec = run.section(&run.config.convergence, "convergence")?;
    let cells = run_convergence_study(&sys, spec)?;
    let mut w = run.create("convergence.csv")?;
    write_convergence_csv(&cells, &mut w)?;
    w.flush()?;
    run.write_manifest("convergence", spec, spec.seed, start, Vec::new())
}
