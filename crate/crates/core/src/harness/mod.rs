//! Desk-scale studies: Taylor convergence, NMSE against SNR, spectrum
//! shapes against a conventional MUSIC baseline, and trajectory recovery.
//!
//! Every study is reproducible from its settings and seed. Trials run on the
//! rayon pool and are aggregated in trial order.

mod convergence;
mod output;
mod spectra;
mod sweep;
mod trajectory;

pub use convergence::{run_convergence_cell, run_convergence_study, ConvergenceCell, ConvergenceSpec};
pub use output::{write_convergence_csv, write_nmse_csv, write_trajectory_csv, RunManifest};
pub use spectra::{
    conventional_music, run_spectrum_shapes, write_delay_csv, SpectrumShapes, SpectrumSpec,
};
pub use sweep::{
    run_nmse_sweep, run_trial, trial_errors, NmseRecord, ParamKind, SweepReport, SweepSpec, TrialErrors,
    NMSE_NORMALISATION,
};
pub use trajectory::{
    kalman_smooth, trajectory_from_estimates, BistaticGeometry, FrameEstimate, KalmanConfig, TrajectoryPoint,
};
