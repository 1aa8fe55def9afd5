use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::signal::SPEED_OF_LIGHT;

/// Transmitter–receiver layout. The receiver array sits at `(-d0/2, 0)`
/// facing `+y`, the transmitter at `(d0/2, 0)`; AoA is measured from `+y`
/// towards `+x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BistaticGeometry {
    pub baseline_m: f64,
}

impl Default for BistaticGeometry {
    /// 2.70 m baseline of the reference deployment.
    fn default() -> Self {
        BistaticGeometry { baseline_m: 2.70 }
    }
}

impl BistaticGeometry {
    pub fn receiver(&self) -> (f64, f64) {
        (-self.baseline_m / 2.0, 0.0)
    }

    pub fn transmitter(&self) -> (f64, f64) {
        (self.baseline_m / 2.0, 0.0)
    }

    /// Transmitter–target–receiver path length.
    pub fn path_length(&self, target: (f64, f64)) -> f64 {
        let (rx, tx) = (self.receiver(), self.transmitter());
        (target.0 - rx.0).hypot(target.1 - rx.1) + (target.0 - tx.0).hypot(target.1 - tx.1)
    }

    /// AoA of the reflection at the receiver.
    pub fn aoa(&self, target: (f64, f64)) -> f64 {
        let rx = self.receiver();
        (target.0 - rx.0).atan2(target.1 - rx.1)
    }

    /// Receiver–target range from the total path length and the AoA, by the
    /// cosine law on the bistatic triangle:
    /// `(L - d_r)^2 = d_r^2 + d0^2 - 2 d_r d0 sin(theta)`.
    /// `None` when no triangle exists (`L <= d0`).
    pub fn receiver_range(&self, path_length: f64, aoa: f64) -> Option<f64> {
        let d0 = self.baseline_m;
        if !(path_length > d0) {
            return None;
        }
        let range = (path_length * path_length - d0 * d0) / (2.0 * (path_length - d0 * aoa.sin()));
        (range.is_finite() && range >= 0.0).then_some(range)
    }
}

/// Per-frame estimates fed to the trajectory solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameEstimate {
    pub t: f64,
    pub aoa_rad: f64,
    pub delay_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    /// NaN when the geometry is infeasible.
    pub x_m: f64,
    pub y_m: f64,
    pub d_r_m: f64,
    pub theta_rad: f64,
    /// Delay after smoothing (equal to the input without smoothing).
    pub tau_s: f64,
    pub feasible: bool,
}

/// Constant-velocity Kalman filter settings. `process_noise` is the white
/// acceleration spectral density in (unit/s^2)^2 per Hz.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KalmanConfig {
    pub dt: f64,
    #[serde(default = "default_process_noise")]
    pub process_noise: f64,
    pub measurement_noise: f64,
}

fn default_process_noise() -> f64 {
    1e-4
}

impl KalmanConfig {
    pub fn new(dt: f64, measurement_noise: f64) -> Self {
        KalmanConfig { dt, process_noise: default_process_noise(), measurement_noise }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.process_noise >= 0.0) || !(self.measurement_noise > 0.0) {
            return Err(invalid("Kalman filter needs dt > 0, process noise >= 0, measurement noise > 0"));
        }
        Ok(())
    }
}

/// Forward pass of a constant-velocity Kalman filter (state: value and
/// rate) over a uniformly sampled series.
pub fn kalman_smooth(series: &[f64], cfg: &KalmanConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let Some(&first) = series.first() else {
        return Ok(Vec::new());
    };
    let dt = cfg.dt;
    let q = cfg.process_noise;
    let r = cfg.measurement_noise;
    let (q11, q12, q22) = (q * dt.powi(3) / 3.0, q * dt * dt / 2.0, q * dt);
    let (mut x, mut v) = (first, 0.0);
    // position variance r, rate effectively unknown
    let (mut p11, mut p12, mut p22) = (r, 0.0, r / (dt * dt) * 1e6);
    let mut out = Vec::with_capacity(series.len());
    out.push(x);
    for &z in &series[1..] {
        // predict
        x += v * dt;
        let n11 = p11 + 2.0 * dt * p12 + dt * dt * p22 + q11;
        let n12 = p12 + dt * p22 + q12;
        let n22 = p22 + q22;
        // update
        let s = n11 + r;
        let (k1, k2) = (n11 / s, n12 / s);
        let innovation = z - x;
        x += k1 * innovation;
        v += k2 * innovation;
        p11 = (1.0 - k1) * n11;
        p12 = (1.0 - k1) * n12;
        p22 = n22 - k2 * n12;
        out.push(x);
    }
    Ok(out)
}

/// Target positions from per-frame AoA and total-delay estimates. The
/// delays are smoothed first when `smoothing` is given.
pub fn trajectory_from_estimates(
    frames: &[FrameEstimate],
    geometry: &BistaticGeometry,
    smoothing: Option<&KalmanConfig>,
) -> Result<Vec<TrajectoryPoint>> {
    if !(geometry.baseline_m > 0.0) {
        return Err(invalid("bistatic baseline must be positive"));
    }
    let raw: Vec<f64> = frames.iter().map(|f| f.delay_s).collect();
    let delays = match smoothing {
        Some(cfg) => kalman_smooth(&raw, cfg)?,
        None => raw,
    };
    Ok(frames
        .iter()
        .zip(delays)
        .map(|(f, tau)| {
            let range = geometry.receiver_range(SPEED_OF_LIGHT * tau, f.aoa_rad);
            let (x_m, y_m, d_r_m) = match range {
                Some(d) => (d * f.aoa_rad.sin() - geometry.baseline_m / 2.0, d * f.aoa_rad.cos(), d),
                None => (f64::NAN, f64::NAN, f64::NAN),
            };
            TrajectoryPoint { t: f.t, x_m, y_m, d_r_m, theta_rad: f.aoa_rad, tau_s: tau, feasible: range.is_some() }
        })
        .collect())
}
