use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Physical, array, and frame constants of one uplink link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    /// Receive antennas in the uniform linear array.
    pub antenna_count: usize,
    pub subcarrier_count: usize,
    /// OFDM symbol length `T` (s); subcarrier spacing is `1/T`.
    pub symbol_duration: f64,
    pub cp_duration: f64,
    /// Packet interval `T_A` (s), an integer multiple of the symbol length.
    pub packet_interval: f64,
    pub carrier_freq: f64,
    pub antenna_spacing: f64,
    pub wavelength: f64,
    pub packet_count: usize,
    /// Number of packet lags `P` stacked by the estimators.
    pub taylor_window: usize,
    /// Per-sample SNR in dB; `None` means noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

impl SystemConfig {
    /// The simulation setup of the reference study: 3 GHz carrier, 64
    /// subcarriers at 1 MHz spacing, 8 half-wavelength antennas, 128 packets
    /// 1 ms apart, lag window 30.
    pub fn reference() -> Self {
        let carrier_freq = 3e9;
        let wavelength = SPEED_OF_LIGHT / carrier_freq;
        SystemConfig {
            antenna_count: 8,
            subcarrier_count: 64,
            symbol_duration: 1e-6,
            cp_duration: 0.3e-6,
            packet_interval: 1e-3,
            carrier_freq,
            antenna_spacing: wavelength / 2.0,
            wavelength,
            packet_count: 128,
            taylor_window: 30,
            snr_db: None,
        }
    }

    pub fn with_antennas(mut self, n: usize) -> Self {
        self.antenna_count = n;
        self
    }

    pub fn with_snr(mut self, snr_db: Option<f64>) -> Self {
        self.snr_db = snr_db;
        self
    }

    pub fn with_packets(mut self, m: usize) -> Self {
        self.packet_count = m;
        self
    }

    pub fn with_window(mut self, p: usize) -> Self {
        self.taylor_window = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.antenna_count < 2 {
            return Err(invalid("antenna_count must be at least 2"));
        }
        if self.subcarrier_count < 2 {
            return Err(invalid("subcarrier_count must be at least 2"));
        }
        if self.taylor_window < 1 {
            return Err(invalid("taylor_window must be at least 1"));
        }
        if self.packet_count <= self.taylor_window {
            return Err(invalid(format!(
                "packet_count ({}) must exceed taylor_window ({})",
                self.packet_count, self.taylor_window
            )));
        }
        for (name, v) in [
            ("symbol_duration", self.symbol_duration),
            ("packet_interval", self.packet_interval),
            ("carrier_freq", self.carrier_freq),
            ("antenna_spacing", self.antenna_spacing),
            ("wavelength", self.wavelength),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive and finite")));
            }
        }
        if !(self.cp_duration >= 0.0 && self.cp_duration.is_finite()) {
            return Err(invalid("cp_duration must be non-negative"));
        }
        let ratio = self.packet_interval / self.symbol_duration;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 * ratio.max(1.0) {
            return Err(invalid(format!(
                "packet_interval must be a positive integer multiple of symbol_duration (ratio {ratio})"
            )));
        }
        let expected = SPEED_OF_LIGHT / self.carrier_freq;
        if ((self.wavelength - expected) / expected).abs() > 1e-9 {
            return Err(invalid(format!(
                "wavelength {} does not match c / carrier_freq = {}",
                self.wavelength, expected
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(invalid("snr_db must be finite"));
            }
        }
        Ok(())
    }

    /// `(M, G, N)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.packet_count, self.subcarrier_count, self.antenna_count)
    }
}
