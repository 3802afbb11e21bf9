use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ComplexSignal;
use crate::error::{Error, Result};
use crate::seeds;

pub const MAX_TAPS: usize = 8;

/// One propagation environment: FIR multipath, carrier frequency offset and
/// AWGN. `snr_db = None` means noiseless.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub environment_id: String,
    pub taps: Vec<Complex64>,
    /// Radians per sample.
    pub cfo: f64,
    pub snr_db: Option<f64>,
}

impl ChannelProfile {
    pub fn identity(environment_id: impl Into<String>) -> Self {
        Self {
            environment_id: environment_id.into(),
            taps: vec![Complex64::new(1.0, 0.0)],
            cfo: 0.0,
            snr_db: None,
        }
    }

    pub fn with_snr(&self, snr_db: Option<f64>) -> Self {
        Self { snr_db, ..self.clone() }
    }

    pub fn tap_energy(&self) -> f64 {
        self.taps.iter().map(|t| t.norm_sqr()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.taps.is_empty() || self.taps.len() > MAX_TAPS {
            return Err(Error::config(
                "channel.taps",
                format!("need 1..={MAX_TAPS} taps, got {}", self.taps.len()),
            ));
        }
        if !(self.tap_energy() > 0.0) {
            return Err(Error::Degenerate(format!(
                "channel `{}` has zero tap energy",
                self.environment_id
            )));
        }
        if let Some(snr) = self.snr_db {
            if !snr.is_finite() {
                return Err(Error::config(
                    "channel.snr_db",
                    "must be finite (use null for noiseless)",
                ));
            }
        }
        Ok(())
    }
}

/// FIR (truncated to the input length) → CFO rotation → AWGN at `snr_db`
/// relative to the post-channel signal power.
pub fn apply_channel(x: &ComplexSignal, ch: &ChannelProfile, seed: u64) -> Result<ComplexSignal> {
    ch.validate()?;
    let xs = x.samples();
    let mut out: Vec<Complex64> = (0..xs.len())
        .map(|n| {
            ch.taps
                .iter()
                .enumerate()
                .filter(|&(k, _)| k <= n)
                .map(|(k, &h)| h * xs[n - k])
                .sum()
        })
        .collect();

    if ch.cfo != 0.0 {
        for (n, v) in out.iter_mut().enumerate() {
            *v *= Complex64::from_polar(1.0, ch.cfo * n as f64);
        }
    }

    if let Some(snr_db) = ch.snr_db {
        let signal_power = out.iter().map(|c| c.norm_sqr()).sum::<f64>() / out.len().max(1) as f64;
        let noise_power = signal_power / 10f64.powf(snr_db / 10.0);
        let sd = (noise_power / 2.0).sqrt();
        let mut rng = seeds::rng(seed);
        for v in out.iter_mut() {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            *v += Complex64::new(sd * re, sd * im);
        }
    }
    Ok(ComplexSignal(out))
}
