use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ComplexSignal;
use crate::error::{Error, Result};
use crate::seeds;

/// Transmitter hardware distortion, applied in the order IQ imbalance → DC
/// offset → odd-order PA polynomial → random-walk phase noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceImpairment {
    pub iq_gain_imbalance: f64,
    /// Radians.
    pub iq_phase_imbalance: f64,
    pub dc_offset: Complex64,
    pub pa_a1: f64,
    pub pa_a3: f64,
    /// Standard deviation of the per-sample phase increment, radians.
    pub phase_noise_std: f64,
}

impl DeviceImpairment {
    pub fn identity() -> Self {
        Self {
            iq_gain_imbalance: 1.0,
            iq_phase_imbalance: 0.0,
            dc_offset: Complex64::new(0.0, 0.0),
            pa_a1: 1.0,
            pa_a3: 0.0,
            phase_noise_std: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pa_a1 > 0.0) {
            return Err(Error::config("impairment.pa_a1", "must be > 0"));
        }
        if !(self.iq_gain_imbalance > 0.0) {
            return Err(Error::config("impairment.iq_gain_imbalance", "must be > 0"));
        }
        if !(self.phase_noise_std >= 0.0) {
            return Err(Error::config("impairment.phase_noise_std", "must be >= 0"));
        }
        Ok(())
    }

    /// Same device without its stochastic component.
    pub fn without_phase_noise(&self) -> Self {
        Self {
            phase_noise_std: 0.0,
            ..self.clone()
        }
    }
}

/// Uniform sampling ranges for drawing device impairments, together with the
/// minimum per-parameter gaps under which two devices count as distinct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceRanges {
    pub iq_gain: (f64, f64),
    pub iq_phase: (f64, f64),
    pub dc_magnitude: (f64, f64),
    pub pa_a1: (f64, f64),
    pub pa_a3: (f64, f64),
    pub phase_noise_std: (f64, f64),
    pub min_gap: f64,
}

impl Default for DeviceRanges {
    fn default() -> Self {
        Self {
            iq_gain: (0.85, 1.15),
            iq_phase: (-0.15, 0.15),
            dc_magnitude: (0.0, 0.12),
            pa_a1: (0.9, 1.1),
            pa_a3: (-0.15, 0.0),
            phase_noise_std: (0.0, 0.005),
            min_gap: 1e-3,
        }
    }
}

impl DeviceRanges {
    /// Draws device `index` from its own seed stream, so identities are stable
    /// regardless of how many other devices are generated.
    pub fn sample(&self, master_seed: u64, index: usize) -> DeviceImpairment {
        let mut rng = seeds::rng(seeds::derive_indexed(master_seed, "device", &[index as u64]));
        let mut u = |(lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..hi) } else { lo };
        let gain = u(self.iq_gain);
        let phase = u(self.iq_phase);
        let dc_mag = u(self.dc_magnitude);
        let dc_arg = u((-std::f64::consts::PI, std::f64::consts::PI));
        let a1 = u(self.pa_a1);
        let a3 = u(self.pa_a3);
        let pn = u(self.phase_noise_std);
        DeviceImpairment {
            iq_gain_imbalance: gain,
            iq_phase_imbalance: phase,
            dc_offset: Complex64::from_polar(dc_mag, dc_arg),
            pa_a1: a1,
            pa_a3: a3,
            phase_noise_std: pn,
        }
    }

    /// True when at least one deterministic parameter differs by more than
    /// `min_gap`.
    pub fn distinct(&self, a: &DeviceImpairment, b: &DeviceImpairment) -> bool {
        let gaps = [
            (a.iq_gain_imbalance - b.iq_gain_imbalance).abs(),
            (a.iq_phase_imbalance - b.iq_phase_imbalance).abs(),
            (a.dc_offset - b.dc_offset).norm(),
            (a.pa_a1 - b.pa_a1).abs(),
            (a.pa_a3 - b.pa_a3).abs(),
        ];
        gaps.iter().any(|&g| g > self.min_gap)
    }
}

pub fn apply_impairment(s: &ComplexSignal, imp: &DeviceImpairment, seed: u64) -> Result<ComplexSignal> {
    imp.validate()?;
    let g = imp.iq_gain_imbalance;
    let phi = imp.iq_phase_imbalance;
    // y = μ·s + ν·conj(s); (g, φ) = (1, 0) gives μ = 1, ν = 0 exactly.
    let mu = (Complex64::new(1.0, 0.0) + Complex64::from_polar(g, -phi)) / 2.0;
    let nu = (Complex64::new(1.0, 0.0) - Complex64::from_polar(g, phi)) / 2.0;

    let mut out: Vec<Complex64> = s
        .samples()
        .iter()
        .map(|&x| {
            let u = mu * x + nu * x.conj() + imp.dc_offset;
            u * imp.pa_a1 + u * (imp.pa_a3 * u.norm_sqr())
        })
        .collect();

    if imp.phase_noise_std > 0.0 {
        let mut rng = seeds::rng(seed);
        let mut theta = 0.0f64;
        for (n, v) in out.iter_mut().enumerate() {
            if n > 0 {
                let step: f64 = rng.sample(StandardNormal);
                theta += imp.phase_noise_std * step;
            }
            *v *= Complex64::from_polar(1.0, theta);
        }
    }
    Ok(ComplexSignal(out))
}
