//! Oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use num_complex::Complex64;
use rla_core::evalkit::PairSet;
use rla_core::extractor::{Architecture, ConvSpec};
use rla_core::sigsim::{build_dataset, ChannelProfile, DeviceImpairment, LabeledDataset, PreambleSpec};

/// Dense sweep over thresholds `k·1e-4` on `[0, 2]` for pair sets whose
/// distances are multiples of `1e-3`. Works on integers so `d ≤ t` is exact.
pub fn brute_force_eer(pairs: &PairSet) -> f64 {
    let milli: Vec<(i64, bool)> = pairs
        .pairs
        .iter()
        .map(|p| ((p.distance * 1000.0).round() as i64, p.genuine))
        .collect();
    let g = milli.iter().filter(|p| p.1).count() as f64;
    let i = milli.len() as f64 - g;
    let mut best = (f64::INFINITY, f64::NAN);
    for t in 0..=20_000i64 {
        let far = milli.iter().filter(|p| !p.1 && 10 * p.0 <= t).count() as f64 / i;
        let frr = milli.iter().filter(|p| p.1 && 10 * p.0 > t).count() as f64 / g;
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, (far + frr) / 2.0);
        }
    }
    best.1
}

/// Trapezoidal area under (FAR, 1 − FRR) swept over every distinct distance.
pub fn trapezoid_auc(pairs: &PairSet) -> f64 {
    let mut d: Vec<f64> = pairs.pairs.iter().map(|p| p.distance).collect();
    d.sort_by(f64::total_cmp);
    d.dedup();
    let g = pairs.pairs.iter().filter(|p| p.genuine).count() as f64;
    let i = pairs.pairs.len() as f64 - g;
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for t in d {
        let x = pairs.pairs.iter().filter(|p| !p.genuine && p.distance <= t).count() as f64 / i;
        let y = pairs.pairs.iter().filter(|p| p.genuine && p.distance <= t).count() as f64 / g;
        area += (x - prev.0) * (y + prev.1) / 2.0;
        prev = (x, y);
    }
    area
}

pub fn toy_arch(signal_len: usize) -> Architecture {
    let conv = |out_channels| ConvSpec {
        out_channels,
        width: 5,
        stride: 2,
    };
    Architecture {
        signal_len,
        convs: vec![conv(8), conv(8)],
        embed_dim: 16,
    }
}

/// Devices whose DC offsets and gains differ far more than the noise.
pub fn separable_devices(n: usize) -> Vec<DeviceImpairment> {
    (0..n)
        .map(|k| {
            let angle = k as f64 * std::f64::consts::TAU / n as f64;
            DeviceImpairment {
                iq_gain_imbalance: 1.0 + 0.08 * k as f64,
                iq_phase_imbalance: 0.05 * k as f64,
                dc_offset: Complex64::from_polar(0.4, angle),
                pa_a1: 1.0,
                pa_a3: -0.05,
                phase_noise_std: 0.0,
            }
        })
        .collect()
}

pub fn toy_channel(id: &str, echo: f64, snr_db: f64) -> ChannelProfile {
    ChannelProfile {
        environment_id: id.into(),
        taps: vec![Complex64::new(1.0, 0.0), Complex64::new(echo, -0.5 * echo)],
        cfo: 0.0,
        snr_db: Some(snr_db),
    }
}

pub fn toy_dataset(
    signal_len: usize,
    devices: usize,
    channel: &ChannelProfile,
    reps: usize,
    seed: u64,
) -> LabeledDataset {
    let spec = PreambleSpec {
        length: signal_len,
        ..PreambleSpec::default()
    };
    build_dataset(
        &spec,
        &separable_devices(devices),
        std::slice::from_ref(channel),
        reps,
        seed,
    )
    .unwrap()
}

/// Random pair set with distances on the `1e-3` grid in `[0, 2]`, genuine
/// pairs skewed closer so both easy and overlapping cases appear.
pub fn random_pair_set(seed: u64) -> PairSet {
    use rand::Rng;
    let mut rng = rla_core::seeds::rng(seed);
    let g = rng.random_range(1..40);
    let i = rng.random_range(1..40);
    let shift = rng.random_range(0..1200);
    let genuine: Vec<f64> = (0..g).map(|_| rng.random_range(0..=800) as f64 / 1000.0).collect();
    let impostor: Vec<f64> = (0..i)
        .map(|_| (rng.random_range(0..=800) + shift) as f64 / 1000.0)
        .collect();
    PairSet::from_distances(&genuine, &impostor)
}

pub fn random_signal(len: usize, seed: u64) -> rla_core::sigsim::ComplexSignal {
    use rand::Rng;
    let mut rng = rla_core::seeds::rng(seed);
    rla_core::sigsim::ComplexSignal(
        (0..len)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect(),
    )
}

/// Fills every `B` with seeded uniform values so the adapter is non-trivial.
pub fn randomize_b(module: &mut rla_core::lora::LoraModule, seed: u64, amplitude: f64) {
    use rand::Rng;
    let mut rng = rla_core::seeds::rng(seed);
    for (_, f) in module.targets.iter_mut() {
        f.b.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-amplitude..amplitude));
    }
}

/// Singular values of a row-major matrix, descending.
pub fn singular_values(t: &rla_core::ndmath::Tensor) -> Vec<f64> {
    let (r, c) = t.dims2().unwrap();
    let m = nalgebra::DMatrix::from_row_slice(r, c, t.data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}
