use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{apply_channel, apply_impairment, ChannelProfile, ComplexSignal, DeviceImpairment, PreambleSpec};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    Train,
    Validation,
    Adapt,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub signal: ComplexSignal,
    /// Local label in `0..device_count`.
    pub device: usize,
    /// Index into [`LabeledDataset::channels`].
    pub environment: usize,
}

/// Labelled received preambles. Signals are held at `f32` precision so the
/// on-disk form round-trips exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub role: DatasetRole,
    pub signal_len: usize,
    pub preamble: PreambleSpec,
    /// Global transmitter identifiers, indexed by local label.
    pub device_ids: Vec<usize>,
    pub devices: Vec<DeviceImpairment>,
    pub channels: Vec<ChannelProfile>,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn device_count(&self) -> usize {
        self.devices.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.device).collect()
    }

    pub fn environment_id(&self, sample: &Sample) -> &str {
        &self.channels[sample.environment].environment_id
    }

    pub fn with_role(mut self, role: DatasetRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_device_ids(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != self.devices.len() {
            return Err(Error::config(
                "device_ids",
                format!("expected {} ids, got {}", self.devices.len(), ids.len()),
            ));
        }
        self.device_ids = ids;
        Ok(self)
    }

    /// Copy holding only the samples at `indices` (in the given order).
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.header()
        }
    }

    /// Copy holding only samples from the named environments.
    pub fn filter_environments(&self, env_ids: &[&str]) -> Self {
        let keep: Vec<usize> = (0..self.samples.len())
            .filter(|&i| env_ids.contains(&self.environment_id(&self.samples[i])))
            .collect();
        self.subset(&keep)
    }

    fn header(&self) -> Self {
        Self {
            role: self.role,
            signal_len: self.signal_len,
            preamble: self.preamble.clone(),
            device_ids: self.device_ids.clone(),
            devices: self.devices.clone(),
            channels: self.channels.clone(),
            seed: self.seed,
            samples: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_ids.len() != self.devices.len() {
            return Err(Error::Contract("device_ids and devices differ in length".into()));
        }
        let env_ids: BTreeSet<&str> = self.channels.iter().map(|c| c.environment_id.as_str()).collect();
        if env_ids.len() != self.channels.len() {
            return Err(Error::Contract("duplicate environment ids".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.signal.len() != self.signal_len {
                return Err(Error::dim("dataset sample", &[s.signal.len()], &[self.signal_len]));
            }
            if s.device >= self.devices.len() {
                return Err(Error::Contract(format!("sample {i}: label {} >= J", s.device)));
            }
            if s.environment >= self.channels.len() {
                return Err(Error::Contract(format!("sample {i}: undeclared environment")));
            }
        }
        Ok(())
    }
}

/// Emits `channel(impairment(s))` for every (device, channel, repetition)
/// in that nesting order. Labels are device positions; role is `Train`.
pub fn build_dataset(
    spec: &PreambleSpec,
    devices: &[DeviceImpairment],
    channels: &[ChannelProfile],
    per_pair_count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if devices.is_empty() {
        return Err(Error::config("devices", "at least one device required"));
    }
    if channels.is_empty() {
        return Err(Error::config("channels", "at least one channel required"));
    }
    if per_pair_count == 0 {
        return Err(Error::config("per_pair_count", "must be positive"));
    }
    let s = spec.generate()?;
    let mut samples = Vec::with_capacity(devices.len() * channels.len() * per_pair_count);
    for (d, dev) in devices.iter().enumerate() {
        for (c, ch) in channels.iter().enumerate() {
            for r in 0..per_pair_count {
                let idx = [d as u64, c as u64, r as u64];
                let tx = apply_impairment(&s, dev, seeds::derive_indexed(seed, "impairment", &idx))?;
                let rx = apply_channel(&tx, ch, seeds::derive_indexed(seed, "channel", &idx))?;
                samples.push(Sample {
                    signal: rx.quantized(),
                    device: d,
                    environment: c,
                });
            }
        }
    }
    let ds = LabeledDataset {
        role: DatasetRole::Train,
        signal_len: spec.length,
        preamble: spec.clone(),
        device_ids: (0..devices.len()).collect(),
        devices: devices.to_vec(),
        channels: channels.to_vec(),
        seed,
        samples,
    };
    ds.validate()?;
    Ok(ds)
}

/// Device-stratified split: each device puts `⌈fraction·n_dev⌉` randomly
/// chosen samples into the first part and the rest into the second. Both
/// parts keep the original sample order.
pub fn split_stratified(d: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("adapt_fraction", format!("{fraction} not in (0, 1)")));
    }
    let mut rng = seeds::rng(seed);
    let mut first = vec![false; d.len()];
    for dev in 0..d.device_count() {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.samples[i].device == dev).collect();
        if idx.len() < 2 {
            return Err(Error::Stratification {
                device: dev,
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng);
        let take = (fraction * idx.len() as f64).ceil() as usize;
        for &i in &idx[..take] {
            first[i] = true;
        }
    }
    let (a, b): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|&i| first[i]);
    Ok((d.subset(&a), d.subset(&b)))
}

/// [`split_stratified`] with the adapt/eval roles applied.
pub fn split_adapt_eval(
    d: &LabeledDataset,
    adapt_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let (a, e) = split_stratified(d, adapt_fraction, seed)?;
    Ok((a.with_role(DatasetRole::Adapt), e.with_role(DatasetRole::Eval)))
}
