//! Synthetic received-preamble generation: `x = channel(impairment(s))`.
//!
//! * [`PreambleSpec`] produces the fixed known preamble `s`.
//! * [`DeviceImpairment`] is the per-transmitter hardware distortion.
//! * [`ChannelProfile`] is one propagation environment.
//! * [`build_dataset`] and [`split_adapt_eval`] assemble labelled sets.

mod channel;
mod dataset;
mod impairment;
mod preamble;

pub use channel::{apply_channel, ChannelProfile};
pub use dataset::{build_dataset, split_adapt_eval, split_stratified, DatasetRole, LabeledDataset, Sample};
pub use impairment::{apply_impairment, DeviceImpairment, DeviceRanges};
pub use preamble::{PreambleSpec, Waveform, DEFAULT_PREAMBLE_LEN};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ndmath::Tensor;

/// Complex baseband sample sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexSignal(pub Vec<Complex64>);

impl ComplexSignal {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.0
    }

    pub fn mean_power(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.0.len().max(1) as f64
    }

    /// `2 × M` real view: row 0 is I, row 1 is Q.
    pub fn to_tensor(&self) -> Tensor {
        let m = self.0.len();
        let mut data = Vec::with_capacity(2 * m);
        data.extend(self.0.iter().map(|c| c.re));
        data.extend(self.0.iter().map(|c| c.im));
        Tensor::new(vec![2, m], data).expect("non-empty signal")
    }

    /// Rounds every component to the nearest `f32`, the storage precision
    /// of dataset files.
    pub fn quantized(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64))
                .collect(),
        )
    }
}
