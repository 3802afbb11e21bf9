//! Open-set radio-frequency-fingerprint authentication with rapid channel
//! adaptation.
//!
//! The crate is organised bottom-up:
//!
//! * [`ndmath`]: dense `f64` tensors, the handful of layer primitives the
//!   extractor uses, and a reverse-mode gradient tape.
//! * [`sigsim`]: synthetic preambles, transmitter impairments and channels.
//! * [`extractor`]: the CNN feature extractor, cosine-softmax metric head,
//!   SGD training loop and the cosine-threshold verification rule.
//! * [`lora`]: low-rank adapters, merged/unmerged forwards, adapter-only and
//!   full fine-tuning.
//! * [`rla`]: CMA-ES search over mixing coefficients of a pool of adapters.
//! * [`evalkit`]: pairwise verification protocol, ROC/AUC/EER, counters.
//! * [`adapt`]: the registry of channel-adaptation methods selectable by name.
//! * [`io`] and [`experiment`]: file formats, configs and the end-to-end
//!   pipeline used by the `rla` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod counters;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod extractor;
pub mod io;
pub mod lora;
pub mod ndmath;
pub mod rla;
pub mod seeds;
pub mod sigsim;

pub use error::{Error, Result};
