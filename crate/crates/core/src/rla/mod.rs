//! Rapid LoRA aggregation: the adaptation delta is `Σ_k α_k·ΔF_k` over a pool
//! of frozen per-environment adapters, and `α` is found by CMA-ES on the
//! metric loss of a small adaptation set. No gradients are computed.

mod aggregate;
mod cmaes;

pub use aggregate::{adapt_rla, aggregate, fitness, AggregationWeights, LoraPool, RlaOutcome};
pub use cmaes::{
    default_parents, default_population, minimize, CmaesConfig, CmaesRun, CmaesState, GenerationStats,
    DEFAULT_MAX_ITERATIONS, DEFAULT_SIGMA0,
};
