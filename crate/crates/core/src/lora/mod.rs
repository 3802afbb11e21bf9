//! Low-rank adapters `ΔW = A·B` on named extractor weights.
//!
//! `A` is `d₁ × r`, `B` is `r × d₂`, where `d₁ × d₂` is the weight's matrix
//! view. Adapters start at `B = 0`, so a fresh adapter leaves the extractor
//! unchanged. Convolution weights are adapted through their matrix view, so
//! on every input patch a target layer computes `W·x + A·(B·x)`.

mod adapter;
mod train;

pub(crate) use adapter::merged_overrides;
pub use adapter::{
    adapted_forward, init_lora, lora_delta, merge, unmerge, DeltaSet, LayerDelta, LoraFactors, LoraModule,
};
pub use train::{full_finetune, train_lora, HeadStrategy, LoraTrainOutcome};
