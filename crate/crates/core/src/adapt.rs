//! Channel-adaptation methods behind one trait, looked up by name.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::evalkit::{timing_harness, TimingRecord};
use crate::experiment::ExperimentConfig;
use crate::extractor::{EpochMetrics, ExtractorModel, MetricHead};
use crate::lora::{full_finetune, merge, train_lora, LoraModule};
use crate::rla::{adapt_rla, aggregate, LoraPool, RlaOutcome};
use crate::sigsim::LabeledDataset;

/// Everything a method may read while adapting.
pub struct AdaptContext<'a> {
    pub config: &'a ExperimentConfig,
    pub base: &'a ExtractorModel,
    pub pool: Option<&'a LoraPool>,
    pub adapt: &'a LabeledDataset,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub enum AdaptArtifact {
    Unchanged,
    FineTuned {
        head: MetricHead,
        history: Vec<EpochMetrics>,
        trainable_parameters: usize,
    },
    Lora {
        module: LoraModule,
        history: Vec<EpochMetrics>,
        trainable_parameters: usize,
    },
    Aggregated(RlaOutcome),
}

impl AdaptArtifact {
    pub fn alpha(&self) -> Option<Vec<f64>> {
        match self {
            AdaptArtifact::Aggregated(o) => Some(o.weights.0.clone()),
            _ => None,
        }
    }

    pub fn epochs(&self) -> Option<usize> {
        match self {
            AdaptArtifact::FineTuned { history, .. } | AdaptArtifact::Lora { history, .. } => Some(history.len()),
            _ => None,
        }
    }
}

/// Result of one adaptation: a standalone model for the target environment.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub method: String,
    pub model: ExtractorModel,
    pub artifact: AdaptArtifact,
    pub timing: TimingRecord,
}

pub trait AdaptationMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<(ExtractorModel, AdaptArtifact)>;

    /// Runs [`adapt`](Self::adapt) under the timing harness.
    fn run(&self, ctx: &AdaptContext<'_>) -> Result<Adapted> {
        let (out, timing) = timing_harness(|| self.adapt(ctx));
        let (model, artifact) = out?;
        Ok(Adapted {
            method: self.name().to_string(),
            model,
            artifact,
            timing,
        })
    }
}

/// The unadapted base model.
pub struct NoAdaptation;

impl AdaptationMethod for NoAdaptation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<(ExtractorModel, AdaptArtifact)> {
        Ok((ctx.base.clone(), AdaptArtifact::Unchanged))
    }
}

/// Every weight retrained on the adaptation set.
pub struct FullFineTune;

impl AdaptationMethod for FullFineTune {
    fn name(&self) -> &'static str {
        "ft"
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<(ExtractorModel, AdaptArtifact)> {
        let cfg = ctx.config;
        let trainer = crate::extractor::TrainerConfig {
            seed: ctx.seed,
            ..cfg.ft_trainer.clone()
        };
        let (out, trainable_parameters) =
            full_finetune(ctx.base, cfg.lora.head, ctx.adapt, ctx.adapt, cfg.scale, &trainer)?;
        Ok((
            out.model,
            AdaptArtifact::FineTuned {
                head: out.head,
                history: out.history,
                trainable_parameters,
            },
        ))
    }
}

/// A fresh adapter trained on the adaptation set.
pub struct LoraFineTune;

impl AdaptationMethod for LoraFineTune {
    fn name(&self) -> &'static str {
        "lora"
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<(ExtractorModel, AdaptArtifact)> {
        let cfg = ctx.config;
        let trainer = crate::extractor::TrainerConfig {
            seed: ctx.seed,
            ..cfg.lora_trainer.clone()
        };
        let out = train_lora(
            ctx.base,
            cfg.lora.head,
            &cfg.target_environment,
            ctx.adapt,
            ctx.adapt,
            &cfg.lora_targets(ctx.base),
            cfg.lora.rank,
            cfg.scale,
            &trainer,
        )?;
        let model = merge(ctx.base, &out.module.delta_set())?;
        Ok((
            model,
            AdaptArtifact::Lora {
                module: out.module,
                history: out.history,
                trainable_parameters: out.trainable_parameters,
            },
        ))
    }
}

/// Weighted sum of pretrained adapters, weights found without gradients.
pub struct RapidAggregation;

impl AdaptationMethod for RapidAggregation {
    fn name(&self) -> &'static str {
        "rla"
    }

    fn adapt(&self, ctx: &AdaptContext<'_>) -> Result<(ExtractorModel, AdaptArtifact)> {
        let pool = ctx
            .pool
            .ok_or_else(|| Error::config("pool", "aggregation needs a LoRA pool"))?;
        let cmaes = ctx.config.cmaes_config(pool.len())?;
        let out = adapt_rla(ctx.base, pool, &ctx.adapt.samples, &cmaes, ctx.seed)?;
        let model = merge(ctx.base, &aggregate(pool, &out.weights)?)?;
        Ok((model, AdaptArtifact::Aggregated(out)))
    }
}

/// Name → method table.
pub struct Registry {
    methods: BTreeMap<&'static str, Box<dyn AdaptationMethod>>,
}

impl Registry {
    pub fn empty() -> Self {
        Self {
            methods: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, method: Box<dyn AdaptationMethod>) {
        self.methods.insert(method.name(), method);
    }

    pub fn get(&self, name: &str) -> Result<&dyn AdaptationMethod> {
        self.methods.get(name).map(|m| m.as_ref()).ok_or_else(|| {
            Error::config(
                "method",
                format!("unknown method {name:?} (known: {})", self.names().join(", ")),
            )
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

impl Default for Registry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(NoAdaptation));
        r.register(Box::new(FullFineTune));
        r.register(Box::new(LoraFineTune));
        r.register(Box::new(RapidAggregation));
        r
    }
}
