use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::cmaes::{minimize, CmaesConfig, GenerationStats};
use crate::counters::{self, CounterSnapshot};
use crate::error::{Error, Result};
use crate::extractor::{embedding_loss, Embedding, ExtractorModel, MetricHead, DEFAULT_SCALE};
use crate::lora::{merged_overrides, DeltaSet, LayerDelta, LoraModule};
use crate::ndmath::Tensor;
use crate::sigsim::Sample;

/// Frozen adapters over one base model, all with the same targets and shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPool {
    modules: Vec<LoraModule>,
    deltas: Vec<Vec<(String, Tensor)>>,
}

impl LoraPool {
    pub fn new(modules: Vec<LoraModule>) -> Result<Self> {
        let first = modules
            .first()
            .ok_or_else(|| Error::config("pool", "a pool needs at least one module"))?;
        let names: Vec<String> = first.target_names().iter().map(|s| s.to_string()).collect();
        let mut deltas = Vec::with_capacity(modules.len());
        for m in &modules {
            let these: Vec<String> = m.target_names().iter().map(|s| s.to_string()).collect();
            if these != names {
                return Err(Error::config(
                    "pool",
                    format!("module {} targets {:?}, expected {:?}", m.environment_id, these, names),
                ));
            }
            let mut ds = Vec::with_capacity(names.len());
            for (name, f) in &m.targets {
                let d = f.delta()?;
                ds.push((name.clone(), d));
            }
            deltas.push(ds);
        }
        for ds in &deltas[1..] {
            for ((_, d), (_, d0)) in ds.iter().zip(&deltas[0]) {
                if d.shape() != d0.shape() {
                    return Err(Error::dim("pool", d0.shape(), d.shape()));
                }
            }
        }
        Ok(Self { modules, deltas })
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn modules(&self) -> &[LoraModule] {
        &self.modules
    }

    pub fn environment_ids(&self) -> Vec<&str> {
        self.modules.iter().map(|m| m.environment_id.as_str()).collect()
    }

    pub fn check_against(&self, base: &ExtractorModel) -> Result<()> {
        self.modules.iter().try_for_each(|m| m.check_against(base))
    }
}

/// Mixing coefficients `α ∈ R^K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(pub Vec<f64>);

impl AggregationWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if let Some(i) = alpha.iter().position(|a| !a.is_finite()) {
            return Err(Error::config("alpha", format!("entry {i} is not finite")));
        }
        Ok(Self(alpha))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn one_hot(k: usize, index: usize) -> Self {
        let mut v = vec![0.0; k];
        v[index] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `Δ′ = Σ_k α_k·A_k·B_k` per target, materialised.
pub fn aggregate(pool: &LoraPool, alpha: &AggregationWeights) -> Result<DeltaSet> {
    if alpha.0.len() != pool.len() {
        return Err(Error::dim("aggregate", &[pool.len()], &[alpha.0.len()]));
    }
    let mut out = DeltaSet::new();
    for (t, (name, d0)) in pool.deltas[0].iter().enumerate() {
        let mut acc = Tensor::zeros(d0.shape());
        for (k, a) in alpha.0.iter().enumerate() {
            acc.axpy(*a, &pool.deltas[k][t].1)?;
        }
        out.insert(name.clone(), LayerDelta::Dense(acc));
    }
    Ok(out)
}

fn class_count(samples: &[Sample]) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::Contract("adaptation set is empty".into()));
    }
    Ok(samples.iter().map(|s| s.device).max().unwrap_or(0) + 1)
}

/// Metric loss of `base + aggregate(pool, α)` on `adapt` with a prototype head
/// built from the same embeddings. Forward passes only.
pub fn fitness(base: &ExtractorModel, pool: &LoraPool, alpha: &AggregationWeights, adapt: &[Sample]) -> Result<f64> {
    let classes = class_count(adapt)?;
    counters::record_fitness();
    let deltas = aggregate(pool, alpha)?;
    let merged = merged_overrides(base, &deltas)?;
    let embeddings: Vec<Embedding> = adapt
        .iter()
        .map(|s| base.embed_with(&s.signal, Some(&merged)))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = adapt.iter().map(|s| s.device).collect();
    let head = MetricHead::prototypes(&embeddings, &labels, classes, DEFAULT_SCALE)?;
    embedding_loss(&embeddings, &labels, &head)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlaOutcome {
    pub weights: AggregationWeights,
    pub best_fitness: f64,
    pub evaluations: usize,
    pub wall_seconds: f64,
    pub history: Vec<GenerationStats>,
    pub seed: u64,
    pub config: CmaesConfig,
    /// Counter deltas accumulated during the search.
    pub work: CounterSnapshot,
}

/// Searches `α` with CMA-ES on the adaptation set and returns the best
/// candidate ever seen. The base model and pool are never modified.
pub fn adapt_rla(
    base: &ExtractorModel,
    pool: &LoraPool,
    adapt: &[Sample],
    cfg: &CmaesConfig,
    seed: u64,
) -> Result<RlaOutcome> {
    if cfg.dimension != pool.len() {
        return Err(Error::dim("adapt_rla", &[pool.len()], &[cfg.dimension]));
    }
    pool.check_against(base)?;
    class_count(adapt)?;
    let start = Instant::now();
    let before = counters::snapshot();
    AggregationWeights::new(cfg.initial_mean.clone())?;
    let run = minimize(
        |alpha| fitness(base, pool, &AggregationWeights(alpha.to_vec()), adapt),
        cfg,
        seed,
    )?;
    let after = counters::snapshot();
    let work = after.since(&before);
    if work.backward_passes != 0 || work.gradient_updates != 0 {
        return Err(Error::Contract("aggregation search ran a backward pass".into()));
    }
    Ok(RlaOutcome {
        weights: AggregationWeights(run.best_x),
        best_fitness: run.best_fitness,
        evaluations: run.evaluations,
        wall_seconds: start.elapsed().as_secs_f64(),
        history: run.history,
        seed,
        config: cfg.clone(),
        work,
    })
}
