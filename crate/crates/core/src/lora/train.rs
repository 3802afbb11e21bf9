use serde::{Deserialize, Serialize};

use super::adapter::{init_lora, merged_overrides, LoraModule};
use crate::error::{Error, Result};
use crate::extractor::train_internals::FullTrainer;
use crate::extractor::{
    fit, record_metric_loss, Embedding, EpochMetrics, ExtractorModel, LayerKind, MetricHead, TrainOutcome, Trainable,
    TrainerConfig,
};
use crate::ndmath::{Tape, Tensor, Var};
use crate::seeds;
use crate::sigsim::{LabeledDataset, Sample};

/// How the metric head for the adaptation labels is created. Either way the
/// head is sized to the adaptation set's devices and trained jointly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStrategy {
    /// Seeded Glorot-uniform rows.
    #[default]
    Fresh,
    /// Rows start at the class prototypes of the unadapted embeddings.
    Prototype,
}

impl HeadStrategy {
    pub(crate) fn build(
        self,
        base: &ExtractorModel,
        data: &LabeledDataset,
        scale: f64,
        seed: u64,
    ) -> Result<MetricHead> {
        match self {
            HeadStrategy::Fresh => MetricHead::init(data.device_count(), base.embed_dim(), scale, seed),
            HeadStrategy::Prototype => {
                let embs: Vec<Embedding> = data
                    .samples
                    .iter()
                    .map(|s| base.embed(&s.signal))
                    .collect::<Result<_>>()?;
                MetricHead::prototypes(&embs, &data.labels(), data.device_count(), scale)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoraTrainOutcome {
    pub module: LoraModule,
    pub head: MetricHead,
    pub history: Vec<EpochMetrics>,
    pub trainable_parameters: usize,
}

struct LoraTrainer<'a> {
    base: &'a ExtractorModel,
    module: LoraModule,
    head: MetricHead,
}

impl Trainable for LoraTrainer<'_> {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.module.targets.iter().flat_map(|(_, f)| [&f.a, &f.b]).collect();
        p.push(&self.head.directions);
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self
            .module
            .targets
            .iter_mut()
            .flat_map(|(_, f)| [&mut f.a, &mut f.b])
            .collect();
        p.push(&mut self.head.directions);
        p
    }

    fn record_loss(&self, tape: &mut Tape, params: &[Var], batch: &[&Sample]) -> Result<Var> {
        // W' = W + reshape(A·B) is recorded once per batch; the frozen base
        // enters as constants.
        let mut weights = Vec::with_capacity(self.base.layers.len());
        let mut biases = Vec::with_capacity(self.base.layers.len());
        for layer in &self.base.layers {
            let w = tape.constant(layer.weight.clone());
            let w = match self.module.targets.iter().position(|(n, _)| *n == layer.name) {
                Some(k) => {
                    let ab = tape.matmul(params[2 * k], params[2 * k + 1])?;
                    let ab = match layer.kind {
                        LayerKind::Conv { .. } => tape.reshape(ab, layer.weight.shape())?,
                        LayerKind::Dense => ab,
                    };
                    tape.add(w, ab)?
                }
                None => w,
            };
            weights.push(w);
            biases.push(tape.constant(layer.bias.clone()));
        }
        let head = *params.last().expect("head var");
        let mut zs = Vec::with_capacity(batch.len());
        for s in batch {
            let x = tape.constant(s.signal.to_tensor());
            zs.push(self.base.forward_on_tape(tape, x, &weights, &biases)?);
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.device).collect();
        record_metric_loss(tape, &zs, &labels, head, self.head.scale)
    }

    fn embed(&self, sample: &Sample) -> Result<Embedding> {
        let merged = merged_overrides(self.base, &self.module.delta_set())?;
        self.base.embed_with(&sample.signal, Some(&merged))
    }

    fn embed_all(&self, samples: &[Sample]) -> Result<Vec<Embedding>> {
        let merged = merged_overrides(self.base, &self.module.delta_set())?;
        samples
            .iter()
            .map(|s| self.base.embed_with(&s.signal, Some(&merged)))
            .collect()
    }
}

/// Adapter-only training on `adapt_data`: the base stays frozen and only the
/// factors plus the adaptation head are updated.
#[allow(clippy::too_many_arguments)]
pub fn train_lora(
    base: &ExtractorModel,
    head_strategy: HeadStrategy,
    environment_id: &str,
    adapt_data: &LabeledDataset,
    val_data: &LabeledDataset,
    targets: &[String],
    rank: usize,
    scale: f64,
    cfg: &TrainerConfig,
) -> Result<LoraTrainOutcome> {
    if adapt_data.is_empty() {
        return Err(Error::Contract("adaptation set is empty".into()));
    }
    let module = init_lora(
        base,
        environment_id,
        targets,
        rank,
        seeds::derive_seed(cfg.seed, "lora-init"),
    )?;
    let head = head_strategy.build(base, adapt_data, scale, seeds::derive_seed(cfg.seed, "lora-head"))?;
    let mut trainer = LoraTrainer { base, module, head };
    let trainable_parameters = trainer.trainable_count();
    let history = fit(&mut trainer, adapt_data, val_data, cfg)?;
    Ok(LoraTrainOutcome {
        module: trainer.module,
        head: trainer.head,
        history,
        trainable_parameters,
    })
}

/// Full fine-tuning baseline: a copy of `base` with every parameter (and a
/// new adaptation head) trainable. `base` itself is not modified.
pub fn full_finetune(
    base: &ExtractorModel,
    head_strategy: HeadStrategy,
    adapt_data: &LabeledDataset,
    val_data: &LabeledDataset,
    scale: f64,
    cfg: &TrainerConfig,
) -> Result<(TrainOutcome, usize)> {
    if adapt_data.is_empty() {
        return Err(Error::Contract("adaptation set is empty".into()));
    }
    let head = head_strategy.build(base, adapt_data, scale, seeds::derive_seed(cfg.seed, "ft-head"))?;
    let mut trainer = FullTrainer {
        model: base.clone(),
        head,
    };
    let count = trainer.trainable_count();
    let history = fit(&mut trainer, adapt_data, val_data, cfg)?;
    Ok((
        TrainOutcome {
            model: trainer.model,
            head: trainer.head,
            history,
        },
        count,
    ))
}
