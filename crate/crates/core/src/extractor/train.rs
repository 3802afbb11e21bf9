use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Embedding, ExtractorModel, MetricHead};
use crate::counters;
use crate::error::{Error, Result};
use crate::evalkit::{self, DEFAULT_MAX_PAIRS};
use crate::ndmath::{Tape, Tensor, Var};
use crate::seeds;
use crate::sigsim::{LabeledDataset, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    /// Stop once validation AUC reaches this (after `min_epochs`).
    pub auc_stop: Option<f64>,
    pub val_max_pairs: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            min_epochs: 150,
            auc_stop: Some(0.99),
            val_max_pairs: DEFAULT_MAX_PAIRS,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if let Some(a) = self.auc_stop {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config("auc_stop", "must lie in (0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
}

/// Classic momentum: `v ← m·v + g`, `p ← p − η·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    cfg: &TrainerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::dim("sgd_step", &[params.len()], &[grads.len(), velocity.len()]));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::dim("sgd_step", p.shape(), g.shape()));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = cfg.momentum * *vv + gv;
            *pv -= cfg.learning_rate * *vv;
        }
    }
    counters::record_update();
    Ok(())
}

/// Records `mean_i −ln softmax(δ·Ŵ ẑ_i)[y_i]` where `Ŵ` has unit rows.
pub fn record_metric_loss(tape: &mut Tape, embeddings: &[Var], labels: &[usize], head: Var, scale: f64) -> Result<Var> {
    if embeddings.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let unit_head = tape.l2_normalize(head)?;
    let mut terms = Vec::with_capacity(embeddings.len());
    for (&z, &y) in embeddings.iter().zip(labels) {
        let u = tape.l2_normalize(z)?;
        let cos = tape.matmul(unit_head, u)?;
        let logits = tape.scale(cos, scale);
        terms.push(tape.softmax_nll(logits, y)?);
    }
    tape.mean(&terms)
}

/// Something whose parameters SGD can fit to the metric objective.
pub trait Trainable {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    /// Records the batch loss given leaf vars for [`Self::parameters`].
    fn record_loss(&self, tape: &mut Tape, params: &[Var], batch: &[&Sample]) -> Result<Var>;
    fn embed(&self, sample: &Sample) -> Result<Embedding>;

    fn embed_all(&self, samples: &[Sample]) -> Result<Vec<Embedding>> {
        samples.iter().map(|s| self.embed(s)).collect()
    }

    fn trainable_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }
}

/// Verification AUC of `target` on `val`, over at most `max_pairs` pairs.
pub fn validation_auc<T: Trainable + ?Sized>(
    target: &T,
    val: &LabeledDataset,
    max_pairs: usize,
    seed: u64,
) -> Result<f64> {
    let embs = target.embed_all(&val.samples)?;
    let pairs = evalkit::make_pairs(&embs, &val.labels(), max_pairs, seed)?;
    evalkit::compute_auc(&pairs)
}

/// Shuffled-minibatch SGD on the metric objective. After each epoch the
/// validation AUC is measured; training stops at `max_epochs`, or at the first
/// epoch `≥ min_epochs` whose AUC reaches `auc_stop`.
pub fn fit<T: Trainable>(
    target: &mut T,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainerConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if train.signal_len != val.signal_len {
        return Err(Error::dim("fit", &[train.signal_len], &[val.signal_len]));
    }
    let mut history = Vec::new();
    if cfg.max_epochs == 0 {
        return Ok(history);
    }
    let mut velocity: Vec<Tensor> = target.parameters().iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut rng = seeds::rng(seeds::derive_seed(cfg.seed, "shuffle"));
    let val_seed = seeds::derive_seed(cfg.seed, "val-pairs");
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train.samples[i]).collect();
            let mut tape = Tape::new();
            let vars: Vec<Var> = target.parameters().into_iter().map(|p| tape.param(p.clone())).collect();
            let loss = target.record_loss(&mut tape, &vars, &batch)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            loss_sum += value * batch.len() as f64;
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
            if grads.iter().any(|g| !g.all_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            let mut params = target.parameters_mut();
            sgd_step(&mut params, &grads, &mut velocity, cfg)?;
        }
        let val_auc = validation_auc(target, val, cfg.val_max_pairs, val_seed)?;
        history.push(EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            val_auc,
        });
        if let Some(stop) = cfg.auc_stop {
            if epoch >= cfg.min_epochs && val_auc >= stop {
                break;
            }
        }
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ExtractorModel,
    pub head: MetricHead,
    pub history: Vec<EpochMetrics>,
}

/// Base extractor + head, all parameters trainable.
pub struct FullTrainer {
    pub model: ExtractorModel,
    pub head: MetricHead,
}

impl Trainable for FullTrainer {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.model.parameters();
        p.push(&self.head.directions);
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.model.parameters_mut();
        p.push(&mut self.head.directions);
        p
    }

    fn record_loss(&self, tape: &mut Tape, params: &[Var], batch: &[&Sample]) -> Result<Var> {
        let n = self.model.layers.len();
        let weights: Vec<Var> = (0..n).map(|i| params[2 * i]).collect();
        let biases: Vec<Var> = (0..n).map(|i| params[2 * i + 1]).collect();
        let head = params[2 * n];
        let mut zs = Vec::with_capacity(batch.len());
        for s in batch {
            let x = tape.constant(s.signal.to_tensor());
            zs.push(self.model.forward_on_tape(tape, x, &weights, &biases)?);
        }
        let labels: Vec<usize> = batch.iter().map(|s| s.device).collect();
        record_metric_loss(tape, &zs, &labels, head, self.head.scale)
    }

    fn embed(&self, sample: &Sample) -> Result<Embedding> {
        self.model.embed(&sample.signal)
    }
}

/// Loss and gradients of the metric objective on `batch`, one gradient per
/// entry of `model.parameters()` followed by the head directions.
pub fn mle_loss_gradients(model: &ExtractorModel, head: &MetricHead, batch: &[&Sample]) -> Result<(f64, Vec<Tensor>)> {
    let t = FullTrainer {
        model: model.clone(),
        head: head.clone(),
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = t.parameters().into_iter().map(|p| tape.param(p.clone())).collect();
    let loss = t.record_loss(&mut tape, &vars, batch)?;
    let value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.take(v)).collect()))
}

/// Trains model and head jointly on `train`, monitoring `val`.
pub fn train_base(
    model: ExtractorModel,
    head: MetricHead,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &TrainerConfig,
) -> Result<TrainOutcome> {
    if head.classes() != train.device_count() {
        return Err(Error::config(
            "head",
            format!(
                "{} classes for {} training devices",
                head.classes(),
                train.device_count()
            ),
        ));
    }
    if head.dim() != model.embed_dim() {
        return Err(Error::dim("train_base", &[head.dim()], &[model.embed_dim()]));
    }
    let mut t = FullTrainer { model, head };
    let history = fit(&mut t, train, val, cfg)?;
    Ok(TrainOutcome {
        model: t.model,
        head: t.head,
        history,
    })
}
