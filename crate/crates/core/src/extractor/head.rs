use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Embedding, ExtractorModel};
use crate::error::{Error, Result};
use crate::evalkit::unit_cosine_distance;
use crate::ndmath::{self, Tensor};
use crate::seeds;
use crate::sigsim::Sample;

/// Cosine-softmax scale `δ`.
pub const DEFAULT_SCALE: f64 = 16.0;

/// Class directions `W` (`J × d`, used only through cosines) and scale `δ`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricHead {
    pub directions: Tensor,
    pub scale: f64,
}

impl MetricHead {
    pub fn new(directions: Tensor, scale: f64) -> Result<Self> {
        directions.dims2()?;
        if !(scale > 0.0) {
            return Err(Error::config("scale", "δ must be > 0"));
        }
        Ok(Self { directions, scale })
    }

    /// Glorot-uniform rows, seeded.
    pub fn init(classes: usize, dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::config("head", "classes and dim must be positive"));
        }
        let limit = (6.0 / (classes + dim) as f64).sqrt();
        let mut rng = seeds::rng(seed);
        let data = (0..classes * dim).map(|_| rng.random_range(-limit..limit)).collect();
        Self::new(Tensor::matrix(classes, dim, data)?, scale)
    }

    /// Rows are the means of the L2-normalised embeddings of each class.
    pub fn prototypes(embeddings: &[Embedding], labels: &[usize], classes: usize, scale: f64) -> Result<Self> {
        let dim = embeddings
            .first()
            .map(Embedding::dim)
            .ok_or_else(|| Error::Contract("prototype head needs embeddings".into()))?;
        let mut sums = vec![0.0; classes * dim];
        let mut counts = vec![0usize; classes];
        for (z, &y) in embeddings.iter().zip(labels) {
            if y >= classes {
                return Err(Error::Contract(format!("label {y} >= {classes}")));
            }
            let u = z.unit()?;
            for (s, v) in sums[y * dim..(y + 1) * dim].iter_mut().zip(u) {
                *s += v;
            }
            counts[y] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Contract(format!("device {empty} has no samples")));
        }
        for (row, &c) in sums.chunks_mut(dim).zip(&counts) {
            row.iter_mut().for_each(|v| *v /= c as f64);
        }
        Self::new(Tensor::matrix(classes, dim, sums)?, scale)
    }

    pub fn classes(&self) -> usize {
        self.directions.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.directions.shape()[1]
    }

    fn unit_rows(&self) -> Result<Tensor> {
        ndmath::l2_normalize(&self.directions)
    }

    /// Scaled cosine logits `δ·cos(w_j, z)`.
    pub fn logits(&self, z: &Embedding) -> Result<Vec<f64>> {
        if z.dim() != self.dim() {
            return Err(Error::dim("head", &[z.dim()], self.directions.shape()));
        }
        let u = Tensor::vector(z.unit()?);
        let cos = ndmath::matmul(&self.unit_rows()?, &u)?;
        Ok(cos.data().iter().map(|c| self.scale * c).collect())
    }
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::dim("cosine_distance", &[a.dim()], &[b.dim()]));
    }
    Ok(unit_cosine_distance(&a.unit()?, &b.unit()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Same,
    Different,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationPolicy {
    pub threshold: f64,
}

impl VerificationPolicy {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=2.0).contains(&threshold) {
            return Err(Error::config("threshold", format!("{threshold} not in [0, 2]")));
        }
        Ok(Self { threshold })
    }
}

/// Same device iff the cosine distance is at most the threshold.
pub fn verify(a: &Embedding, b: &Embedding, policy: VerificationPolicy) -> Result<Decision> {
    Ok(if cosine_distance(a, b)? <= policy.threshold {
        Decision::Same
    } else {
        Decision::Different
    })
}

/// Softmax over `δ·cos(w_j, z)`, max-subtracted.
pub fn posteriors(z: &Embedding, head: &MetricHead) -> Result<Vec<f64>> {
    let logits = head.logits(z)?;
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn posterior(z: &Embedding, head: &MetricHead, y: usize) -> Result<f64> {
    if y >= head.classes() {
        return Err(Error::Contract(format!("class {y} >= J = {}", head.classes())));
    }
    Ok(posteriors(z, head)?[y])
}

/// Mean of `−ln p(y|z)` over precomputed embeddings.
pub fn embedding_loss(embeddings: &[Embedding], labels: &[usize], head: &MetricHead) -> Result<f64> {
    if embeddings.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    if embeddings.len() != labels.len() {
        return Err(Error::dim("embedding_loss", &[embeddings.len()], &[labels.len()]));
    }
    let mut total = 0.0;
    for (z, &y) in embeddings.iter().zip(labels) {
        if y >= head.classes() {
            return Err(Error::Contract(format!("label {y} >= J = {}", head.classes())));
        }
        let logits = head.logits(z)?;
        total += crate::ndmath::log_sum_exp(&logits) - logits[y];
    }
    Ok(total / embeddings.len() as f64)
}

/// MLE objective `−E[ln p(y|x)]` of `model` + `head` over `batch`.
pub fn mle_loss(model: &ExtractorModel, head: &MetricHead, batch: &[&Sample]) -> Result<f64> {
    let embeddings: Vec<Embedding> = batch.iter().map(|s| model.embed(&s.signal)).collect::<Result<_>>()?;
    let labels: Vec<usize> = batch.iter().map(|s| s.device).collect();
    embedding_loss(&embeddings, &labels, head)
}
