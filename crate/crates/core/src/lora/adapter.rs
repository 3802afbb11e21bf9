use std::collections::BTreeMap;

use rand::Rng;

use crate::counters;
use crate::error::{Error, Result};
use crate::extractor::{Embedding, ExtractorModel, LayerKind, WeightOverrides};
use crate::ndmath::{self, Tensor};
use crate::seeds;
use crate::sigsim::ComplexSignal;

/// Factor pair for one target weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn delta(&self) -> Result<Tensor> {
        lora_delta(&self.a, &self.b)
    }

    pub fn parameter_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// One environment's adapter: factor pairs keyed by target weight name,
/// stored in the base model's layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    pub environment_id: String,
    pub rank: usize,
    pub targets: Vec<(String, LoraFactors)>,
}

impl LoraModule {
    pub fn target_names(&self) -> Vec<&str> {
        self.targets.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn factors(&self, name: &str) -> Option<&LoraFactors> {
        self.targets.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }

    pub fn parameter_count(&self) -> usize {
        self.targets.iter().map(|(_, f)| f.parameter_count()).sum()
    }

    /// Factored deltas for attaching to a base model.
    pub fn delta_set(&self) -> DeltaSet {
        self.targets
            .iter()
            .map(|(n, f)| (n.clone(), LayerDelta::Factored(f.clone())))
            .collect()
    }

    /// Checks that every target exists in `base` with matching shapes.
    pub fn check_against(&self, base: &ExtractorModel) -> Result<()> {
        for (name, f) in &self.targets {
            let (d1, d2) = base.weight_dims(name)?;
            if f.a.shape() != [d1, self.rank] || f.b.shape() != [self.rank, d2] {
                return Err(Error::Dimension {
                    op: "lora target",
                    lhs: vec![d1, d2],
                    rhs: [f.a.shape(), f.b.shape()].concat(),
                });
            }
        }
        Ok(())
    }
}

/// `ΔW = A·B`.
pub fn lora_delta(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ndmath::matmul(a, b)
}

/// Fresh adapter: `A` seeded Glorot-uniform over `d₁ × r`, `B = 0`.
pub fn init_lora(
    model: &ExtractorModel,
    environment_id: &str,
    targets: &[String],
    rank: usize,
    seed: u64,
) -> Result<LoraModule> {
    if rank == 0 {
        return Err(Error::config("rank", "must be at least 1"));
    }
    if targets.is_empty() {
        return Err(Error::config("targets", "at least one target weight required"));
    }
    for t in targets {
        model.weight_dims(t)?;
    }
    let mut rng = seeds::rng(seed);
    let mut out = Vec::new();
    for name in model.weight_names() {
        if !targets.contains(&name) {
            continue;
        }
        let (d1, d2) = model.weight_dims(&name)?;
        if rank > d1.min(d2) {
            return Err(Error::config(
                "rank",
                format!("rank {rank} exceeds min({d1}, {d2}) for `{name}`"),
            ));
        }
        let limit = (6.0 / (d1 + rank) as f64).sqrt();
        let a = Tensor::matrix(
            d1,
            rank,
            (0..d1 * rank).map(|_| rng.random_range(-limit..limit)).collect(),
        )?;
        let b = Tensor::zeros(&[rank, d2]);
        out.push((name, LoraFactors { a, b }));
    }
    Ok(LoraModule {
        environment_id: environment_id.to_string(),
        rank,
        targets: out,
    })
}

/// A weight update for one layer, factored or materialised.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerDelta {
    Factored(LoraFactors),
    Dense(Tensor),
}

impl LayerDelta {
    pub fn materialize(&self) -> Result<Tensor> {
        match self {
            LayerDelta::Factored(f) => f.delta(),
            LayerDelta::Dense(m) => Ok(m.clone()),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            LayerDelta::Factored(f) => (f.a.shape()[0], f.b.shape()[1]),
            LayerDelta::Dense(m) => (m.shape()[0], m.shape()[1]),
        }
    }
}

/// Per-layer updates keyed by weight name.
pub type DeltaSet = BTreeMap<String, LayerDelta>;

fn check_deltas(base: &ExtractorModel, deltas: &DeltaSet) -> Result<()> {
    for (name, d) in deltas {
        let dims = base.weight_dims(name)?;
        if d.dims() != dims {
            let (a, b) = d.dims();
            return Err(Error::dim("delta", &[dims.0, dims.1], &[a, b]));
        }
    }
    Ok(())
}

/// Forward pass of `base + deltas` without merging: every target layer
/// evaluates `W·x + A·(B·x)` (or `W·x + Δ·x` for a dense delta).
pub fn adapted_forward(base: &ExtractorModel, deltas: &DeltaSet, x: &ComplexSignal) -> Result<Embedding> {
    check_deltas(base, deltas)?;
    if x.len() != base.arch.signal_len {
        return Err(Error::dim("adapted_forward", &[x.len()], &[base.arch.signal_len]));
    }
    counters::record_forward();
    let mut h = x.to_tensor();
    for layer in &base.layers {
        let delta = deltas.get(&layer.name);
        h = match layer.kind {
            LayerKind::Conv { stride } => {
                let c_in = layer.weight.shape()[1];
                let w = layer.weight.shape()[2];
                let mut y = ndmath::conv1d(&h, &layer.weight, stride)?;
                match delta {
                    Some(LayerDelta::Factored(f)) => {
                        let r = f.rank();
                        let b_kernel = f.b.reshape(&[r, c_in, w])?;
                        let bx = ndmath::conv1d(&h, &b_kernel, stride)?;
                        let a_kernel = f.a.reshape(&[f.a.shape()[0], r, 1])?;
                        y = y.add(&ndmath::conv1d(&bx, &a_kernel, 1)?)?;
                    }
                    Some(LayerDelta::Dense(m)) => {
                        let k = m.reshape(layer.weight.shape())?;
                        y = y.add(&ndmath::conv1d(&h, &k, stride)?)?;
                    }
                    None => {}
                }
                ndmath::relu(&ndmath::add_channel_bias(&y, &layer.bias)?)
            }
            LayerKind::Dense => {
                let p = ndmath::global_avg_pool(&h)?;
                let mut y = ndmath::matmul(&layer.weight, &p)?;
                match delta {
                    Some(LayerDelta::Factored(f)) => {
                        y = y.add(&ndmath::matmul(&f.a, &ndmath::matmul(&f.b, &p)?)?)?;
                    }
                    Some(LayerDelta::Dense(m)) => y = y.add(&ndmath::matmul(m, &p)?)?,
                    None => {}
                }
                ndmath::add_channel_bias(&y, &layer.bias)?
            }
        };
    }
    Ok(Embedding(h.into_data()))
}

/// Merged weights `W + Δ` for the targeted layers, in matrix-view shape.
pub(crate) fn merged_overrides(base: &ExtractorModel, deltas: &DeltaSet) -> Result<WeightOverrides> {
    check_deltas(base, deltas)?;
    let mut out = WeightOverrides::new();
    for (name, d) in deltas {
        let layer = base.layer(name).expect("checked");
        let (d1, d2) = layer.matrix_dims();
        let w = layer.weight.reshape(&[d1, d2])?;
        out.insert(name.clone(), w.add(&d.materialize()?)?);
    }
    Ok(out)
}

/// Standalone model with `W ← W + Δ` on every target; `base` is untouched.
pub fn merge(base: &ExtractorModel, deltas: &DeltaSet) -> Result<ExtractorModel> {
    let merged = merged_overrides(base, deltas)?;
    let mut out = base.clone();
    for layer in &mut out.layers {
        if let Some(m) = merged.get(&layer.name) {
            layer.weight = m.reshape(layer.weight.shape())?;
        }
    }
    Ok(out)
}

/// Inverse of [`merge`]: `W ← W − Δ` on every target.
pub fn unmerge(merged: &ExtractorModel, deltas: &DeltaSet) -> Result<ExtractorModel> {
    check_deltas(merged, deltas)?;
    let mut out = merged.clone();
    for layer in &mut out.layers {
        if let Some(d) = deltas.get(&layer.name) {
            let dm = d.materialize()?.reshape(layer.weight.shape())?;
            layer.weight = layer.weight.sub(&dm)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::Architecture;
    use crate::sigsim::PreambleSpec;

    fn all_targets(m: &ExtractorModel) -> Vec<String> {
        m.weight_names()
    }

    #[test]
    fn outer_product_delta() {
        let a = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(lora_delta(&a, &b).unwrap().data(), &[3.0, 4.0, 6.0, 8.0]);
        let z = Tensor::zeros(&[2, 1]);
        assert_eq!(lora_delta(&z, &b).unwrap(), Tensor::zeros(&[2, 2]));
        assert!(lora_delta(&a, &a).is_err());
    }

    #[test]
    fn fresh_module_is_zero_and_shaped() {
        let m = ExtractorModel::init(Architecture::default(), 1).unwrap();
        let lora = init_lora(&m, "g1", &all_targets(&m), 4, 9).unwrap();
        for (_, f) in &lora.targets {
            assert!(f.delta().unwrap().data().iter().all(|&v| v == 0.0));
        }
        let dense = lora.factors("dense").unwrap();
        assert_eq!(dense.a.shape(), &[64, 4]);
        assert_eq!(dense.b.shape(), &[4, 32]);
        assert_eq!(lora.factors("conv3").unwrap().a.shape(), &[32, 4]);
        assert_eq!(lora.factors("conv3").unwrap().b.shape(), &[4, 288]);
    }

    #[test]
    fn init_errors() {
        let m = ExtractorModel::init(Architecture::default(), 1).unwrap();
        assert!(matches!(
            init_lora(&m, "g", &["nope".to_string()], 2, 0),
            Err(Error::Config { .. })
        ));
        assert!(init_lora(&m, "g", &["dense".to_string()], 0, 0).is_err());
        // conv1 is 16 × 18
        assert!(init_lora(&m, "g", &["conv1".to_string()], 17, 0).is_err());
    }

    #[test]
    fn zero_deltas_reproduce_base_exactly() {
        let m = ExtractorModel::init(Architecture::for_signal_len(128), 2).unwrap();
        let lora = init_lora(&m, "g", &all_targets(&m), 4, 3).unwrap();
        let x = PreambleSpec {
            length: 128,
            ..PreambleSpec::default()
        }
        .generate()
        .unwrap();
        assert_eq!(
            adapted_forward(&m, &lora.delta_set(), &x).unwrap(),
            m.embed(&x).unwrap()
        );
        assert_eq!(merge(&m, &lora.delta_set()).unwrap(), m);
    }

    #[test]
    fn hand_dense_only_case() {
        // 1 input channel, width-1 conv with one output channel, then 2x1 dense.
        let arch = Architecture {
            signal_len: 2,
            convs: vec![crate::extractor::ConvSpec {
                out_channels: 1,
                width: 1,
                stride: 1,
            }],
            embed_dim: 2,
        };
        let mut m = ExtractorModel::init(arch, 0).unwrap();
        // conv picks the I channel; relu keeps positives; pool averages.
        m.layers[0].weight = Tensor::new(vec![1, 2, 1], vec![1.0, 0.0]).unwrap();
        m.layers[1].weight = Tensor::matrix(2, 1, vec![2.0, -1.0]).unwrap();
        m.layers[1].bias = Tensor::vector(vec![0.5, 0.0]);
        let x = ComplexSignal(vec![
            num_complex::Complex64::new(1.0, 0.0),
            num_complex::Complex64::new(3.0, 0.0),
        ]);
        // pooled feature p = 2; W p = [4, −2]; A(B p) with A = [1, 1]ᵀ, B = [0.25] → [0.5, 0.5]
        let mut deltas = DeltaSet::new();
        deltas.insert(
            "dense".into(),
            LayerDelta::Factored(LoraFactors {
                a: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
                b: Tensor::matrix(1, 1, vec![0.25]).unwrap(),
            }),
        );
        let h = adapted_forward(&m, &deltas, &x).unwrap();
        assert_eq!(h.as_slice(), &[5.0, -1.5]);
    }

    #[test]
    fn merge_unmerge_round_trip() {
        let m = ExtractorModel::init(Architecture::for_signal_len(64), 5).unwrap();
        let mut lora = init_lora(&m, "g", &all_targets(&m), 2, 6).unwrap();
        let mut rng = seeds::rng(1);
        for (_, f) in &mut lora.targets {
            f.b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let merged = merge(&m, &lora.delta_set()).unwrap();
        assert_ne!(merged, m);
        let back = unmerge(&merged, &lora.delta_set()).unwrap();
        for (a, b) in back.parameters().iter().zip(m.parameters()) {
            assert!(a.max_abs_diff(b) <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = ExtractorModel::init(Architecture::for_signal_len(64), 5).unwrap();
        let mut deltas = DeltaSet::new();
        deltas.insert("dense".into(), LayerDelta::Dense(Tensor::zeros(&[3, 3])));
        assert!(matches!(merge(&m, &deltas), Err(Error::Dimension { .. })));
    }
}
