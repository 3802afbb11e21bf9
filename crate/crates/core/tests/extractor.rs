mod common;

use common::{toy_arch, toy_channel, toy_dataset};
use proptest::prelude::*;
use rla_core::extractor::*;
use rla_core::ndmath::Tensor;
use rla_core::sigsim::{LabeledDataset, Sample};
use rla_core::Error;

fn fd_arch() -> Architecture {
    Architecture {
        signal_len: 16,
        convs: vec![ConvSpec {
            out_channels: 4,
            width: 3,
            stride: 2,
        }],
        embed_dim: 4,
    }
}

/// Softmax of `δ·cos` written out directly.
fn posterior_oracle(z: &[f64], w: &[Vec<f64>], scale: f64) -> Vec<f64> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos: Vec<f64> = w
        .iter()
        .map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (norm(row) * norm(z)))
        .collect();
    let e: Vec<f64> = cos.iter().map(|c| (scale * c).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn head_from_rows(rows: &[Vec<f64>], scale: f64) -> MetricHead {
    let d = rows[0].len();
    MetricHead::new(Tensor::matrix(rows.len(), d, rows.concat()).unwrap(), scale).unwrap()
}

fn quick_cfg(epochs: usize, seed: u64) -> TrainerConfig {
    TrainerConfig {
        learning_rate: 0.05,
        batch_size: 8,
        max_epochs: epochs,
        min_epochs: epochs,
        seed,
        ..TrainerConfig::default()
    }
}

fn toy(reps: usize, seed: u64) -> LabeledDataset {
    toy_dataset(64, 3, &toy_channel("t", 0.2, 30.0), reps, seed)
}

#[test]
fn default_extractor_has_16304_parameters() {
    let m = ExtractorModel::init(Architecture::default(), 0).unwrap();
    assert_eq!(m.parameter_count(), 16_304);
    assert_eq!(m.embed_dim(), 64);
    assert_eq!(m.weight_names(), ["conv1", "conv2", "conv3", "dense"]);
    assert_eq!(m.weight_dims("conv2").unwrap(), (32, 16 * 9));
    assert_eq!(DEFAULT_SCALE, 16.0);
}

#[test]
fn embedding_is_deterministic_and_sized() {
    let data = toy(1, 4);
    let a = ExtractorModel::init(toy_arch(64), 9).unwrap();
    let b = ExtractorModel::init(toy_arch(64), 9).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    let z = a.embed(&data.samples[0].signal).unwrap();
    assert_eq!(z.dim(), 16);
    assert_eq!(z, b.embed(&data.samples[0].signal).unwrap());
    assert_ne!(a.checksum(), ExtractorModel::init(toy_arch(64), 10).unwrap().checksum());
}

#[test]
fn wrong_length_input_is_a_dimension_error() {
    let data = toy_dataset(32, 2, &toy_channel("t", 0.2, 30.0), 1, 0);
    let m = ExtractorModel::init(toy_arch(64), 0).unwrap();
    assert!(matches!(m.embed(&data.samples[0].signal), Err(Error::Dimension { .. })));
}

#[test]
fn zero_weights_give_degenerate_embedding() {
    let mut m = ExtractorModel::init(toy_arch(64), 0).unwrap();
    for p in m.parameters_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let data = toy(1, 0);
    let z = m.embed(&data.samples[0].signal).unwrap();
    assert!(z.is_degenerate());
    let head = MetricHead::init(3, 16, DEFAULT_SCALE, 0).unwrap();
    assert!(matches!(posteriors(&z, &head), Err(Error::Degenerate(_))));
}

#[test]
fn single_class_and_vanishing_scale() {
    let z = Embedding::new(vec![0.3, -1.0, 2.0]);
    let one = head_from_rows(&[vec![1.0, 2.0, 3.0]], 16.0);
    assert_eq!(posteriors(&z, &one).unwrap(), [1.0]);
    let flat = head_from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]], 1e-12);
    for p in posteriors(&z, &flat).unwrap() {
        assert!((p - 1.0 / 3.0).abs() < 1e-9);
    }
    assert!(posterior(&z, &flat, 3).is_err());
}

#[test]
fn posteriors_match_direct_formula() {
    let rows = vec![vec![0.2, -1.0, 0.5], vec![1.0, 1.0, 0.0], vec![-0.3, 0.1, 0.9]];
    let z = [0.7, -0.2, 1.1];
    let got = posteriors(&Embedding::new(z.to_vec()), &head_from_rows(&rows, 16.0)).unwrap();
    for (g, w) in got.iter().zip(posterior_oracle(&z, &rows, 16.0)) {
        assert!((g - w).abs() < 1e-12);
    }
}

#[test]
fn gradients_match_central_differences() {
    let data = toy_dataset(16, 3, &toy_channel("t", 0.3, 20.0), 2, 5);
    let batch: Vec<&Sample> = data.samples.iter().collect();
    let model = ExtractorModel::init(fd_arch(), 3).unwrap();
    let head = MetricHead::init(3, 4, 4.0, 3).unwrap();
    let (loss, grads) = mle_loss_gradients(&model, &head, &batch).unwrap();
    assert!((loss - mle_loss(&model, &head, &batch).unwrap()).abs() < 1e-12);

    let h = 1e-6;
    let n_params = model.parameters().len();
    let (mut num, mut den) = (0.0, 0.0);
    for (k, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let eval = |delta: f64| {
                let (mut m, mut hd) = (model.clone(), head.clone());
                if k < n_params {
                    m.parameters_mut()[k].data_mut()[j] += delta;
                } else {
                    hd.directions.data_mut()[j] += delta;
                }
                mle_loss(&m, &hd, &batch).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            num += (g.data()[j] - fd).powi(2);
            den += fd.powi(2);
        }
    }
    let rel = (num / den).sqrt();
    assert!(rel < 1e-4, "relative error {rel}");
}

#[test]
fn zero_epochs_leave_model_unchanged() {
    let data = toy(2, 1);
    let model = ExtractorModel::init(toy_arch(64), 1).unwrap();
    let head = MetricHead::init(3, 16, DEFAULT_SCALE, 1).unwrap();
    let sum = model.checksum();
    let out = train_base(model, head.clone(), &data, &data, &quick_cfg(0, 0)).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(out.model.checksum(), sum);
    assert_eq!(out.head, head);
}

#[test]
fn separable_toy_trains_and_is_reproducible() {
    let train = toy(8, 2);
    let val = toy(4, 3);
    let run = || {
        let model = ExtractorModel::init(toy_arch(64), 2).unwrap();
        let head = MetricHead::init(3, 16, DEFAULT_SCALE, 2).unwrap();
        train_base(model, head, &train, &val, &quick_cfg(15, 7)).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.checksum(), b.model.checksum());
    let first = a.history.first().unwrap().train_loss;
    let last = a.history.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");
    assert!(last < 3f64.ln());
}

#[test]
fn head_size_must_match_devices() {
    let data = toy(2, 1);
    let model = ExtractorModel::init(toy_arch(64), 1).unwrap();
    let head = MetricHead::init(4, 16, DEFAULT_SCALE, 1).unwrap();
    assert!(train_base(model, head, &data, &data, &quick_cfg(1, 0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn positive_rescaling_keeps_posteriors(
        z in prop::collection::vec(-2.0f64..2.0, 4),
        w in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 4), 2..6),
        a in 1e-3f64..1e3,
        b in 1e-3f64..1e3,
        row in 0usize..6,
    ) {
        prop_assume!(z.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        prop_assume!(w.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let head = head_from_rows(&w, 16.0);
        let p = posteriors(&Embedding::new(z.clone()), &head).unwrap();
        let zs: Vec<f64> = z.iter().map(|v| v * a).collect();
        let mut ws = w.clone();
        let r = row % ws.len();
        ws[r].iter_mut().for_each(|v| *v *= b);
        let q = posteriors(&Embedding::new(zs), &head_from_rows(&ws, 16.0)).unwrap();
        for (x, y) in p.iter().zip(&q) {
            prop_assert!((x - y).abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_is_bounded(
        zs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..8),
        w in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 1..6),
        scale in 0.1f64..32.0,
        seed in 0usize..1000,
    ) {
        prop_assume!(zs.iter().chain(&w).all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-4));
        let j = w.len();
        let labels: Vec<usize> = (0..zs.len()).map(|k| (k + seed) % j).collect();
        let embs: Vec<Embedding> = zs.into_iter().map(Embedding::new).collect();
        let l = embedding_loss(&embs, &labels, &head_from_rows(&w, scale)).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(l <= 2.0 * scale + (j as f64).ln() + 1e-12);
    }

    #[test]
    fn verification_is_monotone_in_threshold(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        b in prop::collection::vec(-1.0f64..1.0, 3),
        t1 in 0.0f64..2.0,
        t2 in 0.0f64..2.0,
    ) {
        prop_assume!(a.iter().chain(&b).map(|v| v * v).sum::<f64>() > 1e-3);
        let (za, zb) = (Embedding::new(a), Embedding::new(b));
        prop_assume!(!za.is_degenerate() && !zb.is_degenerate());
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let same = |t| verify(&za, &zb, VerificationPolicy::new(t).unwrap()).unwrap() == Decision::Same;
        prop_assert!(!same(lo) || same(hi));
        prop_assert_eq!(same(hi), cosine_distance(&za, &zb).unwrap() <= hi);
    }
}
