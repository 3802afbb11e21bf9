use num_complex::Complex64;
use proptest::prelude::*;
use rla_core::counters;
use rla_core::extractor::{Architecture, ConvSpec, ExtractorModel, TrainerConfig};
use rla_core::lora::{adapted_forward, init_lora, train_lora, HeadStrategy, LoraFactors, LoraModule};
use rla_core::ndmath::Tensor;
use rla_core::rla::*;
use rla_core::sigsim::{build_dataset, ChannelProfile, DeviceRanges, LabeledDataset, PreambleSpec};

const M: usize = 64;

fn small_arch() -> Architecture {
    let conv = |out_channels| ConvSpec {
        out_channels,
        width: 5,
        stride: 2,
    };
    Architecture {
        signal_len: M,
        convs: vec![conv(8), conv(8)],
        embed_dim: 16,
    }
}

fn channel(id: &str, tap: f64, cfo: f64) -> ChannelProfile {
    ChannelProfile {
        environment_id: id.into(),
        taps: vec![Complex64::new(1.0, 0.0), Complex64::new(tap, -0.5 * tap)],
        cfo,
        snr_db: Some(25.0),
    }
}

fn small_data(ch: &ChannelProfile, reps: usize, seed: u64) -> LabeledDataset {
    let spec = PreambleSpec {
        length: M,
        ..PreambleSpec::default()
    };
    let ranges = DeviceRanges::default();
    let devices: Vec<_> = (0..3).map(|i| ranges.sample(99, i)).collect();
    build_dataset(&spec, &devices, std::slice::from_ref(ch), reps, seed).unwrap()
}

fn targets(model: &ExtractorModel) -> Vec<String> {
    model.weight_names()
}

fn random_module(model: &ExtractorModel, env: &str, seed: u64) -> LoraModule {
    let mut m = init_lora(model, env, &targets(model), 2, seed).unwrap();
    for (i, (_, f)) in m.targets.iter_mut().enumerate() {
        let (r, d2) = (f.b.shape()[0], f.b.shape()[1]);
        let data = (0..r * d2)
            .map(|j| (((seed as usize + 1) * 31 + i * 7 + j * 13) % 17) as f64 / 17.0 - 0.5)
            .collect();
        f.b = Tensor::new(vec![r, d2], data).unwrap();
    }
    m
}

fn hand_module(env: &str, a: [f64; 4], b: [f64; 4]) -> LoraModule {
    LoraModule {
        environment_id: env.into(),
        rank: 2,
        targets: vec![(
            "dense".into(),
            LoraFactors {
                a: Tensor::matrix(2, 2, a.to_vec()).unwrap(),
                b: Tensor::matrix(2, 2, b.to_vec()).unwrap(),
            },
        )],
    }
}

fn dense_of(d: &rla_core::lora::DeltaSet, name: &str) -> Tensor {
    d[name].materialize().unwrap()
}

#[test]
fn hand_average_of_two_products() {
    let pool = LoraPool::new(vec![
        hand_module("a", [1.0, 2.0, 3.0, 4.0], [1.0, 0.0, 0.0, 1.0]),
        hand_module("b", [1.0, 0.0, 0.0, 1.0], [0.0, 2.0, 2.0, 0.0]),
    ])
    .unwrap();
    // A1·B1 = [[1,2],[3,4]], A2·B2 = [[0,2],[2,0]]
    let d = aggregate(&pool, &AggregationWeights(vec![0.5, 0.5])).unwrap();
    assert_eq!(dense_of(&d, "dense").data(), &[0.5, 2.0, 2.5, 2.0]);
}

#[test]
fn one_hot_and_zero_weights() {
    let model = ExtractorModel::init(small_arch(), 1).unwrap();
    let pool = LoraPool::new((0..3).map(|k| random_module(&model, &format!("e{k}"), k)).collect()).unwrap();
    for k in 0..3 {
        let d = aggregate(&pool, &AggregationWeights::one_hot(3, k)).unwrap();
        for (name, f) in &pool.modules()[k].targets {
            assert_eq!(dense_of(&d, name), f.delta().unwrap());
        }
    }
    let zero = aggregate(&pool, &AggregationWeights(vec![0.0; 3])).unwrap();
    assert!(zero
        .values()
        .all(|d| d.materialize().unwrap().data().iter().all(|v| *v == 0.0)));
    assert!(aggregate(&pool, &AggregationWeights(vec![1.0; 2])).is_err());
}

#[test]
fn one_hot_forward_matches_attached_module() {
    let model = ExtractorModel::init(small_arch(), 2).unwrap();
    let pool = LoraPool::new((0..3).map(|k| random_module(&model, &format!("e{k}"), k + 5)).collect()).unwrap();
    let data = small_data(&channel("c", 0.3, 0.01), 2, 3);
    for k in 0..3 {
        let agg = aggregate(&pool, &AggregationWeights::one_hot(3, k)).unwrap();
        let own = pool.modules()[k].delta_set();
        for s in &data.samples {
            let a = adapted_forward(&model, &agg, &s.signal).unwrap();
            let b = adapted_forward(&model, &own, &s.signal).unwrap();
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn pool_rejects_mismatched_modules() {
    assert!(LoraPool::new(vec![]).is_err());
    let mut odd = hand_module("b", [0.0; 4], [0.0; 4]);
    odd.targets[0].0 = "conv1".into();
    assert!(LoraPool::new(vec![hand_module("a", [0.0; 4], [0.0; 4]), odd]).is_err());
    let wide = LoraModule {
        environment_id: "w".into(),
        rank: 1,
        targets: vec![(
            "dense".into(),
            LoraFactors {
                a: Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap(),
                b: Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap(),
            },
        )],
    };
    assert!(LoraPool::new(vec![hand_module("a", [0.0; 4], [0.0; 4]), wide]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn aggregation_is_linear(
        a1 in prop::collection::vec(-3.0f64..3.0, 3),
        a2 in prop::collection::vec(-3.0f64..3.0, 3),
        s in -2.0f64..2.0,
        t in -2.0f64..2.0,
    ) {
        let pool = LoraPool::new(vec![
            hand_module("a", [1.0, -2.0, 0.5, 4.0], [1.0, 0.3, 0.0, 1.0]),
            hand_module("b", [0.2, 0.0, 0.0, 1.0], [0.0, 2.0, 2.0, -0.7]),
            hand_module("c", [3.0, 1.0, -1.0, 0.0], [0.5, 0.5, 0.25, 0.0]),
        ]).unwrap();
        let mix: Vec<f64> = a1.iter().zip(&a2).map(|(x, y)| s * x + t * y).collect();
        let lhs = dense_of(&aggregate(&pool, &AggregationWeights(mix)).unwrap(), "dense");
        let d1 = dense_of(&aggregate(&pool, &AggregationWeights(a1)).unwrap(), "dense");
        let d2 = dense_of(&aggregate(&pool, &AggregationWeights(a2)).unwrap(), "dense");
        let rhs = d1.scale(s).add(&d2.scale(t)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
    }
}

#[test]
fn fitness_is_deterministic_and_checks_input() {
    let model = ExtractorModel::init(small_arch(), 4).unwrap();
    let pool = LoraPool::new((0..2).map(|k| random_module(&model, &format!("e{k}"), k)).collect()).unwrap();
    let data = small_data(&channel("c", 0.2, 0.0), 4, 8);
    let alpha = AggregationWeights(vec![0.3, -0.1]);
    let f1 = fitness(&model, &pool, &alpha, &data.samples).unwrap();
    let f2 = fitness(&model, &pool, &alpha, &data.samples).unwrap();
    assert_eq!(f1, f2);
    assert!(fitness(&model, &pool, &alpha, &[]).is_err());
    // device 1 absent while device 2 is present
    let gap: Vec<_> = data.samples.iter().filter(|s| s.device != 1).cloned().collect();
    assert!(fitness(&model, &pool, &alpha, &gap).is_err());
}

#[test]
fn separable_embeddings_score_below_uniform_bound() {
    let data = small_data(&channel("c", 0.0, 0.0), 6, 1);
    let model = ExtractorModel::init(small_arch(), 6).unwrap();
    let base = rla_core::extractor::train_base(
        model,
        rla_core::extractor::MetricHead::init(3, 16, 16.0, 2).unwrap(),
        &data,
        &data,
        &TrainerConfig {
            max_epochs: 40,
            min_epochs: 0,
            auc_stop: None,
            batch_size: 6,
            ..TrainerConfig::default()
        },
    )
    .unwrap();
    let pool = LoraPool::new(vec![random_module(&base.model, "e", 0)]).unwrap();
    let f = fitness(&base.model, &pool, &AggregationWeights(vec![0.0]), &data.samples).unwrap();
    assert!(f < (3.0f64).ln(), "fitness {f}");
}

fn sphere_config(mean: Vec<f64>, evaluations: usize) -> CmaesConfig {
    let mut cfg = CmaesConfig::for_dimension(5).unwrap().with_mean(mean);
    cfg.max_iterations = evaluations / cfg.population;
    cfg
}

// A reference CMA-ES with the same constants needs 620..870 evaluations
// to push the 5-d sphere below 1e-10 from this start.
#[test]
fn sphere_converges() {
    let cfg = sphere_config(vec![1.0; 5], 1200);
    let run = minimize(|x| Ok(x.iter().map(|v| v * v).sum()), &cfg, 42).unwrap();
    assert!(run.best_fitness < 1e-10, "best {}", run.best_fitness);
    for w in run.history.windows(2) {
        assert!(w[1].best_so_far <= w[0].best_so_far);
    }
}

#[test]
fn shifted_sphere_mean_reaches_optimum() {
    let cfg = sphere_config(vec![0.2; 5], 2000);
    let run = minimize(|x| Ok(x.iter().map(|v| (v - 1.0).powi(2)).sum()), &cfg, 7).unwrap();
    for m in &run.final_mean {
        assert!((m - 1.0).abs() < 1e-4, "mean {:?}", run.final_mean);
    }
}

#[test]
fn nan_objective_surfaces_as_optimizer_error() {
    let cfg = CmaesConfig::for_dimension(2).unwrap();
    let err = minimize(|_| Ok(f64::NAN), &cfg, 1).unwrap_err();
    assert_eq!(err.kind(), "optimizer");
}

#[test]
fn rla_on_matching_module_beats_base() {
    let target = channel("t", 0.6, 0.02);
    let data = small_data(&target, 8, 11);
    let base = ExtractorModel::init(small_arch(), 9).unwrap();
    let cfg = TrainerConfig {
        max_epochs: 30,
        min_epochs: 0,
        auc_stop: None,
        batch_size: 8,
        ..TrainerConfig::default()
    };
    let lora = train_lora(
        &base,
        HeadStrategy::Prototype,
        "t",
        &data,
        &data,
        &targets(&base),
        2,
        16.0,
        &cfg,
    )
    .unwrap();
    let pool = LoraPool::new(vec![lora.module]).unwrap();

    let at_zero = fitness(&base, &pool, &AggregationWeights(vec![0.0]), &data.samples).unwrap();
    let at_one = fitness(&base, &pool, &AggregationWeights(vec![1.0]), &data.samples).unwrap();
    assert!(at_one <= at_zero, "{at_one} vs {at_zero}");

    let cmaes = CmaesConfig::for_dimension(1).unwrap();
    let before = counters::snapshot();
    let out = adapt_rla(&base, &pool, &data.samples, &cmaes, 3).unwrap();
    let work = counters::snapshot().since(&before);
    assert_eq!(work.backward_passes, 0);
    assert_eq!(work.gradient_updates, 0);
    assert_eq!(out.work, work);
    assert_eq!(out.evaluations, cmaes.population * cmaes.max_iterations);
    assert_eq!(work.fitness_evaluations as usize, out.evaluations);
    assert!(out.best_fitness <= at_zero);
    for w in out.history.windows(2) {
        assert!(w[1].best_so_far <= w[0].best_so_far);
    }
}

#[test]
fn five_module_budget() {
    let base = ExtractorModel::init(small_arch(), 12).unwrap();
    let pool = LoraPool::new((0..5).map(|k| random_module(&base, &format!("e{k}"), k)).collect()).unwrap();
    let data = small_data(&channel("c", 0.1, 0.0), 2, 2);
    let cfg = CmaesConfig::for_dimension(5).unwrap();
    let out = adapt_rla(&base, &pool, &data.samples, &cfg, 1).unwrap();
    assert!(out.evaluations <= 160);
    assert_eq!(out.weights.as_slice().len(), 5);
    assert!(out.weights.as_slice().iter().all(|a| a.is_finite()));
    let again = adapt_rla(&base, &pool, &data.samples, &cfg, 1).unwrap();
    assert_eq!(again.weights, out.weights);
}
