//! Experiment recipe: one config describing the device fleet, channel
//! environments, training settings and evaluation protocol, plus the stage
//! functions that turn it into datasets, a base model, a LoRA pool and
//! evaluation reports. Every stage seed is derived from the master seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdaptContext, Registry};
use crate::error::{Error, Result};
use crate::evalkit::{make_pairs, EvalReport, TimingRecord, DEFAULT_MAX_PAIRS};
use crate::extractor::{train_base, Architecture, Embedding, ExtractorModel, MetricHead, TrainerConfig, DEFAULT_SCALE};
use crate::io::{self, Checkpoint};
use crate::lora::{train_lora, HeadStrategy, LoraModule};
use crate::rla::{default_parents, default_population, CmaesConfig, LoraPool, DEFAULT_MAX_ITERATIONS, DEFAULT_SIGMA0};
use crate::seeds;
use crate::sigsim::{
    build_dataset, split_adapt_eval, split_stratified, ChannelProfile, DatasetRole, DeviceImpairment, DeviceRanges,
    LabeledDataset, PreambleSpec,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceSetup {
    /// Total transmitters.
    pub count: usize,
    /// The first `known` devices are used for base and pool training; the
    /// rest only appear in the target environment.
    pub known: usize,
    pub ranges: DeviceRanges,
}

impl Default for DeviceSetup {
    fn default() -> Self {
        Self {
            count: 10,
            known: 5,
            ranges: DeviceRanges::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleCounts {
    pub base_per_pair: usize,
    pub pool_per_pair: usize,
    pub target_per_device: usize,
}

impl Default for SampleCounts {
    fn default() -> Self {
        Self {
            base_per_pair: 30,
            pool_per_pair: 30,
            target_per_device: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSettings {
    /// Weight names to adapt; empty means every weight layer.
    pub targets: Vec<String>,
    pub rank: usize,
    pub head: HeadStrategy,
}

impl Default for LoraSettings {
    fn default() -> Self {
        Self {
            targets: Vec::new(),
            rank: 4,
            head: HeadStrategy::Fresh,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CmaesSettings {
    pub sigma0: f64,
    pub max_iterations: usize,
    /// `None` uses `4 + ⌊3·ln K⌋`.
    pub population: Option<usize>,
}

impl Default for CmaesSettings {
    fn default() -> Self {
        Self {
            sigma0: DEFAULT_SIGMA0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            population: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub max_pairs: usize,
    pub adapt_fraction: f64,
    /// Held-out share of base and pool training data used for the stop rule.
    pub val_fraction: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            max_pairs: DEFAULT_MAX_PAIRS,
            adapt_fraction: 0.2,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preamble: PreambleSpec,
    pub devices: DeviceSetup,
    /// Environment catalogue. SNR is assigned per role below.
    pub channels: Vec<ChannelProfile>,
    pub base_environments: Vec<String>,
    pub pool_environments: Vec<String>,
    pub target_environment: String,
    pub train_snr_db: f64,
    pub target_snr_db: f64,
    pub counts: SampleCounts,
    pub architecture: Architecture,
    pub scale: f64,
    pub base_trainer: TrainerConfig,
    pub lora_trainer: TrainerConfig,
    pub ft_trainer: TrainerConfig,
    pub lora: LoraSettings,
    pub cmaes: CmaesSettings,
    pub evaluation: EvalSettings,
}

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

/// Six multipath environments. `e1..e3` are mild, `e4`/`e5` are stronger
/// echoes, and `e6` is the tap-wise midpoint of `e4` and `e5` with no CFO.
pub fn channel_presets() -> Vec<ChannelProfile> {
    let ch = |id: &str, taps: Vec<Complex64>, cfo: f64| ChannelProfile {
        environment_id: id.into(),
        taps,
        cfo,
        snr_db: None,
    };
    vec![
        ch("e1", vec![c(1.0, 0.0)], 0.0),
        ch("e2", vec![c(1.0, 0.0), c(0.25, 0.1)], 0.001),
        ch("e3", vec![c(1.0, 0.0), c(0.0, 0.0), c(-0.2, 0.25)], -0.001),
        ch("e4", vec![c(0.9, 0.0), c(0.45, -0.3), c(0.0, 0.2)], 0.004),
        ch(
            "e5",
            vec![c(0.85, 0.1), c(-0.35, 0.4), c(0.1, 0.0), c(0.2, 0.0)],
            -0.004,
        ),
        ch(
            "e6",
            vec![c(0.875, 0.05), c(0.05, 0.05), c(0.05, 0.1), c(0.1, 0.0)],
            0.0,
        ),
    ]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let preamble = PreambleSpec::default();
        Self {
            seed: 0,
            architecture: Architecture::for_signal_len(preamble.length),
            preamble,
            devices: DeviceSetup::default(),
            channels: channel_presets(),
            base_environments: vec!["e1".into(), "e2".into(), "e3".into()],
            pool_environments: (1..=5).map(|i| format!("e{i}")).collect(),
            target_environment: "e6".into(),
            train_snr_db: 30.0,
            target_snr_db: 20.0,
            counts: SampleCounts::default(),
            scale: DEFAULT_SCALE,
            base_trainer: TrainerConfig::default(),
            lora_trainer: TrainerConfig::default(),
            ft_trainer: TrainerConfig::default(),
            lora: LoraSettings::default(),
            cmaes: CmaesSettings::default(),
            evaluation: EvalSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale variant of the default recipe with 256-sample preambles
    /// and smaller per-device counts.
    pub fn benchmark(seed: u64) -> Self {
        let mut cfg = Self {
            seed,
            ..Self::default()
        };
        cfg.preamble.length = 256;
        cfg.architecture = Architecture::for_signal_len(256);
        cfg.counts = SampleCounts {
            base_per_pair: 20,
            pool_per_pair: 20,
            target_per_device: 100,
        };
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.preamble.validate()?;
        self.architecture.validate()?;
        if self.architecture.signal_len != self.preamble.length {
            return Err(Error::config(
                "architecture.signal_len",
                format!(
                    "{} != preamble length {}",
                    self.architecture.signal_len, self.preamble.length
                ),
            ));
        }
        if self.devices.known < 2 || self.devices.count < self.devices.known + 2 {
            return Err(Error::config(
                "devices",
                "need at least two known and two unseen devices",
            ));
        }
        for ch in &self.channels {
            ch.validate()?;
        }
        let mut ids: Vec<&str> = self.channels.iter().map(|c| c.environment_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("channels", "environment ids must be unique"));
        }
        for (field, list) in [
            ("base_environments", &self.base_environments),
            ("pool_environments", &self.pool_environments),
        ] {
            if list.is_empty() {
                return Err(Error::config(field, "must name at least one environment"));
            }
            for id in list {
                self.channel(id)
                    .map_err(|_| Error::config(field, format!("unknown environment {id}")))?;
            }
        }
        self.channel(&self.target_environment).map_err(|_| {
            Error::config(
                "target_environment",
                format!("unknown environment {}", self.target_environment),
            )
        })?;
        let c = &self.counts;
        if c.base_per_pair == 0 || c.pool_per_pair == 0 || c.target_per_device < 2 {
            return Err(Error::config(
                "counts",
                "per-pair counts must be positive and targets need 2 per device",
            ));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be > 0"));
        }
        for (field, t) in [
            ("base_trainer", &self.base_trainer),
            ("lora_trainer", &self.lora_trainer),
            ("ft_trainer", &self.ft_trainer),
        ] {
            t.validate().map_err(|e| Error::config(field, e.to_string()))?;
        }
        if self.lora.rank == 0 {
            return Err(Error::config("lora.rank", "must be positive"));
        }
        let names = ExtractorModel::init(self.architecture.clone(), 0)?.weight_names();
        for t in &self.lora.targets {
            if !names.contains(t) {
                return Err(Error::config("lora.targets", format!("unknown weight {t}")));
            }
        }
        if !(self.cmaes.sigma0 > 0.0) {
            return Err(Error::config("cmaes.sigma0", "must be > 0"));
        }
        if self.cmaes.population.is_some_and(|p| p < 2) {
            return Err(Error::config("cmaes.population", "must be at least 2"));
        }
        let e = &self.evaluation;
        for (field, f) in [
            ("evaluation.adapt_fraction", e.adapt_fraction),
            ("evaluation.val_fraction", e.val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config(field, "must lie in (0, 1)"));
            }
        }
        if e.max_pairs < 2 {
            return Err(Error::config("evaluation.max_pairs", "must be at least 2"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, as hex.
    pub fn hash(&self) -> String {
        io::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        seeds::derive_seed(self.seed, stage)
    }

    pub fn channel(&self, id: &str) -> Result<&ChannelProfile> {
        self.channels
            .iter()
            .find(|c| c.environment_id == id)
            .ok_or_else(|| Error::config("environment", format!("unknown environment {id}")))
    }

    pub fn fleet(&self) -> Vec<DeviceImpairment> {
        let seed = self.stage_seed("devices");
        (0..self.devices.count)
            .map(|i| self.devices.ranges.sample(seed, i))
            .collect()
    }

    fn profiles(&self, ids: &[String], snr_db: f64) -> Result<Vec<ChannelProfile>> {
        ids.iter()
            .map(|id| Ok(self.channel(id)?.with_snr(Some(snr_db))))
            .collect()
    }

    pub fn cmaes_config(&self, k: usize) -> Result<CmaesConfig> {
        let mut cfg = CmaesConfig::for_dimension(k)?;
        if let Some(p) = self.cmaes.population {
            cfg.population = p;
            cfg.parents = default_parents(p).max(1);
        } else {
            cfg.population = default_population(k)?;
        }
        cfg.sigma0 = self.cmaes.sigma0;
        cfg.max_iterations = self.cmaes.max_iterations;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lora_targets(&self, base: &ExtractorModel) -> Vec<String> {
        if self.lora.targets.is_empty() {
            base.weight_names()
        } else {
            self.lora.targets.clone()
        }
    }

    pub fn trainer(&self, which: &TrainerConfig, stage: &str) -> TrainerConfig {
        TrainerConfig {
            seed: self.stage_seed(stage),
            ..which.clone()
        }
    }
}

/// All datasets one experiment needs.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    /// Known devices on the base environments at training SNR.
    pub base: LabeledDataset,
    /// Known devices on the pool environments at training SNR.
    pub pool: LabeledDataset,
    /// Unseen devices on the target environment, adaptation share.
    pub target_adapt: LabeledDataset,
    /// Unseen devices on the target environment, evaluation share.
    pub target_eval: LabeledDataset,
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let fleet = cfg.fleet();
    let (known, unseen) = fleet.split_at(cfg.devices.known);
    let c = &cfg.counts;
    let base = build_dataset(
        &cfg.preamble,
        known,
        &cfg.profiles(&cfg.base_environments, cfg.train_snr_db)?,
        c.base_per_pair,
        cfg.stage_seed("data-base"),
    )?;
    let pool = build_dataset(
        &cfg.preamble,
        known,
        &cfg.profiles(&cfg.pool_environments, cfg.train_snr_db)?,
        c.pool_per_pair,
        cfg.stage_seed("data-pool"),
    )?;
    let target = build_dataset(
        &cfg.preamble,
        unseen,
        &cfg.profiles(std::slice::from_ref(&cfg.target_environment), cfg.target_snr_db)?,
        c.target_per_device,
        cfg.stage_seed("data-target"),
    )?
    .with_device_ids((cfg.devices.known..cfg.devices.count).collect())?;
    let (target_adapt, target_eval) =
        split_adapt_eval(&target, cfg.evaluation.adapt_fraction, cfg.stage_seed("split-target"))?;
    Ok(GeneratedData {
        base,
        pool,
        target_adapt,
        target_eval,
    })
}

/// Splits off a stratified validation part; returns `(train, val)`.
fn hold_out(cfg: &ExperimentConfig, data: &LabeledDataset, stage: &str) -> Result<(LabeledDataset, LabeledDataset)> {
    let (val, train) = split_stratified(data, cfg.evaluation.val_fraction, cfg.stage_seed(stage))?;
    Ok((
        train.with_role(DatasetRole::Train),
        val.with_role(DatasetRole::Validation),
    ))
}

pub fn train_base_model(cfg: &ExperimentConfig, base: &LabeledDataset) -> Result<Checkpoint> {
    let (train, val) = hold_out(cfg, base, "split-base")?;
    let model = ExtractorModel::init(cfg.architecture.clone(), cfg.stage_seed("base-init"))?;
    let head = MetricHead::init(
        base.device_count(),
        model.embed_dim(),
        cfg.scale,
        cfg.stage_seed("base-head"),
    )?;
    let trainer = cfg.trainer(&cfg.base_trainer, "base-train");
    let out = train_base(model, head, &train, &val, &trainer)?;
    Ok(Checkpoint {
        model: out.model,
        head: out.head,
        seed: trainer.seed,
        history: out.history,
    })
}

/// Pretrains one adapter on `environment_id`'s share of the pool data.
pub fn pretrain_module(
    cfg: &ExperimentConfig,
    base: &ExtractorModel,
    pool: &LabeledDataset,
    environment_id: &str,
) -> Result<crate::lora::LoraTrainOutcome> {
    let data = pool.filter_environments(&[environment_id]);
    if data.is_empty() {
        return Err(Error::config(
            "environment",
            format!("no samples for environment {environment_id}"),
        ));
    }
    let (train, val) = hold_out(cfg, &data, &format!("split-lora:{environment_id}"))?;
    let trainer = cfg.trainer(&cfg.lora_trainer, &format!("lora:{environment_id}"));
    train_lora(
        base,
        cfg.lora.head,
        environment_id,
        &train,
        &val,
        &cfg.lora_targets(base),
        cfg.lora.rank,
        cfg.scale,
        &trainer,
    )
}

pub fn pretrain_pool(cfg: &ExperimentConfig, base: &ExtractorModel, pool: &LabeledDataset) -> Result<Vec<LoraModule>> {
    let mut ids = cfg.pool_environments.clone();
    ids.sort();
    ids.iter()
        .map(|id| pretrain_module(cfg, base, pool, id).map(|o| o.module))
        .collect()
}

/// Verification report of `model` on `data`, labelling pairs by global
/// device id.
pub fn evaluate(model: &ExtractorModel, data: &LabeledDataset, max_pairs: usize, seed: u64) -> Result<EvalReport> {
    let embeddings: Vec<Embedding> = data
        .samples
        .iter()
        .map(|s| model.embed(&s.signal))
        .collect::<Result<_>>()?;
    let labels: Vec<usize> = data.samples.iter().map(|s| data.device_ids[s.device]).collect();
    let pairs = make_pairs(&embeddings, &labels, max_pairs, seed)?;
    EvalReport::from_pairs(&pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub eer: f64,
    pub auc: f64,
    pub eer_threshold: f64,
    pub pair_count: usize,
    pub timing: TimingRecord,
    /// Mixing coefficients, for aggregation methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<Vec<f64>>,
    /// Adaptation epochs, for gradient methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub seed: u64,
    pub config_hash: String,
    pub base_epochs: usize,
    pub base_val_auc: f64,
    pub pool: Vec<String>,
    pub results: Vec<MethodResult>,
}

impl BenchmarkReport {
    pub fn result(&self, method: &str) -> Option<&MethodResult> {
        self.results.iter().find(|r| r.method == method)
    }
}

/// Full pipeline: data, base model, pool, then every requested adaptation
/// method evaluated on the same target evaluation pairs.
pub fn run_benchmark(cfg: &ExperimentConfig, methods: &[&str]) -> Result<BenchmarkReport> {
    let registry = Registry::default();
    for m in methods {
        registry.get(m)?;
    }
    let data = generate_data(cfg)?;
    let ckpt = train_base_model(cfg, &data.base)?;
    let needs_pool = methods.contains(&"rla");
    let pool = if needs_pool {
        Some(LoraPool::new(pretrain_pool(cfg, &ckpt.model, &data.pool)?)?)
    } else {
        None
    };
    let eval_seed = cfg.stage_seed("eval-pairs");
    let mut results = Vec::with_capacity(methods.len());
    for m in methods {
        let ctx = AdaptContext {
            config: cfg,
            base: &ckpt.model,
            pool: pool.as_ref(),
            adapt: &data.target_adapt,
            seed: cfg.stage_seed(&format!("adapt:{m}")),
        };
        let adapted = registry.get(m)?.run(&ctx)?;
        let report = evaluate(&adapted.model, &data.target_eval, cfg.evaluation.max_pairs, eval_seed)?;
        results.push(MethodResult {
            method: m.to_string(),
            eer: report.eer,
            auc: report.auc,
            eer_threshold: report.eer_threshold,
            pair_count: report.pair_count,
            alpha: adapted.artifact.alpha(),
            epochs: adapted.artifact.epochs(),
            timing: adapted.timing,
        });
    }
    Ok(BenchmarkReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        base_epochs: ckpt.history.len(),
        base_val_auc: ckpt.history.last().map_or(f64::NAN, |h| h.val_auc),
        pool: pool
            .as_ref()
            .map(|p| p.environment_ids().iter().map(|s| s.to_string()).collect())
            .unwrap_or_default(),
        results,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_hash: String,
    pub tool_version: String,
    pub inputs: Vec<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub seeds: BTreeMap<String, u64>,
    pub wall_seconds: f64,
}

/// Provenance log kept next to the artifacts it describes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub const FILE_NAME: &'static str = "run_manifest.json";

    /// Appends `entry` to the manifest in `dir`, creating it if needed.
    pub fn append(dir: &Path, entry: ManifestEntry) -> Result<PathBuf> {
        let path = dir.join(Self::FILE_NAME);
        let mut m: RunManifest = if path.exists() {
            io::load_json(&path)?
        } else {
            Self::default()
        };
        m.entries.push(entry);
        io::save_json(&path, &m)?;
        Ok(path)
    }
}
