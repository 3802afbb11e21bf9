//! `rla`: data generation, training, adaptation and evaluation commands.
//!
//! Every command writes its artifact and appends a provenance entry to
//! `run_manifest.json` in the artifact's directory. Failures print one JSON
//! error record on stderr and exit with status 1.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rla_core::adapt::{AdaptContext, Registry};
use rla_core::evalkit::EvalReport;
use rla_core::experiment::{
    self, evaluate, BenchmarkReport, ExperimentConfig, ManifestEntry, RunManifest, TOOL_VERSION,
};
use rla_core::extractor::ExtractorModel;
use rla_core::io::{self, Checkpoint};
use rla_core::lora::merge;
use rla_core::rla::{aggregate, AggregationWeights, LoraPool};
use rla_core::sigsim::LabeledDataset;
use rla_core::{Error, Result};

mod records;

use records::{EvaluationRecord, RlaReport, Summary, SummaryRow};

#[derive(Parser)]
#[command(
    name = "rla",
    version,
    about = "RF fingerprint channel adaptation by LoRA aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default experiment config.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
        /// Use the desk-scale benchmark recipe.
        #[arg(long)]
        benchmark: bool,
    },
    /// Generate base, pool and target datasets into a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base extractor.
    TrainBase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain one pool adapter on a single environment.
    TrainLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        env: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search aggregation weights over a directory of adapters.
    AdaptRla {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        pool_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune every weight on the adaptation set.
    AdaptFt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh adapter on the adaptation set.
    AdaptLora {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verification metrics of a model (optionally adapted) on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        base: PathBuf,
        /// Single adapter file.
        #[arg(long, conflicts_with = "rla")]
        adapter: Option<PathBuf>,
        /// Aggregation report from `adapt-rla`; needs `--pool-dir`.
        #[arg(long, requires = "pool_dir")]
        rla: Option<PathBuf>,
        #[arg(long)]
        pool_dir: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Name stored in the record; defaults to the output file stem.
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consolidate evaluation records found in a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Defaults to `<run-dir>/summary.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Whole pipeline in one process for every listed method.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "none,rla,ft,lora")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => io::load_json(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn artifact_dir(out: &Path) -> PathBuf {
    match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

struct Provenance<'a> {
    command: &'static str,
    cfg: Option<&'a ExperimentConfig>,
    inputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    start: Instant,
}

impl<'a> Provenance<'a> {
    fn new(command: &'static str, cfg: Option<&'a ExperimentConfig>, inputs: &[&Path]) -> Self {
        let mut seeds = BTreeMap::new();
        if let Some(c) = cfg {
            seeds.insert("master".to_string(), c.seed);
        }
        Self {
            command,
            cfg,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            seeds,
            start: Instant::now(),
        }
    }

    fn seed(&mut self, stage: &str) -> u64 {
        let s = self.cfg.map_or(0, |c| c.stage_seed(stage));
        self.seeds.insert(stage.to_string(), s);
        s
    }

    fn finish(self, dir: &Path, artifacts: Vec<PathBuf>) -> Result<()> {
        RunManifest::append(
            dir,
            ManifestEntry {
                command: self.command.to_string(),
                config_hash: self.cfg.map(|c| c.hash()).unwrap_or_default(),
                tool_version: TOOL_VERSION.to_string(),
                inputs: self.inputs,
                artifacts,
                seeds: self.seeds,
                wall_seconds: self.start.elapsed().as_secs_f64(),
            },
        )?;
        Ok(())
    }
}

fn with_ext(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut prov = Provenance::new("gen-data", Some(&cfg), &[]);
    for stage in ["devices", "data-base", "data-pool", "data-target", "split-target"] {
        prov.seed(stage);
    }
    let data = experiment::generate_data(&cfg)?;
    let files = [
        ("base.json", &data.base),
        ("pool.json", &data.pool),
        ("target_adapt.json", &data.target_adapt),
        ("target_eval.json", &data.target_eval),
    ];
    let mut artifacts = Vec::new();
    for (name, ds) in files {
        let p = out.join(name);
        io::save_dataset(&p, ds)?;
        artifacts.push(p);
    }
    io::save_json(&out.join("config.json"), &cfg)?;
    prov.finish(out, artifacts)?;
    println!(
        "{}",
        json!({ "command": "gen-data", "out": out, "config_hash": cfg.hash() })
    );
    Ok(())
}

fn train_base(common: &Common, data: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut prov = Provenance::new("train-base", Some(&cfg), &[data]);
    for stage in ["split-base", "base-init", "base-head", "base-train"] {
        prov.seed(stage);
    }
    let ds = io::load_dataset(data)?;
    let ckpt = experiment::train_base_model(&cfg, &ds)?;
    io::save_checkpoint(out, &ckpt)?;
    prov.finish(&artifact_dir(out), vec![out.to_path_buf()])?;
    println!(
        "{}",
        json!({
            "command": "train-base",
            "out": out,
            "epochs": ckpt.history.len(),
            "val_auc": ckpt.history.last().map(|h| h.val_auc),
        })
    );
    Ok(())
}

fn train_lora(common: &Common, base: &Path, data: &Path, env: &str, out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let mut prov = Provenance::new("train-lora", Some(&cfg), &[base, data]);
    prov.seed(&format!("split-lora:{env}"));
    prov.seed(&format!("lora:{env}"));
    let ckpt = io::load_checkpoint(base)?;
    let ds = io::load_dataset(data)?;
    let outcome = experiment::pretrain_module(&cfg, &ckpt.model, &ds, env)?;
    io::save_lora(out, &outcome.module)?;
    prov.finish(&artifact_dir(out), vec![out.to_path_buf()])?;
    println!(
        "{}",
        json!({
            "command": "train-lora",
            "out": out,
            "environment_id": env,
            "epochs": outcome.history.len(),
            "val_auc": outcome.history.last().map(|h| h.val_auc),
            "trainable_parameters": outcome.trainable_parameters,
        })
    );
    Ok(())
}

fn load_pool(dir: &Path, base: &ExtractorModel) -> Result<LoraPool> {
    let pool = LoraPool::new(io::load_pool_dir(dir)?)?;
    pool.check_against(base)?;
    Ok(pool)
}

fn adapt(
    method: &'static str,
    common: &Common,
    base: &Path,
    data: &Path,
    pool_dir: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common)?;
    let mut inputs = vec![base, data];
    inputs.extend(pool_dir);
    let mut prov = Provenance::new(method_command(method), Some(&cfg), &inputs);
    let seed = prov.seed(&format!("adapt:{method}"));
    let ckpt = io::load_checkpoint(base)?;
    let adapt_data = io::load_dataset(data)?;
    let pool = pool_dir.map(|d| load_pool(d, &ckpt.model)).transpose()?;
    let registry = Registry::default();
    let ctx = AdaptContext {
        config: &cfg,
        base: &ckpt.model,
        pool: pool.as_ref(),
        adapt: &adapt_data,
        seed,
    };
    let adapted = registry.get(method)?.run(&ctx)?;
    let summary = match adapted.artifact {
        rla_core::adapt::AdaptArtifact::Aggregated(outcome) => {
            let pool = pool.as_ref().expect("aggregation ran with a pool");
            let report = RlaReport::new(pool, outcome, &ckpt.model, pool_dir.expect("pool"));
            io::save_json(out, &report)?;
            json!({
                "alpha": report.outcome.weights.0,
                "evaluations": report.outcome.evaluations,
                "best_fitness": report.outcome.best_fitness,
            })
        }
        rla_core::adapt::AdaptArtifact::FineTuned {
            head,
            history,
            trainable_parameters,
        } => {
            let epochs = history.len();
            io::save_checkpoint(
                out,
                &Checkpoint {
                    model: adapted.model,
                    head,
                    seed,
                    history,
                },
            )?;
            json!({ "epochs": epochs, "trainable_parameters": trainable_parameters })
        }
        rla_core::adapt::AdaptArtifact::Lora {
            module,
            history,
            trainable_parameters,
        } => {
            io::save_lora(out, &module)?;
            json!({ "epochs": history.len(), "trainable_parameters": trainable_parameters })
        }
        rla_core::adapt::AdaptArtifact::Unchanged => {
            return Err(Error::config("method", "nothing to write for the unadapted model"));
        }
    };
    prov.finish(&artifact_dir(out), vec![out.to_path_buf()])?;
    println!(
        "{}",
        json!({
            "command": method_command(method),
            "out": out,
            "wall_seconds": adapted.timing.wall_seconds,
            "counters": adapted.timing.counters,
            "result": summary,
        })
    );
    Ok(())
}

fn method_command(method: &str) -> &'static str {
    match method {
        "rla" => "adapt-rla",
        "ft" => "adapt-ft",
        "lora" => "adapt-lora",
        _ => "adapt",
    }
}

struct EvalArgs<'a> {
    common: &'a Common,
    base: &'a Path,
    adapter: Option<&'a Path>,
    rla: Option<&'a Path>,
    pool_dir: Option<&'a Path>,
    data: &'a Path,
    label: Option<&'a str>,
    out: &'a Path,
}

fn eval(a: EvalArgs<'_>) -> Result<()> {
    let cfg = load_config(a.common)?;
    let mut inputs = vec![a.base, a.data];
    inputs.extend(a.adapter);
    inputs.extend(a.rla);
    inputs.extend(a.pool_dir);
    let mut prov = Provenance::new("eval", Some(&cfg), &inputs);
    let seed = prov.seed("eval-pairs");
    let ckpt = io::load_checkpoint(a.base)?;
    let ds: LabeledDataset = io::load_dataset(a.data)?;
    let model = if let Some(p) = a.adapter {
        let module = io::load_lora(p)?;
        module.check_against(&ckpt.model)?;
        merge(&ckpt.model, &module.delta_set())?
    } else if let Some(p) = a.rla {
        let report: RlaReport = io::load_json(p)?;
        let pool = load_pool(a.pool_dir.expect("clap requires pool-dir"), &ckpt.model)?;
        report.check_pool(&pool, p)?;
        let alpha = AggregationWeights::new(report.outcome.weights.0.clone())?;
        merge(&ckpt.model, &aggregate(&pool, &alpha)?)?
    } else {
        ckpt.model.clone()
    };
    let report: EvalReport = evaluate(&model, &ds, cfg.evaluation.max_pairs, seed)?;
    let label = a.label.map(str::to_string).unwrap_or_else(|| {
        a.out
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let record = EvaluationRecord::new(label, a.base, a.adapter.or(a.rla), a.data, report);
    io::save_json(a.out, &record)?;
    let csv = with_ext(a.out, "csv");
    io::save_text(&csv, &record.report.roc_csv())?;
    prov.finish(&artifact_dir(a.out), vec![a.out.to_path_buf(), csv])?;
    println!(
        "{}",
        json!({ "command": "eval", "out": a.out, "eer": record.report.eer, "auc": record.report.auc })
    );
    Ok(())
}

fn report(run_dir: &Path, out: Option<&Path>) -> Result<()> {
    let summary = Summary::collect(run_dir)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("summary.json"));
    io::save_json(&out, &summary)?;
    let csv = with_ext(&out, "csv");
    io::save_text(&csv, &summary.csv())?;
    println!(
        "{}",
        json!({ "command": "report", "out": out, "rows": summary.rows.len() })
    );
    Ok(())
}

fn bench(common: &Common, methods: &[String], out: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    let prov = Provenance::new("bench", Some(&cfg), &[]);
    let names: Vec<&str> = methods.iter().map(String::as_str).collect();
    let report: BenchmarkReport = experiment::run_benchmark(&cfg, &names)?;
    io::save_json(out, &report)?;
    let mut summary = Summary::default();
    for r in &report.results {
        summary.rows.push(SummaryRow {
            label: r.method.clone(),
            eer: r.eer,
            auc: r.auc,
            pair_count: r.pair_count,
            file: out.to_path_buf(),
        });
    }
    io::save_text(&with_ext(out, "csv"), &summary.csv())?;
    prov.finish(&artifact_dir(out), vec![out.to_path_buf(), with_ext(out, "csv")])?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::InitConfig { out, benchmark } => {
            let cfg = if *benchmark {
                ExperimentConfig::benchmark(0)
            } else {
                ExperimentConfig::default()
            };
            io::save_json(out, &cfg)?;
            println!(
                "{}",
                json!({ "command": "init-config", "out": out, "config_hash": cfg.hash() })
            );
            Ok(())
        }
        Command::GenData { common, out } => gen_data(common, out),
        Command::TrainBase { common, data, out } => train_base(common, data, out),
        Command::TrainLora {
            common,
            base,
            data,
            env,
            out,
        } => train_lora(common, base, data, env, out),
        Command::AdaptRla {
            common,
            base,
            pool_dir,
            data,
            out,
        } => adapt("rla", common, base, data, Some(pool_dir), out),
        Command::AdaptFt {
            common,
            base,
            data,
            out,
        } => adapt("ft", common, base, data, None, out),
        Command::AdaptLora {
            common,
            base,
            data,
            out,
        } => adapt("lora", common, base, data, None, out),
        Command::Eval {
            common,
            base,
            adapter,
            rla,
            pool_dir,
            data,
            label,
            out,
        } => eval(EvalArgs {
            common,
            base,
            adapter: adapter.as_deref(),
            rla: rla.as_deref(),
            pool_dir: pool_dir.as_deref(),
            data,
            label: label.as_deref(),
            out,
        }),
        Command::Report { run_dir, out } => report(run_dir, out.as_deref()),
        Command::Bench { common, methods, out } => bench(common, methods, out),
    }
}

fn error_record(e: &Error) -> serde_json::Value {
    let mut record = json!({ "kind": e.kind(), "message": e.to_string() });
    match e {
        Error::Io { path, .. } | Error::Format { path, .. } => record["path"] = json!(path),
        Error::Config { field, .. } => record["field"] = json!(field),
        _ => {}
    }
    json!({ "error": record })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::FAILURE
        }
    }
}
