//! On-disk artifacts. Each artifact is a JSON manifest plus a little-endian
//! binary payload stored next to it (`<stem>.bin`). The manifest records the
//! payload's length and SHA-256 so truncation and corruption are detected on
//! load. Reports are plain JSON with an optional ROC CSV alongside.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::extractor::{Architecture, EpochMetrics, ExtractorModel, MetricHead};
use crate::lora::{LoraFactors, LoraModule};
use crate::ndmath::Tensor;
use crate::sigsim::{
    ChannelProfile, ComplexSignal, DatasetRole, DeviceImpairment, LabeledDataset, PreambleSpec, Sample,
};

pub const FORMAT_VERSION: u32 = 1;

pub const DATASET_FORMAT: &str = "rla-dataset";
pub const CHECKPOINT_FORMAT: &str = "rla-checkpoint";
pub const LORA_FORMAT: &str = "rla-lora";

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    payload: String,
    payload_bytes: u64,
    payload_sha256: String,
    content: T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Payload path paired with a manifest path.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_artifact<T: Serialize>(path: &Path, format: &str, content: &T, payload: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let bin = payload_path(path);
    if bin == path {
        return Err(format_err(path, "manifest must not use the .bin extension"));
    }
    let env = Envelope {
        format: format.to_string(),
        version: FORMAT_VERSION,
        payload: bin.file_name().expect("file path").to_string_lossy().into_owned(),
        payload_bytes: payload.len() as u64,
        payload_sha256: sha256_hex(payload),
        content,
    };
    let text = serde_json::to_string_pretty(&env).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(&bin, payload).map_err(io_err(&bin))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

fn read_artifact<T: DeserializeOwned>(path: &Path, format: &str) -> Result<(T, Vec<u8>)> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let head: serde_json::Value = serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))?;
    match head.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        Some(f) => return Err(format_err(path, format!("expected {format}, found {f}"))),
        None => return Err(format_err(path, "missing format tag")),
    }
    match head.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(format_err(
                path,
                format!("unsupported version {v} (expected {FORMAT_VERSION})"),
            ))
        }
        None => return Err(format_err(path, "missing version")),
    }
    let env: Envelope<T> = serde_json::from_value(head).map_err(|e| format_err(path, e.to_string()))?;
    let bin = path.with_file_name(&env.payload);
    let payload = fs::read(&bin).map_err(io_err(&bin))?;
    if payload.len() as u64 != env.payload_bytes {
        return Err(format_err(
            &bin,
            format!(
                "payload is {} bytes, manifest says {}",
                payload.len(),
                env.payload_bytes
            ),
        ));
    }
    if sha256_hex(&payload) != env.payload_sha256 {
        return Err(format_err(&bin, "payload checksum mismatch"));
    }
    Ok((env.content, payload))
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct F64Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> F64Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self { path, bytes, pos: 0 }
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let end = self.pos + 8 * n;
        if end > self.bytes.len() {
            return Err(format_err(self.path, "payload shorter than manifest shapes"));
        }
        let data = self.bytes[self.pos..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        self.pos = end;
        Tensor::new(shape.to_vec(), data).map_err(|e| format_err(self.path, e.to_string()))
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(self.path, "payload longer than manifest shapes"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub role: DatasetRole,
    pub signal_len: usize,
    pub device_count: usize,
    pub sample_count: usize,
    pub preamble: PreambleSpec,
    pub device_ids: Vec<usize>,
    pub devices: Vec<DeviceImpairment>,
    pub channels: Vec<ChannelProfile>,
    pub seed: u64,
    /// `(device, environment)` per sample, in payload order.
    pub labels: Vec<(usize, usize)>,
}

/// Payload: interleaved `I, Q` as `f32` per sample, samples in order.
pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    ds.validate()?;
    let mut payload = Vec::with_capacity(ds.len() * ds.signal_len * 8);
    for s in &ds.samples {
        for c in s.signal.samples() {
            payload.extend_from_slice(&(c.re as f32).to_le_bytes());
            payload.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
    }
    let manifest = DatasetManifest {
        role: ds.role,
        signal_len: ds.signal_len,
        device_count: ds.device_count(),
        sample_count: ds.len(),
        preamble: ds.preamble.clone(),
        device_ids: ds.device_ids.clone(),
        devices: ds.devices.clone(),
        channels: ds.channels.clone(),
        seed: ds.seed,
        labels: ds.samples.iter().map(|s| (s.device, s.environment)).collect(),
    };
    write_artifact(path, DATASET_FORMAT, &manifest, &payload)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let (m, payload): (DatasetManifest, _) = read_artifact(path, DATASET_FORMAT)?;
    let per_sample = m.signal_len * 8;
    if m.labels.len() != m.sample_count || payload.len() != m.sample_count * per_sample {
        return Err(format_err(path, "sample count disagrees with payload"));
    }
    let samples = m
        .labels
        .iter()
        .zip(payload.chunks_exact(per_sample.max(1)))
        .map(|(&(device, environment), chunk)| {
            let signal = chunk
                .chunks_exact(8)
                .map(|iq| {
                    let re = f32::from_le_bytes(iq[..4].try_into().expect("4 bytes"));
                    let im = f32::from_le_bytes(iq[4..].try_into().expect("4 bytes"));
                    Complex64::new(re as f64, im as f64)
                })
                .collect();
            Sample {
                signal: ComplexSignal(signal),
                device,
                environment,
            }
        })
        .collect();
    let ds = LabeledDataset {
        role: m.role,
        signal_len: m.signal_len,
        preamble: m.preamble,
        device_ids: m.device_ids,
        devices: m.devices,
        channels: m.channels,
        seed: m.seed,
        samples,
    };
    ds.validate().map_err(|e| format_err(path, e.to_string()))?;
    Ok(ds)
}

/// Trained extractor plus the head it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ExtractorModel,
    pub head: MetricHead,
    pub seed: u64,
    pub history: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub classes: usize,
    pub scale: f64,
    pub seed: u64,
    pub epochs: usize,
    pub final_val_auc: Option<f64>,
    pub history: Vec<EpochMetrics>,
    pub model_checksum: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Payload: every layer's weight then bias, then the head directions, as `f64`.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for layer in &ckpt.model.layers {
        for (suffix, t) in [("weight", &layer.weight), ("bias", &layer.bias)] {
            tensors.push(TensorEntry {
                name: format!("{}.{suffix}", layer.name),
                shape: t.shape().to_vec(),
            });
            push_f64s(&mut payload, t.data());
        }
    }
    tensors.push(TensorEntry {
        name: "head.directions".into(),
        shape: ckpt.head.directions.shape().to_vec(),
    });
    push_f64s(&mut payload, ckpt.head.directions.data());
    let manifest = CheckpointManifest {
        architecture: ckpt.model.arch.clone(),
        embed_dim: ckpt.model.embed_dim(),
        classes: ckpt.head.classes(),
        scale: ckpt.head.scale,
        seed: ckpt.seed,
        epochs: ckpt.history.len(),
        final_val_auc: ckpt.history.last().map(|h| h.val_auc),
        history: ckpt.history.clone(),
        model_checksum: ckpt.model.checksum(),
        tensors,
    };
    write_artifact(path, CHECKPOINT_FORMAT, &manifest, &payload)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (m, payload): (CheckpointManifest, _) = read_artifact(path, CHECKPOINT_FORMAT)?;
    let mut model = ExtractorModel::init(m.architecture.clone(), 0).map_err(|e| format_err(path, e.to_string()))?;
    let expected = 2 * model.layers.len() + 1;
    if m.tensors.len() != expected {
        return Err(format_err(
            path,
            format!("{} tensors listed, expected {expected}", m.tensors.len()),
        ));
    }
    let mut reader = F64Reader::new(path, &payload);
    let mut entries = m.tensors.iter();
    for layer in &mut model.layers {
        for (suffix, slot) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
            let e = entries.next().expect("counted");
            if e.name != format!("{}.{suffix}", layer.name) || e.shape != slot.shape() {
                return Err(format_err(path, format!("unexpected tensor {} {:?}", e.name, e.shape)));
            }
            *slot = reader.tensor(&e.shape)?;
        }
    }
    let e = entries.next().expect("counted");
    if e.shape != [m.classes, m.embed_dim] {
        return Err(format_err(path, format!("head shape {:?}", e.shape)));
    }
    let directions = reader.tensor(&e.shape)?;
    reader.finish()?;
    if model.checksum() != m.model_checksum {
        return Err(format_err(path, "model checksum mismatch"));
    }
    let head = MetricHead::new(directions, m.scale).map_err(|e| format_err(path, e.to_string()))?;
    Ok(Checkpoint {
        model,
        head,
        seed: m.seed,
        history: m.history,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraTargetEntry {
    pub name: String,
    pub a_shape: [usize; 2],
    pub b_shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraManifest {
    pub environment_id: String,
    pub rank: usize,
    pub targets: Vec<LoraTargetEntry>,
}

/// Payload: `A` then `B` per target, as `f64`.
pub fn save_lora(path: &Path, module: &LoraModule) -> Result<()> {
    let mut targets = Vec::with_capacity(module.targets.len());
    let mut payload = Vec::new();
    for (name, f) in &module.targets {
        let (a, b) = (f.a.shape(), f.b.shape());
        targets.push(LoraTargetEntry {
            name: name.clone(),
            a_shape: [a[0], a[1]],
            b_shape: [b[0], b[1]],
        });
        push_f64s(&mut payload, f.a.data());
        push_f64s(&mut payload, f.b.data());
    }
    let manifest = LoraManifest {
        environment_id: module.environment_id.clone(),
        rank: module.rank,
        targets,
    };
    write_artifact(path, LORA_FORMAT, &manifest, &payload)
}

pub fn load_lora(path: &Path) -> Result<LoraModule> {
    let (m, payload): (LoraManifest, _) = read_artifact(path, LORA_FORMAT)?;
    let mut reader = F64Reader::new(path, &payload);
    let mut targets = Vec::with_capacity(m.targets.len());
    for t in &m.targets {
        if t.a_shape[1] != m.rank || t.b_shape[0] != m.rank {
            return Err(format_err(
                path,
                format!("target {} does not have rank {}", t.name, m.rank),
            ));
        }
        let a = reader.tensor(&t.a_shape)?;
        let b = reader.tensor(&t.b_shape)?;
        targets.push((t.name.clone(), LoraFactors { a, b }));
    }
    reader.finish()?;
    Ok(LoraModule {
        environment_id: m.environment_id,
        rank: m.rank,
        targets,
    })
}

fn has_format(path: &Path, format: &str) -> bool {
    fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .is_some_and(|v| v.get("format").and_then(|f| f.as_str()) == Some(format))
}

/// Every LoRA manifest in `dir`, ordered by environment id. Other JSON files
/// (such as the run manifest) are ignored.
pub fn load_pool_dir(dir: &Path) -> Result<Vec<LoraModule>> {
    let mut modules = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") && has_format(&path, LORA_FORMAT) {
            modules.push(load_lora(&path)?);
        }
    }
    if modules.is_empty() {
        return Err(Error::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no LoRA files in pool directory"),
        });
    }
    modules.sort_by(|a, b| a.environment_id.cmp(&b.environment_id));
    if let Some(w) = modules.windows(2).find(|w| w[0].environment_id == w[1].environment_id) {
        return Err(format_err(
            dir,
            format!("duplicate environment {}", w[0].environment_id),
        ));
    }
    Ok(modules)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| format_err(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}
