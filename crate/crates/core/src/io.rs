//! Dataset and checkpoint files, plus CSV/JSON report output.
//!
//! Both binary formats share one layout:
//!
//! ```text
//! magic      8 bytes
//! header_len u64 little-endian
//! header     JSON, header_len bytes
//! digest     SHA-256 of header ‖ payload, 32 bytes
//! payload    little-endian floats
//! ```
//!
//! All writes go to a temporary file in the target directory and are
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{OptimizerState, Real, Tensor};
use crate::channel::{ChannelSample, Dataset, ScenarioConfig};
use crate::gan::{DiscArch, Discriminator, GanError, GenArch, Generator, NetworkParams};
use crate::linalg::{from_interleaved, interleaved, ComplexMatrix};
use crate::trainer::{Precision, TrainConfig, TrainState};
use crate::wmmse::WmmseConfig;

pub const DATASET_MAGIC: &[u8; 8] = b"BMCDATA\0";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BMCCKPT\0";
pub const DATASET_SCHEMA: u32 = 1;
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IoError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupted file: {0}")]
    Corrupt(String),
    #[error("file uses {kind} schema v{found}; this build reads only v{supported} and will not migrate it")]
    Version { kind: &'static str, found: u32, supported: u32 },
    #[error("checkpoint holds {found:?} parameters but {requested:?} was requested")]
    Precision { found: Precision, requested: Precision },
    #[error(transparent)]
    Model(#[from] GanError),
    #[error("cannot encode {0}")]
    Encode(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> IoError {
    IoError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

fn encode_container(magic: &[u8; 8], header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut hasher = Sha256::new();
    hasher.update(header);
    hasher.update(payload);
    let digest = hasher.finalize();
    let mut out = Vec::with_capacity(8 + 8 + header.len() + 32 + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&digest);
    out.extend_from_slice(payload);
    out
}

/// Splits a container into `(header bytes, payload)` after checking magic and digest.
fn decode_container<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(&'a [u8], &'a [u8]), IoError> {
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(IoError::Corrupt("bad magic or truncated preamble".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end.checked_add(32).is_some_and(|e| e <= bytes.len()))
        .ok_or_else(|| IoError::Corrupt("header length exceeds file size".into()))?;
    let header = &bytes[16..header_end];
    let digest = &bytes[header_end..header_end + 32];
    let payload = &bytes[header_end + 32..];
    let mut hasher = Sha256::new();
    hasher.update(header);
    hasher.update(payload);
    if hasher.finalize().as_slice() != digest {
        return Err(IoError::Corrupt("content hash mismatch".into()));
    }
    Ok((header, payload))
}

/// Reads only the schema version, so newer files are refused with a
/// version error rather than a parse error.
fn check_version(header: &[u8], kind: &'static str, supported: u32) -> Result<(), IoError> {
    #[derive(Deserialize)]
    struct Probe {
        schema_version: u32,
    }
    let probe: Probe = serde_json::from_slice(header).map_err(|e| IoError::Corrupt(format!("header: {e}")))?;
    if probe.schema_version != supported {
        return Err(IoError::Version {
            kind,
            found: probe.schema_version,
            supported,
        });
    }
    Ok(())
}

fn parse_header<H: DeserializeOwned>(header: &[u8]) -> Result<H, IoError> {
    serde_json::from_slice(header).map_err(|e| IoError::Corrupt(format!("header: {e}")))
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub scenario: ScenarioConfig,
    pub count: usize,
    pub nt_high: usize,
    pub nt_low: usize,
    pub n_users: usize,
    /// f64 values per sample record (H_real, H_low, V_real, V_low).
    pub record_len: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
    pub sample_seeds: Vec<u64>,
    pub scenario_ids: Vec<u64>,
    /// Whether each record's beamformer blocks hold WMMSE labels.
    pub labeled: Vec<bool>,
}

fn record_len(nt_high: usize, nt_low: usize, n_users: usize) -> usize {
    4 * n_users * (nt_high + nt_low)
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, IoError> {
    let cfg = &ds.config;
    let (nh, nl, k) = (cfg.nt_high, cfg.nt_low, cfg.n_users);
    let rec = record_len(nh, nl, k);
    let mut payload = Vec::with_capacity(ds.len() * rec * 8);
    let zeros_high = ComplexMatrix::zeros(nh, k);
    let zeros_low = ComplexMatrix::zeros(nl, k);
    for (i, s) in ds.samples.iter().enumerate() {
        let blocks = [
            (&s.h_real, (nh, k)),
            (&s.h_low, (nl, k)),
            (s.v_real.as_ref().unwrap_or(&zeros_high), (nh, k)),
            (s.v_low.as_ref().unwrap_or(&zeros_low), (nl, k)),
        ];
        for (m, shape) in blocks {
            if m.shape() != shape {
                return Err(IoError::Encode(format!(
                    "sample {i}: matrix {:?} where {shape:?} was expected",
                    m.shape()
                )));
            }
            for v in interleaved(m) {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = DatasetHeader {
        schema_version: DATASET_SCHEMA,
        scenario: cfg.clone(),
        count: ds.len(),
        nt_high: nh,
        nt_low: nl,
        n_users: k,
        record_len: rec,
        train: ds.train.clone(),
        test: ds.test.clone(),
        seed: ds.seed,
        sample_seeds: ds.samples.iter().map(|s| s.seed).collect(),
        scenario_ids: ds.samples.iter().map(|s| s.scenario_id).collect(),
        labeled: ds.samples.iter().map(|s| s.v_real.is_some() && s.v_low.is_some()).collect(),
    };
    let header = serde_json::to_vec_pretty(&header).map_err(|e| IoError::Encode(e.to_string()))?;
    Ok(encode_container(DATASET_MAGIC, &header, &payload))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, IoError> {
    let (header, payload) = decode_container(DATASET_MAGIC, bytes)?;
    check_version(header, "dataset", DATASET_SCHEMA)?;
    let h: DatasetHeader = parse_header(header)?;
    let (nh, nl, k) = (h.nt_high, h.nt_low, h.n_users);
    if h.record_len != record_len(nh, nl, k)
        || (h.scenario.nt_high, h.scenario.nt_low, h.scenario.n_users) != (nh, nl, k)
    {
        return Err(IoError::Corrupt("record layout disagrees with header dimensions".into()));
    }
    if [h.sample_seeds.len(), h.scenario_ids.len(), h.labeled.len()] != [h.count; 3] {
        return Err(IoError::Corrupt("per-sample header arrays have the wrong length".into()));
    }
    if h.train.iter().chain(&h.test).any(|&i| i >= h.count) {
        return Err(IoError::Corrupt("split index out of range".into()));
    }
    let expected = h.count * h.record_len * 8;
    if payload.len() != expected {
        return Err(IoError::Corrupt(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut samples = Vec::with_capacity(h.count);
    for (i, rec) in values.chunks_exact(h.record_len).enumerate() {
        let (hr, rest) = rec.split_at(2 * nh * k);
        let (hl, rest) = rest.split_at(2 * nl * k);
        let (vr, vl) = rest.split_at(2 * nh * k);
        let labeled = h.labeled[i];
        samples.push(ChannelSample {
            h_real: from_interleaved(nh, k, hr),
            h_low: from_interleaved(nl, k, hl),
            v_real: labeled.then(|| from_interleaved(nh, k, vr)),
            v_low: labeled.then(|| from_interleaved(nl, k, vl)),
            scenario_id: h.scenario_ids[i],
            seed: h.sample_seeds[i],
        });
    }
    Ok(Dataset {
        config: h.scenario,
        samples,
        train: h.train,
        test: h.test,
        seed: h.seed,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<(), IoError> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, IoError> {
    decode_dataset(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

/// Position in the per-epoch random streams; together with the config
/// seed it fully determines the continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub schema_version: u32,
    pub precision: Precision,
    pub gen_arch: GenArch,
    pub disc_arch: DiscArch,
    pub gen_fingerprint: String,
    pub disc_fingerprint: String,
    pub train: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub rng: RngState,
    pub gen_optimizer: OptimizerHyper,
    pub disc_optimizer: OptimizerHyper,
    pub tensors: Vec<TensorEntry>,
}

/// Trained state plus the configuration it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub state: TrainState<T>,
    pub train: TrainConfig,
}

fn precision_of<T: Real>() -> Precision {
    if T::BYTES == 4 {
        Precision::F32
    } else {
        Precision::F64
    }
}

const GROUPS: [&str; 4] = ["generator", "critic", "generator_rmsprop", "critic_rmsprop"];

pub fn encode_checkpoint<T: Real>(state: &TrainState<T>, train: &TrainConfig) -> Result<Vec<u8>, IoError> {
    type Group<'a, T> = (&'a str, &'a [String], &'a [Tensor<T>]);
    let groups: [Group<T>; 4] = [
        (GROUPS[0], &state.gen.params.names, &state.gen.params.tensors),
        (GROUPS[1], &state.disc.params.names, &state.disc.params.tensors),
        (GROUPS[2], &state.gen.params.names, state.gen_opt.accumulators()),
        (GROUPS[3], &state.disc.params.names, state.disc_opt.accumulators()),
    ];
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (group, names, values) in groups {
        if names.len() != values.len() {
            return Err(IoError::Encode(format!("{group}: {} names for {} tensors", names.len(), values.len())));
        }
        for (name, t) in names.iter().zip(values) {
            tensors.push(TensorEntry {
                group: group.to_string(),
                name: name.clone(),
                shape: t.shape().to_vec(),
            });
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
    }
    let hyper = |o: &OptimizerState<T>| OptimizerHyper {
        lr: o.lr,
        rho: o.rho,
        eps: o.eps,
    };
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA,
        precision: precision_of::<T>(),
        gen_arch: state.gen.arch.clone(),
        disc_arch: state.disc.arch.clone(),
        gen_fingerprint: state.gen.params.fingerprint.clone(),
        disc_fingerprint: state.disc.params.fingerprint.clone(),
        train: train.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: RngState {
            seed: train.seed,
            next_epoch: state.epoch,
        },
        gen_optimizer: hyper(&state.gen_opt),
        disc_optimizer: hyper(&state.disc_opt),
        tensors,
    };
    let header = serde_json::to_vec_pretty(&header).map_err(|e| IoError::Encode(e.to_string()))?;
    Ok(encode_container(CHECKPOINT_MAGIC, &header, &payload))
}

/// Header of a checkpoint after magic, digest and version checks.
pub fn read_checkpoint_header(bytes: &[u8]) -> Result<CheckpointHeader, IoError> {
    let (header, _) = decode_container(CHECKPOINT_MAGIC, bytes)?;
    check_version(header, "checkpoint", CHECKPOINT_SCHEMA)?;
    parse_header(header)
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>, IoError> {
    let (header, payload) = decode_container(CHECKPOINT_MAGIC, bytes)?;
    check_version(header, "checkpoint", CHECKPOINT_SCHEMA)?;
    let h: CheckpointHeader = parse_header(header)?;
    if h.precision != precision_of::<T>() {
        return Err(IoError::Precision {
            found: h.precision,
            requested: precision_of::<T>(),
        });
    }
    let total: usize = h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * T::BYTES {
        return Err(IoError::Corrupt(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            total * T::BYTES
        )));
    }
    let mut groups: [(Vec<String>, Vec<Tensor<T>>); 4] = Default::default();
    let mut offset = 0;
    for entry in &h.tensors {
        let g = GROUPS
            .iter()
            .position(|&g| g == entry.group)
            .ok_or_else(|| IoError::Corrupt(format!("unknown tensor group {}", entry.group)))?;
        let n: usize = entry.shape.iter().product();
        let data: Vec<T> = payload[offset..offset + n * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect();
        offset += n * T::BYTES;
        let t = Tensor::new(entry.shape.clone(), data).map_err(|e| IoError::Corrupt(e.to_string()))?;
        groups[g].0.push(entry.name.clone());
        groups[g].1.push(t);
    }
    let [(gen_names, gen_tensors), (disc_names, disc_tensors), (_, gen_acc), (_, disc_acc)] = groups;
    let gen = Generator::from_parts(
        h.gen_arch.clone(),
        NetworkParams {
            names: gen_names,
            tensors: gen_tensors,
            fingerprint: h.gen_fingerprint.clone(),
        },
    )?;
    let disc = Discriminator::from_parts(
        h.disc_arch.clone(),
        NetworkParams {
            names: disc_names,
            tensors: disc_tensors,
            fingerprint: h.disc_fingerprint.clone(),
        },
    )?;
    let check_acc = |acc: &[Tensor<T>], params: &NetworkParams<T>, what: &str| {
        let ok = acc.len() == params.len() && acc.iter().zip(&params.tensors).all(|(a, p)| a.shape() == p.shape());
        if ok {
            Ok(())
        } else {
            Err(IoError::Corrupt(format!("{what} optimizer state does not match its parameters")))
        }
    };
    check_acc(&gen_acc, &gen.params, "generator")?;
    check_acc(&disc_acc, &disc.params, "critic")?;
    let o = h.gen_optimizer;
    let gen_opt = OptimizerState::from_accumulators(o.lr, o.rho, o.eps, gen_acc);
    let o = h.disc_optimizer;
    let disc_opt = OptimizerState::from_accumulators(o.lr, o.rho, o.eps, disc_acc);
    Ok(Checkpoint {
        state: TrainState {
            gen,
            disc,
            gen_opt,
            disc_opt,
            epoch: h.epoch,
            step: h.step,
        },
        train: h.train,
    })
}

pub fn save_checkpoint<T: Real>(path: &Path, state: &TrainState<T>, train: &TrainConfig) -> Result<(), IoError> {
    write_atomic(path, &encode_checkpoint(state, train)?)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>, IoError> {
    decode_checkpoint(&read_file(path)?)
}

pub fn checkpoint_precision(path: &Path) -> Result<Precision, IoError> {
    Ok(read_checkpoint_header(&read_file(path)?)?.precision)
}

/// Serializes `rows` as CSV with a header row.
pub fn csv_string<R: Serialize>(rows: &[R]) -> Result<String, IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| IoError::Encode(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::Encode(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| IoError::Encode(e.to_string()))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<(), IoError> {
    write_atomic(path, csv_string(rows)?.as_bytes())
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<(), IoError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| IoError::Encode(e.to_string()))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Row of `nmse_vs_iter.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmseRow {
    pub epoch: usize,
    pub step: u64,
    pub test_nmse_db: f64,
}

/// Row of `se_vs_nlow.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeRow {
    pub nt_low: usize,
    pub nt_high: usize,
    pub spacing_wavelengths: f64,
    pub se_wmmse: f64,
    pub se_generated: f64,
    pub se_zero_padding: f64,
    pub nmse_db: f64,
}

/// Flattened step record for `train_trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub epoch: usize,
    pub gen_updated: bool,
    pub disc_updated: bool,
    pub l1: Option<f64>,
    pub gp: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: f64,
    pub l2: f64,
}

pub fn trace_rows(trace: &crate::trainer::TrainTrace) -> Vec<TraceRow> {
    trace
        .steps
        .iter()
        .map(|s| TraceRow {
            step: s.step,
            epoch: s.epoch,
            gen_updated: s.gen_updated,
            disc_updated: s.disc_updated,
            l1: s.l1,
            gp: s.gp,
            d_real: s.d_real,
            d_fake: s.d_fake,
            l2: s.l2,
        })
        .collect()
}

/// One `nmse_vs_iter.csv` row per epoch, positioned at the epoch's last step.
pub fn nmse_rows(trace: &crate::trainer::TrainTrace) -> Vec<NmseRow> {
    trace
        .epochs
        .iter()
        .map(|e| NmseRow {
            epoch: e.epoch,
            step: trace
                .steps
                .iter()
                .filter(|s| s.epoch < e.epoch)
                .map(|s| s.step + 1)
                .max()
                .unwrap_or(0),
            test_nmse_db: e.test_nmse_db,
        })
        .collect()
}

/// JSON summary written next to `train_trace.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    /// Epoch reached, counting epochs from earlier resumed runs.
    pub epoch: usize,
    pub epochs_run: usize,
    pub steps: usize,
    pub generator_updates: usize,
    pub critic_updates: usize,
    pub all_finite: bool,
    /// Test NMSE after each epoch of this run.
    pub test_nmse_db: Vec<f64>,
    pub final_test_nmse_db: Option<f64>,
    pub seconds: f64,
}

pub fn train_summary(trace: &crate::trainer::TrainTrace, epoch: usize, seconds: f64) -> TrainSummary {
    TrainSummary {
        epoch,
        epochs_run: trace.epochs.len(),
        steps: trace.steps.len(),
        generator_updates: trace.steps.iter().filter(|s| s.gen_updated).count(),
        critic_updates: trace.steps.iter().filter(|s| s.disc_updated).count(),
        all_finite: trace.all_finite(),
        test_nmse_db: trace.epochs.iter().map(|e| e.test_nmse_db).collect(),
        final_test_nmse_db: trace.final_nmse(),
        seconds,
    }
}

/// Run configuration file: scenario, model, training and solver settings.
///
/// Missing sections take their defaults. The generator and critic sizes
/// always follow the scenario's antenna and user counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scenario: ScenarioConfig,
    pub samples: usize,
    /// `train:test` ratio.
    pub split: [u32; 2],
    pub train: TrainConfig,
    /// Layer widths; `None` uses the full-size defaults.
    pub model: Option<crate::gan::GanConfig>,
    /// Divides every layer width, for reduced-cost runs.
    pub width_divisor: usize,
    /// Solver settings; `None` derives power and noise from `train.power`
    /// and the scenario SNR.
    pub wmmse: Option<WmmseConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: ScenarioConfig::default(),
            samples: 250,
            split: [4, 1],
            train: TrainConfig::default(),
            model: None,
            width_divisor: 1,
            wmmse: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, IoError> {
        serde_json::from_str(text).map_err(|e| IoError::Corrupt(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_json(&text)
    }

    pub fn gan_config(&self) -> crate::gan::GanConfig {
        let s = &self.scenario;
        crate::gan::GanConfig {
            n_low: s.nt_low,
            n_high: s.nt_high,
            n_users: s.n_users,
            ..self.model.clone().unwrap_or_default()
        }
        .narrowed(self.width_divisor)
    }

    pub fn wmmse_config(&self) -> WmmseConfig {
        self.wmmse.clone().unwrap_or_else(|| WmmseConfig {
            power: self.train.power,
            noise_var: self.scenario.noise_variance(self.train.power),
            ..WmmseConfig::default()
        })
    }
}
