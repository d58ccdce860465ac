//! Checkpoint container: a magic line, a one-line JSON manifest with the
//! tensor table, then the little-endian `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use pointssm_core::data::SyntheticConfig;
use pointssm_core::model::{init_model, ModelConfig, Stage};
use pointssm_core::numerics::{ParamStore, Tensor};
use pointssm_core::training::{
    AdamW, ModelCheckpoint, OptimizerState, TrainConfig, CHECKPOINT_VERSION,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

const MAGIC: &str = "POINTSSM-CHECKPOINT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    hyper: AdamW,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    stage: Stage,
    model: ModelConfig,
    train: Option<TrainConfig>,
    data: Option<SyntheticConfig>,
    seeds: Vec<u64>,
    metrics: BTreeMap<String, f64>,
    optimizer: Option<OptimizerHeader>,
    payload_bytes: usize,
    tensors: Vec<Entry>,
}

/// Rounds every value through `f32`, as a save/load cycle would.
pub fn round_to_f32(params: &mut ParamStore) {
    for (_, t) in params.iter_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = f64::from(*v as f32));
    }
}

fn push(
    payload: &mut Vec<u8>,
    table: &mut Vec<Entry>,
    name: &str,
    group: Group,
    shape: Vec<usize>,
    data: &[f64],
) {
    let offset = payload.len();
    for &v in data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    table.push(Entry {
        name: name.to_string(),
        group,
        shape,
        offset,
        bytes: payload.len() - offset,
    });
}

/// Serializes a checkpoint. Equal checkpoints give equal bytes.
pub fn encode(ck: &ModelCheckpoint) -> CliResult<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ck.params.iter() {
        push(
            &mut payload,
            &mut tensors,
            name,
            Group::Param,
            t.shape().to_vec(),
            t.data(),
        );
    }
    if let Some(opt) = &ck.optimizer {
        for (group, moments) in [(Group::AdamM, &opt.m), (Group::AdamV, &opt.v)] {
            for (name, m) in moments {
                push(&mut payload, &mut tensors, name, group, vec![m.len()], m);
            }
        }
    }
    let manifest = Manifest {
        version: ck.version,
        stage: ck.stage,
        model: ck.model.clone(),
        train: ck.train.clone(),
        data: ck.data,
        seeds: ck.seeds.clone(),
        metrics: ck.metrics.clone(),
        optimizer: ck.optimizer.as_ref().map(|o| OptimizerHeader {
            hyper: o.hyper,
            step: o.step,
        }),
        payload_bytes: payload.len(),
        tensors,
    };
    let json = serde_json::to_string(&manifest)
        .map_err(|e| CliError::data(format!("checkpoint manifest: {e}")))?;
    let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\n{json}\n").into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

fn split_line(bytes: &[u8]) -> CliResult<(&str, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CliError::data("checkpoint: missing header line"))?;
    let line = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| CliError::data("checkpoint: header is not UTF-8"))?;
    Ok((line, &bytes[nl + 1..]))
}

/// Parses a checkpoint and checks its tensor table against the payload.
pub fn decode(bytes: &[u8]) -> CliResult<ModelCheckpoint> {
    let (magic, rest) = split_line(bytes)?;
    let version = magic
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| CliError::data("checkpoint: not a pointssm checkpoint"))?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::data(format!(
            "checkpoint: format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let (json, payload) = split_line(rest)?;
    let m: Manifest = serde_json::from_str(json)
        .map_err(|e| CliError::data(format!("checkpoint manifest: {e}")))?;
    if m.version != version {
        return Err(CliError::data(format!(
            "checkpoint: manifest version {} disagrees with header {version}",
            m.version
        )));
    }
    if payload.len() < m.payload_bytes {
        return Err(CliError::data(format!(
            "checkpoint: payload truncated ({} of {} bytes)",
            payload.len(),
            m.payload_bytes
        )));
    }
    if payload.len() > m.payload_bytes {
        return Err(CliError::data(format!(
            "checkpoint: {} trailing payload bytes",
            payload.len() - m.payload_bytes
        )));
    }
    let mut params = ParamStore::new();
    let (mut mm, mut vv) = (BTreeMap::new(), BTreeMap::new());
    let mut expect = 0;
    for e in &m.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expect || e.bytes != 4 * n || e.offset + e.bytes > payload.len() {
            return Err(CliError::data(format!(
                "checkpoint: tensor `{}` with shape {:?} does not match its payload slice ({} bytes at {})",
                e.name, e.shape, e.bytes, e.offset
            )));
        }
        expect += e.bytes;
        let data: Vec<f64> = payload[e.offset..e.offset + e.bytes]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        let dup = match e.group {
            Group::Param => params
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
                .is_err(),
            Group::AdamM => mm.insert(e.name.clone(), data).is_some(),
            Group::AdamV => vv.insert(e.name.clone(), data).is_some(),
        };
        if dup {
            return Err(CliError::data(format!(
                "checkpoint: duplicate tensor `{}`",
                e.name
            )));
        }
    }
    if expect != m.payload_bytes {
        return Err(CliError::data(format!(
            "checkpoint: table covers {expect} of {} payload bytes",
            m.payload_bytes
        )));
    }
    let optimizer = m.optimizer.map(|h| OptimizerState {
        hyper: h.hyper,
        step: h.step,
        m: mm,
        v: vv,
    });
    Ok(ModelCheckpoint {
        version,
        stage: m.stage,
        model: m.model,
        train: m.train,
        data: m.data,
        params,
        optimizer,
        seeds: m.seeds,
        metrics: m.metrics,
    })
}

/// Checks the tensor set against the one the config and stage imply.
/// Missing tensors and shape mismatches are always errors; unexpected
/// tensors only when `strict`.
pub fn check_tensors(ck: &ModelCheckpoint, strict: bool) -> CliResult<Vec<String>> {
    ck.model
        .validate()
        .map_err(|e| CliError::data(format!("checkpoint config: {}", e.join("; "))))?;
    let expected = init_model(&ck.model, ck.stage, &mut ChaCha8Rng::seed_from_u64(0))?;
    for (name, t) in expected.iter() {
        let got = ck
            .params
            .get(name)
            .map_err(|_| CliError::data(format!("checkpoint: missing tensor `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(CliError::data(format!(
                "checkpoint: tensor `{name}` has shape {:?}, config implies {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    let unknown: Vec<String> = ck
        .params
        .names()
        .filter(|n| !expected.contains(n))
        .map(str::to_string)
        .collect();
    if strict && !unknown.is_empty() {
        return Err(CliError::data(format!(
            "checkpoint: unknown tensors {}",
            unknown.join(", ")
        )));
    }
    Ok(unknown)
}

pub fn save_checkpoint(path: &Path, ck: &ModelCheckpoint) -> CliResult<()> {
    let bytes = encode(ck)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Reads and strictly validates a checkpoint.
pub fn load_checkpoint(path: &Path) -> CliResult<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let ck = decode(&bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    check_tensors(&ck, true)?;
    Ok(ck)
}
