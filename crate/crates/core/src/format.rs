//! Binary containers: `.dmoe` model files and `.cal` calibration files.
//!
//! `.dmoe` layout:
//!
//! ```text
//! [0..8)        b"DERNMOE1"
//! [8..16)       header length L, u64 little-endian
//! [16..16+L)    UTF-8 JSON header
//! [16+L..)      payload: row-major f32 LE tensors at 64-byte aligned offsets
//! ```
//!
//! Header offsets are relative to the start of the payload. The writer pads
//! the JSON with trailing spaces so the payload itself starts on a 64-byte
//! boundary. Unknown header keys are ignored on load.
//!
//! `.cal` layout: `b"DERNCAL1"`, u64 LE count `m`, u64 LE dim `d`, then
//! `m * d` f32 LE values.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationSet;
use crate::error::{DernError, Result};
use crate::linalg::Matrix;
use crate::model::{ExpertWeights, MoeLayer, MoeModel, RouterWeights};

pub const MODEL_MAGIC: &[u8; 8] = b"DERNMOE1";
pub const CALIB_MAGIC: &[u8; 8] = b"DERNCAL1";
const MODEL_MAGIC_STEM: &[u8; 7] = b"DERNMOE";
const CALIB_MAGIC_STEM: &[u8; 7] = b"DERNCAL";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
    dtype: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    top_k: Vec<usize>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn read_u64(bytes: &[u8], at: usize) -> Result<u64> {
    let slice = bytes
        .get(at..at + 8)
        .ok_or(DernError::MalformedHeader(format!(
            "file too short ({} bytes) for length field at {at}",
            bytes.len()
        )))?;
    Ok(u64::from_le_bytes(slice.try_into().expect("8-byte slice")))
}

fn check_magic(bytes: &[u8], magic: &[u8; 8], stem: &[u8; 7]) -> Result<()> {
    if bytes.len() < 8 {
        return Err(DernError::MalformedHeader(format!(
            "file too short ({} bytes) for magic",
            bytes.len()
        )));
    }
    if &bytes[..8] == magic {
        return Ok(());
    }
    if &bytes[..7] == stem {
        return Err(DernError::UnsupportedVersion(
            String::from_utf8_lossy(&bytes[..8]).into_owned(),
        ));
    }
    Err(DernError::MalformedHeader("bad magic".into()))
}

/// Serializes a model to the `.dmoe` byte layout.
pub fn encode_model(model: &MoeModel) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &Matrix)> = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        named.push((format!("layers.{li}.router"), &layer.router.gate));
        for (ei, e) in layer.experts.iter().enumerate() {
            named.push((format!("layers.{li}.experts.{ei}.gate"), &e.gate));
            named.push((format!("layers.{li}.experts.{ei}.up"), &e.up));
            named.push((format!("layers.{li}.experts.{ei}.down"), &e.down));
        }
    }
    let mut offset = 0usize;
    let mut tensors = Vec::with_capacity(named.len());
    let mut blobs = Vec::with_capacity(named.len());
    for (name, m) in named {
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            offset,
            dtype: "f32".into(),
        });
        offset = align_up(offset + 4 * m.data().len());
        blobs.push(m);
    }
    let header = Header {
        meta: model.meta.clone(),
        tensors,
        top_k: model.layers.iter().map(|l| l.top_k).collect(),
    };
    let mut json = serde_json::to_vec(&header)?;
    let padded = align_up(16 + json.len()) - 16;
    json.resize(padded, b' ');

    let mut out = Vec::with_capacity(16 + json.len() + offset);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let payload_start = out.len();
    for (entry, m) in header.tensors.iter().zip(blobs) {
        out.resize(payload_start + entry.offset, 0);
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(align_up(out.len()), 0);
    Ok(out)
}

enum Slot {
    Router,
    Gate,
    Up,
    Down,
}

fn parse_name(name: &str) -> Option<(usize, Option<usize>, Slot)> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["layers", l, "router"] => Some((l.parse().ok()?, None, Slot::Router)),
        ["layers", l, "experts", e, kind] => {
            let slot = match *kind {
                "gate" => Slot::Gate,
                "up" => Slot::Up,
                "down" => Slot::Down,
                _ => return None,
            };
            Some((l.parse().ok()?, Some(e.parse().ok()?), slot))
        }
        _ => None,
    }
}

#[derive(Default)]
struct ExpertSlots {
    gate: Option<Matrix>,
    up: Option<Matrix>,
    down: Option<Matrix>,
}

#[derive(Default)]
struct LayerSlots {
    router: Option<Matrix>,
    experts: BTreeMap<usize, ExpertSlots>,
}

/// Parses the `.dmoe` byte layout.
pub fn decode_model(bytes: &[u8]) -> Result<MoeModel> {
    check_magic(bytes, MODEL_MAGIC, MODEL_MAGIC_STEM)?;
    let header_len = usize::try_from(read_u64(bytes, 8)?)
        .map_err(|_| DernError::MalformedHeader("header length overflows".into()))?;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            DernError::MalformedHeader(format!(
                "header length {header_len} exceeds file size {}",
                bytes.len()
            ))
        })?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| DernError::MalformedHeader(e.to_string()))?;
    let payload = &bytes[header_end..];

    let mut layers: BTreeMap<usize, LayerSlots> = BTreeMap::new();
    for t in &header.tensors {
        if t.dtype != "f32" {
            return Err(DernError::UnsupportedVersion(format!(
                "tensor {} has dtype {}",
                t.name, t.dtype
            )));
        }
        let (li, ei, slot) = parse_name(&t.name)
            .ok_or_else(|| DernError::MalformedHeader(format!("bad tensor name {}", t.name)))?;
        let [r, c] = t.shape;
        let count = r
            .checked_mul(c)
            .ok_or_else(|| DernError::MalformedHeader(format!("{} shape overflows", t.name)))?;
        let end = t
            .offset
            .checked_add(4 * count)
            .ok_or_else(|| DernError::MalformedHeader(format!("{} offset overflows", t.name)))?;
        if end > payload.len() {
            return Err(DernError::Truncated {
                needed: end,
                available: payload.len(),
            });
        }
        let data: Vec<f32> = payload[t.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
            .collect();
        let m = Matrix::new(r, c, data)?;
        let layer = layers.entry(li).or_default();
        let dup = match (ei, slot) {
            (None, _) => layer.router.replace(m).is_some(),
            (Some(e), Slot::Gate) => layer
                .experts
                .entry(e)
                .or_default()
                .gate
                .replace(m)
                .is_some(),
            (Some(e), Slot::Up) => layer.experts.entry(e).or_default().up.replace(m).is_some(),
            (Some(e), Slot::Down) => layer
                .experts
                .entry(e)
                .or_default()
                .down
                .replace(m)
                .is_some(),
            (Some(_), Slot::Router) => unreachable!("router names carry no expert index"),
        };
        if dup {
            return Err(DernError::ShapeMismatch(format!(
                "duplicate tensor {}",
                t.name
            )));
        }
    }

    if layers.len() != header.top_k.len() || !layers.keys().copied().eq(0..header.top_k.len()) {
        return Err(DernError::ShapeMismatch(format!(
            "top_k lists {} layers but tensors describe layers {:?}",
            header.top_k.len(),
            layers.keys().collect::<Vec<_>>()
        )));
    }

    let mut out = Vec::with_capacity(layers.len());
    for ((li, slots), top_k) in layers.into_iter().zip(&header.top_k) {
        let router = slots
            .router
            .ok_or_else(|| DernError::ShapeMismatch(format!("layer {li} has no router")))?;
        if !slots.experts.keys().copied().eq(0..slots.experts.len()) {
            return Err(DernError::ShapeMismatch(format!(
                "layer {li} expert ids are not contiguous"
            )));
        }
        let mut experts = Vec::with_capacity(slots.experts.len());
        for (ei, e) in slots.experts {
            let missing = || DernError::ShapeMismatch(format!("layer {li} expert {ei} incomplete"));
            let gate = e.gate.ok_or_else(missing)?;
            let up = e.up.ok_or_else(missing)?;
            let down = e.down.ok_or_else(missing)?;
            experts.push(ExpertWeights::new(gate, up, down).map_err(|err| err.in_expert(li, ei))?);
        }
        let layer = MoeLayer::new(experts, RouterWeights::new(router), *top_k).map_err(|err| {
            match err {
                DernError::InvalidArgument(msg) => DernError::ShapeMismatch(msg),
                other => other,
            }
            .in_layer(li)
        })?;
        out.push(layer);
    }
    MoeModel::new(out, header.meta)
}

pub fn save_model(model: &MoeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_model(model)?).map_err(|e| DernError::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MoeModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DernError::io(path, e))?;
    decode_model(&bytes)
}

pub fn encode_calibration(set: &CalibrationSet) -> Vec<u8> {
    let m = set.tokens.len();
    let d = set.dim();
    let mut out = Vec::with_capacity(24 + 4 * m * d);
    out.extend_from_slice(CALIB_MAGIC);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for t in &set.tokens {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_calibration(bytes: &[u8], source: &str) -> Result<CalibrationSet> {
    check_magic(bytes, CALIB_MAGIC, CALIB_MAGIC_STEM)?;
    let m = read_u64(bytes, 8)? as usize;
    let d = read_u64(bytes, 16)? as usize;
    if m == 0 {
        return Err(DernError::EmptyCalibration);
    }
    if d == 0 {
        return Err(DernError::MalformedHeader("calibration dim is zero".into()));
    }
    let needed = m
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| DernError::MalformedHeader("calibration size overflows".into()))?;
    let payload = &bytes[24..];
    if payload.len() < needed {
        return Err(DernError::Truncated {
            needed,
            available: payload.len(),
        });
    }
    let values: Vec<f32> = payload[..needed]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();
    CalibrationSet::new(values.chunks(d).map(<[f32]>::to_vec).collect(), source)
}

pub fn save_calibration(set: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_calibration(set)).map_err(|e| DernError::io(path, e))
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DernError::io(path, e))?;
    decode_calibration(&bytes, &path.display().to_string())
}
