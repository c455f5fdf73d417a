//! MDET: the binary container for models, activation traces and datasets.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0       4 bytes   magic "MDET"
//! 4       u32       version (1)
//! 8       u64       header_len
//! 16      header    compact UTF-8 JSON, header_len bytes
//! 16+hl   payload   raw tensors, packed back to back in entry order
//! ```
//!
//! Entry offsets are relative to the payload start. Tensors are `f32` or
//! `i32` on disk and widened to `f64` / `i64` in memory. Entries must tile
//! the payload exactly: the first starts at 0, each next one starts where
//! the previous ended and the last one ends at the end of the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bn::{BatchStats, BnLayerState, MomentAccumulator};
use crate::error::{Error, Result};
use crate::net::{LayerSpec, ToyModel};
use crate::shift::SyntheticDataset;
use crate::tensor::Tensor4;

pub const MAGIC: [u8; 4] = *b"MDET";
pub const VERSION: u32 = 1;
/// Magic, version and header length.
pub const PREAMBLE_LEN: u64 = 16;

/// Creator tag written by this library.
pub const CREATOR: &str = concat!("mde-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum MdetError {
    #[error("bad magic at byte {offset}: {found:02x?}")]
    BadMagic { offset: u64, found: Vec<u8> },

    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { offset: u64, version: u32 },

    #[error("corrupt header at byte {offset}: {reason}")]
    CorruptHeader { offset: u64, reason: String },

    #[error("range violation at byte {offset}: {reason}")]
    RangeViolation { offset: u64, reason: String },

    #[error("non-finite value in entry {entry:?} at byte {offset}")]
    NonFinite { offset: u64, entry: String },

    #[error("record violates the format: {0}")]
    Invalid(String),
}

impl MdetError {
    /// Byte offset the error refers to, when it has one.
    pub fn offset(&self) -> Option<u64> {
        match self {
            MdetError::BadMagic { offset, .. }
            | MdetError::UnsupportedVersion { offset, .. }
            | MdetError::CorruptHeader { offset, .. }
            | MdetError::RangeViolation { offset, .. }
            | MdetError::NonFinite { offset, .. } => Some(*offset),
            MdetError::Invalid(_) => None,
        }
    }
}

fn corrupt(offset: u64, reason: impl Into<String>) -> Error {
    MdetError::CorruptHeader {
        offset,
        reason: reason.into(),
    }
    .into()
}

fn range(offset: u64, reason: impl Into<String>) -> Error {
    MdetError::RangeViolation {
        offset,
        reason: reason.into(),
    }
    .into()
}

fn invalid_record(reason: impl Into<String>) -> Error {
    MdetError::Invalid(reason.into()).into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Model,
    Trace,
    Dataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    Weight,
    Bias,
    Activation,
    Image,
    Label,
}

impl Role {
    pub const BN: [Role; 4] = [
        Role::BnGamma,
        Role::BnBeta,
        Role::BnRunningMean,
        Role::BnRunningVar,
    ];

    fn dtype(self) -> Dtype {
        match self {
            Role::Label => Dtype::I32,
            _ => Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
}

impl Dtype {
    pub const fn size(self) -> u64 {
        4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model_id: String,
    pub dataset_id: String,
    pub eps: f64,
    pub retain_alpha: f64,
    pub creator: String,
    pub seed: u64,
}

impl Default for Metadata {
    fn default() -> Self {
        Self {
            model_id: String::new(),
            dataset_id: String::new(),
            eps: crate::bn::DEFAULT_EPS,
            retain_alpha: crate::bn::DEFAULT_RETAIN_ALPHA,
            creator: CREATOR.to_string(),
            seed: 0,
        }
    }
}

/// Network description stored with model records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub class_count: usize,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Values {
    F32(Vec<f64>),
    I32(Vec<i64>),
}

impl Values {
    pub fn len(&self) -> usize {
        match self {
            Values::F32(v) => v.len(),
            Values::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            Values::F32(_) => Dtype::F32,
            Values::I32(_) => Dtype::I32,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            Values::F32(v) => Some(v),
            Values::I32(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdetEntry {
    pub name: String,
    pub role: Role,
    /// BN ordinal for `bn_*` and activation entries, network layer position
    /// for weights and biases, absent for dataset entries.
    pub layer_index: Option<usize>,
    pub shape: Vec<usize>,
    pub values: Values,
}

impl MdetEntry {
    pub fn f32(
        name: impl Into<String>,
        role: Role,
        layer_index: Option<usize>,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Self {
        Self {
            name: name.into(),
            role,
            layer_index,
            shape,
            values: Values::F32(values),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdetRecord {
    pub kind: RecordKind,
    pub metadata: Metadata,
    pub architecture: Option<Architecture>,
    pub entries: Vec<MdetEntry>,
}

/// On-disk description of one entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryHeader {
    pub name: String,
    pub role: Role,
    pub layer_index: Option<usize>,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: RecordKind,
    pub metadata: Metadata,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub architecture: Option<Architecture>,
    pub entries: Vec<EntryHeader>,
}

fn element_count(shape: &[usize]) -> Option<u64> {
    shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
}

/// Structural checks shared by the writer and the reader. Offsets are
/// checked separately by the reader.
fn check_header(h: &Header) -> std::result::Result<(), String> {
    let mut names = BTreeSet::new();
    for e in &h.entries {
        if !names.insert(e.name.as_str()) {
            return Err(format!("duplicate entry name {:?}", e.name));
        }
        if e.dtype != e.role.dtype() {
            return Err(format!(
                "entry {:?}: role {:?} requires {:?}",
                e.name,
                e.role,
                e.role.dtype()
            ));
        }
        let count = element_count(&e.shape)
            .ok_or_else(|| format!("entry {:?}: shape overflows", e.name))?;
        let expected = count.checked_mul(e.dtype.size());
        if expected != Some(e.byte_len) {
            return Err(format!(
                "entry {:?}: byte_len {} does not match shape {:?}",
                e.name, e.byte_len, e.shape
            ));
        }
        let needs_layer = !matches!(e.role, Role::Image | Role::Label);
        if needs_layer != e.layer_index.is_some() {
            return Err(format!(
                "entry {:?}: layer_index presence does not fit role",
                e.name
            ));
        }
        if matches!(e.role, Role::Activation) && e.shape.len() != 4 {
            return Err(format!("activation {:?} must be 4-d", e.name));
        }
    }
    if !(h.metadata.eps >= 0.0 && h.metadata.eps.is_finite()) {
        return Err("metadata eps must be finite and non-negative".into());
    }
    if !(0.0..=1.0).contains(&h.metadata.retain_alpha) {
        return Err("metadata retain_alpha must lie in [0, 1]".into());
    }
    if h.kind == RecordKind::Model {
        let mut bn: BTreeMap<usize, Vec<(Role, &[usize])>> = BTreeMap::new();
        for e in h.entries.iter().filter(|e| Role::BN.contains(&e.role)) {
            bn.entry(e.layer_index.unwrap_or(usize::MAX))
                .or_default()
                .push((e.role, &e.shape));
        }
        for (k, (layer, parts)) in bn.iter().enumerate() {
            if *layer != k {
                return Err(format!("bn layer indices must be 0..L, found {layer}"));
            }
            let mut roles: Vec<Role> = parts.iter().map(|p| p.0).collect();
            roles.sort();
            if roles != Role::BN {
                return Err(format!("bn layer {layer} needs exactly the four bn roles"));
            }
            let first = parts[0].1;
            if first.len() != 1 || parts.iter().any(|p| p.1 != first) {
                return Err(format!(
                    "bn layer {layer}: tensors must be 1-d with equal channel counts"
                ));
            }
        }
    }
    Ok(())
}

fn encode_header(record: &MdetRecord) -> Result<(Header, Vec<u8>)> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(record.entries.len());
    for e in &record.entries {
        let count = element_count(&e.shape)
            .ok_or_else(|| invalid_record(format!("entry {:?}: shape overflows", e.name)))?;
        if count != e.values.len() as u64 {
            return Err(invalid_record(format!(
                "entry {:?}: shape {:?} holds {count} values, found {}",
                e.name,
                e.shape,
                e.values.len()
            )));
        }
        let dtype = e.values.dtype();
        let byte_len = count * dtype.size();
        entries.push(EntryHeader {
            name: e.name.clone(),
            role: e.role,
            layer_index: e.layer_index,
            dtype,
            shape: e.shape.clone(),
            byte_offset: offset,
            byte_len,
        });
        offset += byte_len;
    }
    let header = Header {
        kind: record.kind,
        metadata: record.metadata.clone(),
        architecture: record.architecture.clone(),
        entries,
    };
    check_header(&header).map_err(invalid_record)?;
    let json = serde_json::to_vec(&header).map_err(|e| invalid_record(e.to_string()))?;
    Ok((header, json))
}

/// Serializes a record to any writer.
pub fn write_mdet_to<W: Write>(record: &MdetRecord, mut w: W) -> Result<()> {
    let (_, json) = encode_header(record)?;
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for e in &record.entries {
        match &e.values {
            Values::F32(v) => {
                for &x in v {
                    let f = x as f32;
                    if !f.is_finite() {
                        return Err(invalid_record(format!(
                            "entry {:?} holds {x}, not representable as f32",
                            e.name
                        )));
                    }
                    w.write_all(&f.to_le_bytes())?;
                }
            }
            Values::I32(v) => {
                for &x in v {
                    let i = i32::try_from(x).map_err(|_| {
                        invalid_record(format!("entry {:?} holds {x}, outside i32", e.name))
                    })?;
                    w.write_all(&i.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Encodes a record in memory.
pub fn to_bytes(record: &MdetRecord) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_mdet_to(record, &mut buf)?;
    Ok(buf)
}

/// Writes a record to `path`. The record is fully validated first, so a
/// failed write never leaves a partial file behind for invalid records.
pub fn write_mdet(record: &MdetRecord, path: impl AsRef<Path>) -> Result<()> {
    let bytes = to_bytes(record)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Entry-at-a-time reader over a validated header.
pub struct MdetReader<R> {
    inner: R,
    header: Header,
    payload_start: u64,
}

impl MdetReader<File> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(File::open(path)?)
    }
}

impl<R: Read + Seek> MdetReader<R> {
    /// Validates the preamble, header and entry ranges.
    pub fn new(mut inner: R) -> Result<Self> {
        let file_len = inner.seek(SeekFrom::End(0))?;
        inner.seek(SeekFrom::Start(0))?;
        let mut pre = [0u8; PREAMBLE_LEN as usize];
        let got = read_up_to(&mut inner, &mut pre)?;
        if got < 4 || pre[..4] != MAGIC {
            return Err(MdetError::BadMagic {
                offset: 0,
                found: pre[..got.min(4)].to_vec(),
            }
            .into());
        }
        if got < PREAMBLE_LEN as usize {
            return Err(range(got as u64, "file ends inside the preamble"));
        }
        let version = u32::from_le_bytes(pre[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(MdetError::UnsupportedVersion { offset: 4, version }.into());
        }
        let header_len = u64::from_le_bytes(pre[8..16].try_into().expect("8 bytes"));
        if header_len > file_len - PREAMBLE_LEN {
            return Err(range(
                8,
                format!(
                    "header_len {header_len} exceeds the {} bytes after the preamble",
                    file_len - PREAMBLE_LEN
                ),
            ));
        }
        let mut raw = vec![0u8; header_len as usize];
        inner.read_exact(&mut raw)?;
        let text = std::str::from_utf8(&raw)
            .map_err(|e| corrupt(PREAMBLE_LEN + e.valid_up_to() as u64, "header is not UTF-8"))?;
        let header: Header = serde_json::from_str(text).map_err(|e| {
            let at = if e.line() == 1 {
                e.column().saturating_sub(1) as u64
            } else {
                0
            };
            corrupt(PREAMBLE_LEN + at, e.to_string())
        })?;
        check_header(&header).map_err(|r| corrupt(PREAMBLE_LEN, r))?;

        let payload_start = PREAMBLE_LEN + header_len;
        let payload_len = file_len - payload_start;
        let mut cursor = 0u64;
        for e in &header.entries {
            if e.byte_offset != cursor {
                return Err(range(
                    payload_start + e.byte_offset.min(payload_len),
                    format!(
                        "entry {:?} starts at {}, expected {cursor}",
                        e.name, e.byte_offset
                    ),
                ));
            }
            let end = cursor
                .checked_add(e.byte_len)
                .filter(|&end| end <= payload_len);
            cursor = end.ok_or_else(|| {
                range(
                    payload_start + payload_len,
                    format!("entry {:?} runs past the end of the payload", e.name),
                )
            })?;
        }
        if cursor != payload_len {
            return Err(range(
                payload_start + cursor,
                format!("{} trailing payload bytes", payload_len - cursor),
            ));
        }
        Ok(Self {
            inner,
            header,
            payload_start,
        })
    }

    pub fn header(&self) -> &Header {
        &self.header
    }

    /// Reads and widens entry `i`.
    pub fn read_entry(&mut self, i: usize) -> Result<MdetEntry> {
        let e = self
            .header
            .entries
            .get(i)
            .ok_or(Error::IndexOutOfRange {
                index: i,
                len: self.header.entries.len(),
            })?
            .clone();
        let start = self.payload_start + e.byte_offset;
        self.inner.seek(SeekFrom::Start(start))?;
        let mut raw = vec![0u8; e.byte_len as usize];
        self.inner.read_exact(&mut raw)?;
        let values = match e.dtype {
            Dtype::F32 => {
                let mut out = Vec::with_capacity(raw.len() / 4);
                for (k, chunk) in raw.chunks_exact(4).enumerate() {
                    let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
                    if !v.is_finite() {
                        return Err(MdetError::NonFinite {
                            offset: start + 4 * k as u64,
                            entry: e.name.clone(),
                        }
                        .into());
                    }
                    out.push(f64::from(v));
                }
                Values::F32(out)
            }
            Dtype::I32 => Values::I32(
                raw.chunks_exact(4)
                    .map(|c| i64::from(i32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
            ),
        };
        Ok(MdetEntry {
            name: e.name,
            role: e.role,
            layer_index: e.layer_index,
            shape: e.shape,
            values,
        })
    }

    pub fn into_record(mut self) -> Result<MdetRecord> {
        let entries = (0..self.header.entries.len())
            .map(|i| self.read_entry(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(MdetRecord {
            kind: self.header.kind,
            metadata: self.header.metadata.clone(),
            architecture: self.header.architecture.clone(),
            entries,
        })
    }
}

fn read_up_to<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..])? {
            0 => break,
            n => got += n,
        }
    }
    Ok(got)
}

pub fn read_mdet(path: impl AsRef<Path>) -> Result<MdetRecord> {
    MdetReader::open(path)?.into_record()
}

pub fn from_bytes(bytes: &[u8]) -> Result<MdetRecord> {
    MdetReader::new(std::io::Cursor::new(bytes))?.into_record()
}

fn expect_kind(header: &Header, kind: RecordKind) -> Result<()> {
    if header.kind != kind {
        return Err(invalid_record(format!(
            "expected a {kind:?} record, found {:?}",
            header.kind
        )));
    }
    Ok(())
}

fn tensor_shape(e: &MdetEntry) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(e.shape.as_slice())
        .map_err(|_| invalid_record(format!("entry {:?} is not 4-d", e.name)))
}

fn activation_name(t: usize, l: usize) -> String {
    format!("act.b{t}.l{l}")
}

/// Layer count and batch count of a trace whose activation entries are
/// ordered batch-major with layer indices cycling `0..L`.
fn trace_layout(header: &Header) -> Result<(usize, usize)> {
    let layers: Vec<usize> = header
        .entries
        .iter()
        .filter(|e| e.role == Role::Activation)
        .map(|e| e.layer_index.unwrap_or(usize::MAX))
        .collect();
    if layers.is_empty() {
        return Err(Error::Empty("trace activations"));
    }
    let l_count = layers.iter().max().copied().unwrap_or(0) + 1;
    if !layers.len().is_multiple_of(l_count) || layers.iter().enumerate().any(|(i, &l)| l != i % l_count) {
        return Err(invalid_record(
            "activation entries must be batch-major with layer indices 0..L",
        ));
    }
    Ok((l_count, layers.len() / l_count))
}

/// Trace record from captured BN inputs, `batches[t][l]`.
pub fn trace_record(batches: &[Vec<Tensor4>], metadata: Metadata) -> Result<MdetRecord> {
    let mut entries = Vec::new();
    for (t, layers) in batches.iter().enumerate() {
        if layers.len() != batches[0].len() {
            return Err(invalid_record("every batch must carry the same layers"));
        }
        for (l, x) in layers.iter().enumerate() {
            entries.push(MdetEntry::f32(
                activation_name(t, l),
                Role::Activation,
                Some(l),
                x.shape().to_vec(),
                x.data().to_vec(),
            ));
        }
    }
    Ok(MdetRecord {
        kind: RecordKind::Trace,
        metadata,
        architecture: None,
        entries,
    })
}

/// `batches[t][l]` activations of a trace record.
pub fn trace_activations(record: &MdetRecord) -> Result<Vec<Vec<Tensor4>>> {
    if record.kind != RecordKind::Trace {
        return Err(invalid_record(format!(
            "expected a Trace record, found {:?}",
            record.kind
        )));
    }
    let acts: Vec<&MdetEntry> = record
        .entries
        .iter()
        .filter(|e| e.role == Role::Activation)
        .collect();
    if acts.is_empty() {
        return Err(Error::Empty("trace activations"));
    }
    let l_count = acts.iter().filter_map(|e| e.layer_index).max().unwrap_or(0) + 1;
    if !acts.len().is_multiple_of(l_count)
        || acts
            .iter()
            .enumerate()
            .any(|(i, e)| e.layer_index != Some(i % l_count))
    {
        return Err(invalid_record(
            "activation entries must be batch-major with layer indices 0..L",
        ));
    }
    acts.chunks(l_count)
        .map(|chunk| {
            chunk
                .iter()
                .map(|e| {
                    let v = e
                        .values
                        .as_f64()
                        .ok_or_else(|| invalid_record("activations must be f32"))?;
                    Tensor4::new(tensor_shape(e)?, v.to_vec())
                })
                .collect()
        })
        .collect()
}

/// Per-batch, per-layer statistics of a trace file, `stats[t][l]`, reading
/// one activation entry at a time.
pub fn stats_only_view<R: Read + Seek>(reader: &mut MdetReader<R>) -> Result<Vec<Vec<BatchStats>>> {
    expect_kind(reader.header(), RecordKind::Trace)?;
    let (l_count, t_count) = trace_layout(reader.header())?;
    let act_idx: Vec<usize> = (0..reader.header().entries.len())
        .filter(|&i| reader.header().entries[i].role == Role::Activation)
        .collect();
    let mut out = Vec::with_capacity(t_count);
    for batch in act_idx.chunks(l_count) {
        let mut layers = Vec::with_capacity(l_count);
        for &i in batch {
            let e = reader.read_entry(i)?;
            let [b, c, h, w] = tensor_shape(&e)?;
            let v = e
                .values
                .as_f64()
                .ok_or_else(|| invalid_record("activations must be f32"))?;
            let mut acc = MomentAccumulator::new(c);
            let plane = h * w;
            for n in 0..b {
                for k in 0..c {
                    let start = (n * c + k) * plane;
                    acc.push_plane(k, &v[start..start + plane]);
                }
            }
            layers.push(acc.finish()?);
        }
        out.push(layers);
    }
    Ok(out)
}

/// BN layer states stored in a model record, in BN order.
pub fn bn_states_from_record(record: &MdetRecord) -> Result<Vec<BnLayerState>> {
    if record.kind != RecordKind::Model {
        return Err(invalid_record(format!(
            "expected a Model record, found {:?}",
            record.kind
        )));
    }
    let mut parts: BTreeMap<usize, BTreeMap<Role, Vec<f64>>> = BTreeMap::new();
    for e in record.entries.iter().filter(|e| Role::BN.contains(&e.role)) {
        let v = e
            .values
            .as_f64()
            .ok_or_else(|| invalid_record("bn entries must be f32"))?;
        parts
            .entry(e.layer_index.unwrap_or(usize::MAX))
            .or_default()
            .insert(e.role, v.to_vec());
    }
    let m = &record.metadata;
    parts
        .into_values()
        .map(|mut p| {
            let mut take = |r: Role| {
                p.remove(&r)
                    .ok_or_else(|| invalid_record(format!("missing {r:?}")))
            };
            BnLayerState::new(
                take(Role::BnGamma)?,
                take(Role::BnBeta)?,
                take(Role::BnRunningMean)?,
                take(Role::BnRunningVar)?,
                m.retain_alpha,
                m.eps,
            )
        })
        .collect()
}

/// Model record holding architecture, weights and BN states. BN layers
/// must share `eps` and `retain_alpha`.
pub fn model_record(model: &ToyModel, model_id: &str) -> Result<MdetRecord> {
    use crate::drift::BnProbe;
    let states = model.bn_states();
    let first = states.first().ok_or(Error::NoBnLayers)?;
    if states
        .iter()
        .any(|s| s.eps != first.eps || s.retain_alpha != first.retain_alpha)
    {
        return Err(invalid_record(
            "bn layers with differing eps or retain factor",
        ));
    }
    let mut entries = Vec::new();
    for p in model.parameter_tensors() {
        let role = if p.name == "weight" {
            Role::Weight
        } else {
            Role::Bias
        };
        entries.push(MdetEntry::f32(
            format!("layer{}.{}", p.layer, p.name),
            role,
            Some(p.layer),
            p.shape,
            p.values,
        ));
    }
    for (k, s) in states.iter().enumerate() {
        let c = vec![s.channels()];
        for (role, suffix, v) in [
            (Role::BnGamma, "gamma", &s.gamma),
            (Role::BnBeta, "beta", &s.beta),
            (Role::BnRunningMean, "running_mean", &s.running_mean),
            (Role::BnRunningVar, "running_var", &s.running_var),
        ] {
            entries.push(MdetEntry::f32(
                format!("bn{k}.{suffix}"),
                role,
                Some(k),
                c.clone(),
                v.clone(),
            ));
        }
    }
    Ok(MdetRecord {
        kind: RecordKind::Model,
        metadata: Metadata {
            model_id: model_id.to_string(),
            eps: first.eps,
            retain_alpha: first.retain_alpha,
            seed: model.seed(),
            ..Metadata::default()
        },
        architecture: Some(Architecture {
            input_shape: model.input_shape(),
            class_count: model.class_count(),
            layers: model.specs().to_vec(),
        }),
        entries,
    })
}

/// Rebuilds a trainable model from a record that carries an architecture.
pub fn model_from_record(record: &MdetRecord) -> Result<ToyModel> {
    let arch = record
        .architecture
        .as_ref()
        .ok_or_else(|| invalid_record("model record has no architecture"))?;
    let mut model = ToyModel::new(
        arch.input_shape,
        arch.layers.clone(),
        arch.class_count,
        record.metadata.seed,
    )?;
    let states = bn_states_from_record(record)?;
    if states.is_empty() {
        return Err(Error::NoBnLayers);
    }
    for (k, s) in states.into_iter().enumerate() {
        model.set_bn_state(k, s)?;
    }
    let mut seen = 0;
    for e in record
        .entries
        .iter()
        .filter(|e| matches!(e.role, Role::Weight | Role::Bias))
    {
        let name = if e.role == Role::Weight {
            "weight"
        } else {
            "bias"
        };
        let v = e
            .values
            .as_f64()
            .ok_or_else(|| invalid_record("weights must be f32"))?;
        model.set_parameter(e.layer_index.unwrap_or(usize::MAX), name, v)?;
        seen += 1;
    }
    if seen != model.parameter_tensors().len() {
        return Err(invalid_record(format!(
            "record carries {seen} weight tensors, architecture needs {}",
            model.parameter_tensors().len()
        )));
    }
    Ok(model)
}

/// Dataset record; labels are optional.
pub fn dataset_record(
    images: &Tensor4,
    labels: Option<&[usize]>,
    metadata: Metadata,
) -> Result<MdetRecord> {
    let mut entries = vec![MdetEntry {
        name: "images".into(),
        role: Role::Image,
        layer_index: None,
        shape: images.shape().to_vec(),
        values: Values::F32(images.data().to_vec()),
    }];
    if let Some(l) = labels {
        if l.len() != images.batch() {
            return Err(invalid_record(format!(
                "{} labels for {} images",
                l.len(),
                images.batch()
            )));
        }
        entries.push(MdetEntry {
            name: "labels".into(),
            role: Role::Label,
            layer_index: None,
            shape: vec![l.len()],
            values: Values::I32(l.iter().map(|&v| v as i64).collect()),
        });
    }
    Ok(MdetRecord {
        kind: RecordKind::Dataset,
        metadata,
        architecture: None,
        entries,
    })
}

pub fn synthetic_dataset_record(
    data: &SyntheticDataset,
    dataset_id: &str,
    seed: u64,
) -> Result<MdetRecord> {
    dataset_record(
        &data.images,
        Some(&data.labels),
        Metadata {
            dataset_id: dataset_id.to_string(),
            seed,
            ..Metadata::default()
        },
    )
}

/// Images and, when present, labels of a dataset record.
pub fn dataset_from_record(record: &MdetRecord) -> Result<(Tensor4, Option<Vec<usize>>)> {
    if record.kind != RecordKind::Dataset {
        return Err(invalid_record(format!(
            "expected a Dataset record, found {:?}",
            record.kind
        )));
    }
    let img = record
        .entries
        .iter()
        .find(|e| e.role == Role::Image)
        .ok_or(Error::Empty("dataset images"))?;
    let v = img
        .values
        .as_f64()
        .ok_or_else(|| invalid_record("images must be f32"))?;
    let images = Tensor4::new(tensor_shape(img)?, v.to_vec())?;
    let labels = match record.entries.iter().find(|e| e.role == Role::Label) {
        None => None,
        Some(e) => {
            let Values::I32(v) = &e.values else {
                return Err(invalid_record("labels must be i32"));
            };
            if v.len() != images.batch() {
                return Err(invalid_record(format!(
                    "{} labels for {} images",
                    v.len(),
                    images.batch()
                )));
            }
            Some(
                v.iter()
                    .map(|&x| {
                        usize::try_from(x)
                            .map_err(|_| invalid_record(format!("negative label {x}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        }
    };
    Ok((images, labels))
}
