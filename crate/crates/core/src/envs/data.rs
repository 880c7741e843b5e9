//! Offline transition datasets and their `SAQD` file format.
//!
//! ```text
//! magic "SAQD" | u16 version | u32 metadata length | metadata (UTF-8 JSON)
//! | u64 record count | records | u32 CRC32 of everything before it
//! ```
//!
//! A record is a fixed run of little-endian f64 values:
//! `state, action, [code], reward, next_state, terminal (0 or 1)`.
//! The code slot is present only for discrete datasets.

use std::path::Path;

use rand::Rng;
use saq_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::container::{check_magic, verify_crc, Cursor, FORMAT_VERSION};
use crate::error::{Result, SaqError};

pub const DATASET_MAGIC: &[u8; 4] = b"SAQD";

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub env: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub meta: DatasetMeta,
    transitions: Vec<Transition>,
}

/// Transition whose action has been replaced by a codebook index. The
/// original continuous action is kept for auditing.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTransition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub code: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTransitionDataset {
    pub meta: DatasetMeta,
    pub codebook_size: usize,
    transitions: Vec<DiscreteTransition>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    #[serde(flatten)]
    meta: DatasetMeta,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    codebook_size: Option<usize>,
}

/// Mini-batch of continuous transitions laid out as matrices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub states: Tensor,
    pub actions: Tensor,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub terminals: Vec<bool>,
}

/// Mini-batch of discrete transitions.
#[derive(Clone, Debug)]
pub struct DiscreteBatch {
    pub states: Tensor,
    pub codes: Vec<usize>,
    pub rewards: Vec<f64>,
    pub next_states: Tensor,
    pub terminals: Vec<bool>,
}

impl DiscreteBatch {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

fn rows_tensor<'a>(rows: impl Iterator<Item = &'a [f64]>, width: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        data.extend_from_slice(r);
        n += 1;
    }
    Tensor::matrix(n, width, data).expect("dataset rows are finite and homogeneous")
}

fn check_dims(meta: &DatasetMeta, state: &[f64], action: &[f64], next: &[f64]) -> Result<()> {
    if state.len() != meta.state_dim {
        return Err(SaqError::Dimension {
            what: "state",
            expected: meta.state_dim,
            got: state.len(),
        });
    }
    if next.len() != meta.state_dim {
        return Err(SaqError::Dimension {
            what: "next_state",
            expected: meta.state_dim,
            got: next.len(),
        });
    }
    if action.len() != meta.action_dim {
        return Err(SaqError::Dimension {
            what: "action",
            expected: meta.action_dim,
            got: action.len(),
        });
    }
    Ok(())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(SaqError::InvalidConfig("non-finite value in transition".into()))
    }
}

impl TransitionDataset {
    pub fn new(meta: DatasetMeta) -> Self {
        Self {
            meta,
            transitions: Vec::new(),
        }
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        check_dims(&self.meta, &t.state, &t.action, &t.next_state)?;
        check_finite(&t.state)?;
        check_finite(&t.action)?;
        check_finite(&t.next_state)?;
        check_finite(&[t.reward])?;
        self.transitions.push(t);
        Ok(())
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn states(&self) -> Tensor {
        rows_tensor(self.transitions.iter().map(|t| t.state.as_slice()), self.meta.state_dim)
    }

    pub fn actions(&self) -> Tensor {
        rows_tensor(self.transitions.iter().map(|t| t.action.as_slice()), self.meta.action_dim)
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let pick = |i: &usize| &self.transitions[*i];
        Batch {
            states: rows_tensor(indices.iter().map(|i| pick(i).state.as_slice()), self.meta.state_dim),
            actions: rows_tensor(indices.iter().map(|i| pick(i).action.as_slice()), self.meta.action_dim),
            rewards: indices.iter().map(|i| pick(i).reward).collect(),
            next_states: rows_tensor(indices.iter().map(|i| pick(i).next_state.as_slice()), self.meta.state_dim),
            terminals: indices.iter().map(|i| pick(i).terminal).collect(),
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader {
            meta: self.meta.clone(),
            kind: "continuous".into(),
            codebook_size: None,
        };
        encode(&header, self.transitions.len(), |buf| {
            for t in &self.transitions {
                put_record(buf, &t.state, &t.action, None, t.reward, &t.next_state, t.terminal);
            }
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut cur, count) = decode_header(bytes)?;
        if header.kind != "continuous" {
            return Err(SaqError::format(6, format!("expected a continuous dataset, found {}", header.kind)));
        }
        let mut ds = Self::new(header.meta);
        for _ in 0..count {
            let r = read_record(&mut cur, &ds.meta, false)?;
            ds.transitions.push(Transition {
                state: r.state,
                action: r.action,
                reward: r.reward,
                next_state: r.next_state,
                terminal: r.terminal,
            });
        }
        finish(&cur, bytes)?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// A dataset file of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyDataset {
    Continuous(TransitionDataset),
    Discrete(DiscreteTransitionDataset),
}

impl AnyDataset {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, _, _) = decode_header(bytes)?;
        if header.kind == "discrete" {
            Ok(AnyDataset::Discrete(DiscreteTransitionDataset::from_bytes(bytes)?))
        } else {
            Ok(AnyDataset::Continuous(TransitionDataset::from_bytes(bytes)?))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn meta(&self) -> &DatasetMeta {
        match self {
            AnyDataset::Continuous(d) => &d.meta,
            AnyDataset::Discrete(d) => &d.meta,
        }
    }
}

impl DiscreteTransitionDataset {
    pub fn new(meta: DatasetMeta, codebook_size: usize) -> Self {
        Self {
            meta,
            codebook_size,
            transitions: Vec::new(),
        }
    }

    pub fn push(&mut self, t: DiscreteTransition) -> Result<()> {
        check_dims(&self.meta, &t.state, &t.action, &t.next_state)?;
        if t.code >= self.codebook_size {
            return Err(SaqError::CodeOutOfRange {
                code: t.code,
                k: self.codebook_size,
            });
        }
        self.transitions.push(t);
        Ok(())
    }

    pub fn transitions(&self) -> &[DiscreteTransition] {
        &self.transitions
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn codes(&self) -> Vec<usize> {
        self.transitions.iter().map(|t| t.code).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> DiscreteBatch {
        let pick = |i: &usize| &self.transitions[*i];
        DiscreteBatch {
            states: rows_tensor(indices.iter().map(|i| pick(i).state.as_slice()), self.meta.state_dim),
            codes: indices.iter().map(|i| pick(i).code).collect(),
            rewards: indices.iter().map(|i| pick(i).reward).collect(),
            next_states: rows_tensor(indices.iter().map(|i| pick(i).next_state.as_slice()), self.meta.state_dim),
            terminals: indices.iter().map(|i| pick(i).terminal).collect(),
        }
    }

    pub fn full_batch(&self) -> DiscreteBatch {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.batch(&idx)
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> DiscreteBatch {
        let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }

    /// Continuous view with the original actions.
    pub fn to_continuous(&self) -> TransitionDataset {
        TransitionDataset {
            meta: self.meta.clone(),
            transitions: self
                .transitions
                .iter()
                .map(|t| Transition {
                    state: t.state.clone(),
                    action: t.action.clone(),
                    reward: t.reward,
                    next_state: t.next_state.clone(),
                    terminal: t.terminal,
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = FileHeader {
            meta: self.meta.clone(),
            kind: "discrete".into(),
            codebook_size: Some(self.codebook_size),
        };
        encode(&header, self.transitions.len(), |buf| {
            for t in &self.transitions {
                put_record(buf, &t.state, &t.action, Some(t.code), t.reward, &t.next_state, t.terminal);
            }
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut cur, count) = decode_header(bytes)?;
        let k = match (header.kind.as_str(), header.codebook_size) {
            ("discrete", Some(k)) if k > 0 => k,
            _ => return Err(SaqError::format(6, "expected a discrete dataset with a codebook size")),
        };
        let mut ds = Self::new(header.meta, k);
        for _ in 0..count {
            let at = cur.pos;
            let r = read_record(&mut cur, &ds.meta, true)?;
            let code = r.code.unwrap();
            if code >= k {
                return Err(SaqError::format(at, format!("code {code} out of range for K={k}")));
            }
            ds.transitions.push(DiscreteTransition {
                state: r.state,
                action: r.action,
                code,
                reward: r.reward,
                next_state: r.next_state,
                terminal: r.terminal,
            });
        }
        finish(&cur, bytes)?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn encode(header: &FileHeader, count: usize, records: impl FnOnce(&mut Vec<u8>)) -> Vec<u8> {
    let json = serde_json::to_vec(header).expect("metadata serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    records(&mut buf);
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn put_record(buf: &mut Vec<u8>, state: &[f64], action: &[f64], code: Option<usize>, reward: f64, next: &[f64], terminal: bool) {
    let mut put = |v: f64| buf.extend_from_slice(&v.to_le_bytes());
    state.iter().for_each(|&v| put(v));
    action.iter().for_each(|&v| put(v));
    if let Some(c) = code {
        put(c as f64);
    }
    put(reward);
    next.iter().for_each(|&v| put(v));
    put(if terminal { 1.0 } else { 0.0 });
}

struct Record {
    state: Vec<f64>,
    action: Vec<f64>,
    code: Option<usize>,
    reward: f64,
    next_state: Vec<f64>,
    terminal: bool,
}

fn decode_header(bytes: &[u8]) -> Result<(FileHeader, Cursor<'_>, u64)> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, DATASET_MAGIC)?;
    let payload = verify_crc(bytes)?;
    let mut cur = Cursor::new(payload);
    cur.pos = 6;
    let len = cur.u32()? as usize;
    let at = cur.pos;
    let header: FileHeader = serde_json::from_slice(cur.take(len)?)
        .map_err(|e| SaqError::format(at, format!("metadata: {e}")))?;
    let count_at = cur.pos;
    let count = cur.u64()?;
    let width = 2 * header.meta.state_dim
        + header.meta.action_dim
        + 2
        + usize::from(header.kind == "discrete");
    let remaining = payload.len() - cur.pos;
    if (count as usize).checked_mul(width * 8) != Some(remaining) {
        return Err(SaqError::format(
            count_at,
            format!("record count {count} does not match {remaining} payload bytes"),
        ));
    }
    Ok((header, cur, count))
}

fn read_record(cur: &mut Cursor<'_>, meta: &DatasetMeta, discrete: bool) -> Result<Record> {
    let at = cur.pos;
    let mut vec = |n: usize| (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>();
    let state = vec(meta.state_dim)?;
    let action = vec(meta.action_dim)?;
    let code = if discrete {
        let c = cur.f64()?;
        if c < 0.0 || c.fract() != 0.0 {
            return Err(SaqError::format(at, format!("invalid code value {c}")));
        }
        Some(c as usize)
    } else {
        None
    };
    let reward = cur.f64()?;
    let next_state = (0..meta.state_dim).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
    let terminal = match cur.f64()? {
        t if t == 0.0 => false,
        t if t == 1.0 => true,
        t => return Err(SaqError::format(at, format!("invalid terminal flag {t}"))),
    };
    Ok(Record {
        state,
        action,
        code,
        reward,
        next_state,
        terminal,
    })
}

fn finish(cur: &Cursor<'_>, bytes: &[u8]) -> Result<()> {
    if cur.pos != bytes.len() - 4 {
        return Err(SaqError::format(cur.pos, "trailing bytes before checksum"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            env: "test".into(),
            state_dim: 2,
            action_dim: 1,
            seed: 3,
        }
    }

    fn sample() -> TransitionDataset {
        let mut ds = TransitionDataset::new(meta());
        for i in 0..5 {
            let x = i as f64 * 0.1;
            ds.push(Transition {
                state: vec![x, -x],
                action: vec![x / 3.0],
                reward: if i == 4 { 1.0 } else { 0.0 },
                next_state: vec![x + 0.1, -x],
                terminal: i == 4,
            })
            .unwrap();
        }
        ds
    }

    #[test]
    fn save_load_round_trip() {
        let ds = sample();
        let back = TransitionDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn empty_dataset_keeps_metadata() {
        let ds = TransitionDataset::new(meta());
        let back = TransitionDataset::from_bytes(&ds.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.meta, meta());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [1, 8, 40, bytes.len() - 5] {
            let err = TransitionDataset::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, SaqError::Format { .. }), "{err}");
        }
    }

    #[test]
    fn corrupt_header_names_offset() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        let err = TransitionDataset::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("offset 0"));
        let mut bytes = sample().to_bytes();
        bytes[15] ^= 1;
        let err = TransitionDataset::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("CRC"));
    }

    #[test]
    fn rejects_dimension_mismatch() {
        let mut ds = TransitionDataset::new(meta());
        let err = ds
            .push(Transition {
                state: vec![0.0],
                action: vec![0.0],
                reward: 0.0,
                next_state: vec![0.0, 0.0],
                terminal: false,
            })
            .unwrap_err();
        assert!(matches!(err, SaqError::Dimension { what: "state", .. }));
    }

    #[test]
    fn discrete_round_trip_and_range_check() {
        let mut ds = DiscreteTransitionDataset::new(meta(), 4);
        for (i, t) in sample().transitions().iter().enumerate() {
            ds.push(DiscreteTransition {
                state: t.state.clone(),
                action: t.action.clone(),
                code: i % 4,
                reward: t.reward,
                next_state: t.next_state.clone(),
                terminal: t.terminal,
            })
            .unwrap();
        }
        assert_eq!(DiscreteTransitionDataset::from_bytes(&ds.to_bytes()).unwrap(), ds);
        let bad = DiscreteTransition {
            code: 4,
            ..ds.transitions()[0].clone()
        };
        assert!(matches!(ds.push(bad), Err(SaqError::CodeOutOfRange { code: 4, k: 4 })));
        assert!(TransitionDataset::from_bytes(&ds.to_bytes()).is_err());
    }
}
