//! Checkpoint container: a magic line, the header length, a TOML header
//! describing every tensor, then the raw little-endian f32 payload.
//!
//! ```text
//! MMDENSE-CKPT 1\n
//! <header bytes>\n
//! <header TOML>
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::RmspropState;
use super::PlateauState;
use crate::arch::{model::layout, ArchSpec, Model};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &str = "MMDENSE-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint format version {found} is not supported (expected {supported})")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("checkpoint fingerprint {found} does not match {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` needs payload bytes up to {needed}, only {available} present")]
    TruncatedPayload {
        name: String,
        needed: usize,
        available: usize,
    },
    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("tensor `{0}` is not part of the architecture")]
    UnknownTensor(String),
}

fn malformed(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Malformed(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    byte_order: String,
    fingerprint: String,
    instrument: String,
    step: u64,
    payload_bytes: usize,
    schedule: PlateauState,
    rmsprop: Option<RmspropHeader>,
    spec: ArchSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RmspropHeader {
    rho: f64,
    eps: f64,
    lr: f64,
}

const RUNNING_MEAN: &str = ".running_mean";
const RUNNING_VAR: &str = ".running_var";
const ACC_PREFIX: &str = "rmsprop/";

/// Everything needed to rebuild a model and resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ArchSpec,
    pub fingerprint: String,
    pub instrument: String,
    pub step: u64,
    pub params: IndexMap<String, Tensor<f32>>,
    /// Batch-norm name → `(running mean, running variance)`.
    pub running: IndexMap<String, (Tensor<f32>, Tensor<f32>)>,
    pub optimizer: Option<RmspropState<f32>>,
    pub schedule: PlateauState,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        instrument: &str,
        step: u64,
        optimizer: Option<&RmspropState<f32>>,
        schedule: PlateauState,
    ) -> Self {
        Checkpoint {
            spec: model.spec().clone(),
            fingerprint: model.fingerprint().to_string(),
            instrument: instrument.to_string(),
            step,
            params: model.params().clone(),
            running: model
                .running()
                .iter()
                .map(|(k, r)| (k.clone(), (r.mean.clone(), r.var.clone())))
                .collect(),
            optimizer: optimizer.cloned(),
            schedule,
        }
    }

    /// Builds the model described by the checkpoint and loads its tensors.
    pub fn to_model(&self) -> Result<Model<f32>> {
        let mut model = Model::build(&self.spec)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies parameters and running statistics into `model`, which must
    /// have been built from an identical architecture.
    pub fn load_into(&self, model: &mut Model<f32>) -> Result<()> {
        if model.fingerprint() != self.fingerprint {
            return Err(CheckpointError::FingerprintMismatch {
                expected: model.fingerprint().to_string(),
                found: self.fingerprint.clone(),
            }
            .into());
        }
        for (name, t) in &self.params {
            model.set_param(name, t.clone())?;
        }
        for (name, (m, v)) in &self.running {
            let r = model.running_mut(name)?;
            r.mean = m.clone();
            r.var = v.clone();
        }
        Ok(())
    }

    fn flat_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out: Vec<(String, &Tensor<f32>)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        for (k, (m, v)) in &self.running {
            out.push((format!("{k}{RUNNING_MEAN}"), m));
            out.push((format!("{k}{RUNNING_VAR}"), v));
        }
        if let Some(opt) = &self.optimizer {
            for (k, v) in &opt.acc {
                out.push((format!("{ACC_PREFIX}{k}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.flat_tensors();
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            let bytes = t.numel() * DType::F32.size();
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes,
            });
            offset += bytes;
        }
        let header = Header {
            version: FORMAT_VERSION,
            dtype: DType::F32.as_str().into(),
            byte_order: "little".into(),
            fingerprint: self.fingerprint.clone(),
            instrument: self.instrument.clone(),
            step: self.step,
            payload_bytes: offset,
            schedule: self.schedule.clone(),
            rmsprop: self.optimizer.as_ref().map(|o| RmspropHeader {
                rho: o.rho,
                eps: o.eps,
                lr: o.lr,
            }),
            spec: self.spec.clone(),
            tensors: entries,
        };
        let text = toml::to_string(&header).expect("header serializes");
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n{}\n{text}", text.len()).into_bytes();
        out.reserve(offset);
        for (_, t) in tensors {
            for v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (line1, rest) = split_line(bytes).ok_or_else(|| malformed("missing magic line"))?;
        let version = line1
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| malformed("bad magic"))?
            .parse::<u32>()
            .map_err(|_| malformed("bad version number"))?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        let (line2, rest) = split_line(rest).ok_or_else(|| malformed("missing header length"))?;
        let header_len: usize = line2.trim().parse().map_err(|_| malformed("bad header length"))?;
        if header_len > rest.len() {
            return Err(malformed("header extends past end of file").into());
        }
        let text = std::str::from_utf8(&rest[..header_len]).map_err(|_| malformed("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| malformed(e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: header.version,
                supported: FORMAT_VERSION,
            }
            .into());
        }
        if header.dtype != DType::F32.as_str() || header.byte_order != "little" {
            return Err(malformed(format!("unsupported payload {} {}", header.dtype, header.byte_order)).into());
        }
        let payload = &rest[header_len..];
        let computed = header.spec.fingerprint();
        if computed != header.fingerprint {
            return Err(CheckpointError::FingerprintMismatch {
                expected: computed,
                found: header.fingerprint,
            }
            .into());
        }
        header.spec.validate()?;

        let lay = layout(&header.spec);
        let expected: IndexMap<String, Vec<usize>> = lay
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .chain(lay.batch_norms.iter().flat_map(|(n, c)| {
                [(format!("{n}{RUNNING_MEAN}"), vec![*c]), (format!("{n}{RUNNING_VAR}"), vec![*c])]
            }))
            .collect();

        let mut params = IndexMap::new();
        let mut means = IndexMap::new();
        let mut vars = IndexMap::new();
        let mut acc = IndexMap::new();
        for e in &header.tensors {
            let base = e.name.strip_prefix(ACC_PREFIX).unwrap_or(&e.name);
            let want = expected
                .get(base)
                .filter(|_| base == e.name || lay.find(base).is_some())
                .ok_or_else(|| CheckpointError::UnknownTensor(e.name.clone()))?;
            if *want != e.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: e.name.clone(),
                    expected: want.clone(),
                    found: e.shape.clone(),
                }
                .into());
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset.saturating_add(e.bytes);
            if e.bytes != numel * DType::F32.size() {
                return Err(malformed(format!("tensor `{}` declares {} bytes for {numel} values", e.name, e.bytes)).into());
            }
            if end > payload.len() {
                return Err(CheckpointError::TruncatedPayload {
                    name: e.name.clone(),
                    needed: end,
                    available: payload.len(),
                }
                .into());
            }
            let data: Vec<f32> = payload[e.offset..end].chunks_exact(4).map(f32::read_le).collect();
            let t = Tensor::new(e.shape.clone(), data)?;
            if let Some(p) = e.name.strip_prefix(ACC_PREFIX) {
                acc.insert(p.to_string(), t);
            } else if let Some(n) = e.name.strip_suffix(RUNNING_MEAN) {
                means.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_suffix(RUNNING_VAR) {
                vars.insert(n.to_string(), t);
            } else {
                params.insert(e.name.clone(), t);
            }
        }
        if header.payload_bytes > payload.len() {
            return Err(CheckpointError::TruncatedPayload {
                name: "<payload>".into(),
                needed: header.payload_bytes,
                available: payload.len(),
            }
            .into());
        }
        for p in &lay.params {
            if !params.contains_key(&p.name) {
                return Err(CheckpointError::MissingTensor(p.name.clone()).into());
            }
        }
        let mut running = IndexMap::new();
        for (n, _) in &lay.batch_norms {
            let m = means
                .shift_remove(n)
                .ok_or_else(|| CheckpointError::MissingTensor(format!("{n}{RUNNING_MEAN}")))?;
            let v = vars
                .shift_remove(n)
                .ok_or_else(|| CheckpointError::MissingTensor(format!("{n}{RUNNING_VAR}")))?;
            running.insert(n.clone(), (m, v));
        }
        let optimizer = match header.rmsprop {
            Some(h) => {
                for p in &lay.params {
                    if !acc.contains_key(&p.name) {
                        return Err(CheckpointError::MissingTensor(format!("{ACC_PREFIX}{}", p.name)).into());
                    }
                }
                Some(RmspropState {
                    acc,
                    rho: h.rho,
                    eps: h.eps,
                    lr: h.lr,
                })
            }
            None => None,
        };
        Ok(Checkpoint {
            spec: header.spec,
            fingerprint: header.fingerprint,
            instrument: header.instrument,
            step: header.step,
            params,
            running,
            optimizer,
            schedule: header.schedule,
        })
    }
}

fn split_line(bytes: &[u8]) -> Option<(&str, &[u8])> {
    let i = bytes.iter().position(|&b| b == b'\n')?;
    Some((std::str::from_utf8(&bytes[..i]).ok()?, &bytes[i + 1..]))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ArchSpec {
        ArchSpec::mmdensenet_table1().scaled_widths(0.25)
    }

    fn sample() -> Checkpoint {
        let model = Model::<f32>::build(&tiny_spec().with_seed(3)).unwrap();
        let opt = RmspropState::new(&model, 1e-3);
        Checkpoint::from_model(&model, "tonal", 17, Some(&opt), PlateauState::new(1e-3))
    }

    fn unwrap_ckpt_err(r: Result<Checkpoint>) -> CheckpointError {
        match r {
            Err(Error::Checkpoint(e)) => e,
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
        let model = back.to_model().unwrap();
        assert_eq!(model.params(), &c.params);
    }

    #[test]
    fn version_fingerprint_shape_and_truncation_are_distinct() {
        let c = sample();
        let bytes = c.to_bytes();

        let mut v2 = bytes.clone();
        v2[MAGIC.len() + 1] = b'9';
        assert!(matches!(
            unwrap_ckpt_err(Checkpoint::from_bytes(&v2)),
            CheckpointError::VersionMismatch { found: 9, .. }
        ));

        let text = String::from_utf8_lossy(&bytes).into_owned();
        let fp = &c.fingerprint;
        let tampered = text.replacen(fp.as_str(), &"0".repeat(fp.len()), 1);
        assert!(matches!(
            unwrap_ckpt_err(Checkpoint::from_bytes(tampered.as_bytes())),
            CheckpointError::FingerprintMismatch { .. }
        ));

        let cut = &bytes[..bytes.len() - 10];
        assert!(matches!(
            unwrap_ckpt_err(Checkpoint::from_bytes(cut)),
            CheckpointError::TruncatedPayload { .. }
        ));

        let mut bad = c.clone();
        let name = bad.params.keys().next().unwrap().clone();
        bad.params.insert(name, Tensor::zeros(&[1, 1, 1, 1]));
        assert!(matches!(
            unwrap_ckpt_err(Checkpoint::from_bytes(&bad.to_bytes())),
            CheckpointError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn other_architecture_is_rejected() {
        let c = sample();
        let mut other = Model::<f32>::build(&ArchSpec::mdensenet_table1().scaled_widths(0.25)).unwrap();
        assert!(matches!(
            c.load_into(&mut other),
            Err(Error::Checkpoint(CheckpointError::FingerprintMismatch { .. }))
        ));
    }
}
