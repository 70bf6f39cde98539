// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor archives: a text header followed by raw little-endian payloads.
//!
//! ```text
//! kedit-archive 1
//! kind checkpoint
//! meta {"config":{...},"version":"0.1.0"}
//! tensor tok_emb f32 256 64 0
//! tensor pos_emb f32 16 64 65536
//! end
//! <payload bytes>
//! ```
//!
//! Each `tensor` line gives name, dtype (`f32` or `f64`), rows, cols and the
//! byte offset of the row-major data from the start of the payload. The payload
//! length must equal the sum of the tensor sizes exactly. Names may not contain
//! whitespace; `meta` is a single line of JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use kedit_core::model::{ModelConfig, ModelParams};
use kedit_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::LabError;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "kedit-archive";

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Matrix<f32>),
    F64(Matrix<f64>),
}

impl Tensor {
    fn dtype(&self) -> &'static str {
        match self {
            Tensor::F32(_) => "f32",
            Tensor::F64(_) => "f64",
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::F32(m) => m.shape(),
            Tensor::F64(m) => m.shape(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Tensor::F32(m) => m.data().len() * 4,
            Tensor::F64(m) => m.data().len() * 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn f32(&self, name: &str) -> Result<&Matrix<f32>, LabError> {
        match self.get(name) {
            Some(Tensor::F32(m)) => Ok(m),
            Some(_) => Err(LabError::Format(format!("tensor {name} is not f32"))),
            None => Err(LabError::Format(format!("missing tensor {name}"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<&Matrix<f64>, LabError> {
        match self.get(name) {
            Some(Tensor::F64(m)) => Ok(m),
            Some(_) => Err(LabError::Format(format!("tensor {name} is not f64"))),
            None => Err(LabError::Format(format!("missing tensor {name}"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC} {FORMAT_VERSION}\nkind {}\nmeta {}\n", self.kind, self.meta);
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let (r, c) = t.shape();
            header.push_str(&format!("tensor {name} {} {r} {c} {offset}\n", t.dtype()));
            offset += t.byte_len();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset);
        for (_, t) in &self.tensors {
            match t {
                Tensor::F32(m) => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Tensor::F64(m) => m.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LabError> {
        let bad = |msg: &str| LabError::Format(msg.to_string());
        let mut pos = 0;
        let mut next_line = || -> Result<&str, LabError> {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += nl + 1;
            std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not UTF-8"))
        };

        let first = next_line()?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| bad("not a kedit archive"))?;
        if version != FORMAT_VERSION.to_string() {
            return Err(LabError::Version {
                found: version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let kind = next_line()?
            .strip_prefix("kind ")
            .ok_or_else(|| bad("missing kind line"))?
            .to_string();
        let meta_line = next_line()?
            .strip_prefix("meta ")
            .ok_or_else(|| bad("missing meta line"))?;
        let meta: serde_json::Value =
            serde_json::from_str(meta_line).map_err(|e| LabError::Format(format!("meta: {e}")))?;

        struct Entry {
            name: String,
            dtype: String,
            rows: usize,
            cols: usize,
            offset: usize,
        }
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 6 || fields[0] != "tensor" {
                return Err(LabError::Format(format!("bad tensor line: {line}")));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| LabError::Format(format!("bad number in tensor line: {line}")))
            };
            entries.push(Entry {
                name: fields[1].to_string(),
                dtype: fields[2].to_string(),
                rows: num(fields[3])?,
                cols: num(fields[4])?,
                offset: num(fields[5])?,
            });
        }
        let payload = &bytes[pos..];
        let mut expected_offset = 0usize;
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            let width = match e.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(LabError::Format(format!("tensor {}: unknown dtype {other}", e.name))),
            };
            if e.offset != expected_offset {
                return Err(LabError::Format(format!("tensor {}: offset out of sequence", e.name)));
            }
            let len = e
                .rows
                .checked_mul(e.cols)
                .and_then(|n| n.checked_mul(width))
                .ok_or_else(|| LabError::Format(format!("tensor {}: size overflow", e.name)))?;
            let end = e.offset + len;
            if end > payload.len() {
                return Err(LabError::Truncated {
                    tensor: e.name,
                    needed: end,
                    available: payload.len(),
                });
            }
            let raw = &payload[e.offset..end];
            let tensor = if width == 4 {
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::F32(Matrix::from_vec(e.rows, e.cols, data).expect("length checked"))
            } else {
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::F64(Matrix::from_vec(e.rows, e.cols, data).expect("length checked"))
            };
            expected_offset = end;
            tensors.push((e.name, tensor));
        }
        if expected_offset != payload.len() {
            return Err(LabError::Format(format!(
                "payload has {} trailing bytes",
                payload.len() - expected_offset
            )));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), LabError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LabError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LabError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: ModelConfig,
    version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
}

/// `config_hash` names the experiment configuration that produced `params`.
pub fn checkpoint_archive(params: &ModelParams, config_hash: Option<&str>) -> Archive {
    let meta = CheckpointMeta {
        config: params.config.clone(),
        version: crate::VERSION.to_string(),
        config_hash: config_hash.map(str::to_string),
    };
    let mut a = Archive::new("checkpoint", serde_json::to_value(meta).expect("config serializes"));
    for (name, m) in params.named_tensors() {
        a.push(name, Tensor::F32(m.clone()));
    }
    a
}

pub fn params_from_archive(a: &Archive) -> Result<ModelParams, LabError> {
    if a.kind != "checkpoint" {
        return Err(LabError::Format(format!("expected a checkpoint, found {}", a.kind)));
    }
    let meta: CheckpointMeta =
        serde_json::from_value(a.meta.clone()).map_err(|e| LabError::Format(format!("checkpoint meta: {e}")))?;
    meta.config.validate()?;
    let expected = ModelParams::expected_shapes(&meta.config);
    if expected.len() != a.tensors.len() {
        return Err(LabError::Format(format!(
            "checkpoint has {} tensors, config needs {}",
            a.tensors.len(),
            expected.len()
        )));
    }
    for ((name, shape), (got_name, t)) in expected.iter().zip(&a.tensors) {
        if name != got_name {
            return Err(LabError::Format(format!("expected tensor {name}, found {got_name}")));
        }
        if *shape != t.shape() {
            return Err(LabError::ShapeMismatch {
                tensor: name.clone(),
                expected: *shape,
                found: t.shape(),
            });
        }
    }
    let mut params = ModelParams::zeros(&meta.config);
    for (dst, (name, t)) in params.tensors_mut().into_iter().zip(&a.tensors) {
        match t {
            Tensor::F32(m) => *dst = m.clone(),
            Tensor::F64(_) => return Err(LabError::Format(format!("tensor {name} is not f32"))),
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path, config_hash: Option<&str>) -> Result<(), LabError> {
    checkpoint_archive(params, config_hash).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, LabError> {
    params_from_archive(&Archive::load(path)?)
}
