// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor files and trace directories.
//!
//! A trace directory holds one `manifest.json` plus an `RSDT` tensor per
//! residual checkpoint and, optionally, one `heads×S×S` attention tensor per
//! layer. The manifest is written last, so a directory with a manifest is
//! complete.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rlens_core::tensor::{DType, TensorRecord};
use rlens_core::{LayerStates, LayerTrace, Matrix, TokenSpans};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const TRACE_FORMAT: &str = "rlens-trace";
pub const TRACE_VERSION: u32 = 1;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_tensor(path: &Path, record: &TensorRecord) -> Result<()> {
    write_atomic(path, &record.encode())
}

pub fn read_tensor(path: &Path) -> Result<TensorRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorRecord::decode(&bytes).map_err(|source| Error::Tensor {
        path: path.to_owned(),
        source,
    })
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    read_tensor(path)?.to_matrix().map_err(|source| Error::Tensor {
        path: path.to_owned(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerFiles {
    pub layer: usize,
    pub x_in: String,
    pub x_attn: String,
    pub x_ffn: String,
    pub attn: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub layers: usize,
    pub tokens: usize,
    pub hidden: usize,
    pub heads: Option<usize>,
    pub dtype: DType,
    pub rope_enabled: bool,
    pub spans: TokenSpans,
    pub files: Vec<LayerFiles>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    /// Free-form generator settings echoed for provenance.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, Default)]
pub struct TraceWriteOptions {
    /// Storage precision; `f64` unless stated.
    pub dtype: Option<DType>,
    pub config: Option<serde_json::Value>,
}

fn encode(m: &Matrix, dtype: DType) -> Result<TensorRecord> {
    let r = match dtype {
        DType::F64 => TensorRecord::from_matrix(m),
        DType::F32 => TensorRecord::from_matrix_f32(m),
    };
    r.map_err(|e| Error::Data(format!("cannot encode matrix: {e}")))
}

fn encode_stack(stack: &[Matrix], dtype: DType) -> Result<TensorRecord> {
    let r = TensorRecord::from_stack(stack).map_err(|e| Error::Data(format!("cannot encode attention: {e}")))?;
    Ok(match dtype {
        DType::F64 => r,
        DType::F32 => {
            let narrowed = r.payload().to_f64().iter().map(|&v| v as f32).collect();
            TensorRecord::new(r.dims().to_vec(), rlens_core::tensor::Payload::F32(narrowed))
                .map_err(|e| Error::Data(e.to_string()))?
        }
    })
}

/// Writes every tensor and then the manifest into `dir`.
pub fn write_trace(dir: &Path, trace: &LayerTrace, opts: &TraceWriteOptions) -> Result<Manifest> {
    trace.validate()?;
    let (tokens, hidden) = trace.shape().expect("validated trace has layers");
    let dtype = opts.dtype.unwrap_or(DType::F64);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::with_capacity(trace.num_layers());
    let mut heads = None;
    for (l, states) in trace.layers.iter().enumerate() {
        let name = |part: &str| format!("layer{l:03}_{part}.rsdt");
        for (part, m) in [
            ("x_in", &states.x_in),
            ("x_attn", &states.x_attn),
            ("x_ffn", &states.x_ffn),
        ] {
            write_tensor(&dir.join(name(part)), &encode(m, dtype)?)?;
        }
        let attn = match &states.attn {
            Some(stack) => {
                heads = Some(stack.len());
                write_tensor(&dir.join(name("attn")), &encode_stack(stack, dtype)?)?;
                Some(name("attn"))
            }
            None => None,
        };
        files.push(LayerFiles {
            layer: l,
            x_in: name("x_in"),
            x_attn: name("x_attn"),
            x_ffn: name("x_ffn"),
            attn,
        });
    }
    let manifest = Manifest {
        format: TRACE_FORMAT.to_owned(),
        version: TRACE_VERSION,
        layers: trace.num_layers(),
        tokens,
        hidden,
        heads,
        dtype,
        rope_enabled: trace.rope_enabled,
        spans: trace.spans,
        files,
        meta: trace.meta.clone(),
        config: opts.config.clone(),
    };
    write_json(&dir.join(MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTrace {
    pub trace: LayerTrace,
    pub manifest: Manifest,
    pub dir: PathBuf,
}

fn manifest_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.to_owned(),
        message: message.into(),
    }
}

/// Loads and validates a trace directory: shapes, spans, attention rows and
/// residual continuity.
pub fn read_trace(dir: &Path) -> Result<StoredTrace> {
    let mpath = dir.join(MANIFEST_NAME);
    let manifest: Manifest = read_json(&mpath)?;
    if manifest.format != TRACE_FORMAT {
        return Err(manifest_error(
            &mpath,
            format!("format {:?} is not {TRACE_FORMAT:?}", manifest.format),
        ));
    }
    if manifest.version != TRACE_VERSION {
        return Err(manifest_error(
            &mpath,
            format!("unsupported version {}", manifest.version),
        ));
    }
    if manifest.layers == 0 {
        return Err(manifest_error(&mpath, "trace has no layers"));
    }
    for l in 0..manifest.layers {
        let found = manifest.files.iter().filter(|f| f.layer == l).count();
        match found {
            0 => return Err(manifest_error(&mpath, format!("layer {l} is missing"))),
            1 => {}
            n => return Err(manifest_error(&mpath, format!("layer {l} is listed {n} times"))),
        }
    }
    if let Some(extra) = manifest.files.iter().find(|f| f.layer >= manifest.layers) {
        return Err(manifest_error(
            &mpath,
            format!(
                "file entry for layer {} but the trace has {} layers",
                extra.layer, manifest.layers
            ),
        ));
    }
    let expected = (manifest.tokens, manifest.hidden);
    let load = |name: &str, l: usize, part: &str| -> Result<Matrix> {
        let path = dir.join(name);
        let m = read_matrix(&path)?;
        if m.shape() != expected {
            return Err(Error::Data(format!(
                "layer {l} {part} in {} is {:?}, manifest says {:?}",
                path.display(),
                m.shape(),
                expected
            )));
        }
        Ok(m)
    };

    let mut files = manifest.files.clone();
    files.sort_by_key(|f| f.layer);
    let mut layers = Vec::with_capacity(files.len());
    for f in &files {
        let attn = match &f.attn {
            Some(name) => {
                let path = dir.join(name);
                let stack = read_tensor(&path)?.to_stack().map_err(|source| Error::Tensor {
                    path: path.clone(),
                    source,
                })?;
                if let Some(h) = manifest.heads {
                    if stack.len() != h {
                        return Err(Error::Data(format!(
                            "layer {} attention has {} heads, manifest says {h}",
                            f.layer,
                            stack.len()
                        )));
                    }
                }
                Some(stack)
            }
            None => None,
        };
        layers.push(LayerStates {
            x_in: load(&f.x_in, f.layer, "x_in")?,
            x_attn: load(&f.x_attn, f.layer, "x_attn")?,
            x_ffn: load(&f.x_ffn, f.layer, "x_ffn")?,
            attn,
        });
    }
    let trace = LayerTrace {
        layers,
        spans: manifest.spans,
        rope_enabled: manifest.rope_enabled,
        meta: manifest.meta.clone(),
    };
    trace.validate()?;
    Ok(StoredTrace {
        trace,
        manifest,
        dir: dir.to_owned(),
    })
}
