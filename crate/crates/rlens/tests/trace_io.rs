// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use rlens::io::{
    read_json, read_tensor, read_trace, write_json, write_tensor, write_trace, Manifest, TraceWriteOptions,
    MANIFEST_NAME,
};
use rlens::Error;
use rlens_core::tensor::{DType, TensorRecord};
use rlens_core::toy::{init_model, structured_input, ModelConfig};
use rlens_core::{LayerTrace, TokenSpans};

fn toy_trace(seed: u64) -> LayerTrace {
    let cfg = ModelConfig {
        layers: 3,
        hidden: 16,
        heads: 2,
        head_dim: 8,
        ffn_dim: 32,
        seed,
        init_std: 0.2,
        ..ModelConfig::default()
    };
    let x = structured_input(10, 16, 3, 0.5, seed + 1).unwrap();
    init_model(&cfg)
        .unwrap()
        .forward_trace(&x, TokenSpans::from_lengths(2, 6, 2), None)
        .unwrap()
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut Manifest)) {
    let path = dir.join(MANIFEST_NAME);
    let mut m: Manifest = read_json(&path).unwrap();
    f(&mut m);
    write_json(&path, &m).unwrap();
}

#[test]
fn f64_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(1);
    write_trace(dir.path(), &trace, &TraceWriteOptions::default()).unwrap();
    let back = read_trace(dir.path()).unwrap();
    assert_eq!(back.trace, trace);
    assert_eq!(back.manifest.heads, Some(2));
    assert_eq!(back.manifest.dtype, DType::F64);
}

#[test]
fn f32_roundtrip_is_close() {
    let dir = tempfile::tempdir().unwrap();
    let trace = toy_trace(2);
    let opts = TraceWriteOptions {
        dtype: Some(DType::F32),
        config: Some(serde_json::json!({"note": "f32"})),
    };
    write_trace(dir.path(), &trace, &opts).unwrap();
    let back = read_trace(dir.path()).unwrap();
    assert_eq!(back.manifest.config.unwrap()["note"], "f32");
    for (a, b) in back.trace.layers.iter().zip(&trace.layers) {
        assert!(a.x_ffn.max_abs_diff(&b.x_ffn) < 1e-5);
    }
}

#[test]
fn rewriting_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let trace = toy_trace(3);
    write_trace(a.path(), &trace, &TraceWriteOptions::default()).unwrap();
    write_trace(
        b.path(),
        &read_trace(a.path()).unwrap().trace,
        &TraceWriteOptions::default(),
    )
    .unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    for n in names {
        assert_eq!(
            fs::read(a.path().join(&n)).unwrap(),
            fs::read(b.path().join(&n)).unwrap(),
            "{n:?}"
        );
    }
}

#[test]
fn missing_layer_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(4), &TraceWriteOptions::default()).unwrap();
    edit_manifest(dir.path(), |m| {
        m.files.retain(|f| f.layer != 1);
    });
    let err = read_trace(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Manifest { .. }));
    assert!(err.to_string().contains("layer 1 is missing"), "{err}");
}

#[test]
fn missing_tensor_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(4), &TraceWriteOptions::default()).unwrap();
    fs::remove_file(dir.path().join("layer002_x_ffn.rsdt")).unwrap();
    assert!(matches!(read_trace(dir.path()), Err(Error::Io { .. })));
}

#[test]
fn shape_mismatch_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(5), &TraceWriteOptions::default()).unwrap();
    edit_manifest(dir.path(), |m| m.hidden = 15);
    assert!(matches!(read_trace(dir.path()), Err(Error::Data(_))));
}

#[test]
fn bad_spans_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(6), &TraceWriteOptions::default()).unwrap();
    edit_manifest(dir.path(), |m| m.spans = TokenSpans::from_lengths(2, 6, 3));
    assert!(matches!(
        read_trace(dir.path()),
        Err(Error::Core(rlens_core::Error::Spans(_)))
    ));
}

#[test]
fn broken_continuity_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let mut trace = toy_trace(7);
    write_trace(dir.path(), &trace, &TraceWriteOptions::default()).unwrap();
    trace.layers[2].x_in[(0, 0)] += 10.0;
    write_tensor(
        &dir.path().join("layer002_x_in.rsdt"),
        &TensorRecord::from_matrix(&trace.layers[2].x_in).unwrap(),
    )
    .unwrap();
    let err = read_trace(dir.path()).unwrap_err();
    assert!(
        matches!(
            err,
            Error::Core(rlens_core::Error::Continuity { layer: 1, next: 2, .. })
        ),
        "{err}"
    );
}

#[test]
fn corrupt_tensor_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(8), &TraceWriteOptions::default()).unwrap();
    let path = dir.path().join("layer000_x_in.rsdt");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_trace(dir.path()), Err(Error::Tensor { .. })));
    bytes[0] = b'R';
    bytes.pop();
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_tensor(&path), Err(Error::Tensor { .. })));
}

#[test]
fn wrong_format_tag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(9), &TraceWriteOptions::default()).unwrap();
    edit_manifest(dir.path(), |m| m.format = "something-else".into());
    assert!(matches!(read_trace(dir.path()), Err(Error::Manifest { .. })));
}

#[test]
fn manifest_layout() {
    let dir = tempfile::tempdir().unwrap();
    write_trace(dir.path(), &toy_trace(10), &TraceWriteOptions::default()).unwrap();
    let v: serde_json::Value = read_json(&dir.path().join(MANIFEST_NAME)).unwrap();
    assert_eq!(v["format"], "rlens-trace");
    assert_eq!(v["version"], 1);
    assert_eq!(v["spans"]["visual"], serde_json::json!([2, 8]));
    assert_eq!(v["files"][0]["x_attn"], "layer000_x_attn.rsdt");
    assert_eq!(v["dtype"], "f64");
}
