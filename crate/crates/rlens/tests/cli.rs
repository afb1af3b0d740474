// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;
use std::process::Command;

use rlens::io::{read_json, read_tensor, read_trace};
use rlens::metrics::{read_csv, MetricsTable};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_rlens"));
    c.env_remove("RLENS_SEED");
    c
}

fn run(args: &[&str]) -> u8 {
    let mut full = vec!["rlens"];
    full.extend_from_slice(args);
    rlens::cli::run(full)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for arg in ["--help", "--version"] {
        let out = bin().arg(arg).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{arg}");
        assert!(!out.stdout.is_empty());
    }
    for sub in [
        "metrics",
        "calibrate-rope",
        "toy-run",
        "sap-prior",
        "trace-graph",
        "noise-check",
        "repro",
    ] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(run(&["metrics", "--out", "x"]), 1);
    assert_eq!(run(&["toy-run", "--out", "x", "--band", "0.6,0.2"]), 1);
    assert_eq!(run(&["toy-run", "--out", "x", "--spans", "1,2"]), 1);
    assert_eq!(run(&["noise-check", "--out", "x", "--trials", "ten"]), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    assert_eq!(run(&["metrics", "--trace", s(&missing), "--out", s(dir.path())]), 2);
    assert_eq!(
        run(&[
            "toy-run",
            "--out",
            s(&dir.path().join("t")),
            "--hidden",
            "30",
            "--heads",
            "4"
        ]),
        2
    );
    assert_eq!(
        run(&["noise-check", "--trials", "10", "--out", s(&dir.path().join("n.json"))]),
        2
    );
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(
        run(&["toy-run", "--out", s(&dir.path().join("t")), "--config", s(&bad)]),
        2
    );
}

#[test]
fn non_finite_input_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n.json");
    assert_eq!(
        run(&["noise-check", "--trials", "100", "--mu", "NaN", "--out", s(&out)]),
        3
    );
}

#[test]
fn noise_check_writes_passing_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("n.json");
    assert_eq!(run(&["noise-check", "--trials", "2000", "--out", s(&out)]), 0);
    let v: Value = read_json(&out).unwrap();
    let reports = v.as_array().unwrap();
    assert_eq!(reports.len(), 2);
    assert!(reports.iter().all(|r| r["pass"] == true));
    assert_eq!(reports[1]["mu_v"], 1.0);
}

#[test]
fn zero_weights_give_zero_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("zero");
    assert_eq!(run(&["toy-run", "--out", s(&t), "--init-std", "0", "--layers", "3"]), 0);
    let m = dir.path().join("m");
    assert_eq!(run(&["metrics", "--trace", s(&t), "--out", s(&m)]), 0);
    let table: MetricsTable = read_json(&m.join("metrics.json")).unwrap();
    assert_eq!(table.rows.len(), 3);
    for r in &table.rows {
        assert_eq!(r.sample, "zero");
        for v in [r.rid_attn, r.mixig_attn, r.rid_ffn, r.mixig_ffn] {
            assert!(v.abs() < 1e-12, "{r:?}");
        }
        assert!(r.rid_noise.is_none());
    }
}

#[test]
fn csv_matches_json() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(run(&["--seed", "3", "toy-run", "--out", s(&a)]), 0);
    assert_eq!(run(&["--seed", "4", "toy-run", "--out", s(&b), "--rope", "off"]), 0);
    let m = dir.path().join("m");
    assert_eq!(
        run(&[
            "metrics",
            "--trace",
            s(&a),
            "--trace",
            s(&b),
            "--out",
            s(&m),
            "--noise",
            "--exclude-system",
            "--plot"
        ]),
        0
    );
    let table: MetricsTable = read_json(&m.join("metrics.json")).unwrap();
    let rows = read_csv(&fs::read(m.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows, table.rows);
    assert_eq!(rows.len(), 8);
    assert_eq!(table.per_sample.len(), 2);
    assert_eq!(table.per_layer.len(), 4);
    for r in &rows {
        assert!((0.0..=2.0).contains(&r.rid_attn));
        assert!((0.0..=2.0).contains(&r.rid_noise.unwrap()));
    }
    assert!(fs::read_to_string(m.join("metrics.svg")).unwrap().starts_with("<svg"));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn toy_run_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    assert_eq!(run(&["--seed", "11", "toy-run", "--out", s(&a)]), 0);
    let out = bin()
        .args(["toy-run", "--out", s(&b)])
        .env("RLENS_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(run(&["--seed", "12", "toy-run", "--out", s(&c)]), 0);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn config_file_is_used_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"layers":2,"hidden":16,"heads":2,"head_dim":8,"ffn_dim":32,"rope_enabled":true,"seed":5,"init_std":0.1}"#,
    )
    .unwrap();
    let t = dir.path().join("t");
    assert_eq!(
        run(&[
            "toy-run",
            "--out",
            s(&t),
            "--config",
            s(&cfg),
            "--layers",
            "3",
            "--rope",
            "off"
        ]),
        0
    );
    let stored = read_trace(&t).unwrap();
    assert_eq!(stored.manifest.layers, 3);
    assert_eq!(stored.manifest.hidden, 16);
    assert!(!stored.manifest.rope_enabled);
    assert_eq!(stored.manifest.config.unwrap()["model"]["seed"], 5);

    fs::write(&cfg, r#"{"layers":2,"bogus":1}"#).unwrap();
    assert_eq!(run(&["toy-run", "--out", s(&t), "--config", s(&cfg)]), 2);
}

#[test]
fn sap_noise_changes_only_selected_layers() {
    let dir = tempfile::tempdir().unwrap();
    let plain = dir.path().join("plain");
    let sap = dir.path().join("sap");
    assert_eq!(run(&["toy-run", "--out", s(&plain)]), 0);
    assert_eq!(
        run(&["toy-run", "--out", s(&sap), "--sap", "noise", "--sap-layers", "2"]),
        0
    );
    let a = read_trace(&plain).unwrap().trace;
    let b = read_trace(&sap).unwrap().trace;
    for l in 0..2 {
        assert_eq!(a.layers[l], b.layers[l], "layer {l}");
    }
    let (pa, pb) = (a.layers[2].attn.as_ref().unwrap(), b.layers[2].attn.as_ref().unwrap());
    assert!(pa.iter().zip(pb).any(|(x, y)| x != y));
    let sel: Value = read_json(&sap.join("head_selection.json")).unwrap();
    assert_eq!(sel[0]["layer"], 2);
    assert_eq!(sel[0]["selected"].as_array().unwrap().len(), 2);
    for h in 0..4 {
        let picked = sel[0]["selected"].as_array().unwrap().iter().any(|v| v == h);
        let same = pa[h] == pb[h];
        assert_eq!(picked, !same, "head {h}");
    }
}

#[test]
fn calibrate_rope_checks_flags() {
    let dir = tempfile::tempdir().unwrap();
    let on = dir.path().join("on");
    let off = dir.path().join("off");
    assert_eq!(run(&["toy-run", "--out", s(&on)]), 0);
    assert_eq!(run(&["toy-run", "--out", s(&off), "--rope", "off"]), 0);
    let out = dir.path().join("eps.json");
    assert_eq!(
        run(&[
            "calibrate-rope",
            "--rope",
            s(&on),
            "--no-rope",
            s(&off),
            "--out",
            s(&out)
        ]),
        0
    );
    let v: Value = read_json(&out).unwrap();
    assert_eq!(v["rope_trace"], "on");
    assert_eq!(v["per_layer"].as_array().unwrap().len(), 4);
    assert!(v["per_layer"][0].as_f64().unwrap() < 1e-12);
    assert!(v["mean"].as_f64().unwrap() >= 0.0);

    assert_eq!(
        run(&[
            "calibrate-rope",
            "--rope",
            s(&off),
            "--no-rope",
            s(&on),
            "--out",
            s(&out)
        ]),
        2
    );
    assert_eq!(
        run(&[
            "calibrate-rope",
            "--rope",
            s(&off),
            "--no-rope",
            s(&on),
            "--out",
            s(&out),
            "--unchecked"
        ]),
        0
    );
}

fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
    image::RgbImage::from_fn(w, h, |x, y| image::Rgb(f(x, y)))
        .save(path)
        .unwrap();
}

#[test]
fn patch_complexity_prior_from_png() {
    let dir = tempfile::tempdir().unwrap();
    let png = dir.path().join("img.png");
    // Left half flat, right half checkerboard; 8x8 image, 4x4 patches.
    write_png(&png, 8, 8, |x, y| {
        if x < 4 || (x + y) % 2 == 0 {
            [0, 0, 0]
        } else {
            [255, 255, 255]
        }
    });
    let out = dir.path().join("prior.rsdt");
    assert_eq!(
        run(&[
            "sap-prior",
            "--mode",
            "patch-complexity",
            "--image",
            s(&png),
            "--patch",
            "4x4",
            "--out",
            s(&out)
        ]),
        0
    );
    let v = read_tensor(&out).unwrap().payload().to_f64();
    assert_eq!(v.len(), 4);
    assert_eq!(v[0], 0.0);
    assert_eq!(v[2], 0.0);
    assert!(v[1] > 0.0 && v[3] > 0.0);

    let ppm = dir.path().join("img.ppm");
    image::open(&png).unwrap().save(&ppm).unwrap();
    let out2 = dir.path().join("prior2.rsdt");
    assert_eq!(
        run(&[
            "sap-prior",
            "--mode",
            "patch-complexity",
            "--image",
            s(&ppm),
            "--patch",
            "4x4",
            "--out",
            s(&out2)
        ]),
        0
    );
    assert_eq!(fs::read(&out).unwrap(), fs::read(&out2).unwrap());

    assert_eq!(run(&["sap-prior", "--mode", "patch-complexity", "--out", s(&out)]), 1);
    assert_eq!(
        run(&[
            "sap-prior",
            "--mode",
            "patch-complexity",
            "--image",
            s(&png),
            "--patch",
            "9x9",
            "--out",
            s(&out)
        ]),
        2
    );
}

#[test]
fn sap_prior_scores_heads_from_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    assert_eq!(run(&["toy-run", "--out", s(&t)]), 0);
    let out = dir.path().join("noise.rsdt");
    let sel = dir.path().join("sel.json");
    assert_eq!(
        run(&["sap-prior", "--mode", "noise", "--out", s(&out), "--trace", s(&t)]),
        1
    );
    assert_eq!(
        run(&[
            "sap-prior",
            "--mode",
            "noise",
            "--out",
            s(&out),
            "--trace",
            s(&t),
            "--layer",
            "1",
            "--band",
            "0.5,1",
            "--selection-out",
            s(&sel)
        ]),
        0
    );
    assert_eq!(read_tensor(&out).unwrap().dims(), &[16]);
    let v: Value = read_json(&sel).unwrap();
    assert_eq!(v["scores"].as_array().unwrap().len(), 4);
    assert_eq!(v["selected"].as_array().unwrap().len(), 2);
}

#[test]
fn trace_graph_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t");
    assert_eq!(run(&["toy-run", "--out", s(&t), "--layers", "3"]), 0);
    let empty = dir.path().join("empty.json");
    fs::write(&empty, "[]").unwrap();
    let g = dir.path().join("g");
    let base = [
        "trace-graph",
        "--trace",
        s(&t),
        "--image-size",
        "64x64",
        "--patch",
        "16x16",
    ];

    let mut args = base.to_vec();
    args.extend(["--boxes", s(&empty), "--out", s(&g)]);
    assert_eq!(run(&args), 0);
    let v: Value = read_json(&g.join("graphs.json")).unwrap();
    let layers = v["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    assert!(layers.iter().all(|l| l["rho"] == 0.0));
    for l in 0..3 {
        assert!(g.join(format!("graph_layer{l:03}.svg")).exists());
    }
    assert!(!g.join("graph_layer003.svg").exists());
    assert_eq!(fs::read_to_string(g.join("rho.csv")).unwrap().lines().count(), 4);

    // τ = 0 with one key patch: every ordered pair i≠j is an edge and 2(n-1) touch the key.
    let coco = dir.path().join("coco.json");
    fs::write(&coco, r#"{"annotations":[{"bbox":[0,0,8,8]}]}"#).unwrap();
    let g0 = dir.path().join("g0");
    let mut args = base.to_vec();
    args.extend(["--boxes", s(&coco), "--tau", "0", "--out", s(&g0)]);
    assert_eq!(run(&args), 0);
    let v: Value = read_json(&g0.join("graphs.json")).unwrap();
    assert_eq!(v["key_patches"], serde_json::json!([0]));
    for l in v["layers"].as_array().unwrap() {
        assert_eq!(l["edges"].as_array().unwrap().len(), 16 * 15);
        assert_eq!(l["key_edges"], 30);
        assert!((l["rho"].as_f64().unwrap() - 30.0 / 240.0).abs() < 1e-15);
    }

    let mut args = base.to_vec();
    args[6] = "8x8";
    args.extend(["--boxes", s(&empty), "--out", s(&g)]);
    assert_eq!(run(&args), 2);
}
