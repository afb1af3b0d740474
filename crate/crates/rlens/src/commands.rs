// SPDX-License-Identifier: MIT OR Apache-2.0

//! The work behind each subcommand, callable without going through argument
//! parsing.

use std::path::{Path, PathBuf};

use rlens_core::baselines::{expectation_equivalence_check, EquivalenceReport};
use rlens_core::graph::{
    build_graph_with, head_average, key_patch_set, key_region_degree_ratio, InteractionGraph, KeyPatchSet, PixelBox,
};
use rlens_core::sap::{
    encoder_attention_prior, grayscale, head_scores, noise_prior, patch_complexity_prior, pool_encoder_attention,
    pool_encoder_attention_grid, select_heads, Band, HeadSelection, Injection, PriorData, PriorShape, SapMode,
    SapPrior,
};
use rlens_core::spectral::{calibrate_epsilon_rope, input_discrepancy, EpsilonCalibration};
use rlens_core::tensor::{DType, Payload, TensorRecord};
use rlens_core::toy::{init_model, plan_sap_override, structured_input, ModelConfig, SapPlan, ValuePath};
use rlens_core::{LayerTrace, Matrix, TokenSpans};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::io::{read_matrix, read_trace, write_atomic, write_json, write_tensor, write_trace, TraceWriteOptions};
use crate::metrics::{summarize, trace_metrics, write_csv, MetricsOptions, MetricsTable};
use crate::svg;

/// Shape of the synthetic input fed to the toy model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputSpec {
    pub system: usize,
    pub visual: usize,
    pub question: usize,
    pub rank: usize,
    pub spread: f64,
    pub seed: u64,
}

impl InputSpec {
    pub fn spans(&self) -> TokenSpans {
        TokenSpans::from_lengths(self.system, self.visual, self.question)
    }

    pub fn tokens(&self) -> usize {
        self.system + self.visual + self.question
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorRequest {
    pub mode: SapMode,
    /// Noise prior seed.
    pub seed: u64,
    pub image: Option<PathBuf>,
    pub patch: (usize, usize),
    pub encoder_attention: Option<PathBuf>,
    pub merge: usize,
    /// Encoder patch grid for spatial pooling; 1-D block pooling when absent.
    pub grid: Option<(usize, usize)>,
    /// Visual length for noise priors.
    pub visual: usize,
}

pub fn build_prior(req: &PriorRequest) -> Result<SapPrior> {
    match req.mode {
        SapMode::Noise => Ok(noise_prior(PriorShape::PerPatch(req.visual), req.seed)),
        SapMode::PatchComplexity => {
            let path = req
                .image
                .as_deref()
                .ok_or_else(|| Error::Usage("patch-complexity priors need --image".into()))?;
            let img = crate::images::load_rgb(path)?;
            Ok(patch_complexity_prior(&grayscale(&img)?, req.patch.0, req.patch.1)?)
        }
        SapMode::EncoderAttention => {
            let path = req
                .encoder_attention
                .as_deref()
                .ok_or_else(|| Error::Usage("encoder-attention priors need --encoder-attention".into()))?;
            let a = read_matrix(path)?;
            let pooled = match req.grid {
                Some((gh, gw)) => pool_encoder_attention_grid(&a, gh, gw, req.merge)?,
                None => pool_encoder_attention(&a, req.merge)?,
            };
            Ok(encoder_attention_prior(pooled))
        }
    }
}

pub fn prior_tensor(prior: &SapPrior) -> Result<TensorRecord> {
    let r = match &prior.data {
        PriorData::PerPatch(v) => TensorRecord::new(vec![v.len()], Payload::F64(v.clone())),
        PriorData::Matrix(m) => TensorRecord::from_matrix(m),
    };
    r.map_err(|e| Error::Data(format!("cannot encode prior: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SapRequest {
    pub prior: PriorRequest,
    pub layers: Vec<usize>,
    pub band: Band,
    pub injection: Injection,
}

#[derive(Clone, Debug)]
pub struct ToyRunOptions {
    pub model: ModelConfig,
    pub input: InputSpec,
    pub sap: Option<SapRequest>,
    pub dtype: DType,
}

pub const HEAD_SELECTION_NAME: &str = "head_selection.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    #[serde(flatten)]
    pub selection: HeadSelection,
}

/// Runs the toy model and writes the trace to `out`.
pub fn toy_run(opts: &ToyRunOptions, out: &Path) -> Result<LayerTrace> {
    let model = init_model(&opts.model)?;
    let spans = opts.input.spans();
    let x0 = structured_input(
        opts.input.tokens(),
        opts.model.hidden,
        opts.input.rank,
        opts.input.spread,
        opts.input.seed,
    )?;
    let plan = match &opts.sap {
        Some(req) => {
            let prior = build_prior(&PriorRequest {
                visual: spans.visual_len(),
                ..req.prior.clone()
            })?;
            if prior.visual_len() != spans.visual_len() {
                return Err(Error::Data(format!(
                    "prior covers {} patches but the visual span has {} tokens",
                    prior.visual_len(),
                    spans.visual_len()
                )));
            }
            Some(plan_sap_override(
                &model,
                &x0,
                spans,
                &req.layers,
                req.band,
                prior,
                req.injection,
            )?)
        }
        None => None,
    };
    let mut trace = model.forward_trace(&x0, spans, plan.as_ref().map(|p: &SapPlan| &p.sap))?;
    trace.meta.insert("generator".into(), "rlens toy-run".into());
    let config = json!({
        "model": opts.model,
        "input": opts.input,
        "sap": opts.sap,
    });
    write_trace(
        out,
        &trace,
        &TraceWriteOptions {
            dtype: Some(opts.dtype),
            config: Some(config),
        },
    )?;
    if let Some(plan) = plan {
        let sel: Vec<LayerSelection> = plan
            .selections
            .into_iter()
            .map(|(layer, selection)| LayerSelection { layer, selection })
            .collect();
        write_json(&out.join(HEAD_SELECTION_NAME), &sel)?;
    }
    Ok(trace)
}

/// Scores heads of one stored layer by last-query non-visual mass.
pub fn head_selection_from_trace(trace: &LayerTrace, layer: usize, band: Band) -> Result<HeadSelection> {
    let states = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::Data(format!("trace has {} layers, asked for {layer}", trace.num_layers())))?;
    let attn = states
        .attn
        .as_ref()
        .ok_or_else(|| Error::Data(format!("layer {layer} has no attention tensor")))?;
    let s = states.x_in.rows();
    let rows = Matrix::from_fn(attn.len(), s, |h, j| attn[h][(s - 1, j)]);
    Ok(select_heads(&head_scores(&[rows], &trace.spans)?, band)?)
}

pub struct MetricsOutput {
    pub table: MetricsTable,
    pub csv: PathBuf,
    pub json: PathBuf,
    pub svg: Option<PathBuf>,
}

/// Sample names come from the trace directory names.
pub fn metrics(traces: &[PathBuf], opts: &MetricsOptions, plot: bool, out: &Path) -> Result<MetricsOutput> {
    if traces.is_empty() {
        return Err(Error::Usage("at least one --trace is required".into()));
    }
    let mut rows = Vec::new();
    for (i, dir) in traces.iter().enumerate() {
        let stored = read_trace(dir)?;
        let name = dir_name(dir);
        rows.extend(trace_metrics(&name, i, &stored.trace, opts)?);
    }
    let table = summarize(rows);
    let csv = out.join("metrics.csv");
    let json_path = out.join("metrics.json");
    write_atomic(&csv, &write_csv(&table.rows)?)?;
    write_json(&json_path, &table)?;
    let svg_path = if plot {
        let path = out.join("metrics.svg");
        write_atomic(&path, metrics_plot(&table).as_bytes())?;
        Some(path)
    } else {
        None
    };
    Ok(MetricsOutput {
        table,
        csv,
        json: json_path,
        svg: svg_path,
    })
}

fn metrics_plot(table: &MetricsTable) -> String {
    let col = |f: fn(&crate::metrics::MetricMeans) -> f64| -> Vec<f64> {
        table.per_layer.iter().map(|l| f(&l.means)).collect()
    };
    let rid_attn = col(|m| m.rid_attn);
    let rid_ffn = col(|m| m.rid_ffn);
    let mix_attn = col(|m| m.mixig_attn);
    let mix_ffn = col(|m| m.mixig_ffn);
    let rid_noise: Vec<f64> = table
        .per_layer
        .iter()
        .map(|l| l.means.rid_noise.unwrap_or(f64::NAN))
        .collect();
    let mix_noise: Vec<f64> = table
        .per_layer
        .iter()
        .map(|l| l.means.mixig_noise.unwrap_or(f64::NAN))
        .collect();
    let has_noise = table.overall.rid_noise.is_some();
    let mut rid = vec![
        svg::Series {
            name: "RID attn",
            values: &rid_attn,
        },
        svg::Series {
            name: "RID ffn",
            values: &rid_ffn,
        },
    ];
    let mut mix = vec![
        svg::Series {
            name: "MixIG attn",
            values: &mix_attn,
        },
        svg::Series {
            name: "MixIG ffn",
            values: &mix_ffn,
        },
    ];
    if has_noise {
        rid.push(svg::Series {
            name: "RID noise Δ",
            values: &rid_noise,
        });
        mix.push(svg::Series {
            name: "MixIG noise Δ",
            values: &mix_noise,
        });
    }
    let top = svg::line_plot("Representation innovation per layer", "RID", &rid);
    let bottom = svg::line_plot("Mixing information gain per layer", "MixIG (nats)", &mix);
    // stack the two plots in one document
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"800\" viewBox=\"0 0 640 800\">\n<g>\n{}</g>\n<g transform=\"translate(0 400)\">\n{}</g>\n</svg>\n",
        strip_root(&top),
        strip_root(&bottom)
    )
}

fn strip_root(svg: &str) -> String {
    let body = svg.split_once('\n').map_or("", |(_, rest)| rest);
    body.trim_end().trim_end_matches("</svg>").to_owned()
}

fn dir_name(p: &Path) -> String {
    p.file_name().unwrap_or(p.as_os_str()).to_string_lossy().into_owned()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub rope_trace: String,
    pub no_rope_trace: String,
    pub checked_flags: bool,
    #[serde(flatten)]
    pub calibration: EpsilonCalibration,
}

pub fn calibrate_rope(rope: &Path, no_rope: &Path, unchecked: bool, out: &Path) -> Result<EpsilonReport> {
    let a = read_trace(rope)?.trace;
    let b = read_trace(no_rope)?.trace;
    let calibration = if unchecked {
        input_discrepancy(&a, &b)?
    } else {
        calibrate_epsilon_rope(&a, &b)?
    };
    let report = EpsilonReport {
        rope_trace: dir_name(rope),
        no_rope_trace: dir_name(no_rope),
        checked_flags: !unchecked,
        calibration,
    };
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxEntry {
    Xywh([f64; 4]),
    Annotation { bbox: [f64; 4] },
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BoxFile {
    List(Vec<BoxEntry>),
    Coco { annotations: Vec<BoxEntry> },
}

/// Accepts a list of `[x, y, w, h]` boxes, a list of `{"bbox": [...]}`
/// objects, or a COCO document with an `annotations` array.
pub fn read_boxes(path: &Path) -> Result<Vec<PixelBox>> {
    let file: BoxFile = crate::io::read_json(path)?;
    let entries = match file {
        BoxFile::List(v) => v,
        BoxFile::Coco { annotations } => annotations,
    };
    Ok(entries
        .into_iter()
        .map(|e| match e {
            BoxEntry::Xywh(b) | BoxEntry::Annotation { bbox: b } => PixelBox::from_xywh(b),
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct GraphOptions {
    pub tau: f64,
    pub include_self: bool,
    pub image_size: (usize, usize),
    pub patch: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub layer: usize,
    pub n_patches: usize,
    pub edges: Vec<(usize, usize)>,
    pub key_edges: usize,
    pub rho: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub tau: f64,
    pub include_self: bool,
    pub grid: (usize, usize),
    pub key_patches: Vec<usize>,
    pub layers: Vec<LayerGraph>,
    pub mean_rho: f64,
}

#[derive(Serialize)]
struct RhoRow {
    layer: usize,
    edges: usize,
    key_edges: usize,
    rho: f64,
}

pub fn trace_graph(trace_dir: &Path, boxes: &[PixelBox], opts: &GraphOptions, out: &Path) -> Result<GraphReport> {
    let trace = read_trace(trace_dir)?.trace;
    if !trace.has_attention() {
        return Err(Error::Data(format!("{} has no attention tensors", trace_dir.display())));
    }
    let keys: KeyPatchSet = key_patch_set(boxes, opts.image_size, opts.patch)?;
    let n_grid = keys.grid.0 * keys.grid.1;
    if n_grid != trace.spans.visual_len() {
        return Err(Error::Data(format!(
            "{}x{} patch grid has {n_grid} patches but the visual span has {} tokens",
            keys.grid.0,
            keys.grid.1,
            trace.spans.visual_len()
        )));
    }
    let mut layers = Vec::with_capacity(trace.num_layers());
    let mut graphs: Vec<InteractionGraph> = Vec::with_capacity(trace.num_layers());
    for (l, states) in trace.layers.iter().enumerate() {
        let avg = head_average(states.attn.as_deref().unwrap_or_default())?;
        let g = build_graph_with(&avg, &trace.spans, opts.tau, l, opts.include_self)?;
        let rho = key_region_degree_ratio(&g, &keys);
        let key_edges = g
            .edges
            .iter()
            .filter(|(j, i)| keys.contains(*i) || keys.contains(*j))
            .count();
        layers.push(LayerGraph {
            layer: l,
            n_patches: g.n_patches,
            edges: g.edges.iter().copied().collect(),
            key_edges,
            rho,
        });
        graphs.push(g);
    }
    let mean_rho = layers.iter().map(|l| l.rho).sum::<f64>() / layers.len() as f64;
    let report = GraphReport {
        tau: opts.tau,
        include_self: opts.include_self,
        grid: keys.grid,
        key_patches: keys.patches.iter().copied().collect(),
        layers,
        mean_rho,
    };
    write_json(&out.join("graphs.json"), &report)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in &report.layers {
        w.serialize(RhoRow {
            layer: l.layer,
            edges: l.edges.len(),
            key_edges: l.key_edges,
            rho: l.rho,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    write_atomic(&out.join("rho.csv"), &bytes)?;
    for g in &graphs {
        write_atomic(
            &out.join(format!("graph_layer{:03}.svg", g.layer)),
            svg::graph_overlay(g, &keys).as_bytes(),
        )?;
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCheckOptions {
    pub trials: usize,
    pub keys: usize,
    pub dim: usize,
    pub seed: u64,
}

/// Runs the equivalence check for every `μ_V`, writes all reports, then fails
/// if any of them did.
pub fn noise_check(opts: &NoiseCheckOptions, mus: &[f64], out: &Path) -> Result<Vec<EquivalenceReport>> {
    if mus.is_empty() {
        return Err(Error::Usage("at least one --mu is required".into()));
    }
    let reports = mus
        .iter()
        .map(|&mu| expectation_equivalence_check(opts.trials, opts.keys, opts.dim, mu, opts.seed))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    write_json(out, &reports)?;
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("μ_V = {}", r.mu_v))
        .collect();
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "expectation equivalence failed for {}",
            failed.join(", ")
        )));
    }
    Ok(reports)
}

/// Model used by `repro`.
pub fn repro_model(seed: u64, rope_enabled: bool) -> ModelConfig {
    ModelConfig {
        layers: 4,
        hidden: 32,
        heads: 4,
        head_dim: 8,
        ffn_dim: 64,
        rope_enabled,
        seed,
        init_std: 0.02,
        value_path: ValuePath::NearIdentity,
        ..ModelConfig::default()
    }
}

/// Input used by `repro`: 4 system, 16 visual (a 4×4 grid) and 4 question
/// tokens.
pub fn repro_input(seed: u64) -> InputSpec {
    InputSpec {
        system: 4,
        visual: 16,
        question: 4,
        rank: 4,
        spread: 0.5,
        seed: seed.wrapping_add(1),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproSummary {
    pub seed: u64,
    pub epsilon_rope: f64,
    pub overall: crate::metrics::MetricMeans,
    pub noise_check_pass: bool,
    pub mean_rho: f64,
    pub files: Vec<String>,
}

/// toy-run (RoPE on, off, and with a noise prior) → metrics → calibrate-rope →
/// noise-check → trace-graph, all under `out`.
pub fn repro(seed: u64, out: &Path) -> Result<ReproSummary> {
    let input = repro_input(seed);
    let rope = out.join("toy_rope");
    let no_rope = out.join("toy_norope");
    let sap = out.join("toy_sap");
    let base = |rope_enabled| ToyRunOptions {
        model: repro_model(seed, rope_enabled),
        input,
        sap: None,
        dtype: DType::F64,
    };
    toy_run(&base(true), &rope)?;
    toy_run(&base(false), &no_rope)?;
    toy_run(
        &ToyRunOptions {
            sap: Some(SapRequest {
                prior: PriorRequest {
                    mode: SapMode::Noise,
                    seed: seed.wrapping_add(2),
                    image: None,
                    patch: (16, 16),
                    encoder_attention: None,
                    merge: 1,
                    grid: None,
                    visual: input.visual,
                },
                layers: vec![1, 2],
                band: Band::new(0.0, 0.5)?,
                injection: Injection::Raw,
            }),
            ..base(true)
        },
        &sap,
    )?;

    let m = metrics(
        &[rope.clone(), sap],
        &MetricsOptions {
            noise_seed: Some(seed.wrapping_add(3)),
            exclude_system: false,
        },
        true,
        &out.join("metrics"),
    )?;
    let eps = calibrate_rope(&rope, &no_rope, false, &out.join("epsilon_rope.json"))?;
    let noise = noise_check(
        &NoiseCheckOptions {
            trials: 10_000,
            keys: 8,
            dim: 4,
            seed: seed.wrapping_add(4),
        },
        &[0.0, 1.0],
        &out.join("noise_check.json"),
    );
    let noise_check_pass = noise.is_ok();
    // a key region covering the top-left quarter of a 64×64 image
    let boxes = [PixelBox::from_xywh([0.0, 0.0, 32.0, 32.0])];
    write_json(&out.join("boxes.json"), &[[0.0, 0.0, 32.0, 32.0]])?;
    let graph = trace_graph(
        &rope,
        &boxes,
        &GraphOptions {
            tau: rlens_core::graph::DEFAULT_TAU,
            include_self: false,
            image_size: (64, 64),
            patch: (16, 16),
        },
        &out.join("graph"),
    )?;

    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    files.retain(|f| f != "summary.json");
    files.sort();
    let summary = ReproSummary {
        seed,
        epsilon_rope: eps.calibration.mean,
        overall: m.table.overall,
        noise_check_pass,
        mean_rho: graph.mean_rho,
        files,
    };
    write_json(&out.join("summary.json"), &summary)?;
    noise?;
    Ok(summary)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if let Ok(rel) = path.strip_prefix(root) {
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Writes a prior as a tensor and returns it.
pub fn sap_prior(req: &PriorRequest, out: &Path) -> Result<SapPrior> {
    let prior = build_prior(req)?;
    write_tensor(out, &prior_tensor(&prior)?)?;
    Ok(prior)
}
