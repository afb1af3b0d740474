// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rlens_core::sap::{Band, Injection, SapMode};
use rlens_core::tensor::DType;
use rlens_core::toy::{ModelConfig, ValuePath};
use rlens_core::DEFAULT_SEED;

use crate::commands::{self, GraphOptions, InputSpec, NoiseCheckOptions, PriorRequest, SapRequest, ToyRunOptions};
use crate::error::{exit, Error, Result};
use crate::metrics::MetricsOptions;

#[derive(Debug, Parser)]
#[command(
    name = "rlens",
    version,
    about = "Measure how attention and FFN updates change a residual stream"
)]
pub struct Cli {
    /// Seed for every random draw; falls back to RLENS_SEED, then a fixed default.
    #[arg(long, global = true, env = "RLENS_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer RID and MixIG of attention and FFN updates.
    Metrics(MetricsArgs),
    /// RID between layer inputs of RoPE-on and RoPE-off traces of one input.
    CalibrateRope(CalibrateArgs),
    /// Run the toy decoder and store its trace.
    ToyRun(ToyRunArgs),
    /// Build a shared attention prior and optionally score heads.
    SapPrior(SapPriorArgs),
    /// Thresholded visual interaction graphs and key-region degree ratios.
    TraceGraph(TraceGraphArgs),
    /// Monte Carlo check that mean-matched noise matches attention outputs in expectation.
    NoiseCheck(NoiseCheckArgs),
    /// Regenerate the full toy pipeline: toy-run, metrics, calibrate-rope, noise-check, trace-graph.
    Repro(ReproArgs),
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Trace directory; repeat for several samples.
    #[arg(long = "trace", required = true)]
    pub traces: Vec<PathBuf>,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Add Noise Δ control columns (moment-matched Gaussian attention update).
    #[arg(long)]
    pub noise: bool,
    /// Drop system-prompt tokens before computing MixIG.
    #[arg(long)]
    pub exclude_system: bool,
    /// Also write metrics.svg.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Trace produced with rotary embeddings enabled.
    #[arg(long)]
    pub rope: PathBuf,
    /// Trace of the same input with rotary embeddings disabled.
    #[arg(long)]
    pub no_rope: PathBuf,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
    /// Skip the check that the manifests' rope flags are (on, off).
    #[arg(long)]
    pub unchecked: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ValuePathArg {
    Gaussian,
    NearIdentity,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PriorMode {
    Noise,
    PatchComplexity,
    EncoderAttention,
}

impl From<PriorMode> for SapMode {
    fn from(m: PriorMode) -> Self {
        match m {
            PriorMode::Noise => SapMode::Noise,
            PriorMode::PatchComplexity => SapMode::PatchComplexity,
            PriorMode::EncoderAttention => SapMode::EncoderAttention,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InjectionArg {
    Raw,
    Log,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum DTypeArg {
    F32,
    F64,
}

/// Inputs shared by every prior mode.
#[derive(Debug, Args)]
pub struct PriorArgs {
    /// PNG or binary PPM image for patch-complexity priors.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Patch size in pixels as HxW.
    #[arg(long, value_parser = parse_pair, default_value = "14x14")]
    pub patch: (usize, usize),
    /// N×N encoder attention tensor (RSDT) for encoder-attention priors.
    #[arg(long)]
    pub encoder_attention: Option<PathBuf>,
    /// Encoder tokens merged into one decoder token along each pooled axis.
    #[arg(long, default_value_t = 1)]
    pub merge: usize,
    /// Encoder patch grid HxW; pools m×m spatial windows instead of 1-D blocks.
    #[arg(long, value_parser = parse_pair)]
    pub grid: Option<(usize, usize)>,
}

#[derive(Debug, Args)]
pub struct ToyRunArgs {
    /// Output trace directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Model config JSON; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Standard deviation of the Gaussian weight init.
    #[arg(long)]
    pub init_std: Option<f64>,
    /// Rotary position embeddings on Q/K.
    #[arg(long, value_enum)]
    pub rope: Option<OnOff>,
    #[arg(long, value_enum)]
    pub value_path: Option<ValuePathArg>,
    /// Token counts SYSTEM,VISUAL,QUESTION.
    #[arg(long, value_parser = parse_triple, default_value = "4,16,4")]
    pub spans: (usize, usize, usize),
    /// Rank of the token variation in the synthetic input.
    #[arg(long, default_value_t = 4)]
    pub input_rank: usize,
    /// Scale of the token variation relative to the shared offset.
    #[arg(long, default_value_t = 0.5)]
    pub spread: f64,
    /// Replace visual-key attention scores with this prior.
    #[arg(long, value_enum)]
    pub sap: Option<PriorMode>,
    /// Layers receiving the prior (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "1")]
    pub sap_layers: Vec<usize>,
    /// Head percentile band LO,HI over heads ranked by visual focus.
    #[arg(long, value_parser = parse_band, default_value = "0,0.5")]
    pub band: Band,
    #[arg(long, value_enum, default_value = "raw")]
    pub injection: InjectionArg,
    #[command(flatten)]
    pub prior: PriorArgs,
    #[arg(long, value_enum, default_value = "f64")]
    pub dtype: DTypeArg,
}

#[derive(Debug, Args)]
pub struct SapPriorArgs {
    #[arg(long, value_enum)]
    pub mode: PriorMode,
    /// Output tensor (RSDT): length S_v for per-patch priors, S_v×S_v for matrices.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of visual tokens for noise priors.
    #[arg(long, default_value_t = 16)]
    pub visual: usize,
    #[command(flatten)]
    pub prior: PriorArgs,
    /// Trace to score heads on.
    #[arg(long, requires = "selection_out")]
    pub trace: Option<PathBuf>,
    /// Layer of --trace whose heads are scored.
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Head percentile band LO,HI.
    #[arg(long, value_parser = parse_band, default_value = "0,0.5")]
    pub band: Band,
    /// Head selection JSON output.
    #[arg(long, requires = "trace")]
    pub selection_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TraceGraphArgs {
    /// Trace directory with attention tensors.
    #[arg(long)]
    pub trace: PathBuf,
    /// Key-region boxes: COCO annotations or a list of [x, y, w, h].
    #[arg(long)]
    pub boxes: PathBuf,
    /// Image size in pixels as HxW.
    #[arg(long, value_parser = parse_pair)]
    pub image_size: (usize, usize),
    /// Patch size in pixels as HxW.
    #[arg(long, value_parser = parse_pair)]
    pub patch: (usize, usize),
    /// Edge threshold on head-averaged attention.
    #[arg(long, default_value_t = rlens_core::graph::DEFAULT_TAU)]
    pub tau: f64,
    /// Keep self-edges.
    #[arg(long)]
    pub include_self: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NoiseCheckArgs {
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Number of keys N.
    #[arg(long, default_value_t = 8)]
    pub keys: usize,
    /// Query/key/value dimension d.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    /// Value mean μ_V; repeat for several.
    #[arg(long = "mu", default_values_t = [0.0, 1.0])]
    pub mus: Vec<f64>,
    /// Output JSON file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn parse_triple(s: &str) -> std::result::Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated counts, got {s:?}"));
    };
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?, parse(c)?))
}

fn parse_band(s: &str) -> std::result::Result<Band, String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected LO,HI, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Band::new(parse(a)?, parse(b)?).map_err(|e| e.to_string())
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

fn prior_request(mode: PriorMode, args: &PriorArgs, seed: u64, visual: usize) -> PriorRequest {
    PriorRequest {
        mode: mode.into(),
        seed,
        image: args.image.clone(),
        patch: args.patch,
        encoder_attention: args.encoder_attention.clone(),
        merge: args.merge,
        grid: args.grid,
        visual,
    }
}

fn model_config(args: &ToyRunArgs, seed: u64) -> Result<ModelConfig> {
    let mut cfg = match &args.config {
        Some(path) => crate::io::read_json::<ModelConfig>(path)?,
        None => ModelConfig {
            seed,
            ..ModelConfig::default()
        },
    };
    if let Some(v) = args.layers {
        cfg.layers = v;
    }
    if let Some(v) = args.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = args.heads {
        cfg.heads = v;
    }
    if args.hidden.is_some() || args.heads.is_some() {
        cfg.head_dim = cfg.hidden.checked_div(cfg.heads).unwrap_or(0);
    }
    if let Some(v) = args.ffn_dim {
        cfg.ffn_dim = v;
    }
    if let Some(v) = args.init_std {
        cfg.init_std = v;
    }
    if let Some(r) = args.rope {
        cfg.rope_enabled = matches!(r, OnOff::On);
    }
    if let Some(v) = args.value_path {
        cfg.value_path = match v {
            ValuePathArg::Gaussian => ValuePath::Gaussian,
            ValuePathArg::NearIdentity => ValuePath::NearIdentity,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<String> {
    let seed = cli.seed;
    match cli.command {
        Command::Metrics(a) => {
            let opts = MetricsOptions {
                noise_seed: a.noise.then_some(seed),
                exclude_system: a.exclude_system,
            };
            let out = commands::metrics(&a.traces, &opts, a.plot, &a.out)?;
            Ok(format!(
                "wrote {} rows to {} and {}",
                out.table.rows.len(),
                out.csv.display(),
                out.json.display()
            ))
        }
        Command::CalibrateRope(a) => {
            let r = commands::calibrate_rope(&a.rope, &a.no_rope, a.unchecked, &a.out)?;
            Ok(format!(
                "epsilon (mean over {} layers) = {}",
                r.calibration.per_layer.len(),
                r.calibration.mean
            ))
        }
        Command::ToyRun(a) => {
            let model = model_config(&a, seed)?;
            let (system, visual, question) = a.spans;
            let input = InputSpec {
                system,
                visual,
                question,
                rank: a.input_rank,
                spread: a.spread,
                seed: seed.wrapping_add(1),
            };
            let sap = a.sap.map(|mode| SapRequest {
                prior: prior_request(mode, &a.prior, seed.wrapping_add(2), visual),
                layers: a.sap_layers.clone(),
                band: a.band,
                injection: match a.injection {
                    InjectionArg::Raw => Injection::Raw,
                    InjectionArg::Log => Injection::Log,
                },
            });
            let opts = ToyRunOptions {
                model,
                input,
                sap,
                dtype: a.dtype.into(),
            };
            let trace = commands::toy_run(&opts, &a.out)?;
            Ok(format!(
                "wrote {}-layer trace to {}",
                trace.num_layers(),
                a.out.display()
            ))
        }
        Command::SapPrior(a) => {
            let prior = commands::sap_prior(&prior_request(a.mode, &a.prior, seed, a.visual), &a.out)?;
            if let (Some(trace), Some(sel_out)) = (&a.trace, &a.selection_out) {
                let stored = crate::io::read_trace(trace)?;
                let sel = commands::head_selection_from_trace(&stored.trace, a.layer, a.band)?;
                crate::io::write_json(sel_out, &sel)?;
            }
            Ok(format!(
                "wrote {}-patch prior to {}",
                prior.visual_len(),
                a.out.display()
            ))
        }
        Command::TraceGraph(a) => {
            let boxes = commands::read_boxes(&a.boxes)?;
            let opts = GraphOptions {
                tau: a.tau,
                include_self: a.include_self,
                image_size: a.image_size,
                patch: a.patch,
            };
            let r = commands::trace_graph(&a.trace, &boxes, &opts, &a.out)?;
            Ok(format!("{} layer graphs, mean rho = {}", r.layers.len(), r.mean_rho))
        }
        Command::NoiseCheck(a) => {
            let opts = NoiseCheckOptions {
                trials: a.trials,
                keys: a.keys,
                dim: a.dim,
                seed,
            };
            let reports = commands::noise_check(&opts, &a.mus, &a.out)?;
            Ok(format!("{} settings passed", reports.len()))
        }
        Command::Repro(a) => {
            let s = commands::repro(seed, &a.out)?;
            Ok(format!("wrote {} files under {}", s.files.len() + 1, a.out.display()))
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match execute(cli) {
        Ok(msg) => {
            println!("{msg}");
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

impl From<clap::Error> for Error {
    fn from(e: clap::Error) -> Self {
        Error::Usage(e.to_string())
    }
}
