// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer RID and MixIG tables for attention and FFN updates.

use rlens_core::baselines::noise_delta;
use rlens_core::mixing::mixing_information_gain;
use rlens_core::numeric::CompensatedSum;
use rlens_core::spectral::Reference;
use rlens_core::{LayerTrace, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MetricsOptions {
    /// Add Noise Δ control columns seeded from this value.
    pub noise_seed: Option<u64>,
    /// Drop system-prompt rows before computing MixIG.
    pub exclude_system: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub sample: String,
    pub layer: usize,
    pub rid_attn: f64,
    pub delta_s_attn: f64,
    pub delta_d_attn: f64,
    pub mixig_attn: f64,
    pub rid_ffn: f64,
    pub delta_s_ffn: f64,
    pub delta_d_ffn: f64,
    pub mixig_ffn: f64,
    pub rid_noise: Option<f64>,
    pub mixig_noise: Option<f64>,
}

/// Means of the headline columns over some set of rows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub rows: usize,
    pub rid_attn: f64,
    pub mixig_attn: f64,
    pub rid_ffn: f64,
    pub mixig_ffn: f64,
    pub rid_noise: Option<f64>,
    pub mixig_noise: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeans {
    pub layer: usize,
    #[serde(flatten)]
    pub means: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<LayerMetrics>,
    /// Across samples, per layer.
    pub per_layer: Vec<LayerMeans>,
    /// Across samples, per sample mean over layers, then averaged.
    pub per_sample: Vec<SampleMeans>,
    pub overall: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeans {
    pub sample: String,
    #[serde(flatten)]
    pub means: MetricMeans,
}

/// Seed of the Noise Δ draw for one layer of one sample.
pub fn noise_seed_for(base: u64, sample_index: usize, layer: usize) -> u64 {
    base.wrapping_add((sample_index as u64).wrapping_mul(1_000_003))
        .wrapping_add(layer as u64)
}

fn drop_rows(x: &Matrix, skip: core::ops::Range<usize>) -> Matrix {
    let keep: Vec<usize> = (0..x.rows()).filter(|r| !skip.contains(r)).collect();
    Matrix::from_fn(keep.len(), x.cols(), |i, j| x[(keep[i], j)])
}

fn mixig(x: &Matrix, xp: &Matrix, trace: &LayerTrace, opts: &MetricsOptions) -> Result<f64> {
    if opts.exclude_system && !trace.spans.system.is_empty() {
        let skip = trace.spans.system.range();
        return Ok(mixing_information_gain(
            &drop_rows(x, skip.clone()),
            &drop_rows(xp, skip),
        )?);
    }
    Ok(mixing_information_gain(x, xp)?)
}

pub fn trace_metrics(
    sample: &str,
    sample_index: usize,
    trace: &LayerTrace,
    opts: &MetricsOptions,
) -> Result<Vec<LayerMetrics>> {
    trace
        .layers
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let attn = Reference::new(&s.x_in)?.rid(&s.x_attn)?;
            let ffn = Reference::new(&s.x_attn)?.rid(&s.x_ffn)?;
            let (rid_noise, mixig_noise) = match opts.noise_seed {
                Some(base) => {
                    let noisy = s
                        .x_in
                        .add(&noise_delta(&s.delta_attn(), noise_seed_for(base, sample_index, l))?);
                    let r = Reference::new(&s.x_in)?.rid(&noisy)?.rid;
                    (Some(r), Some(mixig(&s.x_in, &noisy, trace, opts)?))
                }
                None => (None, None),
            };
            Ok(LayerMetrics {
                sample: sample.to_owned(),
                layer: l,
                rid_attn: attn.rid,
                delta_s_attn: attn.delta_s,
                delta_d_attn: attn.delta_d,
                mixig_attn: mixig(&s.x_in, &s.x_attn, trace, opts)?,
                rid_ffn: ffn.rid,
                delta_s_ffn: ffn.delta_s,
                delta_d_ffn: ffn.delta_d,
                mixig_ffn: mixig(&s.x_attn, &s.x_ffn, trace, opts)?,
                rid_noise,
                mixig_noise,
            })
        })
        .collect()
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a LayerMetrics> + Clone) -> MetricMeans {
    let n = rows.clone().count();
    let avg = |f: &dyn Fn(&LayerMetrics) -> f64| {
        if n == 0 {
            return 0.0;
        }
        rows.clone().map(f).collect::<CompensatedSum>().value() / n as f64
    };
    let opt = |f: &dyn Fn(&LayerMetrics) -> Option<f64>| {
        let vals: Option<Vec<f64>> = rows.clone().map(f).collect();
        vals.filter(|v| !v.is_empty())
            .map(|v| v.iter().copied().collect::<CompensatedSum>().value() / v.len() as f64)
    };
    MetricMeans {
        rows: n,
        rid_attn: avg(&|r| r.rid_attn),
        mixig_attn: avg(&|r| r.mixig_attn),
        rid_ffn: avg(&|r| r.rid_ffn),
        mixig_ffn: avg(&|r| r.mixig_ffn),
        rid_noise: opt(&|r| r.rid_noise),
        mixig_noise: opt(&|r| r.mixig_noise),
    }
}

/// Per-layer, per-sample and grand means of `rows`.
pub fn summarize(rows: Vec<LayerMetrics>) -> MetricsTable {
    let mut layers: Vec<usize> = rows.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    let per_layer = layers
        .iter()
        .map(|&l| LayerMeans {
            layer: l,
            means: mean_of(rows.iter().filter(|r| r.layer == l)),
        })
        .collect();
    let mut samples: Vec<&str> = Vec::new();
    for r in &rows {
        if !samples.contains(&r.sample.as_str()) {
            samples.push(&r.sample);
        }
    }
    let per_sample: Vec<SampleMeans> = samples
        .iter()
        .map(|&s| SampleMeans {
            sample: s.to_owned(),
            means: mean_of(rows.iter().filter(|r| r.sample == s)),
        })
        .collect();
    let overall = mean_of(rows.iter());
    MetricsTable {
        rows,
        per_layer,
        per_sample,
        overall,
    }
}

/// Writes one CSV row per (sample, layer); absent control columns are empty.
pub fn write_csv(rows: &[LayerMetrics]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

pub fn read_csv(bytes: &[u8]) -> Result<Vec<LayerMetrics>> {
    let mut r = csv::Reader::from_reader(bytes);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
