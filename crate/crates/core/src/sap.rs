// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared attention priors.
//!
//! A prior is computed once per input and substituted for the pre-softmax
//! attention scores of selected heads, on key columns that fall inside the
//! visual span. The caller applies the causal mask and softmax afterwards, so
//! replaced entries for future keys still end up with zero weight.
//!
//! Three priors are available:
//!
//! - **encoder attention**: the vision encoder's attention map, average-pooled
//!   over merged patch blocks and renormalised row-wise;
//! - **patch complexity**: per patch, mean absolute finite differences of the
//!   grayscale image plus its intensity variance;
//! - **noise**: standard-normal scores.
//!
//! Heads are picked by ranking the negative non-visual attention mass of the
//! last query and keeping a percentile band of the ranking.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{mean_std, CompensatedSum};
use crate::rng::GaussianStream;
use crate::trace::TokenSpans;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SapMode {
    EncoderAttention,
    PatchComplexity,
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorData {
    /// One score per visual key, broadcast across queries.
    PerPatch(Vec<f64>),
    /// `S_v×S_v` scores indexed by (query patch, key patch).
    Matrix(Matrix),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SapPrior {
    pub mode: SapMode,
    pub data: PriorData,
    pub provenance: String,
}

impl SapPrior {
    /// Number of visual tokens the prior covers.
    pub fn visual_len(&self) -> usize {
        match &self.data {
            PriorData::PerPatch(v) => v.len(),
            PriorData::Matrix(m) => m.rows(),
        }
    }

    pub fn check_visual_len(&self, s_v: usize) -> Result<()> {
        if let PriorData::Matrix(m) = &self.data {
            if m.rows() != m.cols() {
                return Err(Error::Invalid(format!(
                    "matrix prior must be square, got {:?}",
                    m.shape()
                )));
            }
        }
        if self.visual_len() != s_v {
            return Err(Error::Invalid(format!(
                "prior covers {} visual tokens but the visual span has {s_v}",
                self.visual_len()
            )));
        }
        Ok(())
    }
}

/// How prior values become scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Prior values are used as scores unchanged.
    #[default]
    Raw,
    /// `ln(max(v, 1e-12))`, so a probability-like prior survives softmax as
    /// the same distribution.
    Log,
}

impl Injection {
    fn apply(self, v: f64) -> f64 {
        match self {
            Injection::Raw => v,
            Injection::Log => libm::log(v.max(1e-12)),
        }
    }
}

/// Pixel data in row-major, channel-interleaved order with values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }
}

/// `g = 0.299 R + 0.587 G + 0.114 B`, unrounded.
pub fn grayscale(img: &Image) -> Result<Matrix> {
    if img.channels != 3 {
        return Err(Error::Invalid(format!(
            "grayscale needs 3 channels, got {}",
            img.channels
        )));
    }
    Ok(Matrix::from_fn(img.height, img.width, |u, v| {
        let px = &img.data[(u * img.width + v) * 3..][..3];
        0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
    }))
}

/// Complexity statistics of a single patch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchStats {
    pub grad_x: f64,
    pub grad_y: f64,
    pub variance: f64,
    /// `grad_x + grad_y + variance`.
    pub complexity: f64,
}

/// Statistics of one `H×W` patch of grayscale values.
///
/// `grad_x` averages `|g(u, v+1) − g(u, v)|` over `H·(W−1)` pairs and `grad_y`
/// over `(H−1)·W` pairs; an axis of length 1 has no pairs and contributes 0.
/// The variance is the population variance.
pub fn patch_stats(patch: &Matrix) -> PatchStats {
    let (h, w) = patch.shape();
    let mut gx = CompensatedSum::new();
    let mut gy = CompensatedSum::new();
    for u in 0..h {
        for v in 0..w {
            if v + 1 < w {
                gx.add(libm::fabs(patch[(u, v + 1)] - patch[(u, v)]));
            }
            if u + 1 < h {
                gy.add(libm::fabs(patch[(u + 1, v)] - patch[(u, v)]));
            }
        }
    }
    let grad_x = if w > 1 { gx.value() / (h * (w - 1)) as f64 } else { 0.0 };
    let grad_y = if h > 1 { gy.value() / ((h - 1) * w) as f64 } else { 0.0 };
    let (_, std) = mean_std(patch.as_slice());
    let variance = std * std;
    PatchStats {
        grad_x,
        grad_y,
        variance,
        complexity: grad_x + grad_y + variance,
    }
}

/// Patch grid of a cropped image: `rows × cols` patches of `patch_h × patch_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    /// Remainder pixels on the right and bottom are dropped.
    pub fn for_image(height: usize, width: usize, patch_h: usize, patch_w: usize) -> Result<Self> {
        if patch_h == 0 || patch_w == 0 {
            return Err(Error::Invalid(String::from("patch dimensions must be positive")));
        }
        if patch_h > height || patch_w > width {
            return Err(Error::Invalid(format!(
                "{patch_h}x{patch_w} patch is larger than the {height}x{width} image"
            )));
        }
        Ok(PatchGrid {
            rows: height / patch_h,
            cols: width / patch_w,
            patch_h,
            patch_w,
        })
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-patch statistics in row-major patch order.
pub fn patch_complexity(gray: &Matrix, patch_h: usize, patch_w: usize) -> Result<Vec<PatchStats>> {
    let grid = PatchGrid::for_image(gray.rows(), gray.cols(), patch_h, patch_w)?;
    let mut out = Vec::with_capacity(grid.len());
    for pr in 0..grid.rows {
        for pc in 0..grid.cols {
            let patch = Matrix::from_fn(patch_h, patch_w, |u, v| gray[(pr * patch_h + u, pc * patch_w + v)]);
            out.push(patch_stats(&patch));
        }
    }
    Ok(out)
}

/// The patch-complexity prior `c(p)` of a grayscale image.
pub fn patch_complexity_prior(gray: &Matrix, patch_h: usize, patch_w: usize) -> Result<SapPrior> {
    let stats = patch_complexity(gray, patch_h, patch_w)?;
    Ok(SapPrior {
        mode: SapMode::PatchComplexity,
        data: PriorData::PerPatch(stats.iter().map(|s| s.complexity).collect()),
        provenance: format!("patch complexity, {patch_h}x{patch_w} patches"),
    })
}

/// Averages `a` over pairs of index groups and renormalises rows.
///
/// `group_of[i]` names the output index of source index `i`.
fn pool_groups(a: &Matrix, group_of: &[usize], n_groups: usize) -> Result<Matrix> {
    let mut sums = Matrix::zeros(n_groups, n_groups);
    let mut sizes = alloc::vec![0usize; n_groups];
    for &g in group_of {
        sizes[g] += 1;
    }
    for (i, &gi) in group_of.iter().enumerate() {
        for (j, &gj) in group_of.iter().enumerate() {
            sums[(gi, gj)] += a[(i, j)];
        }
    }
    for gi in 0..n_groups {
        for gj in 0..n_groups {
            sums[(gi, gj)] /= (sizes[gi] * sizes[gj]) as f64;
        }
        let total: f64 = sums.row(gi).iter().sum();
        if !(total > 0.0) {
            return Err(Error::Invalid(format!("pooled row {gi} has no attention mass")));
        }
        sums.row_mut(gi).iter_mut().for_each(|v| *v /= total);
    }
    Ok(sums)
}

fn check_square_attention(a: &Matrix) -> Result<()> {
    if a.rows() != a.cols() || a.is_empty() {
        return Err(Error::Invalid(format!(
            "encoder attention must be square and non-empty, got {:?}",
            a.shape()
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Pools an `N×N` attention map over consecutive blocks of `m` indices on both
/// axes, giving `(N/m)×(N/m)` with rows summing to 1.
pub fn pool_encoder_attention(a: &Matrix, m: usize) -> Result<Matrix> {
    check_square_attention(a)?;
    let n = a.rows();
    if m == 0 || n % m != 0 {
        return Err(Error::Invalid(format!(
            "{n} tokens are not divisible by merge size {m}"
        )));
    }
    let groups: Vec<usize> = (0..n).map(|i| i / m).collect();
    pool_groups(a, &groups, n / m)
}

/// Pools an attention map over a `grid_h×grid_w` patch grid (row-major tokens)
/// in `m×m` spatial windows, as done by encoders that merge neighbouring
/// patches. Output is `(grid_h/m · grid_w/m)` square.
pub fn pool_encoder_attention_grid(a: &Matrix, grid_h: usize, grid_w: usize, m: usize) -> Result<Matrix> {
    check_square_attention(a)?;
    if grid_h * grid_w != a.rows() {
        return Err(Error::Invalid(format!(
            "{grid_h}x{grid_w} grid does not match {} tokens",
            a.rows()
        )));
    }
    if m == 0 || grid_h % m != 0 || grid_w % m != 0 {
        return Err(Error::Invalid(format!(
            "{grid_h}x{grid_w} grid is not divisible by merge size {m}"
        )));
    }
    let merged_w = grid_w / m;
    let groups: Vec<usize> = (0..a.rows())
        .map(|i| (i / grid_w / m) * merged_w + (i % grid_w) / m)
        .collect();
    pool_groups(a, &groups, (grid_h / m) * merged_w)
}

pub fn encoder_attention_prior(pooled: Matrix) -> SapPrior {
    SapPrior {
        mode: SapMode::EncoderAttention,
        data: PriorData::Matrix(pooled),
        provenance: String::from("pooled encoder attention"),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorShape {
    PerPatch(usize),
    Matrix(usize),
}

/// Standard-normal scores of the requested shape.
pub fn noise_prior(shape: PriorShape, seed: u64) -> SapPrior {
    let mut g = GaussianStream::new(seed);
    let data = match shape {
        PriorShape::PerPatch(n) => PriorData::PerPatch((0..n).map(|_| g.next_standard()).collect()),
        PriorShape::Matrix(n) => PriorData::Matrix(g.matrix(n, n, 0.0, 1.0)),
    };
    SapPrior {
        mode: SapMode::Noise,
        data,
        provenance: format!("gaussian noise, seed {seed}"),
    }
}

/// Per-head score `s_h = −mean over batch and non-visual keys of the
/// last-query attention`.
///
/// Each batch item is an `h×S_t` matrix holding the last query's attention row
/// for every head. Non-visual keys are `[0, S_c)` minus the visual span.
pub fn head_scores(batch: &[Matrix], spans: &TokenSpans) -> Result<Vec<f64>> {
    spans.validate()?;
    let first = batch
        .first()
        .ok_or_else(|| Error::Invalid(String::from("empty attention batch")))?;
    let heads = first.rows();
    let s_c = spans.total();
    for item in batch {
        if item.rows() != heads {
            return Err(Error::ShapeMismatch {
                expected: (heads, item.cols()),
                found: item.shape(),
            });
        }
        if item.cols() < s_c {
            return Err(Error::Spans(format!(
                "attention rows have {} keys, spans cover {s_c}",
                item.cols()
            )));
        }
    }
    let non_visual: Vec<usize> = spans.non_visual().collect();
    if non_visual.is_empty() {
        return Err(Error::Spans(String::from("no non-visual tokens to score against")));
    }
    let denom = (batch.len() * non_visual.len()) as f64;
    Ok((0..heads)
        .map(|h| {
            let mass: CompensatedSum = batch
                .iter()
                .flat_map(|item| non_visual.iter().map(move |&i| item[(h, i)]))
                .collect();
            -mass.value() / denom
        })
        .collect())
}

/// Percentile band `[lo, hi] ⊂ [0, 1]` of a head ranking.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub lo: f64,
    pub hi: f64,
}

impl Band {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Invalid(format!(
                "band [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1"
            )));
        }
        Ok(Band { lo, hi })
    }

    pub const ALL: Band = Band { lo: 0.0, hi: 1.0 };

    /// Rank interval `[⌊lo·n⌋, ⌊hi·n⌋)`.
    pub fn rank_range(&self, n: usize) -> core::ops::Range<usize> {
        // The nudge keeps products such as 0.3·10 from flooring to 2.
        let idx = |f: f64| (libm::floor(f * n as f64 + 1e-9) as usize).min(n);
        idx(self.lo)..idx(self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSelection {
    pub scores: Vec<f64>,
    pub band: Band,
    /// Selected head indices in ascending order.
    pub selected: Vec<usize>,
}

impl HeadSelection {
    /// A selection naming heads directly, without scores.
    pub fn explicit(mut heads: Vec<usize>) -> Self {
        heads.sort_unstable();
        heads.dedup();
        HeadSelection {
            scores: Vec::new(),
            band: Band::ALL,
            selected: heads,
        }
    }

    pub fn contains(&self, head: usize) -> bool {
        self.selected.binary_search(&head).is_ok()
    }

    /// Head indices ordered by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        ranking(&self.scores)
    }
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Ranks heads by descending score and keeps ranks inside the band.
pub fn select_heads(scores: &[f64], band: Band) -> Result<HeadSelection> {
    let band = Band::new(band.lo, band.hi)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite);
    }
    let order = ranking(scores);
    let mut selected: Vec<usize> = order[band.rank_range(scores.len())].to_vec();
    selected.sort_unstable();
    Ok(HeadSelection {
        scores: scores.to_vec(),
        band,
        selected,
    })
}

/// [`apply_sap_with`] using raw injection.
pub fn apply_sap(
    scores: &[Matrix],
    prior: &SapPrior,
    selection: &HeadSelection,
    spans: &TokenSpans,
) -> Result<Vec<Matrix>> {
    apply_sap_with(scores, prior, selection, spans, Injection::Raw)
}

/// Replaces visual-key score columns of the selected heads by the prior.
///
/// Per-patch priors are broadcast across every query row. Matrix priors fill
/// the visual×visual block by (query patch, key patch); queries outside the
/// visual span receive the prior's column means, the average score each
/// visual key gets from the visual queries. Nothing outside the selected heads'
/// visual key columns changes.
pub fn apply_sap_with(
    scores: &[Matrix],
    prior: &SapPrior,
    selection: &HeadSelection,
    spans: &TokenSpans,
    injection: Injection,
) -> Result<Vec<Matrix>> {
    spans.validate()?;
    let s = scores.first().map_or(0, Matrix::rows);
    for m in scores {
        if m.shape() != (s, s) {
            return Err(Error::ShapeMismatch {
                expected: (s, s),
                found: m.shape(),
            });
        }
    }
    if spans.visual.end > s {
        return Err(Error::Spans(format!(
            "visual span {:?} exceeds the {s} score columns",
            spans.visual
        )));
    }
    if let Some(&bad) = selection.selected.iter().find(|&&h| h >= scores.len()) {
        return Err(Error::OutOfRange {
            what: "head",
            value: bad,
            range: format!("[0, {})", scores.len()),
        });
    }
    prior.check_visual_len(spans.visual_len())?;

    let v0 = spans.visual.start;
    let s_v = spans.visual_len();
    let broadcast: Vec<f64> = match &prior.data {
        PriorData::PerPatch(v) => v.iter().map(|&x| injection.apply(x)).collect(),
        PriorData::Matrix(m) => (0..s_v)
            .map(|j| injection.apply(m.column(j).iter().sum::<f64>() / s_v as f64))
            .collect(),
    };

    let mut out = scores.to_vec();
    for &h in &selection.selected {
        let head = &mut out[h];
        for t in 0..s {
            let row = &mut head.row_mut(t)[v0..v0 + s_v];
            match &prior.data {
                PriorData::Matrix(m) if spans.visual.contains(t) => {
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = injection.apply(m[(t - v0, j)]);
                    }
                }
                _ => row.copy_from_slice(&broadcast),
            }
        }
    }
    Ok(out)
}
