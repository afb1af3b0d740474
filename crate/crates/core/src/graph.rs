// SPDX-License-Identifier: MIT OR Apache-2.0

//! Visual interaction graphs from decoder attention.
//!
//! The head-averaged attention is restricted to the visual block `A_vv`, and a
//! directed edge `j → i` is recorded whenever patch `i` attends to patch `j`
//! with weight at least `τ`. The key-region degree ratio `ρ` is the fraction of
//! edges with an endpoint in a set of question-relevant patches.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::trace::TokenSpans;

pub const DEFAULT_TAU: f64 = 0.1;

/// Entrywise mean over heads.
pub fn head_average(attn: &[Matrix]) -> Result<Matrix> {
    let first = attn.first().ok_or(Error::Empty)?;
    let mut sum = Matrix::zeros(first.rows(), first.cols());
    for a in attn {
        first.ensure_same_shape(a)?;
        sum = sum.add(a);
    }
    Ok(sum.scale(1.0 / attn.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub n_patches: usize,
    /// `(from, to)` pairs: `(j, i)` means patch `i` attends to patch `j`.
    pub edges: BTreeSet<(usize, usize)>,
    pub tau: f64,
    pub layer: usize,
}

impl InteractionGraph {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

/// Thresholds the visual block of `a_avg` (self-edges excluded).
pub fn build_graph(a_avg: &Matrix, spans: &TokenSpans, tau: f64, layer: usize) -> Result<InteractionGraph> {
    build_graph_with(a_avg, spans, tau, layer, false)
}

pub fn build_graph_with(
    a_avg: &Matrix,
    spans: &TokenSpans,
    tau: f64,
    layer: usize,
    include_self: bool,
) -> Result<InteractionGraph> {
    spans.validate()?;
    if tau.is_nan() {
        return Err(Error::NonFinite);
    }
    let (rows, cols) = a_avg.shape();
    let v = spans.visual;
    if v.is_empty() {
        return Err(Error::Spans(String::from("visual span is empty")));
    }
    if v.end > rows || v.end > cols {
        return Err(Error::Spans(format!(
            "visual span {:?} exceeds the {rows}x{cols} attention matrix",
            v
        )));
    }
    let mut edges = BTreeSet::new();
    for i in 0..v.len() {
        for j in 0..v.len() {
            if (i != j || include_self) && a_avg[(v.start + i, v.start + j)] >= tau {
                edges.insert((j, i));
            }
        }
    }
    Ok(InteractionGraph {
        n_patches: v.len(),
        edges,
        tau,
        layer,
    })
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelBox {
    /// From a COCO-style `[x, y, width, height]` box.
    pub fn from_xywh([x, y, w, h]: [f64; 4]) -> Self {
        PixelBox {
            x0: x,
            y0: y,
            x1: x + w,
            y1: y + h,
        }
    }

    fn clip(&self, width: f64, height: f64) -> PixelBox {
        PixelBox {
            x0: self.x0.clamp(0.0, width),
            y0: self.y0.clamp(0.0, height),
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
        }
    }

    fn overlaps(&self, other: &PixelBox) -> bool {
        self.x0.max(other.x0) < self.x1.min(other.x1) && self.y0.max(other.y0) < self.y1.min(other.y1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyPatchSet {
    pub patches: BTreeSet<usize>,
    /// `(t_h, t_w)` patch rows and columns.
    pub grid: (usize, usize),
    pub source_boxes: Vec<PixelBox>,
}

impl KeyPatchSet {
    pub fn contains(&self, patch: usize) -> bool {
        self.patches.contains(&patch)
    }
}

/// Patches (row-major over a `⌊H/p_h⌋ × ⌊W/p_w⌋` grid) whose pixel rectangle
/// overlaps any box with positive area. Boxes are clipped to the image.
pub fn key_patch_set(
    boxes: &[PixelBox],
    (image_h, image_w): (usize, usize),
    (patch_h, patch_w): (usize, usize),
) -> Result<KeyPatchSet> {
    if patch_h == 0 || patch_w == 0 {
        return Err(Error::Invalid(String::from("patch dimensions must be positive")));
    }
    if boxes
        .iter()
        .any(|b| [b.x0, b.y0, b.x1, b.y1].iter().any(|v| v.is_nan()))
    {
        return Err(Error::NonFinite);
    }
    let grid = (image_h / patch_h, image_w / patch_w);
    let clipped: Vec<PixelBox> = boxes.iter().map(|b| b.clip(image_w as f64, image_h as f64)).collect();
    let mut patches = BTreeSet::new();
    for r in 0..grid.0 {
        for c in 0..grid.1 {
            let cell = PixelBox {
                x0: (c * patch_w) as f64,
                y0: (r * patch_h) as f64,
                x1: ((c + 1) * patch_w) as f64,
                y1: ((r + 1) * patch_h) as f64,
            };
            if clipped.iter().any(|b| b.overlaps(&cell)) {
                patches.insert(r * grid.1 + c);
            }
        }
    }
    Ok(KeyPatchSet {
        patches,
        grid,
        source_boxes: boxes.to_vec(),
    })
}

/// Fraction of edges with either endpoint in `k`; 0 for an empty graph.
pub fn key_region_degree_ratio(graph: &InteractionGraph, k: &KeyPatchSet) -> f64 {
    if graph.edges.is_empty() {
        return 0.0;
    }
    let touching = graph
        .edges
        .iter()
        .filter(|(j, i)| k.contains(*i) || k.contains(*j))
        .count();
    touching as f64 / graph.edges.len() as f64
}
