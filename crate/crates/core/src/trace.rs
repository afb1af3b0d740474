// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream traces: per-layer hidden states, attention maps and the
//! token layout of the sequence they came from.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Maximum tolerated `‖x_in[l+1] − x_ffn[l]‖_F / max(1, ‖x_ffn[l]‖_F)`.
pub const CONTINUITY_TOL: f64 = 1e-4;
/// Maximum tolerated deviation of an attention row sum from 1.
pub const ATTENTION_ROW_TOL: f64 = 1e-5;

/// Half-open index range `[start, end)`, serialised as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub const fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<[usize; 2]> for Span {
    fn from([start, end]: [usize; 2]) -> Self {
        Span { start, end }
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

/// System, visual and question segments of a multimodal prompt; together
/// they tile `[0, S_c)` in that order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpans {
    pub system: Span,
    pub visual: Span,
    pub question: Span,
}

impl TokenSpans {
    /// Consecutive segments of the given lengths starting at 0.
    pub fn from_lengths(system: usize, visual: usize, question: usize) -> Self {
        TokenSpans {
            system: Span::new(0, system),
            visual: Span::new(system, system + visual),
            question: Span::new(system + visual, system + visual + question),
        }
    }

    /// `S_c`, the covered prompt length.
    pub fn total(&self) -> usize {
        self.question.end
    }

    pub fn visual_len(&self) -> usize {
        self.visual.len()
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = self.system.start == 0
            && self.system.start <= self.system.end
            && self.system.end == self.visual.start
            && self.visual.start <= self.visual.end
            && self.visual.end == self.question.start
            && self.question.start <= self.question.end;
        if !ordered {
            return Err(Error::Spans(format!(
                "segments must tile [0, S_c) as system < visual < question, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Validates and additionally requires `S_c == seq_len`.
    pub fn validate_for(&self, seq_len: usize) -> Result<()> {
        self.validate()?;
        if self.total() != seq_len {
            return Err(Error::Spans(format!(
                "spans cover {} tokens but the sequence has {seq_len}",
                self.total()
            )));
        }
        Ok(())
    }

    /// Indices in `[0, S_c)` outside the visual span.
    pub fn non_visual(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.total()).filter(move |&i| !self.visual.contains(i))
    }
}

/// The three residual checkpoints of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates {
    pub x_in: Matrix,
    pub x_attn: Matrix,
    pub x_ffn: Matrix,
    /// Post-softmax weights, one `S×S` matrix per head.
    pub attn: Option<Vec<Matrix>>,
}

impl LayerStates {
    pub fn delta_attn(&self) -> Matrix {
        self.x_attn.sub(&self.x_in)
    }

    pub fn delta_ffn(&self) -> Matrix {
        self.x_ffn.sub(&self.x_attn)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layers: Vec<LayerStates>,
    pub spans: TokenSpans,
    pub rope_enabled: bool,
    pub meta: BTreeMap<String, String>,
}

impl LayerTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(S, H)` of the hidden states.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.layers.first().map(|l| l.x_in.shape())
    }

    pub fn has_attention(&self) -> bool {
        !self.layers.is_empty() && self.layers.iter().all(|l| l.attn.is_some())
    }

    /// Checks shapes, spans, residual continuity and attention row sums.
    pub fn validate(&self) -> Result<()> {
        let (s, h) = self
            .shape()
            .ok_or_else(|| Error::Trace(String::from("trace has no layers")))?;
        if s == 0 || h == 0 {
            return Err(Error::Trace(format!("empty hidden states {s}x{h}")));
        }
        self.spans.validate_for(s)?;
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("x_in", &layer.x_in),
                ("x_attn", &layer.x_attn),
                ("x_ffn", &layer.x_ffn),
            ] {
                if m.shape() != (s, h) {
                    return Err(Error::Trace(format!(
                        "layer {l} {name} is {:?}, expected {:?}",
                        m.shape(),
                        (s, h)
                    )));
                }
                if !m.is_finite() {
                    return Err(Error::NonFinite);
                }
            }
            if let Some(heads) = &layer.attn {
                validate_attention(l, heads, s)?;
            }
        }
        for (l, pair) in self.layers.windows(2).enumerate() {
            let rel_err = continuity_error(&pair[0].x_ffn, &pair[1].x_in);
            if !(rel_err <= CONTINUITY_TOL) {
                return Err(Error::Continuity {
                    layer: l,
                    next: l + 1,
                    rel_err,
                });
            }
        }
        Ok(())
    }
}

/// `‖next_in − prev_ffn‖_F / max(1, ‖prev_ffn‖_F)`.
pub fn continuity_error(prev_ffn: &Matrix, next_in: &Matrix) -> f64 {
    next_in.sub(prev_ffn).frobenius_norm() / prev_ffn.frobenius_norm().max(1.0)
}

fn validate_attention(layer: usize, heads: &[Matrix], s: usize) -> Result<()> {
    if heads.is_empty() {
        return Err(Error::Trace(format!("layer {layer} attention has no heads")));
    }
    for (h, a) in heads.iter().enumerate() {
        if a.shape() != (s, s) {
            return Err(Error::Trace(format!(
                "layer {layer} head {h} attention is {:?}, expected {:?}",
                a.shape(),
                (s, s)
            )));
        }
        for (t, row) in a.row_iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
                return Err(Error::Trace(format!(
                    "layer {layer} head {h} row {t} has a negative or non-finite weight"
                )));
            }
            let sum: f64 = row.iter().sum();
            if libm::fabs(sum - 1.0) > ATTENTION_ROW_TOL {
                return Err(Error::Trace(format!("layer {layer} head {h} row {t} sums to {sum}")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_trace() -> LayerTrace {
        let x0 = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]);
        let x1 = x0.scale(2.0);
        let x2 = x0.scale(3.0);
        let attn = vec![Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])];
        LayerTrace {
            layers: vec![
                LayerStates {
                    x_in: x0.clone(),
                    x_attn: x1.clone(),
                    x_ffn: x2.clone(),
                    attn: Some(attn.clone()),
                },
                LayerStates {
                    x_in: x2.clone(),
                    x_attn: x2.clone(),
                    x_ffn: x2.clone(),
                    attn: Some(attn),
                },
            ],
            spans: TokenSpans::from_lengths(1, 1, 1),
            rope_enabled: false,
            meta: BTreeMap::new(),
        }
    }

    #[test]
    fn valid_trace_passes() {
        tiny_trace().validate().unwrap();
    }

    #[test]
    fn broken_continuity_is_reported() {
        let mut t = tiny_trace();
        t.layers[1].x_in[(0, 0)] += 1.0;
        assert!(matches!(t.validate(), Err(Error::Continuity { layer: 0, next: 1, .. })));
    }

    #[test]
    fn bad_row_sum_is_reported() {
        let mut t = tiny_trace();
        t.layers[0].attn.as_mut().unwrap()[0][(2, 2)] = 0.6;
        assert!(matches!(t.validate(), Err(Error::Trace(_))));
    }

    #[test]
    fn spans_must_cover_sequence() {
        let mut t = tiny_trace();
        t.spans = TokenSpans::from_lengths(1, 1, 2);
        assert!(matches!(t.validate(), Err(Error::Spans(_))));
        let gap = TokenSpans {
            system: Span::new(0, 1),
            visual: Span::new(2, 3),
            question: Span::new(3, 3),
        };
        assert!(gap.validate().is_err());
    }

    #[test]
    fn non_visual_indices() {
        let s = TokenSpans::from_lengths(1, 2, 1);
        assert_eq!(s.non_visual().collect::<Vec<_>>(), vec![0, 3]);
    }
}
