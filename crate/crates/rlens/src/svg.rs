// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal static SVG output. Coordinates are printed with fixed precision so
//! identical inputs give identical files.

use std::fmt::Write;

use rlens_core::graph::{InteractionGraph, KeyPatchSet};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Line plot of each series against its index (the layer).
pub fn line_plot(title: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((0.0f64, 0.0f64), |(a, b), v| (a.min(v), b.max(v)));
    if hi - lo < 1e-12 {
        hi += 0.5;
        lo -= 0.5;
    }
    let x_at = |i: usize| {
        left + if n > 1 {
            pw * i as f64 / (n - 1) as f64
        } else {
            pw / 2.0
        }
    };
    let y_at = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = y_at(v);
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    if lo < 0.0 && hi > 0.0 {
        let y = y_at(0.0);
        let _ = writeln!(
            out,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
            left + pw
        );
    }
    for i in 0..n {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{i}</text>"#,
            x_at(i),
            top + ph + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.2},{:.2}", x_at(i), y_at(v)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        for p in &points {
            let (x, y) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(out, r#"<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>"#);
        }
        let ly = top + 10.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Patch grid with key patches shaded and graph edges drawn between patch
/// centres (arrow from source to target).
pub fn graph_overlay(graph: &InteractionGraph, keys: &KeyPatchSet) -> String {
    let (rows, cols) = keys.grid;
    let cell = 40.0;
    let pad = 20.0;
    let w = pad * 2.0 + cell * cols as f64;
    let h = pad * 2.0 + cell * rows as f64 + 20.0;
    let centre = |p: usize| {
        let (r, c) = (p / cols.max(1), p % cols.max(1));
        (pad + cell * (c as f64 + 0.5), pad + cell * (r as f64 + 0.5))
    };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    out.push_str(
        "<defs><marker id=\"arrow\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\"><path d=\"M0,0 L10,5 L0,10 z\" fill=\"#1f77b4\"/></marker></defs>\n",
    );
    let _ = writeln!(out, r#"<rect width="{w:.0}" height="{h:.0}" fill="white"/>"#);
    for p in 0..rows * cols {
        let (cx, cy) = centre(p);
        let fill = if keys.contains(p) { "#ffd54f" } else { "#f4f4f4" };
        let _ = writeln!(
            out,
            r##"<rect x="{:.1}" y="{:.1}" width="{cell:.1}" height="{cell:.1}" fill="{fill}" stroke="#999"/><text x="{cx:.1}" y="{:.1}" text-anchor="middle" fill="#666">{p}</text>"##,
            cx - cell / 2.0,
            cy - cell / 2.0,
            cy + 4.0
        );
    }
    for &(j, i) in &graph.edges {
        if j >= rows * cols || i >= rows * cols {
            continue;
        }
        let (x1, y1) = centre(j);
        let (x2, y2) = centre(i);
        if j == i {
            let _ = writeln!(
                out,
                r##"<circle cx="{x1:.1}" cy="{:.1}" r="6" fill="none" stroke="#1f77b4"/>"##,
                y1 - 10.0
            );
            continue;
        }
        // stop short of the target centre so the arrowhead stays visible
        let (dx, dy) = (x2 - x1, y2 - y1);
        let len = (dx * dx + dy * dy).sqrt();
        let shrink = (cell * 0.25) / len;
        let _ = writeln!(
            out,
            r##"<line x1="{x1:.1}" y1="{y1:.1}" x2="{:.1}" y2="{:.1}" stroke="#1f77b4" stroke-opacity="0.6" marker-end="url(#arrow)"/>"##,
            x2 - dx * shrink,
            y2 - dy * shrink
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{pad:.1}" y="{:.1}">layer {} · τ = {} · {} edges</text>"#,
        h - 8.0,
        graph.layer,
        graph.tau,
        graph.edges.len()
    );
    out.push_str("</svg>\n");
    out
}
