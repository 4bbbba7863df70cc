use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Segment;

use super::trace::AttentionTrace;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// One JSONL record of a trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub schema_version: u32,
    pub sample: usize,
    pub query_position: usize,
    pub layer: usize,
    pub head: usize,
    pub key_positions: Vec<usize>,
    pub segments: Vec<Segment>,
    pub weights: Vec<f32>,
}

/// One line per `(sample, layer, head)`.
pub fn traces_to_jsonl(traces: &[AttentionTrace]) -> String {
    let mut out = String::new();
    for (sample, t) in traces.iter().enumerate() {
        for (layer, lt) in t.layers.iter().enumerate() {
            for (head, row) in lt.heads.iter().enumerate() {
                let rec = TraceRow {
                    schema_version: TRACE_SCHEMA_VERSION,
                    sample,
                    query_position: t.query_position,
                    layer,
                    head,
                    key_positions: lt.key_positions.clone(),
                    segments: lt.key_segments.clone(),
                    weights: row.clone(),
                };
                out.push_str(&serde_json::to_string(&rec).expect("trace rows serialize"));
                out.push('\n');
            }
        }
    }
    out
}

pub fn trace_rows_from_jsonl(text: &str) -> Result<Vec<TraceRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: TraceRow =
                serde_json::from_str(l).map_err(|e| Error::Format(format!("trace line {}: {e}", i + 1)))?;
            if row.schema_version != TRACE_SCHEMA_VERSION {
                return Err(Error::Format(format!(
                    "trace schema_version {} is not supported",
                    row.schema_version
                )));
            }
            Ok(row)
        })
        .collect()
}

/// Header plus one line per row; values use shortest round-trip formatting.
pub fn csv_table<T: std::fmt::Display>(header: &[&str], rows: &[Vec<T>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grayscale-to-blue heatmap; `values[r][c]` is scaled against the
/// matrix maximum (or `vmax` when given).
pub fn svg_heatmap(title: &str, row_label: &str, col_label: &str, values: &[Vec<f64>], vmax: Option<f64>) -> String {
    let rows = values.len();
    let cols = values.first().map_or(0, Vec::len);
    let cell = 18.0;
    let (left, top) = (60.0, 40.0);
    let width = left + cols as f64 * cell + 20.0;
    let height = top + rows as f64 * cell + 40.0;
    let max = vmax.unwrap_or_else(|| values.iter().flatten().copied().fold(0.0, f64::max));
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"10\">\n"
    );
    s.push_str(&format!("<text x=\"{left}\" y=\"16\" font-size=\"12\">{}</text>\n", escape(title)));
    for (r, row) in values.iter().enumerate() {
        let y = top + r as f64 * cell;
        s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{r}</text>\n", left - 4.0, y + 12.0));
        for (c, &v) in row.iter().enumerate() {
            let t = if max > 0.0 { (v / max).clamp(0.0, 1.0) } else { 0.0 };
            let shade = (255.0 * (1.0 - t)).round() as u8;
            s.push_str(&format!(
                "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"><title>{r},{c}: {v:.4}</title></rect>\n",
                left + c as f64 * cell
            ));
        }
    }
    let bottom = top + rows as f64 * cell;
    s.push_str(&format!("<text x=\"{left}\" y=\"{}\">{} →</text>\n", bottom + 24.0, escape(col_label)));
    s.push_str(&format!(
        "<text x=\"12\" y=\"{top}\" transform=\"rotate(90 12 {top})\">{} →</text>\n",
        escape(row_label)
    ));
    s.push_str("</svg>\n");
    s
}

/// Polyline chart of one or more `(x, y)` series.
pub fn svg_lines(title: &str, x_label: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (480.0, 320.0, 50.0);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"10\">\n"
    );
    s.push_str(&format!("<text x=\"{pad}\" y=\"20\" font-size=\"12\">{}</text>\n", escape(title)));
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/><line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad
    ));
    s.push_str(&format!("<text x=\"{pad}\" y=\"{}\">{} [{x0:.3}, {x1:.3}]</text>\n", h - 15.0, escape(x_label)));
    s.push_str(&format!("<text x=\"4\" y=\"{}\">{} [{y0:.3}, {y1:.3}]</text>\n", pad - 10.0, escape(y_label)));
    for (i, (name, p)) in series.iter().enumerate() {
        let c = colors[i % colors.len()];
        let coords: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        s.push_str(&format!("<polyline fill=\"none\" stroke=\"{c}\" points=\"{}\"/>\n", coords.join(" ")));
        for &(x, y) in p {
            s.push_str(&format!("<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{c}\"/>\n", sx(x), sy(y)));
        }
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{}</text>\n",
            w - pad - 80.0,
            pad + 14.0 * i as f64,
            escape(name)
        ));
    }
    s.push_str("</svg>\n");
    s
}
