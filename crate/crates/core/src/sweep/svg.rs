//! Fixed-theme SVG renderings; identical inputs give identical bytes.

use std::fmt::Write as _;

use super::SweepResult;
use crate::flowsheet::params::Range;
use crate::incidence::IncidenceReport;
use crate::nlp::Status;

const CELL: usize = 28;
const FONT: &str = "font-family=\"sans-serif\"";
const OUT_OF_BOUNDS: &str = "#d00000";
const MISSING: &str = "#e0e0e0";

fn status_color(s: Status) -> &'static str {
    match s {
        Status::Optimal => "#2e7d32",
        Status::IterationLimit => "#f9a825",
        Status::ConvergedInfeasible => "#1565c0",
        Status::EvalError => "#6a1b9a",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Maximal runs `[start, end)` of consecutive indices satisfying `pred`.
fn runs(n: usize, pred: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        if pred(k) {
            let start = k;
            while k < n && pred(k) {
                k += 1;
            }
            out.push((start, k));
        } else {
            k += 1;
        }
    }
    out
}

/// One status grid per formulation: conversion left to right, pressure
/// bottom to top. Conversions outside `training` are outlined.
pub fn convergence_svg(result: &SweepResult, training: Range) -> String {
    let g = &result.grid;
    let (nr, nc) = (g.pressures.len(), g.conversions.len());
    let (left, top, gap) = (64, 48, 48);
    let panel = nc * CELL;
    let width = left + g.formulations.len() * (panel + gap);
    let legend_y = top + nr * CELL + 56;
    let height = legend_y + 40;
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">");
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    let oob = runs(nc, |ci| !training.contains(g.conversions[ci]));
    for (k, &f) in g.formulations.iter().enumerate() {
        let x0 = left + k * (panel + gap);
        let ok = result.records_for(f).filter(|r| r.status == Status::Optimal).count();
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"13\" text-anchor=\"middle\">{} ({ok}/{})</text>",
            x0 + panel / 2,
            top - 16,
            f.short_name(),
            g.instances()
        );
        for pi in 0..nr {
            let y = top + (nr - 1 - pi) * CELL;
            for ci in 0..nc {
                let fill = result.record(f, pi, ci).map_or(MISSING, |r| status_color(r.status));
                let _ = writeln!(
                    s,
                    "<rect x=\"{}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" stroke=\"white\"/>",
                    x0 + ci * CELL
                );
            }
        }
        for &(a, b) in &oob {
            let _ = writeln!(
                s,
                "<rect x=\"{}\" y=\"{top}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"{OUT_OF_BOUNDS}\" stroke-width=\"2.5\"/>",
                x0 + a * CELL,
                (b - a) * CELL,
                nr * CELL
            );
        }
        for (ci, x) in g.conversions.iter().enumerate() {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"9\" text-anchor=\"middle\">{x:.2}</text>",
                x0 + ci * CELL + CELL / 2,
                top + nr * CELL + 14
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"11\" text-anchor=\"middle\">conversion</text>",
            x0 + panel / 2,
            top + nr * CELL + 32
        );
        if k == 0 {
            for (pi, p) in g.pressures.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"9\" text-anchor=\"end\">{:.2}</text>",
                    x0 - 6,
                    top + (nr - 1 - pi) * CELL + CELL / 2 + 3,
                    p / 1e5
                );
            }
            let cy = top + nr * CELL / 2;
            let _ = writeln!(
                s,
                "<text x=\"16\" y=\"{cy}\" {FONT} font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">pressure (bar)</text>"
            );
        }
    }
    let mut x = left;
    for st in Status::ALL {
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{legend_y}\" width=\"12\" height=\"12\" fill=\"{}\"/>", status_color(st));
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"11\">{}</text>", x + 16, legend_y + 10, st.as_str());
        x += 24 + 8 * st.as_str().len();
    }
    let _ = writeln!(
        s,
        "<rect x=\"{x}\" y=\"{legend_y}\" width=\"12\" height=\"12\" fill=\"none\" stroke=\"{OUT_OF_BOUNDS}\" stroke-width=\"2\"/>"
    );
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"11\">outside surrogate training range</text>", x + 16, legend_y + 10);
    s.push_str("</svg>\n");
    s
}

/// Permuted incidence matrix with diagonal blocks shaded.
pub fn incidence_svg(r: &IncidenceReport) -> String {
    let cell = (480 / r.size.max(1)).clamp(4, 24);
    let label_w = 8 * r.row_labels.iter().chain(&r.col_labels).map(|l| l.len()).max().unwrap_or(0).min(40) + 8;
    let (left, top) = (label_w, label_w);
    let side = r.size * cell;
    let (width, height) = (left + side + 16, top + side + 16);
    let font = (cell * 3 / 4).clamp(5, 12);
    let mut s = String::new();
    let _ = writeln!(s, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">");
    let _ = writeln!(s, "<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>");
    for w in r.block_bounds.windows(2) {
        let (a, b) = (w[0], w[1]);
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"#cfe3f7\" stroke=\"#1565c0\"/>",
            left + a * cell,
            top + a * cell,
            (b - a) * cell,
            (b - a) * cell
        );
    }
    let _ = writeln!(s, "<rect x=\"{left}\" y=\"{top}\" width=\"{side}\" height=\"{side}\" fill=\"none\" stroke=\"black\"/>");
    let pad = cell / 5;
    for &(i, j) in &r.nonzeros {
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"black\"/>",
            left + j * cell + pad,
            top + i * cell + pad,
            cell - 2 * pad,
            cell - 2 * pad
        );
    }
    for (i, l) in r.row_labels.iter().enumerate() {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" {FONT} font-size=\"{font}\" text-anchor=\"end\">{}</text>",
            left - 4,
            top + i * cell + cell / 2 + font / 3,
            escape(l)
        );
    }
    for (j, l) in r.col_labels.iter().enumerate() {
        let (x, y) = (left + j * cell + cell / 2 + font / 3, top - 4);
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{y}\" {FONT} font-size=\"{font}\" transform=\"rotate(-90 {x} {y})\">{}</text>",
            escape(l)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn runs_split_on_gaps() {
        let v = [true, true, false, true, false, false, true];
        assert_eq!(runs(v.len(), |k| v[k]), vec![(0, 2), (3, 4), (6, 7)]);
        assert!(runs(3, |_| false).is_empty());
    }
}
