//! Hand-written SVG: partition overlays and line charts.

use std::fmt::Write;

use partpredict::parttree::{LeafBlock, PartitionTree};
use partpredict::rdosim::{Superblock, SB_SIZE};

/// Screen pixels per superblock sample.
const ZOOM: usize = 6;
const PANEL: usize = SB_SIZE * ZOOM;
const GAP: usize = 24;
const TITLE: usize = 22;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, w: usize, h: usize, stamp: Option<&str>) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    if let Some(s) = stamp {
        let _ = writeln!(out, "<metadata>generated {}</metadata>", escape(s));
    }
}

/// The superblock in grey levels with each coded block outlined, one panel
/// per `(title, tree)`. Trees must be consistent.
pub fn tree_overlay(sb: &Superblock, panels: &[(&str, &[LeafBlock])], stamp: Option<&str>) -> String {
    let w = panels.len() * PANEL + (panels.len() + 1) * GAP;
    let h = PANEL + TITLE + 2 * GAP;
    let mut out = String::new();
    header(&mut out, w, h, stamp);
    for (k, (title, leaves)) in panels.iter().enumerate() {
        let x0 = GAP + k * (PANEL + GAP);
        let y0 = GAP + TITLE;
        let _ = writeln!(out, r#"<g transform="translate({x0},{y0})">"#);
        let _ = writeln!(out, r#"<text x="0" y="-8" font-size="14">{}</text>"#, escape(title));
        // Row-wise runs of equal samples keep flat content small.
        for y in 0..SB_SIZE {
            let mut x = 0;
            while x < SB_SIZE {
                let v = sb.at(x, y);
                let mut end = x + 1;
                while end < SB_SIZE && sb.at(end, y) == v {
                    end += 1;
                }
                let _ = writeln!(
                    out,
                    r#"<rect class="px" x="{}" y="{}" width="{}" height="{ZOOM}" fill="rgb({v},{v},{v})"/>"#,
                    x * ZOOM,
                    y * ZOOM,
                    (end - x) * ZOOM
                );
                x = end;
            }
        }
        for b in leaves.iter() {
            let _ = writeln!(
                out,
                r##"<rect class="cell" data-size="{}x{}" x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#e4572e" stroke-width="1.5"/>"##,
                b.w,
                b.h,
                b.x * ZOOM,
                b.y * ZOOM,
                b.w * ZOOM,
                b.h * ZOOM
            );
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}

pub fn leaves(tree: &PartitionTree) -> Vec<LeafBlock> {
    tree.leaf_blocks().expect("overlay trees are consistent")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#e4572e", "#2ca02c", "#9467bd", "#8c564b", "#17becf", "#bcbd22", "#7f7f7f"];

/// Up to six round-valued ticks covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 5.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 1e5 || (v != 0.0 && v.abs() < 1e-3) {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// A line chart with markers, axes and a legend.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], stamp: Option<&str>) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (70.0, 170.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let pts = series.iter().flat_map(|s| s.points.iter());
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
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 1.0, x1 + 1.0);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 1.0, y1 + 1.0);
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + ph - (y - y0) / (y1 - y0) * ph;

    let mut out = String::new();
    header(&mut out, w as usize, h as usize, stamp);
    let _ = writeln!(out, r#"<text x="{}" y="24" font-size="16" text-anchor="middle">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(out, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#333"/>"##);
    for t in ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#333"/>"##, top + ph, top + ph + 5.0);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, top + ph + 18.0, fmt_tick(t));
    }
    for t in ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(out, r##"<line x1="{}" y1="{y:.2}" x2="{left}" y2="{y:.2}" stroke="#333"/>"##, left - 5.0);
        let _ = writeln!(out, r##"<line x1="{left}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">{}</text>"#, left - 8.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="13" text-anchor="middle">{}</text>"#, left + pw / 2.0, h - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{0}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        top + ph / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let path: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 14.0;
        let _ = writeln!(out, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, lx + 24.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use partpredict::parttree::MergeCode;

    #[test]
    fn flat_block_has_one_cell() {
        let sb = Superblock::constant(90);
        let t = PartitionTree::uniform(MergeCode::FullMerge);
        let l = leaves(&t);
        let svg = tree_overlay(&sb, &[("rdo", &l)], None);
        assert_eq!(svg.matches(r#"class="cell""#).count(), 1);
        assert_eq!(svg.matches(r#"class="px""#).count(), SB_SIZE);
        assert!(!svg.contains("<metadata>"));
    }

    #[test]
    fn split_tree_outlines_every_leaf() {
        let sb = Superblock::from_fn(|x, y| (x * 3 + y) as u8);
        let t = PartitionTree::uniform(MergeCode::NoMerge);
        let l = leaves(&t);
        let svg = tree_overlay(&sb, &[("a", &l), ("b", &l)], Some("now"));
        assert_eq!(svg.matches(r#"class="cell""#).count(), 2 * 256);
        assert!(svg.contains("<metadata>generated now</metadata>"));
    }

    #[test]
    fn ticks_are_round_and_cover_range() {
        assert_eq!(ticks(0.0, 10.0), vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        let t = ticks(13.0, 101.0);
        assert!(t.first().unwrap() >= &13.0 && t.last().unwrap() <= &101.0);
        assert!(t.len() >= 3);
    }

    #[test]
    fn chart_draws_each_series() {
        let s = vec![
            Series { name: "a<b".into(), points: vec![(0.0, 1.0), (1.0, 2.0)] },
            Series { name: "c".into(), points: vec![(0.5, 1.5)] },
        ];
        let svg = line_chart("t", "x", "y", &s, None);
        assert_eq!(svg.matches(r#"class="series""#).count(), 2);
        assert!(svg.contains("a&lt;b"));
        // Degenerate input still renders.
        let one = line_chart("t", "x", "y", &[Series { name: "p".into(), points: vec![(2.0, 2.0)] }], None);
        assert!(one.ends_with("</svg>\n"));
    }
}
