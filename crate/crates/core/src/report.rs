//! Plain SVG charts and CSV tables for training curves, angle histograms and
//! SRS scatter plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::pairing::SrsReport;
use crate::trainer::StepRecord;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Means of consecutive non-overlapping windows; a trailing partial window
/// is dropped.
pub fn block_means(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    series
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

/// Trailing moving average; entry `i` averages `series[i+1-w..=i]`, using
/// the available prefix for the first `w - 1` entries.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (i, &v) in series.iter().enumerate() {
        acc += v;
        if i >= w {
            acc -= series[i - w];
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

/// Fraction of consecutive entries that do not decrease.
pub fn nondecreasing_fraction(series: &[f64]) -> f64 {
    if series.len() < 2 {
        return 1.0;
    }
    let ok = series.windows(2).filter(|w| w[1] >= w[0]).count();
    ok as f64 / (series.len() - 1) as f64
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(x0: f64, x1: f64, mut y0: f64, mut y1: f64) -> Frame {
        if !(y1 > y0) {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open_svg(title: &str, frame: &Frame, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (l, r, t, b) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{l} {t} L{l} {b} L{r} {b}" stroke="black" fill="none"/>"#
    );
    for (v, anchor) in [(frame.y0, "end"), (frame.y1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="{anchor}">{:.4}</text>"#,
            l - 4.0,
            frame.py(v) + 4.0,
            v
        );
    }
    for v in [frame.x0, frame.x1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            frame.px(v),
            b + 14.0,
            v
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let x = WIDTH - MARGIN - 130.0;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{c}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 14.0, escape(name));
    }
}

/// Line chart of several series sharing an x axis of sample indices.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(&str, &[f64])]) -> String {
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let finite = series.iter().flat_map(|(_, v)| v.iter().copied()).filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let frame = Frame::new(0.0, len.saturating_sub(1) as f64, lo, hi);
    let mut s = open_svg(title, &frame, x_label, y_label);
    for (i, (_, values)) in series.iter().enumerate() {
        let mut d = String::new();
        for (k, &v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            let _ = write!(
                d,
                "{}{:.2} {:.2} ",
                if d.is_empty() { "M" } else { "L" },
                frame.px(k as f64),
                frame.py(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<path d="{}" stroke="{}" stroke-width="1.5" fill="none"/>"#,
            d.trim_end(),
            COLORS[i % COLORS.len()]
        );
    }
    legend(&mut s, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Overlaid bar histograms over [0, 180] degrees.
pub fn angle_histogram_chart(title: &str, pos: &[usize], neg: &[usize]) -> String {
    let bins = pos.len().max(neg.len()).max(1);
    let total = |h: &[usize]| h.iter().sum::<usize>().max(1) as f64;
    let (tp, tn) = (total(pos), total(neg));
    let hi = pos
        .iter()
        .map(|&c| c as f64 / tp)
        .chain(neg.iter().map(|&c| c as f64 / tn))
        .fold(0.0, f64::max);
    let frame = Frame::new(0.0, 180.0, 0.0, hi.max(1e-9));
    let mut s = open_svg(title, &frame, "angle (degrees)", "fraction of pairs");
    let bw = 180.0 / bins as f64;
    for (k, (h, t)) in [(pos, tp), (neg, tn)].into_iter().enumerate() {
        for (b, &c) in h.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let f = c as f64 / t;
            let (x, y) = (frame.px(b as f64 * bw), frame.py(f));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{:.2}" fill="{}" fill-opacity="0.6"/>"#,
                frame.px((b + 1) as f64 * bw) - x,
                frame.py(0.0) - y,
                COLORS[k]
            );
        }
    }
    legend(&mut s, &["positive pairs", "negative pairs"]);
    s.push_str("</svg>\n");
    s
}

/// Key-negative similarity per anchor; mirrored selections drawn in red.
pub fn srs_chart(title: &str, report: &SrsReport) -> String {
    let sims: Vec<f64> = report.selections.iter().map(|k| k.similarity).collect();
    let lo = sims.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let max_anchor = report.selections.iter().map(|k| k.anchor).max().unwrap_or(1);
    let frame = Frame::new(0.0, max_anchor as f64, lo, hi);
    let mut s = open_svg(title, &frame, "anchor feature", "key negative similarity");
    for k in &report.selections {
        let c = if k.mirrored { COLORS[1] } else { COLORS[0] };
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
            frame.px(k.anchor as f64),
            frame.py(k.similarity)
        );
    }
    legend(&mut s, &["single selection", "mirrored selection"]);
    s.push_str("</svg>\n");
    s
}

#[derive(Serialize)]
struct SrsRow<'a> {
    anchor_index: usize,
    key_negative_index: usize,
    channel_pair: &'a str,
    mirrored: bool,
    similarity: f64,
}

pub fn write_srs_csv(path: impl AsRef<Path>, report: &SrsReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(crate::trainer::csv_err)?;
    for k in &report.selections {
        let channels = k.channel_pair(report.images);
        w.serialize(SrsRow {
            anchor_index: k.anchor,
            key_negative_index: k.key_negative,
            channel_pair: &channels,
            mirrored: k.mirrored,
            similarity: k.similarity,
        })
        .map_err(crate::trainer::csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_histogram_csv(path: impl AsRef<Path>, hist: &[usize]) -> Result<()> {
    let bw = 180.0 / hist.len().max(1) as f64;
    let mut s = String::from("bin,angle_lo,angle_hi,count\n");
    for (b, c) in hist.iter().enumerate() {
        let _ = writeln!(s, "{b},{},{},{c}", b as f64 * bw, (b + 1) as f64 * bw);
    }
    fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub step: u64,
    pub classification: f64,
    pub contrastive: f64,
    pub total: f64,
    pub m_c: f64,
    pub contrastive_smooth: f64,
    pub m_c_smooth: f64,
}

/// Raw and smoothed curves from a training log.
pub fn curves(steps: &[StepRecord], window: usize) -> Vec<CurveRow> {
    let con: Vec<f64> = steps.iter().map(|s| s.contrastive).collect();
    let mc: Vec<f64> = steps.iter().map(|s| s.m_c).collect();
    let (cs, ms) = (moving_average(&con, window), moving_average(&mc, window));
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| CurveRow {
            step: s.step,
            classification: s.classification,
            contrastive: s.contrastive,
            total: s.total,
            m_c: s.m_c,
            contrastive_smooth: cs[i],
            m_c_smooth: ms[i],
        })
        .collect()
}

/// `curves.csv` and `curves.svg` for a training log directory.
pub fn write_curves(dir: impl AsRef<Path>, out: impl AsRef<Path>, window: usize) -> Result<Vec<CurveRow>> {
    let steps = crate::trainer::TrainLog::read_steps(dir.as_ref().join("trainlog.csv"))?;
    let rows = curves(&steps, window);
    let out = out.as_ref();
    let mut w = csv::Writer::from_path(out.join("curves.csv")).map_err(crate::trainer::csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(crate::trainer::csv_err)?;
    }
    w.flush()?;
    let col = |f: fn(&CurveRow) -> f64| rows.iter().map(f).collect::<Vec<f64>>();
    let (cla, con, mc) = (col(|r| r.classification), col(|r| r.contrastive_smooth), col(|r| r.m_c_smooth));
    let loss_svg = line_chart(
        "training losses",
        "step",
        "loss",
        &[("classification", &cla), ("contrastive (smoothed)", &con)],
    );
    let margin_svg = line_chart("adaptive margin", "step", "m_C", &[("m_C (smoothed)", &mc)]);
    fs::write(out.join("curves.svg"), loss_svg)?;
    fs::write(out.join("margin.svg"), margin_svg)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing() {
        let s: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(block_means(&s, 5), vec![2.0, 7.0]);
        assert_eq!(block_means(&s, 4), vec![1.5, 5.5]);
        let m = moving_average(&s, 3);
        assert_eq!(m[0], 0.0);
        assert_eq!(m[1], 0.5);
        assert_eq!(m[5], 4.0);
        assert_eq!(nondecreasing_fraction(&[1.0, 2.0, 1.5, 3.0]), 2.0 / 3.0);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let a = [1.0, 2.0, 3.0];
        let svg = line_chart("t<1>", "x", "y", &[("a&b", &a)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("t&lt;1&gt;"));
        assert!(svg.contains("a&amp;b"));
        let h = angle_histogram_chart("h", &[1, 0, 2], &[0, 3, 0]);
        assert_eq!(h.matches("<rect").count(), 1 + 3 + 2);
    }
}
