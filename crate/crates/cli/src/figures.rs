//! Deterministic SVG bar charts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use flowlab_core::metrics::DiscrepancyReport;

const W: f64 = 480.0;
const H: f64 = 300.0;
const LEFT: f64 = 50.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const DARK: &str = "#1f4e79";
const LIGHT: &str = "#9dc3e6";

/// One evaluated run.
#[derive(Clone, Debug)]
pub struct ReportEntry {
    pub label: String,
    pub seed: u64,
    pub report: DiscrepancyReport,
}

/// Writes one class-vs-worst-subgroup chart per entry plus a MacroStd
/// comparison (methods in first-appearance order, mean over seeds).
pub fn emit_figures(entries: &[ReportEntry], dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    if entries.is_empty() {
        eprintln!("warning: no reports given, no figures written");
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for e in entries {
        let path = dir.join(format!("class_accuracy_{}_s{}.svg", e.label, e.seed));
        fs::write(&path, class_chart(e))?;
        written.push(path);
    }
    let path = dir.join("macro_std.svg");
    fs::write(&path, macro_chart(entries))?;
    written.push(path);
    Ok(written)
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="10">"##
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="white"/>"##);
    let _ = writeln!(s, r##"<text x="{:.2}" y="18" text-anchor="middle" font-size="12">{}</text>"##, W / 2.0, escape(title));
    s
}

fn axes(s: &mut String, ymax: f64, ticks: usize) {
    let (x0, y0, y1) = (LEFT, H - BOTTOM, TOP);
    let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="black"/>"##, W - RIGHT);
    let _ = writeln!(s, r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x0:.2}" y2="{y1:.2}" stroke="black"/>"##);
    for t in 0..=ticks {
        let v = ymax * t as f64 / ticks as f64;
        let y = y_of(v, ymax);
        let _ = writeln!(s, r##"<line x1="{:.2}" y1="{y:.2}" x2="{x0:.2}" y2="{y:.2}" stroke="black"/>"##, x0 - 4.0);
        let _ = writeln!(s, r##"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.2}</text>"##, x0 - 6.0, y + 3.0);
    }
}

fn y_of(v: f64, ymax: f64) -> f64 {
    let plot = H - TOP - BOTTOM;
    H - BOTTOM - plot * (v / ymax).clamp(0.0, 1.0)
}

fn bar(s: &mut String, x: f64, w: f64, v: f64, ymax: f64, fill: &str) {
    let y = y_of(v, ymax);
    let _ = writeln!(
        s,
        r##"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{:.2}" fill="{fill}"/>"##,
        H - BOTTOM - y
    );
}

fn class_chart(e: &ReportEntry) -> String {
    let mut s = header(&format!("{} (seed {}): class vs worst-subgroup accuracy", e.label, e.seed));
    axes(&mut s, 1.0, 5);
    let n = e.report.worst_subgroup.len().max(1);
    let slot = (W - LEFT - RIGHT) / n as f64;
    let bw = slot * 0.35;
    for (i, w) in e.report.worst_subgroup.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        bar(&mut s, x, bw, w.class_accuracy, 1.0, DARK);
        bar(&mut s, x + bw, bw, w.accuracy, 1.0, LIGHT);
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            x + bw,
            H - BOTTOM + 14.0,
            escape(&w.class)
        );
    }
    let y = y_of(e.report.total_accuracy, 1.0);
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#c00000" stroke-dasharray="4 3"/>"##,
        W - RIGHT
    );
    let _ = writeln!(
        s,
        r##"<text x="{:.2}" y="{:.2}" text-anchor="end" fill="#c00000">total {:.4}</text>"##,
        W - RIGHT,
        y - 3.0,
        e.report.total_accuracy
    );
    legend(&mut s, &[(DARK, "class accuracy"), (LIGHT, "worst subgroup")]);
    s.push_str("</svg>\n");
    s
}

fn macro_chart(entries: &[ReportEntry]) -> String {
    let mut order: Vec<(&str, f64, usize)> = Vec::new();
    for e in entries {
        match order.iter_mut().find(|(l, ..)| *l == e.label) {
            Some(slot) => {
                slot.1 += e.report.macro_std;
                slot.2 += 1;
            }
            None => order.push((&e.label, e.report.macro_std, 1)),
        }
    }
    let means: Vec<(&str, f64)> = order.iter().map(|&(l, sum, n)| (l, sum / n as f64)).collect();
    let peak = means.iter().map(|m| m.1).fold(0.0, f64::max);
    let ymax = if peak > 0.0 { (peak * 1.2 * 100.0).ceil() / 100.0 } else { 0.1 };
    let mut s = header("MacroStd by method (mean over seeds)");
    axes(&mut s, ymax, 4);
    let slot = (W - LEFT - RIGHT) / means.len() as f64;
    for (i, (label, v)) in means.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.2;
        bar(&mut s, x, slot * 0.6, *v, ymax, DARK);
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            x + slot * 0.3,
            H - BOTTOM + 14.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.4}</text>"##,
            x + slot * 0.3,
            y_of(*v, ymax) - 3.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn legend(s: &mut String, items: &[(&str, &str)]) {
    for (i, (fill, text)) in items.iter().enumerate() {
        let x = LEFT + 10.0 + 130.0 * i as f64;
        let y = H - 18.0;
        let _ = writeln!(s, r##"<rect x="{x:.2}" y="{:.2}" width="10" height="10" fill="{fill}"/>"##, y - 9.0);
        let _ = writeln!(s, r##"<text x="{:.2}" y="{y:.2}">{text}</text>"##, x + 14.0);
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
