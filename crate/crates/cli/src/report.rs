//! Plain SVG line charts and Markdown tables for the `report` command.

use std::collections::BTreeMap;
use std::fmt::Write;

use crate::CliError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#7f7f7f", "#9467bd"];

/// Series name -> `(x, y)` points, parsed from a `direction,fraction,accuracy` table.
pub type Series = BTreeMap<String, Vec<(f64, f64)>>;

pub fn parse_curves(text: &str) -> Result<Series, CliError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == "direction,fraction,accuracy" => {}
        _ => return Err(CliError::input("curve table must start with `direction,fraction,accuracy`")),
    }
    let mut out = Series::new();
    for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || CliError::input(format!("curve table line {}: `{line}`", i + 2));
        if f.len() != 3 {
            return Err(bad());
        }
        let x: f64 = f[1].parse().map_err(|_| bad())?;
        let y: f64 = f[2].parse().map_err(|_| bad())?;
        out.entry(f[0].to_string()).or_default().push((x, y));
    }
    if out.is_empty() {
        return Err(CliError::input("curve table has no rows"));
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    (0..=4).map(|i| lo + (hi - lo) * i as f64 / 4.0).collect()
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &Series) -> String {
    let pts = series.values().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(s, r#"<path d="M{left} {top} V{bottom} H{right}" fill="none" stroke="black"/>"#);
    for t in ticks(x0, x1) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{t:.2}</text>"#, sx(t), bottom + 16.0);
    }
    for t in ticks(y0, y1) {
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{t:.3}</text>"#, left - 6.0, sy(t) + 4.0);
        let _ = writeln!(s, r##"<line x1="{left}" x2="{right}" y1="{0:.2}" y2="{0:.2}" stroke="#e0e0e0"/>"##, sy(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(s, r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#, HEIGHT / 2.0, escape(y_label));
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = points.iter().enumerate().map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, d.join(" "));
        let ly = top + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, right - 130.0, right - 110.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, right - 104.0, ly + 4.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Renders a delimited table as a Markdown table.
pub fn markdown_table(text: &str) -> Result<String, CliError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines.next().ok_or_else(|| CliError::input("empty table"))?.split(',').collect();
    let mut s = format!("| {} |\n|{}\n", header.join(" | "), " --- |".repeat(header.len()));
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != header.len() {
            return Err(CliError::input(format!("row `{line}` has {} fields, header has {}", cells.len(), header.len())));
        }
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    Ok(s)
}
