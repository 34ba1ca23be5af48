//! Trajectory CSV reader and a dual-axis SVG chart: log-loss lines on the
//! left axis, ε-rank scatter on the right.

use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub label: String,
    pub iterations: Vec<f64>,
    pub losses: Vec<f64>,
    pub ranks: Vec<f64>,
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_trajectory(&text, &label).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn parse_trajectory(text: &str, label: &str) -> Result<Trajectory, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| format!("row 1: {e}"))?.clone();
    if header.len() < 3 || &header[0] != "iteration" || &header[1] != "loss" || &header[2] != "eps_rank" {
        return Err("row 1: header must start with iteration,loss,eps_rank".into());
    }
    let mut t = Trajectory {
        label: label.to_string(),
        iterations: vec![],
        losses: vec![],
        ranks: vec![],
    };
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| format!("row {row}: {e}"))?;
        let it: usize = rec[0].trim().parse().map_err(|_| format!("row {row}: bad iteration '{}'", &rec[0]))?;
        let loss: f64 = rec[1].trim().parse().map_err(|_| format!("row {row}: bad loss '{}'", &rec[1]))?;
        let rank: usize = rec[2].trim().parse().map_err(|_| format!("row {row}: bad eps_rank '{}'", &rec[2]))?;
        if !loss.is_finite() || loss < 0.0 {
            return Err(format!("row {row}: loss must be finite and >= 0"));
        }
        if t.iterations.last().is_some_and(|&prev| it as f64 <= prev) {
            return Err(format!("row {row}: iteration {it} is not increasing"));
        }
        t.iterations.push(it as f64);
        t.losses.push(loss);
        t.ranks.push(rank as f64);
    }
    if t.iterations.is_empty() {
        return Err("no records after the header".into());
    }
    Ok(t)
}

const PALETTE: &[&str] = &["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 650.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 360.0;

fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10()).ceil() as usize };
    format!("{v:.decimals$}")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Deterministic SVG for a set of trajectories.
pub fn render_svg(series: &[Trajectory], title: &str) -> String {
    let max_it = series
        .iter()
        .flat_map(|s| s.iterations.iter().copied())
        .fold(0.0, f64::max)
        .max(1.0);
    let floor_loss = series
        .iter()
        .flat_map(|s| s.losses.iter().copied())
        .filter(|&l| l > 0.0)
        .fold(f64::INFINITY, f64::min);
    let floor_loss = if floor_loss.is_finite() { floor_loss } else { 1e-16 };
    let logs: Vec<Vec<f64>> = series
        .iter()
        .map(|s| s.losses.iter().map(|&l| l.max(floor_loss).log10()).collect())
        .collect();
    let lo = logs.iter().flatten().copied().fold(f64::INFINITY, f64::min).floor();
    let mut hi = logs.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max).ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let max_rank = series.iter().flat_map(|s| s.ranks.iter().copied()).fold(0.0, f64::max);
    let rank_step = nice_step(max_rank.max(1.0), 5);
    let rank_top = ((max_rank / rank_step).ceil() * rank_step).max(rank_step);

    let px = |it: f64| LEFT + (RIGHT - LEFT) * it / max_it;
    let py_log = |lg: f64| BOTTOM - (BOTTOM - TOP) * (lg - lo) / (hi - lo);
    let py_rank = |r: f64| BOTTOM - (BOTTOM - TOP) * r / rank_top;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, esc(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#,
        RIGHT - LEFT,
        BOTTOM - TOP
    );

    // x ticks
    let xs = nice_step(max_it, 5);
    for t in (0..).map(|k| k as f64 * xs).take_while(|t| *t <= max_it + 1e-9) {
        let x = px(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{BOTTOM}" x2="{x:.2}" y2="{:.1}" stroke="black"/>"#, BOTTOM + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.1}" text-anchor="middle">{}</text>"#, BOTTOM + 18.0, tick_label(t, xs));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration</text>"#, (LEFT + RIGHT) / 2.0, BOTTOM + 36.0);

    // left decades
    let mut k = lo;
    while k <= hi + 1e-9 {
        let y = py_log(k);
        let _ = writeln!(s, r#"<line x1="{:.1}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/>"#, LEFT - 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">1e{}</text>"#, LEFT - 8.0, y + 4.0, k as i64);
        k += 1.0;
    }
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.1}" text-anchor="middle" transform="rotate(-90 18 {:.1})">loss</text>"#,
        (TOP + BOTTOM) / 2.0,
        (TOP + BOTTOM) / 2.0
    );

    // right rank ticks
    for r in (0..).map(|k| k as f64 * rank_step).take_while(|r| *r <= rank_top + 1e-9) {
        let y = py_rank(r);
        let _ = writeln!(s, r#"<line x1="{RIGHT}" y1="{y:.2}" x2="{:.1}" y2="{y:.2}" stroke="black"/>"#, RIGHT + 5.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.2}">{}</text>"#, RIGHT + 8.0, y + 4.0, tick_label(r, rank_step));
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" transform="rotate(90 {:.1} {:.1})">ε-rank</text>"#,
        W - 14.0,
        (TOP + BOTTOM) / 2.0,
        W - 14.0,
        (TOP + BOTTOM) / 2.0
    );

    for (i, (ser, lg)) in series.iter().zip(&logs).enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .iterations
            .iter()
            .zip(lg)
            .map(|(&it, &l)| format!("{:.2},{:.2}", px(it), py_log(l)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        for (&it, &rk) in ser.iterations.iter().zip(&ser.ranks) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="none" stroke="{color}"/>"#,
                px(it),
                py_rank(rk)
            );
        }
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            RIGHT - 150.0,
            RIGHT - 130.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, RIGHT - 125.0, ly + 4.0, esc(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}
