use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::env::Scenario;
use crate::error::Result;
use crate::rl::Algorithm;

use super::metrics::{read_metrics, MetricsRow};
use super::run::metrics_files;

/// Per-episode mean and min/max of `meanReward` across seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn learning_curve(rows: &[&MetricsRow]) -> Vec<CurvePoint> {
    let mut by_episode: BTreeMap<usize, Vec<(u64, f64)>> = BTreeMap::new();
    for r in rows {
        by_episode.entry(r.episode).or_default().push((r.seed, r.mean_reward));
    }
    by_episode
        .into_iter()
        .map(|(episode, mut v)| {
            v.sort_by_key(|&(s, _)| s);
            let values: Vec<f64> = v.into_iter().map(|(_, r)| r).collect();
            CurvePoint {
                episode,
                mean: values.iter().sum::<f64>() / values.len() as f64,
                min: values.iter().copied().fold(f64::INFINITY, f64::min),
                max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct PlotReport {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn color(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Gcn => "#1f77b4",
        Algorithm::GsGcn => "#ff7f0e",
        Algorithm::Gat => "#2ca02c",
        Algorithm::GsGat => "#d62728",
    }
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn nice_ticks(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    (0..=count).map(|i| lo + (hi - lo) * i as f64 / count as f64).collect()
}

/// A line chart with one band and mean line per series.
pub fn render_svg(title: &str, series: &[(Algorithm, Vec<CurvePoint>)]) -> String {
    let points = series.iter().flat_map(|(_, c)| c.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p.episode as f64);
        x1 = x1.max(p.episode as f64);
        y0 = y0.min(p.min);
        y1 = y1.max(p.max);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{title}</text>"#, LEFT + pw / 2.0);
    for t in nice_ticks(y0, y1, 5) {
        let y = sy(t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{t:.2}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for t in nice_ticks(x0, x1, 5) {
        let x = sx(t);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{:.0}</text>"#,
            TOP + ph + 18.0,
            t
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">episode</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">mean reward</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0
    );
    for (i, (algo, curve)) in series.iter().enumerate() {
        let c = color(*algo);
        let upper = curve.iter().map(|p| format!("{:.2},{:.2}", sx(p.episode as f64), sy(p.max)));
        let lower = curve.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.episode as f64), sy(p.min)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#,
            band.join(" ")
        );
        let line: Vec<String> = curve
            .iter()
            .map(|p| format!("{:.2},{:.2}", sx(p.episode as f64), sy(p.mean)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
            line.join(" ")
        );
        let ly = TOP + 14.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            algo.name()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads every run's metrics under `csv_dir` and writes SVG charts into
/// `csv_dir/plots`: one per scenario with all algorithms, and one per
/// plain/GS pair present.
pub fn emit_plots(csv_dir: &Path) -> Result<PlotReport> {
    let mut report = PlotReport::default();
    let mut rows = Vec::new();
    for f in metrics_files(csv_dir)? {
        let r = read_metrics(&f)?;
        if r.is_empty() {
            report.warnings.push(format!("{}: no rows, skipped", f.display()));
        }
        rows.extend(r);
    }
    if rows.is_empty() {
        report.warnings.push(format!("{}: no metrics to plot", csv_dir.display()));
        return Ok(report);
    }
    let out = csv_dir.join("plots");
    std::fs::create_dir_all(&out)?;
    for scenario in [Scenario::Gather, Scenario::Battle] {
        let curves: Vec<(Algorithm, Vec<CurvePoint>)> = Algorithm::ALL
            .iter()
            .filter_map(|&a| {
                let subset: Vec<&MetricsRow> = rows
                    .iter()
                    .filter(|r| r.algorithm == a && r.scenario() == scenario)
                    .collect();
                (!subset.is_empty()).then(|| (a, learning_curve(&subset)))
            })
            .collect();
        if curves.is_empty() {
            continue;
        }
        let path = out.join(format!("{}.svg", scenario.name()));
        std::fs::write(&path, render_svg(&format!("{} learning curves", scenario.name()), &curves))?;
        report.files.push(path);
        for plain in [Algorithm::Gcn, Algorithm::Gat] {
            let gs = plain.counterpart();
            let pair: Vec<_> = curves
                .iter()
                .filter(|(a, _)| *a == plain || *a == gs)
                .cloned()
                .collect();
            if pair.len() != 2 {
                if pair.len() == 1 {
                    report
                        .warnings
                        .push(format!("{}: {} vs {} needs both, skipped", scenario.name(), plain, gs));
                }
                continue;
            }
            let path = out.join(format!("{}-{}-vs-{}.svg", scenario.name(), plain.name(), gs.name()));
            std::fs::write(&path, render_svg(&format!("{}: {plain} vs {gs}", scenario.name()), &pair))?;
            report.files.push(path);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, episode: usize, r: f64) -> MetricsRow {
        MetricsRow {
            algorithm: Algorithm::Gat,
            seed,
            episode,
            mean_reward: r,
            epsilon: 0.9,
            loss: None,
            live: Some(1),
            death: 0,
            kill: None,
            wall_clock_ms: 0,
        }
    }

    #[test]
    fn band_is_min_max_over_seeds() {
        let rows = [row(0, 1, 1.0), row(1, 1, 3.0), row(2, 1, 2.0), row(0, 2, 5.0)];
        let refs: Vec<&MetricsRow> = rows.iter().collect();
        let c = learning_curve(&refs);
        assert_eq!(
            c[0],
            CurvePoint {
                episode: 1,
                mean: 2.0,
                min: 1.0,
                max: 3.0
            }
        );
        assert_eq!(c[1].min, c[1].max);
        assert_eq!(c[1].mean, 5.0);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let rows = [row(0, 1, 1.0), row(0, 2, 2.0)];
        let refs: Vec<&MetricsRow> = rows.iter().collect();
        let svg = render_svg("t", &[(Algorithm::Gat, learning_curve(&refs))]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }
}
