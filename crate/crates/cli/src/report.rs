//! Merged comparison tables and recall-vs-round charts from metrics.csv
//! files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use walkdir::WalkDir;

use cvgl_core::federation::{
    read_csv, write_csv, MetricsRow, Scenario, METRICS_FILE, METRICS_HEADERS,
};

pub const MERGED_FILE: &str = "merged_metrics.csv";
pub const TABLE_FILE: &str = "report.md";

/// Every `metrics.csv` below `dir`, in path order.
fn find_metrics(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.with_context(|| format!("listing {}", dir.display()))?;
        if entry.file_type().is_file() && entry.file_name() == METRICS_FILE {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

fn scenario_rank(name: &str) -> (usize, String) {
    let known = Scenario::ALL.iter().position(|s| s.name() == name);
    (known.unwrap_or(Scenario::ALL.len()), name.to_string())
}

/// Rows sorted by scenario, round, family and threshold. A later file
/// replaces an earlier row with the same key.
pub fn merge(dir: &Path) -> Result<Vec<MetricsRow>> {
    let files = find_metrics(dir)?;
    if files.is_empty() {
        anyhow::bail!("no {METRICS_FILE} under {}", dir.display());
    }
    let mut rows = BTreeMap::new();
    for f in &files {
        let part: Vec<MetricsRow> =
            read_csv(f).with_context(|| format!("reading {}", f.display()))?;
        for r in part {
            let key = (
                scenario_rank(&r.scenario),
                r.round,
                r.metric_family.clone(),
                r.threshold.to_bits(),
            );
            rows.insert(key, r);
        }
    }
    Ok(rows.into_values().collect())
}

/// Best value over rounds for each `(scenario, family, threshold)`.
fn maxima(rows: &[MetricsRow]) -> BTreeMap<(usize, String), BTreeMap<(String, u64), f64>> {
    let mut out: BTreeMap<_, BTreeMap<_, f64>> = BTreeMap::new();
    for r in rows {
        let e = out
            .entry(scenario_rank(&r.scenario))
            .or_default()
            .entry((r.metric_family.clone(), r.threshold.to_bits()))
            .or_insert(f64::NEG_INFINITY);
        *e = e.max(r.value_percent);
    }
    out
}

fn thresholds(rows: &[MetricsRow], family: &str) -> Vec<f64> {
    let mut t: Vec<f64> = rows
        .iter()
        .filter(|r| r.metric_family == family)
        .map(|r| r.threshold)
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

fn table(rows: &[MetricsRow], columns: &[(&str, &str)]) -> String {
    let best = maxima(rows);
    let cols: Vec<(String, String, f64)> = columns
        .iter()
        .flat_map(|&(family, label)| {
            thresholds(rows, family).into_iter().map(move |t| {
                (
                    family.to_string(),
                    format!("{label} <{t}{}", unit(family)),
                    t,
                )
            })
        })
        .collect();
    let mut s = String::from("| scenario |");
    for (_, label, _) in &cols {
        let _ = write!(s, " {label} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(cols.len()));
    s.push('\n');
    for ((_, name), values) in &best {
        let _ = write!(s, "| {name} |");
        for (family, _, t) in &cols {
            match values.get(&(family.clone(), t.to_bits())) {
                Some(v) => {
                    let _ = write!(s, " {v:.2} |");
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

fn unit(family: &str) -> &'static str {
    if family == "azimuth" {
        "°"
    } else {
        "m"
    }
}

/// Markdown report: the distance/lateral/angle table with each scenario's
/// best value over rounds, then longitudinal and combined recall.
pub fn render(rows: &[MetricsRow]) -> String {
    let mut s = String::from("## Recall (%), best round per scenario\n\n");
    s.push_str(&table(
        rows,
        &[
            ("distance", "Distance"),
            ("lateral", "Lateral"),
            ("azimuth", "Angle"),
        ],
    ));
    s.push_str("\n## Longitudinal and combined (lateral and angle) recall (%)\n\n");
    s.push_str(&table(
        rows,
        &[("longitudinal", "Longitudinal"), ("combined", "Combined")],
    ));
    s
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Line chart of recall against round, one line per scenario.
pub fn svg_chart(rows: &[MetricsRow], family: &str, threshold: f64) -> String {
    let mut series: BTreeMap<(usize, String), Vec<(usize, f64)>> = BTreeMap::new();
    for r in rows
        .iter()
        .filter(|r| r.metric_family == family && r.threshold == threshold)
    {
        series
            .entry(scenario_rank(&r.scenario))
            .or_default()
            .push((r.round, r.value_percent));
    }
    let max_round = series
        .values()
        .flatten()
        .map(|p| p.0)
        .max()
        .unwrap_or(1)
        .max(1);
    let x = |round: usize| PAD + (W - 2.0 * PAD) * round as f64 / max_round as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v / 100.0;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{family} recall &lt; {threshold}{}</text>",
        W / 2.0,
        unit(family)
    );
    for v in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let _ = writeln!(
            s,
            "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#ddd\"/><text x=\"{2}\" y=\"{3}\" text-anchor=\"end\">{v}</text>",
            y(v),
            W - PAD,
            PAD - 4.0,
            y(v) + 4.0
        );
    }
    for r in 0..=max_round {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{r}</text>",
            x(r),
            H - PAD + 14.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">round</text>",
        W / 2.0,
        H - 8.0
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{0}\" text-anchor=\"middle\" transform=\"rotate(-90 12 {0})\">recall (%)</text>",
        H / 2.0
    );
    for (i, ((_, name), pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = pts.clone();
        pts.sort_by_key(|p| p.0);
        let path: Vec<String> = pts
            .iter()
            .map(|&(r, v)| format!("{:.1},{:.1}", x(r), y(v)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            W - PAD + 4.0 - 110.0,
            PAD + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Merges the CSVs under `dir`, writes the merged CSV and the markdown
/// table there (plus charts when `svg`), and returns the table.
pub fn run(dir: &Path, svg: bool) -> Result<String> {
    let rows = merge(dir)?;
    write_csv(&dir.join(MERGED_FILE), &rows, &METRICS_HEADERS)?;
    let text = render(&rows);
    fs::write(dir.join(TABLE_FILE), &text)?;
    if svg {
        let families: Vec<String> = {
            let mut f: Vec<String> = rows.iter().map(|r| r.metric_family.clone()).collect();
            f.sort();
            f.dedup();
            f
        };
        for family in &families {
            for t in thresholds(&rows, family) {
                fs::write(
                    dir.join(format!("recall_{family}_{t}.svg")),
                    svg_chart(&rows, family, t),
                )?;
            }
        }
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scenario: &str, round: usize, family: &str, threshold: f64, v: f64) -> MetricsRow {
        MetricsRow {
            scenario: scenario.into(),
            round,
            metric_family: family.into(),
            threshold,
            value_percent: v,
        }
    }

    #[test]
    fn table_reports_best_round() {
        let rows = vec![
            row("fl-full", 1, "lateral", 1.0, 10.0),
            row("fl-full", 2, "lateral", 1.0, 30.0),
            row("fl-full", 3, "lateral", 1.0, 20.0),
            row("centralized", 1, "lateral", 1.0, 40.0),
        ];
        let t = render(&rows);
        assert!(t.contains("| fl-full | 30.00 |"), "{t}");
        // Canonical scenario order puts centralized first.
        assert!(t.find("centralized").unwrap() < t.find("fl-full").unwrap());
    }

    #[test]
    fn chart_has_one_line_per_scenario() {
        let rows = vec![
            row("a", 1, "combined", 5.0, 10.0),
            row("a", 2, "combined", 5.0, 20.0),
            row("b", 1, "combined", 5.0, 15.0),
        ];
        let s = svg_chart(&rows, "combined", 5.0);
        assert_eq!(s.matches("<polyline").count(), 2);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }
}
