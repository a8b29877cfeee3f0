//! `report`: aggregate tables and learning-curve plots from results.csv.

use std::fmt::Write as _;

use anyhow::{bail, Context};
use retina_xfer::metrics::Metric;
use retina_xfer::sweep::{
    format_sig9, learning_curves, AggregateTables, PerMetric, ResultRow, SweepResult, RESULTS_HEADER,
};
use retina_xfer::trainer::InitMode;

use crate::config::ExperimentConfig;
use crate::rundir::{write_file, RunDir};

pub const TABLES_HEADER: &str = "table,mode,metric,value,excluded";

/// Parses results.csv. Axes come from the rows themselves.
pub fn read_results(text: &str) -> anyhow::Result<SweepResult> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        Some(h) => bail!("results.csv header mismatch: {h:?}"),
        None => bail!("results.csv is empty"),
    }
    let rows = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| ResultRow::parse_csv_line(l).with_context(|| format!("results.csv line {}", i + 2)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(SweepResult::from_rows(&rows)?)
}

/// Checks `result` against the configured grid, so a mode, fraction or seed
/// with no rows at all is also reported missing.
pub fn require_complete(result: &mut SweepResult, expected: Option<&ExperimentConfig>) -> anyhow::Result<()> {
    if let Some(exp) = expected {
        let (modes, fractions, seeds) = (&exp.sweep.modes, &exp.sweep.fractions, &exp.sweep.seeds);
        let cells: std::collections::BTreeSet<_> = exp.sweep_config()?.cells().into_iter().collect();
        if let Some(extra) = result.grid.keys().find(|k| !cells.contains(k)) {
            bail!("results.csv has a row outside the configured grid: {extra}");
        }
        result.modes = modes.clone();
        result.fractions = fractions.clone();
        result.seeds = seeds.clone();
    }
    let missing = result.missing();
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|k| k.to_string()).collect();
        bail!("incomplete grid, {} cells missing:\n  {}", missing.len(), list.join("\n  "));
    }
    Ok(())
}

pub fn tables_csv(tables: &AggregateTables) -> String {
    let mut out = format!("{TABLES_HEADER}\n");
    let sections: [(&str, &std::collections::BTreeMap<InitMode, PerMetric>); 3] = [
        ("mean_improvement", &tables.mean_improvement),
        ("std_reduction", &tables.std_reduction),
        ("size_degradation", &tables.size_degradation),
    ];
    for (name, table) in sections {
        for (mode, per_metric) in table {
            for (metric, agg) in per_metric {
                let value = agg.value.map(format_sig9).unwrap_or_default();
                writeln!(out, "{name},{},{},{value},{}", mode.name(), metric.name(), agg.excluded).unwrap();
            }
        }
    }
    out
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: [f64; 4] = [50.0, 20.0, 40.0, 60.0]; // top, right, bottom, left

fn color(mode: InitMode) -> &'static str {
    match mode {
        InitMode::Direct => "#d62728",
        InitMode::GenericPretrained => "#1f77b4",
        InitMode::SourcePretrained => "#2ca02c",
    }
}

/// One metric's learning curves: x is the retained training fraction, y the
/// metric on a fixed `[0, 1]` axis; a line through the seed means over a
/// min–max band.
pub fn learning_curve_svg(result: &SweepResult, metric: Metric) -> String {
    let [top, right, bottom, left] = MARGIN;
    let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom);
    let x = |size: f64| left + size * pw;
    let y = |v: f64| top + (1.0 - v) * ph;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="15">{} vs training set size</text>"#,
        WIDTH / 2.0,
        metric.name()
    )
    .unwrap();
    for i in 0..=10 {
        let t = i as f64 / 10.0;
        writeln!(
            s,
            r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#ddd"/>"##,
            left,
            y(t),
            left + pw,
            y(t)
        )
        .unwrap();
        if i % 2 == 0 {
            writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{t:.1}</text>"#, left - 6.0, y(t) + 4.0).unwrap();
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}%</text>"#,
                x(t),
                top + ph + 16.0,
                t * 100.0
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">training samples retained</text>"#,
        left + pw / 2.0,
        HEIGHT - 6.0
    )
    .unwrap();
    for (i, &mode) in result.modes.iter().enumerate() {
        let pts = learning_curves(result, mode, metric);
        let c = color(mode);
        if !pts.is_empty() {
            let upper = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.size), y(p.max)));
            let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", x(p.size), y(p.min)));
            let band: Vec<String> = upper.chain(lower).collect();
            writeln!(
                s,
                r#"<polygon class="band" data-mode="{}" points="{}" fill="{c}" fill-opacity="0.18" stroke="none"/>"#,
                mode.name(),
                band.join(" ")
            )
            .unwrap();
            let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", x(p.size), y(p.mean))).collect();
            writeln!(
                s,
                r#"<polyline class="mean" data-mode="{}" points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
                mode.name(),
                line.join(" ")
            )
            .unwrap();
            for p in &pts {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#, x(p.size), y(p.mean)).unwrap();
            }
        }
        let ly = top + 14.0 + 16.0 * i as f64;
        writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{c}" stroke-width="3"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            left + 10.0,
            left + 30.0,
            left + 36.0,
            ly + 4.0,
            mode.name()
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Writes tables.csv and one plot per metric. Refuses an incomplete grid.
pub fn report(run: &RunDir) -> anyhow::Result<AggregateTables> {
    let path = run.results();
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut result = read_results(&text)?;
    let expected = if run.config().exists() {
        Some(ExperimentConfig::load(&run.config())?)
    } else {
        None
    };
    require_complete(&mut result, expected.as_ref())?;
    let tables = result.tables()?;
    write_file(&run.tables(), tables_csv(&tables).as_bytes())?;
    for metric in Metric::ALL {
        write_file(&run.plot(metric), learning_curve_svg(&result, metric).as_bytes())?;
    }
    log::info!("wrote {} and {} plots", run.tables().display(), Metric::ALL.len());
    Ok(tables)
}
