use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::manifest::{RunManifest, Stage};
use super::stages::{read_raw_metrics, METHODS};
use super::PipelineError;
use crate::homogenize::{format_sig9, COMPONENT_NAMES};
use crate::metrics::{kde_curve, welch_p_value, Bandwidth, KdeCurve};
use crate::pipeline::io::read_property_csv;

/// Mean and sample standard deviation of one metric across designs.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

const COLORS: [&str; 7] = ["#000000", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn csv_err(e: csv::Error) -> PipelineError {
    PipelineError::Format(e.to_string())
}

/// One curve per method: a KDE when there are at least two distinct values,
/// otherwise a vertical marker at the value.
enum Trace<'a> {
    Curve(&'a KdeCurve),
    Marker(f64),
}

/// A standalone SVG line plot of KDE curves with a legend.
pub fn kde_svg(title: &str, curves: &[(&str, Option<&KdeCurve>, &[f64])]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let traces: Vec<(&str, Trace)> = curves
        .iter()
        .filter_map(|(label, c, values)| match c {
            Some(c) => Some((*label, Trace::Curve(c))),
            None => values.first().map(|v| (*label, Trace::Marker(*v))),
        })
        .collect();
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymax: f64 = 0.0;
    for (_, t) in &traces {
        match t {
            Trace::Curve(c) => {
                xmin = xmin.min(c.grid[0]);
                xmax = xmax.max(*c.grid.last().unwrap());
                ymax = ymax.max(c.densities.iter().copied().fold(0.0, f64::max));
            }
            Trace::Marker(v) => {
                xmin = xmin.min(*v);
                xmax = xmax.max(*v);
            }
        }
    }
    if !xmin.is_finite() || xmax <= xmin {
        let c = if xmin.is_finite() { xmin } else { 0.0 };
        xmin = c - 1.0;
        xmax = c + 1.0;
    }
    if ymax <= 0.0 {
        ymax = 1.0;
    }
    let sx = |x: f64| pad + (x - xmin) / (xmax - xmin) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / ymax * (h - 2.0 * pad);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#, w / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {} H{} M{pad} {} V{pad}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    for (x, anchor) in [(xmin, "start"), (xmax, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
            sx(x),
            h - pad + 16.0,
            format_sig9(x)
        );
    }
    for (i, (label, t)) in traces.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        match t {
            Trace::Curve(c) => {
                let pts: Vec<String> = c
                    .grid
                    .iter()
                    .zip(&c.densities)
                    .map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y)))
                    .collect();
                let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
            }
            Trace::Marker(v) => {
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.2}" x2="{x:.2}" y1="{}" y2="{pad}" stroke="{color}" stroke-dasharray="4 3"/>"#,
                    h - pad,
                    x = sx(*v)
                );
            }
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-family="sans-serif" font-size="12" fill="{color}">{label}</text>"#,
            w - pad - 90.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, std)
}

fn component_samples(path: &Path) -> Result<BTreeMap<String, [Vec<f64>; 4]>, PipelineError> {
    let mut map: BTreeMap<String, [Vec<f64>; 4]> = BTreeMap::new();
    for row in read_property_csv(path)? {
        let design = row.id.split(':').next().unwrap_or_default().to_string();
        let entry = map.entry(design).or_default();
        if let Some(t) = row.tensor {
            for (k, v) in t.components().into_iter().enumerate() {
                entry[k].push(v);
            }
        }
    }
    Ok(map)
}

fn distinct(v: &[f64]) -> bool {
    v.iter().any(|x| *x != v[0])
}

/// Writes `report/summary.csv` (mean and standard deviation across designs
/// of every method and metric), `report/pvalues.csv` (Welch tests of each
/// baseline against GUST per metric) and, per design and elastic component,
/// a KDE overlay SVG plus a two-column CSV per curve.
pub fn emit_report(out_dir: &Path, manifest: &RunManifest) -> Result<Vec<PathBuf>, PipelineError> {
    if !manifest.is_complete(Stage::Evaluate) {
        return Err(PipelineError::MissingDependency {
            stage: Stage::Evaluate,
            missing: Stage::Evaluate,
        });
    }
    let report = out_dir.join("report");
    std::fs::create_dir_all(report.join("kde"))?;
    let raw = read_raw_metrics(out_dir)?;
    let mut written = Vec::new();

    let mut by_key: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    let method_rank = |m: &str| METHODS.iter().position(|x| *x == m).unwrap_or(METHODS.len());
    for r in &raw {
        by_key.entry((method_rank(&r.method), r.metric.clone())).or_default().push(r.value);
    }
    let mut summary = Vec::new();
    for ((rank, metric), values) in &by_key {
        let (mean, std) = mean_std(values);
        summary.push(SummaryRow {
            method: METHODS.get(*rank).copied().unwrap_or("other").to_string(),
            metric: metric.clone(),
            mean,
            std,
            n: values.len(),
        });
    }
    let path = report.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["method", "metric", "mean", "std", "n"]).map_err(csv_err)?;
    for r in &summary {
        w.write_record([r.method.clone(), r.metric.clone(), format_sig9(r.mean), format_sig9(r.std), r.n.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    written.push(path);

    let path = report.join("pvalues.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["metric", "method", "reference", "p_value"]).map_err(csv_err)?;
    let metrics: Vec<String> = {
        let mut m: Vec<String> = raw.iter().map(|r| r.metric.clone()).collect();
        m.sort();
        m.dedup();
        m
    };
    for metric in &metrics {
        let Some(gust) = by_key.get(&(0, metric.clone())) else {
            continue;
        };
        for (rank, method) in METHODS.iter().enumerate().skip(1) {
            if let Some(other) = by_key.get(&(rank, metric.clone())) {
                let p = welch_p_value(other, gust).unwrap_or(f64::NAN);
                w.write_record([metric.as_str(), method, "gust", &format_sig9(p)]).map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    written.push(path);

    let truth = component_samples(&out_dir.join("properties/truth.csv"))?;
    let mut methods = Vec::new();
    for m in METHODS {
        let p = out_dir.join(format!("properties/{m}.csv"));
        if p.exists() {
            methods.push((m, component_samples(&p)?));
        }
    }
    for (design, truth_comps) in &truth {
        for (k, comp) in COMPONENT_NAMES.iter().enumerate() {
            let mut series: Vec<(&str, &[f64])> = vec![("truth", &truth_comps[k])];
            for (m, samples) in &methods {
                if let Some(c) = samples.get(design) {
                    series.push((m, &c[k]));
                }
            }
            let curves: Vec<Option<KdeCurve>> = series
                .iter()
                .map(|(_, v)| if v.len() >= 2 && distinct(v) { kde_curve(v, Bandwidth::Silverman).ok() } else { None })
                .collect();
            for ((label, _), curve) in series.iter().zip(&curves) {
                if let Some(c) = curve {
                    let path = report.join(format!("kde/design{design}_{comp}_{label}.csv"));
                    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
                    w.write_record([comp, "density"]).map_err(csv_err)?;
                    for (x, y) in c.grid.iter().zip(&c.densities) {
                        w.write_record([format_sig9(*x), format_sig9(*y)]).map_err(csv_err)?;
                    }
                    w.flush()?;
                    written.push(path);
                }
            }
            let plotted: Vec<(&str, Option<&KdeCurve>, &[f64])> =
                series.iter().zip(&curves).map(|((l, v), c)| (*l, c.as_ref(), *v)).collect();
            let path = report.join(format!("kde/design{design}_{comp}.svg"));
            std::fs::write(&path, kde_svg(&format!("design {design}: {comp}"), &plotted))?;
            written.push(path);
        }
    }
    Ok(written)
}
