//! Minimal SVG rendering for score histograms and loss curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::Context;
use jitdp::experiments::{histogram, ExperimentReport, HISTOGRAM_BINS};

const W: f64 = 320.0;
const H: f64 = 200.0;
const PAD: f64 = 30.0;
const COLORS: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// One bar chart per model, bins over [0, 1].
pub fn histogram_svg(title: &str, counts: &[usize]) -> String {
    let max = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bw = (W - 2.0 * PAD) / counts.len().max(1) as f64;
    let mut svg = header(title);
    for (i, &c) in counts.iter().enumerate() {
        let h = (H - 2.0 * PAD) * c as f64 / max;
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            PAD + i as f64 * bw,
            H - PAD - h,
            (bw - 1.0).max(0.5),
            h,
            COLORS[0]
        );
    }
    axis_labels(&mut svg, "0", "1", &format!("{}", max as usize));
    svg.push_str("</svg>\n");
    svg
}

/// Overlaid loss polylines, one per series.
pub fn curves_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let points = series.iter().flat_map(|(_, s)| s.iter());
    let (mut xmax, mut ymax) = (1.0f64, 0.0f64);
    for &(x, y) in points {
        xmax = xmax.max(x);
        if y.is_finite() {
            ymax = ymax.max(y);
        }
    }
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let mut svg = header(title);
    for (k, (name, s)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = s
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|(x, y)| {
                format!("{:.1},{:.1}", PAD + (W - 2.0 * PAD) * x / xmax, H - PAD - (H - 2.0 * PAD) * y / ymax)
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-size="8" fill="{color}">{}</text>"#,
            W - PAD - 90.0,
            PAD + 10.0 * (k + 1) as f64,
            escape(name)
        );
    }
    axis_labels(&mut svg, "0", &format!("{xmax}"), &format!("{ymax:.3}"));
    svg.push_str("</svg>\n");
    svg
}

fn header(title: &str) -> String {
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    svg.push('\n');
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{PAD}" y="16" font-size="10">{}</text>"#, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD},{PAD} V{} H{}" fill="none" stroke="black" stroke-width="0.5"/>"#,
        H - PAD,
        W - PAD
    );
    svg
}

fn axis_labels(svg: &mut String, x0: &str, x1: &str, ytop: &str) {
    let _ = writeln!(svg, r#"<text x="{PAD}" y="{}" font-size="8">{x0}</text>"#, H - PAD + 10.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="8">{x1}</text>"#, W - PAD - 10.0, H - PAD + 10.0);
    let _ = writeln!(svg, r#"<text x="2" y="{}" font-size="8">{ytop}</text>"#, PAD + 3.0);
}

/// Writes `hist_<model>.svg` per successful cell and one `loss_<dataset>.svg` per dataset.
pub fn write_plots(report: &ExperimentReport, dir: &Path) -> anyhow::Result<usize> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots).with_context(|| format!("creating {}", plots.display()))?;
    let mut n = 0;
    let mut curves: std::collections::BTreeMap<&str, Vec<(String, Vec<(f64, f64)>)>> = Default::default();
    for (key, r) in report.ok_cells() {
        let label = key.label();
        let scores: Vec<f64> = r.scores.iter().map(|p| p.score).collect();
        let svg = histogram_svg(&label, &histogram(&scores, HISTOGRAM_BINS));
        let path = plots.join(format!("hist_{}.svg", file_safe(&label)));
        fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
        n += 1;
        let series = r.trace.steps.iter().map(|s| (s.step as f64, s.loss)).collect();
        curves.entry(key.dataset.as_str()).or_default().push((label, series));
    }
    for (dataset, series) in curves {
        let path = plots.join(format!("loss_{}.svg", file_safe(dataset)));
        fs::write(&path, curves_svg(&format!("training loss: {dataset}"), &series))
            .with_context(|| format!("writing {}", path.display()))?;
        n += 1;
    }
    Ok(n)
}
