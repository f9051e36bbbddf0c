//! Standalone SVG line charts for run artifacts; no rendering dependencies.

use crate::error::{Error, Result};
use crate::fsutil;
use std::path::{Path, PathBuf};

const WIDTH: f64 = 760.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 100.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.3}")
    }
}

/// Render a multi-series line chart.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let pts: Vec<(f64, f64)> =
        series.iter().flat_map(|s| s.points.iter().copied()).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &pts {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if pts.is_empty() {
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
        y_min -= 1.0;
    } else {
        let pad = (y_max - y_min) * 0.06;
        y_min -= pad;
        y_max += pad;
    }
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = move |x: f64| MARGIN_LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let sy = move |y: f64| MARGIN_TOP + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n<text x=\"{}\" y=\"22\" \
         text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        MARGIN_LEFT + plot_w / 2.0
    ));
    // Axes and ticks.
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_LEFT}\" y1=\"{MARGIN_TOP}\" x2=\"{MARGIN_LEFT}\" y2=\"{}\" stroke=\"black\"/>\n",
        MARGIN_TOP + plot_h
    ));
    for i in 0..=5 {
        let fx = x_min + (x_max - x_min) * i as f64 / 5.0;
        let fy = y_min + (y_max - y_min) * i as f64 / 5.0;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"#cccccc\"/>\n\
             <text x=\"{0}\" y=\"{3}\" text-anchor=\"middle\">{4}</text>\n",
            sx(fx),
            MARGIN_TOP,
            MARGIN_TOP + plot_h,
            MARGIN_TOP + plot_h + 18.0,
            fmt_tick(fx)
        ));
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_LEFT}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#eeeeee\"/>\n\
             <text x=\"{2}\" y=\"{3}\" text-anchor=\"end\">{4}</text>\n",
            sy(fy),
            MARGIN_LEFT + plot_w,
            MARGIN_LEFT - 6.0,
            sy(fy) + 4.0,
            fmt_tick(fy)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{y_label}</text>\n",
        MARGIN_TOP + plot_h / 2.0
    ));
    // Series and legend.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            s.points.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        if !path.is_empty() {
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                path.join(" ")
            ));
        }
        let ly = MARGIN_TOP + 16.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{ly}\" x2=\"{1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n\
             <text x=\"{2}\" y=\"{3}\">{4}</text>\n",
            MARGIN_LEFT + plot_w + 10.0,
            MARGIN_LEFT + plot_w + 34.0,
            MARGIN_LEFT + plot_w + 40.0,
            ly + 4.0,
            s.name
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn parse_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::BadManifest(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn numeric_column(header: &[String], rows: &[Vec<String>], name: &str) -> Option<Vec<f64>> {
    let idx = header.iter().position(|h| h == name)?;
    rows.iter().map(|r| r.get(idx).and_then(|v| v.parse::<f64>().ok())).collect()
}

/// Render `curves.svg` (loss terms and validation metrics per epoch) from a
/// run directory's `epochs.csv`, plus `metric_vs_group_size.svg` when a
/// group-size ablation CSV is present. Returns the paths written.
pub fn plot_run(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let epochs_csv = run_dir.join("epochs.csv");
    if epochs_csv.exists() {
        let (header, rows) = parse_csv(&epochs_csv)?;
        let epochs = numeric_column(&header, &rows, "epoch")
            .ok_or_else(|| Error::BadManifest("epochs.csv lacks epoch column".into()))?;
        let mut series = Vec::new();
        for name in ["wsl", "stl", "sia", "total", "val_auc", "val_accuracy", "test_auc"] {
            if let Some(values) = numeric_column(&header, &rows, name) {
                series.push(Series {
                    name: name.to_string(),
                    points: epochs.iter().copied().zip(values).collect(),
                });
            }
        }
        let svg = line_chart("training curves", "epoch", "value", &series);
        let out = run_dir.join("curves.svg");
        fsutil::atomic_write_str(&out, &svg)?;
        written.push(out);
    }
    let ablation_csv = run_dir.join("ablation_group-size.csv");
    if ablation_csv.exists() {
        let (header, rows) = parse_csv(&ablation_csv)?;
        let settings = numeric_column(&header, &rows, "setting")
            .ok_or_else(|| Error::BadManifest("ablation csv lacks numeric settings".into()))?;
        let mut series = Vec::new();
        for name in ["accuracy", "f1", "auc"] {
            if let Some(values) = numeric_column(&header, &rows, name) {
                series.push(Series {
                    name: name.to_string(),
                    points: settings.iter().copied().zip(values).collect(),
                });
            }
        }
        let svg = line_chart("metrics vs group size", "group size", "metric", &series);
        let out = run_dir.join("metric_vs_group_size.svg");
        fsutil::atomic_write_str(&out, &svg)?;
        written.push(out);
    }
    if written.is_empty() {
        return Err(Error::BadManifest(format!(
            "{}: nothing to plot (no epochs.csv or ablation CSV)",
            run_dir.display()
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_series_and_axes() {
        let svg = line_chart(
            "demo",
            "x",
            "y",
            &[Series { name: "a".into(), points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 1.5)] }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("demo"));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn empty_series_still_renders() {
        let svg = line_chart("empty", "x", "y", &[]);
        assert!(svg.contains("</svg>"));
    }
}
