//! Line plots with shaded confidence bands, written as plain SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{band, series as metric_series, MetricsLog};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One curve: mean per x with a symmetric half-width band.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub x: Vec<f64>,
    pub mean: Vec<f64>,
    pub half_width: Vec<f64>,
}

impl Series {
    /// Mean and `1.96 sd / √n` band over equally long runs.
    pub fn from_runs(label: impl Into<String>, x: Vec<f64>, runs: &[Vec<f64>]) -> Result<Self> {
        let b = band(runs)?;
        if b.mean.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: x.len(),
                actual: b.mean.len(),
            });
        }
        Ok(Self {
            label: label.into(),
            x,
            mean: b.mean,
            half_width: b.half_width,
        })
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e5 || v.abs() < 1e-3) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.x.is_empty()) {
        return Err(Error::InvalidInput("nothing to plot".into()));
    }
    for s in series {
        if s.mean.len() != s.x.len() || s.half_width.len() != s.x.len() {
            return Err(Error::DimensionMismatch {
                expected: s.x.len(),
                actual: s.mean.len().min(s.half_width.len()),
            });
        }
        if s.x.iter().chain(&s.mean).chain(&s.half_width).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plot data"));
        }
    }
    let xs = series.iter().flat_map(|s| s.x.iter().copied());
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let ys = series.iter().flat_map(|s| {
        s.mean
            .iter()
            .zip(&s.half_width)
            .flat_map(|(m, h)| [m - h, m + h])
            .collect::<Vec<_>>()
    });
    let (mut y_min, mut y_max) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if y_max - y_min < 1e-12 {
        y_min -= 1.0;
        y_max += 1.0;
    }
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_span = y_max - y_min;
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x_min) / x_span * plot_w;
    let py = |y: f64| MARGIN_TOP + (1.0 - (y - y_min) / y_span) * plot_h;

    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        escape(title)
    );
    // axes and ticks
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;
    let _ = writeln!(
        w,
        r#"<path d="M{x0:.2},{MARGIN_TOP:.2} L{x0:.2},{y0:.2} L{:.2},{y0:.2}" fill="none" stroke="black"/>"#,
        x0 + plot_w
    );
    for k in 0..=5 {
        let fx = x_min + x_span * k as f64 / 5.0;
        let fy = y_min + y_span * k as f64 / 5.0;
        let _ = writeln!(
            w,
            r#"<line x1="{0:.2}" y1="{y0:.2}" x2="{0:.2}" y2="{1:.2}" stroke="black"/><text x="{0:.2}" y="{2:.2}" text-anchor="middle">{3}</text>"#,
            px(fx),
            y0 + 5.0,
            y0 + 19.0,
            tick_label(fx)
        );
        let _ = writeln!(
            w,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{x0:.2}" y2="{1:.2}" stroke="black"/><text x="{2:.2}" y="{3:.2}" text-anchor="end">{4}</text>"#,
            x0 - 5.0,
            py(fy),
            x0 - 8.0,
            py(fy) + 4.0,
            tick_label(fy)
        );
    }
    let _ = writeln!(
        w,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        w,
        r#"<text x="18" y="{0:.2}" text-anchor="middle" transform="rotate(-90 18 {0:.2})">{1}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if s.half_width.iter().any(|h| *h > 0.0) {
            let mut d = String::new();
            for (i, (x, (m, h))) in s.x.iter().zip(s.mean.iter().zip(&s.half_width)).enumerate() {
                let _ = write!(d, "{}{:.2},{:.2} ", if i == 0 { "M" } else { "L" }, px(*x), py(m + h));
            }
            for (x, (m, h)) in s.x.iter().zip(s.mean.iter().zip(&s.half_width)).rev() {
                let _ = write!(d, "L{:.2},{:.2} ", px(*x), py(m - h));
            }
            let _ = writeln!(w, r#"<path class="band" d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, d);
        }
        let points: Vec<String> = s
            .x
            .iter()
            .zip(&s.mean)
            .map(|(x, m)| format!("{:.2},{:.2}", px(*x), py(*m)))
            .collect();
        let _ = writeln!(
            w,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let ly = MARGIN_TOP + 10.0 + 18.0 * k as f64;
        let lx = MARGIN_LEFT + plot_w + 12.0;
        let _ = writeln!(
            w,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    let _ = writeln!(w, "</svg>");
    Ok(out)
}

/// Render and write; nothing is written when rendering fails.
pub fn write_svg(path: impl AsRef<Path>, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let path = path.as_ref();
    let svg = render_svg(title, x_label, y_label, series)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// `(t, value)` pairs of one column of a metrics CSV.
pub fn read_metric_column(path: impl AsRef<Path>, column: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("{} has no '{name}' column", path.display())))
    };
    let (tc, vc) = (find("t")?, find(column)?);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |c: usize| -> Result<f64> {
            rec.get(c)
                .and_then(|s| s.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidInput(format!("{} line {}: bad value in column {c}", path.display(), k + 2)))
        };
        xs.push(parse(tc)?);
        ys.push(parse(vc)?);
    }
    Ok((xs, ys))
}

/// Plot one metric across metrics files, treated as seeds of one policy.
pub fn emit_plots<P: AsRef<Path>>(inputs: &[P], metric: &str, label: &str, out: impl AsRef<Path>) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidInput("no metrics files given".into()));
    }
    let mut x = Vec::new();
    let mut runs = Vec::new();
    for p in inputs {
        let (xs, ys) = read_metric_column(p, metric)?;
        if runs.is_empty() {
            x = xs;
        } else if xs != x {
            return Err(Error::InvalidInput(format!("{} has a different time axis", p.as_ref().display())));
        }
        runs.push(ys);
    }
    let series = Series::from_runs(label, x, &runs)?;
    write_svg(out, metric, "t", metric, &[series])
}

/// One SVG per metric, one band per policy. Returns the written paths.
pub fn write_sweep_plots(dir: impl AsRef<Path>, logs: &[MetricsLog], metrics: &[&str]) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    let mut policies = Vec::new();
    for l in logs {
        if !policies.contains(&l.policy) {
            policies.push(l.policy);
        }
    }
    let mut written = Vec::new();
    for metric in metrics {
        let mut all = Vec::new();
        for p in &policies {
            let runs: Vec<Vec<f64>> = logs
                .iter()
                .filter(|l| l.policy == *p)
                .map(|l| metric_series(l, metric))
                .collect::<Result<_>>()?;
            let len = runs.first().map_or(0, Vec::len);
            let x = (1..=len).map(|t| t as f64).collect();
            all.push(Series::from_runs(p.name(), x, &runs)?);
        }
        let path = dir.join(format!("{metric}.svg"));
        write_svg(&path, metric, "t", metric, &all)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(label: &str, n: usize, h: f64) -> Series {
        Series {
            label: label.into(),
            x: (1..=n).map(|v| v as f64).collect(),
            mean: (0..n).map(|v| (v as f64).sqrt()).collect(),
            half_width: vec![h; n],
        }
    }

    #[test]
    fn single_series_has_one_polyline_and_labels() {
        let svg = render_svg("regret", "t", "R(t)", &[series("sabr", 20, 0.0)]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        assert!(svg.contains(">t</text>") && svg.contains(">R(t)</text>"));
        assert!(!svg.contains("class=\"band\""));
    }

    #[test]
    fn bands_drawn_per_series() {
        let svg = render_svg("q", "t", "Q", &[series("a", 10, 0.3), series("b<1>", 10, 0.1)]).unwrap();
        assert_eq!(svg.matches("class=\"band\"").count(), 2);
        assert!(svg.contains("b&lt;1&gt;"));
    }

    #[test]
    fn band_width_formula_over_ten_runs() {
        let runs: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 2.0 * k as f64]).collect();
        let s = Series::from_runs("x", vec![1.0, 2.0], &runs).unwrap();
        let sd = (runs.iter().map(|r| (r[0] - 4.5).powi(2)).sum::<f64>() / 9.0).sqrt();
        assert!((s.half_width[0] - 1.96 * sd / 10f64.sqrt()).abs() < 1e-12);
        assert!((s.mean[1] - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("fig.svg");
        assert!(write_svg(&out, "t", "x", "y", &[]).is_err());
        assert!(!out.exists());
        let empty: [&Path; 0] = [];
        assert!(emit_plots(&empty, "regret", "x", &out).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn metrics_files_to_svg() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        let b = dir.path().join("b.csv");
        std::fs::write(&a, "t,regret\n1,0.5\n2,1.0\n").unwrap();
        std::fs::write(&b, "t,regret\n1,1.5\n2,2.0\n").unwrap();
        let out = dir.path().join("fig.svg");
        emit_plots(&[&a, &b], "regret", "sabr", &out).unwrap();
        let svg = std::fs::read_to_string(&out).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(emit_plots(&[&a], "queue_total", "sabr", dir.path().join("x.svg")).is_err());
        std::fs::write(&b, "t,regret\n1,oops\n").unwrap();
        let bad = dir.path().join("bad.svg");
        assert!(emit_plots(&[&b], "regret", "sabr", &bad).is_err());
        assert!(!bad.exists());
    }
}
