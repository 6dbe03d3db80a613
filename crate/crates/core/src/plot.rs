//! Self-contained SVG output: line charts and grayscale image grids.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ChartOptions {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub width: f64,
    pub height: f64,
    /// Draw point markers in addition to lines.
    pub markers: bool,
}

impl Default for ChartOptions {
    fn default() -> Self {
        ChartOptions {
            title: String::new(),
            x_label: String::new(),
            y_label: String::new(),
            log_x: false,
            log_y: false,
            width: 720.0,
            height: 440.0,
            markers: false,
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Option<Axis> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() || !hi.is_finite() {
            return None;
        }
        if hi - lo < 1e-12 * hi.abs().max(1.0) {
            lo -= 0.5;
            hi += 0.5;
        } else if !log {
            let pad = 0.04 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Some(Axis { lo, hi, log })
    }

    /// Position in `[0, 1]`.
    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<(f64, String)> {
        if self.log {
            let (a, b) = (self.lo.ceil() as i32, self.hi.floor() as i32);
            return (a..=b).map(|e| (10f64.powi(e), format!("1e{e}"))).collect();
        }
        let span = self.hi - self.lo;
        let raw = span / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0]
            .iter()
            .map(|m| m * mag)
            .find(|s| span / s <= 6.0)
            .unwrap_or(10.0 * mag);
        let mut t = (self.lo / step).ceil() * step;
        let mut out = Vec::new();
        while t <= self.hi + 1e-9 * step {
            out.push((t, format_tick(t)));
            t += step;
        }
        out
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.1e}")
    } else {
        let s = format!("{v:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// Render series as an SVG line chart. Points that cannot be placed (NaN, or
/// non-positive on a log axis) are skipped.
pub fn line_chart_svg(series: &[Series], opts: &ChartOptions) -> Result<String> {
    let usable = |s: &Series| -> Vec<(f64, f64)> {
        s.x.iter()
            .zip(&s.y)
            .map(|(&x, &y)| (x, y))
            .filter(|&(x, y)| {
                x.is_finite() && y.is_finite() && (!opts.log_x || x > 0.0) && (!opts.log_y || y > 0.0)
            })
            .collect()
    };
    let pts: Vec<Vec<(f64, f64)>> = series.iter().map(usable).collect();
    let xa = Axis::fit(pts.iter().flatten().map(|p| p.0), opts.log_x);
    let ya = Axis::fit(pts.iter().flatten().map(|p| p.1), opts.log_y);
    let (Some(xa), Some(ya)) = (xa, ya) else {
        return Err(Error::config("nothing to plot: no finite data points"));
    };
    let (w, h) = (opts.width, opts.height);
    let (left, right, top, bottom) = (70.0, 150.0, 36.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + xa.frac(x) * pw;
    let py = |y: f64| top + (1.0 - ya.frac(y)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        left + pw / 2.0,
        escape(&opts.title)
    );
    for (t, label) in xa.ticks() {
        let x = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{top}" x2="{x:.2}" y2="{:.2}" stroke="#e5e5e5"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{label}</text>"##,
            top + ph,
            top + ph + 16.0
        );
    }
    for (t, label) in ya.ticks() {
        let y = py(t);
        let _ = writeln!(
            s,
            r##"<line x1="{left}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#e5e5e5"/><text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 10.0,
        escape(&opts.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(&opts.y_label)
    );
    for (k, (ser, p)) in series.iter().zip(&pts).enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if p.len() > 1 {
            let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.6" points="{}"/>"#,
                path.join(" ")
            );
        }
        if opts.markers || p.len() == 1 {
            for &(x, y) in p {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y));
            }
        }
        let ly = top + 14.0 + 18.0 * k as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 18.0,
            lx + 24.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Read `x_col` and `y_cols` from a CSV file into series. `NA` and empty
/// cells become NaN (and are skipped when drawing).
pub fn series_from_csv(path: &Path, x_col: &str, y_cols: &[&str]) -> Result<Vec<Series>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::config(format!("{} has no header row", path.display())));
    }
    let find = |c: &str| {
        headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::config(format!("column {c:?} not found in {}", path.display())))
    };
    let xi = find(x_col)?;
    let yi: Vec<usize> = y_cols.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let mut x = Vec::new();
    let mut ys = vec![Vec::new(); yi.len()];
    let parse = |v: &str| v.trim().parse::<f64>().unwrap_or(f64::NAN);
    for rec in rdr.records() {
        let rec = rec?;
        x.push(parse(rec.get(xi).unwrap_or("")));
        for (k, &i) in yi.iter().enumerate() {
            ys[k].push(parse(rec.get(i).unwrap_or("")));
        }
    }
    if x.is_empty() {
        return Err(Error::config(format!("{} has no data rows", path.display())));
    }
    Ok(y_cols
        .iter()
        .zip(ys)
        .map(|(name, y)| Series {
            name: name.to_string(),
            x: x.clone(),
            y,
        })
        .collect())
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Grid of `side × side` grayscale images. With `signed`, each image maps
/// `[−max|v|, max|v|]` to black..white; otherwise `[min, max]`.
pub fn image_grid_svg(images: &[Vec<f64>], side: usize, cols: usize, titles: &[String], signed: bool) -> String {
    let cell = 3.0;
    let pad = 8.0;
    let label_h = 16.0;
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let tile = side as f64 * cell;
    let w = cols as f64 * (tile + pad) + pad;
    let h = rows as f64 * (tile + pad + label_h) + pad;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11" shape-rendering="crispEdges">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#f4f4f4"/>"##);
    for (k, img) in images.iter().enumerate() {
        let ox = pad + (k % cols) as f64 * (tile + pad);
        let oy = pad + (k / cols) as f64 * (tile + pad + label_h);
        if let Some(t) = titles.get(k) {
            let _ = writeln!(s, r#"<text x="{ox}" y="{}">{}</text>"#, oy + 11.0, escape(t));
        }
        let oy = oy + label_h;
        let (lo, hi) = if signed {
            let m = img.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            (-m, m)
        } else {
            img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        };
        let span = if hi > lo { hi - lo } else { 1.0 };
        for (p, &v) in img.iter().enumerate().take(side * side) {
            let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell}" height="{cell}" fill="rgb({g},{g},{g})"/>"#,
                ox + (p % side) as f64 * cell,
                oy + (p / side) as f64 * cell
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo() -> Vec<Series> {
        vec![
            Series {
                name: "a".into(),
                x: vec![0.0, 1.0, 10.0, 100.0],
                y: vec![1.0, 2.0, 3.0, f64::NAN],
            },
            Series {
                name: "b<c".into(),
                x: vec![1.0, 2.0],
                y: vec![0.5, 0.25],
            },
        ]
    }

    #[test]
    fn chart_is_well_formed() {
        let svg = line_chart_svg(&demo(), &ChartOptions::default()).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c"));
    }

    #[test]
    fn log_axis_drops_nonpositive_x() {
        let opts = ChartOptions {
            log_x: true,
            ..Default::default()
        };
        let svg = line_chart_svg(&demo(), &opts).unwrap();
        assert!(svg.contains("1e1"));
        let a = svg.lines().find(|l| l.contains("polyline")).unwrap();
        assert_eq!(a.matches(',').count(), 2);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(line_chart_svg(&[], &ChartOptions::default()).is_err());
    }

    #[test]
    fn csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "iter,loss,ratio\n0,1.0,NA\n1,0.5,2\n").unwrap();
        let s = series_from_csv(&p, "iter", &["loss", "ratio"]).unwrap();
        assert_eq!(s[0].y, vec![1.0, 0.5]);
        assert!(s[1].y[0].is_nan());
        assert!(series_from_csv(&p, "iter", &["nope"]).unwrap_err().is_config());
        std::fs::write(&p, "").unwrap();
        assert!(series_from_csv(&p, "iter", &["loss"]).is_err());
    }

    #[test]
    fn image_grid_counts_pixels() {
        let svg = image_grid_svg(&vec![vec![0.0, 1.0, 2.0, 3.0]; 3], 2, 2, &["x".into()], false);
        assert_eq!(svg.matches("rgb(").count(), 12);
        assert!(svg.contains("rgb(255,255,255)"));
    }
}
