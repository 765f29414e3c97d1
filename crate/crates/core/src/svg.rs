//! Minimal deterministic SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Scatter,
    /// Right-continuous steps: each value holds until the next `x`.
    Step,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, style: Style) -> Self {
        Series { label: label.into(), points, style }
    }
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bounds(series: &[Series]) -> Result<(f64, f64, f64, f64)> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Domain("plot needs at least one finite point".into()));
    }
    // pad degenerate ranges so a single point still maps inside the frame
    if x1 - x0 <= 0.0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 <= 0.0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    Ok((x0, x1, y0, y1))
}

/// Renders the plot to a string.
pub fn render(series: &[Series], title: &str) -> Result<String> {
    if series.is_empty() {
        return Err(Error::Domain("plot needs at least one series".into()));
    }
    let (x0, x1, y0, y1) = bounds(series)?;
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(out, r#"<path d="M{l} {t} L{l} {b} L{r} {b}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        let _ = writeln!(
            out,
            r#"<line x1="{0:.2}" y1="{b}" x2="{0:.2}" y2="{1}" stroke="black"/><text x="{0:.2}" y="{2}" text-anchor="middle">{3:.4}</text>"#,
            px(xv),
            b + 4.0,
            b + 16.0,
            xv
        );
        let _ = writeln!(
            out,
            r#"<line x1="{0}" y1="{1:.2}" x2="{l}" y2="{1:.2}" stroke="black"/><text x="{2}" y="{3:.2}" text-anchor="end">{4:.4}</text>"#,
            l - 4.0,
            py(yv),
            l - 6.0,
            py(yv) + 4.0,
            yv
        );
    }

    for (k, s) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<(f64, f64)> =
            s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        match s.style {
            Style::Scatter => {
                for &(x, y) in &pts {
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(x), py(y));
                }
            }
            Style::Line | Style::Step => {
                let mut d = String::new();
                for (i, &(x, y)) in pts.iter().enumerate() {
                    if i == 0 {
                        let _ = write!(d, "M{:.2} {:.2}", px(x), py(y));
                    } else {
                        if s.style == Style::Step {
                            let _ = write!(d, " L{:.2} {:.2}", px(x), py(pts[i - 1].1));
                        }
                        let _ = write!(d, " L{:.2} {:.2}", px(x), py(y));
                    }
                }
                let _ = writeln!(out, r#"<path d="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>"#);
                if pts.len() == 1 {
                    let (x, y) = pts[0];
                    let _ = writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(x), py(y));
                }
            }
        }
        let ly = t + 14.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            r - 120.0,
            ly,
            r - 106.0,
            ly + 9.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes the plot to `path`.
pub fn emit_plot(series: &[Series], path: &Path) -> Result<()> {
    let text = render(series, &path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())?;
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_has_one_marker() {
        let s = render(&[Series::new("p", vec![(1.0, 2.0)], Style::Scatter)], "t").unwrap();
        assert_eq!(s.matches("<circle").count(), 1);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
    }

    #[test]
    fn identical_calls_identical_bytes() {
        let series = vec![
            Series::new("a", vec![(0.0, 0.0), (1.0, 0.5), (2.0, 1.0)], Style::Step),
            Series::new("b & c", vec![(0.0, 1.0), (2.0, 0.0)], Style::Line),
        ];
        assert_eq!(render(&series, "x").unwrap(), render(&series, "x").unwrap());
        assert!(render(&series, "x").unwrap().contains("b &amp; c"));
    }

    #[test]
    fn step_holds_value_until_next_x() {
        let s = render(&[Series::new("s", vec![(0.0, 0.0), (1.0, 1.0)], Style::Step)], "").unwrap();
        // the horizontal segment at y = 0 ends at x = 1 before jumping
        let x_end = MARGIN + (W - 2.0 * MARGIN);
        let y_bottom = H - MARGIN;
        assert!(s.contains(&format!("L{:.2} {:.2} L{:.2} {:.2}", x_end, y_bottom, x_end, MARGIN)));
    }

    #[test]
    fn empty_input_and_bad_path_error() {
        assert!(render(&[], "").is_err());
        let s = vec![Series::new("a", vec![(0.0, 0.0)], Style::Line)];
        assert!(matches!(emit_plot(&s, Path::new("/nonexistent-dir/x.svg")), Err(Error::Io(_))));
    }
}
