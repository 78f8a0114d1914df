//! Minimal SVG line plots plus columnar data dumps, so every figure can
//! be regenerated from its numbers.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub y: Vec<f64>,
}

/// A figure: shared x values, one or more y series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

impl LinePlot {
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() || self.x.is_empty() {
            return Err(Error::Empty("plot data".into()));
        }
        for s in &self.series {
            if s.y.len() != self.x.len() {
                return Err(Error::DimensionMismatch {
                    expected: self.x.len(),
                    got: s.y.len(),
                });
            }
        }
        let finite = self
            .x
            .iter()
            .chain(self.series.iter().flat_map(|s| s.y.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                context: "plot data".into(),
            });
        }
        Ok(())
    }

    /// Render the figure as a standalone SVG document.
    pub fn render_svg(&self) -> Result<String> {
        self.validate()?;
        let (x_min, x_max) = bounds(&self.x);
        let all_y: Vec<f64> = self.series.iter().flat_map(|s| s.y.iter().cloned()).collect();
        let (y_min, y_max) = bounds(&all_y);
        let sx = |v: f64| MARGIN + (v - x_min) / (x_max - x_min).max(1e-12) * (WIDTH - 2.0 * MARGIN);
        let sy =
            |v: f64| HEIGHT - MARGIN - (v - y_min) / (y_max - y_min).max(1e-12) * (HEIGHT - 2.0 * MARGIN);

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        // axes
        svg.push_str(&format!(
            "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
            m = MARGIN,
            b = HEIGHT - MARGIN,
            r = WIDTH - MARGIN,
            t = MARGIN,
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
            WIDTH / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"13\" \
             transform=\"rotate(-90 16 {})\">{}</text>\n",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        ));
        // axis extremes
        for (v, x, y, anchor) in [
            (x_min, sx(x_min), HEIGHT - MARGIN + 18.0, "middle"),
            (x_max, sx(x_max), HEIGHT - MARGIN + 18.0, "middle"),
            (y_min, MARGIN - 8.0, sy(y_min) + 4.0, "end"),
            (y_max, MARGIN - 8.0, sy(y_max) + 4.0, "end"),
        ] {
            svg.push_str(&format!(
                "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"{anchor}\" font-size=\"11\">{v:.3}</text>\n"
            ));
        }
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let points: Vec<String> = self
                .x
                .iter()
                .zip(&s.y)
                .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                points.join(" ")
            ));
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
                WIDTH - MARGIN + 4.0,
                MARGIN + 16.0 * i as f64,
                escape(&s.label)
            ));
        }
        svg.push_str("</svg>\n");
        Ok(svg)
    }

    /// Write `stem.svg` plus `stem.dat` (whitespace-separated columns:
    /// x, then one column per series) into `dir`. Returns the SVG path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        let svg_path = dir.join(format!("{stem}.svg"));
        std::fs::write(&svg_path, self.render_svg()?)?;
        let mut dat = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{stem}.dat")))?);
        write!(dat, "# {}", self.x_label)?;
        for s in &self.series {
            write!(dat, " {}", s.label.replace(' ', "_"))?;
        }
        writeln!(dat)?;
        for (i, x) in self.x.iter().enumerate() {
            write!(dat, "{x:.17e}")?;
            for s in &self.series {
                write!(dat, " {:.17e}", s.y[i])?;
            }
            writeln!(dat)?;
        }
        Ok(svg_path)
    }
}

fn bounds(values: &[f64]) -> (f64, f64) {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        (min - 0.5, max + 0.5)
    } else {
        (min, max)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plot() -> LinePlot {
        LinePlot {
            title: "watermark retention".into(),
            x_label: "epoch".into(),
            y_label: "rate".into(),
            x: vec![0.0, 1.0, 2.0, 3.0],
            series: vec![
                Series {
                    label: "wsr".into(),
                    y: vec![1.0, 0.99, 0.98, 0.97],
                },
                Series {
                    label: "acc novel".into(),
                    y: vec![0.95, 0.95, 0.94, 0.94],
                },
            ],
        }
    }

    #[test]
    fn svg_contains_one_polyline_per_series() {
        let svg = plot().render_svg().unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("watermark retention"));
        assert!(svg.contains("wsr"));
    }

    #[test]
    fn data_file_round_trips_the_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = plot();
        let svg_path = p.write(dir.path(), "retention").unwrap();
        assert!(svg_path.exists());
        let dat = std::fs::read_to_string(dir.path().join("retention.dat")).unwrap();
        let rows: Vec<&str> = dat.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for (i, row) in rows.iter().enumerate() {
            let cols: Vec<f64> = row
                .split_whitespace()
                .map(|c| c.parse().unwrap())
                .collect();
            assert_eq!(cols[0], p.x[i]);
            assert_eq!(cols[1], p.series[0].y[i]);
            assert_eq!(cols[2], p.series[1].y[i]);
        }
    }

    #[test]
    fn empty_and_mismatched_data_error() {
        let mut p = plot();
        p.series.clear();
        assert!(p.render_svg().is_err());
        let mut p = plot();
        p.series[0].y.pop();
        assert!(p.render_svg().is_err());
        let mut p = plot();
        p.series[0].y[0] = f64::NAN;
        assert!(p.render_svg().is_err());
    }

    #[test]
    fn constant_series_renders() {
        let p = LinePlot {
            title: "flat".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x: vec![0.0, 1.0],
            series: vec![Series {
                label: "c".into(),
                y: vec![0.5, 0.5],
            }],
        };
        assert!(p.render_svg().is_ok());
    }
}
