//! Minimal deterministic SVG line plots for the harness CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn axis(v: f64, log: bool) -> f64 {
    if log {
        v.log10()
    } else {
        v
    }
}

fn bounds(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return None;
    }
    if hi - lo < 1e-12 {
        Some((lo - 0.5, hi + 0.5))
    } else {
        Some((lo, hi))
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64, log: bool) -> String {
    let v = if log { 10f64.powf(v) } else { v };
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl LinePlot {
    /// Points with non-positive coordinates on a log axis are dropped.
    fn visible(&self) -> Vec<(usize, Vec<(f64, f64)>)> {
        self.series
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let pts = s
                    .points
                    .iter()
                    .filter(|(x, y)| x.is_finite() && y.is_finite() && (!self.log_x || *x > 0.0) && (!self.log_y || *y > 0.0))
                    .map(|&(x, y)| (axis(x, self.log_x), axis(y, self.log_y)))
                    .collect();
                (i, pts)
            })
            .collect()
    }

    pub fn render(&self) -> Result<String> {
        let vis = self.visible();
        let all = || vis.iter().flat_map(|(_, p)| p.iter().copied());
        let (x0, x1) = bounds(all().map(|p| p.0)).ok_or_else(|| Error::Parse("nothing to plot".into()))?;
        let (y0, y1) = bounds(all().map(|p| p.1)).ok_or_else(|| Error::Parse("nothing to plot".into()))?;
        let pw = W - LEFT - RIGHT;
        let ph = H - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            W / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (px, py) = (sx(xv), sy(yv));
            let _ = writeln!(
                s,
                r#"<line x1="{px:.1}" y1="{:.1}" x2="{px:.1}" y2="{:.1}" stroke="black"/><text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                tick_label(xv, self.log_x)
            );
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{py:.1}" x2="{LEFT}" y2="{py:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                py + 4.0,
                tick_label(yv, self.log_y)
            );
        }
        let x_label = if self.log_x { format!("{} (log)", self.x_label) } else { self.x_label.clone() };
        let y_label = if self.log_y { format!("{} (log)", self.y_label) } else { self.y_label.clone() };
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            H - 12.0,
            escape(&x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&y_label)
        );
        for (i, pts) in &vis {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            if pts.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    path.join(" ")
                );
            }
            if pts.len() <= 50 {
                for &(x, y) in pts {
                    let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
                }
            }
            let ly = TOP + 14.0 + 16.0 * *i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                W - RIGHT - 130.0,
                W - RIGHT - 110.0,
                W - RIGHT - 105.0,
                ly + 4.0,
                escape(&self.series[*i].name)
            );
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

/// A parsed CSV: header and numeric columns (non-numeric cells become NaN).
#[derive(Debug, Clone)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Parse(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.iter().all(String::is_empty) {
            return Err(Error::Parse("csv has no header".into()));
        }
        let rows = rdr
            .records()
            .map(|r| {
                let r = r.map_err(|e| Error::Parse(e.to_string()))?;
                Ok(r.iter().map(|c| c.trim().parse().unwrap_or(f64::NAN)).collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        if rows.is_empty() {
            return Err(Error::Parse("csv has no data rows".into()));
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    fn series(&self, x: &str, ys: &[&str]) -> Result<Vec<Series>> {
        let xi = self.column(x).ok_or_else(|| Error::Parse(format!("missing column `{x}`")))?;
        ys.iter()
            .map(|y| {
                let yi = self.column(y).ok_or_else(|| Error::Parse(format!("missing column `{y}`")))?;
                Ok(Series {
                    name: (*y).to_string(),
                    points: self.rows.iter().map(|r| (r[xi], r[yi])).collect(),
                })
            })
            .collect()
    }
}

fn plot(title: &str, x: &str, y: &str, log_x: bool, log_y: bool, series: Vec<Series>) -> LinePlot {
    LinePlot {
        title: title.into(),
        x_label: x.into(),
        y_label: y.into(),
        log_x,
        log_y,
        series,
    }
}

/// Plots appropriate for a CSV, keyed by file-name suffix.
pub fn plots_for(table: &Table) -> Result<Vec<(&'static str, LinePlot)>> {
    let has = |c: &str| table.column(c).is_some();
    if has("step") && has("l_diff") {
        let s = table.series("step", &["l_plan", "l_diff", "l_total"])?;
        return Ok(vec![
            ("loss", plot("Training loss", "step", "loss", false, false, s.clone())),
            ("loss_log", plot("Training loss", "step", "loss", false, true, s)),
        ]);
    }
    if has("n_bins") {
        let s = table.series("n_bins", &["success"])?;
        return Ok(vec![("", plot("Success vs bin count", "bins N", "success rate", true, false, s))]);
    }
    if has("m") && has("success") {
        let s = table.series("m", &["success"])?;
        let l = table.series("m", &["latency_ms", "measured_ms"])?;
        return Ok(vec![
            ("", plot("Success vs horizon factor", "M", "success rate", false, false, s)),
            ("latency", plot("Latency vs horizon factor", "M", "ms per chunk", false, false, l)),
        ]);
    }
    if has("m") && has("amortized_ms") {
        let s = table.series("m", &["amortized_ms", "measured_ms"])?;
        return Ok(vec![("", plot("Amortized latency", "M", "ms per chunk", false, false, s))]);
    }
    let x = table.header[0].clone();
    let ys: Vec<&str> = table.header[1..]
        .iter()
        .enumerate()
        .filter(|(i, _)| table.rows.iter().any(|r| r[i + 1].is_finite()))
        .map(|(_, h)| h.as_str())
        .collect();
    if ys.is_empty() {
        return Err(Error::Parse("no numeric columns to plot".into()));
    }
    let s = table.series(&x, &ys)?;
    Ok(vec![("", plot("", &x, "value", false, false, s))])
}

/// Render every plot for each CSV into `out_dir`. All inputs are parsed and
/// rendered before anything is written.
pub fn plot_files(paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut pending = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path)?;
        let table = Table::parse(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Parse(format!("bad file name {}", path.display())))?;
        for (suffix, p) in plots_for(&table)? {
            let name = if suffix.is_empty() {
                format!("{stem}.svg")
            } else {
                format!("{stem}_{suffix}.svg")
            };
            pending.push((out_dir.join(name), p.render()?));
        }
    }
    fs::create_dir_all(out_dir)?;
    for (path, svg) in &pending {
        fs::write(path, svg)?;
    }
    Ok(pending.into_iter().map(|(p, _)| p).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_give_linear_and_log_plots() {
        let t = Table::parse("# config_hash=ab\nstep,l_plan,l_diff,l_total,acc_ema,source\n0,2,1,2,0,gt\n1,1,0.5,1,0.1,pred\n").unwrap();
        let plots = plots_for(&t).unwrap();
        assert_eq!(plots.len(), 2);
        assert!(plots[1].1.log_y);
        let svg = plots[0].1.render().unwrap();
        assert!(svg.contains("<polyline") && svg.contains("l_diff"));
        assert_eq!(svg, plots[0].1.render().unwrap());
    }

    #[test]
    fn empty_csv_is_an_error() {
        assert!(Table::parse("").is_err());
        assert!(Table::parse("# config_hash=x\nn_bins,success\n").is_err());
    }

    #[test]
    fn log_axis_drops_non_positive_points() {
        let p = plot(
            "t",
            "x",
            "y",
            false,
            true,
            vec![Series {
                name: "a".into(),
                points: vec![(0.0, 0.0), (1.0, 1.0), (2.0, 10.0)],
            }],
        );
        assert_eq!(p.visible()[0].1.len(), 2);
    }
}
