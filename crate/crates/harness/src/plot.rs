//! SVG plots rebuilt from stored run files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{HarnessError, Result};
use crate::output::{FUNNEL_FILE, TRAJECTORY_FILE};
use crate::pacemaker::PACEMAKER_FILE;

const MAX_POINTS: usize = 2000;
const SIZE: (u32, u32) = (960, 600);

type Series = BTreeMap<String, Vec<(f64, f64)>>;

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

/// Reads `key → [(x, y)]` from a CSV with the given key and value columns.
fn read_series(path: &Path, key: impl Fn(&csv::StringRecord) -> String, x_col: usize, y_col: usize) -> Result<Series> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| HarnessError::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Series::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| HarnessError::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| plot_err(format!("{}: bad number in column {i}", path.display())))
        };
        out.entry(key(&rec)).or_default().push((parse(x_col)?, parse(y_col)?));
    }
    Ok(out)
}

fn decimate(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let stride = points.len().div_ceil(MAX_POINTS).max(1);
    let mut out: Vec<_> = points.iter().step_by(stride).copied().collect();
    if let (Some(last), Some(kept)) = (points.last(), out.last()) {
        if last != kept {
            out.push(*last);
        }
    }
    out
}

fn bounds<'a>(series: impl Iterator<Item = &'a (f64, f64)>) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in series {
        if x.is_finite() && y.is_finite() {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = 0.05 * (y1 - y0).max(1e-9);
    ((x0, x1.max(x0 + 1e-9)), (y0 - pad, y1 + pad))
}

/// Label, points, colour index, thin.
type Line = (String, Vec<(f64, f64)>, usize, bool);

type Renderer = fn(&Path, &Path) -> Result<()>;

/// One line per series; thin series share the hue of their partner.
fn line_chart(path: &Path, title: &str, y_label: &str, lines: &[Line]) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let ((x0, x1), (y0, y1)) = bounds(lines.iter().flat_map(|l| l.1.iter()));
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("t")
        .y_desc(y_label)
        .draw()
        .map_err(plot_err)?;
    for (label, pts, color, thin) in lines {
        let style = Palette99::pick(*color).stroke_width(if *thin { 1 } else { 2 });
        let series = chart
            .draw_series(LineSeries::new(decimate(pts), style))
            .map_err(plot_err)?;
        if lines.len() <= 12 && !thin {
            series
                .label(label.clone())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], Palette99::pick(*color)));
        }
    }
    if lines.len() <= 24 {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

pub fn plot_trajectory(csv: &Path, svg: &Path) -> Result<()> {
    let series = read_series(csv, |r| format!("agent {} [{}]", &r[1], &r[2]), 0, 3)?;
    let lines: Vec<_> = series
        .into_iter()
        .enumerate()
        .map(|(i, (k, v))| (k, v, i, false))
        .collect();
    line_chart(svg, "Agent states", "x", &lines)
}

/// `|ν|` (thick) inside its envelope `ψ` (thin) for every edge or node.
pub fn plot_funnel(csv: &Path, svg: &Path) -> Result<()> {
    let nu = read_series(csv, |r| r[1].to_string(), 0, 2)?;
    let psi = read_series(csv, |r| r[1].to_string(), 0, 3)?;
    let mut lines = Vec::new();
    for (i, (loc, pts)) in nu.into_iter().enumerate() {
        let abs: Vec<_> = pts.iter().map(|&(t, v)| (t, v.abs())).collect();
        lines.push((format!("|nu| {loc}"), abs, i, false));
        lines.push((format!("psi {loc}"), psi[&loc].clone(), i, true));
    }
    line_chart(svg, "Funnel margins", "|nu|, psi", &lines)
}

/// Network-mean waveforms of the first three trials.
pub fn plot_pacemaker(csv: &Path, svg: &Path) -> Result<()> {
    let series = read_series(csv, |r| format!("trial {}", &r[0]), 1, 2)?;
    let mut lines: Vec<_> = series.into_iter().collect();
    lines.sort_by_key(|(k, _)| k.trim_start_matches("trial ").parse::<usize>().unwrap_or(usize::MAX));
    let lines: Vec<_> = lines
        .into_iter()
        .take(3)
        .enumerate()
        .map(|(i, (k, v))| (k, v, i, false))
        .collect();
    line_chart(svg, "Pacemaker network mean", "z", &lines)
}

/// Renders every plot that the files in `dir` support.
pub fn emit_plots(dir: &Path) -> Result<Vec<PathBuf>> {
    let jobs: [(&str, &str, Renderer); 3] = [
        (TRAJECTORY_FILE, "trajectory.svg", plot_trajectory),
        (FUNNEL_FILE, "funnel.svg", plot_funnel),
        (PACEMAKER_FILE, "pacemaker.svg", plot_pacemaker),
    ];
    let mut written = Vec::new();
    for (input, output, render) in jobs {
        let src = dir.join(input);
        if src.is_file() {
            let dst = dir.join(output);
            render(&src, &dst)?;
            written.push(dst);
        }
    }
    if written.is_empty() {
        return Err(HarnessError::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no plottable run files"),
        ));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decimation_keeps_endpoints() {
        let pts: Vec<_> = (0..10_001).map(|i| (i as f64, 0.0)).collect();
        let d = decimate(&pts);
        assert!(d.len() <= MAX_POINTS + 1);
        assert_eq!(d[0], pts[0]);
        assert_eq!(d.last(), pts.last());
    }

    #[test]
    fn renders_svg_from_csv() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join(TRAJECTORY_FILE);
        std::fs::write(&csv, "t,agent,component,value\n0,1,0,0\n1,1,0,1\n0,2,0,2\n1,2,0,1.5\n").unwrap();
        let written = emit_plots(dir.path()).unwrap();
        assert_eq!(written.len(), 1);
        let svg = std::fs::read_to_string(&written[0]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(dir.path()).is_err());
    }
}
