//! Static PNG plots. No text is drawn; each plot is paired with a JSON or
//! CSV file holding the plotted numbers.

use std::path::Path;

use plotters::prelude::*;

use crate::CliError;

const SIZE: (u32, u32) = (640, 400);
const PALETTE: [RGBColor; 8] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
    RGBColor(227, 119, 194),
    RGBColor(127, 127, 127),
];

pub fn color(i: usize) -> RGBColor {
    PALETTE[i % PALETTE.len()]
}

fn plot_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

fn bounds(series: &[Vec<(f64, f64)>]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
    (pad(x0, x1), pad(y0.min(0.0), y1))
}

/// Line plot of several series; axes are drawn, ticks are not.
pub fn lines(path: &Path, series: &[Vec<(f64, f64)>], fixed: Option<((f64, f64), (f64, f64))>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let ((x0, x1), (y0, y1)) = fixed.unwrap_or_else(|| bounds(series));
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series([
            PathElement::new(vec![(x0, y0), (x1, y0)], BLACK),
            PathElement::new(vec![(x0, y0), (x0, y1)], BLACK),
        ])
        .map_err(|e| plot_err(path, e))?;
    for (i, s) in series.iter().enumerate() {
        chart
            .draw_series(LineSeries::new(s.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()), color(i)))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// Bar chart; `groups[g][k]` is bar `k` of group `g`.
pub fn bars(path: &Path, groups: &[Vec<f64>]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    let per = groups.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let n = groups.len().max(1);
    let top = groups.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max).max(1e-9);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let width = (n * (per + 1)) as f64;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0.0..width, 0.0..top * 1.05)
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series([PathElement::new(vec![(0.0, 0.0), (width, 0.0)], BLACK)])
        .map_err(|e| plot_err(path, e))?;
    for (g, vals) in groups.iter().enumerate() {
        for (k, &v) in vals.iter().enumerate() {
            let x = (g * (per + 1) + k) as f64 + 0.5;
            let v = if v.is_finite() { v } else { 0.0 };
            chart
                .draw_series([Rectangle::new([(x, 0.0), (x + 1.0, v)], color(k).filled())])
                .map_err(|e| plot_err(path, e))?;
        }
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// Heat map of a count grid, darker for larger counts.
pub fn heatmap(path: &Path, grid: &[Vec<usize>]) -> Result<(), CliError> {
    let rows = grid.len().max(1);
    let cols = grid.first().map_or(1, Vec::len).max(1);
    let top = grid.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    let root = BitMapBackend::new(path, (400, 400)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(10)
        .build_cartesian_2d(0.0..cols as f64, 0.0..rows as f64)
        .map_err(|e| plot_err(path, e))?;
    for (r, row) in grid.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let shade = 255 - (200.0 * v as f64 / top).round() as u8;
            // image rows grow downward
            let y = (rows - 1 - r) as f64;
            chart
                .draw_series([Rectangle::new([(c as f64, y), (c as f64 + 1.0, y + 1.0)], RGBColor(shade, shade, 255).filled())])
                .map_err(|e| plot_err(path, e))?;
        }
    }
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_written_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = vec![vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)], vec![(0.0, 0.2), (2.0, 0.1)]];
        let a = dir.path().join("a.png");
        let b = dir.path().join("b.png");
        lines(&a, &s, None).unwrap();
        lines(&b, &s, None).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        bars(&dir.path().join("c.png"), &[vec![0.5, 0.2], vec![0.1, f64::NAN]]).unwrap();
        heatmap(&dir.path().join("d.png"), &[vec![0, 1], vec![3, 0]]).unwrap();
        lines(&dir.path().join("e.png"), &[], None).unwrap();
    }
}
