//! Mean return against training-set size, one series per controller.

use std::path::Path;

use plotters::prelude::*;

use crate::config::ControllerKind;
use crate::error::{HarnessError, Result};
use crate::experiment::ResultRow;

const COLORS: [RGBColor; 3] = [RGBColor(31, 119, 180), RGBColor(214, 39, 40), RGBColor(44, 160, 44)];

pub fn plot_returns(path: &Path, rows: &[ResultRow], y_label: &str) -> Result<()> {
    let err = |e: &dyn std::fmt::Display| HarnessError::io(path, e);
    let mut kinds: Vec<ControllerKind> = rows.iter().map(|r| r.controller).collect();
    kinds.sort();
    kinds.dedup();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in rows {
        x0 = x0.min(r.n as f64);
        x1 = x1.max(r.n as f64);
        y0 = y0.min(r.mean - r.stderr);
        y1 = y1.max(r.mean + r.stderr);
    }
    if rows.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| {
        let w = (b - a).abs().max(1e-9) * 0.08;
        (a - w, b + w)
    };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| err(&e))?;
    chart
        .configure_mesh()
        .x_desc("training samples n")
        .y_desc(y_label)
        .draw()
        .map_err(|e| err(&e))?;
    for (k, kind) in kinds.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut pts: Vec<&ResultRow> = rows.iter().filter(|r| r.controller == *kind).collect();
        pts.sort_by_key(|r| r.n);
        chart
            .draw_series(LineSeries::new(pts.iter().map(|r| (r.n as f64, r.mean)), color.stroke_width(2)))
            .map_err(|e| err(&e))?
            .label(kind.label())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|r| Circle::new((r.n as f64, r.mean), 4, color.filled())))
            .map_err(|e| err(&e))?;
        chart
            .draw_series(pts.iter().map(|r| {
                let x = r.n as f64;
                PathElement::new(vec![(x, r.mean - r.stderr), (x, r.mean + r.stderr)], color)
            }))
            .map_err(|e| err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| err(&e))?;
    root.present().map_err(|e| err(&e))?;
    Ok(())
}
