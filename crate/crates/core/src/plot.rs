//! Loss-log parsing and convergence-curve rendering.
//!
//! The plot command reads one or more line-delimited loss logs, applies a
//! moving-average smoothing window and emits a PNG with the curves plus the
//! numeric table behind it as CSV. Multiple logs overlay their totals for
//! run-to-run comparison.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::train::{LogHeader, LogStep};
use crate::{Error, Result};

/// A parsed loss log.
#[derive(Debug, Clone)]
pub struct LossLog {
    pub header: LogHeader,
    pub steps: Vec<LogStep>,
}

/// Parse a loss log; malformed lines are reported with their line number.
pub fn parse_loss_log(reader: impl BufRead) -> Result<LossLog> {
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or(Error::LossLog { line: 1, msg: "empty log".into() })??;
    let header: LogHeader = serde_json::from_str(&first)
        .map_err(|e| Error::LossLog { line: 1, msg: format!("bad header: {e}") })?;
    let mut steps = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let step: LogStep = serde_json::from_str(&text)
            .map_err(|e| Error::LossLog { line: line_no, msg: format!("bad record: {e}") })?;
        steps.push(step);
    }
    Ok(LossLog { header, steps })
}

pub fn load_loss_log(path: &Path) -> Result<LossLog> {
    let f = std::fs::File::open(path)?;
    parse_loss_log(std::io::BufReader::new(f))
}

/// Centered-window moving average; window 1 returns the input unchanged.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 || values.is_empty() {
        return values.to_vec();
    }
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// One named curve.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

const CURVE_COLORS: &[[u8; 3]] = &[
    [198, 45, 45],
    [45, 110, 198],
    [39, 150, 74],
    [214, 141, 21],
    [140, 66, 179],
    [23, 166, 166],
    [120, 120, 120],
];

/// Render curves onto a white canvas with axes and min/max tick labels.
pub fn render_curves(series: &[Series], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let margin_l = 48i64;
    let margin_b = 24i64;
    let margin_t = 10i64;
    let margin_r = 10i64;
    let plot_w = width as i64 - margin_l - margin_r;
    let plot_h = height as i64 - margin_t - margin_b;

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    if (y_max - y_min).abs() < 1e-12 {
        y_max = y_min + 1.0;
    }

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = margin_l + ((x - x_min) / (x_max - x_min) * plot_w as f64) as i64;
        let py = margin_t + plot_h - ((y - y_min) / (y_max - y_min) * plot_h as f64) as i64;
        (px, py)
    };
    fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    // Axes.
    for x in margin_l..margin_l + plot_w {
        put(&mut img, x, margin_t + plot_h, [0, 0, 0]);
    }
    for y in margin_t..margin_t + plot_h + 1 {
        put(&mut img, margin_l, y, [0, 0, 0]);
    }

    // Curves.
    for (si, s) in series.iter().enumerate() {
        let color = CURVE_COLORS[si % CURVE_COLORS.len()];
        let mut prev: Option<(i64, i64)> = None;
        for (&x, &y) in s.xs.iter().zip(&s.ys) {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, color);
            }
            prev = Some(p);
        }
        // Legend swatch stack in the top-right corner.
        for dy in 0..6i64 {
            for dx in 0..14i64 {
                put(
                    &mut img,
                    width as i64 - margin_r - 16 + dx,
                    margin_t + 4 + si as i64 * 9 + dy,
                    color,
                );
            }
        }
    }

    // Numeric tick labels at the extremes.
    draw_text(&mut img, 2, (margin_t + 2) as u32, &format_tick(y_max));
    draw_text(&mut img, 2, (margin_t + plot_h - 7) as u32, &format_tick(y_min));
    draw_text(&mut img, margin_l as u32, (margin_t + plot_h + 6) as u32, &format_tick(x_min));
    let xmax_label = format_tick(x_max);
    let xmax_w = (xmax_label.len() as i64) * 6;
    draw_text(
        &mut img,
        (margin_l + plot_w - xmax_w).max(0) as u32,
        (margin_t + plot_h + 6) as u32,
        &xmax_label,
    );
    img
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 1000.0 || v.abs() < 0.01 {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: [u8; 3]) {
    let (mut x0, mut y0) = from;
    let (x1, y1) = to;
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x0 >= 0 && y0 >= 0 && (x0 as u32) < img.width() && (y0 as u32) < img.height() {
            img.put_pixel(x0 as u32, y0 as u32, Rgb(color));
        }
        if x0 == x1 && y0 == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x0 += sx;
        }
        if e2 <= dx {
            err += dx;
            y0 += sy;
        }
    }
}

/// 5x7 bitmap glyphs for the characters tick labels can contain.
fn glyph(c: char) -> Option<[u8; 7]> {
    // Each byte is one row, low 5 bits used, MSB-left.
    Some(match c {
        '0' => [0x0e, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0e],
        '1' => [0x04, 0x0c, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1f],
        '3' => [0x1f, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0e],
        '4' => [0x02, 0x06, 0x0a, 0x12, 0x1f, 0x02, 0x02],
        '5' => [0x1f, 0x10, 0x1e, 0x01, 0x01, 0x11, 0x0e],
        '6' => [0x06, 0x08, 0x10, 0x1e, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x0f, 0x01, 0x02, 0x0c],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0c, 0x0c],
        '-' => [0x00, 0x00, 0x00, 0x1f, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1f, 0x04, 0x04, 0x00],
        'e' => [0x00, 0x00, 0x0e, 0x11, 0x1f, 0x10, 0x0e],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    let mut cx = x;
    for c in text.chars() {
        if let Some(rows) = glyph(c) {
            for (ry, row) in rows.iter().enumerate() {
                for bit in 0..5u32 {
                    if row & (0x10 >> bit) != 0 {
                        let px = cx + bit;
                        let py = y + ry as u32;
                        if px < img.width() && py < img.height() {
                            img.put_pixel(px, py, Rgb([30, 30, 30]));
                        }
                    }
                }
            }
        }
        cx += 6;
    }
}

/// Emit the convergence curves and the numeric table for one or more runs.
///
/// One log plots every loss term; several logs overlay their totals. Returns
/// `(png_path, csv_path)`.
pub fn plot_logs(
    log_paths: &[PathBuf],
    smoothing: usize,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if log_paths.is_empty() {
        return Err(Error::InvalidArgument("plot needs at least one log".into()));
    }
    let logs: Vec<LossLog> = log_paths
        .iter()
        .map(|p| load_loss_log(p))
        .collect::<Result<_>>()?;
    for (log, path) in logs.iter().zip(log_paths) {
        if log.steps.is_empty() {
            return Err(Error::LossLog {
                line: 2,
                msg: format!("{} has no step records", path.display()),
            });
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let png_path = out_dir.join("convergence.png");
    let csv_path = out_dir.join("convergence.csv");

    let mut series = Vec::new();
    if logs.len() == 1 {
        let log = &logs[0];
        let xs: Vec<f64> = log.steps.iter().map(|s| s.step as f64).collect();
        for (name, extract) in [
            ("total", Box::new(|s: &LogStep| s.total) as Box<dyn Fn(&LogStep) -> f64>),
            ("l_b", Box::new(|s| s.l_b)),
            ("l_g", Box::new(|s| s.l_g)),
            ("l_c", Box::new(|s| s.l_c)),
            ("l_a", Box::new(|s| s.l_a)),
            ("l_s", Box::new(|s| s.l_s)),
        ] {
            let raw: Vec<f64> = log.steps.iter().map(|s| extract(s)).collect();
            series.push(Series { name: name.into(), xs: xs.clone(), ys: smooth(&raw, smoothing) });
        }
    } else {
        for (i, log) in logs.iter().enumerate() {
            let xs: Vec<f64> = log.steps.iter().map(|s| s.step as f64).collect();
            let raw: Vec<f64> = log.steps.iter().map(|s| s.total).collect();
            series.push(Series {
                name: format!("run{i}_total"),
                xs,
                ys: smooth(&raw, smoothing),
            });
        }
    }

    let img = render_curves(&series, 640, 400);
    img.save(&png_path)
        .map_err(|e| Error::InvalidArgument(format!("cannot write png: {e}")))?;

    let mut csv = std::io::BufWriter::new(std::fs::File::create(&csv_path)?);
    write!(csv, "step")?;
    for s in &series {
        write!(csv, ",{}", s.name)?;
    }
    writeln!(csv)?;
    let longest = series.iter().map(|s| s.xs.len()).max().unwrap_or(0);
    for i in 0..longest {
        let step = series
            .iter()
            .find_map(|s| s.xs.get(i))
            .copied()
            .unwrap_or(i as f64);
        write!(csv, "{step}")?;
        for s in &series {
            match s.ys.get(i) {
                Some(v) => write!(csv, ",{v}")?,
                None => write!(csv, ",")?,
            }
        }
        writeln!(csv)?;
    }
    csv.flush()?;
    Ok((png_path, csv_path))
}
