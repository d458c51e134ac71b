//! Minimal PNG charts — loss curves and histograms — with no text stack
//! beyond a built-in digit font. Deterministic: the same data produces the
//! same bytes.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("nothing to plot")]
    Empty,
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub const WIDTH: u32 = 960;
pub const HEIGHT: u32 = 540;
const MARGIN_L: u32 = 78;
const MARGIN_R: u32 = 24;
const MARGIN_T: u32 = 24;
const MARGIN_B: u32 = 40;

const BG: Rgb<u8> = Rgb([252, 252, 250]);
const AXIS: Rgb<u8> = Rgb([60, 60, 60]);
const GRID: Rgb<u8> = Rgb([222, 222, 218]);
pub const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

/// One named line on a chart.
pub struct Series<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

// 3×5 bitmap glyphs for the handful of characters axis labels need.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => [0b000; 5],
    }
}

fn draw_text(img: &mut RgbImage, text: &str, x0: u32, y0: u32, color: Rgb<u8>) {
    let scale = 2u32;
    let mut x = x0;
    for c in text.chars() {
        let g = glyph(c);
        for (ry, row) in g.iter().enumerate() {
            for rx in 0..3u32 {
                if row & (0b100 >> rx) != 0 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            let px = x + rx * scale + dx;
                            let py = y0 + ry as u32 * scale + dy;
                            if px < img.width() && py < img.height() {
                                img.put_pixel(px, py, color);
                            }
                        }
                    }
                }
            }
        }
        x += 4 * scale;
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.01..10_000.0).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    }
}

fn draw_line(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let (mut x, mut y) = (x0, y0);
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: Rgb<u8>) {
    for y in y0..=y1.min(img.height() - 1) {
        for x in x0..=x1.min(img.width() - 1) {
            img.put_pixel(x, y, color);
        }
    }
}

struct Frame {
    x0: u32,
    y0: u32,
    x1: u32,
    y1: u32,
    vmin: f64,
    vmax: f64,
}

impl Frame {
    fn y_of(&self, v: f64) -> i64 {
        let t = (v - self.vmin) / (self.vmax - self.vmin);
        self.y1 as i64 - (t * (self.y1 - self.y0) as f64).round() as i64
    }

    fn x_of(&self, i: usize, n: usize) -> i64 {
        let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
        self.x0 as i64 + (t * (self.x1 - self.x0) as f64).round() as i64
    }
}

fn chart_frame(img: &mut RgbImage, vmin: f64, vmax: f64, n: usize) -> Frame {
    for p in img.pixels_mut() {
        *p = BG;
    }
    let f = Frame {
        x0: MARGIN_L,
        y0: MARGIN_T,
        x1: WIDTH - MARGIN_R,
        y1: HEIGHT - MARGIN_B,
        vmin,
        vmax,
    };
    // horizontal gridlines at quarters, then the axis box
    for k in 0..=4 {
        let v = vmin + (vmax - vmin) * k as f64 / 4.0;
        let y = f.y_of(v);
        draw_line(img, f.x0 as i64, y, f.x1 as i64, y, GRID);
        draw_text(img, &fmt_tick(v), 4, (y - 5).max(0) as u32, AXIS);
    }
    draw_line(img, f.x0 as i64, f.y0 as i64, f.x0 as i64, f.y1 as i64, AXIS);
    draw_line(img, f.x0 as i64, f.y1 as i64, f.x1 as i64, f.y1 as i64, AXIS);
    draw_text(img, "0", f.x0, f.y1 as u32 + 8, AXIS);
    let last = format!("{}", n.saturating_sub(1));
    let lx = f.x1.saturating_sub(8 * last.len() as u32);
    draw_text(img, &last, lx, f.y1 as u32 + 8, AXIS);
    f
}

fn finite_bounds(series: &[Series]) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &v in s.values {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    Some((lo - pad, hi + pad))
}

/// Multi-series line chart over the sample index, written as a PNG.
pub fn line_chart(series: &[Series], path: &Path) -> Result<(), PlotError> {
    if series.is_empty() || series.iter().all(|s| s.values.is_empty()) {
        return Err(PlotError::Empty);
    }
    let (vmin, vmax) = finite_bounds(series).ok_or(PlotError::Empty)?;
    let n = series.iter().map(|s| s.values.len()).max().unwrap();
    let mut img: RgbImage = ImageBuffer::new(WIDTH, HEIGHT);
    let f = chart_frame(&mut img, vmin, vmax, n);
    for (si, s) in series.iter().enumerate() {
        let color = Rgb(PALETTE[si % PALETTE.len()]);
        let mut prev: Option<(i64, i64)> = None;
        for (i, &v) in s.values.iter().enumerate() {
            if !v.is_finite() {
                prev = None;
                continue;
            }
            let pt = (f.x_of(i, s.values.len()), f.y_of(v));
            if let Some(p) = prev {
                draw_line(&mut img, p.0, p.1, pt.0, pt.1, color);
            }
            prev = Some(pt);
        }
        // legend swatch, top-right stack
        let ly = f.y0 + 6 + 14 * si as u32;
        fill_rect(&mut img, f.x1 - 60, ly, f.x1 - 40, ly + 8, color);
    }
    img.save(path)?;
    Ok(())
}

/// Fixed-range histogram written as a PNG; values outside [lo, hi] clamp into
/// the edge bins.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64, path: &Path) -> Result<(), PlotError> {
    if values.is_empty() || bins == 0 || !(hi > lo) {
        return Err(PlotError::Empty);
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        if !v.is_finite() {
            continue;
        }
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let b = ((t * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let cmax = *counts.iter().max().unwrap() as f64;
    if cmax == 0.0 {
        return Err(PlotError::Empty);
    }
    let mut img: RgbImage = ImageBuffer::new(WIDTH, HEIGHT);
    let f = chart_frame(&mut img, 0.0, cmax * 1.05, bins + 1);
    let span = f.x1 - f.x0;
    let color = Rgb(PALETTE[1]);
    for (b, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let x0 = f.x0 + (span * b as u32) / bins as u32 + 1;
        let x1 = f.x0 + (span * (b as u32 + 1)) / bins as u32 - 1;
        let ytop = f.y_of(c as f64).max(f.y0 as i64) as u32;
        fill_rect(&mut img, x0, ytop, x1.max(x0), f.y1 - 1, color);
    }
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn loss_curve_png_has_canvas_dimensions_and_ink() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("loss.png");
        let a: Vec<f64> = (0..200).map(|i| 2.0 * (-0.01 * i as f64).exp() + 0.1).collect();
        let b: Vec<f64> = (0..200).map(|i| 1.0 / (1.0 + 0.05 * i as f64)).collect();
        line_chart(
            &[Series { name: "video", values: &a }, Series { name: "audio", values: &b }],
            &path,
        )
        .unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        let inked = img.pixels().filter(|p| p.0 != BG.0).count();
        assert!(inked > 2000, "chart should draw visible ink, got {inked} pixels");
    }

    #[test]
    fn same_data_produces_identical_bytes() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let vals: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        line_chart(&[Series { name: "s", values: &vals }], &p1).unwrap();
        line_chart(&[Series { name: "s", values: &vals }], &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn histogram_concentrates_mass_in_the_right_bin() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("h.png");
        let vals = vec![0.91; 40];
        histogram(&vals, 10, 0.0, 1.0, &path).unwrap();
        let img = image::open(&path).unwrap().to_rgb8();
        assert_eq!((img.width(), img.height()), (WIDTH, HEIGHT));
        // the bar lives in the right tenth of the plot area
        let bar = Rgb(PALETTE[1]);
        let bar_xs: Vec<u32> = img
            .enumerate_pixels()
            .filter(|(_, _, p)| p.0 == bar.0)
            .map(|(x, _, _)| x)
            .collect();
        assert!(!bar_xs.is_empty());
        let span = (WIDTH - MARGIN_R - MARGIN_L) as f64;
        let lo = MARGIN_L as f64 + span * 0.9;
        assert!(bar_xs.iter().all(|&x| (x as f64) >= lo - 2.0));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("x.png");
        assert!(matches!(line_chart(&[], &path), Err(PlotError::Empty)));
        let nothing: [f64; 0] = [];
        assert!(matches!(
            line_chart(&[Series { name: "e", values: &nothing }], &path),
            Err(PlotError::Empty)
        ));
        assert!(matches!(histogram(&nothing, 4, 0.0, 1.0, &path), Err(PlotError::Empty)));
        assert!(!path.exists(), "rejected plots must not write files");
    }

    #[test]
    fn non_finite_values_are_skipped_not_drawn() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("nan.png");
        let vals = vec![1.0, f64::NAN, 2.0, f64::INFINITY, 1.5];
        line_chart(&[Series { name: "n", values: &vals }], &path).unwrap();
        assert!(path.exists());
    }
}
