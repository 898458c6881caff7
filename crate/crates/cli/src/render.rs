//! Minimal raster rendering: grayscale PNGs, a categorical plot with error
//! bars, and a built-in 5x7 pixel font, so plots need no external stack and
//! re-render byte-identically.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::CmdError;

/// 5x7 glyphs, one byte per row, low five bits left-to-right.
const FONT: &[(char, [u8; 7])] = &[
    (' ', [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]),
    ('0', [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E]),
    ('1', [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('2', [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F]),
    ('3', [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E]),
    ('4', [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02]),
    ('5', [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E]),
    ('6', [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E]),
    ('7', [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08]),
    ('8', [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E]),
    ('9', [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C]),
    ('a', [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F]),
    ('b', [0x10, 0x10, 0x16, 0x19, 0x11, 0x19, 0x16]),
    ('c', [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E]),
    ('d', [0x01, 0x01, 0x0D, 0x13, 0x11, 0x13, 0x0D]),
    ('e', [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E]),
    ('f', [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08]),
    ('g', [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E]),
    ('h', [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11]),
    ('i', [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E]),
    ('j', [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C]),
    ('k', [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12]),
    ('l', [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E]),
    ('m', [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15]),
    ('n', [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11]),
    ('o', [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E]),
    ('p', [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10]),
    ('q', [0x00, 0x00, 0x0F, 0x11, 0x0F, 0x01, 0x01]),
    ('r', [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10]),
    ('s', [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E]),
    ('t', [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06]),
    ('u', [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D]),
    ('v', [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04]),
    ('w', [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A]),
    ('x', [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11]),
    ('y', [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E]),
    ('z', [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F]),
    ('.', [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C]),
    ('-', [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00]),
    ('_', [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F]),
    (':', [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00]),
    ('+', [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00]),
    ('/', [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10]),
    ('(', [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02]),
    (')', [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08]),
];

fn glyph(c: char) -> [u8; 7] {
    let c = c.to_ascii_lowercase();
    FONT.iter()
        .find(|(g, _)| *g == c)
        .map(|(_, rows)| *rows)
        .unwrap_or([0x1F, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1F])
}

pub const GLYPH_ADVANCE: u32 = 6;

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(w: u32, h: u32, background: Rgb<u8>) -> Canvas {
        Canvas { img: RgbImage::from_pixel(w, h, background) }
    }

    pub fn set(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.set(x, y, color);
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

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, color: Rgb<u8>) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.set(xx, yy, color);
            }
        }
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        let mut cx = x;
        for c in s.chars() {
            let rows = glyph(c);
            for (ry, bits) in rows.iter().enumerate() {
                for rx in 0..5 {
                    if bits >> (4 - rx) & 1 == 1 {
                        self.set(cx + rx as i64, y + ry as i64, color);
                    }
                }
            }
            cx += GLYPH_ADVANCE as i64;
        }
    }

    pub fn text_width(s: &str) -> i64 {
        s.chars().count() as i64 * GLYPH_ADVANCE as i64
    }

    pub fn save(&self, path: &Path) -> Result<(), CmdError> {
        self.img
            .save(path)
            .map_err(|e| CmdError::runtime(format!("write {}: {e}", path.display())))
    }
}

pub struct Series {
    pub name: String,
    pub color: Rgb<u8>,
    /// (mean, sd) per category, in category order.
    pub points: Vec<(f64, f64)>,
}

/// Categorical plot with per-point error bars, one category per x position.
pub fn category_plot(
    path: &Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    categories: &[String],
    series: &[Series],
) -> Result<(), CmdError> {
    let (w, h) = (640i64, 440i64);
    let (left, right, top, bottom) = (70i64, 110i64, 46i64, 56i64);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let bg = Rgb([255u8, 255, 255]);
    let fg = Rgb([40u8, 40, 40]);
    let grid = Rgb([225u8, 225, 225]);
    let mut c = Canvas::new(w as u32, h as u32, bg);

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for &(m, sd) in &s.points {
            lo = lo.min(m - sd);
            hi = hi.max(m + sd);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        return Err(CmdError::runtime("plot has no finite points".to_string()));
    }
    let pad = ((hi - lo) * 0.15).max(0.01);
    let (lo, hi) = (lo - pad, hi + pad);
    let y_of = |v: f64| top + ((hi - v) / (hi - lo) * ph as f64).round() as i64;
    let x_of = |i: usize| left + ((i as f64 + 0.5) / categories.len() as f64 * pw as f64) as i64;

    let step = [0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5]
        .into_iter()
        .find(|s| (hi - lo) / s <= 8.0)
        .unwrap_or(1.0);
    let mut tick = (lo / step).ceil() * step;
    while tick <= hi {
        let y = y_of(tick);
        c.line(left, y, left + pw, y, grid);
        let label = format!("{tick:.3}");
        c.text(left - 6 - Canvas::text_width(&label), y - 3, &label, fg);
        tick += step;
    }

    c.line(left, top, left, top + ph, fg);
    c.line(left, top + ph, left + pw, top + ph, fg);
    for (i, cat) in categories.iter().enumerate() {
        let x = x_of(i);
        c.line(x, top + ph, x, top + ph + 4, fg);
        c.text(x - Canvas::text_width(cat) / 2, top + ph + 8, cat, fg);
    }
    c.text(
        left + pw / 2 - Canvas::text_width(x_label) / 2,
        h - 20,
        x_label,
        fg,
    );
    c.text(8, top - 24, y_label, fg);
    c.text(left + pw / 2 - Canvas::text_width(title) / 2, 12, title, fg);

    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for (i, &(mean, sd)) in s.points.iter().enumerate() {
            let (x, y) = (x_of(i), y_of(mean));
            let (ylo, yhi) = (y_of(mean - sd), y_of(mean + sd));
            c.line(x, yhi, x, ylo, s.color);
            c.line(x - 3, yhi, x + 3, yhi, s.color);
            c.line(x - 3, ylo, x + 3, ylo, s.color);
            if let Some((px, py)) = prev {
                c.line(px, py, x, y, s.color);
            }
            c.fill_rect(x - 2, y - 2, 5, 5, s.color);
            prev = Some((x, y));
        }
    }

    for (i, s) in series.iter().enumerate() {
        let y = top + 10 + 16 * i as i64;
        let x = left + pw + 16;
        c.fill_rect(x, y, 10, 10, s.color);
        c.text(x + 16, y + 1, &s.name, fg);
    }

    c.save(path)
}

/// Writes `data` (values in [0, 1], row-major `h` x `w`) as a grayscale PNG.
pub fn write_gray_png(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<(), CmdError> {
    assert_eq!(data.len(), w * h);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (i, v) in data.iter().enumerate() {
        let byte = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel((i % w) as u32, (i / w) as u32, image::Luma([byte]));
    }
    img.save(path)
        .map_err(|e| CmdError::runtime(format!("write {}: {e}", path.display())))
}
