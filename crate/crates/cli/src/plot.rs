//! Minimal PNG charts: line plots, bar histograms and scatter plots on a
//! white canvas with axes. No text; the matching CSV files carry the values.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::CliResult;

const WIDTH: u32 = 480;
const HEIGHT: u32 = 320;
const MARGIN: u32 = 24;

pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([214, 39, 40]),
    Rgb([44, 160, 44]),
    Rgb([255, 127, 14]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

struct Canvas {
    img: RgbImage,
    x: (f64, f64),
    y: (f64, f64),
}

impl Canvas {
    fn new(x: (f64, f64), y: (f64, f64)) -> Self {
        let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
        let black = Rgb([0, 0, 0]);
        for px in MARGIN..WIDTH - MARGIN / 2 {
            img.put_pixel(px, HEIGHT - MARGIN, black);
        }
        for py in MARGIN / 2..=HEIGHT - MARGIN {
            img.put_pixel(MARGIN, py, black);
        }
        let widen = |(a, b): (f64, f64)| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
        Self { img, x: widen(x), y: widen(y) }
    }

    fn to_px(&self, x: f64, y: f64) -> (f64, f64) {
        let w = (WIDTH - MARGIN - MARGIN / 2) as f64;
        let h = (HEIGHT - MARGIN - MARGIN / 2) as f64;
        let px = MARGIN as f64 + (x - self.x.0) / (self.x.1 - self.x.0) * w;
        let py = (HEIGHT - MARGIN) as f64 - (y - self.y.0) / (self.y.1 - self.y.0) * h;
        (px, py)
    }

    fn dot(&mut self, px: f64, py: f64, c: Rgb<u8>) {
        if px >= 0.0 && py >= 0.0 && (px as u32) < WIDTH && (py as u32) < HEIGHT {
            self.img.put_pixel(px as u32, py as u32, c);
        }
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (p, q) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        let steps = (q.0 - p.0).abs().max((q.1 - p.1).abs()).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.dot(p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1), c);
        }
    }

    fn fill(&mut self, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
        let (p, q) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        for px in p.0.min(q.0).round() as i64..q.0.max(p.0).round() as i64 {
            for py in p.1.min(q.1).round() as i64..q.1.max(p.1).round() as i64 {
                self.dot(px as f64, py as f64, c);
            }
        }
    }

    fn save(self, path: &Path) -> CliResult<()> {
        self.img.save(path).map_err(edgeshift::Error::from)?;
        Ok(())
    }
}

fn bounds<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

/// One polyline per series, colors from [`PALETTE`] in order.
pub fn lines(series: &[Vec<(f64, f64)>], y_range: Option<(f64, f64)>, path: &Path) -> CliResult<()> {
    let x = bounds(series.iter().flatten().map(|p| &p.0));
    let y = y_range.unwrap_or_else(|| bounds(series.iter().flatten().map(|p| &p.1)));
    if !x.0.is_finite() {
        return Canvas::new((0.0, 1.0), (0.0, 1.0)).save(path);
    }
    let mut c = Canvas::new(x, y);
    for (n, s) in series.iter().enumerate() {
        let color = PALETTE[n % PALETTE.len()];
        for w in s.windows(2) {
            c.segment(w[0], w[1], color);
        }
        if let [only] = s.as_slice() {
            c.segment(*only, *only, color);
        }
    }
    c.save(path)
}

/// Bars over `[edges[n], edges[n + 1])` with heights `counts[n]`.
pub fn bars(edges: &[f64], counts: &[u64], path: &Path) -> CliResult<()> {
    let top = counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let x = match (edges.first(), edges.last()) {
        (Some(a), Some(b)) => (*a, *b),
        _ => (0.0, 1.0),
    };
    let mut c = Canvas::new(x, (0.0, top));
    for (n, &count) in counts.iter().enumerate() {
        let gap = (edges[n + 1] - edges[n]) * 0.1;
        c.fill((edges[n] + gap, 0.0), (edges[n + 1] - gap, count as f64), PALETTE[0]);
    }
    c.save(path)
}

pub fn scatter(points: &[(f64, f64)], path: &Path) -> CliResult<()> {
    let x = bounds(points.iter().map(|p| &p.0));
    let y = bounds(points.iter().map(|p| &p.1));
    if !x.0.is_finite() {
        return Canvas::new((0.0, 1.0), (0.0, 1.0)).save(path);
    }
    let mut c = Canvas::new(x, y);
    for p in points {
        let (px, py) = c.to_px(p.0, p.1);
        c.dot(px, py, PALETTE[0]);
    }
    c.save(path)
}
