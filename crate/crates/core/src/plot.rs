//! Minimal PNG rendering for curves and saliency heatmaps.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::cam::SaliencyMap;
use crate::data::ensure_parent;
use crate::error::{Error, Result};
use crate::metrics::{Curve, CurveKind};

const SIZE: u32 = 320;
const MARGIN: u32 = 24;

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
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

fn to_px((x, y): (f64, f64)) -> (i64, i64) {
    let span = (SIZE - 2 * MARGIN) as f64;
    (
        (MARGIN as f64 + x.clamp(0.0, 1.0) * span).round() as i64,
        ((SIZE - MARGIN) as f64 - y.clamp(0.0, 1.0) * span).round() as i64,
    )
}

/// Renders a curve on the unit square. ROC curves also get the chance diagonal.
pub fn render_curve(curve: &Curve) -> RgbImage {
    let mut img = RgbImage::from_pixel(SIZE, SIZE, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    let grid = Rgb([220, 220, 220]);
    for i in 1..10 {
        let v = i as f64 / 10.0;
        line(&mut img, to_px((v, 0.0)), to_px((v, 1.0)), grid);
        line(&mut img, to_px((0.0, v)), to_px((1.0, v)), grid);
    }
    line(&mut img, to_px((0.0, 0.0)), to_px((1.0, 0.0)), axis);
    line(&mut img, to_px((0.0, 0.0)), to_px((0.0, 1.0)), axis);
    if curve.kind == CurveKind::Roc {
        line(&mut img, to_px((0.0, 0.0)), to_px((1.0, 1.0)), Rgb([160, 160, 160]));
    }
    let mut pts = curve.points.clone();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    for w in pts.windows(2) {
        line(&mut img, to_px(w[0]), to_px(w[1]), Rgb([200, 30, 30]));
    }
    img
}

pub fn save_curve(curve: &Curve, path: &Path) -> Result<()> {
    ensure_parent(path)?;
    render_curve(curve).save(path).map_err(|e| Error::image(path, e))
}

/// Blue-to-red colormap for values in `[0, 1]`.
fn heat(v: f32) -> Rgb<u8> {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    Rgb([(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8])
}

pub fn save_heatmap(map: &SaliencyMap, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| heat(map.values[[y as usize, x as usize]]));
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

/// Stores a score map as 8-bit grayscale, `round(255 · s)`.
pub fn save_score_map(map: &SaliencyMap, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([crate::metrics::level(map.values[[y as usize, x as usize]], 256) as u8])
    });
    ensure_parent(path)?;
    img.save(path).map_err(|e| Error::image(path, e))
}

pub fn load_score_map(path: &Path) -> Result<SaliencyMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    SaliencyMap::new(ndarray::Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f32 / 255.0
    }))
}
