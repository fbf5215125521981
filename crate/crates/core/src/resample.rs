//! Plane resampling shared by image resizing, mask resizing and saliency upsampling.
//!
//! Both kernels use half-pixel centers: output pixel `i` samples the source at
//! `(i + 0.5) * src / dst - 0.5`.

use ndarray::Array2;

/// Bilinear resampling of a single plane. Out-of-range source coordinates are
/// clamped to the border, so outputs stay within the input's value range.
pub fn bilinear(src: &Array2<f32>, (out_h, out_w): (usize, usize)) -> Array2<f32> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let rows = axis_weights(in_h, out_h);
    let cols = axis_weights(in_w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = rows[y];
        let (x0, x1, fx) = cols[x];
        let top = src[[y0, x0]] as f64 * (1.0 - fx) + src[[y0, x1]] as f64 * fx;
        let bottom = src[[y1, x0]] as f64 * (1.0 - fx) + src[[y1, x1]] as f64 * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

fn axis_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Source index sampled by output index `i` under nearest-neighbour resampling.
pub fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    let pos = ((i as f64 + 0.5) * src as f64 / dst as f64).floor() as usize;
    pos.min(src - 1)
}

pub fn nearest<T: Copy>(src: &Array2<T>, (out_h, out_w): (usize, usize)) -> Array2<T> {
    let (in_h, in_w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        src[[nearest_index(y, in_h, out_h), nearest_index(x, in_w, out_w)]]
    })
}
