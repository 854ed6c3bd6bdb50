//! Interpolation operators along one axis.
//!
//! Every resize in the crate is separable, so it is expressed as a pair of
//! `out × in` matrices applied to rows and columns. All follow the half-pixel
//! convention (`align_corners = false`): output sample `i` reads input
//! coordinate `(i + 0.5)·in/out − 0.5`.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};

fn source_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5
}

/// Linear interpolation matrix; coordinates outside the input clamp to the edge.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    let mut m = Array2::zeros((out_len, in_len));
    if in_len == out_len {
        m.diag_mut().fill(1.0);
        return m;
    }
    for i in 0..out_len {
        let src = source_coord(i, in_len, out_len).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[[i, i0]] += 1.0 - frac;
        m[[i, i1]] += frac;
    }
    m
}

/// Cubic convolution kernel with `a = −0.75`, indices clamped at the borders.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    let mut m = Array2::zeros((out_len, in_len));
    if in_len == out_len {
        m.diag_mut().fill(1.0);
        return m;
    }
    const A: f64 = -0.75;
    let near = |x: f64| ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A;
    for i in 0..out_len {
        let src = source_coord(i, in_len, out_len);
        let base = src.floor();
        let t = src - base;
        let weights = [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)];
        for (k, w) in weights.iter().enumerate() {
            let idx = (base as isize - 1 + k as isize).clamp(0, in_len as isize - 1) as usize;
            m[[i, idx]] += w;
        }
    }
    m
}

/// Source index for each output sample under nearest-neighbor resizing.
pub fn nearest_indices(in_len: usize, out_len: usize) -> Vec<usize> {
    assert!(in_len > 0 && out_len > 0, "resample lengths must be positive");
    (0..out_len)
        .map(|i| ((i * in_len) / out_len).min(in_len - 1))
        .collect()
}

pub fn nearest_matrix(in_len: usize, out_len: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out_len, in_len));
    for (i, j) in nearest_indices(in_len, out_len).into_iter().enumerate() {
        m[[i, j]] = 1.0;
    }
    m
}

/// Operator pair for a bilinear resize of `(h, w)` grids to `(out_h, out_w)`.
pub fn bilinear_pair(
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
) -> (Arc<Array2<f64>>, Arc<Array2<f64>>) {
    (
        Arc::new(bilinear_matrix(h, out_h)),
        Arc::new(bilinear_matrix(w, out_w)),
    )
}

/// Bilinear resize of a single 2-D grid.
pub fn resize_bilinear(grid: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    if grid.dim() == (out_h, out_w) {
        return grid.to_owned();
    }
    let r = bilinear_matrix(grid.nrows(), out_h);
    let c = bilinear_matrix(grid.ncols(), out_w);
    r.dot(&grid).dot(&c.t())
}

/// Nearest-neighbor resize; output values are always copies of input values.
pub fn resize_nearest<T: Clone>(grid: ArrayView2<'_, T>, out_h: usize, out_w: usize) -> Array2<T> {
    let ri = nearest_indices(grid.nrows(), out_h);
    let ci = nearest_indices(grid.ncols(), out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| grid[[ri[i], ci[j]]].clone())
}
