//! Spatial row maps: rotations, resampling, pooling, windowing.
//!
//! Every builder here describes a grid whose positions each own `inner`
//! consecutive rows (for example one row per class), and returns a
//! [`RowMap`] over those rows. Applied through the autodiff tape, the same
//! maps give exact adjoints for free.

use crate::autograd::RowMap;
use crate::tensor::Tensor;

/// Counter-clockwise rotation by `90 * k` of an `h x w` grid, consistent
/// with [`Tensor::rot90`]. Returns the map and the output grid size.
pub fn rot90(h: usize, w: usize, inner: usize, k: i64) -> (RowMap, usize, usize) {
    let idx = Tensor::from_fn(&[h, w], |i| (i[0] * w + i[1]) as f64).rot90(k);
    let (oh, ow) = (idx.shape()[0], idx.shape()[1]);
    let map = RowMap::gather(
        h * w * inner,
        idx.data()
            .iter()
            .flat_map(|&p| (0..inner).map(move |i| p as usize * inner + i)),
    );
    (map, oh, ow)
}

/// Per-axis bilinear taps, half-pixel centers, edge-clamped.
fn taps(n_in: usize, n_out: usize) -> Vec<[(usize, f64); 2]> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lam = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            [(i0, 1.0 - lam), (i1, lam)]
        })
        .collect()
}

/// Bilinear resize of an `h x w` grid to `oh x ow`.
pub fn bilinear(h: usize, w: usize, oh: usize, ow: usize, inner: usize) -> RowMap {
    let ty = taps(h, oh);
    let tx = taps(w, ow);
    let mut b = RowMap::builder(h * w * inner);
    let mut terms = Vec::with_capacity(4);
    for y in &ty {
        for x in &tx {
            for i in 0..inner {
                terms.clear();
                for &(sy, wy) in y {
                    for &(sx, wx) in x {
                        if wy * wx != 0.0 {
                            terms.push(((sy * w + sx) * inner + i, wy * wx));
                        }
                    }
                }
                b.push(&terms);
            }
        }
    }
    b.finish()
}

/// Non-overlapping `r x r` average pooling.
pub fn avg_pool(h: usize, w: usize, r: usize, inner: usize) -> RowMap {
    let (oh, ow) = (h / r, w / r);
    let wt = 1.0 / (r * r) as f64;
    let mut b = RowMap::builder(h * w * inner);
    let mut terms = Vec::with_capacity(r * r);
    for y in 0..oh {
        for x in 0..ow {
            for i in 0..inner {
                terms.clear();
                for dy in 0..r {
                    for dx in 0..r {
                        terms.push((((y * r + dy) * w + x * r + dx) * inner + i, wt));
                    }
                }
                b.push(&terms);
            }
        }
    }
    b.finish()
}

/// Gathers non-overlapping `r x r` windows: output rows are ordered
/// `(y', x', i, dy, dx)` so that a reshape to `[h/r, w/r, inner, r*r*width]`
/// yields one flattened window per (position, inner) pair.
pub fn windows(h: usize, w: usize, r: usize, inner: usize) -> RowMap {
    let (oh, ow) = (h / r, w / r);
    let mut idx = Vec::with_capacity(h * w * inner);
    for y in 0..oh {
        for x in 0..ow {
            for i in 0..inner {
                for dy in 0..r {
                    for dx in 0..r {
                        idx.push(((y * r + dy) * w + x * r + dx) * inner + i);
                    }
                }
            }
        }
    }
    RowMap::gather(h * w * inner, idx)
}

/// 3x3 neighbourhoods with replicate padding, rows ordered
/// `(y, x, i, ky, kx)`.
pub fn im2col3(h: usize, w: usize, inner: usize) -> RowMap {
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut idx = Vec::with_capacity(h * w * inner * 9);
    for y in 0..h {
        for x in 0..w {
            for i in 0..inner {
                for ky in -1isize..=1 {
                    for kx in -1isize..=1 {
                        let sy = clamp(y as isize + ky, h);
                        let sx = clamp(x as isize + kx, w);
                        idx.push((sy * w + sx) * inner + i);
                    }
                }
            }
        }
    }
    RowMap::gather(h * w * inner, idx)
}

/// Repeats each of `rows` rows `times` times consecutively.
pub fn repeat_rows(rows: usize, times: usize) -> RowMap {
    RowMap::gather(rows, (0..rows).flat_map(|r| std::iter::repeat_n(r, times)))
}

/// Tiles `rows` rows `times` times: output row `t * rows + r` is row `r`.
pub fn tile_rows(rows: usize, times: usize) -> RowMap {
    RowMap::gather(rows, (0..times).flat_map(|_| 0..rows))
}

/// Transposes a `a x b` arrangement of rows into `b x a`.
pub fn transpose_rows(a: usize, b: usize) -> RowMap {
    RowMap::gather(
        a * b,
        (0..b).flat_map(|j| (0..a).map(move |i| i * b + j)),
    )
}

/// Splits an `h x w` pixel grid into `p x p` patches, rows ordered
/// `(py, px, dy, dx)`.
pub fn patchify(h: usize, w: usize, p: usize) -> RowMap {
    windows(h, w, p, 1)
}
