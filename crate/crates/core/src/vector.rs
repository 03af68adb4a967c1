//! Small dense-vector helpers shared by the bank, sampling and evaluation code.

use ndarray::ArrayViewMut1;

const LANES: usize = 4;

/// Sums `f(a[i], b[i])` over four interleaved `f64` accumulators, combined in
/// a fixed order, so results are reproducible and the loop vectorizes.
#[inline(always)]
fn lane_sum(a: &[f32], b: &[f32], f: impl Fn(f64, f64) -> f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for l in 0..LANES {
            acc[l] += f(x[l] as f64, y[l] as f64);
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        acc[l] += f(x as f64, y as f64);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Dot product of two `f32` slices accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    lane_sum(a, b, |x, y| x * y)
}

#[inline]
pub fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    lane_sum(a, b, |x, y| (x - y) * (x - y))
}

/// Cosine similarity; zero vectors compare as 0.
#[inline]
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom > 0.0 {
        dot(a, b) / denom
    } else {
        0.0
    }
}

/// Scales `v` to unit length in place and returns the norm it had.
///
/// Returns `None` (leaving `v` untouched) when the norm is below `min_norm`.
pub fn normalize_in_place(mut v: ArrayViewMut1<f32>, min_norm: f64) -> Option<f64> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if !(n >= min_norm) {
        return None;
    }
    v.mapv_inplace(|x| (x as f64 / n) as f32);
    Some(n)
}
