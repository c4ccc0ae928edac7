//! Dense vector helpers on `[f64]`.
//!
//! Dimensions are small (a handful of features), so plain slices are used
//! throughout instead of a matrix library.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}

/// Euclidean projection onto the closed ball of the given radius.
pub fn project_ball(w: &mut [f64], radius: f64) {
    let n = norm2(w);
    if n > radius {
        let s = radius / n;
        for v in w.iter_mut() {
            *v *= s;
        }
        // Rounding can leave the norm a few ulps above the radius.
        while norm2(w) > radius {
            for v in w.iter_mut() {
                *v *= 1.0 - f64::EPSILON;
            }
        }
    }
}

/// Componentwise soft-thresholding, the proximal map of `lambda * ||.||_1`.
pub fn soft_threshold(w: &mut [f64], lambda: f64) {
    for v in w.iter_mut() {
        *v = v.signum() * (v.abs() - lambda).max(0.0);
    }
}

/// Pairwise (fixed binary tree) summation.
///
/// The reduction order depends only on the length of the input, so results
/// are reproducible no matter how the terms were produced.
pub fn tree_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 32;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    tree_sum(&xs[..mid]) + tree_sum(&xs[mid..])
}

/// Vector analogue of [`tree_sum`]: sums rows of equal length.
pub fn tree_sum_vecs(rows: &[Vec<f64>], dim: usize) -> Vec<f64> {
    const LEAF: usize = 32;
    if rows.len() <= LEAF {
        let mut acc = vec![0.0; dim];
        for r in rows {
            axpy(1.0, r, &mut acc);
        }
        return acc;
    }
    let mid = rows.len() / 2;
    let mut a = tree_sum_vecs(&rows[..mid], dim);
    let b = tree_sum_vecs(&rows[mid..], dim);
    axpy(1.0, &b, &mut a);
    a
}

/// Mean and standard error (sample std / sqrt(len)) of a slice.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = tree_sum(xs) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = tree_sum(&ss) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
