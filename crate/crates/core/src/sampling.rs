//! Deterministic low-discrepancy point sets: Halton boxes, sphere directions,
//! tensor grids.

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

pub fn radical_inverse(mut index: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut acc = 0.0;
    while index > 0 {
        acc += f * (index % base) as f64;
        index /= base;
        f *= inv;
    }
    acc
}

/// Halton point number `index` (1-based avoids the origin) in `[0,1)^dim`.
pub fn halton(index: u64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|k| radical_inverse(index, PRIMES[k % PRIMES.len()]))
        .collect()
}

/// `n` Halton points scaled into the box `[lo_k, hi_k]`.
pub fn halton_box(bounds: &[[f64; 2]], n: usize) -> Vec<Vec<f64>> {
    (1..=n as u64)
        .map(|k| {
            halton(k, bounds.len())
                .iter()
                .zip(bounds)
                .map(|(u, [lo, hi])| lo + u * (hi - lo))
                .collect()
        })
        .collect()
}

/// Tensor grid with `per_axis` points on each axis of the box (endpoints included).
pub fn tensor_grid(bounds: &[[f64; 2]], per_axis: usize) -> Vec<Vec<f64>> {
    let per_axis = per_axis.max(2);
    let axes: Vec<Vec<f64>> = bounds
        .iter()
        .map(|[lo, hi]| {
            (0..per_axis)
                .map(|k| lo + (hi - lo) * k as f64 / (per_axis - 1) as f64)
                .collect()
        })
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        out.push(idx.iter().zip(&axes).map(|(k, a)| a[*k]).collect());
        for d in (0..axes.len()).rev() {
            idx[d] += 1;
            if idx[d] < axes[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

/// Inverse standard normal CDF.
pub fn inverse_normal_cdf(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p.clamp(1e-300, 1.0 - 1e-16))
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}

/// `n` unit vectors in `ℝ^dim`, nested in `n` (a prefix of a larger set is
/// the smaller set). The coordinate axes in both signs come first.
pub fn sphere_directions(dim: usize, n: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(n.max(2 * dim));
    for k in 0..dim {
        for sign in [1.0, -1.0] {
            let mut v = vec![0.0; dim];
            v[k] = sign;
            out.push(v);
        }
    }
    if dim == 1 {
        return out;
    }
    let mut index = 1u64;
    while out.len() < n {
        let v: Vec<f64> = if dim == 2 {
            let theta = 2.0 * std::f64::consts::PI * radical_inverse(index, 2);
            vec![theta.cos(), theta.sin()]
        } else {
            let g: Vec<f64> = halton(index, dim).into_iter().map(inverse_normal_cdf).collect();
            let norm = g.iter().map(|c| c * c).sum::<f64>().sqrt();
            g.iter().map(|c| c / norm).collect()
        };
        index += 1;
        if v.iter().all(|c| c.is_finite()) {
            out.push(v);
        }
    }
    out
}
