//! Small dense symmetric matrices and the Cholesky-type root used for
//! diffusion coefficients.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("matrix is not positive semidefinite: pivot {pivot} at row {row} (tolerance {tolerance})")]
pub struct NotPsd {
    pub row: usize,
    pub pivot: f64,
    pub tolerance: f64,
}

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        SquareMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for k in 0..n {
            m[(k, k)] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let mut m = Self::zeros(n);
        for (r, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), n, "matrix rows must be square");
            for (c, v) in row.iter().enumerate() {
                m[(r, c)] = *v;
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|k| self[(k, k)]).sum()
    }

    /// Max-row-sum norm.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|r| (0..self.n).map(|c| self[(r, c)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `<v, M v>`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for r in 0..self.n {
            let mut row = 0.0;
            for c in 0..self.n {
                row += self[(r, c)] * v[c];
            }
            acc += v[r] * row;
        }
        acc
    }

    pub fn mul_vec(&self, v: &[f64], out: &mut [f64]) {
        for r in 0..self.n {
            out[r] = (0..self.n).map(|c| self[(r, c)] * v[c]).sum();
        }
    }

    /// `M Mᵀ`.
    pub fn gram(&self) -> SquareMatrix {
        let n = self.n;
        let mut out = Self::zeros(n);
        for r in 0..n {
            for c in 0..n {
                out[(r, c)] = (0..n).map(|k| self[(r, k)] * self[(c, k)]).sum();
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &SquareMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.n + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.n + c]
    }
}

/// Lower-triangular `L` with `L Lᵀ = a` (up to the recorded jitter).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixRoot {
    pub factor: SquareMatrix,
    /// Diagonal shift added before factorizing; zero for positive definite input.
    pub jitter: f64,
}

impl MatrixRoot {
    pub fn reconstruction_error(&self, a: &SquareMatrix) -> f64 {
        self.factor.gram().max_abs_diff(a)
    }
}

fn try_cholesky(a: &SquareMatrix, shift: f64, tolerance: f64) -> Result<SquareMatrix, NotPsd> {
    let n = a.dim();
    let mut l = SquareMatrix::zeros(n);
    for j in 0..n {
        let mut pivot = a[(j, j)] + shift;
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if pivot < -tolerance {
            return Err(NotPsd {
                row: j,
                pivot,
                tolerance,
            });
        }
        if pivot <= 0.0 {
            // Semidefinite direction: the remaining column must vanish.
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > tolerance.max(f64::MIN_POSITIVE) {
                    return Err(NotPsd { row: j, pivot, tolerance });
                }
            }
            continue;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Cholesky-type root of a symmetric matrix.
///
/// Pivots below `-1e-9·‖a‖∞` reject the matrix. A singular but semidefinite
/// input is retried with the diagonal shift `1e-12·trace(a)`.
pub fn matrix_root(a: &SquareMatrix) -> Result<MatrixRoot, NotPsd> {
    let tolerance = 1e-9 * a.norm_inf();
    let n = a.dim();
    let definite = (0..n).all(|j| a[(j, j)] > 0.0);
    if definite {
        if let Ok(factor) = try_cholesky(a, 0.0, tolerance) {
            if (0..n).all(|j| factor[(j, j)] > 0.0) {
                return Ok(MatrixRoot { factor, jitter: 0.0 });
            }
        }
    }
    let jitter = 1e-12 * a.trace().max(0.0);
    let factor = try_cholesky(a, jitter, tolerance)?;
    Ok(MatrixRoot { factor, jitter })
}

/// Fast path for the 1x1 case used in simulation inner loops.
pub fn scalar_root(a: f64) -> Result<f64, NotPsd> {
    if a >= 0.0 {
        Ok(a.sqrt())
    } else if a >= -1e-9 * a.abs() {
        Ok(0.0)
    } else {
        Err(NotPsd {
            row: 0,
            pivot: a,
            tolerance: 1e-9 * a.abs(),
        })
    }
}
