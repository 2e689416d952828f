//! Small dense linear algebra for fixed, tiny systems (3x3 rotations, 4x4
//! quaternion forms, per-axis normal equations).

use crate::scalar::Real;

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3<T> {
    pub m: [[T; 3]; 3],
}

impl<T: Real> Mat3<T> {
    pub fn new(m: [[T; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn zeros() -> Self {
        Self {
            m: [[T::zero(); 3]; 3],
        }
    }

    pub fn identity() -> Self {
        let mut out = Self::zeros();
        for i in 0..3 {
            out.m[i][i] = T::one();
        }
        out
    }

    pub fn from_cols(c0: [T; 3], c1: [T; 3], c2: [T; 3]) -> Self {
        let mut out = Self::zeros();
        for r in 0..3 {
            out.m[r][0] = c0[r];
            out.m[r][1] = c1[r];
            out.m[r][2] = c2[r];
        }
        out
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: [T; 3], b: [T; 3]) -> Self {
        let mut out = Self::zeros();
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = a[r] * b[c];
            }
        }
        out
    }

    pub fn col(&self, c: usize) -> [T; 3] {
        [self.m[0][c], self.m[1][c], self.m[2][c]]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros();
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = self.m[c][r];
            }
        }
        out
    }

    pub fn mul_mat(&self, o: &Self) -> Self {
        let mut out = Self::zeros();
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = T::zero();
                for k in 0..3 {
                    acc = acc + self.m[r][k] * o.m[k][c];
                }
                out.m[r][c] = acc;
            }
        }
        out
    }

    pub fn mul_vec(&self, v: [T; 3]) -> [T; 3] {
        let mut out = [T::zero(); 3];
        for (r, o) in out.iter_mut().enumerate() {
            *o = self.m[r][0] * v[0] + self.m[r][1] * v[1] + self.m[r][2] * v[2];
        }
        out
    }

    pub fn add(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = out.m[r][c] + o.m[r][c];
            }
        }
        out
    }

    pub fn sub(&self, o: &Self) -> Self {
        let mut out = *self;
        for r in 0..3 {
            for c in 0..3 {
                out.m[r][c] = out.m[r][c] - o.m[r][c];
            }
        }
        out
    }

    pub fn scale(&self, s: T) -> Self {
        let mut out = *self;
        for row in out.m.iter_mut() {
            for v in row.iter_mut() {
                *v = *v * s;
            }
        }
        out
    }

    pub fn det(&self) -> T {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn max_abs(&self) -> T {
        self.m
            .iter()
            .flatten()
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Solves `self · x = b`; `None` when the matrix is numerically singular.
    pub fn solve(&self, b: [T; 3]) -> Option<[T; 3]> {
        let a: Vec<Vec<T>> = self.m.iter().map(|r| r.to_vec()).collect();
        solve_dense(a, b.to_vec()).map(|x| [x[0], x[1], x[2]])
    }
}

/// Gaussian elimination with partial pivoting. Returns `None` when a pivot
/// falls below `1e-12` relative to the largest matrix entry.
pub fn solve_dense<T: Real>(mut a: Vec<Vec<T>>, mut b: Vec<T>) -> Option<Vec<T>> {
    let n = b.len();
    debug_assert!(a.len() == n && a.iter().all(|r| r.len() == n));
    let scale = a
        .iter()
        .flatten()
        .fold(T::zero(), |acc, v| acc.max(v.abs()));
    if scale == T::zero() || !scale.is_finite() {
        return None;
    }
    let eps = scale * T::lit(1e-12);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            a[i][col]
                .abs()
                .partial_cmp(&a[j][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if a[pivot][col].abs() <= eps {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            if f == T::zero() {
                continue;
            }
            for k in col..n {
                a[row][k] = a[row][k] - f * a[col][k];
            }
            b[row] = b[row] - f * b[col];
        }
    }
    let mut x = vec![T::zero(); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc = acc - a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Eigen-decomposition of a real symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    /// Eigenvalues in ascending order.
    pub values: Vec<T>,
    /// `vectors[k]` is the unit eigenvector for `values[k]`.
    pub vectors: Vec<Vec<T>>,
}

/// Cyclic Jacobi eigen-solver for small symmetric matrices.
///
/// Only the upper triangle is read. Converges quadratically; 50 sweeps are
/// far more than needed for n ≤ 4.
pub fn symmetric_eigen<T: Real>(a: &[Vec<T>]) -> SymmetricEigen<T> {
    let n = a.len();
    let mut m: Vec<Vec<T>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| if j >= i { a[i][j] } else { a[j][i] })
                .collect()
        })
        .collect();
    let mut v: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();

    for _sweep in 0..50 {
        let off: T = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .fold(T::zero(), |acc, (i, j)| acc + m[i][j] * m[i][j]);
        let diag: T = (0..n).fold(T::zero(), |acc, i| acc + m[i][i] * m[i][i]);
        if off <= T::epsilon() * T::epsilon() * diag || off == T::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q] == T::zero() {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (T::lit(2.0) * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[i][i]
            .partial_cmp(&m[j][j])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    SymmetricEigen {
        values: order.iter().map(|&k| m[k][k]).collect(),
        vectors: order
            .iter()
            .map(|&k| (0..n).map(|r| v[r][k]).collect())
            .collect(),
    }
}

impl<T: Real> SymmetricEigen<T> {
    pub fn vector3(&self, k: usize) -> [T; 3] {
        [self.vectors[k][0], self.vectors[k][1], self.vectors[k][2]]
    }
}

pub fn mat3_eigen<T: Real>(m: &Mat3<T>) -> SymmetricEigen<T> {
    let rows: Vec<Vec<T>> = m.m.iter().map(|r| r.to_vec()).collect();
    symmetric_eigen(&rows)
}
