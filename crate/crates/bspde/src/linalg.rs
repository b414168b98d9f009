//! Small dense and tridiagonal linear algebra.
//!
//! Everything in this crate runs on interior-node vectors of length m (a few
//! dozen) and on stacked tree vectors (a few thousand). The operators that
//! matter are tridiagonal, their transposes are tridiagonal with the bands
//! swapped, and the few genuinely dense systems (fixed-point fallback,
//! assembled solve maps) are solved with partial-pivot LU. Keeping these
//! kernels local makes the transpose identities structural: `transpose` swaps
//! two band vectors and nothing else, so `t(t(A)) == A` holds bit for bit.

use crate::error::{Error, Result};

/// Tridiagonal matrix of order `m`, stored by bands.
///
/// `sub[i]` sits at (i+1, i), `diag[i]` at (i, i), `sup[i]` at (i, i+1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(m: usize) -> Self {
        assert!(m >= 1, "tridiagonal order must be at least 1");
        Tridiagonal {
            sub: vec![0.0; m - 1],
            diag: vec![0.0; m],
            sup: vec![0.0; m - 1],
        }
    }

    pub fn order(&self) -> usize {
        self.diag.len()
    }

    /// y = A x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let m = self.order();
        debug_assert_eq!(x.len(), m);
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.sub[i - 1] * x[i - 1];
            }
            if i + 1 < m {
                v += self.sup[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    /// y = A^T x, without forming the transpose.
    pub fn apply_transpose(&self, x: &[f64]) -> Vec<f64> {
        let m = self.order();
        debug_assert_eq!(x.len(), m);
        let mut y = vec![0.0; m];
        for i in 0..m {
            let mut v = self.diag[i] * x[i];
            if i > 0 {
                v += self.sup[i - 1] * x[i - 1];
            }
            if i + 1 < m {
                v += self.sub[i] * x[i + 1];
            }
            y[i] = v;
        }
        y
    }

    /// Exact transpose: the bands swap, entries are untouched.
    pub fn transpose(&self) -> Tridiagonal {
        Tridiagonal {
            sub: self.sup.clone(),
            diag: self.diag.clone(),
            sup: self.sub.clone(),
        }
    }

    /// S = I - c A.
    pub fn identity_minus_scaled(&self, c: f64) -> Tridiagonal {
        let mut s = Tridiagonal {
            sub: self.sub.iter().map(|&v| -c * v).collect(),
            diag: self.diag.iter().map(|&v| 1.0 - c * v).collect(),
            sup: self.sup.iter().map(|&v| -c * v).collect(),
        };
        // Normalize -0.0 so transposition tests compare bit patterns safely.
        for v in s
            .sub
            .iter_mut()
            .chain(s.diag.iter_mut())
            .chain(s.sup.iter_mut())
        {
            if *v == 0.0 {
                *v = 0.0;
            }
        }
        s
    }

    /// Solve A x = b by the Thomas algorithm.
    ///
    /// No pivoting: the implicit factors this crate builds are strictly
    /// diagonally dominant whenever the step-size condition holds, and a
    /// vanishing pivot is reported as a numerical error instead of being
    /// smoothed over.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        thomas(&self.sub, &self.diag, &self.sup, b)
    }

    /// Solve A^T x = b without materializing the transpose.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        thomas(&self.sup, &self.diag, &self.sub, b)
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let m = self.order();
        let mut d = DenseMatrix::zeros(m, m);
        for i in 0..m {
            d.set(i, i, self.diag[i]);
            if i > 0 {
                d.set(i, i - 1, self.sub[i - 1]);
            }
            if i + 1 < m {
                d.set(i, i + 1, self.sup[i]);
            }
        }
        d
    }

    pub fn frobenius(&self) -> f64 {
        let sq: f64 = self
            .sub
            .iter()
            .chain(self.diag.iter())
            .chain(self.sup.iter())
            .map(|v| v * v)
            .sum();
        sq.sqrt()
    }
}

fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let m = diag.len();
    debug_assert_eq!(b.len(), m);
    let scale = diag
        .iter()
        .chain(sub.iter())
        .chain(sup.iter())
        .fold(1.0_f64, |a, &v| a.max(v.abs()));
    let tiny = 1e-14 * scale;

    let mut c = vec![0.0; m];
    let mut d = vec![0.0; m];
    let mut pivot = diag[0];
    if pivot.abs() <= tiny {
        return Err(Error::Numerical(
            "singular implicit system: zero pivot in tridiagonal solve".into(),
        ));
    }
    if m > 1 {
        c[0] = sup[0] / pivot;
    }
    d[0] = b[0] / pivot;
    for i in 1..m {
        pivot = diag[i] - sub[i - 1] * c[i - 1];
        if pivot.abs() <= tiny {
            return Err(Error::Numerical(format!(
                "singular implicit system: zero pivot at row {i} in tridiagonal solve"
            )));
        }
        if i + 1 < m {
            c[i] = sup[i] / pivot;
        }
        d[i] = (b[i] - sub[i - 1] * d[i - 1]) / pivot;
    }
    for i in (0..m - 1).rev() {
        let t = d[i] - c[i] * d[i + 1];
        d[i] = t;
    }
    Ok(d)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column_mut_write(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.set(r, c, v);
        }
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        let mut y = vec![0.0; self.rows];
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x.iter()) {
                acc += a * b;
            }
            y[r] = acc;
        }
        y
    }

    /// y = A^T x.
    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = self.row(r);
            let xv = x[r];
            for (c, a) in row.iter().enumerate() {
                y[c] += a * xv;
            }
        }
        y
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Solve A x = b with partial-pivot LU. A must be square.
    pub fn lu_solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if self.rows != self.cols {
            return Err(Error::Numerical(
                "lu_solve requires a square matrix".into(),
            ));
        }
        let n = self.rows;
        debug_assert_eq!(b.len(), n);
        let mut a = self.data.clone();
        let mut x = b.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = self.data.iter().fold(1.0_f64, |m, &v| m.max(v.abs()));
        let tiny = 1e-14 * scale;

        for k in 0..n {
            let mut p = k;
            let mut best = a[perm[k] * n + k].abs();
            for r in k + 1..n {
                let v = a[perm[r] * n + k].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if best <= tiny {
                return Err(Error::Numerical(format!(
                    "singular dense system: pivot {best:.3e} at column {k}"
                )));
            }
            perm.swap(k, p);
            let pk = perm[k];
            let pivot = a[pk * n + k];
            for r in k + 1..n {
                let pr = perm[r];
                let factor = a[pr * n + k] / pivot;
                a[pr * n + k] = factor;
                for c in k + 1..n {
                    a[pr * n + c] -= factor * a[pk * n + c];
                }
            }
        }
        // Forward substitution on the permuted right-hand side.
        let mut y = vec![0.0; n];
        for r in 0..n {
            let pr = perm[r];
            let mut acc = x[pr];
            for c in 0..r {
                acc -= a[pr * n + c] * y[c];
            }
            y[r] = acc;
        }
        // Back substitution.
        for r in (0..n).rev() {
            let pr = perm[r];
            let mut acc = y[r];
            for c in r + 1..n {
                acc -= a[pr * n + c] * x[c];
            }
            x[r] = acc / a[pr * n + r];
        }
        Ok(x)
    }
}

/// Plain dot product, sequential and order-stable.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}
