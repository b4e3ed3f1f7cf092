//! Dense column-major matrices sized for small regression problems
//! (a handful of columns, a few thousand rows).

use std::fmt;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.nrows, self.ncols)?;
        for i in 0..self.nrows.min(12) {
            let row: Vec<String> = (0..self.ncols).map(|j| format!("{:>10.4}", self.get(i, j))).collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Matrix { nrows, ncols, data: vec![0.0; nrows * ncols] }
    }

    pub fn identity(p: usize) -> Self {
        let mut m = Matrix::zeros(p, p);
        for i in 0..p {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from equally long columns.
    ///
    /// Panics if the columns differ in length.
    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Self {
        let nrows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut data = Vec::with_capacity(nrows * columns.len());
        for c in columns {
            let c = c.as_ref();
            assert_eq!(c.len(), nrows, "column length mismatch");
            data.extend_from_slice(c);
        }
        Matrix { nrows, ncols: columns.len(), data }
    }

    /// Same as [`Matrix::from_columns`] with a leading column of ones.
    pub fn with_intercept<C: AsRef<[f64]>>(columns: &[C]) -> Self {
        let nrows = columns.first().map_or(0, |c| c.as_ref().len());
        let mut data = vec![1.0; nrows];
        for c in columns {
            let c = c.as_ref();
            assert_eq!(c.len(), nrows, "column length mismatch");
            data.extend_from_slice(c);
        }
        Matrix { nrows, ncols: columns.len() + 1, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        let mut m = Matrix::zeros(nrows, ncols);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), ncols, "row length mismatch");
            for (j, v) in r.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nrows + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * self.nrows + i] = v;
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.nrows..(j + 1) * self.nrows]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.ncols).map(|j| self.get(i, j)).collect()
    }

    /// `x_i · beta` for row `i`.
    pub fn row_dot(&self, i: usize, beta: &[f64]) -> f64 {
        debug_assert_eq!(beta.len(), self.ncols);
        let mut s = 0.0;
        for (j, b) in beta.iter().enumerate() {
            s += self.data[j * self.nrows + i] * b;
        }
        s
    }

    /// `X beta` for every row.
    pub fn mul_vec(&self, beta: &[f64]) -> Vec<f64> {
        assert_eq!(beta.len(), self.ncols);
        let mut out = vec![0.0; self.nrows];
        for (j, b) in beta.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.col(j)) {
                *o += x * b;
            }
        }
        out
    }

    /// `Xᵀ v`.
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.nrows);
        (0..self.ncols).map(|j| dot(self.col(j), v)).collect()
    }

    /// `Xᵀ diag(w) X`, or `XᵀX` when `w` is `None`.
    pub fn gram(&self, w: Option<&[f64]>) -> Matrix {
        let p = self.ncols;
        let mut g = Matrix::zeros(p, p);
        for a in 0..p {
            for b in 0..=a {
                let ca = self.col(a);
                let cb = self.col(b);
                let s = match w {
                    Some(w) => ca.iter().zip(cb).zip(w).map(|((x, y), w)| x * y * w).sum(),
                    None => dot(ca, cb),
                };
                g.set(a, b, s);
                g.set(b, a, s);
            }
        }
        g
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.ncols);
        for j in 0..self.ncols {
            let c = self.col(j);
            data.extend(rows.iter().map(|&i| c[i]));
        }
        Matrix { nrows: rows.len(), ncols: self.ncols, data }
    }

    pub fn select_columns(&self, cols: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(cols.len() * self.nrows);
        for &j in cols {
            data.extend_from_slice(self.col(j));
        }
        Matrix { nrows: self.nrows, ncols: cols.len(), data }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.ncols, other.nrows);
        let mut out = Matrix::zeros(self.nrows, other.ncols);
        for j in 0..other.ncols {
            for k in 0..self.ncols {
                let b = other.get(k, j);
                if b == 0.0 {
                    continue;
                }
                for i in 0..self.nrows {
                    out.data[j * self.nrows + i] += self.get(i, k) * b;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.ncols, self.nrows);
        for i in 0..self.nrows {
            for j in 0..self.ncols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { nrows: self.nrows, ncols: self.ncols, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows.min(self.ncols)).map(|i| self.get(i, i)).collect()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.nrows, self.ncols), (other.nrows, other.ncols));
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Lower Cholesky factor `L` with `A = L Lᵀ`. Returns `None` when a pivot
    /// falls below `1e-10` of its original diagonal entry (numerically
    /// singular or not positive definite).
    pub fn cholesky(&self) -> Option<Matrix> {
        assert_eq!(self.nrows, self.ncols, "cholesky needs a square matrix");
        let p = self.nrows;
        let mut l = Matrix::zeros(p, p);
        for j in 0..p {
            let mut d = self.get(j, j);
            for k in 0..j {
                d -= l.get(j, k) * l.get(j, k);
            }
            let scale = self.get(j, j).abs().max(f64::MIN_POSITIVE);
            if !(d > 1e-10 * scale) {
                return None;
            }
            let djj = d.sqrt();
            l.set(j, j, djj);
            for i in j + 1..p {
                let mut s = self.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / djj);
            }
        }
        Some(l)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `L Lᵀ x = b` given the lower factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let p = l.nrows();
    let mut y = b.to_vec();
    for i in 0..p {
        let mut s = y[i];
        for k in 0..i {
            s -= l.get(i, k) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    for i in (0..p).rev() {
        let mut s = y[i];
        for k in i + 1..p {
            s -= l.get(k, i) * y[k];
        }
        y[i] = s / l.get(i, i);
    }
    y
}

/// Inverse of a symmetric positive definite matrix from its Cholesky factor.
pub fn cholesky_inverse(l: &Matrix) -> Matrix {
    let p = l.nrows();
    let mut inv = Matrix::zeros(p, p);
    let mut e = vec![0.0; p];
    for j in 0..p {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, &e);
        for (i, v) in col.into_iter().enumerate() {
            inv.set(i, j, v);
        }
    }
    symmetrize(&mut inv);
    inv
}

pub fn symmetrize(m: &mut Matrix) {
    let p = m.nrows();
    for i in 0..p {
        for j in 0..i {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
}
