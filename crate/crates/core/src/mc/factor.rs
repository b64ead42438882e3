//! Sampled Jacobians that remember their zero rows and columns.
//!
//! Rectifier masks zero out about half the rows of every layer Jacobian, so
//! products and Gram matrices are formed on the surviving support only.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::linalg::matmul::matmul;
use faer::{Accum, Mat, MatRef, Par};

use crate::moments::Moments;

/// Dense block of a matrix whose other rows and columns are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactMatrix {
    pub nrows: usize,
    pub ncols: usize,
    /// Sorted indices of the rows stored in `mat`.
    pub rows: Vec<usize>,
    /// Sorted indices of the columns stored in `mat`.
    pub cols: Vec<usize>,
    pub mat: Mat<f64>,
}

impl CompactMatrix {
    pub fn from_dense(mat: Mat<f64>) -> Self {
        Self {
            nrows: mat.nrows(),
            ncols: mat.ncols(),
            rows: (0..mat.nrows()).collect(),
            cols: (0..mat.ncols()).collect(),
            mat,
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        let mut out = Mat::zeros(self.nrows, self.ncols);
        for (j, &c) in self.cols.iter().enumerate() {
            for (i, &r) in self.rows.iter().enumerate() {
                out[(r, c)] = self.mat[(i, j)];
            }
        }
        out
    }
}

/// A sampled Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub enum JacobianFactor {
    Diagonal(Vec<f64>),
    Compact(CompactMatrix),
}

fn support(d: &[f64]) -> Vec<usize> {
    d.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i).collect()
}

/// Positions in `a` and `b` of the indices the two sorted lists share.
fn intersect(a: &[usize], b: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (mut ia, mut ib) = (Vec::new(), Vec::new());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                ia.push(i);
                ib.push(j);
                i += 1;
                j += 1;
            }
        }
    }
    (ia, ib)
}

fn select_cols(m: MatRef<'_, f64>, idx: &[usize]) -> Mat<f64> {
    Mat::from_fn(m.nrows(), idx.len(), |i, j| m[(i, idx[j])])
}

fn select_rows(m: MatRef<'_, f64>, idx: &[usize]) -> Mat<f64> {
    Mat::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn is_all(idx: &[usize], n: usize) -> bool {
    idx.len() == n
}

impl JacobianFactor {
    pub fn identity(m: usize) -> Self {
        Self::Diagonal(vec![1.0; m])
    }

    pub fn nrows(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Compact(c) => c.nrows,
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Self::Diagonal(d) => d.len(),
            Self::Compact(c) => c.ncols,
        }
    }

    pub fn to_dense(&self) -> Mat<f64> {
        match self {
            Self::Diagonal(d) => Mat::from_fn(d.len(), d.len(), |i, j| if i == j { d[i] } else { 0.0 }),
            Self::Compact(c) => c.to_dense(),
        }
    }

    /// `self * rhs`. Panics on a shape mismatch.
    pub fn mul(&self, rhs: &Self) -> Self {
        assert_eq!(self.ncols(), rhs.nrows(), "factor shapes do not chain");
        match (self, rhs) {
            (Self::Diagonal(a), Self::Diagonal(b)) => Self::Diagonal(a.iter().zip(b).map(|(x, y)| x * y).collect()),
            (Self::Diagonal(d), Self::Compact(c)) => {
                let keep: Vec<usize> = (0..c.rows.len()).filter(|&i| d[c.rows[i]] != 0.0).collect();
                let mat = Mat::from_fn(keep.len(), c.cols.len(), |i, j| d[c.rows[keep[i]]] * c.mat[(keep[i], j)]);
                Self::Compact(CompactMatrix {
                    rows: keep.iter().map(|&i| c.rows[i]).collect(),
                    cols: c.cols.clone(),
                    mat,
                    nrows: c.nrows,
                    ncols: c.ncols,
                })
            }
            (Self::Compact(c), Self::Diagonal(d)) => {
                let keep: Vec<usize> = (0..c.cols.len()).filter(|&j| d[c.cols[j]] != 0.0).collect();
                let mat = Mat::from_fn(c.rows.len(), keep.len(), |i, j| c.mat[(i, keep[j])] * d[c.cols[keep[j]]]);
                Self::Compact(CompactMatrix {
                    rows: c.rows.clone(),
                    cols: keep.iter().map(|&j| c.cols[j]).collect(),
                    mat,
                    nrows: c.nrows,
                    ncols: c.ncols,
                })
            }
            (Self::Compact(a), Self::Compact(b)) => {
                let (ia, ib) = intersect(&a.cols, &b.rows);
                let mut mat = Mat::zeros(a.rows.len(), b.cols.len());
                if !ia.is_empty() {
                    let lhs_owned;
                    let lhs = if is_all(&ia, a.cols.len()) {
                        a.mat.as_ref()
                    } else {
                        lhs_owned = select_cols(a.mat.as_ref(), &ia);
                        lhs_owned.as_ref()
                    };
                    let rhs_owned;
                    let rhs = if is_all(&ib, b.rows.len()) {
                        b.mat.as_ref()
                    } else {
                        rhs_owned = select_rows(b.mat.as_ref(), &ib);
                        rhs_owned.as_ref()
                    };
                    matmul(mat.as_mut(), Accum::Replace, lhs, rhs, 1.0, Par::Seq);
                }
                Self::Compact(CompactMatrix {
                    nrows: a.nrows,
                    ncols: b.ncols,
                    rows: a.rows.clone(),
                    cols: b.cols.clone(),
                    mat,
                })
            }
        }
    }

    /// Product of factors listed from input to output.
    pub fn chain(factors: &[Self]) -> Option<Self> {
        let (last, rest) = factors.split_last()?;
        Some(rest.iter().rev().fold(last.clone(), |acc, f| acc.mul(f)))
    }

    /// Adds `self` into the dense accumulator `dst`.
    pub fn add_into(&self, dst: &mut Mat<f64>) {
        match self {
            Self::Diagonal(d) => {
                for (i, &v) in d.iter().enumerate() {
                    dst[(i, i)] += v;
                }
            }
            Self::Compact(c) => {
                for (j, &col) in c.cols.iter().enumerate() {
                    for (i, &row) in c.rows.iter().enumerate() {
                        dst[(row, col)] += c.mat[(i, j)];
                    }
                }
            }
        }
    }

    /// Normalized traces of `J Jᵀ` and `(J Jᵀ)²`, without eigendecomposition.
    pub fn trace_moments(&self) -> (f64, f64) {
        match self {
            Self::Diagonal(d) => {
                let m = d.len() as f64;
                let s2: f64 = d.iter().map(|x| x * x).sum();
                let s4: f64 = d.iter().map(|x| x.powi(4)).sum();
                (s2 / m, s4 / m)
            }
            Self::Compact(c) => {
                let m = c.nrows as f64;
                (frobenius_sq(c.mat.as_ref()) / m, gram_frobenius_sq(c.mat.as_ref()) / m)
            }
        }
    }

    pub fn moments(&self) -> Moments<f64> {
        let (phi, second) = self.trace_moments();
        Moments::new(phi, Some(second - phi * phi), self.nrows(), self.ncols())
    }

    /// Indices of the nonzero rows.
    pub fn row_support(&self) -> Vec<usize> {
        match self {
            Self::Diagonal(d) => support(d),
            Self::Compact(c) => c.rows.clone(),
        }
    }
}

pub fn frobenius_sq(m: MatRef<'_, f64>) -> f64 {
    m.squared_norm_l2()
}

/// `‖MᵀM‖_F² = ‖MMᵀ‖_F² = tr((MMᵀ)²)`, formed on the smaller side, lower triangle only.
pub fn gram_frobenius_sq(m: MatRef<'_, f64>) -> f64 {
    let side = if m.nrows() <= m.ncols() { m.transpose() } else { m };
    // side is tall (rows >= cols); its Gram is cols x cols.
    let k = side.ncols();
    if k == 0 {
        return 0.0;
    }
    let mut g = Mat::<f64>::zeros(k, k);
    triangular::matmul(
        g.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        side.transpose(),
        BlockStructure::Rectangular,
        side,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    let mut total = 0.0;
    for j in 0..k {
        total += g[(j, j)] * g[(j, j)];
        let mut off = 0.0;
        for i in j + 1..k {
            off += g[(i, j)] * g[(i, j)];
        }
        total += 2.0 * off;
    }
    total
}

/// Empirical moments of a dense Jacobian.
pub fn empirical_moments(j: MatRef<'_, f64>) -> Moments<f64> {
    let m = j.nrows() as f64;
    let phi = frobenius_sq(j) / m;
    let second = gram_frobenius_sq(j) / m;
    Moments::new(phi, Some(second - phi * phi), j.nrows(), j.ncols())
}
