//! Dense real linear algebra: matrices, vectors, thin SVD, cosine similarity,
//! top-k magnitude masking and Euclidean distance.
//!
//! Everything here is 64-bit. Finiteness is not enforced at construction so
//! that bundle validation can report non-finite values as data; the
//! numerical operations reject non-finite input themselves.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`cosine`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Maximum number of Jacobi sweeps before [`svd`] gives up.
pub const SVD_MAX_SWEEPS: usize = 30;

/// Relative off-diagonal tolerance: a column pair counts as orthogonal once
/// `|a_i . a_j| <= SVD_TOLERANCE * |a_i| * |a_j|`.
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Vector {
        Vector::new(self.data.iter().map(|x| x * c).collect())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self::new(data)
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Self::new(data.to_vec())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Both dimensions must be at least one.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Panics if either dimension is zero.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    /// Square diagonal matrix.
    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix: `x . self`.
    pub fn vecmul(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} times {}x{} matrix",
                x.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (k, &a) in x.iter().enumerate() {
            for (o, &b) in out.iter_mut().zip(self.row(k)) {
                *o += a * b;
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Thin singular value decomposition `m = u * diag(sigma) * vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `rows x p`, left singular vectors as columns.
    pub u: Matrix,
    /// Length `p`, descending, non-negative.
    pub sigma: Vector,
    /// `p x cols`, right singular vectors as rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// Left singular vector `i` (column `i` of `u`).
    pub fn left(&self, i: usize) -> Vec<f64> {
        self.u.col(i)
    }

    pub fn reconstruct(&self) -> Matrix {
        let p = self.sigma.len();
        let mut scaled = self.u.clone();
        for r in 0..scaled.rows() {
            for c in 0..p {
                let v = scaled.get(r, c) * self.sigma[c];
                scaled.set(r, c, v);
            }
        }
        scaled
            .matmul(&self.vt)
            .expect("svd factors have consistent shapes")
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Output is canonical: singular values descending (ties keep column order),
/// and each left singular vector has its largest-magnitude entry positive
/// (ties go to the lower row index), with the matching right vector flipped
/// alongside. Identical input gives bitwise-identical output.
pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::InvalidInput(
            "svd input contains non-finite entries".into(),
        ));
    }
    let (rows, cols) = m.shape();
    let (u_cols, sigma, v_cols) = if rows >= cols {
        let (u, s, v) = jacobi_tall(m)?;
        (u, s, v)
    } else {
        // m^T = U' S V'^T  =>  m = V' S U'^T
        let (u2, s, v2) = jacobi_tall(&m.transpose())?;
        (v2, s, u2)
    };

    let p = sigma.len();
    let mut u = Matrix::zeros(rows, p);
    let mut vt = Matrix::zeros(p, cols);
    for j in 0..p {
        let col = &u_cols[j];
        let mut pivot = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (i, x) in col.iter().enumerate() {
            u.set(i, j, sign * x);
        }
        for (c, x) in v_cols[j].iter().enumerate() {
            vt.set(j, c, sign * x);
        }
    }
    Ok(SvdResult {
        u,
        sigma: Vector::new(sigma),
        vt,
    })
}

type Columns = Vec<Vec<f64>>;

/// Jacobi SVD of a matrix with `rows >= cols`. Returns `(u, sigma, v)` with
/// `u` as `cols` columns of length `rows`, `v` as `cols` columns of length
/// `cols`, sorted by descending sigma.
fn jacobi_tall(a: &Matrix) -> Result<(Columns, Vec<f64>, Columns)> {
    let (rows, cols) = a.shape();
    debug_assert!(rows >= cols);
    let mut w: Columns = (0..cols).map(|c| a.col(c)).collect();
    let mut v: Columns = (0..cols)
        .map(|c| {
            let mut e = vec![0.0; cols];
            e[c] = 1.0;
            e
        })
        .collect();

    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..cols - 1 {
            for j in i + 1..cols {
                let alpha = dot(&w[i], &w[i]);
                let beta = dot(&w[j], &w[j]);
                let gamma = dot(&w[i], &w[j]);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "one-sided Jacobi did not converge within {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));

    let scale = a.frobenius_norm();
    let rank_tol = rows.max(cols) as f64 * f64::EPSILON * scale;

    let mut u: Columns = Vec::with_capacity(cols);
    let mut sigma = Vec::with_capacity(cols);
    let mut v_sorted = Vec::with_capacity(cols);
    let mut missing = Vec::new();
    for (slot, &src) in order.iter().enumerate() {
        let s = norms[src];
        if s > rank_tol && s > 0.0 {
            u.push(w[src].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            u.push(Vec::new());
            sigma.push(0.0);
            missing.push(slot);
        }
        v_sorted.push(std::mem::take(&mut v[src]));
    }
    complete_basis(&mut u, &missing, rows);
    Ok((u, sigma, v_sorted))
}

fn rotate(cols: &mut Columns, i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Fills the `missing` slots of `basis` with unit vectors orthogonal to every
/// other column. Candidates are standard basis vectors; the one with the
/// largest residual after projection wins (lowest index on ties).
fn complete_basis(basis: &mut Columns, missing: &[usize], dim: usize) {
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for k in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[k] = 1.0;
            for _ in 0..2 {
                for (idx, b) in basis.iter().enumerate() {
                    if idx == slot || b.is_empty() {
                        continue;
                    }
                    let proj = dot(&cand, b);
                    for (x, y) in cand.iter_mut().zip(b) {
                        *x -= proj * y;
                    }
                }
            }
            let n = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                best = Some((n, cand));
            }
        }
        let (n, cand) = best.expect("dimension is positive");
        basis[slot] = cand.into_iter().map(|x| x / n).collect();
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity clamped to `[-1, 1]`.
///
/// Fails with [`Error::DegenerateVector`] when either norm is at or below
/// [`DEGENERATE_NORM`]; callers choose how to score that case.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let aa = dot(a, a);
    let bb = dot(b, b);
    let smaller = aa.min(bb).sqrt();
    if smaller.is_nan() || smaller <= DEGENERATE_NORM {
        return Err(Error::DegenerateVector {
            norm: smaller,
            threshold: DEGENERATE_NORM,
        });
    }
    // sqrt(x * x) == x in IEEE arithmetic, so cosine(a, a) is exactly 1.
    Ok((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Keeps the `k` entries of largest magnitude and zeroes the rest.
/// Magnitude ties go to the lower index.
pub fn topk_mask(c: &[f64], k: usize) -> Result<Vector> {
    if k == 0 {
        return Err(Error::InvalidInput("top-k requires k >= 1".into()));
    }
    if k >= c.len() {
        return Ok(Vector::from(c));
    }
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.sort_by(|&x, &y| c[y].abs().total_cmp(&c[x].abs()).then(x.cmp(&y)));
    let mut out = vec![0.0; c.len()];
    for &i in &idx[..k] {
        out[i] = c[i];
    }
    Ok(Vector::new(out))
}

/// Euclidean distance.
pub fn l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "l2 of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}
