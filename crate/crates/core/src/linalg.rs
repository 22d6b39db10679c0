//! Dense and low-rank symmetric positive (semi)definite linear algebra.
//!
//! The optimizer never needs a general matrix library: every matrix it
//! touches is either a symmetric `d x d` preconditioner or a `d x k` stack of
//! gradient columns. `DenseSym` enforces exact symmetry at construction,
//! `LowRankPsd` stores `U diag(s) U^T + c I` with orthonormal `U`, and
//! `GradMatrix` stores gradient columns contiguously.
//!
//! Eigendecompositions are delegated to `nalgebra::SymmetricEigen`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance used for every "is this matrix PSD" decision.
pub const PSD_TOL: f64 = 1e-9;

/// Gram eigenvalues at or below `GRAM_CLAMP * max` are folded into the ridge.
pub const GRAM_CLAMP: f64 = 1e-12;

/// Relative numerical-rank tolerance for condition numbers.
pub const RANK_TOL: f64 = 1e-10;

const EIG_MAX_ITER: usize = 100_000;

/// A real symmetric matrix. Symmetry is exact: `entries[i][j] == entries[j][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseSym {
    mat: DMatrix<f64>,
}

impl DenseSym {
    /// Builds from row-major entries, rejecting any asymmetry.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        if entries.len() != dim * dim {
            return Err(Error::Shape {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        Self::from_matrix(DMatrix::from_row_slice(dim, dim, &entries))
    }

    /// Wraps a square matrix, rejecting any asymmetry.
    pub fn from_matrix(mat: DMatrix<f64>) -> Result<Self> {
        let dim = mat.nrows();
        if dim == 0 {
            return Err(Error::EmptyDimension);
        }
        if mat.ncols() != dim {
            return Err(Error::Shape {
                expected: dim,
                got: mat.ncols(),
            });
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                if mat[(i, j)] != mat[(j, i)] {
                    return Err(Error::Asymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { mat })
    }

    /// Takes the upper triangle of a computed square matrix and mirrors it.
    /// Used for internally generated products that are symmetric in exact
    /// arithmetic.
    pub(crate) fn from_upper(mut mat: DMatrix<f64>) -> Self {
        let dim = mat.nrows();
        debug_assert_eq!(dim, mat.ncols());
        for i in 0..dim {
            for j in (i + 1)..dim {
                mat[(j, i)] = mat[(i, j)];
            }
        }
        Self { mat }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        Self {
            mat: DMatrix::from_diagonal(&DVector::from_column_slice(values)),
        }
    }

    /// `a a^T` for a single vector.
    pub fn outer(a: &[f64]) -> Self {
        let v = DVector::from_column_slice(a);
        Self::from_upper(&v * v.transpose())
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.mat[(row, col)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        self.mat.transpose().as_slice().to_vec()
    }

    fn check_same_dim(&self, other: &DenseSym) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &DenseSym) -> Result<DenseSym> {
        self.check_same_dim(other)?;
        Ok(Self {
            mat: &self.mat + &other.mat,
        })
    }

    pub fn sub(&self, other: &DenseSym) -> Result<DenseSym> {
        self.check_same_dim(other)?;
        Ok(Self {
            mat: &self.mat - &other.mat,
        })
    }

    pub fn scale(&self, factor: f64) -> DenseSym {
        Self {
            mat: &self.mat * factor,
        }
    }

    /// `M + c I`.
    pub fn add_ridge(&self, c: f64) -> DenseSym {
        let mut mat = self.mat.clone();
        for i in 0..self.dim() {
            mat[(i, i)] += c;
        }
        Self { mat }
    }

    /// In-place `M += a a^T`, kept exactly symmetric.
    pub fn add_outer_assign(&mut self, a: &[f64]) {
        let d = self.dim();
        for i in 0..d {
            for j in i..d {
                let v = self.mat[(i, j)] + a[i] * a[j];
                self.mat[(i, j)] = v;
                self.mat[(j, i)] = v;
            }
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim(), v)?;
        let out = &self.mat * DVector::from_column_slice(v);
        Ok(out.as_slice().to_vec())
    }

    /// `v^T M v`.
    pub fn quad_form(&self, v: &[f64]) -> Result<f64> {
        let mv = self.mul_vec(v)?;
        Ok(dot(v, &mv))
    }

    /// `A^T M A` for any `A` with `dim` rows.
    pub fn conjugate(&self, a: &DMatrix<f64>) -> Result<DenseSym> {
        if a.nrows() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: a.nrows(),
            });
        }
        Ok(Self::from_upper(a.transpose() * &self.mat * a))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.mat.norm()
    }

    pub fn trace(&self) -> f64 {
        self.mat.trace()
    }
}

/// Eigenvalues sorted descending and the matching orthonormal eigenvectors
/// (as columns).
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEig {
    pub fn max(&self) -> f64 {
        self.values[0]
    }

    pub fn min(&self) -> f64 {
        *self.values.last().expect("non-empty spectrum")
    }

    /// Rebuilds `V diag(f(lambda)) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseSym {
        let scaled = DVector::from_iterator(self.values.len(), self.values.iter().map(|&l| f(l)));
        let mut vs = self.vectors.clone();
        for (j, s) in scaled.iter().enumerate() {
            vs.column_mut(j).scale_mut(*s);
        }
        DenseSym::from_upper(vs * self.vectors.transpose())
    }
}

pub fn sym_eig(m: &DenseSym) -> Result<SymEig> {
    let dim = m.dim();
    let eig = SymmetricEigen::try_new(m.mat.clone(), f64::EPSILON, EIG_MAX_ITER)
        .ok_or(Error::NoConvergence { dim })?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

fn check_psd_spectrum(eig: &SymEig) -> Result<()> {
    let max = eig.max();
    let min = eig.min();
    if !max.is_finite() || !min.is_finite() {
        return Err(Error::NonFinite("eigenvalues"));
    }
    if min < -PSD_TOL * max.max(0.0) {
        return Err(Error::NotPsd {
            min_eig: min,
            max_eig: max,
        });
    }
    Ok(())
}

/// `M^p` for a PSD matrix.
///
/// For a negative exponent, eigenvalues at or below `floor` are replaced by
/// `floor` when `floor > 0` and projected out when `floor == 0`.
pub fn psd_power(m: &DenseSym, exponent: f64, floor: f64) -> Result<DenseSym> {
    if !(floor >= 0.0) {
        return Err(Error::InvalidArgument(format!("floor must be >= 0, got {floor}")));
    }
    let eig = sym_eig(m)?;
    check_psd_spectrum(&eig)?;
    if exponent >= 0.0 {
        return Ok(eig.map(|l| l.max(0.0).powf(exponent)));
    }
    if floor == 0.0 && eig.max() <= 0.0 {
        return Err(Error::Singular);
    }
    Ok(eig.map(|l| {
        if l > floor {
            l.powf(exponent)
        } else if floor > 0.0 {
            floor.powf(exponent)
        } else {
            0.0
        }
    }))
}

/// The preconditioner `M^{-1/2}`.
pub fn psd_inv_sqrt_dense(m: &DenseSym, floor: f64) -> Result<DenseSym> {
    psd_power(m, -0.5, floor)
}

pub fn psd_sqrt_dense(m: &DenseSym) -> Result<DenseSym> {
    psd_power(m, 0.5, 0.0)
}

pub fn psd_inv_dense(m: &DenseSym) -> Result<DenseSym> {
    psd_power(m, -1.0, 0.0)
}

/// A `d x k` matrix of gradient columns, stored column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GradMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl GradMatrix {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_columns(dim: usize, cols: &[Vec<f64>]) -> Result<Self> {
        let mut out = Self::new(dim);
        for c in cols {
            out.push(c)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, col: &[f64]) -> Result<()> {
        check_len(self.dim, col)?;
        self.data.extend_from_slice(col);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ncols(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.dim, self.ncols(), &self.data)
    }

    /// `A^T A`, or `None` for an empty matrix.
    pub fn gram(&self) -> Option<DenseSym> {
        if self.is_empty() {
            return None;
        }
        let a = self.to_matrix();
        Some(DenseSym::from_upper(a.tr_mul(&a)))
    }

    /// `A A^T` (always `d x d`).
    pub fn outer_sum(&self) -> DenseSym {
        let a = self.to_matrix();
        DenseSym::from_upper(&a * a.transpose())
    }

    pub fn column_sum(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for c in self.columns() {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        out
    }

    /// Sum of squared column norms, i.e. `tr(A A^T)`.
    pub fn sq_norm_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// `U diag(s) U^T + c I` with column-orthonormal `U`.
#[derive(Debug, Clone)]
pub struct LowRankPsd {
    dim: usize,
    basis: DMatrix<f64>,
    eigs: Vec<f64>,
    ridge: f64,
}

impl LowRankPsd {
    pub fn new(basis: DMatrix<f64>, eigs: Vec<f64>, ridge: f64) -> Result<Self> {
        if !(ridge > 0.0) || !ridge.is_finite() {
            return Err(Error::InvalidRidge(ridge));
        }
        if basis.ncols() != eigs.len() {
            return Err(Error::Shape {
                expected: basis.ncols(),
                got: eigs.len(),
            });
        }
        if eigs.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("low-rank eigenvalues must be >= 0".into()));
        }
        Ok(Self {
            dim: basis.nrows(),
            basis,
            eigs,
            ridge,
        })
    }

    /// `c I` with no low-rank part.
    pub fn ridge_only(dim: usize, ridge: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(dim, 0), Vec::new(), ridge)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rank(&self) -> usize {
        self.eigs.len()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn eigs(&self) -> &[f64] {
        &self.eigs
    }

    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    /// Smallest eigenvalue of the represented matrix.
    pub fn min_eig(&self) -> f64 {
        if self.rank() < self.dim {
            self.ridge
        } else {
            self.ridge + self.eigs.iter().copied().fold(f64::INFINITY, f64::min)
        }
    }

    pub fn densify(&self) -> DenseSym {
        let mut scaled = self.basis.clone();
        for (j, s) in self.eigs.iter().enumerate() {
            scaled.column_mut(j).scale_mut(*s);
        }
        DenseSym::from_upper(scaled * self.basis.transpose()).add_ridge(self.ridge)
    }

    /// Same matrix with a different ridge.
    pub fn with_ridge(&self, ridge: f64) -> Result<Self> {
        Self::new(self.basis.clone(), self.eigs.clone(), ridge)
    }

    /// Applies `(U diag(s) U^T + c I)^{-1/2}` to `v`.
    pub fn apply_inv_sqrt(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len(self.dim, v)?;
        let c_isqrt = self.ridge.sqrt().recip();
        let mut out: Vec<f64> = v.iter().map(|x| x * c_isqrt).collect();
        if self.rank() == 0 {
            return Ok(out);
        }
        let vv = DVector::from_column_slice(v);
        let mut coeffs = self.basis.tr_mul(&vv);
        for (c, s) in coeffs.iter_mut().zip(&self.eigs) {
            *c *= (s + self.ridge).sqrt().recip() - c_isqrt;
        }
        let correction = &self.basis * coeffs;
        for (o, c) in out.iter_mut().zip(correction.iter()) {
            *o += c;
        }
        Ok(out)
    }
}

/// Factorizes `A A^T + c I` via the `k x k` Gram matrix `A^T A`.
pub fn gram_factorize(a: &GradMatrix, c: f64) -> Result<LowRankPsd> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidRidge(c));
    }
    let Some(gram) = a.gram() else {
        return LowRankPsd::ridge_only(a.dim(), c);
    };
    let eig = sym_eig(&gram)?;
    let smax = eig.max();
    if !(smax > 0.0) {
        return LowRankPsd::ridge_only(a.dim(), c);
    }
    let cutoff = GRAM_CLAMP * smax;
    let keep: Vec<usize> = (0..eig.values.len())
        .filter(|&i| eig.values[i] > cutoff)
        .collect();
    let am = a.to_matrix();
    let mut v_keep = DMatrix::zeros(a.ncols(), keep.len());
    for (jj, &j) in keep.iter().enumerate() {
        let scale = eig.values[j].sqrt().recip();
        v_keep.set_column(jj, &(eig.vectors.column(j) * scale));
    }
    let basis = am * v_keep;
    let eigs = keep.iter().map(|&j| eig.values[j]).collect();
    LowRankPsd::new(basis, eigs, c)
}

/// Factorizes `S + c I` for a dense PSD `S` by a full `d x d`
/// eigendecomposition. Used once the column count reaches the dimension.
pub fn dense_factorize(s: &DenseSym, c: f64) -> Result<LowRankPsd> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::InvalidRidge(c));
    }
    let eig = sym_eig(s)?;
    check_psd_spectrum(&eig)?;
    let smax = eig.max();
    if !(smax > 0.0) {
        return LowRankPsd::ridge_only(s.dim(), c);
    }
    let cutoff = GRAM_CLAMP * smax;
    let keep: Vec<usize> = (0..eig.values.len())
        .filter(|&i| eig.values[i] > cutoff)
        .collect();
    let mut basis = DMatrix::zeros(s.dim(), keep.len());
    for (jj, &j) in keep.iter().enumerate() {
        basis.set_column(jj, &eig.vectors.column(j));
    }
    let eigs = keep.iter().map(|&j| eig.values[j]).collect();
    LowRankPsd::new(basis, eigs, c)
}

/// `M ⪯ N` up to `tol`, scaled by the spectral radius of `N - M`.
pub fn loewner_leq(m: &DenseSym, n: &DenseSym, tol: f64) -> Result<bool> {
    Ok(loewner_margin(m, n, tol)? >= 0.0)
}

/// Signed slack of the test in [`loewner_leq`]: `lambda_min(N - M) + tol (1 + rho)`.
pub fn loewner_margin(m: &DenseSym, n: &DenseSym, tol: f64) -> Result<f64> {
    let diff = n.sub(m)?;
    let eig = sym_eig(&diff)?;
    let radius = eig.max().abs().max(eig.min().abs());
    Ok(eig.min() + tol * (1.0 + radius))
}

/// `(M + u v^T)^{-1}` from `M^{-1}` by the Sherman–Morrison correction.
///
/// The result is a general square matrix because `u v^T` need not be
/// symmetric; use [`sherman_morrison_sym`] for `u == v`.
pub fn sherman_morrison_apply(minv: &DenseSym, u: &[f64], v: &[f64]) -> Result<DMatrix<f64>> {
    let d = minv.dim();
    check_len(d, u)?;
    check_len(d, v)?;
    let mi = minv.as_matrix();
    let uu = DVector::from_column_slice(u);
    let vv = DVector::from_column_slice(v);
    let mu = mi * &uu;
    let vm = vv.transpose() * mi;
    let denom = 1.0 + (vm.clone() * &uu)[(0, 0)];
    if denom.abs() <= 1e-12 {
        return Err(Error::SingularUpdate(denom));
    }
    Ok(mi - (mu * vm) / denom)
}

/// Symmetric rank-one case `(M + u u^T)^{-1}`.
pub fn sherman_morrison_sym(minv: &DenseSym, u: &[f64]) -> Result<DenseSym> {
    Ok(DenseSym::from_upper(sherman_morrison_apply(minv, u, u)?))
}

/// `lambda_max(A^T A) / lambda_min(A^T A)`.
pub fn condition_number(a: &GradMatrix) -> Result<f64> {
    let gram = a
        .gram()
        .ok_or_else(|| Error::InvalidArgument("condition number of an empty matrix".into()))?;
    let eig = sym_eig(&gram)?;
    let (max, min) = (eig.max(), eig.min());
    if !(max > 0.0) || min <= RANK_TOL * max {
        return Err(Error::RankDeficient {
            ratio: if max > 0.0 { min / max } else { 0.0 },
        });
    }
    Ok(max / min)
}

pub(crate) fn check_len(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Shape {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `a - b`.
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}
