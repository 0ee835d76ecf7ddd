//! Dense row-major matrices, the three GEMM orientations the network needs,
//! and a one-sided Jacobi SVD.

use std::fmt;

use rand::Rng as _;

use crate::error::{bail, Result};
use crate::rng::Rng;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            bail!(Shape, "matrix data has {} entries, expected {rows}x{cols}", data.len());
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            bail!(Numerical, "non-finite matrix entry at flat index {i}");
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            bail!(Shape, "ragged rows");
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn uniformly from `[-bound, bound)`.
    pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        Matrix { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            bail!(Shape, "cannot subtract {:?} from {:?}", other.shape(), self.shape());
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`; shapes must agree.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        bail!(Config, "matmul dimension mismatch: {}x{} times {}x{}", a.rows, a.cols, b.rows, b.cols);
    }
    let (m, kk, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * kk..(i + 1) * kk];
        let orow = &mut out.data[i * n..(i + 1) * n];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materializing the transpose.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        bail!(Config, "matmul_tn dimension mismatch: ({}x{})ᵀ times {}x{}", a.rows, a.cols, b.rows, b.cols);
    }
    let (kk, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for k in 0..kk {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * n..(k + 1) * n];
        for (i, &aki) in arow.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        bail!(Config, "matmul_nt dimension mismatch: {}x{} times ({}x{})ᵀ", a.rows, a.cols, b.rows, b.cols);
    }
    let (m, n) = (a.rows, b.rows);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for j in 0..n {
            out.data[i * n + j] = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×r, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, length r = min(m, n).
    pub sigma: Vec<f64>,
    /// r×n, orthonormal rows.
    pub vt: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows {
            for (v, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *v *= s;
            }
        }
        matmul(&us, &self.vt).expect("svd factors are conformant")
    }
}

pub const SVD_MAX_SWEEPS: usize = 100;

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Columns of U are sign-normalized so their largest-magnitude entry is
/// non-negative, which makes the factorization reproducible.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        bail!(Config, "svd of an empty {}x{} matrix", a.rows, a.cols);
    }
    if a.rows >= a.cols {
        let (u, sigma, v) = jacobi_tall(a)?;
        Ok(SvdResult { u, sigma, vt: v.transpose() })
    } else {
        // A = (Aᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&a.transpose())?;
        let mut res = SvdResult { u: v_t, sigma, vt: u_t.transpose() };
        normalize_signs(&mut res);
        Ok(res)
    }
}

fn normalize_signs(res: &mut SvdResult) {
    let (m, r) = res.u.shape();
    for j in 0..r {
        let mut best = 0usize;
        for i in 1..m {
            if res.u.get(i, j).abs() > res.u.get(best, j).abs() {
                best = i;
            }
        }
        if res.u.get(best, j) < 0.0 {
            for i in 0..m {
                let v = res.u.get(i, j);
                res.u.set(i, j, -v);
            }
            for v in res.vt.row_mut(j) {
                *v = -*v;
            }
        }
    }
}

/// Returns `(U m×n, sigma, V n×n)` for `m >= n`, sign-normalized and sorted.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    // column-major working copies
    let mut w = a.transpose().into_vec();
    let mut v = Matrix::identity(n).into_vec();
    let tol = f64::EPSILON * (m as f64).sqrt();
    let tiny = f64::MIN_POSITIVE.sqrt();
    let mut norms: Vec<f64> = (0..n).map(|j| sq_norm(&w[j * m..(j + 1) * m])).collect();

    let mut converged = false;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= tiny || beta <= tiny {
                    continue;
                }
                let (head, tail) = w.split_at_mut(q * m);
                let cp = &mut head[p * m..(p + 1) * m];
                let cq = &mut tail[..m];
                let gamma = dot(cp, cq);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(cp, cq, c, s);
                norms[p] = alpha - t * gamma;
                norms[q] = beta + t * gamma;
                let (vh, vt) = v.split_at_mut(q * n);
                rotate(&mut vh[p * n..(p + 1) * n], &mut vt[..n], c, s);
            }
        }
        for j in 0..n {
            norms[j] = sq_norm(&w[j * m..(j + 1) * m]);
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        bail!(Numerical, "svd did not converge after {SVD_MAX_SWEEPS} Jacobi sweeps");
    }

    let sigma_raw: Vec<f64> = norms.iter().map(|x| x.sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma_raw[j].total_cmp(&sigma_raw[i]));
    let smax = sigma_raw[order[0]];
    let floor = smax * f64::EPSILON * (m.max(n) as f64);

    // columns in sorted order, col-major
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    let mut sigma = Vec::with_capacity(n);
    for (rank, &j) in order.iter().enumerate() {
        let s = sigma_raw[j];
        sigma.push(s);
        if s > floor && s > 0.0 {
            ucols.push(w[j * m..(j + 1) * m].iter().map(|x| x / s).collect());
        } else {
            ucols.push(vec![0.0; m]);
            deficient.push(rank);
        }
    }
    complete_basis(&mut ucols, &deficient, m);

    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    for (col, &j) in order.iter().enumerate() {
        let uc = &ucols[col];
        let (mut best, mut best_abs) = (0usize, -1.0f64);
        for (i, x) in uc.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        let sign = if uc[best] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            u.set(i, col, sign * uc[i]);
        }
        for i in 0..n {
            vm.set(i, col, sign * v[j * n + i]);
        }
    }
    Ok((u, sigma, vm))
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let (xa, yb) = (*a, *b);
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to all
/// other columns (Gram-Schmidt over the standard basis, two passes).
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0usize;
    for &slot in missing {
        loop {
            assert!(candidate < m, "cannot complete orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || (missing.contains(&k) && c.iter().all(|&x| x == 0.0)) {
                        continue;
                    }
                    let d = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= d * ci;
                    }
                }
            }
            let nrm = sq_norm(&e).sqrt();
            if nrm > 0.5 {
                e.iter_mut().for_each(|x| *x /= nrm);
                cols[slot] = e;
                break;
            }
        }
    }
}

/// Rank-k factor pair `(U_k·diag(σ_k), Vᵀ_k)`; singular values are absorbed
/// into the left factor.
pub fn truncate(s: &SvdResult, k: usize) -> Result<(Matrix, Matrix)> {
    let r = s.sigma.len();
    if k == 0 || k > r {
        bail!(Config, "truncation rank {k} outside [1, {r}]");
    }
    let m = s.u.rows();
    let mut wa = Matrix::zeros(m, k);
    for i in 0..m {
        for j in 0..k {
            wa.set(i, j, s.u.get(i, j) * s.sigma[j]);
        }
    }
    let n = s.vt.cols();
    let wb = Matrix::from_vec(k, n, s.vt.as_slice()[..k * n].to_vec())?;
    Ok((wa, wb))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn orthonormality_residual(q: &Matrix) -> f64 {
        let g = matmul_tn(q, q).unwrap();
        g.sub(&Matrix::identity(g.rows())).unwrap().frobenius_norm()
    }

    #[test]
    fn identity_product() {
        let mut rng = substream(1, "t", &[]);
        let a = Matrix::uniform(3, 4, 1.0, &mut rng);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn hand_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert_eq!(err.category(), "config");
    }

    #[test]
    fn products_match_naive_oracle() {
        let mut rng = substream(2, "t", &[]);
        for _ in 0..100 {
            use rand::Rng as _;
            let (m, k, n) = (rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9));
            let a = Matrix::uniform(m, k, 1.0, &mut rng);
            let b = Matrix::uniform(k, n, 1.0, &mut rng);
            let want = naive(&a, &b);
            assert!(matmul(&a, &b).unwrap().max_abs_diff(&want) <= 1e-12);
            assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&want) <= 1e-12);
            assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&want) <= 1e-12);
        }
        let a = Matrix::uniform(7, 5, 1.0, &mut rng);
        let b = Matrix::uniform(5, 3, 1.0, &mut rng);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive(&a, &b)) <= 1e-12);
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn svd_identity_and_diagonal() {
        assert_eq!(svd(&Matrix::identity(4)).unwrap().sigma, vec![1.0; 4]);
        let s = svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
        let s = svd(&Matrix::from_diag(&[1.0, 3.0, 2.0])).unwrap();
        assert_eq!(s.sigma, vec![3.0, 2.0, 1.0]);
    }

    #[test]
    fn svd_random_residuals() {
        let mut rng = substream(3, "t", &[]);
        for (m, n) in [(6, 4), (4, 6), (1, 5), (5, 1), (30, 30)] {
            let a = Matrix::uniform(m, n, 1.0, &mut rng);
            let s = svd(&a).unwrap();
            let recon = s.reconstruct().sub(&a).unwrap().frobenius_norm() / a.frobenius_norm().max(1.0);
            assert!(recon <= 1e-10, "{m}x{n}: {recon}");
            assert!(orthonormality_residual(&s.u) <= 1e-10);
            assert!(orthonormality_residual(&s.vt.transpose()) <= 1e-10);
            assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![-1.0, -2.0, -3.0], vec![0.5, 1.0, 1.5]])
            .unwrap();
        let s = svd(&a).unwrap();
        assert!(s.sigma[1] / s.sigma[0] < 1e-10);
        assert!(orthonormality_residual(&s.u) <= 1e-10);
        assert!(s.reconstruct().sub(&a).unwrap().frobenius_norm() <= 1e-10);
        let z = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(z.sigma, vec![0.0, 0.0]);
        assert!(orthonormality_residual(&z.u) <= 1e-12);
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = substream(4, "t", &[]);
        let a = Matrix::uniform(8, 5, 1.0, &mut rng);
        let s = svd(&a).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..8).map(|i| s.u.get(i, j)).collect();
            let big = col.iter().cloned().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            assert!(big >= 0.0);
        }
    }

    #[test]
    fn truncate_eckart_young_on_diagonal() {
        let s = svd(&Matrix::from_diag(&[3.0, 2.0, 1.0])).unwrap();
        let a = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let err = |k| {
            let (wa, wb) = truncate(&s, k).unwrap();
            a.sub(&matmul(&wa, &wb).unwrap()).unwrap().frobenius_norm()
        };
        assert!((err(1) - 5f64.sqrt()).abs() < 1e-12);
        assert!((err(2) - 1.0).abs() < 1e-12);
        assert!(err(3) < 1e-12);
        assert!(truncate(&s, 0).is_err());
        assert!(truncate(&s, 4).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn truncation_error_matches_discarded_energy(seed in 0u64..1000, m in 1usize..12, n in 1usize..12) {
            let mut rng = substream(seed, "prop", &[]);
            let a = Matrix::uniform(m, n, 1.0, &mut rng);
            let s = svd(&a).unwrap();
            let total = a.frobenius_norm().powi(2);
            for k in 1..=s.sigma.len() {
                let (wa, wb) = truncate(&s, k).unwrap();
                let err2 = a.sub(&matmul(&wa, &wb).unwrap()).unwrap().frobenius_norm().powi(2);
                let tail: f64 = s.sigma[k..].iter().map(|x| x * x).sum();
                prop_assert!((err2 - tail).abs() <= 1e-8 * tail + 1e-12 * total);
            }
        }

        #[test]
        fn transpose_has_same_spectrum(seed in 0u64..1000, m in 1usize..10, n in 1usize..10) {
            let mut rng = substream(seed, "prop-t", &[]);
            let a = Matrix::uniform(m, n, 1.0, &mut rng);
            let s1 = svd(&a).unwrap().sigma;
            let s2 = svd(&a.transpose()).unwrap().sigma;
            for (x, y) in s1.iter().zip(&s2) {
                prop_assert!((x - y).abs() <= 1e-10);
            }
        }
    }
}
