//! Dense complex linear algebra: matrix type, products, one-sided Jacobi
//! SVD, column-pivoted Householder QR and small real solves.

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::scalar::{czero, Real};

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![czero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape/data mismatch");
        Self { rows, cols, data }
    }

    /// Builds a matrix from columns of equal length.
    pub fn from_columns(cols: &[Vec<Complex<T>>]) -> Self {
        let n = cols.len();
        let m = cols.first().map_or(0, |c| c.len());
        Self::from_fn(m, n, |i, j| cols[j][i])
    }

    #[inline(always)]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline(always)]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline(always)]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline(always)]
    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    #[inline(always)]
    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    /// Heap bytes held by the entries.
    pub fn bytes(&self) -> usize {
        self.data.len() * std::mem::size_of::<Complex<T>>()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale_rows(&mut self, s: &[T]) {
        for i in 0..self.rows {
            let f = s[i];
            for z in &mut self.data[i * self.cols..(i + 1) * self.cols] {
                *z = z.scale(f);
            }
        }
    }

    pub fn scale_cols(&mut self, s: &[T]) {
        for i in 0..self.rows {
            for (j, z) in self.data[i * self.cols..(i + 1) * self.cols].iter_mut().enumerate() {
                *z = z.scale(s[j]);
            }
        }
    }

    /// Selects a subset of columns.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, j| self[(i, idx[j])])
    }

    /// Keeps the first `n` columns.
    pub fn leading_columns(&self, n: usize) -> Self {
        Self::from_fn(self.rows, n, |i, j| self[(i, j)])
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).norm())
            .fold(T::zero(), |m, x| m.max(x))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        if self.rows == 0 || other.cols == 0 || self.cols == 0 {
            return out;
        }
        unsafe {
            T::cgemm(
                self.rows,
                self.cols,
                other.cols,
                Complex::one(),
                self.data.as_ptr(),
                self.cols as isize,
                1,
                other.data.as_ptr(),
                other.cols as isize,
                1,
                czero(),
                out.data.as_mut_ptr(),
                other.cols as isize,
                1,
            );
        }
        out
    }

    /// `y (+)= self * x`.
    pub fn matvec_into(&self, x: &[Complex<T>], y: &mut [Complex<T>], accumulate: bool) {
        assert_eq!(x.len(), self.cols);
        assert_eq!(y.len(), self.rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let s = dot_plain(row, x);
            if accumulate {
                *yi += s;
            } else {
                *yi = s;
            }
        }
    }

    pub fn matvec(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut y = vec![czero(); self.rows];
        self.matvec_into(x, &mut y, false);
        y
    }

    /// `y (+)= self^T * x`.
    pub fn matvec_transpose_into(&self, x: &[Complex<T>], y: &mut [Complex<T>], accumulate: bool) {
        assert_eq!(x.len(), self.rows);
        assert_eq!(y.len(), self.cols);
        if !accumulate {
            y.iter_mut().for_each(|z| *z = czero());
        }
        for (i, xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (yj, a) in y.iter_mut().zip(row) {
                *yj += *a * *xi;
            }
        }
    }

    /// Spectral norm via singular values.
    pub fn norm2(&self) -> T {
        svd(self).sigma.first().copied().unwrap_or(T::zero())
    }
}

impl<T> std::ops::Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;
    #[inline(always)]
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for CMatrix<T> {
    #[inline(always)]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.cols + j]
    }
}

#[inline(always)]
fn dot_plain<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    let mut re = T::zero();
    let mut im = T::zero();
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re - x.im * y.im;
        im += x.re * y.im + x.im * y.re;
    }
    Complex::new(re, im)
}

/// `sum conj(a_i) b_i`.
#[inline(always)]
pub fn dotc<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    let mut re = T::zero();
    let mut im = T::zero();
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re + x.im * y.im;
        im += x.re * y.im - x.im * y.re;
    }
    Complex::new(re, im)
}

/// Thin singular value decomposition `A = U diag(sigma) V^H`.
#[derive(Debug, Clone)]
pub struct Svd<T> {
    /// `m x p`, orthonormal columns, `p = min(m, n)`.
    pub u: CMatrix<T>,
    /// Descending.
    pub sigma: Vec<T>,
    /// `n x p`, orthonormal columns.
    pub v: CMatrix<T>,
}

impl<T: Real> Svd<T> {
    /// Number of singular values with `sigma_i >= tol * sigma_1`.
    pub fn rank(&self, tol: T) -> usize {
        match self.sigma.first() {
            None => 0,
            Some(&s1) => self.sigma.iter().take_while(|&&s| s >= tol * s1 && s > T::zero()).count(),
        }
    }

    /// Drops all but the leading `r` triplets.
    pub fn truncate(&mut self, r: usize) {
        self.sigma.truncate(r);
        self.u = self.u.leading_columns(r);
        self.v = self.v.leading_columns(r);
    }
}

/// One-sided Jacobi SVD. Accurate to working precision, `O(mn^2)` per sweep.
pub fn svd<T: Real>(a: &CMatrix<T>) -> Svd<T> {
    let (m, n) = a.shape();
    if m < n {
        let s = svd(&a.adjoint());
        return Svd {
            u: s.v,
            sigma: s.sigma,
            v: s.u,
        };
    }
    // Column-major working copies.
    let mut cols: Vec<Vec<Complex<T>>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<Complex<T>>> = (0..n)
        .map(|j| {
            let mut c = vec![czero(); n];
            c[j] = Complex::one();
            c
        })
        .collect();
    let mut norms: Vec<T> = cols.iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum()).collect();
    let tol = T::epsilon() * T::from_usize_lossy(m).sqrt();
    let scale_floor = norms.iter().fold(T::zero(), |a, &b| a.max(b)) * T::epsilon() * T::epsilon();

    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= scale_floor || beta <= scale_floor {
                    continue;
                }
                let gamma = dotc(&cols[p], &cols[q]);
                let g = gamma.norm();
                if g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / Complex::new(g, T::zero());
                let zeta = (beta - alpha) / (T::c(2.0) * g);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                // a_q~ = a_q * conj(phase); a_p' = c a_p - s a_q~, a_q' = s a_p + c a_q~
                let ph = phase.conj();
                {
                    let (left, right) = cols.split_at_mut(q);
                    let cp = &mut left[p];
                    let cq = &mut right[0];
                    let mut np = T::zero();
                    let mut nq = T::zero();
                    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                        let yq = *y * ph;
                        let xp = *x;
                        *x = xp.scale(c) - yq.scale(s);
                        *y = xp.scale(s) + yq.scale(c);
                        np += x.norm_sqr();
                        nq += y.norm_sqr();
                    }
                    norms[p] = np;
                    norms[q] = nq;
                }
                {
                    let (left, right) = vcols.split_at_mut(q);
                    let vp = &mut left[p];
                    let vq = &mut right[0];
                    for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                        let yq = *y * ph;
                        let xp = *x;
                        *x = xp.scale(c) - yq.scale(s);
                        *y = xp.scale(s) + yq.scale(c);
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<T> = norms.iter().map(|x| x.sqrt()).collect();
    order.sort_by(|&i, &j| sig[j].partial_cmp(&sig[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = CMatrix::zeros(m, n);
    let mut v = CMatrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        let s = sig[j];
        sigma.push(s);
        if s > T::zero() {
            let inv = T::one() / s;
            for i in 0..m {
                u[(i, k)] = cols[j][i].scale(inv);
            }
        }
        for i in 0..n {
            v[(i, k)] = vcols[j][i];
        }
    }
    complete_zero_columns(&mut u, &sigma);
    Svd { u, sigma, v }
}

// Columns of U belonging to zero singular values are filled with an
// orthonormal completion so U keeps orthonormal columns.
fn complete_zero_columns<T: Real>(u: &mut CMatrix<T>, sigma: &[T]) {
    let (m, p) = u.shape();
    let first_zero = sigma.iter().position(|&s| s == T::zero());
    let Some(start) = first_zero else { return };
    let mut basis: Vec<Vec<Complex<T>>> = (0..start).map(|j| u.column(j)).collect();
    let mut e = 0usize;
    for k in start..p {
        loop {
            let mut c = vec![czero(); m];
            c[e % m] = Complex::one();
            e += 1;
            for b in &basis {
                let proj = dotc(b, &c);
                for (ci, bi) in c.iter_mut().zip(b) {
                    *ci -= *bi * proj;
                }
            }
            let nrm = c.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
            if nrm > T::c(1e-6) {
                for z in &mut c {
                    *z = z.unscale(nrm);
                }
                for i in 0..m {
                    u[(i, k)] = c[i];
                }
                basis.push(c);
                break;
            }
            if e > 4 * m {
                return;
            }
        }
    }
}

/// Result of a rank-revealing column-pivoted QR, `A P = Q R`.
#[derive(Debug, Clone)]
pub struct PivotedQr<T> {
    /// Column indices of `A` in pivot order; the first `rank` are the skeleton.
    pub perm: Vec<usize>,
    pub rank: usize,
    /// `m x rank`.
    pub q: CMatrix<T>,
    /// `rank x n`, columns in pivot order.
    pub r: CMatrix<T>,
}

/// Householder QR with column pivoting, stopped when the largest remaining
/// column norm drops below `tol` times the largest initial column norm, or
/// after `max_rank` steps.
pub fn pivoted_qr<T: Real>(a: &CMatrix<T>, tol: T, max_rank: usize) -> PivotedQr<T> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<Complex<T>>> = (0..n).map(|j| a.column(j)).collect();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<T> = cols.iter().map(|c| c.iter().map(|z| z.norm_sqr()).sum()).collect();
    let max0 = norms.iter().fold(T::zero(), |a, &b| a.max(b)).sqrt();
    let kmax = m.min(n).min(max_rank);
    let mut reflectors: Vec<Vec<Complex<T>>> = Vec::new();
    let mut rank = 0;
    if max0 == T::zero() {
        return PivotedQr {
            perm,
            rank: 0,
            q: CMatrix::zeros(m, 0),
            r: CMatrix::zeros(0, n),
        };
    }
    for k in 0..kmax {
        // Recompute trailing norms exactly every step for robustness.
        let (jmax, nmax) = (k..n)
            .map(|j| (j, norms[j]))
            .fold((k, T::neg_infinity()), |acc, x| if x.1 > acc.1 { x } else { acc });
        if nmax.sqrt() <= tol * max0 {
            break;
        }
        cols.swap(k, jmax);
        perm.swap(k, jmax);
        norms.swap(k, jmax);
        // Householder on column k rows k..m
        let x = &cols[k][k..];
        let xnorm = x.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        if xnorm == T::zero() {
            break;
        }
        let x0 = x[0];
        let phase = if x0.norm() > T::zero() {
            x0.unscale(x0.norm())
        } else {
            Complex::one()
        };
        let alpha = -phase.scale(xnorm);
        let mut v: Vec<Complex<T>> = x.to_vec();
        v[0] -= alpha;
        let vnorm = v.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
        if vnorm > T::zero() {
            for z in &mut v {
                *z = z.unscale(vnorm);
            }
        }
        // Apply H = I - 2 v v^H to remaining columns.
        for col in cols.iter_mut().skip(k) {
            let seg = &mut col[k..];
            let d = dotc(&v, seg) * T::c(2.0);
            for (s, vi) in seg.iter_mut().zip(&v) {
                *s -= *vi * d;
            }
        }
        cols[k][k] = alpha;
        for i in k + 1..m {
            cols[k][i] = czero();
        }
        for j in k + 1..n {
            norms[j] = cols[j][k + 1..].iter().map(|z| z.norm_sqr()).sum();
        }
        norms[k] = T::zero();
        reflectors.push(v);
        rank = k + 1;
    }
    // R
    let mut r = CMatrix::zeros(rank, n);
    for j in 0..n {
        for i in 0..rank.min(j + 1).min(m) {
            r[(i, j)] = cols[j][i];
        }
        if j >= rank {
            for i in 0..rank {
                r[(i, j)] = cols[j][i];
            }
        }
    }
    // Q = H_0 ... H_{rank-1} applied to the first `rank` unit vectors.
    let mut q = CMatrix::zeros(m, rank);
    for c in 0..rank {
        let mut e = vec![czero(); m];
        e[c] = Complex::one();
        for k in (0..rank).rev() {
            let v = &reflectors[k];
            let seg = &mut e[k..];
            let d = dotc(v, seg) * T::c(2.0);
            for (s, vi) in seg.iter_mut().zip(v) {
                *s -= *vi * d;
            }
        }
        for i in 0..m {
            q[(i, c)] = e[i];
        }
    }
    PivotedQr { perm, rank, q, r }
}

/// Inverse of a small real matrix by Gauss-Jordan elimination with partial
/// pivoting. Returns `None` when singular.
pub fn invert_real<T: Real>(a: &[Vec<T>]) -> Option<Vec<Vec<T>>> {
    let n = a.len();
    let mut m: Vec<Vec<T>> = a.to_vec();
    let mut inv: Vec<Vec<T>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().partial_cmp(&m[j][c].abs()).unwrap())?;
        if m[p][c].abs() == T::zero() {
            return None;
        }
        m.swap(c, p);
        inv.swap(c, p);
        let d = m[c][c];
        for j in 0..n {
            m[c][j] /= d;
            inv[c][j] /= d;
        }
        for i in 0..n {
            if i != c {
                let f = m[i][c];
                if f != T::zero() {
                    for j in 0..n {
                        let mc = m[c][j];
                        let ic = inv[c][j];
                        m[i][j] -= f * mc;
                        inv[i][j] -= f * ic;
                    }
                }
            }
        }
    }
    Some(inv)
}

/// 1-norm condition number of a small real matrix.
pub fn condition_1<T: Real>(a: &[Vec<T>]) -> T {
    let norm1 = |m: &[Vec<T>]| {
        (0..m.len())
            .map(|j| m.iter().map(|r| r[j].abs()).sum::<T>())
            .fold(T::zero(), |x, y| x.max(y))
    };
    match invert_real(a) {
        Some(inv) => norm1(a) * norm1(&inv),
        None => T::infinity(),
    }
}

/// Solves a dense complex system with partial pivoting (small systems only).
pub fn solve_complex<T: Real>(a: &CMatrix<T>, b: &[Complex<T>]) -> Option<Vec<Complex<T>>> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    let mut m = a.clone();
    let mut x = b.to_vec();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[(i, c)].norm().partial_cmp(&m[(j, c)].norm()).unwrap())?;
        if m[(p, c)].is_zero() {
            return None;
        }
        if p != c {
            for j in 0..n {
                let t = m[(c, j)];
                m[(c, j)] = m[(p, j)];
                m[(p, j)] = t;
            }
            x.swap(c, p);
        }
        let d = m[(c, c)];
        for i in c + 1..n {
            let f = m[(i, c)] / d;
            if !f.is_zero() {
                for j in c..n {
                    let mc = m[(c, j)];
                    m[(i, j)] -= f * mc;
                }
                let xc = x[c];
                x[i] -= f * xc;
            }
        }
    }
    for c in (0..n).rev() {
        let mut s = x[c];
        for j in c + 1..n {
            s -= m[(c, j)] * x[j];
        }
        x[c] = s / m[(c, c)];
    }
    Some(x)
}
