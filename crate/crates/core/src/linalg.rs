//! Dense complex matrices: LU with partial pivoting, singular values by
//! one-sided Jacobi, and the diagonal-dominance lower bound on σ_min.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix { rows, cols, data: vec![Complex::zero(); rows * cols] }
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
        CMatrix { rows, cols, data }
    }

    pub fn from_real(rows: usize, cols: usize, vals: &[T]) -> Self {
        assert_eq!(vals.len(), rows * cols);
        CMatrix { rows, cols, data: vals.iter().map(|&v| Complex::new(v, T::zero())).collect() }
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * s).collect() }
    }

    pub fn mat_vec(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                let row = &self.data[i * self.cols..(i + 1) * self.cols];
                row.iter().zip(x).fold(Complex::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, v| acc + v.norm_sqr()).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.norm()))
    }

    pub fn lu(&self) -> Result<Lu<T>> {
        Lu::factor(self)
    }

    pub fn inverse(&self) -> Result<Self> {
        let lu = self.lu()?;
        let n = self.rows;
        let mut inv = Self::zeros(n, n);
        let mut e = vec![Complex::zero(); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = Complex::zero());
            e[j] = Complex::one();
            let x = lu.solve(&e);
            for i in 0..n {
                inv[(i, j)] = x[i];
            }
        }
        Ok(inv)
    }

    /// Singular values in descending order.
    pub fn singular_values(&self) -> Vec<T> {
        let mut s = if self.rows >= self.cols {
            jacobi_column_norms(self.clone())
        } else {
            jacobi_column_norms(self.adjoint())
        };
        s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        s
    }

    pub fn smallest_singular_value(&self) -> T {
        self.singular_values().last().copied().unwrap_or_else(T::zero)
    }

    pub fn spectral_norm(&self) -> T {
        self.singular_values().first().copied().unwrap_or_else(T::zero)
    }
}

impl<T> Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for CMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: Real> Mul for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn mul(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.cols, rhs.rows);
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] = out[(i, j)] + a * rhs[(k, j)];
                }
            }
        }
        out
    }
}

impl<T: Real> Add for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn add(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl<T: Real> Sub for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn sub(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

/// PA = LU with partial pivoting; L unit lower, stored together with U.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    n: usize,
    lu: Vec<Complex<T>>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    pub fn factor(a: &CMatrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::ShapeMismatch { expected: a.rows, got: a.cols });
        }
        let n = a.rows;
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[k * n + k].norm();
            for i in k + 1..n {
                let v = lu[i * n + k].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return Err(Error::IllConditioned { sigma_min: 0.0, norm: a.max_abs().to_f64().unwrap_or(f64::NAN) });
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    let u = lu[k * n + j];
                    lu[i * n + j] = lu[i * n + j] - f * u;
                }
            }
        }
        Ok(Lu { n, lu, perm })
    }

    pub fn solve(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.n;
        assert_eq!(b.len(), n);
        let mut x: Vec<Complex<T>> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s = s - self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s = s - self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }
}

/// One-sided (Hestenes) Jacobi: rotate column pairs of `a` until they are
/// mutually orthogonal; the column norms are then the singular values.
/// This is the Jacobi eigenvalue iteration on a*a applied implicitly.
fn jacobi_column_norms<T: Real>(mut a: CMatrix<T>) -> Vec<T> {
    let (m, n) = (a.rows, a.cols);
    // bring magnitudes near one to avoid over/underflow in the Gram entries
    let scale = a.max_abs();
    if scale == T::zero() || !scale.is_finite() {
        return vec![if scale.is_finite() { T::zero() } else { scale }; n];
    }
    let inv = Complex::new(T::one() / scale, T::zero());
    a.data.iter_mut().for_each(|v| *v = *v * inv);

    let tol = T::epsilon() * T::count(m.max(1));
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut alpha = T::zero();
                let mut beta = T::zero();
                let mut gamma = Complex::<T>::zero();
                for i in 0..m {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    alpha += ap.norm_sqr();
                    beta += aq.norm_sqr();
                    gamma = gamma + ap.conj() * aq;
                }
                let g = gamma.norm();
                if g == T::zero() || g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let phase = gamma / Complex::new(g, T::zero());
                let zeta = (beta - alpha) / (T::lit(2.0) * g);
                let sgn = if zeta >= T::zero() { T::one() } else { -T::one() };
                let t = sgn / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let cc = Complex::new(c, T::zero());
                let s_ph = phase * s;
                let s_ph_conj = phase.conj() * s;
                for i in 0..m {
                    let ap = a[(i, p)];
                    let aq = a[(i, q)];
                    a[(i, p)] = cc * ap - s_ph_conj * aq;
                    a[(i, q)] = s_ph * ap + cc * aq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    (0..n)
        .map(|j| (0..m).fold(T::zero(), |acc, i| acc + a[(i, j)].norm_sqr()).sqrt() * scale)
        .collect()
}

/// Diagonal-dominance bound: σ_min(A) ≥ min_j |a_jj| − (Σ_{l≠j} |a_lj|²)^{1/2}.
pub fn beta_lower_bound<T: Real>(a: &CMatrix<T>) -> Result<T> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch { expected: a.rows, got: a.cols });
    }
    let n = a.rows;
    let mut min_diag = T::infinity();
    let mut off = T::zero();
    for l in 0..n {
        for j in 0..n {
            if l == j {
                min_diag = min_diag.min(a[(l, j)].norm());
            } else {
                off += a[(l, j)].norm_sqr();
            }
        }
    }
    if n == 0 {
        return Ok(T::zero());
    }
    Ok(min_diag - off.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type M = CMatrix<f64>;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn random(n: usize, rng: &mut ChaCha8Rng) -> M {
        M::from_fn(n, n, |_, _| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn simple_singular_values() {
        assert!((M::identity(4).smallest_singular_value() - 1.0).abs() < 1e-15);
        let d = M::from_real(2, 2, &[3.0, 0.0, 0.0, 0.5]);
        assert!((d.smallest_singular_value() - 0.5).abs() < 1e-15);
        assert!((d.spectral_norm() - 3.0).abs() < 1e-15);
        let nil = M::from_real(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(nil.smallest_singular_value().abs() < 1e-15);
        assert!(M::zeros(3, 3).smallest_singular_value() == 0.0);
    }

    #[test]
    fn singular_values_match_gram_eigenvalues_2x2() {
        // for 2×2, σ² are the roots of λ² − tr(G)λ + det(G) with G = A*A
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a = random(2, &mut rng);
            let g = &a.adjoint() * &a;
            let tr = (g[(0, 0)] + g[(1, 1)]).re;
            let det = (g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)]).re;
            let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
            let lo = ((tr - disc) / 2.0).max(0.0).sqrt();
            let hi = ((tr + disc) / 2.0).sqrt();
            let s = a.singular_values();
            assert!((s[0] - hi).abs() < 1e-12 * hi);
            assert!((s[1] - lo).abs() < 1e-8 * hi);
        }
    }

    #[test]
    fn frobenius_equals_singular_value_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(6, &mut rng);
        let s = a.singular_values();
        let e: f64 = s.iter().map(|v| v * v).sum();
        assert!((e.sqrt() - a.frobenius()).abs() < 1e-12 * a.frobenius());
    }

    #[test]
    fn lu_solves_and_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(7, &mut rng);
        let x: Vec<Complex64> = (0..7).map(|i| Complex64::new(i as f64, -1.0)).collect();
        let b = a.mat_vec(&x);
        let y = a.lu().unwrap().solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).norm() < 1e-12);
        }
        let inv = a.inverse().unwrap();
        let id = &a * &inv;
        assert!((&id - &M::identity(7)).max_abs() < 1e-12);
        assert!(M::zeros(3, 3).lu().is_err());
    }

    #[test]
    fn beta_bound_examples() {
        assert_eq!(beta_lower_bound(&M::identity(3)).unwrap(), 1.0);
        let a = M::from_real(2, 2, &[2.0, 0.0, 1.0, 1.0]);
        assert!(beta_lower_bound(&a).unwrap().abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random(5, &mut rng);
            assert!(beta_lower_bound(&a).unwrap() <= a.smallest_singular_value() + 1e-12);
        }
    }

    #[test]
    fn generic_over_f32() {
        let a = CMatrix::<f32>::from_real(2, 2, &[3.0, 0.0, 0.0, 0.5]);
        assert!((a.smallest_singular_value() - 0.5).abs() < 1e-6);
        assert!((beta_lower_bound(&a).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rectangular_and_scaled() {
        let a = M::from_fn(4, 2, |i, j| c(if i == j { 1e150 } else { 0.0 }));
        let s = a.singular_values();
        assert!((s[0] / 1e150 - 1.0).abs() < 1e-14 && (s[1] / 1e150 - 1.0).abs() < 1e-14);
        let w = M::from_fn(2, 3, |i, j| c((i + 2 * j) as f64));
        assert_eq!(w.singular_values().len(), 2);
    }
}
