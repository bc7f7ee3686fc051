//! Matrix-free Krylov solvers.

use num_complex::Complex64;

fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}

/// Outcome of an iterative solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub rel_residual: f64,
    pub converged: bool,
}

/// Restarted GMRES(m) for a complex linear operator, starting from `x`.
pub fn gmres(
    op: &mut dyn FnMut(&[Complex64], &mut [Complex64]),
    b: &[Complex64],
    x: &mut [Complex64],
    restart: usize,
    tol: f64,
    max_iter: usize,
) -> SolveStats {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = Complex64::new(0.0, 0.0));
        return SolveStats { iterations: 0, rel_residual: 0.0, converged: true };
    }
    let zero = Complex64::new(0.0, 0.0);
    let mut ax = vec![zero; n];
    let mut total = 0;
    let mut rel = f64::INFINITY;
    while total < max_iter {
        op(x, &mut ax);
        let r: Vec<Complex64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm(&r);
        rel = beta / bnorm;
        if rel <= tol {
            return SolveStats { iterations: total, rel_residual: rel, converged: true };
        }
        let mut v: Vec<Vec<Complex64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut h = vec![vec![zero; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![zero; restart];
        let mut g = vec![zero; restart + 1];
        g[0] = Complex64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..restart {
            total += 1;
            let mut w = vec![zero; n];
            op(&v[k], &mut w);
            for (i, vi) in v.iter().enumerate() {
                let hik = dot(vi, &w);
                h[i][k] = hik;
                w.iter_mut().zip(vi).for_each(|(wj, vj)| *wj -= hik * vj);
            }
            let hn = norm(&w);
            h[k + 1][k] = Complex64::new(hn, 0.0);
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i].conj() * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let (h1, h2) = (h[k][k], h[k + 1][k]);
            let t = (h1.norm_sqr() + h2.norm_sqr()).sqrt();
            if t == 0.0 {
                cs[k] = 1.0;
                sn[k] = zero;
            } else if h1.norm() == 0.0 {
                cs[k] = 0.0;
                sn[k] = h2.conj() / h2.norm();
            } else {
                cs[k] = h1.norm() / t;
                sn[k] = (h1 / h1.norm()) * h2.conj() / t;
            }
            h[k][k] = cs[k] * h1 + sn[k] * h2;
            h[k + 1][k] = zero;
            g[k + 1] = -sn[k].conj() * g[k];
            g[k] = cs[k] * g[k];
            k_used = k + 1;
            rel = g[k + 1].norm() / bnorm;
            if rel <= tol || hn == 0.0 || total >= max_iter {
                break;
            }
            v.push(w.iter().map(|wj| wj / hn).collect());
        }
        let mut y = vec![zero; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&v[j]).for_each(|(xi, vi)| *xi += yj * vi);
        }
        if rel <= tol {
            op(x, &mut ax);
            let r = norm(&b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect::<Vec<_>>()) / bnorm;
            return SolveStats { iterations: total, rel_residual: r, converged: r <= tol * 10.0 };
        }
    }
    SolveStats { iterations: total, rel_residual: rel, converged: false }
}

/// Preconditioned conjugate gradient for a real SPD operator with a diagonal
/// preconditioner; relative residual tolerance.
pub fn pcg(
    op: &mut dyn FnMut(&[f64], &mut [f64]),
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> SolveStats {
    let n = b.len();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return SolveStats { iterations: 0, rel_residual: 0.0, converged: true };
    }
    let mut ax = vec![0.0; n];
    op(x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, d)| ri / d).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    let mut ap = vec![0.0; n];
    for it in 0..max_iter {
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
        if rn <= tol {
            return SolveStats { iterations: it, rel_residual: rn, converged: true };
        }
        op(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt() / bnorm;
    SolveStats { iterations: max_iter, rel_residual: rn, converged: rn <= tol }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gmres_solves_nonsymmetric_complex_system() {
        let n = 30;
        let a = |i: usize, j: usize| -> Complex64 {
            if i == j {
                Complex64::new(4.0, 1.0)
            } else if j == i + 1 {
                Complex64::new(-1.0, 0.5)
            } else if i == j + 1 {
                Complex64::new(-0.5, -0.2)
            } else {
                Complex64::new(0.0, 0.0)
            }
        };
        let xt: Vec<Complex64> = (0..n).map(|i| Complex64::new(i as f64 * 0.1, 1.0)).collect();
        let mut apply = |x: &[Complex64], y: &mut [Complex64]| {
            for i in 0..n {
                y[i] = (0..n).map(|j| a(i, j) * x[j]).sum();
            }
        };
        let mut b = vec![Complex64::new(0.0, 0.0); n];
        apply(&xt, &mut b);
        let mut x = vec![Complex64::new(0.0, 0.0); n];
        let st = gmres(&mut apply, &b, &mut x, 8, 1e-12, 500);
        assert!(st.converged, "{st:?}");
        for (u, v) in x.iter().zip(&xt) {
            assert!((u - v).norm() < 1e-10);
        }
    }

    #[test]
    fn pcg_solves_spd_tridiagonal() {
        let n = 50;
        let mut apply = |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let l = if i > 0 { x[i - 1] } else { 0.0 };
                let r = if i + 1 < n { x[i + 1] } else { 0.0 };
                y[i] = 3.0 * x[i] - l - r;
            }
        };
        let xt: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let mut b = vec![0.0; n];
        apply(&xt, &mut b);
        let mut x = vec![0.0; n];
        let st = pcg(&mut apply, &vec![3.0; n], &b, &mut x, 1e-13, 200);
        assert!(st.converged);
        assert!(x.iter().zip(&xt).all(|(a, b)| (a - b).abs() < 1e-11));
    }
}
