//! Stationary point-source problem −∇·(κ∇u) + qu = Σ a_j δ(x − s_j) with
//! homogeneous Neumann data, and the boundary functionals R(v) = ∫ κ ∂_n v u.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{CoefficientSet, Grid2D, ScalarField};
use crate::krylov::pcg;
use crate::measures::AtomicMeasure;

/// Smallest admissible q; the pure Neumann problem has no solution at q ≡ 0.
pub const Q_MIN: f64 = 1e-6;
pub const CG_TOL: f64 = 1e-10;

/// Vertex-centred finite-volume operator on the lumped dual cells:
/// (Au)_k = Σ_faces c_f (u_k − u_nb) + r_k u_k.
/// Equivalent to second-order differences with mirrored ghost nodes, scaled
/// by the dual-cell area.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionOperator {
    pub nx: usize,
    pub ny: usize,
    /// conductance between k and k+1 (unused in the last column)
    pub cx: Vec<f64>,
    /// conductance between k and k+nx (unused in the last row)
    pub cy: Vec<f64>,
    /// reaction term q_k w_k
    pub react: Vec<f64>,
    /// lumped mass w_k
    pub mass: Vec<f64>,
}

impl DiffusionOperator {
    pub fn new(g: &Grid2D, kappa: &[f64], q: &[f64]) -> Result<DiffusionOperator> {
        g.check_len(kappa.len())?;
        g.check_len(q.len())?;
        let (nx, ny) = (g.nx, g.ny);
        let mut cx = vec![0.0; g.len()];
        let mut cy = vec![0.0; g.len()];
        for j in 0..ny {
            let wy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
            for i in 0..nx {
                let k = g.idx(i, j);
                if i + 1 < nx {
                    cx[k] = 0.5 * (kappa[k] + kappa[k + 1]) * wy * g.hy / g.hx;
                }
                if j + 1 < ny {
                    let wx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                    cy[k] = 0.5 * (kappa[k] + kappa[k + nx]) * wx * g.hx / g.hy;
                }
            }
        }
        let mass = g.area_weights();
        let react = q.iter().zip(&mass).map(|(a, b)| a * b).collect();
        Ok(DiffusionOperator { nx, ny, cx, cy, react, mass })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let nx = self.nx;
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.react[k] * u[k];
        }
        for k in 0..self.len() {
            let i = k % nx;
            if i + 1 < nx {
                let f = self.cx[k] * (u[k] - u[k + 1]);
                out[k] += f;
                out[k + 1] -= f;
            }
            if k + nx < self.len() {
                let f = self.cy[k] * (u[k] - u[k + nx]);
                out[k] += f;
                out[k + nx] -= f;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let nx = self.nx;
        let mut d = self.react.clone();
        for k in 0..self.len() {
            if k % nx + 1 < nx {
                d[k] += self.cx[k];
                d[k + 1] += self.cx[k];
            }
            if k + nx < self.len() {
                d[k] += self.cy[k];
                d[k + nx] += self.cy[k];
            }
        }
        d
    }
}

/// Σ_j a_j · (bilinear hat weights of s_j): unit discrete mass per atom.
pub fn hat_load(g: &Grid2D, mu: &AtomicMeasure) -> Result<Vec<f64>> {
    let mut f = vec![0.0; g.len()];
    for atom in &mu.atoms {
        for (k, w) in g.hat_weights(atom.loc)? {
            f[k] += atom.amp * w;
        }
    }
    Ok(f)
}

/// Reject atoms closer than two cells to ∂Ω.
pub fn check_margin(g: &Grid2D, mu: &AtomicMeasure) -> Result<()> {
    let need = 2.0 * g.hx.max(g.hy);
    for atom in &mu.atoms {
        let d = g.boundary_distance(atom.loc);
        if d < need * (1.0 - 1e-12) {
            return Err(Error::Margin(d, need));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EllipticSolution {
    pub u: Vec<f64>,
    pub boundary_trace: Vec<f64>,
    /// ∫ q u, equal to Σ a_j
    pub mass_check: f64,
    pub iterations: usize,
    pub rel_residual: f64,
}

impl EllipticSolution {
    pub fn field(&self, g: &Grid2D) -> Result<ScalarField> {
        ScalarField::from_real(g, &self.u)
    }

    pub fn trace_complex(&self) -> Vec<Complex64> {
        self.boundary_trace.iter().map(|&v| Complex64::new(v, 0.0)).collect()
    }
}

pub fn solve_forward(coeffs: &CoefficientSet, mu: &AtomicMeasure, g: &Grid2D) -> Result<EllipticSolution> {
    g.check_len(coeffs.q.len())?;
    let qmin = coeffs.q_min();
    if !(qmin >= Q_MIN) {
        return Err(Error::IllPosed(format!("min q = {qmin:e} below {Q_MIN:e}; the Neumann problem needs q > 0")));
    }
    check_margin(g, mu)?;
    let op = DiffusionOperator::new(g, &coeffs.kappa, &coeffs.q)?;
    let f = hat_load(g, mu)?;
    let diag = op.diagonal();
    let mut u = vec![0.0; g.len()];
    let max_iter = 20 * (g.nx + g.ny) + 1000;
    let st = pcg(&mut |x, y| op.apply(x, y), &diag, &f, &mut u, CG_TOL, max_iter);
    if !st.converged {
        return Err(Error::NoConvergence(format!("elliptic CG residual {:.3e} after {} iterations", st.rel_residual, st.iterations)));
    }
    let mass_check = u.iter().zip(&op.react).map(|(a, b)| a * b).sum();
    Ok(EllipticSolution {
        boundary_trace: g.boundary_trace_real(&u),
        u,
        mass_check,
        iterations: st.iterations,
        rel_residual: st.rel_residual,
    })
}

/// R(v) = ∫_{∂Ω} κ ∂_n v · u ds.
pub fn functional_r(u_trace: &[f64], v: &ScalarField, coeffs: &CoefficientSet, g: &Grid2D) -> Result<Complex64> {
    g.check(v)?;
    let tr: Vec<Complex64> = u_trace.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    g.flux_integral(&v.values, &coeffs.kappa, &tr)
}

/// Σ a_j v(s_j) with bilinear evaluation of v.
pub fn atom_pairing(v: &ScalarField, mu: &AtomicMeasure, g: &Grid2D) -> Result<Complex64> {
    mu.atoms.iter().map(|a| g.interpolate(v, a.loc).map(|x| x * a.amp)).sum()
}

/// |R(v) − Σ a_j v(s_j)| for the forward solution of μ.
pub fn check_reciprocity(v: &ScalarField, mu: &AtomicMeasure, coeffs: &CoefficientSet, g: &Grid2D) -> Result<f64> {
    let sol = solve_forward(coeffs, mu, g)?;
    Ok((functional_r(&sol.boundary_trace, v, coeffs, g)? - atom_pairing(v, mu, g)?).norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Atom;

    fn unit(n: usize) -> Grid2D {
        Grid2D::new(n, n, [[0.0, 0.0], [1.0, 1.0]]).unwrap()
    }

    fn single(p: [f64; 2]) -> AtomicMeasure {
        AtomicMeasure::new(vec![Atom { loc: p, amp: 1.0 }]).unwrap()
    }

    #[test]
    fn operator_is_symmetric_and_conservative() {
        let g = Grid2D::new(9, 11, [[0.0, 0.0], [1.0, 1.5]]).unwrap();
        let kappa: Vec<f64> = (0..g.len()).map(|k| 1.0 + 0.3 * g.coords(k)[0]).collect();
        let op = DiffusionOperator::new(&g, &kappa, &vec![0.0; g.len()]).unwrap();
        let a: Vec<f64> = (0..g.len()).map(|k| (k as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..g.len()).map(|k| (k as f64 * 0.11).cos()).collect();
        let (mut aa, mut ab) = (vec![0.0; g.len()], vec![0.0; g.len()]);
        op.apply(&a, &mut aa);
        op.apply(&b, &mut ab);
        let l: f64 = aa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let r: f64 = ab.iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!((l - r).abs() < 1e-12 * l.abs().max(1.0));
        // zero row sums without reaction
        let mut one = vec![0.0; g.len()];
        op.apply(&vec![1.0; g.len()], &mut one);
        assert!(one.iter().all(|v| v.abs() < 1e-12));
        let d = op.diagonal();
        let mut e = vec![0.0; g.len()];
        e[20] = 1.0;
        op.apply(&e, &mut one);
        assert!((one[20] - d[20]).abs() < 1e-14);
    }

    #[test]
    fn quadratic_is_reproduced_in_interior() {
        // −Δ(x² + y²) = −4
        let g = unit(17);
        let op = DiffusionOperator::new(&g, &vec![1.0; g.len()], &vec![0.0; g.len()]).unwrap();
        let u: Vec<f64> = (0..g.len()).map(|k| { let p = g.coords(k); p[0] * p[0] + p[1] * p[1] }).collect();
        let mut out = vec![0.0; g.len()];
        op.apply(&u, &mut out);
        let k = g.idx(5, 7);
        assert!((out[k] / op.mass[k] + 4.0).abs() < 1e-9);
    }

    #[test]
    fn mass_identity() {
        let g = unit(65);
        let c = CoefficientSet::constant(&g, 1.0, 1.0).unwrap();
        let mu = AtomicMeasure::new(vec![Atom { loc: [0.3, 0.4], amp: 0.6 }, Atom { loc: [0.7, 0.65], amp: 0.4 }]).unwrap();
        let s = solve_forward(&c, &mu, &g).unwrap();
        assert!((s.mass_check - 1.0).abs() < 1e-8);
        let w = g.area_weights();
        let total: f64 = s.u.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((total - 1.0).abs() < 2e-3);
    }

    #[test]
    fn ill_posed_and_margin_errors() {
        let g = unit(33);
        let c = CoefficientSet::constant(&g, 1.0, 0.0).unwrap();
        assert!(matches!(solve_forward(&c, &single([0.5, 0.5]), &g), Err(Error::IllPosed(_))));
        let c = CoefficientSet::constant(&g, 1.0, 1.0).unwrap();
        assert!(matches!(solve_forward(&c, &single([0.03, 0.5]), &g), Err(Error::Margin(..))));
    }

    #[test]
    fn trivial_functionals() {
        let g = unit(33);
        let c = CoefficientSet::constant(&g, 1.0, 1.0).unwrap();
        let s = solve_forward(&c, &single([0.5, 0.5]), &g).unwrap();
        let v = ScalarField::from_fn(&g, |_| Complex64::new(2.5, 0.0));
        assert!(functional_r(&s.boundary_trace, &v, &c, &g).unwrap().norm() < 1e-12);
        let v = ScalarField::from_fn(&g, |p| Complex64::new(p[0].exp(), 0.0));
        let zero = vec![0.0; g.boundary.len()];
        assert_eq!(functional_r(&zero, &v, &c, &g).unwrap(), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn reciprocity_with_exponential() {
        let v_of = |g: &Grid2D| ScalarField::from_fn(g, |p| Complex64::new(p[0].exp(), 0.0));
        let mut errs = Vec::new();
        for n in [33, 65] {
            let g = unit(n);
            let c = CoefficientSet::constant(&g, 1.0, 1.0).unwrap();
            errs.push(check_reciprocity(&v_of(&g), &single([0.5, 0.5]), &c, &g).unwrap() / 0.5f64.exp());
        }
        assert!(errs[1] < errs[0]);
        assert!(errs[1] < 2e-2, "{errs:?}");
    }
}
