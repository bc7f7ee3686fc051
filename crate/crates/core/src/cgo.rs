//! Complex-geometric-optics test functions.
//!
//! w = e^{ρ·x}(1+ψ) with ρ·ρ = 0 solves (Δ − q̃)w = 0 when
//! Δψ + 2ρ·∇ψ = q̃(1+ψ). The correction ψ is computed on a periodic box twice
//! the size of Ω with q̃ smoothly cut off, by a Fourier-multiplier inverse of
//! −|ξ|² + 2iρ·ξ on a frequency lattice shifted away from the symbol's zeros.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{separation_params, CoefficientSet, Grid2D, Point, ScalarField};
use crate::krylov::gmres;
use crate::linalg::{beta_lower_bound, CMatrix};
use crate::measures::{sample_amplitudes, sample_intensity, sample_points, BandLimitedIntensity, SamplingSpec};

/// Largest admissible r·|s|·R₀ before exponentials leave f64 range.
pub const EXPONENT_LIMIT: f64 = 650.0;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// ρ = a + ib with |a| = |b|, a ⊥ b, so that ρ·ρ = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoVector {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl RhoVector {
    pub fn modulus(&self) -> f64 {
        (self.a[0].powi(2) + self.a[1].powi(2) + self.b[0].powi(2) + self.b[1].powi(2)).sqrt()
    }

    pub fn rho_rho(&self) -> Complex64 {
        let aa = self.a[0] * self.a[0] + self.a[1] * self.a[1];
        let bb = self.b[0] * self.b[0] + self.b[1] * self.b[1];
        let ab = self.a[0] * self.b[0] + self.a[1] * self.b[1];
        Complex64::new(aa - bb, 2.0 * ab)
    }

    /// ρ·x
    #[inline]
    pub fn dot(&self, x: Point) -> Complex64 {
        Complex64::new(self.a[0] * x[0] + self.a[1] * x[1], self.b[0] * x[0] + self.b[1] * x[1])
    }

    pub fn conj(&self) -> RhoVector {
        RhoVector { a: self.a, b: [-self.b[0], -self.b[1]] }
    }
}

/// a = r·s, b = r·rot90(s).
pub fn make_rho(s: Point, r: f64) -> Result<RhoVector> {
    if s[0] == 0.0 && s[1] == 0.0 {
        return Err(Error::OriginDegeneracy(0));
    }
    if !(r > 0.0) {
        return Err(Error::Config(format!("r = {r} must be positive")));
    }
    Ok(RhoVector { a: [r * s[0], r * s[1]], b: [-r * s[1], r * s[0]] })
}

/// r̃ = 2n(2/η₁² + (1 + C₁‖q̃‖)/(√2 η₂)); η₁ = ∞ drops the first term.
pub fn rtilde(n: usize, eta1: f64, eta2: f64, qnorm: f64, c1: f64) -> Result<f64> {
    if !(eta1 > 0.0) || !(eta2 > 0.0) {
        return Err(Error::InvalidGeometry(format!("separations must be positive: eta1={eta1}, eta2={eta2}")));
    }
    let sep = if eta1.is_infinite() { 0.0 } else { 2.0 / (eta1 * eta1) };
    Ok(2.0 * n as f64 * (sep + (1.0 + c1 * qnorm) / (SQRT_2 * eta2)))
}

/// The main-theorem variant with 4M in place of 2n.
pub fn rtilde_main(m: usize, eta1: f64, eta2: f64, qnorm: f64, c1: f64) -> Result<f64> {
    rtilde(2 * m, eta1, eta2, qnorm, c1)
}

/// exp(r̃η₂²)/‖κ‖ · [1 − n(e^{−r̃η₁²/2} + C₁‖q̃‖/(√2 r̃ η₂))], returned as
/// (log of the prefactor, bracket). The bound is informative when bracket > 0.
pub fn paper_beta_bound(n: usize, eta1: f64, eta2: f64, r: f64, kappa_c0: f64, c1_qnorm: f64) -> (f64, f64) {
    let sep = if eta1.is_infinite() { 0.0 } else { (-r * eta1 * eta1 / 2.0).exp() };
    let bracket = 1.0 - n as f64 * (sep + c1_qnorm / (SQRT_2 * r * eta2));
    (r * eta2 * eta2 - kappa_c0.ln(), bracket)
}

fn smoothstep5(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    }
}

/// Periodic computational box of twice the domain extent, same spacing.
#[derive(Clone)]
pub struct FaddeevBox {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub ox: usize,
    pub oy: usize,
    /// box coordinates of node (0,0)
    pub x0: [f64; 2],
    pub dom_nx: usize,
    pub dom_ny: usize,
    pub cutoff: Vec<f64>,
    fx: Arc<dyn Fft<f64>>,
    fy: Arc<dyn Fft<f64>>,
    ix: Arc<dyn Fft<f64>>,
    iy: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FaddeevBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FaddeevBox").field("nx", &self.nx).field("ny", &self.ny).finish()
    }
}

impl FaddeevBox {
    pub fn new(g: &Grid2D) -> FaddeevBox {
        let nx = 2 * (g.nx - 1);
        let ny = 2 * (g.ny - 1);
        let ox = (g.nx - 1) / 2;
        let oy = (g.ny - 1) / 2;
        let x0 = [g.origin[0] - ox as f64 * g.hx, g.origin[1] - oy as f64 * g.hy];
        let mut planner = FftPlanner::new();
        let fx = planner.plan_fft_forward(nx);
        let fy = planner.plan_fft_forward(ny);
        let ix = planner.plan_fft_inverse(nx);
        let iy = planner.plan_fft_inverse(ny);
        // margins on either side of the domain inside one period
        let mx = (ox as f64).min((nx - ox - (g.nx - 1)) as f64) * g.hx;
        let my = (oy as f64).min((ny - oy - (g.ny - 1)) as f64) * g.hy;
        let (dx, dy) = (0.8 * mx, 0.8 * my);
        // distance outside the domain, measured in whole cells
        let outside = |k: usize, o: usize, n: usize| -> f64 {
            let k = k as isize;
            let (lo, hi) = (o as isize, (o + n - 1) as isize);
            (lo - k).max(k - hi).max(0) as f64
        };
        let mut cutoff = vec![0.0; nx * ny];
        for j in 0..ny {
            let wy = smoothstep5(1.0 - outside(j, oy, g.ny) * g.hy / dy);
            for i in 0..nx {
                cutoff[i + nx * j] = smoothstep5(1.0 - outside(i, ox, g.nx) * g.hx / dx) * wy;
            }
        }
        FaddeevBox { nx, ny, hx: g.hx, hy: g.hy, ox, oy, x0, dom_nx: g.nx, dom_ny: g.ny, cutoff, fx, fy, ix, iy }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn coords(&self, k: usize) -> Point {
        [self.x0[0] + (k % self.nx) as f64 * self.hx, self.x0[1] + (k / self.nx) as f64 * self.hy]
    }

    /// Box index of domain node (i, j).
    #[inline]
    pub fn from_domain(&self, i: usize, j: usize) -> usize {
        (i + self.ox) + self.nx * (j + self.oy)
    }

    /// Clamp-extend a domain field to the box and apply the cutoff.
    pub fn extend(&self, dom: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![ZERO; self.len()];
        for j in 0..self.ny {
            let dj = (j as isize - self.oy as isize).clamp(0, self.dom_ny as isize - 1) as usize;
            for i in 0..self.nx {
                let k = i + self.nx * j;
                let c = self.cutoff[k];
                if c == 0.0 {
                    continue;
                }
                let di = (i as isize - self.ox as isize).clamp(0, self.dom_nx as isize - 1) as usize;
                out[k] = dom[di + self.dom_nx * dj] * c;
            }
        }
        out
    }

    pub fn restrict(&self, bx: &[Complex64]) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.dom_nx * self.dom_ny);
        for j in 0..self.dom_ny {
            for i in 0..self.dom_nx {
                out.push(bx[self.from_domain(i, j)]);
            }
        }
        out
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        let (nx, ny) = (self.nx, self.ny);
        let (px, py) = if inverse { (&self.ix, &self.iy) } else { (&self.fx, &self.fy) };
        for row in data.chunks_exact_mut(nx) {
            px.process(row);
        }
        let mut col = vec![ZERO; ny];
        for i in 0..nx {
            for j in 0..ny {
                col[j] = data[i + nx * j];
            }
            py.process(&mut col);
            for j in 0..ny {
                data[i + nx * j] = col[j];
            }
        }
        if inverse {
            let s = 1.0 / (nx * ny) as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }

    fn wavenumber(&self, k: usize, n: usize, h: f64) -> f64 {
        let kk = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        2.0 * PI * kk / (n as f64 * h)
    }

    /// Per-axis lattice offset in [0, Δ) placed mid-way in the larger gap
    /// between the symbol zeros 0 and −2b (mod Δ). Odd in b, so the offsets
    /// for ρ and conj(ρ) are negatives of each other.
    fn lattice_shift(&self, rho: &RhoVector) -> [f64; 2] {
        let pick = |b: f64, n: usize, h: f64| -> f64 {
            let d = 2.0 * PI / (n as f64 * h);
            let z = (-2.0 * b).rem_euclid(d);
            // gaps (0, z) and (z, d); ties (z = d/2) resolved by the sign of b
            let lower = z / 2.0;
            let upper = (z + d) / 2.0;
            if z > d / 2.0 || (z == d / 2.0 && b < 0.0) {
                lower
            } else {
                upper
            }
        };
        [pick(rho.b[0], self.nx, self.hx), pick(rho.b[1], self.ny, self.hy)]
    }

    /// Symbols p(ξ) = −|ξ|² − 2b·ξ + 2i a·ξ on the shifted lattice.
    fn symbols(&self, rho: &RhoVector, theta: [f64; 2]) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.ny {
            let ky = self.wavenumber(j, self.ny, self.hy) + theta[1];
            for i in 0..self.nx {
                let kx = self.wavenumber(i, self.nx, self.hx) + theta[0];
                let re = -(kx * kx + ky * ky) - 2.0 * (rho.b[0] * kx + rho.b[1] * ky);
                let im = 2.0 * (rho.a[0] * kx + rho.a[1] * ky);
                out.push(Complex64::new(re, im));
            }
        }
        out
    }
}

/// Precomputed Green operator G_ρ = (Δ + 2ρ·∇)⁻¹ on the box.
struct Green<'a> {
    bx: &'a FaddeevBox,
    inv_symbol: Vec<Complex64>,
    phase: Vec<Complex64>,
}

impl<'a> Green<'a> {
    fn new(bx: &'a FaddeevBox, rho: &RhoVector) -> Green<'a> {
        let theta = bx.lattice_shift(rho);
        let inv_symbol = bx.symbols(rho, theta).into_iter().map(|p| 1.0 / p).collect();
        let phase = (0..bx.len())
            .map(|k| {
                let x = bx.coords(k);
                Complex64::from_polar(1.0, theta[0] * (x[0] - bx.x0[0]) + theta[1] * (x[1] - bx.x0[1]))
            })
            .collect();
        Green { bx, inv_symbol, phase }
    }

    fn apply(&self, f: &[Complex64], out: &mut [Complex64]) {
        for k in 0..f.len() {
            out[k] = f[k] * self.phase[k].conj();
        }
        self.bx.fft2(out, false);
        out.iter_mut().zip(&self.inv_symbol).for_each(|(v, s)| *v *= s);
        self.bx.fft2(out, true);
        out.iter_mut().zip(&self.phase).for_each(|(v, p)| *v *= p);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Switch to GMRES on the same linear equation when the fixed-point map
    /// does not contract.
    pub krylov_fallback: bool,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        CorrectionOptions { tol: 1e-10, max_iter: 200, krylov_fallback: true }
    }
}

/// How the correction equation was solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrectionMethod {
    Trivial,
    FixedPoint,
    Krylov,
}

#[derive(Debug, Clone)]
pub struct CGOSolution {
    pub rho: RhoVector,
    /// ψ_ρ on the domain grid.
    pub psi: ScalarField,
    pub sup_psi: f64,
    pub iterations: usize,
    pub method: CorrectionMethod,
}

impl CGOSolution {
    /// 1 + ψ at a domain point (bilinear).
    pub fn one_plus_psi(&self, g: &Grid2D, x: Point) -> Result<Complex64> {
        Ok(Complex64::new(1.0, 0.0) + g.interpolate(&self.psi, x)?)
    }

    /// w(x) = e^{ρ·x}(1+ψ(x)).
    pub fn w_at(&self, g: &Grid2D, x: Point) -> Result<Complex64> {
        Ok(self.rho.dot(x).exp() * self.one_plus_psi(g, x)?)
    }

    /// w on all domain nodes.
    pub fn w_field(&self, g: &Grid2D) -> ScalarField {
        ScalarField::from_fn(g, |x| self.rho.dot(x).exp()).zip_mul(&self.psi, 1.0)
    }
}

impl ScalarField {
    /// self·(c + other) elementwise.
    fn zip_mul(mut self, other: &ScalarField, c: f64) -> ScalarField {
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a *= Complex64::new(c, 0.0) + b);
        self
    }
}

/// Solve Δψ + 2ρ·∇ψ = q̃(1+ψ) on the box, with q̃ given on the domain grid.
pub fn solve_correction(
    bx: &FaddeevBox,
    g: &Grid2D,
    rho: &RhoVector,
    qtilde: &[Complex64],
    opts: &CorrectionOptions,
) -> Result<CGOSolution> {
    g.check_len(qtilde.len())?;
    if !(rho.modulus() > 0.0) {
        return Err(Error::RhoTooSmall { rho_abs: 0.0, detail: "zero vector".into() });
    }
    let q = bx.extend(qtilde);
    let qmax = q.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if qmax == 0.0 {
        return Ok(CGOSolution { rho: *rho, psi: ScalarField::zeros(g), sup_psi: 0.0, iterations: 0, method: CorrectionMethod::Trivial });
    }
    let green = Green::new(bx, rho);
    let n = bx.len();
    let mut psi = vec![ZERO; n];
    let mut next = vec![ZERO; n];
    let mut f = vec![ZERO; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_step = f64::INFINITY;
    let mut slow = 0;
    for it in 0..opts.max_iter {
        iterations = it + 1;
        for k in 0..n {
            f[k] = q[k] * (Complex64::new(1.0, 0.0) + psi[k]);
        }
        green.apply(&f, &mut next);
        let mut step: f64 = 0.0;
        let mut size: f64 = 0.0;
        for k in 0..n {
            step = step.max((next[k] - psi[k]).norm());
            size = size.max(next[k].norm());
        }
        std::mem::swap(&mut psi, &mut next);
        if !step.is_finite() {
            break;
        }
        if step <= opts.tol * size.max(1e-300) {
            converged = true;
            break;
        }
        if step > 0.9 * prev_step {
            slow += 1;
            if slow >= 3 {
                break;
            }
        } else {
            slow = 0;
        }
        prev_step = step;
    }
    let mut method = CorrectionMethod::FixedPoint;
    if !converged {
        if !opts.krylov_fallback {
            return Err(Error::RhoTooSmall {
                rho_abs: rho.modulus(),
                detail: format!("fixed-point map did not contract in {iterations} iterations"),
            });
        }
        // (I − G q̃)ψ = G q̃
        let mut rhs = vec![ZERO; n];
        green.apply(&q, &mut rhs);
        let mut tmp = vec![ZERO; n];
        let mut op = |x: &[Complex64], y: &mut [Complex64]| {
            for k in 0..n {
                tmp[k] = q[k] * x[k];
            }
            green.apply(&tmp, y);
            for k in 0..n {
                y[k] = x[k] - y[k];
            }
        };
        psi.iter_mut().for_each(|v| *v = ZERO);
        let st = gmres(&mut op, &rhs, &mut psi, 60, opts.tol, 3000);
        if !st.converged {
            return Err(Error::RhoTooSmall {
                rho_abs: rho.modulus(),
                detail: format!("GMRES stalled at relative residual {:.3e}", st.rel_residual),
            });
        }
        iterations += st.iterations;
        method = CorrectionMethod::Krylov;
    }
    let dom = bx.restrict(&psi);
    let sup_psi = dom.iter().map(|v| v.norm()).fold(0.0, f64::max);
    Ok(CGOSolution { rho: *rho, psi: ScalarField { nx: g.nx, ny: g.ny, values: dom }, sup_psi, iterations, method })
}

/// Spectral residual ‖Δψ + 2ρ·∇ψ − q̃(1+ψ)‖_∞ / ‖q̃‖_∞ on the box, for a
/// correction recomputed from scratch (diagnostic).
pub fn correction_residual(bx: &FaddeevBox, g: &Grid2D, sol: &CGOSolution, qtilde: &[Complex64]) -> f64 {
    // re-solve on the box to get the full quasi-periodic ψ, then apply the symbol
    let q = bx.extend(qtilde);
    let qmax = q.iter().map(|v| v.norm()).fold(0.0, f64::max);
    if qmax == 0.0 {
        return sol.sup_psi;
    }
    let Ok(full) = solve_box(bx, &sol.rho, &q) else { return f64::INFINITY };
    let theta = bx.lattice_shift(&sol.rho);
    let sym = bx.symbols(&sol.rho, theta);
    let green = Green::new(bx, &sol.rho);
    let mut lhs: Vec<Complex64> = full.iter().zip(&green.phase).map(|(p, ph)| p * ph.conj()).collect();
    bx.fft2(&mut lhs, false);
    lhs.iter_mut().zip(&sym).for_each(|(v, s)| *v *= s);
    bx.fft2(&mut lhs, true);
    let _ = g;
    lhs.iter()
        .zip(&green.phase)
        .zip(&q)
        .zip(&full)
        .map(|(((l, ph), qk), pk)| (l * ph - qk * (Complex64::new(1.0, 0.0) + pk)).norm())
        .fold(0.0, f64::max)
        / qmax
}

fn solve_box(bx: &FaddeevBox, rho: &RhoVector, q: &[Complex64]) -> Result<Vec<Complex64>> {
    let green = Green::new(bx, rho);
    let n = bx.len();
    let mut rhs = vec![ZERO; n];
    green.apply(q, &mut rhs);
    let mut tmp = vec![ZERO; n];
    let mut op = |x: &[Complex64], y: &mut [Complex64]| {
        for k in 0..n {
            tmp[k] = q[k] * x[k];
        }
        green.apply(&tmp, y);
        for k in 0..n {
            y[k] = x[k] - y[k];
        }
    };
    let mut psi = vec![ZERO; n];
    let st = gmres(&mut op, &rhs, &mut psi, 60, 1e-12, 3000);
    if !st.converged {
        return Err(Error::NoConvergence(format!("box solve residual {:.3e}", st.rel_residual)));
    }
    Ok(psi)
}

/// How r̃ is chosen for a basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RMode {
    Given(f64),
    /// r̃ from the separation formula with the given C₁.
    Auto { c1: f64 },
}

/// Functions v_1..v_n in the solution space with v_i(s_j) = δ_ij.
///
/// Stored in scaled form: A = P N P with P = diag(e^{r|s_j|²/2}), so that
/// v_i = Σ_j (A⁻¹)_{ji} ṽ_j never forms the overflow-prone entries of A.
#[derive(Debug, Clone)]
pub struct InterpolationBasis {
    pub points: Vec<Point>,
    pub r_used: f64,
    pub sols: Vec<CGOSolution>,
    /// √κ at the points.
    pub sqrt_kappa: Vec<f64>,
    /// r|s_j|²/2
    pub half_log_p: Vec<f64>,
    pub n_mat: CMatrix<f64>,
    pub n_inv: CMatrix<f64>,
    /// Lemma-7 diagonal-dominance bound on A (−∞ when A is not representable).
    pub beta_bound: f64,
    pub sigma_min: f64,
    pub a_norm: f64,
    /// σ_min and ‖·‖ of the scaled matrix N, used for the conditioning test.
    pub n_sigma_min: f64,
    pub n_norm: f64,
    /// max_j |ρ_j| sup|ψ_j|: the realized C₁‖q̃‖.
    pub c1_qnorm: f64,
    pub retries: usize,
    pub kappa: Vec<f64>,
}

/// Shared inputs for basis construction.
pub struct BasisProblem<'a> {
    pub grid: &'a Grid2D,
    pub bx: &'a FaddeevBox,
    /// κ on the grid (ones in the parabolic model).
    pub kappa: &'a [f64],
    /// potential on the grid (q̃, or q − 2πik/T* per mode)
    pub potential: Vec<Complex64>,
    pub opts: CorrectionOptions,
}

impl InterpolationBasis {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    /// ṽ_j(x)·e^{−r|s_j|²/2 − shift} = e^{ρ_j·x − r|s_j|²/2 − shift}(1+ψ_j(x))/(√κ(x)√κ(s_j)).
    fn raw_scaled(&self, j: usize, x: Point, one_plus_psi: Complex64, sqrt_kx: f64, shift: f64) -> Complex64 {
        let e = self.sols[j].rho.dot(x) - Complex64::new(self.half_log_p[j] + shift, 0.0);
        e.exp() * one_plus_psi / (sqrt_kx * self.sqrt_kappa[j])
    }

    /// The basis for conjugated potential: every function replaced by its conjugate.
    pub fn conjugate(mut self) -> InterpolationBasis {
        for s in &mut self.sols {
            s.rho = s.rho.conj();
            s.psi.values.iter_mut().for_each(|v| *v = v.conj());
        }
        self.n_mat.data.iter_mut().for_each(|v| *v = v.conj());
        self.n_inv.data.iter_mut().for_each(|v| *v = v.conj());
        self
    }

    /// All v_i at a point.
    pub fn eval(&self, g: &Grid2D, x: Point) -> Result<Vec<Complex64>> {
        let n = self.n();
        let skx = g.interpolate_real(&self.kappa, x)?.sqrt();
        let mut raw = Vec::with_capacity(n);
        for j in 0..n {
            raw.push(self.sols[j].one_plus_psi(g, x)?);
        }
        Ok((0..n)
            .map(|i| {
                (0..n)
                    .map(|j| self.n_inv[(j, i)] * self.raw_scaled(j, x, raw[j], skx, self.half_log_p[i]))
                    .sum()
            })
            .collect())
    }

    /// Σ_i c_i v_i on every grid node.
    pub fn combine_field(&self, g: &Grid2D, coef: &[Complex64]) -> Result<ScalarField> {
        let n = self.n();
        if coef.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: coef.len() });
        }
        // d_j = Σ_i (N⁻¹)_{ji} c_i e^{−r|s_i|²/2}, then Σ_j d_j ṽ_j e^{−r|s_j|²/2};
        // exponents are combined per term to stay in range
        let vals: Vec<Complex64> = (0..g.len())
            .into_par_iter()
            .map(|k| {
                let x = g.coords(k);
                let skx = self.kappa[k].sqrt();
                let mut acc = ZERO;
                for j in 0..n {
                    let opp = Complex64::new(1.0, 0.0) + self.sols[j].psi.values[k];
                    for i in 0..n {
                        if coef[i] == ZERO {
                            continue;
                        }
                        acc += coef[i] * self.n_inv[(j, i)] * self.raw_scaled(j, x, opp, skx, self.half_log_p[i]);
                    }
                }
                acc
            })
            .collect();
        Ok(ScalarField { nx: g.nx, ny: g.ny, values: vals })
    }

    /// Combination Σ_i c_i v_i evaluated at a point.
    pub fn combine_at(&self, g: &Grid2D, coef: &[Complex64], x: Point) -> Result<Complex64> {
        Ok(self.eval(g, x)?.iter().zip(coef).map(|(v, c)| v * c).sum())
    }

    /// v_i on every grid node.
    pub fn basis_field(&self, g: &Grid2D, i: usize) -> Result<ScalarField> {
        let mut e = vec![ZERO; self.n()];
        e[i] = Complex64::new(1.0, 0.0);
        self.combine_field(g, &e)
    }

    /// The unscaled matrix A (entries e^{r s_l·s_j}); may overflow for large r.
    pub fn a_matrix(&self) -> CMatrix<f64> {
        let n = self.n();
        CMatrix::from_fn(n, n, |l, j| {
            self.n_mat[(l, j)] * (self.half_log_p[l] + self.half_log_p[j]).exp()
        })
    }

    /// max_{i,j} |v_i(s_j) − δ_ij| evaluated through the point formula.
    pub fn interpolation_error(&self, g: &Grid2D) -> Result<f64> {
        let mut err: f64 = 0.0;
        for (l, &s) in self.points.iter().enumerate() {
            let v = self.eval(g, s)?;
            for (i, vi) in v.iter().enumerate() {
                let d = if i == l { 1.0 } else { 0.0 };
                err = err.max((vi - d).norm());
            }
        }
        Ok(err)
    }
}

/// Build the basis for `points` with the given potential.
pub fn build_basis_with(prob: &BasisProblem<'_>, points: &[Point], mode: RMode, qnorm: f64) -> Result<InterpolationBasis> {
    let g = prob.grid;
    let (eta1, eta2, r0) = separation_params(g, points)?;
    let n = points.len();
    let (mut r, auto_c1) = match mode {
        RMode::Given(r) => (r, None),
        RMode::Auto { c1 } => (rtilde(n, eta1, eta2, qnorm, c1)?, Some(c1)),
    };
    let mut retries = 0;
    loop {
        match build_at_r(prob, points, r, eta2, r0) {
            Err(Error::IllConditioned { .. }) if auto_c1.is_some() && retries < 3 => {
                retries += 1;
                r *= 2.0;
            }
            Err(e) => return Err(e),
            Ok(mut b) => {
                b.retries = retries;
                return Ok(b);
            }
        }
    }
}

fn build_at_r(prob: &BasisProblem<'_>, points: &[Point], r: f64, _eta2: f64, r0: f64) -> Result<InterpolationBasis> {
    let g = prob.grid;
    let n = points.len();
    let smax = points.iter().map(|s| s[0].hypot(s[1])).fold(0.0, f64::max);
    if r * smax * r0 > EXPONENT_LIMIT {
        return Err(Error::ExponentOverflow(r * smax * r0));
    }
    let rhos: Vec<RhoVector> = points
        .iter()
        .map(|&s| make_rho(s, r))
        .collect::<Result<_>>()?;
    let sols: Vec<CGOSolution> = rhos
        .par_iter()
        .map(|rho| solve_correction(prob.bx, g, rho, &prob.potential, &prob.opts))
        .collect::<Result<_>>()?;
    let sqrt_kappa: Vec<f64> = points.iter().map(|&s| g.interpolate_real(prob.kappa, s).map(f64::sqrt)).collect::<Result<_>>()?;
    let half_log_p: Vec<f64> = points.iter().map(|s| 0.5 * r * (s[0] * s[0] + s[1] * s[1])).collect();

    let mut n_mat = CMatrix::zeros(n, n);
    for (l, &sl) in points.iter().enumerate() {
        for j in 0..n {
            let opp = sols[j].one_plus_psi(g, sl)?;
            let e = sols[j].rho.dot(sl) - Complex64::new(half_log_p[j] + half_log_p[l], 0.0);
            n_mat[(l, j)] = e.exp() * opp / (sqrt_kappa[l] * sqrt_kappa[j]);
        }
    }
    let n_sv = n_mat.singular_values();
    let n_norm = n_sv[0];
    let n_sigma_min = *n_sv.last().unwrap_or(&0.0);
    if !(n_sigma_min > 1e-12 * n_norm) {
        return Err(Error::IllConditioned { sigma_min: n_sigma_min, norm: n_norm });
    }
    let n_inv = n_mat.inverse()?;
    let a_inv = CMatrix::from_fn(n, n, |l, j| n_inv[(l, j)] * (-(half_log_p[l] + half_log_p[j])).exp());
    let sigma_min = 1.0 / a_inv.spectral_norm();
    let a = CMatrix::from_fn(n, n, |l, j| n_mat[(l, j)] * (half_log_p[l] + half_log_p[j]).exp());
    let a_norm = a.spectral_norm();
    let beta_bound = if a.data.iter().all(|v| v.is_finite()) { beta_lower_bound(&a)? } else { f64::NEG_INFINITY };
    let c1_qnorm = sols.iter().map(|s| s.rho.modulus() * s.sup_psi).fold(0.0, f64::max);
    Ok(InterpolationBasis {
        points: points.to_vec(),
        r_used: r,
        sols,
        sqrt_kappa,
        half_log_p,
        n_mat,
        n_inv,
        beta_bound,
        sigma_min,
        a_norm,
        n_sigma_min,
        n_norm,
        c1_qnorm,
        retries: 0,
        kappa: prob.kappa.to_vec(),
    })
}

/// Elliptic basis: potential q̃ from the coefficient set.
pub fn build_basis(
    g: &Grid2D,
    bx: &FaddeevBox,
    coeffs: &CoefficientSet,
    points: &[Point],
    mode: RMode,
    opts: &CorrectionOptions,
) -> Result<InterpolationBasis> {
    let prob = BasisProblem {
        grid: g,
        bx,
        kappa: &coeffs.kappa,
        potential: coeffs.qtilde.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        opts: *opts,
    };
    build_basis_with(&prob, points, mode, coeffs.qtilde_hp)
}

/// Mode-k basis for ∂_t + Δ − q with κ ≡ 1: potential q − 2πik/T*.
/// Negative modes are the conjugates of the positive ones (real q): they use
/// conj(ρ_j) and conj(ψ_j).
#[allow(clippy::too_many_arguments)]
pub fn build_basis_mode_k(
    g: &Grid2D,
    bx: &FaddeevBox,
    q: &[f64],
    points: &[Point],
    k: i64,
    band: usize,
    t_star: f64,
    mode: RMode,
    opts: &CorrectionOptions,
) -> Result<InterpolationBasis> {
    if k.unsigned_abs() as usize > band {
        return Err(Error::OutOfBand { k, band });
    }
    g.check_len(q.len())?;
    let shift = 2.0 * PI * k.unsigned_abs() as f64 / t_star;
    let ones = vec![1.0; g.len()];
    let prob = BasisProblem {
        grid: g,
        bx,
        kappa: &ones,
        potential: q.iter().map(|&v| Complex64::new(v, -shift)).collect(),
        opts: *opts,
    };
    let qn = crate::grid::sobolev_surrogate(g, q, 3) + shift * g.area().sqrt();
    let b = build_basis_with(&prob, points, mode, qn)?;
    Ok(if k < 0 { b.conjugate() } else { b })
}

/// v(x,t) = Re Σ_{|k|≤K} e_k(t) V_k(x), e_k(t) = exp(2πikt/T*), stored by its
/// modes k = 0..=K (negative modes are conjugates for real data).
#[derive(Debug, Clone)]
pub struct TimeTestFunction {
    pub t_star: f64,
    pub modes: Vec<ScalarField>,
    pub r_used: f64,
    /// per-mode basis and coefficients, for exact point evaluation
    pub pointwise: Vec<Option<(InterpolationBasis, Vec<Complex64>)>>,
}

impl TimeTestFunction {
    pub fn from_modes(t_star: f64, modes: Vec<ScalarField>) -> TimeTestFunction {
        TimeTestFunction { t_star, modes, r_used: 0.0, pointwise: Vec::new() }
    }

    pub fn band(&self) -> Option<usize> {
        self.modes.len().checked_sub(1)
    }

    fn weights(&self, t: f64) -> Vec<Complex64> {
        (0..self.modes.len())
            .map(|k| {
                let e = Complex64::from_polar(1.0, 2.0 * PI * k as f64 * t / self.t_star);
                if k == 0 {
                    e
                } else {
                    e * 2.0
                }
            })
            .collect()
    }

    /// Nodal values at time t.
    pub fn frame(&self, t: f64) -> Vec<f64> {
        let Some(first) = self.modes.first() else { return Vec::new() };
        let w = self.weights(t);
        (0..first.values.len()).map(|i| self.modes.iter().zip(&w).map(|(m, e)| (m.values[i] * e).re).sum()).collect()
    }

    /// Point value; modes with a stored basis use the exponential formula,
    /// others bilinear interpolation.
    pub fn eval_at(&self, g: &Grid2D, x: Point, t: f64) -> Result<f64> {
        let w = self.weights(t);
        let mut acc = 0.0;
        for (k, (m, e)) in self.modes.iter().zip(&w).enumerate() {
            let val = match self.pointwise.get(k) {
                Some(Some((b, c))) => b.combine_at(g, c, x)?,
                Some(None) => Complex64::new(0.0, 0.0),
                None => g.interpolate(m, x)?,
            };
            acc += (val * e).re;
        }
        Ok(acc)
    }

    /// Per-mode boundary flux weights (κ ≡ 1).
    pub fn flux_weights(&self, g: &Grid2D) -> Result<Vec<Vec<Complex64>>> {
        let ones = vec![1.0; g.len()];
        self.modes.iter().map(|m| g.flux_weights(&m.values, &ones)).collect()
    }

    /// Flux weights of v(·,t) from the per-mode weights.
    pub fn combine_boundary(&self, fw: &[Vec<Complex64>], t: f64) -> Vec<f64> {
        let Some(first) = fw.first() else { return Vec::new() };
        let w = self.weights(t);
        (0..first.len()).map(|b| fw.iter().zip(&w).map(|(f, e)| (f[b] * e).re).sum()).collect()
    }

    /// max over `samples` uniform times in [0,T*] of the discrete H¹ norm.
    pub fn max_h1(&self, g: &Grid2D, samples: usize) -> f64 {
        (0..=samples)
            .map(|m| {
                let f = self.frame(self.t_star * m as f64 / samples.max(1) as f64);
                g.h1_norm(&f.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>())
            })
            .fold(0.0, f64::max)
    }
}

/// Space-time test function with v(s_j, t) = h_j(t) on (0, T*), built mode by
/// mode from the bases for q − 2πik/T*.
#[allow(clippy::too_many_arguments)]
pub fn build_time_test_function(
    g: &Grid2D,
    bx: &FaddeevBox,
    q: &[f64],
    points: &[Point],
    h: &[BandLimitedIntensity],
    mode: RMode,
    opts: &CorrectionOptions,
) -> Result<TimeTestFunction> {
    if points.len() != h.len() {
        return Err(Error::ShapeMismatch { expected: points.len(), got: h.len() });
    }
    let Some(first) = h.first() else {
        return Err(Error::InvalidGeometry("empty point set".into()));
    };
    let t_star = first.t_star;
    let band = h.iter().map(|x| x.band()).max().unwrap_or(0);
    let mut modes = Vec::with_capacity(band + 1);
    let mut pointwise = Vec::with_capacity(band + 1);
    let mut r_used: f64 = 0.0;
    for k in 0..=band as i64 {
        let coef: Vec<Complex64> = h.iter().map(|x| x.coeff(k)).collect();
        if coef.iter().all(|c| c.norm() == 0.0) {
            modes.push(ScalarField::zeros(g));
            pointwise.push(None);
            continue;
        }
        let b = build_basis_mode_k(g, bx, q, points, k, band, t_star, mode, opts)?;
        r_used = r_used.max(b.r_used);
        modes.push(b.combine_field(g, &coef)?);
        pointwise.push(Some((b, coef)));
    }
    Ok(TimeTestFunction { t_star, modes, r_used, pointwise })
}

/// A seeded member of the space-time test class: separated points with random
/// band-limited intensities of unit total mass, interpolated by
/// `build_time_test_function`.
#[allow(clippy::too_many_arguments)]
pub fn sample_time_test_function(
    g: &Grid2D,
    bx: &FaddeevBox,
    q: &[f64],
    spec: &SamplingSpec,
    t_star: f64,
    band: usize,
    mode: RMode,
    opts: &CorrectionOptions,
    rng: &mut impl Rng,
) -> Result<(Vec<Point>, TimeTestFunction)> {
    let pts = sample_points(g, spec.m, spec, rng)?;
    let masses = sample_amplitudes(pts.len(), rng);
    let h: Vec<BandLimitedIntensity> = masses.iter().map(|&m| sample_intensity(t_star, band, m, rng)).collect();
    let v = build_time_test_function(g, bx, q, &pts, &h, mode, opts)?;
    Ok((pts, v))
}

/// Largest |ρ|·sup|ψ_ρ|/‖q̃‖ over directions and scales: an empirical C₁.
pub fn calibrate_c1(
    g: &Grid2D,
    bx: &FaddeevBox,
    qtilde: &[f64],
    qnorm: f64,
    dirs: &[Point],
    scales: &[f64],
    opts: &CorrectionOptions,
) -> Result<f64> {
    if !(qnorm > 0.0) {
        return Ok(0.0);
    }
    let pot: Vec<Complex64> = qtilde.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut best: f64 = 0.0;
    for &d in dirs {
        for &r in scales {
            let rho = make_rho(d, r)?;
            let s = solve_correction(bx, g, &rho, &pot, opts)?;
            best = best.max(rho.modulus() * s.sup_psi / qnorm);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Grid2D {
        Grid2D::new(n, n, [[0.0, 0.0], [1.0, 1.0]]).unwrap()
    }

    #[test]
    fn rho_construction() {
        let r = make_rho([1.0, 0.0], 2.0).unwrap();
        assert_eq!(r.a, [2.0, 0.0]);
        assert_eq!(r.b, [0.0, 2.0]);
        assert_eq!(r.rho_rho(), Complex64::new(0.0, 0.0));
        let r = make_rho([0.6, 0.8], 1.0).unwrap();
        assert!((r.a[0].hypot(r.a[1]) - 1.0).abs() < 1e-15);
        assert!((r.b[0].hypot(r.b[1]) - 1.0).abs() < 1e-15);
        assert!(r.rho_rho().norm() < 1e-15);
        assert!(matches!(make_rho([0.0, 0.0], 1.0), Err(Error::OriginDegeneracy(_))));
    }

    #[test]
    fn rtilde_values() {
        let v = rtilde(2, 0.5, 0.5, 0.0, 1.0).unwrap();
        assert!((v - 4.0 * (8.0 + SQRT_2)).abs() < 1e-12);
        assert!((v - 37.6569).abs() < 1e-4);
        let v = rtilde(1, f64::INFINITY, 1.0, 0.0, 1.0).unwrap();
        assert!((v - SQRT_2).abs() < 1e-15);
        assert!(rtilde(2, 0.5, 0.5, 2.0, 1.0).unwrap() > rtilde(2, 0.5, 0.5, 1.0, 1.0).unwrap());
        assert!(rtilde(2, 0.0, 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn zero_potential_gives_zero_correction() {
        let g = unit(17);
        let bx = FaddeevBox::new(&g);
        let rho = make_rho([0.5, 0.5], 3.0).unwrap();
        let s = solve_correction(&bx, &g, &rho, &vec![ZERO; g.len()], &CorrectionOptions::default()).unwrap();
        assert_eq!(s.sup_psi, 0.0);
        assert_eq!(s.method, CorrectionMethod::Trivial);
    }

    #[test]
    fn box_geometry_and_cutoff() {
        let g = Grid2D::new(17, 9, [[0.1, 0.1], [1.1, 0.6]]).unwrap();
        let bx = FaddeevBox::new(&g);
        assert_eq!((bx.nx, bx.ny), (32, 16));
        let k = bx.from_domain(0, 0);
        let p = bx.coords(k);
        assert!((p[0] - 0.1).abs() < 1e-14 && (p[1] - 0.1).abs() < 1e-14);
        // cutoff is one on the domain and vanishes on the box edge
        for j in 0..g.ny {
            for i in 0..g.nx {
                assert_eq!(bx.cutoff[bx.from_domain(i, j)], 1.0);
            }
        }
        assert_eq!(bx.cutoff[0], 0.0);
        assert_eq!(bx.cutoff[bx.len() - 1], 0.0);
    }

    #[test]
    fn correction_satisfies_equation_spectrally() {
        let g = unit(33);
        let bx = FaddeevBox::new(&g);
        let q: Vec<Complex64> = (0..g.len())
            .map(|k| {
                let p = g.coords(k);
                Complex64::new(0.5 * (PI * p[0]).sin() * (PI * p[1]).sin(), 0.0)
            })
            .collect();
        let rho = make_rho([0.6, 0.8], 4.0).unwrap();
        let s = solve_correction(&bx, &g, &rho, &q, &CorrectionOptions::default()).unwrap();
        assert_eq!(s.method, CorrectionMethod::FixedPoint);
        assert!(s.sup_psi > 0.0);
        assert!(correction_residual(&bx, &g, &s, &q) < 1e-8);
    }

    #[test]
    fn krylov_fallback_and_strict_mode() {
        let g = unit(17);
        let bx = FaddeevBox::new(&g);
        let q = vec![Complex64::new(40.0, 0.0); g.len()];
        let rho = make_rho([0.6, 0.8], 0.5).unwrap();
        let strict = CorrectionOptions { krylov_fallback: false, ..Default::default() };
        assert!(matches!(solve_correction(&bx, &g, &rho, &q, &strict), Err(Error::RhoTooSmall { .. })));
        let s = solve_correction(&bx, &g, &rho, &q, &CorrectionOptions::default()).unwrap();
        assert_eq!(s.method, CorrectionMethod::Krylov);
        assert!(correction_residual(&bx, &g, &s, &q) < 1e-7);
    }

    #[test]
    fn lattice_shift_is_odd_in_b() {
        let g = unit(17);
        let bx = FaddeevBox::new(&g);
        let rho = make_rho([0.3, 0.7], 5.3).unwrap();
        let t1 = bx.lattice_shift(&rho);
        let t2 = bx.lattice_shift(&rho.conj());
        let d = 2.0 * PI / (bx.nx as f64 * bx.hx);
        for a in 0..2 {
            assert!(((t1[a] + t2[a]) / d - ((t1[a] + t2[a]) / d).round()).abs() < 1e-12);
        }
    }

    fn shifted(n: usize) -> Grid2D {
        Grid2D::new(n, n, [[0.1, 0.1], [1.1, 1.1]]).unwrap()
    }

    #[test]
    fn free_basis_matches_closed_form() {
        let g = shifted(33);
        let bx = FaddeevBox::new(&g);
        let c = CoefficientSet::constant(&g, 1.0, 0.0).unwrap();
        let pts = vec![[0.3, 0.4], [0.8, 0.5], [0.55, 0.9]];
        let b = build_basis(&g, &bx, &c, &pts, RMode::Given(3.0), &CorrectionOptions::default()).unwrap();
        let a = b.a_matrix();
        for (l, &sl) in pts.iter().enumerate() {
            for j in 0..3 {
                let rho = make_rho(pts[j], 3.0).unwrap();
                let want = rho.dot(sl).exp();
                assert!((a[(l, j)] - want).norm() < 1e-10 * want.norm().max(1.0));
            }
        }
        assert!(b.interpolation_error(&g).unwrap() < 1e-10);
    }

    #[test]
    fn single_point_diagonal_modulus() {
        let g = shifted(17);
        let bx = FaddeevBox::new(&g);
        let c = CoefficientSet::constant(&g, 1.0, 0.0).unwrap();
        let s = [0.6, 0.7];
        let r = 2.5;
        let b = build_basis(&g, &bx, &c, &[s], RMode::Given(r), &CorrectionOptions::default()).unwrap();
        let want = (r * (s[0] * s[0] + s[1] * s[1])).exp();
        assert!((b.a_matrix()[(0, 0)].norm() - want).abs() < 1e-10 * want);
        assert!((b.sigma_min - want).abs() < 1e-9 * want);
    }

    #[test]
    fn duplicate_points_rejected() {
        let g = shifted(17);
        let bx = FaddeevBox::new(&g);
        let c = CoefficientSet::constant(&g, 1.0, 0.0).unwrap();
        let pts = vec![[0.3, 0.4], [0.3, 0.4]];
        let e = build_basis(&g, &bx, &c, &pts, RMode::Given(3.0), &CorrectionOptions::default()).unwrap_err();
        assert!(matches!(e, Error::DuplicatePoint(..)), "{e:?}");
    }

    #[test]
    fn variable_coefficients_interpolate() {
        let g = shifted(49);
        let bx = FaddeevBox::new(&g);
        let c = CoefficientSet::from_exprs(&g, "1 + 0.2*sin(x1)*cos(x2)", "1 + 0.5*x1*x2", 3).unwrap();
        let pts = vec![[0.35, 0.4], [0.85, 0.6], [0.5, 0.95]];
        let b = build_basis(&g, &bx, &c, &pts, RMode::Given(12.0), &CorrectionOptions::default()).unwrap();
        assert!(b.sols.iter().all(|s| s.sup_psi > 0.0));
        assert!(b.interpolation_error(&g).unwrap() < 1e-8);
        // grid combination agrees with pointwise evaluation at a node
        let coef = vec![Complex64::new(1.0, 0.0), Complex64::new(-0.5, 0.2), Complex64::new(0.3, 0.0)];
        let f = b.combine_field(&g, &coef).unwrap();
        let k = g.idx(20, 30);
        let direct = b.combine_at(&g, &coef, g.coords(k)).unwrap();
        assert!((f.values[k] - direct).norm() < 1e-10 * direct.norm().max(1.0));
    }

    #[test]
    fn opposite_modes_are_conjugate() {
        let g = shifted(33);
        let bx = FaddeevBox::new(&g);
        let q: Vec<f64> = (0..g.len()).map(|k| 1.0 + g.coords(k)[0]).collect();
        let pts = vec![[0.4, 0.5], [0.9, 0.7]];
        let o = CorrectionOptions::default();
        let bp = build_basis_mode_k(&g, &bx, &q, &pts, 2, 3, 1.0, RMode::Given(8.0), &o).unwrap();
        let bm = build_basis_mode_k(&g, &bx, &q, &pts, -2, 3, 1.0, RMode::Given(8.0), &o).unwrap();
        for i in 0..2 {
            let fp = bp.basis_field(&g, i).unwrap();
            let fm = bm.basis_field(&g, i).unwrap();
            let scale = fp.sup_norm();
            for (a, b) in fp.values.iter().zip(&fm.values) {
                assert!((a.conj() - b).norm() < 1e-8 * scale);
            }
        }
        let e = build_basis_mode_k(&g, &bx, &q, &pts, 4, 3, 1.0, RMode::Given(8.0), &o).unwrap_err();
        assert!(matches!(e, Error::OutOfBand { k: 4, band: 3 }));
    }

    #[test]
    fn exponent_guard() {
        let g = shifted(17);
        let bx = FaddeevBox::new(&g);
        let c = CoefficientSet::constant(&g, 1.0, 0.0).unwrap();
        let e = build_basis(&g, &bx, &c, &[[1.0, 1.0]], RMode::Given(400.0), &CorrectionOptions::default()).unwrap_err();
        assert!(matches!(e, Error::ExponentOverflow(_)));
    }

    #[test]
    fn large_rho_constant_potential_decay() {
        let g = shifted(33);
        let bx = FaddeevBox::new(&g);
        let c = 0.7;
        let q = vec![Complex64::new(c, 0.0); g.len()];
        for r in [40.0, 80.0] {
            let rho = make_rho([0.6, 0.8], r).unwrap();
            let s = solve_correction(&bx, &g, &rho, &q, &CorrectionOptions::default()).unwrap();
            assert!(s.sup_psi <= 2.0 * c / rho.modulus(), "{} vs {}", s.sup_psi, 2.0 * c / rho.modulus());
        }
    }

    #[test]
    fn time_test_function_interpolates() {
        use crate::measures::{project_gk, sample_periodic};
        let g = shifted(33);
        let bx = FaddeevBox::new(&g);
        let q = vec![1.0; g.len()];
        let pts = vec![[0.4, 0.5], [0.9, 0.8]];
        let t_star = 0.5;
        let raw: Vec<Vec<Complex64>> = vec![
            (0..20).map(|m| Complex64::new((m as f64 * 0.7).sin() + 1.0, 0.0)).collect(),
            (0..20).map(|m| Complex64::new(if m < 10 { 1.0 } else { -0.5 }, 0.0)).collect(),
        ];
        let h: Vec<_> = raw.iter().map(|x| project_gk(x, 2, t_star).unwrap()).collect();
        let v = build_time_test_function(&g, &bx, &q, &pts, &h, RMode::Given(4.0), &CorrectionOptions::default()).unwrap();
        assert_eq!(v.band(), Some(2));
        let mut worst: f64 = 0.0;
        for m in 0..128 {
            let t = t_star * m as f64 / 128.0;
            for (p, hj) in pts.iter().zip(&h) {
                worst = worst.max((v.eval_at(&g, *p, t).unwrap() - hj.eval_real(t)).abs());
            }
        }
        assert!(worst < 1e-6, "{worst}");
        let _ = sample_periodic(&h[0], 20);
        // single constant mode reduces to the stationary basis function
        let one = BandLimitedIntensity::mode(t_star, 0, 0, Complex64::new(1.0, 0.0));
        let v = build_time_test_function(&g, &bx, &vec![0.0; g.len()], &pts[..1], &[one], RMode::Given(4.0), &CorrectionOptions::default()).unwrap();
        let f0 = v.frame(0.0);
        let f1 = v.frame(0.3);
        assert!(f0.iter().zip(&f1).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((v.eval_at(&g, pts[0], 0.2).unwrap() - 1.0).abs() < 1e-10);
    }
}
