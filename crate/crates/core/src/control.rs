//! Boundary controls steering the backward equation ∂_tψ + Δψ − qψ = 0 from a
//! prescribed snapshot to zero, and the interior-to-boundary transfer identity.
//!
//! In reversed time φ(τ) = ψ(T − τ) the problem is a forward heat equation
//! from rest, driven by Neumann data, that must reach the snapshot. We minimise
//! ½‖φ(τ_end) − z‖² + (ε/2)‖ω‖² through its dual (LL* + ε)λ = z, ω = L*λ,
//! with L the discrete control-to-state map of the Crank–Nicolson scheme.
//! The dual system is solved either by conjugate gradients or directly in the
//! generalized eigenbasis of the spatial operator, where LL* has a closed form.

use faer::prelude::SpSolver;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::elliptic::DiffusionOperator;
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::parabolic::{sigma_pairing, BandCholesky, ParabolicSolution, MIN_STEPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMethod {
    /// dense solve in the eigenbasis; exact minimiser of the discrete problem
    Modal,
    /// matrix-free conjugate gradients with forward/adjoint sweeps
    Cg,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOptions {
    pub method: ControlMethod,
    pub epsilon: f64,
    /// required ‖mismatch‖ / ‖target‖
    pub terminal_tol: f64,
    /// CG stops when the residual drops below this fraction of ‖target‖
    pub cg_tol: f64,
    pub max_iter: usize,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions { method: ControlMethod::Modal, epsilon: 1e-6, terminal_tol: 1e-3, cg_tol: 1e-8, max_iter: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlLogEntry {
    pub iteration: usize,
    pub terminal: f64,
    pub control: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryControl {
    /// ω on each time step of the control interval, in forward time order;
    /// `omega[m]` holds the boundary-node values on (t₀ + m·dt, t₀ + (m+1)·dt)
    pub omega: Vec<Vec<f64>>,
    pub dt: f64,
    /// ‖ψ(·,t₀) − target‖_{L²(Ω)}; ψ vanishes exactly at the end time
    pub achieved_terminal: f64,
    pub target_norm: f64,
    pub control_norm: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// final CG residual relative to the first
    pub gradient_rel: f64,
    pub log: Vec<ControlLogEntry>,
    /// set when the terminal tolerance was not met
    pub warning: Option<String>,
}

impl BoundaryControl {
    pub fn relative_terminal(&self) -> f64 {
        if self.target_norm == 0.0 {
            0.0
        } else {
            self.achieved_terminal / self.target_norm
        }
    }
}

struct ControlMap<'a> {
    g: &'a Grid2D,
    op: DiffusionOperator,
    chol: BandCholesky,
    dt: f64,
    steps: usize,
    work: Vec<f64>,
}

impl<'a> ControlMap<'a> {
    /// y ← C⁻¹ D y with C, D = M ± dt/2 A
    fn propagate(&mut self, y: &mut [f64]) {
        self.op.apply(y, &mut self.work);
        for k in 0..y.len() {
            y[k] = self.op.mass[k] * y[k] - 0.5 * self.dt * self.work[k];
        }
        self.chol.solve(y);
    }

    /// L*: state → control (reversed-time step order)
    fn adjoint(&mut self, lam: &[f64], out: &mut [Vec<f64>]) {
        let mut y: Vec<f64> = lam.iter().zip(&self.op.mass).map(|(a, m)| a * m).collect();
        self.chol.solve(&mut y);
        for n in (0..self.steps).rev() {
            for (o, b) in out[n].iter_mut().zip(&self.g.boundary) {
                *o = y[b.index];
            }
            if n > 0 {
                self.propagate(&mut y);
            }
        }
    }

    /// L: control (reversed-time order) → final state
    fn forward(&mut self, omega: &[Vec<f64>], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for om in omega.iter().take(self.steps) {
            self.op.apply(out, &mut self.work);
            for k in 0..out.len() {
                out[k] = self.op.mass[k] * out[k] - 0.5 * self.dt * self.work[k];
            }
            for (b, w) in self.g.boundary.iter().zip(om) {
                out[b.index] += self.dt * b.weight * w;
            }
            self.chol.solve(out);
        }
    }

    fn mdot(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).zip(&self.op.mass).map(|((x, y), m)| x * y * m).sum()
    }

    fn control_norm(&self, omega: &[Vec<f64>]) -> f64 {
        omega
            .iter()
            .map(|om| self.dt * self.g.boundary.iter().zip(om).map(|(b, w)| b.weight * w * w).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn check_inputs(g: &Grid2D, q: &[f64], duration: f64, steps: usize, eps: f64) -> Result<()> {
    g.check_len(q.len())?;
    if steps < MIN_STEPS {
        return Err(Error::TimeGrid(format!("control needs at least {MIN_STEPS} steps, got {steps}")));
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("control penalty must be positive, got {eps}")));
    }
    if !(duration > 0.0) {
        return Err(Error::TimeGrid(format!("control interval length {duration} must be positive")));
    }
    Ok(())
}

/// Find ω on an interval of `steps` steps of size `duration/steps` such that the
/// backward equation with ∂_nψ = ω, ψ(end) = 0 satisfies ψ(start) ≈ target.
pub fn solve_null_control(
    target: &[f64],
    q: &[f64],
    g: &Grid2D,
    duration: f64,
    steps: usize,
    opts: &ControlOptions,
) -> Result<BoundaryControl> {
    match opts.method {
        ControlMethod::Cg => solve_null_control_cg(target, q, g, duration, steps, opts),
        ControlMethod::Modal => ControlSystem::new(g, q, duration, steps)?.factor(opts.epsilon)?.solve(target, opts),
    }
}

fn solve_null_control_cg(
    target: &[f64],
    q: &[f64],
    g: &Grid2D,
    duration: f64,
    steps: usize,
    opts: &ControlOptions,
) -> Result<BoundaryControl> {
    g.check_len(target.len())?;
    check_inputs(g, q, duration, steps, opts.epsilon)?;
    let dt = duration / steps as f64;
    let op = DiffusionOperator::new(g, &vec![1.0; g.len()], q)?;
    let chol = BandCholesky::shifted(&op, 0.5 * dt)?;
    let n = g.len();
    let nb = g.boundary.len();
    let mut map = ControlMap { g, op, chol, dt, steps, work: vec![0.0; n] };
    let eps = opts.epsilon;
    let znorm = map.mdot(target, target).sqrt();
    let mut omega_rev = vec![vec![0.0; nb]; steps];
    if znorm == 0.0 {
        return Ok(BoundaryControl {
            omega: omega_rev,
            dt,
            achieved_terminal: 0.0,
            target_norm: 0.0,
            control_norm: 0.0,
            epsilon: eps,
            iterations: 0,
            gradient_rel: 0.0,
            log: Vec::new(),
            warning: None,
        });
    }

    // CG on (LL* + ε)λ = z in the lumped-mass inner product
    let mut lam = vec![0.0; n];
    let mut llam = vec![0.0; n]; // LL*λ
    let mut r = target.to_vec();
    let mut p = r.clone();
    let mut lp = vec![0.0; n];
    let mut rr = map.mdot(&r, &r);
    let r0 = rr.sqrt();
    let mut log = Vec::new();
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<f64>, Vec<f64>)> = None;
    let mut mismatch = znorm;
    while iterations < opts.max_iter && rr.sqrt() > opts.cg_tol * znorm {
        map.adjoint(&p, &mut omega_rev);
        map.forward(&omega_rev, &mut lp);
        let pgp = map.mdot(&p, &lp) + eps * map.mdot(&p, &p);
        let alpha = rr / pgp;
        for k in 0..n {
            lam[k] += alpha * p[k];
            llam[k] += alpha * lp[k];
            r[k] -= alpha * (lp[k] + eps * p[k]);
        }
        let rr_new = map.mdot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
        }
        iterations += 1;
        let diff: Vec<f64> = llam.iter().zip(target).map(|(a, b)| a - b).collect();
        mismatch = map.mdot(&diff, &diff).sqrt();
        let control = map.mdot(&lam, &llam).max(0.0).sqrt();
        log.push(ControlLogEntry { iteration: iterations, terminal: mismatch, control });
        if best.as_ref().map_or(true, |b| mismatch < b.0) {
            best = Some((mismatch, lam.clone(), llam.clone()));
        }
    }
    let gradient_rel = rr.sqrt() / r0;
    let converged_cg = rr.sqrt() <= opts.cg_tol * znorm;
    let mut warning = None;
    if mismatch > opts.terminal_tol * znorm {
        // stagnation: fall back to the best iterate seen
        if let Some((m, l, ll)) = best {
            mismatch = m;
            lam = l;
            llam = ll;
        }
        warning = Some(format!(
            "weak controllability: terminal mismatch {:.3e} of target after {iterations} iterations",
            mismatch / znorm
        ));
    } else if !converged_cg {
        warning = Some(format!("CG stopped at relative residual {gradient_rel:.3e}"));
    }
    let _ = llam;
    map.adjoint(&lam, &mut omega_rev);
    let control_norm = map.control_norm(&omega_rev);
    omega_rev.reverse();
    Ok(BoundaryControl {
        omega: omega_rev,
        dt,
        achieved_terminal: mismatch,
        target_norm: znorm,
        control_norm,
        epsilon: eps,
        iterations,
        gradient_rel,
        log,
        warning,
    })
}

/// The control problem in the M-orthonormal eigenbasis of A v = λ M v.
/// With c = 1 + dtλ/2 and γ = (1 − dtλ/2)/c per mode,
/// (LL*)_{ij} = (BᵀWB)_{ij} · dt/(c_i c_j) · Σ_{m<N} (γ_iγ_j)^m,
/// B holding the eigenvectors restricted to the boundary nodes.
pub struct ControlSystem {
    pub dt: f64,
    pub steps: usize,
    mass: Vec<f64>,
    bnodes: Vec<usize>,
    bweights: Vec<f64>,
    c: Vec<f64>,
    gamma: Vec<f64>,
    /// eigenvectors, one per column
    v: Mat<f64>,
    /// eigenvectors on the boundary nodes (n_b × n)
    vb: Mat<f64>,
    gram: Mat<f64>,
}

impl std::fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlSystem").field("modes", &self.c.len()).field("steps", &self.steps).finish()
    }
}

impl ControlSystem {
    pub fn new(g: &Grid2D, q: &[f64], duration: f64, steps: usize) -> Result<ControlSystem> {
        check_inputs(g, q, duration, steps, 1.0)?;
        let dt = duration / steps as f64;
        let op = DiffusionOperator::new(g, &vec![1.0; g.len()], q)?;
        let n = g.len();
        // M^{-1/2} A M^{-1/2}
        let isq: Vec<f64> = op.mass.iter().map(|m| 1.0 / m.sqrt()).collect();
        let mut a = Mat::<f64>::zeros(n, n);
        let d = op.diagonal();
        for k in 0..n {
            a.write(k, k, d[k] * isq[k] * isq[k]);
            if k % g.nx + 1 < g.nx {
                let v = -op.cx[k] * isq[k] * isq[k + 1];
                a.write(k, k + 1, v);
                a.write(k + 1, k, v);
            }
            if k + g.nx < n {
                let v = -op.cy[k] * isq[k] * isq[k + g.nx];
                a.write(k, k + g.nx, v);
                a.write(k + g.nx, k, v);
            }
        }
        let eig = a.selfadjoint_eigendecomposition(Side::Lower);
        drop(a);
        let lam: Vec<f64> = (0..n).map(|i| eig.s().column_vector().read(i)).collect();
        let u = eig.u();
        let v = Mat::<f64>::from_fn(n, n, |k, i| u.read(k, i) * isq[k]);
        drop(eig);
        let c: Vec<f64> = lam.iter().map(|l| 1.0 + 0.5 * dt * l).collect();
        let gamma: Vec<f64> = lam.iter().zip(&c).map(|(l, c)| (1.0 - 0.5 * dt * l) / c).collect();
        let bnodes: Vec<usize> = g.boundary.iter().map(|b| b.index).collect();
        let bweights: Vec<f64> = g.boundary.iter().map(|b| b.weight).collect();
        let nb = bnodes.len();
        let vb = Mat::<f64>::from_fn(nb, n, |b, i| v.read(bnodes[b], i));
        let vbw = Mat::<f64>::from_fn(nb, n, |b, i| vb.read(b, i) * bweights[b].sqrt());
        let mut gram = vbw.transpose() * &vbw;
        let big_n = steps as i32;
        for j in 0..n {
            for i in 0..n {
                let p = gamma[i] * gamma[j];
                let geo = if (1.0 - p).abs() < 1e-14 { steps as f64 } else { (1.0 - p.powi(big_n)) / (1.0 - p) };
                let val = gram.read(i, j) * dt / (c[i] * c[j]) * geo;
                gram.write(i, j, val);
            }
        }
        Ok(ControlSystem { dt, steps, mass: op.mass, bnodes, bweights, c, gamma, v, vb, gram })
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// Cholesky factor of LL* + εI.
    pub fn factor(&self, epsilon: f64) -> Result<FactoredControl<'_>> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("control penalty must be positive, got {epsilon}")));
        }
        let n = self.len();
        let shifted = Mat::<f64>::from_fn(n, n, |i, j| self.gram.read(i, j) + if i == j { epsilon } else { 0.0 });
        let chol = shifted
            .cholesky(Side::Lower)
            .map_err(|e| Error::NoConvergence(format!("control Gram matrix not positive definite: {e:?}")))?;
        Ok(FactoredControl { sys: self, epsilon, chol })
    }
}

pub struct FactoredControl<'a> {
    sys: &'a ControlSystem,
    pub epsilon: f64,
    chol: faer::solvers::Cholesky<f64>,
}

impl FactoredControl<'_> {
    pub fn solve(&self, target: &[f64], opts: &ControlOptions) -> Result<BoundaryControl> {
        let s = self.sys;
        let n = s.len();
        if target.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: target.len() });
        }
        let nb = s.bnodes.len();
        let mz = Mat::<f64>::from_fn(n, 1, |k, _| target[k] * s.mass[k]);
        let zhat = s.v.transpose() * &mz;
        let znorm = (0..n).map(|i| zhat.read(i, 0).powi(2)).sum::<f64>().sqrt();
        let lam = self.chol.solve(&zhat);
        let lam_norm = (0..n).map(|i| lam.read(i, 0).powi(2)).sum::<f64>().sqrt();
        let mismatch = self.epsilon * lam_norm;
        // ω in reversed-time step n is B diag(γ^{N−1−n}/c) λ̂; column m is forward step m
        let mut coef = Mat::<f64>::zeros(n, s.steps);
        for i in 0..n {
            let mut a = lam.read(i, 0) / s.c[i];
            for m in 0..s.steps {
                coef.write(i, m, a);
                a *= s.gamma[i];
            }
        }
        let w = &s.vb * &coef;
        let omega: Vec<Vec<f64>> = (0..s.steps).map(|m| (0..nb).map(|b| w.read(b, m)).collect()).collect();
        let control_norm = omega
            .iter()
            .map(|om| s.dt * om.iter().zip(&s.bweights).map(|(w, bw)| bw * w * w).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let warning = (znorm > 0.0 && mismatch > opts.terminal_tol * znorm)
            .then(|| format!("weak controllability: terminal mismatch {:.3e} of target", mismatch / znorm));
        Ok(BoundaryControl {
            omega,
            dt: s.dt,
            achieved_terminal: mismatch,
            target_norm: znorm,
            control_norm,
            epsilon: self.epsilon,
            iterations: 1,
            gradient_rel: 0.0,
            log: vec![ControlLogEntry { iteration: 1, terminal: mismatch, control: control_norm }],
            warning,
        })
    }
}

/// (LHS, RHS) of ∫_Ω u(·,T*) v(·,T*) = ∫_{Σ⁺} u ω for a solution whose
/// T* node starts the control interval.
pub fn transfer_sides(u: &ParabolicSolution, v_snapshot: &[f64], omega: &BoundaryControl, g: &Grid2D) -> Result<(f64, f64)> {
    g.check_len(v_snapshot.len())?;
    if (omega.dt - u.time.dt).abs() > 1e-12 * u.time.dt {
        return Err(Error::TimeGrid(format!("control step {} differs from solution step {}", omega.dt, u.time.dt)));
    }
    if u.n_star + omega.omega.len() != u.time.nt {
        return Err(Error::TimeGrid("control interval must run from T* to T".into()));
    }
    let lhs: f64 = u.snapshot_tstar.iter().zip(v_snapshot).enumerate().map(|(k, (a, b))| a * b * g.area_weight(k)).sum();
    let rhs = sigma_pairing(u, g, u.n_star, &omega.omega)?;
    Ok((lhs, rhs))
}

/// |LHS − RHS| / (|LHS| + |RHS| + 1e-14).
pub fn verify_transfer_identity(u_diff: &ParabolicSolution, v_snapshot: &[f64], omega: &BoundaryControl, g: &Grid2D) -> Result<f64> {
    let (l, r) = transfer_sides(u_diff, v_snapshot, omega, g)?;
    Ok((l - r).abs() / (l.abs() + r.abs() + 1e-14))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid2D {
        Grid2D::new(n, n, [[0.0, 0.0], [1.0, 1.0]]).unwrap()
    }

    #[test]
    fn adjoint_is_exact() {
        let g = grid(9);
        let q = vec![1.0; g.len()];
        let dt = 0.01;
        let op = DiffusionOperator::new(&g, &vec![1.0; g.len()], &q).unwrap();
        let chol = BandCholesky::shifted(&op, 0.5 * dt).unwrap();
        let mut map = ControlMap { g: &g, op, chol, dt, steps: 7, work: vec![0.0; g.len()] };
        let nb = g.boundary.len();
        let om: Vec<Vec<f64>> = (0..7).map(|n| (0..nb).map(|b| ((n * nb + b) as f64 * 0.3).sin()).collect()).collect();
        let z: Vec<f64> = (0..g.len()).map(|k| (k as f64 * 0.7).cos()).collect();
        let mut lo = vec![0.0; g.len()];
        map.forward(&om, &mut lo);
        let lhs = map.mdot(&lo, &z);
        let mut lz = vec![vec![0.0; nb]; 7];
        map.adjoint(&z, &mut lz);
        let rhs: f64 = om
            .iter()
            .zip(&lz)
            .map(|(a, b)| dt * g.boundary.iter().zip(a.iter().zip(b)).map(|(bn, (x, y))| bn.weight * x * y).sum::<f64>())
            .sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1e-3), "{lhs} {rhs}");
    }

    #[test]
    fn zero_target_gives_zero_control() {
        let g = grid(17);
        let c = solve_null_control(&vec![0.0; g.len()], &vec![1.0; g.len()], &g, 0.5, 64, &ControlOptions::default()).unwrap();
        assert_eq!(c.achieved_terminal, 0.0);
        assert!(c.omega.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn smooth_target_is_reached() {
        let g = grid(17);
        let target: Vec<f64> = (0..g.len()).map(|k| { let p = g.coords(k); (p[0] + 0.5 * p[1]).exp() }).collect();
        let c = solve_null_control(&target, &vec![1.0; g.len()], &g, 0.5, 64, &ControlOptions::default()).unwrap();
        assert!(c.relative_terminal() < 1e-3, "{}", c.relative_terminal());
        assert!(c.warning.is_none() || c.gradient_rel > 0.0);
    }

    #[test]
    fn modal_and_cg_agree() {
        let g = grid(9);
        let q: Vec<f64> = (0..g.len()).map(|k| 1.0 + 0.5 * g.coords(k)[0]).collect();
        let target: Vec<f64> = (0..g.len()).map(|k| { let p = g.coords(k); p[0].exp() * (2.0 * p[1]).cos() }).collect();
        let cg = ControlOptions { method: ControlMethod::Cg, epsilon: 1e-3, cg_tol: 1e-12, terminal_tol: 1.0, max_iter: 2000 };
        let a = solve_null_control(&target, &q, &g, 0.3, 64, &cg).unwrap();
        let b = solve_null_control(&target, &q, &g, 0.3, 64, &ControlOptions { method: ControlMethod::Modal, ..cg }).unwrap();
        assert!((a.achieved_terminal - b.achieved_terminal).abs() < 1e-6 * b.target_norm, "{} {} {} {} {}", a.achieved_terminal, b.achieved_terminal, a.target_norm, b.target_norm, a.iterations);
        let diff: f64 = a.omega.iter().flatten().zip(b.omega.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let scale: f64 = b.omega.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-6 * scale, "{diff} {scale}");
    }

    #[test]
    fn penalty_path_is_monotone() {
        let g = grid(13);
        let q = vec![1.0; g.len()];
        let target: Vec<f64> = (0..g.len()).map(|k| { let p = g.coords(k); (1.5 * p[0] - p[1]).exp() }).collect();
        let sys = ControlSystem::new(&g, &q, 0.5, 64).unwrap();
        let o = ControlOptions::default();
        let runs: Vec<BoundaryControl> = [1e-4, 1e-6, 1e-8].iter().map(|&e| sys.factor(e).unwrap().solve(&target, &o).unwrap()).collect();
        for w in runs.windows(2) {
            assert!(w[1].achieved_terminal <= w[0].achieved_terminal * (1.0 + 1e-9));
            assert!(w[1].control_norm >= w[0].control_norm * (1.0 - 1e-9));
        }
        assert!(runs[1].relative_terminal() < 1e-3);
        // linear in the target
        let twice: Vec<f64> = target.iter().map(|v| 2.0 * v).collect();
        let f = sys.factor(1e-6).unwrap();
        let a = f.solve(&target, &o).unwrap();
        let b = f.solve(&twice, &o).unwrap();
        assert!((b.control_norm - 2.0 * a.control_norm).abs() < 1e-8 * b.control_norm);
    }

    #[test]
    fn discrete_transfer_identity() {
        use crate::measures::{Atom, AtomicMeasure};
        use crate::parabolic::solve_forward_initial_data;
        // u from point-mass initial data; control on all of [0, T]
        let g = grid(17);
        let q = vec![1.0; g.len()];
        let mu = AtomicMeasure::new(vec![Atom { loc: [0.4, 0.55], amp: 1.0 }]).unwrap();
        let u = solve_forward_initial_data(&q, &mu, &g, 0.5, 64, false).unwrap();
        let target: Vec<f64> = (0..g.len()).map(|k| { let p = g.coords(k); (p[0] * 0.7).exp() }).collect();
        let c = solve_null_control(&target, &q, &g, 0.5, 64, &ControlOptions::default()).unwrap();
        let (l, r) = transfer_sides(&u, &target, &c, &g).unwrap();
        assert!((l - r).abs() < 2e-2 * l.abs(), "{l} {r}");
    }
}
