//! Heat-type forward model ∂_t u − Δu + qu = Σ g_j(t) δ(x − s_j) with
//! homogeneous Neumann data (κ ≡ 1), the point-mass initial-data variant,
//! and the associated boundary functionals.

use crate::cgo::TimeTestFunction;
use crate::elliptic::{check_margin, hat_load, DiffusionOperator};
use crate::error::{Error, Result};
use crate::grid::Grid2D;
use crate::measures::{Atom, AtomicMeasure, SpaceTimeAtomicMeasure};

pub const MIN_STEPS: usize = 64;

/// Cholesky factor of a symmetric positive definite band matrix, stored by
/// rows as the lower band (row k holds columns k−bw..=k).
#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    /// Factor M + α·A for the operator's stencil (half-bandwidth nx).
    pub fn shifted(op: &DiffusionOperator, alpha: f64) -> Result<BandCholesky> {
        let (n, bw, nx) = (op.len(), op.nx, op.nx);
        let w = bw + 1;
        let mut l = vec![0.0; n * w];
        // entry (k, k−d) lives at l[k*w + bw − d]
        let diag = op.diagonal();
        for k in 0..n {
            l[k * w + bw] = op.mass[k] + alpha * diag[k];
            if k % nx > 0 {
                l[k * w + bw - 1] = -alpha * op.cx[k - 1];
            }
            if k >= nx {
                l[k * w] = -alpha * op.cy[k - nx];
            }
        }
        for k in 0..n {
            let j0 = k.saturating_sub(bw);
            for j in j0..=k {
                let mut s = l[k * w + bw - (k - j)];
                let lo = j0.max(j.saturating_sub(bw));
                for p in lo..j {
                    s -= l[k * w + bw - (k - p)] * l[j * w + bw - (j - p)];
                }
                if j == k {
                    if !(s > 0.0) {
                        return Err(Error::IllConditioned { sigma_min: s, norm: 0.0 });
                    }
                    l[k * w + bw] = s.sqrt();
                } else {
                    l[k * w + bw - (k - j)] = s / l[j * w + bw];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }

    pub fn solve(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for k in 0..n {
            let row = &self.l[k * w..(k + 1) * w];
            let p0 = k.saturating_sub(bw);
            let s: f64 = x[p0..k].iter().zip(&row[bw - (k - p0)..bw]).map(|(a, b)| a * b).sum();
            x[k] = (x[k] - s) / row[bw];
        }
        // Lᵀ solve column by column so that row k of the band is read contiguously
        for k in (0..n).rev() {
            let row = &self.l[k * w..(k + 1) * w];
            let xk = x[k] / row[bw];
            x[k] = xk;
            let p0 = k.saturating_sub(bw);
            for (xp, l) in x[p0..k].iter_mut().zip(&row[bw - (k - p0)..bw]) {
                *xp -= l * xk;
            }
        }
    }
}

/// Uniform time grid with T* on a node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub t_final: f64,
    pub nt: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(t_final: f64, nt: usize) -> Result<TimeGrid> {
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::TimeGrid(format!("final time {t_final} must be positive")));
        }
        if nt < MIN_STEPS {
            return Err(Error::TimeGrid(format!("nt = {nt} below the minimum {MIN_STEPS}")));
        }
        Ok(TimeGrid { t_final, nt, dt: t_final / nt as f64 })
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Index of the node at time t, which must coincide with a node.
    pub fn node_of(&self, t: f64) -> Result<usize> {
        let x = t / self.dt;
        let n = x.round();
        if (x - n).abs() > 1e-9 * x.abs().max(1.0) || n < 0.0 || n as usize > self.nt {
            return Err(Error::TimeGrid(format!("time {t} is not a node of the grid with dt = {}", self.dt)));
        }
        Ok(n as usize)
    }

    /// Composite trapezoid weights on nodes a..=b.
    pub fn trapezoid(&self, a: usize, b: usize) -> Vec<f64> {
        let mut w = vec![self.dt; b - a + 1];
        if b > a {
            w[0] *= 0.5;
            w[b - a] *= 0.5;
        } else {
            w[0] = 0.0;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParabolicSolution {
    pub time: TimeGrid,
    /// u on the boundary nodes at every time node 0..=nt
    pub sigma_trace: Vec<Vec<f64>>,
    /// node index of T* (0 for the initial-data model)
    pub n_star: usize,
    pub snapshot_tstar: Vec<f64>,
    pub final_state: Vec<f64>,
    pub full: Option<Vec<Vec<f64>>>,
}

impl ParabolicSolution {
    pub fn t_star(&self) -> f64 {
        self.time.time(self.n_star)
    }

    /// Pointwise difference of two solutions on the same grids.
    pub fn difference(&self, other: &ParabolicSolution) -> Result<ParabolicSolution> {
        if self.time != other.time || self.n_star != other.n_star || self.final_state.len() != other.final_state.len() {
            return Err(Error::TimeGrid("solutions live on different grids".into()));
        }
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
        Ok(ParabolicSolution {
            time: self.time,
            sigma_trace: self.sigma_trace.iter().zip(&other.sigma_trace).map(|(a, b)| sub(a, b)).collect(),
            n_star: self.n_star,
            snapshot_tstar: sub(&self.snapshot_tstar, &other.snapshot_tstar),
            final_state: sub(&self.final_state, &other.final_state),
            full: match (&self.full, &other.full) {
                (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| sub(x, y)).collect()),
                _ => None,
            },
        })
    }

    /// ‖u‖_{L²(Σ)} over node range a..=b (trapezoid in time).
    pub fn sigma_norm_range(&self, g: &Grid2D, a: usize, b: usize) -> f64 {
        let w = self.time.trapezoid(a, b);
        (a..=b)
            .map(|n| {
                let s: f64 = g.boundary.iter().zip(&self.sigma_trace[n]).map(|(bn, v)| v * v * bn.weight).sum();
                s * w[n - a]
            })
            .sum::<f64>()
            .sqrt()
    }

    /// ‖u‖_{L²(Σ)} over [0, T].
    pub fn sigma_norm(&self, g: &Grid2D) -> f64 {
        self.sigma_norm_range(g, 0, self.time.nt)
    }
}

/// Number of implicit-Euler half steps replacing the first CN steps.
const STARTUP_HALF_STEPS: usize = 4;

struct Stepper {
    op: DiffusionOperator,
    chol: BandCholesky,
    dt: f64,
}

impl Stepper {
    fn new(g: &Grid2D, q: &[f64], dt: f64) -> Result<Stepper> {
        let op = DiffusionOperator::new(g, &vec![1.0; g.len()], q)?;
        let chol = BandCholesky::shifted(&op, 0.5 * dt)?;
        Ok(Stepper { op, chol, dt })
    }

    /// (M + dt/2 A)u' = (M − dt/2 A)u + dt f
    fn cn(&self, u: &mut [f64], f: Option<&[f64]>, work: &mut [f64]) {
        self.op.apply(u, work);
        for k in 0..u.len() {
            u[k] = self.op.mass[k] * u[k] - 0.5 * self.dt * work[k] + f.map_or(0.0, |f| self.dt * f[k]);
        }
        self.chol.solve(u);
    }

    /// (M + dt/2 A)u' = M u + dt/2 f
    fn euler_half(&self, u: &mut [f64], f: Option<&[f64]>) {
        for k in 0..u.len() {
            u[k] = self.op.mass[k] * u[k] + f.map_or(0.0, |f| 0.5 * self.dt * f[k]);
        }
        self.chol.solve(u);
    }
}

fn source_load(loads: &[Vec<f64>], src: &SpaceTimeAtomicMeasure, t: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (load, (_, g)) in loads.iter().zip(&src.atoms) {
        let a = g.eval_real(t);
        if a != 0.0 {
            out.iter_mut().zip(load).for_each(|(o, l)| *o += a * l);
        }
    }
}

fn unit_loads(g: &Grid2D, src: &SpaceTimeAtomicMeasure) -> Result<Vec<Vec<f64>>> {
    src.atoms
        .iter()
        .map(|(p, _)| {
            let mu = AtomicMeasure { atoms: vec![Atom { loc: *p, amp: 1.0 }] };
            check_margin(g, &mu)?;
            hat_load(g, &mu)
        })
        .collect()
}

/// Crank–Nicolson with Rannacher start-up; sources are evaluated at the
/// midpoints of each step. Sources vanish past T* by construction.
pub fn solve_forward_pt_sources(
    q: &[f64],
    src: &SpaceTimeAtomicMeasure,
    g: &Grid2D,
    t_final: f64,
    nt: usize,
    keep_full: bool,
) -> Result<ParabolicSolution> {
    g.check_len(q.len())?;
    let tg = TimeGrid::new(t_final, nt)?;
    let t_star = src.t_star();
    if !(t_star < t_final) {
        return Err(Error::TimeGrid(format!("T* = {t_star} must precede T = {t_final}")));
    }
    let n_star = tg.node_of(t_star)?;
    let loads = unit_loads(g, src)?;
    let st = Stepper::new(g, q, tg.dt)?;
    let n = g.len();
    let mut u = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut traces = vec![g.boundary_trace_real(&u)];
    let mut full = keep_full.then(|| vec![u.clone()]);
    let mut snapshot = if n_star == 0 { Some(u.clone()) } else { None };
    let startup = STARTUP_HALF_STEPS / 2;
    for step in 0..nt {
        let t0 = tg.time(step);
        if step < startup {
            for h in 0..2 {
                source_load(&loads, src, t0 + (h as f64 + 0.5) * 0.5 * tg.dt, &mut f);
                st.euler_half(&mut u, Some(&f));
            }
        } else {
            source_load(&loads, src, t0 + 0.5 * tg.dt, &mut f);
            st.cn(&mut u, Some(&f), &mut work);
        }
        traces.push(g.boundary_trace_real(&u));
        if let Some(fl) = full.as_mut() {
            fl.push(u.clone());
        }
        if step + 1 == n_star {
            snapshot = Some(u.clone());
        }
    }
    Ok(ParabolicSolution {
        time: tg,
        sigma_trace: traces,
        n_star,
        snapshot_tstar: snapshot.unwrap_or_default(),
        final_state: u,
        full,
    })
}

/// Zero source, u(0) = hat-load representation of μ₀ divided by the lumped mass.
pub fn solve_forward_initial_data(
    q: &[f64],
    mu0: &AtomicMeasure,
    g: &Grid2D,
    t_final: f64,
    nt: usize,
    keep_full: bool,
) -> Result<ParabolicSolution> {
    g.check_len(q.len())?;
    let tg = TimeGrid::new(t_final, nt)?;
    check_margin(g, mu0)?;
    let load = hat_load(g, mu0)?;
    let st = Stepper::new(g, q, tg.dt)?;
    let mut u: Vec<f64> = load.iter().zip(&st.op.mass).map(|(l, m)| l / m).collect();
    let initial = u.clone();
    let mut work = vec![0.0; g.len()];
    let mut traces = vec![g.boundary_trace_real(&u)];
    let mut full = keep_full.then(|| vec![u.clone()]);
    let startup = STARTUP_HALF_STEPS / 2;
    for step in 0..nt {
        if step < startup {
            st.euler_half(&mut u, None);
            st.euler_half(&mut u, None);
        } else {
            st.cn(&mut u, None, &mut work);
        }
        traces.push(g.boundary_trace_real(&u));
        if let Some(fl) = full.as_mut() {
            fl.push(u.clone());
        }
    }
    Ok(ParabolicSolution { time: tg, sigma_trace: traces, n_star: 0, snapshot_tstar: initial, final_state: u, full })
}

/// R(v) = ∫_Ω u(·,T*) v(·,T*) + ∫_{Σ⁻} u ∂_n v, trapezoid in time over [0, T*].
pub fn functional_r_parabolic(sol: &ParabolicSolution, v: &TimeTestFunction, g: &Grid2D) -> Result<f64> {
    if (v.t_star - sol.t_star()).abs() > 1e-12 * v.t_star.max(1.0) {
        return Err(Error::TimeGrid(format!("test function T* = {} but solution T* = {}", v.t_star, sol.t_star())));
    }
    let snap = v.frame(v.t_star);
    let w = g.area_weights();
    let interior: f64 = sol.snapshot_tstar.iter().zip(&snap).zip(&w).map(|((a, b), c)| a * b * c).sum();
    Ok(interior + sigma_minus_term(sol, v, g)?)
}

/// ∫_{Σ⁻} u ∂_n v alone.
pub fn sigma_minus_term(sol: &ParabolicSolution, v: &TimeTestFunction, g: &Grid2D) -> Result<f64> {
    let fw = v.flux_weights(g)?;
    let tw = sol.time.trapezoid(0, sol.n_star);
    let mut acc = 0.0;
    for n in 0..=sol.n_star {
        if tw[n] == 0.0 {
            continue;
        }
        let t = sol.time.time(n);
        let d = v.combine_boundary(&fw, t);
        acc += tw[n] * d.iter().zip(&sol.sigma_trace[n]).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc)
}

/// ∫_Σ u ω with ω piecewise constant on the steps (ω[m] on (t_m, t_{m+1}))
/// paired with u at the step end, which makes the discrete transfer identity exact
/// up to the terminal mismatch.
pub fn sigma_pairing(sol: &ParabolicSolution, g: &Grid2D, first_step: usize, omega: &[Vec<f64>]) -> Result<f64> {
    if first_step + omega.len() > sol.time.nt {
        return Err(Error::TimeGrid("control extends past the final time".into()));
    }
    let mut acc = 0.0;
    for (m, om) in omega.iter().enumerate() {
        let u = &sol.sigma_trace[first_step + m + 1];
        if om.len() != g.boundary.len() {
            return Err(Error::ShapeMismatch { expected: g.boundary.len(), got: om.len() });
        }
        acc += sol.time.dt * g.boundary.iter().zip(om).zip(u).map(|((b, o), x)| b.weight * o * x).sum::<f64>();
    }
    Ok(acc)
}

/// R(v) = ∫_Σ u ω_v for the initial-data model.
pub fn functional_r_initial(sol: &ParabolicSolution, g: &Grid2D, omega: &[Vec<f64>]) -> Result<f64> {
    if omega.len() != sol.time.nt {
        return Err(Error::TimeGrid(format!("control has {} steps, solution {}", omega.len(), sol.time.nt)));
    }
    sigma_pairing(sol, g, 0, omega)
}

/// ∫_Ω f with lumped weights.
pub fn mass(g: &Grid2D, f: &[f64]) -> f64 {
    f.iter().enumerate().map(|(k, v)| v * g.area_weight(k)).sum()
}
