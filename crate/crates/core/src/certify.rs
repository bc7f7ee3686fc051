//! Combined test functions, certificate constants and the end-to-end stability
//! chains T_c(μ,ν) ≤ R₁(v*) − R₂(v*) ≤ C‖u₁ − u₂‖ for the elliptic, parabolic
//! and initial-data models.

use std::f64::consts::{PI, SQRT_2};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgo::{build_basis, build_time_test_function, CorrectionOptions, FaddeevBox, InterpolationBasis, RMode, TimeTestFunction};
use crate::control::{verify_transfer_identity, ControlOptions, ControlSystem, FactoredControl};
use crate::elliptic::{functional_r, solve_forward};
use crate::error::{Error, Result};
use crate::grid::{separation_params, CoefficientSet, Grid2D, ScalarField};
use crate::measures::{
    partition_supports, partition_supports_parabolic, project_gk, sample_measure_pair, sample_spacetime_pair,
    spacetime_from_literals, trial_rng, atomic_from_literals, MeasurePair,
    AtomicMeasure, BandLimitedIntensity, SamplingSpec, SpaceTimeAtomicMeasure, SupportPartition, DEFAULT_TOL_MATCH,
};
use crate::ot::{dual_value, normalize_potentials, solve_ot, CostSpec};
use crate::parabolic::{functional_r_initial, sigma_minus_term, sigma_pairing, solve_forward_initial_data, solve_forward_pt_sources, ParabolicSolution};

/// Relative slack on both chain links.
pub const SLACK: f64 = 0.10;
/// Absolute floor on chain comparisons, for trials where both sides vanish.
pub const ABS_FLOOR: f64 = 1e-12;
/// Tolerance of the dual feasibility check inside the normalization.
const DUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Elliptic,
    Parabolic,
    InitialData,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::Elliptic => "elliptic",
            Mode::Parabolic => "parabolic",
            Mode::InitialData => "initial_data",
        }
    }
}

/// The unspecified constants of the estimates; all default to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "UPPERCASE", deny_unknown_fields)]
pub struct Constants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
}

impl Default for Constants {
    fn default() -> Self {
        Constants { c1: 1.0, c2: 1.0, c3: 1.0, c4: 1.0, c5: 1.0 }
    }
}

// ---------------------------------------------------------------------------
// certificates

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EllipticCertificateParams {
    pub m: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub r0: f64,
    pub kappa_c0: f64,
    pub c_sup: f64,
    pub qnorm: f64,
    pub c1: f64,
    pub c3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub value: f64,
    pub log10_value: f64,
    pub rtilde: f64,
    pub note: Option<String>,
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

/// C₃‖κ‖‖c‖ M r̃ e^{r̃(R₀² − η₂²)} with r̃ = 4M(2/η₁² + (1 + C₁‖q̃‖)/(√2 η₂)).
pub fn certificate_elliptic(p: &EllipticCertificateParams, calibrated: bool) -> Result<Certificate> {
    if p.m == 0 {
        return Err(Error::Config("M must be at least 1".into()));
    }
    for (n, v) in [("eta1", p.eta1), ("eta2", p.eta2), ("R0", p.r0), ("kappa", p.kappa_c0), ("|c|", p.c_sup), ("C3", p.c3)] {
        positive(n, v)?;
    }
    if !(p.qnorm >= 0.0) || !(p.c1 >= 0.0) {
        return Err(Error::Config("‖q̃‖ and C1 must be nonnegative".into()));
    }
    let sep = if p.eta1.is_infinite() { 0.0 } else { 2.0 / (p.eta1 * p.eta1) };
    let rt = 4.0 * p.m as f64 * (sep + (1.0 + p.c1 * p.qnorm) / (SQRT_2 * p.eta2));
    let ln = (p.c3 * p.kappa_c0 * p.c_sup * p.m as f64 * rt).ln() + rt * (p.r0 * p.r0 - p.eta2 * p.eta2);
    let note = (!calibrated).then(|| "up to unspecified constants (C1, C3 at defaults)".to_string());
    Ok(Certificate { value: ln.exp(), log10_value: ln / std::f64::consts::LN_10, rtilde: rt, note })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParabolicCertificateParams {
    pub n: usize,
    pub k: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub t_star: f64,
    pub t_final: f64,
    pub qnorm: f64,
    pub area: f64,
    pub c1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParabolicCertificate {
    pub r_k: f64,
    /// √(n²(2K+1)/T*)
    pub structural: f64,
    pub note: String,
}

/// r_K = 2n(2/η₁² + (1 + C₁(‖q‖ + 2πK√|Ω|/T*))/(√2 η₂)).
pub fn certificate_parabolic(p: &ParabolicCertificateParams) -> Result<ParabolicCertificate> {
    if p.n == 0 {
        return Err(Error::Config("n must be at least 1".into()));
    }
    for (n, v) in [("eta1", p.eta1), ("eta2", p.eta2), ("T*", p.t_star), ("|Omega|", p.area)] {
        positive(n, v)?;
    }
    if !(p.t_final > p.t_star) {
        return Err(Error::Config(format!("T = {} must exceed T* = {}", p.t_final, p.t_star)));
    }
    if !(p.qnorm >= 0.0) || !(p.c1 >= 0.0) {
        return Err(Error::Config("‖q‖ and C1 must be nonnegative".into()));
    }
    let sep = if p.eta1.is_infinite() { 0.0 } else { 2.0 / (p.eta1 * p.eta1) };
    let qk = p.qnorm + 2.0 * PI * p.k as f64 * p.area.sqrt() / p.t_star;
    let r_k = 2.0 * p.n as f64 * (sep + (1.0 + p.c1 * qk) / (SQRT_2 * p.eta2));
    let nn = p.n as f64;
    Ok(ParabolicCertificate {
        r_k,
        structural: (nn * nn * (2 * p.k + 1) as f64 / p.t_star).sqrt(),
        note: "C5 unspecified; empirical ratio supplied instead".into(),
    })
}

// ---------------------------------------------------------------------------
// combination of the dual potentials

/// v*(s) per support point: φ on S₁ ∪ S₃, −ψ on S₂ ∪ S₄.
pub fn combine_values(part: &SupportPartition, phi: &[f64], psi: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; part.points.len()];
    for &i in part.s1.iter().chain(&part.s3) {
        v[i] = phi[part.points[i].mu.expect("S1/S3 point lies in supp μ")];
    }
    for &i in part.s2.iter().chain(&part.s4) {
        v[i] = -psi[part.points[i].nu.expect("S2/S4 point lies in supp ν")];
    }
    v
}

/// Both sides of the rearrangement behind the combination, and J.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtomLevel {
    /// Σ_N a_s v*(s) − Σ_{N′} b_s v*(s)
    pub pairing: f64,
    /// Σ_{S₃∪S₄}|a_s − b_s| w(s) + Σ_{S₁} a_s φ(s) + Σ_{S₂} b_s ψ(s)
    pub rearranged: f64,
    pub j: f64,
}

impl AtomLevel {
    pub fn identity_residual(&self) -> f64 {
        (self.pairing - self.rearranged).abs()
    }

    pub fn certifies(&self, tol: f64) -> bool {
        self.j <= self.pairing + tol
    }
}

pub fn atom_level_elliptic(
    part: &SupportPartition,
    mu: &AtomicMeasure,
    nu: &AtomicMeasure,
    phi: &[f64],
    psi: &[f64],
    values: &[f64],
) -> AtomLevel {
    let mut pairing = 0.0;
    for (p, v) in part.points.iter().zip(values) {
        if let Some(i) = p.mu {
            pairing += mu.atoms[i].amp * v;
        }
        if let Some(j) = p.nu {
            pairing -= nu.atoms[j].amp * v;
        }
    }
    let mut rearranged = 0.0;
    for &s in &part.s1 {
        let i = part.points[s].mu.unwrap();
        rearranged += mu.atoms[i].amp * phi[i];
    }
    for &s in &part.s2 {
        let j = part.points[s].nu.unwrap();
        rearranged += nu.atoms[j].amp * psi[j];
    }
    for &s in &part.s3 {
        let (i, j) = (part.points[s].mu.unwrap(), part.points[s].nu.unwrap());
        rearranged += (mu.atoms[i].amp - nu.atoms[j].amp).abs() * phi[i];
    }
    for &s in &part.s4 {
        let (i, j) = (part.points[s].mu.unwrap(), part.points[s].nu.unwrap());
        rearranged += (mu.atoms[i].amp - nu.atoms[j].amp).abs() * psi[j];
    }
    AtomLevel { pairing, rearranged, j: dual_value(&mu.amplitudes(), &nu.amplitudes(), phi, psi) }
}

/// v* = Re Σ_s v*(s) v_s over the support basis.
#[derive(Debug, Clone)]
pub struct CombinedElliptic {
    pub basis: InterpolationBasis,
    pub coef: Vec<Complex64>,
    pub field: ScalarField,
    /// prescribed values at the support points
    pub values: Vec<f64>,
    /// max_s |v*(s) − prescribed|, evaluated from the exponential formula
    pub interpolation_error: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn combine_elliptic(
    phi: &[f64],
    psi: &[f64],
    part: &SupportPartition,
    coeffs: &CoefficientSet,
    g: &Grid2D,
    bx: &FaddeevBox,
    mode: RMode,
    opts: &CorrectionOptions,
) -> Result<CombinedElliptic> {
    let values = combine_values(part, phi, psi);
    let basis = build_basis(g, bx, coeffs, &part.locations(), mode, opts)?;
    let coef: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let full = basis.combine_field(g, &coef)?;
    let field = ScalarField::from_real(g, &full.re())?;
    let mut err: f64 = 0.0;
    for (p, v) in part.points.iter().zip(&values) {
        err = err.max((basis.combine_at(g, &coef, p.loc)?.re - v).abs());
    }
    Ok(CombinedElliptic { basis, coef, field, values, interpolation_error: err })
}

/// Event discretization of a space-time measure: atom j at times T*·l/L with
/// mass g_j(t_l)·T*/L (exact total mass for L > K).
#[derive(Debug, Clone, PartialEq)]
pub struct EventMeasure {
    pub events: Vec<[f64; 3]>,
    pub masses: Vec<f64>,
    pub samples: usize,
}

pub fn discretize_events(m: &SpaceTimeAtomicMeasure, samples: usize) -> EventMeasure {
    let ts = m.t_star();
    let mut events = Vec::with_capacity(m.atoms.len() * samples);
    let mut masses = Vec::with_capacity(m.atoms.len() * samples);
    for (s, g) in &m.atoms {
        for l in 0..samples {
            let t = ts * l as f64 / samples as f64;
            events.push([s[0], s[1], t]);
            masses.push(g.eval_real(t) * ts / samples as f64);
        }
    }
    EventMeasure { events, masses, samples }
}

/// Per support point, ṽ(s, t_l) from the event potentials and its projection onto G_K.
#[derive(Debug, Clone)]
pub struct CombinedParabolic {
    pub raw: Vec<Vec<f64>>,
    pub projected: Vec<BandLimitedIntensity>,
    pub v: TimeTestFunction,
}

/// ṽ = φ on S₁ and on S₃ where a_s(t) ≥ b_s(t); −ψ elsewhere.
pub fn combine_raw_parabolic(
    part: &SupportPartition,
    mu: &EventMeasure,
    nu: &EventMeasure,
    phi: &[f64],
    psi: &[f64],
) -> Vec<Vec<f64>> {
    let l = mu.samples;
    part.points
        .iter()
        .map(|p| {
            (0..l)
                .map(|t| match (p.mu, p.nu) {
                    (Some(i), None) => phi[i * l + t],
                    (None, Some(j)) => -psi[j * l + t],
                    (Some(i), Some(j)) => {
                        if mu.masses[i * l + t] >= nu.masses[j * l + t] {
                            phi[i * l + t]
                        } else {
                            -psi[j * l + t]
                        }
                    }
                    (None, None) => unreachable!(),
                })
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn combine_parabolic(
    phi: &[f64],
    psi: &[f64],
    part: &SupportPartition,
    mu: &EventMeasure,
    nu: &EventMeasure,
    q: &[f64],
    band: usize,
    t_star: f64,
    g: &Grid2D,
    bx: &FaddeevBox,
    mode: RMode,
    opts: &CorrectionOptions,
) -> Result<CombinedParabolic> {
    let raw = combine_raw_parabolic(part, mu, nu, phi, psi);
    let projected = raw
        .iter()
        .map(|r| project_gk(&r.iter().map(|&x| Complex64::new(x, 0.0)).collect::<Vec<_>>(), band, t_star))
        .collect::<Result<Vec<_>>>()?;
    let v = build_time_test_function(g, bx, q, &part.locations(), &projected, mode, opts)?;
    Ok(CombinedParabolic { raw, projected, v })
}

/// Event-level quantities for the parabolic combination: with L > 2K the
/// rectangle rule integrates products of G_K signals exactly.
pub fn atom_level_parabolic(
    part: &SupportPartition,
    mu: &EventMeasure,
    nu: &EventMeasure,
    phi: &[f64],
    psi: &[f64],
    comb: &CombinedParabolic,
) -> AtomLevel {
    let l = mu.samples;
    let ts = comb.projected.first().map_or(0.0, |h| h.t_star);
    let mut pairing = 0.0;
    let mut rearranged = 0.0;
    for (k, p) in part.points.iter().enumerate() {
        for t in 0..l {
            let a = p.mu.map_or(0.0, |i| mu.masses[i * l + t]);
            let b = p.nu.map_or(0.0, |j| nu.masses[j * l + t]);
            pairing += (a - b) * comb.projected[k].eval_real(ts * t as f64 / l as f64);
            rearranged += (a - b) * comb.raw[k][t];
        }
    }
    AtomLevel { pairing, rearranged, j: dual_value(&mu.masses, &nu.masses, phi, psi) }
}

// ---------------------------------------------------------------------------
// stability experiment

/// Everything a stability run needs besides the per-trial sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilitySetup {
    pub mode: Mode,
    pub trials: usize,
    pub seed: u64,
    pub sampling: SamplingSpec,
    /// atoms shared between μ and ν
    pub shared: usize,
    pub cost: CostSpec<f64>,
    /// fixed |ρ| for the CGO bases; None uses the separation formula
    pub r: Option<f64>,
    pub constants: Constants,
    /// calibrate C₃ (elliptic) from the run
    pub calibrate: bool,
    pub t_final: f64,
    pub t_star: f64,
    pub nt: usize,
    pub band: usize,
    /// time samples per atom for the parabolic transport problem
    pub event_samples: usize,
    pub epsilon: f64,
    /// fixed (μ, ν) used by every trial instead of sampling
    #[serde(default)]
    pub measures: Option<MeasurePair>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub trial: usize,
    pub status: String,
    pub t_c: f64,
    pub j_at_optimum: f64,
    /// R₁ − R₂ from boundary data
    pub r1_minus_r2: f64,
    /// Σ a v*(s) − Σ b v*(s)
    pub atom_pairing: f64,
    pub atom_identity_residual: f64,
    pub boundary_misfit: f64,
    /// dual norm of the boundary functional: |R₁ − R₂| ≤ realized_bound · misfit
    pub realized_bound: f64,
    pub certificate_value: f64,
    pub empirical_ratio: f64,
    /// |R − atom pairing| / |atom pairing|
    pub reciprocity_rel: f64,
    pub transfer_residual: f64,
    pub control_rel_terminal: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub margin: f64,
    pub chain_ok: bool,
}

impl TrialRow {
    fn failed(trial: usize, e: &Error) -> TrialRow {
        TrialRow {
            trial,
            status: format!("error: {e}"),
            t_c: f64::NAN,
            j_at_optimum: f64::NAN,
            r1_minus_r2: f64::NAN,
            atom_pairing: f64::NAN,
            atom_identity_residual: f64::NAN,
            boundary_misfit: f64::NAN,
            realized_bound: f64::NAN,
            certificate_value: f64::NAN,
            empirical_ratio: f64::NAN,
            reciprocity_rel: f64::NAN,
            transfer_residual: f64::NAN,
            control_rel_terminal: f64::NAN,
            eta1: f64::NAN,
            eta2: f64::NAN,
            margin: f64::NAN,
            chain_ok: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub mode: Mode,
    pub seed: u64,
    pub trials: usize,
    pub grid: [usize; 2],
    pub constants: Constants,
    pub slack: f64,
    pub r_used: f64,
    /// r̃ (elliptic) or r_K (parabolic) of the class
    pub r_formula: f64,
    pub eta1_min: f64,
    pub eta2_min: f64,
    pub r0: f64,
    pub certificate_log10: f64,
    pub certificate_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub max_ratio: f64,
    pub min_margin: f64,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub meta: ReportMeta,
    pub rows: Vec<TrialRow>,
    pub summary: Summary,
}

/// Link checks: value ≤ bound·(1 + slack) + floor, and the relative margin.
fn link(value: f64, bound: f64) -> (bool, f64) {
    let cap = bound * (1.0 + SLACK) + ABS_FLOOR;
    let margin = if cap > 0.0 { (cap - value) / cap } else { f64::NEG_INFINITY };
    (value <= cap, margin)
}

fn chain(row: &mut TrialRow) {
    let (ok1, m1) = link(row.t_c, row.r1_minus_r2);
    let (ok2, m2) = link(row.r1_minus_r2.abs(), row.realized_bound * row.boundary_misfit);
    row.chain_ok = ok1 && ok2;
    row.margin = m1.min(m2);
    row.empirical_ratio = if row.boundary_misfit > 0.0 {
        row.t_c / row.boundary_misfit
    } else if row.t_c == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
}

/// Transport between two atomic measures with normalized duals.
fn transport(mu: &AtomicMeasure, nu: &AtomicMeasure, cost: &CostSpec<f64>) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let res = solve_ot(&mu.amplitudes(), &mu.locations(), &nu.amplitudes(), &nu.locations(), cost)?;
    let (phi, psi) = normalize_potentials(&res.costs, &res.phi, &res.psi, DUAL_TOL)?;
    Ok((res.cost, phi, psi))
}

fn r_mode(setup: &StabilitySetup) -> RMode {
    match setup.r {
        Some(r) => RMode::Given(r),
        None => RMode::Auto { c1: setup.constants.c1 },
    }
}

struct EllipticCtx<'a> {
    g: &'a Grid2D,
    coeffs: &'a CoefficientSet,
    bx: FaddeevBox,
}

fn elliptic_trial(setup: &StabilitySetup, ctx: &EllipticCtx<'_>, trial: usize) -> Result<TrialRow> {
    let g = ctx.g;
    let mut rng = trial_rng(setup.seed, trial as u64);
    let (mu, nu) = match &setup.measures {
        Some(p) => (atomic_from_literals(&p.mu)?, atomic_from_literals(&p.nu)?),
        None => sample_measure_pair(g, &setup.sampling, setup.shared, &mut rng)?,
    };
    let (t_c, phi, psi) = transport(&mu, &nu, &setup.cost)?;
    let part = partition_supports(&mu, &nu, DEFAULT_TOL_MATCH)?;
    let (eta1, eta2, _) = separation_params(g, &part.locations())?;
    let (s1, s2) = rayon::join(|| solve_forward(ctx.coeffs, &mu, g), || solve_forward(ctx.coeffs, &nu, g));
    let (s1, s2) = (s1?, s2?);
    let comb = combine_elliptic(&phi, &psi, &part, ctx.coeffs, g, &ctx.bx, r_mode(setup), &CorrectionOptions::default())?;
    let atom = atom_level_elliptic(&part, &mu, &nu, &phi, &psi, &comb.values);
    let diff: Vec<f64> = s1.boundary_trace.iter().zip(&s2.boundary_trace).map(|(a, b)| a - b).collect();
    let r = functional_r(&diff, &comb.field, ctx.coeffs, g)?.re;
    let diffc: Vec<Complex64> = diff.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let misfit = g.boundary_norm(&diffc);
    let realized = g.flux_norm(&comb.field.values, &ctx.coeffs.kappa)?;
    let mut row = TrialRow {
        trial,
        status: "ok".into(),
        t_c,
        j_at_optimum: atom.j,
        r1_minus_r2: r,
        atom_pairing: atom.pairing,
        atom_identity_residual: atom.identity_residual(),
        boundary_misfit: misfit,
        realized_bound: realized,
        certificate_value: f64::NAN,
        empirical_ratio: 0.0,
        reciprocity_rel: rel(r, atom.pairing),
        transfer_residual: f64::NAN,
        control_rel_terminal: f64::NAN,
        eta1,
        eta2,
        margin: 0.0,
        chain_ok: false,
    };
    chain(&mut row);
    Ok(row)
}

fn rel(x: f64, reference: f64) -> f64 {
    if reference == 0.0 {
        if x == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (x - reference).abs() / reference.abs()
    }
}

struct ParabolicCtx<'a> {
    g: &'a Grid2D,
    q: &'a [f64],
    bx: FaddeevBox,
    control: FactoredControl<'a>,
}

/// Coefficients c[n][b] with R = Σ c[n][b] u_b(t_n) and the dual norm
/// with respect to the trapezoid L²(Σ) norm.
fn parabolic_dual_norm(
    sol: &ParabolicSolution,
    g: &Grid2D,
    v: &TimeTestFunction,
    omega: &[Vec<f64>],
) -> Result<f64> {
    let nt = sol.time.nt;
    let nb = g.boundary.len();
    let mut c = vec![vec![0.0; nb]; nt + 1];
    let fw = v.flux_weights(g)?;
    let tw = sol.time.trapezoid(0, sol.n_star);
    for n in 0..=sol.n_star {
        let d = v.combine_boundary(&fw, sol.time.time(n));
        for b in 0..nb {
            c[n][b] += tw[n] * d[b];
        }
    }
    for (m, om) in omega.iter().enumerate() {
        for (b, (bn, w)) in g.boundary.iter().zip(om).enumerate() {
            c[sol.n_star + m + 1][b] += sol.time.dt * bn.weight * w;
        }
    }
    let all = sol.time.trapezoid(0, nt);
    let mut acc = 0.0;
    for n in 0..=nt {
        for (b, bn) in g.boundary.iter().enumerate() {
            acc += c[n][b] * c[n][b] / (all[n] * bn.weight);
        }
    }
    Ok(acc.sqrt())
}

fn parabolic_trial(setup: &StabilitySetup, ctx: &ParabolicCtx<'_>, trial: usize) -> Result<TrialRow> {
    let g = ctx.g;
    let mut rng = trial_rng(setup.seed, trial as u64);
    let (mu, nu) = match &setup.measures {
        Some(p) => (
            spacetime_from_literals(&p.mu, setup.t_star, setup.band)?,
            spacetime_from_literals(&p.nu, setup.t_star, setup.band)?,
        ),
        None => sample_spacetime_pair(g, &setup.sampling, setup.shared, setup.t_star, setup.band, &mut rng)?,
    };
    let em = discretize_events(&mu, setup.event_samples);
    let en = discretize_events(&nu, setup.event_samples);
    let res = solve_ot(&em.masses, &em.events, &en.masses, &en.events, &setup.cost)?;
    let (phi, psi) = normalize_potentials(&res.costs, &res.phi, &res.psi, DUAL_TOL)?;
    let part = partition_supports_parabolic(&mu, &nu, DEFAULT_TOL_MATCH)?;
    let (eta1, eta2, _) = separation_params(g, &part.locations())?;
    let comb = combine_parabolic(
        &phi,
        &psi,
        &part,
        &em,
        &en,
        ctx.q,
        setup.band,
        setup.t_star,
        g,
        &ctx.bx,
        r_mode(setup),
        &CorrectionOptions::default(),
    )?;
    let atom = atom_level_parabolic(&part, &em, &en, &phi, &psi, &comb);
    let (u1, u2) = rayon::join(
        || solve_forward_pt_sources(ctx.q, &mu, g, setup.t_final, setup.nt, false),
        || solve_forward_pt_sources(ctx.q, &nu, g, setup.t_final, setup.nt, false),
    );
    let d = u1?.difference(&u2?)?;
    let target = comb.v.frame(setup.t_star);
    let opts = ControlOptions { epsilon: setup.epsilon, ..ControlOptions::default() };
    let ctrl = ctx.control.solve(&target, &opts)?;
    let transfer = verify_transfer_identity(&d, &target, &ctrl, g)?;
    let r = sigma_minus_term(&d, &comb.v, g)? + sigma_pairing(&d, g, d.n_star, &ctrl.omega)?;
    let mut row = TrialRow {
        trial,
        status: "ok".into(),
        t_c: res.cost,
        j_at_optimum: atom.j,
        r1_minus_r2: r,
        atom_pairing: atom.pairing,
        atom_identity_residual: atom.identity_residual(),
        boundary_misfit: d.sigma_norm(g),
        realized_bound: parabolic_dual_norm(&d, g, &comb.v, &ctrl.omega)?,
        certificate_value: f64::NAN,
        empirical_ratio: 0.0,
        reciprocity_rel: rel(r, atom.pairing),
        transfer_residual: transfer,
        control_rel_terminal: ctrl.relative_terminal(),
        eta1,
        eta2,
        margin: 0.0,
        chain_ok: false,
    };
    chain(&mut row);
    Ok(row)
}

struct InitialCtx<'a> {
    g: &'a Grid2D,
    q: &'a [f64],
    coeffs: CoefficientSet,
    bx: FaddeevBox,
    control: FactoredControl<'a>,
}

fn initial_trial(setup: &StabilitySetup, ctx: &InitialCtx<'_>, trial: usize) -> Result<TrialRow> {
    let g = ctx.g;
    let mut rng = trial_rng(setup.seed, trial as u64);
    let (mu, nu) = match &setup.measures {
        Some(p) => (atomic_from_literals(&p.mu)?, atomic_from_literals(&p.nu)?),
        None => sample_measure_pair(g, &setup.sampling, setup.shared, &mut rng)?,
    };
    let (t_c, phi, psi) = transport(&mu, &nu, &setup.cost)?;
    let part = partition_supports(&mu, &nu, DEFAULT_TOL_MATCH)?;
    let (eta1, eta2, _) = separation_params(g, &part.locations())?;
    let comb = combine_elliptic(&phi, &psi, &part, &ctx.coeffs, g, &ctx.bx, r_mode(setup), &CorrectionOptions::default())?;
    let atom = atom_level_elliptic(&part, &mu, &nu, &phi, &psi, &comb.values);
    let (u1, u2) = rayon::join(
        || solve_forward_initial_data(ctx.q, &mu, g, setup.t_final, setup.nt, false),
        || solve_forward_initial_data(ctx.q, &nu, g, setup.t_final, setup.nt, false),
    );
    let d = u1?.difference(&u2?)?;
    let target = comb.field.re();
    let opts = ControlOptions { epsilon: setup.epsilon, ..ControlOptions::default() };
    let ctrl = ctx.control.solve(&target, &opts)?;
    let r = functional_r_initial(&d, g, &ctrl.omega)?;
    let mut row = TrialRow {
        trial,
        status: "ok".into(),
        t_c,
        j_at_optimum: atom.j,
        r1_minus_r2: r,
        atom_pairing: atom.pairing,
        atom_identity_residual: atom.identity_residual(),
        boundary_misfit: d.sigma_norm(g),
        realized_bound: initial_dual_norm(&d, g, &ctrl.omega),
        certificate_value: f64::NAN,
        empirical_ratio: 0.0,
        reciprocity_rel: rel(r, atom.pairing),
        transfer_residual: f64::NAN,
        control_rel_terminal: ctrl.relative_terminal(),
        eta1,
        eta2,
        margin: 0.0,
        chain_ok: false,
    };
    chain(&mut row);
    Ok(row)
}

fn initial_dual_norm(sol: &ParabolicSolution, g: &Grid2D, omega: &[Vec<f64>]) -> f64 {
    let all = sol.time.trapezoid(0, sol.time.nt);
    let mut acc = 0.0;
    for (m, om) in omega.iter().enumerate() {
        for (bn, w) in g.boundary.iter().zip(om) {
            let c = sol.time.dt * bn.weight * w;
            acc += c * c / (all[m + 1] * bn.weight);
        }
    }
    acc.sqrt()
}

pub fn check_setup(setup: &StabilitySetup) -> Result<()> {
    if setup.trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    setup.cost.validate()?;
    let want = if setup.mode == Mode::Parabolic { 3 } else { 2 };
    if setup.cost.dim() != want {
        return Err(Error::Config(format!("{} mode needs a {want}-d cost", setup.mode.name())));
    }
    if setup.mode != Mode::Elliptic {
        positive("T", setup.t_final)?;
        positive("epsilon", setup.epsilon)?;
    }
    if setup.mode == Mode::Parabolic {
        if !(setup.t_star > 0.0 && setup.t_star < setup.t_final) {
            return Err(Error::Config(format!("need 0 < T* < T, got T* = {}, T = {}", setup.t_star, setup.t_final)));
        }
        let need = (4 * (2 * setup.band + 1)).max(2 * setup.band + 1);
        if setup.event_samples < need {
            return Err(Error::Config(format!("event_samples must be at least {need} for K = {}", setup.band)));
        }
    }
    Ok(())
}

/// Run all trials; per-trial failures are recorded and the run continues.
pub fn stability_experiment(setup: &StabilitySetup, coeffs: &CoefficientSet, g: &Grid2D) -> Result<StabilityReport> {
    check_setup(setup)?;
    g.check_len(coeffs.q.len())?;
    let trials: Vec<usize> = (0..setup.trials).collect();
    let run = |f: &(dyn Fn(usize) -> Result<TrialRow> + Sync)| -> Vec<TrialRow> {
        trials.par_iter().map(|&t| f(t).unwrap_or_else(|e| TrialRow::failed(t, &e))).collect()
    };
    let mut rows = match setup.mode {
        Mode::Elliptic => {
            let ctx = EllipticCtx { g, coeffs, bx: FaddeevBox::new(g) };
            run(&|t| elliptic_trial(setup, &ctx, t))
        }
        Mode::Parabolic => {
            let steps = setup.nt - parabolic_node(setup)?;
            let sys = ControlSystem::new(g, &coeffs.q, setup.t_final - setup.t_star, steps)?;
            let ctx = ParabolicCtx { g, q: &coeffs.q, bx: FaddeevBox::new(g), control: sys.factor(setup.epsilon)? };
            run(&|t| parabolic_trial(setup, &ctx, t))
        }
        Mode::InitialData => {
            let sys = ControlSystem::new(g, &coeffs.q, setup.t_final, setup.nt)?;
            let unit = CoefficientSet::new(g, vec![1.0; g.len()], coeffs.q.clone(), coeffs.sobolev_order)?;
            let ctx = InitialCtx { g, q: &coeffs.q, coeffs: unit, bx: FaddeevBox::new(g), control: sys.factor(setup.epsilon)? };
            run(&|t| initial_trial(setup, &ctx, t))
        }
    };
    let meta = finish_meta(setup, coeffs, g, &mut rows)?;
    let ok: Vec<&TrialRow> = rows.iter().filter(|r| r.status == "ok").collect();
    let summary = Summary {
        max_ratio: ok.iter().map(|r| r.empirical_ratio).fold(0.0, f64::max),
        min_margin: ok.iter().map(|r| r.margin).fold(f64::INFINITY, f64::min),
        failures: rows.iter().filter(|r| !r.chain_ok).count(),
    };
    Ok(StabilityReport { meta, rows, summary })
}

fn parabolic_node(setup: &StabilitySetup) -> Result<usize> {
    crate::parabolic::TimeGrid::new(setup.t_final, setup.nt)?.node_of(setup.t_star)
}

/// Class-level certificate, optional calibration of C₃ and the report metadata.
fn finish_meta(setup: &StabilitySetup, coeffs: &CoefficientSet, g: &Grid2D, rows: &mut [TrialRow]) -> Result<ReportMeta> {
    let s = &setup.sampling;
    let r0 = g.max_radius();
    let span = if setup.mode == Mode::Parabolic { setup.t_star } else { 0.0 };
    let diameter = (g.upper()[0] - g.origin[0]).hypot(g.upper()[1] - g.origin[1]);
    let c_sup = setup.cost.sup_norm(diameter, span);
    let mut constants = setup.constants;
    let r_used = match setup.r {
        Some(r) => r,
        None => f64::NAN,
    };
    match setup.mode {
        Mode::Elliptic | Mode::InitialData => {
            let mut p = EllipticCertificateParams {
                m: s.m,
                eta1: s.eta1_min,
                eta2: s.eta2_min,
                r0,
                kappa_c0: coeffs.kappa_c0,
                c_sup,
                qnorm: coeffs.qtilde_hp,
                c1: constants.c1,
                c3: 1.0,
            };
            if setup.calibrate {
                let base = certificate_elliptic(&p, false)?.value;
                let worst = rows.iter().filter(|r| r.status == "ok").map(|r| r.empirical_ratio).fold(0.0, f64::max);
                if base > 0.0 && base.is_finite() && worst > 0.0 {
                    constants.c3 = worst / base;
                }
            }
            p.c3 = constants.c3;
            let cert = certificate_elliptic(&p, setup.calibrate)?;
            for r in rows.iter_mut() {
                r.certificate_value = cert.value;
            }
            Ok(ReportMeta {
                mode: setup.mode,
                seed: setup.seed,
                trials: setup.trials,
                grid: [g.nx, g.ny],
                constants,
                slack: SLACK,
                r_used,
                r_formula: cert.rtilde,
                eta1_min: s.eta1_min,
                eta2_min: s.eta2_min,
                r0,
                certificate_log10: cert.log10_value,
                certificate_note: cert.note,
            })
        }
        Mode::Parabolic => {
            let cert = certificate_parabolic(&ParabolicCertificateParams {
                n: 2 * s.m,
                k: setup.band,
                eta1: s.eta1_min,
                eta2: s.eta2_min,
                t_star: setup.t_star,
                t_final: setup.t_final,
                qnorm: crate::grid::sobolev_surrogate(g, &coeffs.q, coeffs.sobolev_order),
                area: g.area(),
                c1: constants.c1,
            })?;
            Ok(ReportMeta {
                mode: setup.mode,
                seed: setup.seed,
                trials: setup.trials,
                grid: [g.nx, g.ny],
                constants,
                slack: SLACK,
                r_used,
                r_formula: cert.r_k,
                eta1_min: s.eta1_min,
                eta2_min: s.eta2_min,
                r0,
                certificate_log10: f64::NAN,
                certificate_note: Some(cert.note),
            })
        }
    }
}
