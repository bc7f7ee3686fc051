//! Admissible point-source measures, the band-limited intensity space and
//! support partitioning.

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dist, Grid2D, Point};

pub const MASS_TOL: f64 = 1e-12;
pub const DEFAULT_TOL_MATCH: f64 = 1e-12;
const MAX_REJECTIONS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub loc: Point,
    pub amp: f64,
}

/// Σ_j a_j δ_{s_j} with positive amplitudes summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtomicMeasure {
    pub atoms: Vec<Atom>,
}

impl AtomicMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<AtomicMeasure> {
        if atoms.is_empty() {
            return Err(Error::InadmissibleMeasure("no atoms".into()));
        }
        for a in &atoms {
            if !(a.amp > 0.0) || !a.amp.is_finite() {
                return Err(Error::InadmissibleMeasure(format!("amplitude {} is not positive", a.amp)));
            }
        }
        let total: f64 = atoms.iter().map(|a| a.amp).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InadmissibleMeasure(format!("amplitudes sum to {total}, not 1")));
        }
        check_distinct(&atoms.iter().map(|a| a.loc).collect::<Vec<_>>())?;
        Ok(AtomicMeasure { atoms })
    }

    pub fn locations(&self) -> Vec<Point> {
        self.atoms.iter().map(|a| a.loc).collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.amp).collect()
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Strict interiority and the atom-count limit M.
    pub fn check_in(&self, g: &Grid2D, m: usize) -> Result<()> {
        if self.atoms.len() > m {
            return Err(Error::InadmissibleMeasure(format!("{} atoms exceed M = {m}", self.atoms.len())));
        }
        for a in &self.atoms {
            if g.boundary_distance(a.loc) <= 0.0 {
                return Err(Error::OutsideDomain(a.loc[0], a.loc[1]));
            }
        }
        Ok(())
    }
}

fn check_distinct(locs: &[Point]) -> Result<()> {
    for i in 0..locs.len() {
        for j in i + 1..locs.len() {
            if locs[i] == locs[j] {
                return Err(Error::DuplicatePoint(i, j));
            }
        }
    }
    Ok(())
}

/// g(t) = Σ_{|k|≤K} c_k exp(2πikt/T*) on [0,T*], extended by zero past T*.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandLimitedIntensity {
    pub t_star: f64,
    /// c_{−K} … c_K.
    pub coeffs: Vec<Complex64>,
}

impl BandLimitedIntensity {
    pub fn new(t_star: f64, coeffs: Vec<Complex64>) -> Result<BandLimitedIntensity> {
        if !(t_star > 0.0) {
            return Err(Error::TimeGrid(format!("T* = {t_star} must be positive")));
        }
        if coeffs.len() % 2 != 1 {
            return Err(Error::InadmissibleMeasure("coefficient list must have odd length 2K+1".into()));
        }
        Ok(BandLimitedIntensity { t_star, coeffs })
    }

    pub fn zero(t_star: f64, k: usize) -> BandLimitedIntensity {
        BandLimitedIntensity { t_star, coeffs: vec![Complex64::new(0.0, 0.0); 2 * k + 1] }
    }

    /// The single mode e_k scaled by `c`.
    pub fn mode(t_star: f64, band: usize, k: i64, c: Complex64) -> BandLimitedIntensity {
        let mut g = Self::zero(t_star, band);
        g.coeffs[(k + band as i64) as usize] = c;
        g
    }

    pub fn band(&self) -> usize {
        self.coeffs.len() / 2
    }

    pub fn coeff(&self, k: i64) -> Complex64 {
        let b = self.band() as i64;
        if k.abs() > b {
            Complex64::new(0.0, 0.0)
        } else {
            self.coeffs[(k + b) as usize]
        }
    }

    pub fn eval(&self, t: f64) -> Complex64 {
        if t < 0.0 || t > self.t_star {
            return Complex64::new(0.0, 0.0);
        }
        let b = self.band() as i64;
        let w = 2.0 * std::f64::consts::PI * t / self.t_star;
        self.coeffs
            .iter()
            .enumerate()
            .map(|(i, c)| c * Complex64::from_polar(1.0, w * (i as i64 - b) as f64))
            .sum()
    }

    pub fn eval_real(&self, t: f64) -> f64 {
        self.eval(t).re
    }

    /// ∫₀^{T*} g dt = T* c₀.
    pub fn integral(&self) -> f64 {
        self.t_star * self.coeff(0).re
    }

    pub fn is_conjugate_symmetric(&self, tol: f64) -> bool {
        let b = self.band() as i64;
        (0..=b).all(|k| (self.coeff(-k) - self.coeff(k).conj()).norm() <= tol)
    }

    /// Sampled nonnegativity on a 16(2K+1)-point uniform grid of [0,T*].
    pub fn check_nonnegative(&self) -> Result<()> {
        let n = 16 * self.coeffs.len();
        for m in 0..=n {
            let t = self.t_star * m as f64 / n as f64;
            let v = self.eval(t);
            if v.re < -1e-10 {
                return Err(Error::InadmissibleMeasure(format!("intensity {:.3e} < 0 at t = {t}", v.re)));
            }
        }
        Ok(())
    }
}

/// Σ_j g_j(t) δ_{s_j} with band-limited nonnegative intensities of total mass one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeAtomicMeasure {
    pub atoms: Vec<(Point, BandLimitedIntensity)>,
}

impl SpaceTimeAtomicMeasure {
    pub fn new(atoms: Vec<(Point, BandLimitedIntensity)>) -> Result<SpaceTimeAtomicMeasure> {
        if atoms.is_empty() {
            return Err(Error::InadmissibleMeasure("no atoms".into()));
        }
        let t_star = atoms[0].1.t_star;
        for (_, g) in &atoms {
            if g.t_star != t_star {
                return Err(Error::TimeGrid("atoms disagree on T*".into()));
            }
            if !g.is_conjugate_symmetric(1e-14) {
                return Err(Error::InadmissibleMeasure("intensity is not real-valued".into()));
            }
            g.check_nonnegative()?;
        }
        let total: f64 = atoms.iter().map(|(_, g)| g.integral()).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InadmissibleMeasure(format!("total intensity {total}, not 1")));
        }
        check_distinct(&atoms.iter().map(|a| a.0).collect::<Vec<_>>())?;
        Ok(SpaceTimeAtomicMeasure { atoms })
    }

    pub fn locations(&self) -> Vec<Point> {
        self.atoms.iter().map(|a| a.0).collect()
    }

    pub fn t_star(&self) -> f64 {
        self.atoms[0].1.t_star
    }

    pub fn band(&self) -> usize {
        self.atoms.iter().map(|a| a.1.band()).max().unwrap_or(0)
    }
}

/// Orthogonal projection onto G_K of uniform periodic samples g(mT*/L), m = 0..L−1.
/// Coefficients are the rectangle-rule (periodic trapezoid) Fourier integrals.
pub fn project_gk(samples: &[Complex64], k: usize, t_star: f64) -> Result<BandLimitedIntensity> {
    let needed = 4 * (2 * k + 1);
    if samples.len() < needed {
        return Err(Error::Aliasing { k, needed, got: samples.len() });
    }
    let l = samples.len() as f64;
    let coeffs = (-(k as i64)..=k as i64)
        .map(|kk| {
            samples
                .iter()
                .enumerate()
                .map(|(m, g)| g * Complex64::from_polar(1.0, -2.0 * std::f64::consts::PI * (kk * m as i64) as f64 / l))
                .sum::<Complex64>()
                / l
        })
        .collect();
    BandLimitedIntensity::new(t_star, coeffs)
}

/// Samples of g on the periodic grid used by [`project_gk`].
pub fn sample_periodic(g: &BandLimitedIntensity, l: usize) -> Vec<Complex64> {
    (0..l).map(|m| g.eval(g.t_star * m as f64 / l as f64)).collect()
}

/// A location of supp μ ∪ supp ν with its indices in each measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportPoint {
    pub loc: Point,
    pub mu: Option<usize>,
    pub nu: Option<usize>,
}

/// S₁ = N∖N′, S₂ = N′∖N, S₃/S₄ split of N∩N′; entries index `points`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SupportPartition {
    pub points: Vec<SupportPoint>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub s3: Vec<usize>,
    pub s4: Vec<usize>,
}

impl SupportPartition {
    pub fn locations(&self) -> Vec<Point> {
        self.points.iter().map(|p| p.loc).collect()
    }
}

/// Identify locations of the two supports within `tol`.
pub fn match_supports(mu: &[Point], nu: &[Point], tol: f64) -> Result<Vec<SupportPoint>> {
    let mut pts: Vec<SupportPoint> = mu.iter().enumerate().map(|(i, &loc)| SupportPoint { loc, mu: Some(i), nu: None }).collect();
    for (j, &loc) in nu.iter().enumerate() {
        match pts.iter().position(|p| p.nu.is_none() && dist(p.loc, loc) <= tol) {
            Some(i) => pts[i].nu = Some(j),
            None => pts.push(SupportPoint { loc, mu: None, nu: Some(j) }),
        }
    }
    let mut eta1 = f64::INFINITY;
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            eta1 = eta1.min(dist(pts[i].loc, pts[j].loc));
        }
    }
    if tol > eta1 / 2.0 {
        return Err(Error::AmbiguousMatching { tol, half_sep: eta1 / 2.0 });
    }
    Ok(pts)
}

/// Elliptic partition: S₃ = {s ∈ N∩N′ : a_s > b_s}, S₄ the rest of N∩N′.
pub fn partition_supports(mu: &AtomicMeasure, nu: &AtomicMeasure, tol: f64) -> Result<SupportPartition> {
    let points = match_supports(&mu.locations(), &nu.locations(), tol)?;
    let mut part = SupportPartition { points, ..Default::default() };
    for (i, p) in part.points.iter().enumerate() {
        match (p.mu, p.nu) {
            (Some(_), None) => part.s1.push(i),
            (None, Some(_)) => part.s2.push(i),
            (Some(a), Some(b)) => {
                if mu.atoms[a].amp > nu.atoms[b].amp {
                    part.s3.push(i)
                } else {
                    part.s4.push(i)
                }
            }
            (None, None) => unreachable!(),
        }
    }
    Ok(part)
}

/// Parabolic partition: S₃ = N∩N′ undivided, S₄ empty.
pub fn partition_supports_parabolic(
    mu: &SpaceTimeAtomicMeasure,
    nu: &SpaceTimeAtomicMeasure,
    tol: f64,
) -> Result<SupportPartition> {
    let points = match_supports(&mu.locations(), &nu.locations(), tol)?;
    let mut part = SupportPartition { points, ..Default::default() };
    for (i, p) in part.points.iter().enumerate() {
        match (p.mu, p.nu) {
            (Some(_), None) => part.s1.push(i),
            (None, Some(_)) => part.s2.push(i),
            _ => part.s3.push(i),
        }
    }
    Ok(part)
}

/// Constraints for random point sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    #[serde(rename = "M")]
    pub m: usize,
    pub eta1_min: f64,
    pub eta2_min: f64,
    pub margin: f64,
}

/// Deterministic per-trial generator derived from a base seed.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Rejection-sample `n` points with pairwise distance ≥ η₁_min, |s| ≥ η₂_min
/// and boundary distance ≥ margin.
pub fn sample_points(g: &Grid2D, n: usize, spec: &SamplingSpec, rng: &mut impl Rng) -> Result<Vec<Point>> {
    let lo = [g.origin[0] + spec.margin, g.origin[1] + spec.margin];
    let hi = [g.upper()[0] - spec.margin, g.upper()[1] - spec.margin];
    if !(hi[0] > lo[0] && hi[1] > lo[1]) {
        return Err(Error::InfeasibleSpec(0));
    }
    let mut rejections = 0usize;
    let mut pts: Vec<Point> = Vec::with_capacity(n);
    let mut stuck = 0usize;
    while pts.len() < n {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
        let ok = p[0].hypot(p[1]) >= spec.eta2_min && pts.iter().all(|q| dist(*q, p) >= spec.eta1_min);
        if ok {
            pts.push(p);
            stuck = 0;
            continue;
        }
        rejections += 1;
        stuck += 1;
        if rejections > MAX_REJECTIONS {
            return Err(Error::InfeasibleSpec(rejections));
        }
        // a partial configuration may admit no completion; restart it
        if stuck > 1000 {
            pts.clear();
            stuck = 0;
        }
    }
    Ok(pts)
}

/// Positive amplitudes summing to one.
pub fn sample_amplitudes(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut amps: Vec<f64> = raw.iter().map(|v| v / s).collect();
    // absorb rounding in the largest entry so the sum is 1 to the last bit
    let rest: f64 = amps.iter().sum::<f64>() - 1.0;
    if let Some(k) = (0..n).max_by(|&a, &b| amps[a].total_cmp(&amps[b])) {
        amps[k] -= rest;
    }
    amps
}

pub fn sample_random_measure(g: &Grid2D, spec: &SamplingSpec, rng: &mut impl Rng) -> Result<AtomicMeasure> {
    let pts = sample_points(g, spec.m, spec, rng)?;
    let amps = sample_amplitudes(spec.m, rng);
    AtomicMeasure::new(pts.into_iter().zip(amps).map(|(loc, amp)| Atom { loc, amp }).collect())
}

/// A pair (μ, ν) of M-atom sets drawn from one separated point set; `shared`
/// atoms of μ reappear in ν (with independent amplitudes).
pub fn sample_point_pair(
    g: &Grid2D,
    spec: &SamplingSpec,
    shared: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Point>, Vec<Point>)> {
    let shared = shared.min(spec.m);
    let total = 2 * spec.m - shared;
    let pts = sample_points(g, total, spec, rng)?;
    let mu = pts[..spec.m].to_vec();
    let mut nu = pts[..shared].to_vec();
    nu.extend_from_slice(&pts[spec.m..]);
    Ok((mu, nu))
}

pub fn sample_measure_pair(
    g: &Grid2D,
    spec: &SamplingSpec,
    shared: usize,
    rng: &mut impl Rng,
) -> Result<(AtomicMeasure, AtomicMeasure)> {
    let (pm, pn) = sample_point_pair(g, spec, shared, rng)?;
    let am = sample_amplitudes(pm.len(), rng);
    let an = sample_amplitudes(pn.len(), rng);
    let mu = AtomicMeasure::new(pm.into_iter().zip(am).map(|(loc, amp)| Atom { loc, amp }).collect())?;
    let nu = AtomicMeasure::new(pn.into_iter().zip(an).map(|(loc, amp)| Atom { loc, amp }).collect())?;
    Ok((mu, nu))
}

/// Nonnegative real intensity in G_K with ∫₀^{T*} g = mass:
/// g = (mass/T*)(1 + Σ_{k=1}^{K} 2 Re(α_k e_k)) with Σ 2|α_k| ≤ 0.9.
pub fn sample_intensity(t_star: f64, k: usize, mass: f64, rng: &mut impl Rng) -> BandLimitedIntensity {
    let mut g = BandLimitedIntensity::zero(t_star, k);
    let c0 = mass / t_star;
    g.coeffs[k] = Complex64::new(c0, 0.0);
    if k > 0 {
        let w: Vec<f64> = (0..k).map(|_| rng.gen_range(0.1..1.0)).collect();
        let budget = rng.gen_range(0.3..0.9) / 2.0;
        let ws: f64 = w.iter().sum();
        for (i, wi) in w.iter().enumerate() {
            let kk = i + 1;
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let a = Complex64::from_polar(c0 * budget * wi / ws, phase);
            g.coeffs[k + kk] = a;
            g.coeffs[k - kk] = a.conj();
        }
    }
    g
}

pub fn sample_spacetime_pair(
    g: &Grid2D,
    spec: &SamplingSpec,
    shared: usize,
    t_star: f64,
    k: usize,
    rng: &mut impl Rng,
) -> Result<(SpaceTimeAtomicMeasure, SpaceTimeAtomicMeasure)> {
    let (pm, pn) = sample_point_pair(g, spec, shared, rng)?;
    let mu = spacetime_from_points(pm, t_star, k, rng)?;
    let nu = spacetime_from_points(pn, t_star, k, rng)?;
    Ok((mu, nu))
}

fn spacetime_from_points(pts: Vec<Point>, t_star: f64, k: usize, rng: &mut impl Rng) -> Result<SpaceTimeAtomicMeasure> {
    let masses = sample_amplitudes(pts.len(), rng);
    let atoms = pts.into_iter().zip(masses).map(|(p, m)| (p, sample_intensity(t_star, k, m, rng))).collect();
    SpaceTimeAtomicMeasure::new(atoms)
}

/// One atom as written in a config file: either a scalar amplitude or the
/// Fourier coefficients (k = −K..K, as [re, im] pairs) of its intensity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureLiteral {
    pub x1: f64,
    pub x2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitude: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fourier: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurePair {
    pub mu: Vec<MeasureLiteral>,
    pub nu: Vec<MeasureLiteral>,
}

pub fn atomic_from_literals(lits: &[MeasureLiteral]) -> Result<AtomicMeasure> {
    let atoms = lits
        .iter()
        .map(|l| match (l.amplitude, &l.fourier) {
            (Some(amp), None) => Ok(Atom { loc: [l.x1, l.x2], amp }),
            (None, Some(_)) => Err(Error::InadmissibleMeasure(format!(
                "atom at ({}, {}) has Fourier data in a static measure",
                l.x1, l.x2
            ))),
            _ => Err(Error::InadmissibleMeasure(format!(
                "atom at ({}, {}) needs exactly one of amplitude, fourier",
                l.x1, l.x2
            ))),
        })
        .collect::<Result<Vec<_>>>()?;
    AtomicMeasure::new(atoms)
}

/// A scalar amplitude a becomes the constant intensity a/T*.
pub fn spacetime_from_literals(lits: &[MeasureLiteral], t_star: f64, k: usize) -> Result<SpaceTimeAtomicMeasure> {
    let atoms = lits
        .iter()
        .map(|l| {
            let g = match (l.amplitude, &l.fourier) {
                (Some(amp), None) => BandLimitedIntensity::mode(t_star, k, 0, Complex64::new(amp / t_star, 0.0)),
                (None, Some(c)) => {
                    if c.len() != 2 * k + 1 {
                        return Err(Error::InadmissibleMeasure(format!(
                            "atom at ({}, {}) has {} Fourier coefficients, band K = {k} needs {}",
                            l.x1,
                            l.x2,
                            c.len(),
                            2 * k + 1
                        )));
                    }
                    BandLimitedIntensity::new(t_star, c.iter().map(|p| Complex64::new(p[0], p[1])).collect())?
                }
                _ => {
                    return Err(Error::InadmissibleMeasure(format!(
                        "atom at ({}, {}) needs exactly one of amplitude, fourier",
                        l.x1, l.x2
                    )))
                }
            };
            Ok(([l.x1, l.x2], g))
        })
        .collect::<Result<Vec<_>>>()?;
    SpaceTimeAtomicMeasure::new(atoms)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    fn unit() -> Grid2D {
        Grid2D::new(33, 33, [[0.0, 0.0], [1.0, 1.0]]).unwrap()
    }

    fn atom(x: f64, y: f64, amp: f64) -> Atom {
        Atom { loc: [x, y], amp }
    }

    #[test]
    fn measure_validation() {
        assert!(AtomicMeasure::new(vec![atom(0.2, 0.2, 0.5), atom(0.4, 0.2, 0.5)]).is_ok());
        assert!(AtomicMeasure::new(vec![atom(0.2, 0.2, 0.6), atom(0.4, 0.2, 0.5)]).is_err());
        assert!(AtomicMeasure::new(vec![atom(0.2, 0.2, 1.0), atom(0.4, 0.2, 0.0)]).is_err());
        assert!(matches!(
            AtomicMeasure::new(vec![atom(0.2, 0.2, 0.5), atom(0.2, 0.2, 0.5)]),
            Err(Error::DuplicatePoint(0, 1))
        ));
        let m = AtomicMeasure::new(vec![atom(0.0, 0.5, 1.0)]).unwrap();
        assert!(m.check_in(&unit(), 3).is_err());
    }

    #[test]
    fn projection_examples() {
        let t = 2.0;
        let l = 40;
        let e1 = sample_periodic(&BandLimitedIntensity::mode(t, 3, 1, c(1.0)), l);
        let p = project_gk(&e1, 2, t).unwrap();
        for k in -2..=2i64 {
            let want = if k == 1 { 1.0 } else { 0.0 };
            assert!((p.coeff(k) - c(want)).norm() < 1e-14);
        }
        let e3 = sample_periodic(&BandLimitedIntensity::mode(t, 3, 3, c(1.0)), l);
        let p = project_gk(&e3, 2, t).unwrap();
        assert!(p.coeffs.iter().all(|v| v.norm() < 1e-14));

        let s: Vec<Complex64> = (0..l)
            .map(|m| c(1.0 + (2.0 * std::f64::consts::PI * 3.0 * m as f64 / l as f64).cos()))
            .collect();
        let p = project_gk(&s, 2, t).unwrap();
        assert!((p.coeff(0) - c(1.0)).norm() < 1e-14);
        assert!((1..=2).all(|k| p.coeff(k).norm() < 1e-14 && p.coeff(-k).norm() < 1e-14));
        assert!(matches!(project_gk(&s[..19], 2, t), Err(Error::Aliasing { .. })));
    }

    #[test]
    fn intensity_integral_and_extension() {
        let mut rng = trial_rng(1, 0);
        let g = sample_intensity(1.5, 2, 0.4, &mut rng);
        assert!((g.integral() - 0.4).abs() < 1e-15);
        assert!(g.check_nonnegative().is_ok());
        assert!(g.is_conjugate_symmetric(0.0));
        assert_eq!(g.eval(1.6), c(0.0));
        // rectangle rule is exact for trigonometric polynomials of degree < L
        let n = 64;
        let q: f64 = (0..n).map(|m| g.eval_real(1.5 * m as f64 / n as f64)).sum::<f64>() * 1.5 / n as f64;
        assert!((q - 0.4).abs() < 1e-14);
    }

    #[test]
    fn partition_examples() {
        let a = [0.2, 0.2];
        let b = [0.5, 0.5];
        let cpt = [0.8, 0.2];
        let mu = AtomicMeasure::new(vec![Atom { loc: a, amp: 0.5 }, Atom { loc: b, amp: 0.5 }]).unwrap();
        let nu = AtomicMeasure::new(vec![Atom { loc: b, amp: 0.3 }, Atom { loc: cpt, amp: 0.7 }]).unwrap();
        let p = partition_supports(&mu, &nu, DEFAULT_TOL_MATCH).unwrap();
        let locs = |ix: &[usize]| ix.iter().map(|&i| p.points[i].loc).collect::<Vec<_>>();
        assert_eq!(locs(&p.s1), vec![a]);
        assert_eq!(locs(&p.s2), vec![cpt]);
        assert_eq!(locs(&p.s3), vec![b]);
        assert!(p.s4.is_empty());

        let same = partition_supports(&mu, &mu, DEFAULT_TOL_MATCH).unwrap();
        assert!(same.s1.is_empty() && same.s2.is_empty() && same.s3.is_empty());
        assert_eq!(same.s4.len(), 2);

        let far = AtomicMeasure::new(vec![Atom { loc: cpt, amp: 1.0 }]).unwrap();
        let d = partition_supports(&mu, &far, DEFAULT_TOL_MATCH).unwrap();
        assert_eq!((d.s1.len(), d.s2.len(), d.s3.len(), d.s4.len()), (2, 1, 0, 0));

        assert!(matches!(partition_supports(&mu, &nu, 0.3), Err(Error::AmbiguousMatching { .. })));
    }

    #[test]
    fn sampling_is_deterministic_and_feasible() {
        let g = unit();
        let spec = SamplingSpec { m: 1, eta1_min: 0.1, eta2_min: 0.1, margin: 0.1 };
        let m1 = sample_random_measure(&g, &spec, &mut trial_rng(7, 0)).unwrap();
        assert_eq!(m1.atoms.len(), 1);
        assert_eq!(m1.atoms[0].amp, 1.0);
        let spec3 = SamplingSpec { m: 3, eta1_min: 0.25, eta2_min: 0.2, margin: 0.1 };
        let a = sample_random_measure(&g, &spec3, &mut trial_rng(7, 3)).unwrap();
        let b = sample_random_measure(&g, &spec3, &mut trial_rng(7, 3)).unwrap();
        assert_eq!(a, b);
        assert!((a.amplitudes().iter().sum::<f64>() - 1.0).abs() < 1e-15);

        let bad = SamplingSpec { m: 3, eta1_min: 0.9, eta2_min: 0.0, margin: 0.1 };
        assert!(matches!(sample_random_measure(&g, &bad, &mut trial_rng(1, 0)), Err(Error::InfeasibleSpec(_))));
    }

    #[test]
    fn pair_sampling_shares_exact_coordinates() {
        let g = unit();
        let spec = SamplingSpec { m: 3, eta1_min: 0.2, eta2_min: 0.2, margin: 0.08 };
        let (mu, nu) = sample_measure_pair(&g, &spec, 1, &mut trial_rng(4, 2)).unwrap();
        let p = partition_supports(&mu, &nu, DEFAULT_TOL_MATCH).unwrap();
        assert_eq!(p.points.len(), 5);
        assert_eq!(p.s3.len() + p.s4.len(), 1);

        let (a, b) = sample_spacetime_pair(&g, &spec, 2, 1.0, 2, &mut trial_rng(4, 2)).unwrap();
        let pp = partition_supports_parabolic(&a, &b, DEFAULT_TOL_MATCH).unwrap();
        assert_eq!(pp.s3.len(), 2);
        assert!(pp.s4.is_empty());
    }
}
