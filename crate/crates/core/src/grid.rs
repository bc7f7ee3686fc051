//! Rectangular grids, boundary geometry and nodal fields.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expr::Expr;

pub type Point = [f64; 2];

/// Boundary node with its outward unit normal and arc-length weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryNode {
    pub index: usize,
    pub i: usize,
    pub j: usize,
    pub normal: [f64; 2],
    pub weight: f64,
    /// Arc-length coordinate measured counterclockwise from the origin corner.
    pub arc: f64,
}

/// One piece of the flux quadrature: a derivative along an axis, signed by the
/// outward direction, weighted by the length of boundary it represents.
/// Corners contribute one piece per adjacent edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxPiece {
    pub bnode: usize,
    pub axis: usize,
    pub sign: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub origin: Point,
    pub extent: Point,
    pub hx: f64,
    pub hy: f64,
    pub boundary: Vec<BoundaryNode>,
    flux: Vec<FluxPiece>,
}

impl Grid2D {
    pub fn new(nx: usize, ny: usize, rect: [Point; 2]) -> Result<Grid2D> {
        if nx < 8 || ny < 8 {
            return Err(Error::InvalidGeometry(format!("need at least 8 nodes per axis, got {nx}x{ny}")));
        }
        let [lo, hi] = rect;
        let extent = [hi[0] - lo[0], hi[1] - lo[1]];
        if !(extent[0] > 0.0 && extent[1] > 0.0) || !extent.iter().all(|e| e.is_finite()) {
            return Err(Error::InvalidGeometry(format!("degenerate rectangle {rect:?}")));
        }
        let hx = extent[0] / (nx - 1) as f64;
        let hy = extent[1] / (ny - 1) as f64;
        let mut g = Grid2D { nx, ny, origin: lo, extent, hx, hy, boundary: Vec::new(), flux: Vec::new() };
        g.build_boundary();
        Ok(g)
    }

    fn build_boundary(&mut self) {
        let (nx, ny, hx, hy) = (self.nx, self.ny, self.hx, self.hy);
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let mut walk: Vec<(usize, usize)> = Vec::with_capacity(2 * (nx + ny) - 4);
        walk.extend((0..nx).map(|i| (i, 0)));
        walk.extend((1..ny).map(|j| (nx - 1, j)));
        walk.extend((0..nx - 1).rev().map(|i| (i, ny - 1)));
        walk.extend((1..ny - 1).rev().map(|j| (0, j)));

        let mut arc = 0.0;
        let mut prev: Option<(usize, usize)> = None;
        for &(i, j) in &walk {
            if let Some((pi, pj)) = prev {
                arc += (i as f64 - pi as f64).abs() * hx + (j as f64 - pj as f64).abs() * hy;
            }
            prev = Some((i, j));
            let sx = if i == 0 { -1.0 } else if i == nx - 1 { 1.0 } else { 0.0 };
            let sy = if j == 0 { -1.0 } else if j == ny - 1 { 1.0 } else { 0.0 };
            let corner = sx != 0.0 && sy != 0.0;
            let (normal, weight) = if corner {
                ([sx * d, sy * d], 0.5 * (hx + hy))
            } else if sx != 0.0 {
                ([sx, 0.0], hy)
            } else {
                ([0.0, sy], hx)
            };
            let b = self.boundary.len();
            if corner {
                self.flux.push(FluxPiece { bnode: b, axis: 0, sign: sx, weight: 0.5 * hy });
                self.flux.push(FluxPiece { bnode: b, axis: 1, sign: sy, weight: 0.5 * hx });
            } else if sx != 0.0 {
                self.flux.push(FluxPiece { bnode: b, axis: 0, sign: sx, weight: hy });
            } else {
                self.flux.push(FluxPiece { bnode: b, axis: 1, sign: sy, weight: hx });
            }
            self.boundary.push(BoundaryNode { index: self.idx(i, j), i, j, normal, weight, arc });
        }
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i + self.nx * j
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.origin[0] + i as f64 * self.hx
    }

    #[inline]
    pub fn y(&self, j: usize) -> f64 {
        self.origin[1] + j as f64 * self.hy
    }

    #[inline]
    pub fn coords(&self, k: usize) -> Point {
        [self.x(k % self.nx), self.y(k / self.nx)]
    }

    pub fn upper(&self) -> Point {
        [self.origin[0] + self.extent[0], self.origin[1] + self.extent[1]]
    }

    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }

    pub fn perimeter(&self) -> f64 {
        2.0 * (self.extent[0] + self.extent[1])
    }

    pub fn flux_pieces(&self) -> &[FluxPiece] {
        &self.flux
    }

    /// Tensor-trapezoid (lumped) area weight of node `k`.
    pub fn area_weight(&self, k: usize) -> f64 {
        let (i, j) = (k % self.nx, k / self.nx);
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
        wx * wy * self.hx * self.hy
    }

    pub fn area_weights(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.area_weight(k)).collect()
    }

    pub fn contains(&self, p: Point) -> bool {
        let hi = self.upper();
        p[0] >= self.origin[0] && p[0] <= hi[0] && p[1] >= self.origin[1] && p[1] <= hi[1]
    }

    /// Distance from `p` to the boundary (negative outside).
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let hi = self.upper();
        (p[0] - self.origin[0]).min(hi[0] - p[0]).min(p[1] - self.origin[1]).min(hi[1] - p[1])
    }

    /// Cell containing `p` and the bilinear weights of its four corners,
    /// ordered (i,j), (i+1,j), (i,j+1), (i+1,j+1).
    pub fn hat_weights(&self, p: Point) -> Result<[(usize, f64); 4]> {
        if !self.contains(p) {
            return Err(Error::OutsideDomain(p[0], p[1]));
        }
        let fx = (p[0] - self.origin[0]) / self.hx;
        let fy = (p[1] - self.origin[1]) / self.hy;
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - i as f64;
        let ty = fy - j as f64;
        Ok([
            (self.idx(i, j), (1.0 - tx) * (1.0 - ty)),
            (self.idx(i + 1, j), tx * (1.0 - ty)),
            (self.idx(i, j + 1), (1.0 - tx) * ty),
            (self.idx(i + 1, j + 1), tx * ty),
        ])
    }

    pub fn interpolate(&self, f: &ScalarField, p: Point) -> Result<Complex64> {
        self.check(f)?;
        Ok(self.hat_weights(p)?.iter().map(|&(k, w)| f.values[k] * w).sum())
    }

    pub fn interpolate_real(&self, f: &[f64], p: Point) -> Result<f64> {
        self.check_len(f.len())?;
        Ok(self.hat_weights(p)?.iter().map(|&(k, w)| f[k] * w).sum())
    }

    pub fn check(&self, f: &ScalarField) -> Result<()> {
        self.check_len(f.values.len())
    }

    pub fn check_len(&self, n: usize) -> Result<()> {
        if n != self.len() {
            return Err(Error::ShapeMismatch { expected: self.len(), got: n });
        }
        Ok(())
    }

    /// Σ g_i · weight_i over the boundary nodes.
    pub fn boundary_integral(&self, g: &[Complex64]) -> Result<Complex64> {
        if g.len() != self.boundary.len() {
            return Err(Error::ShapeMismatch { expected: self.boundary.len(), got: g.len() });
        }
        Ok(self.boundary.iter().zip(g).map(|(b, v)| v * b.weight).sum())
    }

    pub fn boundary_integral_real(&self, g: &[f64]) -> Result<f64> {
        if g.len() != self.boundary.len() {
            return Err(Error::ShapeMismatch { expected: self.boundary.len(), got: g.len() });
        }
        Ok(self.boundary.iter().zip(g).map(|(b, v)| v * b.weight).sum())
    }

    /// L²(∂Ω) norm of a boundary trace.
    pub fn boundary_norm(&self, g: &[Complex64]) -> f64 {
        self.boundary.iter().zip(g).map(|(b, v)| v.norm_sqr() * b.weight).sum::<f64>().sqrt()
    }

    pub fn boundary_trace(&self, f: &ScalarField) -> Vec<Complex64> {
        self.boundary.iter().map(|b| f.values[b.index]).collect()
    }

    pub fn boundary_trace_real(&self, f: &[f64]) -> Vec<f64> {
        self.boundary.iter().map(|b| f[b.index]).collect()
    }

    /// One-sided second-order derivative along `axis` at boundary node `b`,
    /// pointing outward with sign `sign`.
    fn outward_derivative<T>(&self, vals: &[T], b: &BoundaryNode, axis: usize, sign: f64) -> T
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Sub<Output = T> + std::ops::Add<Output = T>,
    {
        let (step, h) = if axis == 0 { (1isize, self.hx) } else { (self.nx as isize, self.hy) };
        // inward neighbours sit at -sign * step
        let s = if sign > 0.0 { -step } else { step };
        let k0 = b.index as isize;
        let f0 = vals[k0 as usize];
        let f1 = vals[(k0 + s) as usize];
        let f2 = vals[(k0 + 2 * s) as usize];
        (f0 * 3.0 - f1 * 4.0 + f2) * (1.0 / (2.0 * h))
    }

    /// ∇f·n at each boundary node, one-sided second order.
    pub fn normal_derivative(&self, f: &ScalarField) -> Result<Vec<Complex64>> {
        self.check(f)?;
        Ok(self
            .boundary
            .iter()
            .map(|b| {
                let mut d = Complex64::new(0.0, 0.0);
                for axis in 0..2 {
                    let n = b.normal[axis];
                    if n != 0.0 {
                        d += self.outward_derivative(&f.values, b, axis, n.signum()) * n.abs();
                    }
                }
                d
            })
            .collect())
    }

    /// ∫_{∂Ω} coef · ∂_n f · g ds with corners split between their two edges.
    pub fn flux_integral(&self, f: &[Complex64], coef: &[f64], g: &[Complex64]) -> Result<Complex64> {
        self.check_len(f.len())?;
        self.check_len(coef.len())?;
        if g.len() != self.boundary.len() {
            return Err(Error::ShapeMismatch { expected: self.boundary.len(), got: g.len() });
        }
        let mut acc = Complex64::new(0.0, 0.0);
        for p in &self.flux {
            let b = &self.boundary[p.bnode];
            let d = self.outward_derivative(f, b, p.axis, p.sign);
            acc += d * g[p.bnode] * (coef[b.index] * p.weight);
        }
        Ok(acc)
    }

    /// Weights d with Σ_b d_b g_b = `flux_integral(f, coef, g)` for every trace g.
    pub fn flux_weights(&self, f: &[Complex64], coef: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(f.len())?;
        self.check_len(coef.len())?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.boundary.len()];
        for p in &self.flux {
            let b = &self.boundary[p.bnode];
            out[p.bnode] += self.outward_derivative(f, b, p.axis, p.sign) * (coef[b.index] * p.weight);
        }
        Ok(out)
    }

    /// (Σ_pieces w |coef ∂ f|²)^{1/2}, the L²(∂Ω) norm matching `flux_integral`.
    pub fn flux_norm(&self, f: &[Complex64], coef: &[f64]) -> Result<f64> {
        self.check_len(f.len())?;
        self.check_len(coef.len())?;
        let mut acc = 0.0;
        for p in &self.flux {
            let b = &self.boundary[p.bnode];
            let d = self.outward_derivative(f, b, p.axis, p.sign) * coef[b.index];
            acc += d.norm_sqr() * p.weight;
        }
        Ok(acc.sqrt())
    }

    /// Flux density per boundary node (corner pieces summed), for export.
    pub fn flux_trace(&self, f: &[Complex64], coef: &[f64]) -> Result<Vec<Complex64>> {
        self.check_len(f.len())?;
        let mut out = vec![Complex64::new(0.0, 0.0); self.boundary.len()];
        for p in &self.flux {
            let b = &self.boundary[p.bnode];
            let d = self.outward_derivative(f, b, p.axis, p.sign) * coef[b.index];
            out[p.bnode] += d * (p.weight / b.weight);
        }
        Ok(out)
    }

    /// Five-point Laplacian; boundary rows use one-sided second differences.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let (nx, ny) = (self.nx, self.ny);
        let second = |vals: &dyn Fn(usize) -> f64, n: usize, m: usize, h: f64| -> f64 {
            if m == 0 {
                (2.0 * vals(0) - 5.0 * vals(1) + 4.0 * vals(2) - vals(3)) / (h * h)
            } else if m == n - 1 {
                (2.0 * vals(n - 1) - 5.0 * vals(n - 2) + 4.0 * vals(n - 3) - vals(n - 4)) / (h * h)
            } else {
                (vals(m - 1) - 2.0 * vals(m) + vals(m + 1)) / (h * h)
            }
        };
        let mut out = vec![0.0; self.len()];
        for j in 0..ny {
            for i in 0..nx {
                let dxx = second(&|ii| f[self.idx(ii, j)], nx, i, self.hx);
                let dyy = second(&|jj| f[self.idx(i, jj)], ny, j, self.hy);
                out[self.idx(i, j)] = dxx + dyy;
            }
        }
        out
    }

    /// Area-weighted L²(Ω) norm.
    pub fn l2_norm(&self, f: &[Complex64]) -> f64 {
        f.iter().enumerate().map(|(k, v)| v.norm_sqr() * self.area_weight(k)).sum::<f64>().sqrt()
    }

    /// Area-weighted inner product ∫ f g (bilinear, no conjugation).
    pub fn inner(&self, f: &[Complex64], g: &[Complex64]) -> Complex64 {
        f.iter().zip(g).enumerate().map(|(k, (a, b))| a * b * self.area_weight(k)).sum()
    }

    /// Discrete H¹ norm: L² of values plus forward-difference gradients.
    pub fn h1_norm(&self, f: &[Complex64]) -> f64 {
        let (nx, ny) = (self.nx, self.ny);
        let mut grad = 0.0;
        for j in 0..ny {
            for i in 0..nx - 1 {
                let d = (f[self.idx(i + 1, j)] - f[self.idx(i, j)]) / self.hx;
                let w = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                grad += d.norm_sqr() * w * self.hx * self.hy;
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                let d = (f[self.idx(i, j + 1)] - f[self.idx(i, j)]) / self.hy;
                let w = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                grad += d.norm_sqr() * w * self.hx * self.hy;
            }
        }
        let l2 = self.l2_norm(f);
        (l2 * l2 + grad).sqrt()
    }

    /// Sample a closed-form expression at every node.
    pub fn sample(&self, e: &Expr) -> Vec<f64> {
        (0..self.len())
            .map(|k| {
                let p = self.coords(k);
                e.eval(p[0], p[1])
            })
            .collect()
    }

    /// max over the closed rectangle of |x|.
    pub fn max_radius(&self) -> f64 {
        let hi = self.upper();
        let fx = self.origin[0].abs().max(hi[0].abs());
        let fy = self.origin[1].abs().max(hi[1].abs());
        fx.hypot(fy)
    }
}

/// Complex nodal samples on a grid (real fields carry zero imaginary part).
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<Complex64>,
}

impl ScalarField {
    pub fn zeros(g: &Grid2D) -> ScalarField {
        ScalarField { nx: g.nx, ny: g.ny, values: vec![Complex64::new(0.0, 0.0); g.len()] }
    }

    pub fn from_real(g: &Grid2D, v: &[f64]) -> Result<ScalarField> {
        g.check_len(v.len())?;
        Ok(ScalarField { nx: g.nx, ny: g.ny, values: v.iter().map(|&x| Complex64::new(x, 0.0)).collect() })
    }

    pub fn from_fn(g: &Grid2D, f: impl Fn(Point) -> Complex64) -> ScalarField {
        ScalarField { nx: g.nx, ny: g.ny, values: (0..g.len()).map(|k| f(g.coords(k))).collect() }
    }

    pub fn re(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// κ, q and the derived potential q̃ = q/κ + Δ√κ/√κ on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSet {
    pub kappa: Vec<f64>,
    pub q: Vec<f64>,
    pub qtilde: Vec<f64>,
    pub kappa_c0: f64,
    pub qtilde_hp: f64,
    pub sobolev_order: usize,
}

impl CoefficientSet {
    pub fn new(g: &Grid2D, kappa: Vec<f64>, q: Vec<f64>, sobolev_order: usize) -> Result<CoefficientSet> {
        g.check_len(kappa.len())?;
        g.check_len(q.len())?;
        let qtilde = compute_qtilde(g, &kappa, &q)?;
        let kappa_c0 = kappa.iter().fold(0.0, |m: f64, v| m.max(v.abs()));
        let qtilde_hp = sobolev_surrogate(g, &qtilde, sobolev_order);
        Ok(CoefficientSet { kappa, q, qtilde, kappa_c0, qtilde_hp, sobolev_order })
    }

    pub fn from_exprs(g: &Grid2D, kappa: &str, q: &str, sobolev_order: usize) -> Result<CoefficientSet> {
        let ke = Expr::parse(kappa)?;
        let qe = Expr::parse(q)?;
        CoefficientSet::new(g, g.sample(&ke), g.sample(&qe), sobolev_order)
    }

    pub fn constant(g: &Grid2D, kappa: f64, q: f64) -> Result<CoefficientSet> {
        CoefficientSet::new(g, vec![kappa; g.len()], vec![q; g.len()], 3)
    }

    pub fn q_min(&self) -> f64 {
        self.q.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn kappa_min(&self) -> f64 {
        self.kappa.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// q̃ = q/κ + Δ√κ/√κ with the discrete Laplacian of √κ.
pub fn compute_qtilde(g: &Grid2D, kappa: &[f64], q: &[f64]) -> Result<Vec<f64>> {
    g.check_len(kappa.len())?;
    g.check_len(q.len())?;
    if let Some(k) = kappa.iter().position(|&v| !(v > 0.0)) {
        let p = g.coords(k);
        return Err(Error::Coefficient(format!("kappa = {} <= 0 at ({}, {})", kappa[k], p[0], p[1])));
    }
    let sk: Vec<f64> = kappa.iter().map(|v| v.sqrt()).collect();
    let lap = g.laplacian(&sk);
    Ok((0..g.len()).map(|k| q[k] / kappa[k] + lap[k] / sk[k]).collect())
}

/// Discrete H^p surrogate: (Σ_{a+b≤p} ‖D_x^a D_y^b f‖²_{L²})^{1/2} with forward differences.
pub fn sobolev_surrogate(g: &Grid2D, f: &[f64], p: usize) -> f64 {
    let mut total = 0.0;
    // column of x-derivatives, each then differentiated in y
    let mut dx = (f.to_vec(), g.nx, g.ny);
    for a in 0..=p {
        let mut dxy = dx.clone();
        for b in 0..=(p - a) {
            let (vals, mx, my) = &dxy;
            total += vals.iter().map(|v| v * v).sum::<f64>() * g.hx * g.hy;
            if b < p - a {
                let (mx, my) = (*mx, *my);
                if my < 2 {
                    break;
                }
                let mut next = Vec::with_capacity(mx * (my - 1));
                for j in 0..my - 1 {
                    for i in 0..mx {
                        next.push((vals[i + mx * (j + 1)] - vals[i + mx * j]) / g.hy);
                    }
                }
                dxy = (next, mx, my - 1);
            }
        }
        if a < p {
            let (vals, mx, my) = &dx;
            let (mx, my) = (*mx, *my);
            if mx < 2 {
                break;
            }
            let mut next = Vec::with_capacity((mx - 1) * my);
            for j in 0..my {
                for i in 0..mx - 1 {
                    next.push((vals[i + 1 + mx * j] - vals[i + mx * j]) / g.hx);
                }
            }
            dx = (next, mx - 1, my);
        }
    }
    total.sqrt()
}

/// (η₁, η₂, R₀): minimal pairwise distance, minimal distance to the
/// coordinate origin, maximal radius of the closed domain.
pub fn separation_params(g: &Grid2D, points: &[Point]) -> Result<(f64, f64, f64)> {
    if points.is_empty() {
        return Err(Error::InvalidGeometry("empty point set".into()));
    }
    for p in points {
        if !g.contains(*p) {
            return Err(Error::OutsideDomain(p[0], p[1]));
        }
    }
    let mut eta1 = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = dist(points[i], points[j]);
            if d == 0.0 {
                return Err(Error::DuplicatePoint(i, j));
            }
            eta1 = eta1.min(d);
        }
    }
    let mut eta2 = f64::INFINITY;
    for (k, p) in points.iter().enumerate() {
        let r = p[0].hypot(p[1]);
        if r == 0.0 {
            return Err(Error::OriginDegeneracy(k));
        }
        eta2 = eta2.min(r);
    }
    Ok((eta1, eta2, g.max_radius()))
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(n: usize) -> Grid2D {
        Grid2D::new(n, n, [[0.0, 0.0], [1.0, 1.0]]).unwrap()
    }

    fn c(v: f64) -> Complex64 {
        Complex64::new(v, 0.0)
    }

    #[test]
    fn boundary_counts_and_weights() {
        let g = unit(9);
        assert_eq!(g.len(), 81);
        assert_eq!(g.boundary.len(), 32);
        let s: f64 = g.boundary.iter().map(|b| b.weight).sum();
        assert!((s - 4.0).abs() < 1e-12 * 4.0);
        let g2 = Grid2D::new(8, 16, [[0.0, 0.0], [1.0, 2.0]]).unwrap();
        let s2: f64 = g2.boundary.iter().map(|b| b.weight).sum();
        assert!((s2 - 6.0).abs() < 1e-12 * 6.0);
        for b in &g2.boundary {
            assert!((b.normal[0].hypot(b.normal[1]) - 1.0).abs() < 1e-12);
        }
        let flux_w: f64 = g2.flux_pieces().iter().map(|p| p.weight).sum();
        assert!((flux_w - 6.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(Grid2D::new(4, 9, [[0.0, 0.0], [1.0, 1.0]]), Err(Error::InvalidGeometry(_))));
        assert!(matches!(Grid2D::new(9, 9, [[0.0, 0.0], [0.0, 1.0]]), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn boundary_walk_is_counterclockwise() {
        let g = unit(9);
        assert_eq!(g.boundary[0].index, 0);
        assert_eq!((g.boundary[8].i, g.boundary[8].j), (8, 0));
        assert_eq!((g.boundary[16].i, g.boundary[16].j), (8, 8));
        assert_eq!((g.boundary[24].i, g.boundary[24].j), (0, 8));
        assert!((g.boundary[31].arc - 3.875).abs() < 1e-12);
    }

    #[test]
    fn boundary_integrals() {
        let g = unit(9);
        let ones = vec![c(1.0); g.boundary.len()];
        assert!((g.boundary_integral(&ones).unwrap().re - 4.0).abs() < 1e-12);
        let zeros = vec![c(0.0); g.boundary.len()];
        assert_eq!(g.boundary_integral(&zeros).unwrap(), c(0.0));
        assert!(g.boundary_integral(&ones[1..]).is_err());

        let g = unit(257);
        let x1: Vec<_> = g.boundary.iter().map(|b| c(g.coords(b.index)[0])).collect();
        assert!((g.boundary_integral(&x1).unwrap().re - 2.0).abs() < 1e-6);
    }

    #[test]
    fn normal_derivatives() {
        let g = unit(17);
        let f = ScalarField::from_fn(&g, |p| c(p[0]));
        let d = g.normal_derivative(&f).unwrap();
        for (b, v) in g.boundary.iter().zip(&d) {
            assert!((v.re - b.normal[0]).abs() < 1e-12);
        }
        let k = ScalarField::from_fn(&g, |_| c(2.5));
        assert!(g.normal_derivative(&k).unwrap().iter().all(|v| v.norm() < 1e-12));

        let g = unit(257);
        let e = ScalarField::from_fn(&g, |p| c(p[0].exp()));
        let d = g.normal_derivative(&e).unwrap();
        let b = g.boundary.iter().position(|b| b.i == 256 && b.j == 128).unwrap();
        let ex = std::f64::consts::E;
        assert!((d[b].re - ex).abs() / ex < 1e-4);
    }

    #[test]
    fn flux_integral_of_affine_matches_divergence() {
        // ∫ ∂_n f ds = ∫ Δf = 0 for affine f; ∫ x1 ∂_n x1 ds = ∫ |∇x1|² + x1 Δx1 = 1
        let g = unit(12);
        let kappa = vec![1.0; g.len()];
        let f: Vec<_> = (0..g.len()).map(|k| c(g.coords(k)[0] + 2.0 * g.coords(k)[1])).collect();
        let ones = vec![c(1.0); g.boundary.len()];
        assert!(g.flux_integral(&f, &kappa, &ones).unwrap().norm() < 1e-12);
        let x1: Vec<_> = (0..g.len()).map(|k| c(g.coords(k)[0])).collect();
        let tr: Vec<_> = g.boundary.iter().map(|b| x1[b.index]).collect();
        assert!((g.flux_integral(&x1, &kappa, &tr).unwrap().re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn qtilde_cases() {
        let g = unit(33);
        let cs = CoefficientSet::constant(&g, 1.0, 0.0).unwrap();
        assert!(cs.qtilde.iter().all(|v| v.abs() < 1e-12));
        let cs = CoefficientSet::constant(&g, 1.0, 2.5).unwrap();
        assert!(cs.qtilde.iter().all(|v| (v - 2.5).abs() < 1e-12));

        let g = unit(129);
        let cs = CoefficientSet::from_exprs(&g, "1 + 0.1*sin(pi*x1)", "0", 3).unwrap();
        let k = g.idx(64, 64);
        let pi = std::f64::consts::PI;
        // √κ'' / √κ for κ = 1 + 0.1 sin(πx): (κ''/(2κ) - κ'²/(4κ²))
        let x = 0.5f64;
        let kap = 1.0 + 0.1 * (pi * x).sin();
        let k1 = 0.1 * pi * (pi * x).cos();
        let k2 = -0.1 * pi * pi * (pi * x).sin();
        let exact = k2 / (2.0 * kap) - k1 * k1 / (4.0 * kap * kap);
        assert!((cs.qtilde[k] - exact).abs() < 2e-3);
        assert!(compute_qtilde(&g, &vec![0.0; g.len()], &vec![0.0; g.len()]).is_err());
    }

    #[test]
    fn qtilde_linear_in_q() {
        let g = unit(17);
        let kappa = g.sample(&Expr::parse("1 + 0.2*x1*x2").unwrap());
        let q1 = g.sample(&Expr::parse("x1").unwrap());
        let q2 = g.sample(&Expr::parse("cos(x2)").unwrap());
        let sum: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| 2.0 * a + b).collect();
        let zero = vec![0.0; g.len()];
        let t0 = compute_qtilde(&g, &kappa, &zero).unwrap();
        let t1 = compute_qtilde(&g, &kappa, &q1).unwrap();
        let t2 = compute_qtilde(&g, &kappa, &q2).unwrap();
        let ts = compute_qtilde(&g, &kappa, &sum).unwrap();
        for k in 0..g.len() {
            let lin = 2.0 * (t1[k] - t0[k]) + (t2[k] - t0[k]) + t0[k];
            assert!((ts[k] - lin).abs() < 1e-10);
        }
    }

    #[test]
    fn sobolev_surrogate_of_constant_is_l2() {
        let g = unit(17);
        let v = sobolev_surrogate(&g, &vec![2.0; g.len()], 3);
        // only the zero-order term survives: 4 * 17² * h²
        let expect = (4.0 * 289.0 * g.hx * g.hy).sqrt();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn separation() {
        let g = unit(9);
        let (e1, e2, r0) = separation_params(&g, &[[0.3, 0.4]]).unwrap();
        assert!(e1.is_infinite());
        assert!((e2 - 0.5).abs() < 1e-15);
        assert!((r0 - 2f64.sqrt()).abs() < 1e-15);
        let (e1, _, _) = separation_params(&g, &[[0.2, 0.2], [0.2, 0.6]]).unwrap();
        assert!((e1 - 0.4).abs() < 1e-15);
        assert!(matches!(separation_params(&g, &[[0.0, 0.0], [0.5, 0.5]]), Err(Error::OriginDegeneracy(0))));
        assert!(matches!(separation_params(&g, &[[0.5, 0.5], [0.5, 0.5]]), Err(Error::DuplicatePoint(0, 1))));
    }

    #[test]
    fn bilinear_reproduces_affine() {
        let g = Grid2D::new(11, 9, [[-1.0, 0.0], [1.0, 2.0]]).unwrap();
        let f = ScalarField::from_fn(&g, |p| c(3.0 * p[0] - p[1] + 0.5));
        let p = [0.137, 1.71];
        assert!((g.interpolate(&f, p).unwrap().re - (3.0 * p[0] - p[1] + 0.5)).abs() < 1e-13);
        let w: f64 = g.hat_weights(p).unwrap().iter().map(|x| x.1).sum();
        assert!((w - 1.0).abs() < 1e-15);
        assert!(g.hat_weights([5.0, 0.0]).is_err());
    }
}
