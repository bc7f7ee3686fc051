//! Exact discrete optimal transport: transportation simplex with Bland's rule,
//! dual potentials from the optimal basis, the bounded-potential normalization
//! and a spanning-tree brute-force oracle.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostSpec<T> {
    /// min(|x−y|, cap)
    TruncatedEuclidean { cap: T },
    /// scale·|x−y|²
    ScaledSquared { scale: T },
    /// min(√(|x−y|² + λ_t²(t−t′)²), cap) on events (x₁, x₂, t)
    Spacetime { weight: T, cap: T },
}

impl<T: Real> CostSpec<T> {
    pub fn dim(&self) -> usize {
        match self {
            CostSpec::Spacetime { .. } => 3,
            _ => 2,
        }
    }

    pub fn eval(&self, x: &[T], y: &[T]) -> Result<T> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::CostDimension { expected: d, got: x.len() });
        }
        if y.len() != d {
            return Err(Error::CostDimension { expected: d, got: y.len() });
        }
        let dx = x[0] - y[0];
        let dy = x[1] - y[1];
        let s2 = dx * dx + dy * dy;
        Ok(match *self {
            CostSpec::TruncatedEuclidean { cap } => s2.sqrt().min(cap),
            CostSpec::ScaledSquared { scale } => scale * s2,
            CostSpec::Spacetime { weight, cap } => {
                let dt = weight * (x[2] - y[2]);
                (s2 + dt * dt).sqrt().min(cap)
            }
        })
    }

    /// sup of c over a set of the given spatial diameter (and time span for
    /// space-time costs).
    pub fn sup_norm(&self, diameter: T, time_span: T) -> T {
        match *self {
            CostSpec::TruncatedEuclidean { cap } => cap.min(diameter),
            CostSpec::ScaledSquared { scale } => scale * diameter * diameter,
            CostSpec::Spacetime { weight, cap } => {
                let dt = weight * time_span;
                (diameter * diameter + dt * dt).sqrt().min(cap)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            CostSpec::TruncatedEuclidean { cap } => cap > T::zero(),
            CostSpec::ScaledSquared { scale } => scale > T::zero(),
            CostSpec::Spacetime { weight, cap } => weight >= T::zero() && cap > T::zero(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("cost parameters must be positive: {self:?}")))
        }
    }
}

/// Row-major m×n cost matrix c(x_i, y_j).
pub fn cost_matrix<T: Real, P: AsRef<[T]>>(c: &CostSpec<T>, xs: &[P], ys: &[P]) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for x in xs {
        for y in ys {
            out.push(c.eval(x.as_ref(), y.as_ref())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult<T> {
    pub cost: T,
    pub m: usize,
    pub n: usize,
    /// row-major plan π_ij
    pub plan: Vec<T>,
    pub phi: Vec<T>,
    pub psi: Vec<T>,
    pub costs: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> TransportResult<T> {
    pub fn primal(&self) -> T {
        self.plan.iter().zip(&self.costs).fold(T::zero(), |s, (p, c)| s + *p * *c)
    }

    pub fn dual(&self) -> T {
        dual_value(&self.a, &self.b, &self.phi, &self.psi)
    }

    /// max_ij (φ_i + ψ_j − c_ij), ≤ 0 for a feasible pair.
    pub fn dual_violation(&self) -> T {
        dual_violation(&self.costs, &self.phi, &self.psi)
    }

    pub fn marginal_error(&self) -> T {
        let mut err = T::zero();
        for i in 0..self.m {
            let r = (0..self.n).fold(T::zero(), |s, j| s + self.plan[i * self.n + j]);
            err = err.max((r - self.a[i]).abs());
        }
        for j in 0..self.n {
            let c = (0..self.m).fold(T::zero(), |s, i| s + self.plan[i * self.n + j]);
            err = err.max((c - self.b[j]).abs());
        }
        err
    }
}

pub fn dual_value<T: Real>(a: &[T], b: &[T], phi: &[T], psi: &[T]) -> T {
    a.iter().zip(phi).chain(b.iter().zip(psi)).fold(T::zero(), |s, (w, p)| s + *w * *p)
}

pub fn dual_violation<T: Real>(costs: &[T], phi: &[T], psi: &[T]) -> T {
    let n = psi.len();
    let mut v = T::neg_infinity();
    for (i, p) in phi.iter().enumerate() {
        for (j, q) in psi.iter().enumerate() {
            v = v.max(*p + *q - costs[i * n + j]);
        }
    }
    v
}

/// I[π] − J(φ,ψ).
pub fn duality_gap<T: Real>(r: &TransportResult<T>) -> T {
    r.primal() - r.dual()
}

fn check_masses<T: Real>(a: &[T], b: &[T]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InadmissibleMeasure("empty support".into()));
    }
    if a.iter().chain(b).any(|v| *v < T::zero() || !v.is_finite()) {
        return Err(Error::InadmissibleMeasure("negative mass".into()));
    }
    let sa = a.iter().fold(T::zero(), |s, v| s + *v);
    let sb = b.iter().fold(T::zero(), |s, v| s + *v);
    if (sa - sb).abs() > T::lit(1e-10) {
        return Err(Error::Imbalance((sa - sb).to_f64().unwrap_or(f64::NAN)));
    }
    Ok(())
}

/// Spanning-tree basis over row nodes 0..m and column nodes m..m+n.
struct Basis {
    m: usize,
    n: usize,
    cells: Vec<(usize, usize)>,
}

impl Basis {
    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m + self.n];
        for (k, &(i, j)) in self.cells.iter().enumerate() {
            adj[i].push(k);
            adj[self.m + j].push(k);
        }
        adj
    }

    /// Basic cells on the tree path from column node j to row node i.
    fn path(&self, i: usize, j: usize) -> Vec<usize> {
        let adj = self.adjacency();
        let nodes = self.m + self.n;
        let start = self.m + j;
        let mut parent_edge = vec![usize::MAX; nodes];
        let mut seen = vec![false; nodes];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(u) = queue.pop_front() {
            if u == i {
                break;
            }
            for &k in &adj[u] {
                let (r, c) = self.cells[k];
                let w = if u < self.m { self.m + c } else { r };
                if !seen[w] {
                    seen[w] = true;
                    parent_edge[w] = k;
                    queue.push_back(w);
                }
            }
        }
        let mut edges = Vec::new();
        let mut u = i;
        while u != start {
            let k = parent_edge[u];
            edges.push(k);
            let (r, c) = self.cells[k];
            u = if u < self.m { self.m + c } else { r };
        }
        edges.reverse();
        edges
    }

    /// u_i + v_j = c_ij on basic cells with u_0 = 0.
    fn potentials<T: Real>(&self, costs: &[T]) -> (Vec<T>, Vec<T>) {
        let adj = self.adjacency();
        let mut u = vec![T::zero(); self.m];
        let mut v = vec![T::zero(); self.n];
        let mut seen = vec![false; self.m + self.n];
        seen[0] = true;
        let mut queue = VecDeque::from([0usize]);
        while let Some(node) = queue.pop_front() {
            for &k in &adj[node] {
                let (r, c) = self.cells[k];
                let cij = costs[r * self.n + c];
                if node < self.m {
                    let w = self.m + c;
                    if !seen[w] {
                        v[c] = cij - u[r];
                        seen[w] = true;
                        queue.push_back(w);
                    }
                } else if !seen[r] {
                    u[r] = cij - v[c];
                    seen[r] = true;
                    queue.push_back(r);
                }
            }
        }
        (u, v)
    }
}

/// Optimal plan and complementary duals of the m×n transportation problem.
pub fn solve_transport<T: Real>(a: &[T], b: &[T], costs: &[T]) -> Result<TransportResult<T>> {
    check_masses(a, b)?;
    let (m, n) = (a.len(), b.len());
    if costs.len() != m * n {
        return Err(Error::ShapeMismatch { expected: m * n, got: costs.len() });
    }
    let scale = costs.iter().fold(T::one(), |s, c| s.max(c.abs()));
    let tol = T::epsilon() * T::lit(64.0) * scale;

    // north-west corner: a staircase spanning tree with m+n−1 cells
    let mut x = vec![T::zero(); m * n];
    let mut basis = Basis { m, n, cells: Vec::with_capacity(m + n - 1) };
    let (mut ra, mut rb) = (a.to_vec(), b.to_vec());
    let (mut i, mut j) = (0, 0);
    loop {
        let q = ra[i].min(rb[j]);
        x[i * n + j] = q;
        basis.cells.push((i, j));
        ra[i] -= q;
        rb[j] -= q;
        if i == m - 1 && j == n - 1 {
            break;
        }
        if i == m - 1 {
            j += 1;
        } else if j == n - 1 || ra[i] <= rb[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    let mut in_basis = vec![false; m * n];
    for &(i, j) in &basis.cells {
        in_basis[i * n + j] = true;
    }

    let max_iter = 50 * (m + n) * (m + n) + 1000;
    let mut iter = 0;
    loop {
        iter += 1;
        if iter > max_iter {
            return Err(Error::NoConvergence("transportation simplex iteration cap".into()));
        }
        let (u, v) = basis.potentials(costs);
        // Bland: lowest-index improving cell enters
        let entering = (0..m * n).find(|&k| !in_basis[k] && costs[k] - u[k / n] - v[k % n] < -tol);
        let Some(k) = entering else {
            let plan = x;
            let cost = plan.iter().zip(costs).fold(T::zero(), |s, (p, c)| s + *p * *c);
            return Ok(TransportResult { cost, m, n, plan, phi: u, psi: v, costs: costs.to_vec(), a: a.to_vec(), b: b.to_vec() });
        };
        let (ei, ej) = (k / n, k % n);
        let path = basis.path(ei, ej);
        // cells at odd positions of the cycle (starting after the entering cell) lose mass
        let mut theta = T::infinity();
        let mut leave: Option<usize> = None;
        for (pos, &e) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let (r, c) = basis.cells[e];
                let val = x[r * n + c];
                let idx = r * n + c;
                let better = match leave {
                    None => true,
                    Some(l) => {
                        let (lr, lc) = basis.cells[l];
                        val < theta || (val == theta && idx < lr * n + lc)
                    }
                };
                if better {
                    theta = val;
                    leave = Some(e);
                }
            }
        }
        let leave = leave.expect("cycle has a decreasing cell");
        for (pos, &e) in path.iter().enumerate() {
            let (r, c) = basis.cells[e];
            if pos % 2 == 0 {
                x[r * n + c] -= theta;
            } else {
                x[r * n + c] += theta;
            }
        }
        x[k] = theta;
        let (lr, lc) = basis.cells[leave];
        x[lr * n + lc] = T::zero();
        in_basis[lr * n + lc] = false;
        in_basis[k] = true;
        basis.cells[leave] = (ei, ej);
    }
}

/// Points as coordinate slices; cost evaluated pairwise.
pub fn solve_ot<T: Real, P: AsRef<[T]>>(
    a: &[T],
    xs: &[P],
    b: &[T],
    ys: &[P],
    c: &CostSpec<T>,
) -> Result<TransportResult<T>> {
    if a.len() != xs.len() {
        return Err(Error::ShapeMismatch { expected: xs.len(), got: a.len() });
    }
    if b.len() != ys.len() {
        return Err(Error::ShapeMismatch { expected: ys.len(), got: b.len() });
    }
    let costs = cost_matrix(c, xs, ys)?;
    solve_transport(a, b, &costs)
}

/// Minimum of I[π] over basic feasible solutions, found by enumerating
/// spanning trees of K_{m,n}; limited to 4 atoms per side.
pub fn brute_force_transport<T: Real>(a: &[T], b: &[T], costs: &[T]) -> Result<T> {
    let (m, n) = (a.len(), b.len());
    if m > 4 || n > 4 {
        return Err(Error::OracleSize(m, n));
    }
    check_masses(a, b)?;
    if costs.len() != m * n {
        return Err(Error::ShapeMismatch { expected: m * n, got: costs.len() });
    }
    let k = m + n - 1;
    let cells = m * n;
    let tol = T::lit(1e-12);
    let mut best = T::infinity();
    for mask in 0u32..(1u32 << cells) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let chosen: Vec<(usize, usize)> = (0..cells).filter(|c| mask & (1 << c) != 0).map(|c| (c / n, c % n)).collect();
        if let Some(x) = tree_flow(m, n, &chosen, a, b) {
            if x.iter().all(|v| *v >= -tol) {
                let cost = chosen.iter().zip(&x).fold(T::zero(), |s, (&(i, j), v)| s + *v * costs[i * n + j]);
                best = best.min(cost);
            }
        }
    }
    Ok(best)
}

/// Flow on a spanning tree meeting the marginals, or None if the cells do not
/// form a spanning tree.
fn tree_flow<T: Real>(m: usize, n: usize, cells: &[(usize, usize)], a: &[T], b: &[T]) -> Option<Vec<T>> {
    let mut degree = vec![0usize; m + n];
    for &(i, j) in cells {
        degree[i] += 1;
        degree[m + j] += 1;
    }
    let mut supply: Vec<T> = a.iter().chain(b).copied().collect();
    let mut used = vec![false; cells.len()];
    let mut x = vec![T::zero(); cells.len()];
    // leaf elimination fixes one edge per step; a forest with a cycle stalls
    for _ in 0..cells.len() {
        let mut progressed = false;
        for (e, &(i, j)) in cells.iter().enumerate() {
            if used[e] {
                continue;
            }
            let (r, c) = (i, m + j);
            let leaf = if degree[r] == 1 { Some((r, c)) } else if degree[c] == 1 { Some((c, r)) } else { None };
            if let Some((lf, other)) = leaf {
                let flow = supply[lf];
                x[e] = flow;
                supply[other] -= flow;
                supply[lf] = T::zero();
                degree[lf] -= 1;
                degree[other] -= 1;
                used[e] = true;
                progressed = true;
                break;
            }
        }
        if !progressed {
            return None;
        }
    }
    // isolated nodes mean the edge set was not spanning
    if degree.iter().any(|&d| d != 0) || used.iter().any(|u| !u) {
        return None;
    }
    Some(x)
}

/// Double c-transform on the supports followed by the shift that places the
/// pair in the box 0 ≤ φ ≤ ‖c‖, −‖c‖ ≤ ψ ≤ 0 (with ‖c‖ the max over support pairs).
pub fn normalize_potentials<T: Real>(costs: &[T], phi: &[T], psi: &[T], tol: T) -> Result<(Vec<T>, Vec<T>)> {
    let (m, n) = (phi.len(), psi.len());
    if costs.len() != m * n {
        return Err(Error::ShapeMismatch { expected: m * n, got: costs.len() });
    }
    let viol = dual_violation(costs, phi, psi);
    if viol > tol {
        return Err(Error::InfeasibleDuals(viol.to_f64().unwrap_or(f64::NAN)));
    }
    let psi1: Vec<T> = (0..n).map(|j| (0..m).fold(T::infinity(), |s, i| s.min(costs[i * n + j] - phi[i]))).collect();
    let lambda = psi1.iter().fold(T::neg_infinity(), |s, v| s.max(*v));
    let psi2: Vec<T> = psi1.iter().map(|v| *v - lambda).collect();
    let phi_n: Vec<T> = (0..m).map(|i| (0..n).fold(T::infinity(), |s, j| s.min(costs[i * n + j] - psi2[j]))).collect();
    let psi_n: Vec<T> =
        (0..n).map(|j| (0..m).fold(T::infinity(), |s, i| s.min(costs[i * n + j] - phi_n[i])).min(T::zero())).collect();
    Ok((phi_n, psi_n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const EUC: CostSpec<f64> = CostSpec::TruncatedEuclidean { cap: f64::INFINITY };

    #[test]
    fn cost_examples() {
        let c = CostSpec::TruncatedEuclidean { cap: 2.0 };
        assert_eq!(c.eval(&[0.3, 0.1], &[0.3, 0.1]).unwrap(), 0.0);
        let c = CostSpec::TruncatedEuclidean { cap: 0.5 };
        assert_eq!(c.eval(&[0.0, 0.0], &[0.8, 0.0]).unwrap(), 0.5);
        let st = CostSpec::Spacetime { weight: 1.0, cap: 10.0 };
        let v = st.eval(&[0.1, 0.1, 0.0], &[0.4, 0.5, 0.3]).unwrap();
        assert!((v - 0.34f64.sqrt()).abs() < 1e-15);
        assert!(matches!(st.eval(&[0.1, 0.1], &[0.4, 0.5]), Err(Error::CostDimension { .. })));
    }

    #[test]
    fn solve_examples() {
        let r = solve_ot::<f64, _>(&[1.0], &[[0.0, 0.0]], &[1.0], &[[0.3, 0.0]], &CostSpec::TruncatedEuclidean { cap: 2.0 }).unwrap();
        assert!((r.cost - 0.3).abs() < 1e-15);
        assert_eq!(r.plan, vec![1.0]);
        assert_eq!(duality_gap(&r), 0.0);

        let xs = [[0.0, 0.0], [1.0, 0.0]];
        let ys = [[0.0, 1.0], [1.0, 1.0]];
        let r = solve_ot(&[0.5, 0.5], &xs, &[0.5, 0.5], &ys, &EUC).unwrap();
        assert!((r.cost - 1.0).abs() < 1e-14);
        let same = solve_ot(&[0.5, 0.5], &xs, &[0.5, 0.5], &xs, &EUC).unwrap();
        assert_eq!(same.cost, 0.0);
        assert_eq!(same.plan, vec![0.5, 0.0, 0.0, 0.5]);
        assert!(matches!(solve_ot(&[0.5, 0.6], &xs, &[0.5, 0.5], &ys, &EUC), Err(Error::Imbalance(_))));
    }

    #[test]
    fn brute_force_cases() {
        let b = [0.2, 0.3, 0.5];
        let costs = [0.4, 0.1, 0.7];
        let v: f64 = brute_force_transport(&[1.0], &b, &costs).unwrap();
        assert!((v - (0.08 + 0.03 + 0.35)).abs() < 1e-15);
        assert!(matches!(brute_force_transport(&[0.2; 5], &[1.0], &[0.0; 5]), Err(Error::OracleSize(5, 1))));
    }

    #[test]
    fn simplex_matches_oracle_on_degenerate_instances() {
        // equal masses force degenerate bases
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let m = rng.gen_range(1..=4);
            let n = rng.gen_range(1..=4);
            let a = vec![1.0 / m as f64; m];
            let b = vec![1.0 / n as f64; n];
            let costs: Vec<f64> = (0..m * n).map(|_| rng.gen_range(0..4) as f64 * 0.25).collect();
            let r = solve_transport(&a, &b, &costs).unwrap();
            let o = brute_force_transport(&a, &b, &costs).unwrap();
            assert!((r.cost - o).abs() <= 1e-9 * (1.0 + o));
            assert!(duality_gap(&r).abs() <= 1e-12);
            assert!(r.dual_violation() <= 1e-12);
            assert!(r.marginal_error() <= 1e-12);
        }
    }

    #[test]
    fn normalization_examples() {
        let c = [0.7];
        let (p, q) = normalize_potentials::<f64>(&c, &[0.7 - 3.0], &[3.0], 1e-12).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-15 && q[0] == 0.0);

        let xs = [[0.1, 0.2], [0.6, 0.6], [0.3, 0.9]];
        let costs = cost_matrix(&EUC, &xs, &xs).unwrap();
        let r = solve_transport(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], &costs).unwrap();
        let (p, q) = normalize_potentials::<f64>(&costs, &r.phi, &r.psi, 1e-12).unwrap();
        // μ = ν: J = 0 forces φ_i = −ψ_i on the diagonal; both vanish only when φ is constant
        for i in 0..3 {
            assert!((p[i] + q[i]).abs() < 1e-15);
            assert!(p[i] >= 0.0 && q[i] <= 0.0);
        }
        assert!(dual_value(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5], &p, &q).abs() < 1e-15);
        let flat = normalize_potentials::<f64>(&costs, &[0.4; 3], &[-0.4; 3], 1e-12).unwrap();
        assert!(flat.0.iter().chain(&flat.1).all(|v| v.abs() < 1e-15));
        assert!(normalize_potentials(&costs, &[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0], 1e-12).is_err());
    }

    #[test]
    fn generic_f32_solve() {
        let r = solve_transport::<f32>(&[0.5, 0.5], &[1.0], &[0.25, 0.75]).unwrap();
        assert!((r.cost - 0.5).abs() < 1e-6);
    }
}
