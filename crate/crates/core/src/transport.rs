//! Discrete and semi-discrete optimal transport: assignments, Kantorovich
//! plans, `W_2^2`, cyclical monotonicity and the Rockafellar potential.

use std::collections::VecDeque;
use std::io::Write;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::GridFunction;
use crate::legendre::{legendre_transform, value_at_node};
use crate::measures::{DiscreteMeasure, Domain, GridMeasure};
use crate::torus::torus_sq_dist;

/// Largest size accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX: usize = 9;
/// Largest number of cells atomized by [`w2_semidiscrete`].
pub const SEMIDISCRETE_MAX_CELLS: usize = 65_536;
/// Largest dense plan `N * M` handled by [`kantorovich_lp`].
pub const MAX_PLAN_ENTRIES: usize = 1 << 24;
/// Largest number of cycles [`cyclical_monotonicity_check`] will enumerate.
pub const CYCLE_BUDGET: u128 = 10_000_000;

/// Integer scale used for the weights inside the network simplex.
const FLOW_SCALE: f64 = (1u64 << 40) as f64;

/// A permutation `sigma` (row `i` goes to column `sigma[i]`) and its cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    pub sigma: Vec<usize>,
    /// `sum_i C[i][sigma(i)]`, summed in row order.
    pub cost: f64,
}

impl Assignment {
    fn from_sigma(cost: &DMatrix<f64>, sigma: Vec<usize>) -> Self {
        let total = sigma.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        Self { sigma, cost: total }
    }
}

fn check_square_finite(cost: &DMatrix<f64>) -> Result<usize> {
    let (rows, cols) = cost.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows == 0 {
        return invalid("empty cost matrix");
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return invalid("cost entries must be finite");
    }
    Ok(rows)
}

/// Minimizes `sum_i C[i][sigma(i)]` by enumerating all `N!` permutations in
/// lexicographic order; ties keep the lexicographically smallest `sigma`.
pub fn brute_force_assignment(cost: &DMatrix<f64>) -> Result<Assignment> {
    let n = check_square_finite(cost)?;
    if n > BRUTE_FORCE_MAX {
        return Err(Error::UseHungarian(n));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let c: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        if c < best_cost {
            best_cost = c;
            best.clone_from(&perm);
        }
        if !next_permutation(&mut perm) {
            break;
        }
    }
    Ok(Assignment { sigma: best, cost: best_cost })
}

/// Advances `p` to the next permutation in lexicographic order.
pub(crate) fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Minimum-cost assignment by the `O(N^3)` shortest augmenting path method
/// with row and column potentials.
pub fn hungarian(cost: &DMatrix<f64>) -> Result<Assignment> {
    let n = check_square_finite(cost)?;
    // 1-based columns; column 0 is the virtual start of each augmentation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; n];
    for j in 1..=n {
        sigma[owner[j] - 1] = j - 1;
    }
    Ok(Assignment::from_sigma(cost, sigma))
}

/// Ground costs understood by the transport routines and the CLI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CostKind {
    /// Squared flat-torus distance.
    SqDistTorus,
    /// Squared Euclidean distance.
    SqDistEuclid,
    /// `-<x, y>`.
    NegInner,
}

impl CostKind {
    pub fn name(&self) -> &'static str {
        match self {
            CostKind::SqDistTorus => "sqdist_torus",
            CostKind::SqDistEuclid => "sqdist_euclid",
            CostKind::NegInner => "neg_inner",
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::DomainMismatch(format!("points of dimension {} and {}", x.len(), y.len())));
        }
        Ok(match self {
            CostKind::SqDistTorus => torus_sq_dist(x, y)?,
            CostKind::SqDistEuclid => x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum(),
            CostKind::NegInner => -x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>(),
        })
    }
}

impl FromStr for CostKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqdist_torus" => Ok(CostKind::SqDistTorus),
            "sqdist_euclid" => Ok(CostKind::SqDistEuclid),
            "neg_inner" => Ok(CostKind::NegInner),
            other => invalid(format!("unknown cost `{other}` (expected sqdist_torus, sqdist_euclid or neg_inner)")),
        }
    }
}

/// Squared-distance metric used by the `W_2` routines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    Torus,
    Euclidean,
}

impl Metric {
    pub fn cost(&self) -> CostKind {
        match self {
            Metric::Torus => CostKind::SqDistTorus,
            Metric::Euclidean => CostKind::SqDistEuclid,
        }
    }

    pub fn for_domain(domain: Domain) -> Self {
        match domain {
            Domain::Torus(_) => Metric::Torus,
            _ => Metric::Euclidean,
        }
    }
}

/// `C[i][j] = cost(xs[i], ys[j])`.
pub fn cost_matrix(xs: &[Vec<f64>], ys: &[Vec<f64>], kind: CostKind) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(xs.len(), ys.len());
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            m[(i, j)] = kind.eval(x, y)?;
        }
    }
    Ok(m)
}

/// `W_2^2` between two uniform empirical measures with the same number of
/// atoms: `(1/N) min_sigma sum d(x_i, y_sigma(i))^2`.
pub fn w2_empirical(mu: &DiscreteMeasure, nu: &DiscreteMeasure, metric: Metric) -> Result<f64> {
    if mu.len() != nu.len() {
        return Err(Error::UnequalAtoms(mu.len(), nu.len()));
    }
    if mu.is_empty() {
        return Err(Error::EmptyConfiguration);
    }
    let n = mu.len() as f64;
    for m in [mu, nu] {
        if m.atoms().iter().any(|a| (a.weight - 1.0 / n).abs() > 1e-12) {
            return invalid("w2_empirical needs uniform weights 1/N; use kantorovich_lp");
        }
    }
    let cost = cost_matrix(&mu.points(), &nu.points(), metric.cost())?;
    let a = hungarian(&cost)?;
    // Summing the sorted terms makes the value exactly symmetric in (mu, nu).
    let mut terms: Vec<f64> = a.sigma.iter().enumerate().map(|(i, &j)| cost[(i, j)]).collect();
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / n)
}

/// A coupling between two discrete measures together with the optimal dual
/// potentials `u_i + v_j <= C_ij` certified by the solver.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    coupling: DMatrix<f64>,
    source: DiscreteMeasure,
    target: DiscreteMeasure,
    objective: f64,
    row_potential: Vec<f64>,
    col_potential: Vec<f64>,
}

impl TransportPlan {
    pub fn coupling(&self) -> &DMatrix<f64> {
        &self.coupling
    }

    pub fn source(&self) -> &DiscreteMeasure {
        &self.source
    }

    pub fn target(&self) -> &DiscreteMeasure {
        &self.target
    }

    /// `sum_ij C_ij gamma_ij`.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn row_potential(&self) -> &[f64] {
        &self.row_potential
    }

    pub fn col_potential(&self) -> &[f64] {
        &self.col_potential
    }

    /// Dual objective `sum u_i a_i + sum v_j b_j`.
    pub fn dual_objective(&self) -> f64 {
        let a: f64 = self.row_potential.iter().zip(self.source.atoms()).map(|(u, at)| u * at.weight).sum();
        let b: f64 = self.col_potential.iter().zip(self.target.atoms()).map(|(v, at)| v * at.weight).sum();
        a + b
    }

    /// Largest deviation of a row or column sum from the prescribed weight.
    pub fn marginal_error(&self) -> f64 {
        let mut err = 0.0_f64;
        for (i, a) in self.source.atoms().iter().enumerate() {
            err = err.max((self.coupling.row(i).sum() - a.weight).abs());
        }
        for (j, b) in self.target.atoms().iter().enumerate() {
            err = err.max((self.coupling.column(j).sum() - b.weight).abs());
        }
        err
    }

    /// `(source index, target index)` of every entry with positive mass, in
    /// row-major order.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let (n, m) = self.coupling.shape();
        (0..n)
            .flat_map(|i| (0..m).map(move |j| (i, j)))
            .filter(|&(i, j)| self.coupling[(i, j)] > 0.0)
            .collect()
    }

    /// Writes the positive entries as `source,target,mass` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "target", "mass"])?;
        for (i, j) in self.support() {
            w.write_record([i.to_string(), j.to_string(), self.coupling[(i, j)].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes a dense matrix as CSV with columns `col_0..col_{m-1}`.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record((0..m.ncols()).map(|j| format!("col_{j}")))?;
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| m[(i, j)].to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Integer supplies summing to exactly `FLOW_SCALE`, by largest remainders.
fn scale_weights(w: &[f64], total: f64) -> Vec<i64> {
    let target = FLOW_SCALE as i64;
    let exact: Vec<f64> = w.iter().map(|x| x / total * FLOW_SCALE).collect();
    let mut out: Vec<i64> = exact.iter().map(|x| x.floor() as i64).collect();
    let mut deficit = target - out.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut k = 0;
    while deficit > 0 {
        out[order[k % order.len()]] += 1;
        deficit -= 1;
        k += 1;
    }
    while deficit < 0 {
        let idx = order[order.len() - 1 - (k % order.len())];
        if out[idx] > 0 {
            out[idx] -= 1;
            deficit += 1;
        }
        k += 1;
    }
    out
}

/// Min-cost plan between `mu` and `nu` for the cost matrix `cost`.
///
/// The transportation problem is solved exactly by the network simplex
/// method on integer-scaled weights (northwest-corner start, Dantzig pricing
/// with Bland's rule during degenerate stalls).
pub fn kantorovich_lp(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &DMatrix<f64>) -> Result<TransportPlan> {
    let (n, m) = (mu.len(), nu.len());
    if cost.shape() != (n, m) {
        return Err(Error::DomainMismatch(format!(
            "{}x{} cost matrix for {n} source and {m} target atoms",
            cost.nrows(),
            cost.ncols()
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::EmptyConfiguration);
    }
    if n * m > MAX_PLAN_ENTRIES {
        return invalid(format!("dense plan with {} entries exceeds {MAX_PLAN_ENTRIES}", n * m));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return invalid("cost entries must be finite");
    }
    let (sa, sb) = (mu.total_mass(), nu.total_mass());
    if !(sa > 0.0) || (sa - sb).abs() > 1e-9 * sa.max(1.0) {
        return Err(Error::MassMismatch { source_mass: sa, target_mass: sb });
    }
    let supply = scale_weights(&mu.weights(), sa);
    let demand = scale_weights(&nu.weights(), sb);
    let sol = NetworkSimplex::solve(&supply, &demand, cost)?;

    let unit = sa / FLOW_SCALE;
    let mut coupling = DMatrix::zeros(n, m);
    let mut objective = 0.0;
    for (&(i, j), &f) in sol.arcs.iter().zip(&sol.flow) {
        if f > 0 {
            let mass = f as f64 * unit;
            coupling[(i, j)] = mass;
            objective += cost[(i, j)] * mass;
        }
    }
    Ok(TransportPlan {
        coupling,
        source: mu.clone(),
        target: nu.clone(),
        objective,
        row_potential: sol.u,
        col_potential: sol.v,
    })
}

struct NetworkSimplex {
    arcs: Vec<(usize, usize)>,
    flow: Vec<i64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl NetworkSimplex {
    fn solve(supply: &[i64], demand: &[i64], cost: &DMatrix<f64>) -> Result<Self> {
        let (n, m) = (supply.len(), demand.len());
        let nodes = n + m;
        // Northwest corner: a spanning tree of n + m - 1 arcs (zeros kept).
        let mut arcs = Vec::with_capacity(nodes - 1);
        let mut flow = Vec::with_capacity(nodes - 1);
        let (mut rs, mut cs) = (supply.to_vec(), demand.to_vec());
        let (mut i, mut j) = (0, 0);
        loop {
            let f = rs[i].min(cs[j]);
            arcs.push((i, j));
            flow.push(f);
            rs[i] -= f;
            cs[j] -= f;
            if i + 1 == n && j + 1 == m {
                break;
            }
            if (rs[i] == 0 && i + 1 < n) || j + 1 == m {
                i += 1;
            } else {
                j += 1;
            }
        }
        let mut in_tree = vec![usize::MAX; n * m];
        for (k, &(a, b)) in arcs.iter().enumerate() {
            in_tree[a * m + b] = k;
        }

        let scale = cost.iter().fold(0.0_f64, |s, c| s.max(c.abs()));
        let eps = 1e-12 * (1.0 + scale);
        let max_iter = 100 * nodes * nodes + 10_000;
        let mut degenerate_streak = 0usize;
        let mut u = vec![0.0; n];
        let mut v = vec![0.0; m];
        let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nodes];
        let mut parent = vec![(usize::MAX, usize::MAX); nodes];
        let mut seen = vec![false; nodes];
        let mut queue = VecDeque::with_capacity(nodes);

        for _ in 0..max_iter {
            for l in adj.iter_mut() {
                l.clear();
            }
            for (k, &(a, b)) in arcs.iter().enumerate() {
                adj[a].push((n + b, k));
                adj[n + b].push((a, k));
            }
            // Duals: u_i + v_j = c_ij on tree arcs, u_0 = 0.
            seen.iter_mut().for_each(|s| *s = false);
            seen[0] = true;
            u[0] = 0.0;
            queue.push_back(0);
            while let Some(x) = queue.pop_front() {
                for &(y, k) in &adj[x] {
                    if seen[y] {
                        continue;
                    }
                    seen[y] = true;
                    let (a, b) = arcs[k];
                    if y >= n {
                        v[b] = cost[(a, b)] - u[a];
                    } else {
                        u[a] = cost[(a, b)] - v[b];
                    }
                    queue.push_back(y);
                }
            }

            let bland = degenerate_streak > nodes;
            let mut entering = None;
            let mut best = -eps;
            'pricing: for a in 0..n {
                for b in 0..m {
                    if in_tree[a * m + b] != usize::MAX {
                        continue;
                    }
                    let r = cost[(a, b)] - u[a] - v[b];
                    if r < best {
                        entering = Some((a, b));
                        if bland {
                            break 'pricing;
                        }
                        best = r;
                    }
                }
            }
            let Some((ei, ej)) = entering else {
                return Ok(Self { arcs, flow, u, v });
            };

            // Tree path from row node ei to column node n + ej.
            seen.iter_mut().for_each(|s| *s = false);
            seen[ei] = true;
            queue.clear();
            queue.push_back(ei);
            while let Some(x) = queue.pop_front() {
                if x == n + ej {
                    break;
                }
                for &(y, k) in &adj[x] {
                    if !seen[y] {
                        seen[y] = true;
                        parent[y] = (x, k);
                        queue.push_back(y);
                    }
                }
            }
            queue.clear();
            let mut path = Vec::new();
            let mut x = n + ej;
            while x != ei {
                let (p, k) = parent[x];
                path.push(k);
                x = p;
            }
            // Walking back from the entering column, arcs alternate -, +, -, ...
            let mut theta = i64::MAX;
            let mut leaving = usize::MAX;
            for &k in path.iter().step_by(2) {
                let (a, b) = arcs[k];
                let key = a * m + b;
                let better = flow[k] < theta
                    || (flow[k] == theta && key < arcs[leaving].0 * m + arcs[leaving].1);
                if better {
                    theta = flow[k];
                    leaving = k;
                }
            }
            for (pos, &k) in path.iter().enumerate() {
                if pos % 2 == 0 {
                    flow[k] -= theta;
                } else {
                    flow[k] += theta;
                }
            }
            let (la, lb) = arcs[leaving];
            in_tree[la * m + lb] = usize::MAX;
            arcs[leaving] = (ei, ej);
            flow[leaving] = theta;
            in_tree[ei * m + ej] = leaving;
            degenerate_streak = if theta == 0 { degenerate_streak + 1 } else { 0 };
        }
        Err(Error::NotConverged { iterations: max_iter, last_residual: f64::NAN, residual_trace: Vec::new() })
    }
}

/// `W_2^2(nu, mu)` for a grid measure `nu` and a discrete `mu`: every cell of
/// `nu` with positive mass becomes an atom at its center and the discrete
/// problem is solved by [`kantorovich_lp`]. Periodic grids use the torus
/// metric. The atomization bias is `O(step)` and shrinks under refinement.
pub fn w2_semidiscrete(nu: &GridMeasure, mu: &DiscreteMeasure) -> Result<f64> {
    let cells = nu.grid().len();
    if cells > SEMIDISCRETE_MAX_CELLS {
        return Err(Error::ResolutionOverflow { cells, limit: SEMIDISCRETE_MAX_CELLS });
    }
    let atoms = nu.to_discrete()?;
    let metric = if nu.grid().is_periodic() { Metric::Torus } else { Metric::Euclidean };
    let cost = cost_matrix(&atoms.points(), &mu.points(), metric.cost())?;
    Ok(kantorovich_lp(&atoms, mu, &cost)?.objective())
}

/// Outcome of [`cyclical_monotonicity_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monotonicity {
    pub monotone: bool,
    /// A violating cycle `i_0 -> i_1 -> ... -> i_0`: `x_{i_k}` is rerouted to
    /// `y_{i_{k+1}}` at a strictly lower total cost.
    pub witness: Option<Vec<usize>>,
    pub cycles_checked: u128,
}

fn cycle_count(p: usize, max_cycle: usize) -> u128 {
    let mut total: u128 = 0;
    for s in 2..=max_cycle.min(p) {
        // C(p, s) * (s - 1)!
        let mut c: u128 = 1;
        for t in 0..s as u128 {
            c = c * (p as u128 - t) / (t + 1);
        }
        let fact: u128 = (1..s as u128).product();
        total = total.saturating_add(c.saturating_mul(fact));
    }
    total
}

/// Checks `sum_k c(x_{i_k}, y_{i_k}) <= sum_k c(x_{i_k}, y_{i_{k+1}})` for every
/// cycle of at most `max_cycle` distinct pairs, with `c = -<x, y>`. Cycles are
/// visited in a fixed order (by length, then lexicographically), so the
/// witness is deterministic.
pub fn cyclical_monotonicity_check(pairs: &[(Vec<f64>, Vec<f64>)], max_cycle: usize) -> Result<Monotonicity> {
    cyclical_monotonicity_check_with(pairs, max_cycle, CostKind::NegInner)
}

/// [`cyclical_monotonicity_check`] for an arbitrary [`CostKind`].
pub fn cyclical_monotonicity_check_with(
    pairs: &[(Vec<f64>, Vec<f64>)],
    max_cycle: usize,
    kind: CostKind,
) -> Result<Monotonicity> {
    let p = pairs.len();
    let needed = cycle_count(p, max_cycle);
    if needed > CYCLE_BUDGET {
        return Err(Error::BudgetExceeded { needed, limit: CYCLE_BUDGET });
    }
    let xs: Vec<Vec<f64>> = pairs.iter().map(|q| q.0.clone()).collect();
    let ys: Vec<Vec<f64>> = pairs.iter().map(|q| q.1.clone()).collect();
    let c = cost_matrix(&xs, &ys, kind)?;
    let mut checked: u128 = 0;
    for s in 2..=max_cycle.min(p) {
        let mut subset: Vec<usize> = (0..s).collect();
        loop {
            // Cycles through `subset` starting at its smallest element.
            let mut rest: Vec<usize> = subset[1..].to_vec();
            loop {
                checked += 1;
                let mut cycle = Vec::with_capacity(s);
                cycle.push(subset[0]);
                cycle.extend_from_slice(&rest);
                let mut diag = 0.0;
                let mut shifted = 0.0;
                let mut scale = 0.0_f64;
                for k in 0..s {
                    let (a, b) = (cycle[k], cycle[(k + 1) % s]);
                    diag += c[(a, a)];
                    shifted += c[(a, b)];
                    scale = scale.max(c[(a, a)].abs()).max(c[(a, b)].abs());
                }
                if diag > shifted + 1e-12 * (1.0 + scale) * s as f64 {
                    return Ok(Monotonicity { monotone: false, witness: Some(cycle), cycles_checked: checked });
                }
                if !next_permutation(&mut rest) {
                    break;
                }
            }
            if !next_combination(&mut subset, p) {
                break;
            }
        }
    }
    Ok(Monotonicity { monotone: true, witness: None, cycles_checked: checked })
}

fn next_combination(c: &mut [usize], p: usize) -> bool {
    let s = c.len();
    let mut i = s;
    while i > 0 {
        i -= 1;
        if c[i] < p - s + i {
            c[i] += 1;
            for k in i + 1..s {
                c[k] = c[k - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// The Rockafellar potential of a finite set `A` of pairs, normalized at a
/// base pair. Building it solves a longest-chain problem once; evaluation is
/// then a single max over the pairs.
#[derive(Debug, Clone)]
pub struct RockafellarPotential {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    base: usize,
    /// Best telescoping sum of a chain from the base pair ending at each pair.
    chain: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RockafellarPotential {
    pub fn new(pairs: Vec<(Vec<f64>, Vec<f64>)>, base: usize) -> Result<Self> {
        if base >= pairs.len() {
            return invalid(format!("base index {base} out of range for {} pairs", pairs.len()));
        }
        let p = pairs.len();
        let mut chain = vec![f64::NEG_INFINITY; p];
        chain[base] = 0.0;
        // Chains through distinct pairs have at most p - 1 steps.
        for _ in 1..p {
            let mut changed = false;
            for b in 0..p {
                if chain[b] == f64::NEG_INFINITY {
                    continue;
                }
                for a in 0..p {
                    if a == b {
                        continue;
                    }
                    let step: f64 = pairs[a].0.iter().zip(&pairs[b].0).zip(&pairs[b].1).map(|((xa, xb), yb)| (xa - xb) * yb).sum();
                    let cand = chain[b] + step;
                    if cand > chain[a] && a != base {
                        chain[a] = cand;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        Ok(Self { pairs, base, chain })
    }

    /// `f_A(x) = max_a chain[a] + <x - x_a, y_a>`; exactly zero at the base point.
    pub fn eval(&self, x: &[f64]) -> f64 {
        if x == self.pairs[self.base].0.as_slice() {
            return 0.0;
        }
        self.pairs
            .iter()
            .zip(&self.chain)
            .map(|((xa, ya), c)| c + dot(x, ya) - dot(xa, ya))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// One-shot evaluation of the Rockafellar potential `f_A(x)` based at `pairs[base]`.
pub fn rockafellar_potential(pairs: &[(Vec<f64>, Vec<f64>)], base: usize, x: &[f64]) -> Result<f64> {
    Ok(RockafellarPotential::new(pairs.to_vec(), base)?.eval(x))
}

/// `int f mu + int f* nu`, the Kantorovich dual objective for the gain
/// `<x, y>`. `f` is read at grid nodes when the atoms of `mu` sit on nodes and
/// interpolated otherwise; `f*` is taken over `f`'s grid at the cell points of
/// `nu`.
pub fn dual_pair_value(f: &GridFunction, mu: &DiscreteMeasure, nu: &GridMeasure) -> Result<f64> {
    let mut first = 0.0;
    for a in mu.atoms() {
        if a.weight == 0.0 {
            continue;
        }
        let v = match value_at_node(f, &a.point) {
            Ok(v) => v,
            Err(_) => f.interpolate(&a.point)?,
        };
        first += v * a.weight;
    }
    let fstar = legendre_transform(f, nu.grid())?;
    let second: f64 = fstar
        .values()
        .iter()
        .zip(nu.mass())
        .filter(|(_, &m)| m > 0.0)
        .map(|(v, m)| v * m)
        .sum();
    Ok(first + second)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::measures::Atom;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn random_int_matrix(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |_, _| rng.random_range(0..20) as f64)
    }

    fn uniform_1d(domain: Domain, xs: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::uniform(domain, xs.iter().map(|&x| vec![x]).collect()).unwrap()
    }

    #[test]
    fn brute_force_examples() {
        let a = brute_force_assignment(&mat(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!((a.sigma, a.cost), (vec![0, 1], 0.0));
        let b = brute_force_assignment(&mat(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!((b.sigma, b.cost), (vec![0, 1], 2.0));
        let big = DMatrix::zeros(10, 10);
        assert!(matches!(brute_force_assignment(&big), Err(Error::UseHungarian(10))));
    }

    #[test]
    fn brute_force_breaks_ties_lexicographically() {
        let a = brute_force_assignment(&DMatrix::from_element(4, 4, 1.0)).unwrap();
        assert_eq!(a.sigma, vec![0, 1, 2, 3]);
        let b = brute_force_assignment(&mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]])).unwrap();
        assert_eq!(b.sigma, vec![1, 2, 0]);
    }

    #[test]
    fn hungarian_examples() {
        let id = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 1.0 });
        assert_eq!(hungarian(&id).unwrap().cost, 0.0);
        assert_eq!(hungarian(&mat(&[&[3.5]])).unwrap().cost, 3.5);
        assert!(matches!(hungarian(&DMatrix::zeros(2, 3)), Err(Error::NotSquare { rows: 2, cols: 3 })));
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 1..=8 {
            for _ in 0..20 {
                let c = random_int_matrix(&mut rng, n);
                assert_eq!(hungarian(&c).unwrap().cost, brute_force_assignment(&c).unwrap().cost);
            }
        }
        for _ in 0..100 {
            let c = DMatrix::from_fn(7, 7, |_, _| rng.random::<f64>());
            let (h, b) = (hungarian(&c).unwrap().cost, brute_force_assignment(&c).unwrap().cost);
            assert!((h - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn w2_empirical_examples() {
        let a = uniform_1d(Domain::Torus(1), &[0.1, 0.4, 0.7]);
        assert_eq!(w2_empirical(&a, &a, Metric::Torus).unwrap(), 0.0);
        let p = uniform_1d(Domain::Torus(1), &[0.1]);
        let q = uniform_1d(Domain::Torus(1), &[0.4]);
        assert!((w2_empirical(&p, &q, Metric::Torus).unwrap() - 0.09).abs() < 1e-15);
        assert!(matches!(w2_empirical(&a, &p, Metric::Torus), Err(Error::UnequalAtoms(3, 1))));
    }

    #[test]
    fn lp_examples() {
        let mu = uniform_1d(Domain::Euclidean(1), &[0.0, 0.3, 1.0]);
        let c = cost_matrix(&mu.points(), &mu.points(), CostKind::SqDistEuclid).unwrap();
        let plan = kantorovich_lp(&mu, &mu, &c).unwrap();
        assert_eq!(plan.objective(), 0.0);
        for i in 0..3 {
            assert!((plan.coupling()[(i, i)] - 1.0 / 3.0).abs() < 1e-12);
        }

        let two = uniform_1d(Domain::Euclidean(1), &[0.0, 1.0]);
        let one = uniform_1d(Domain::Euclidean(1), &[0.0]);
        let c = cost_matrix(&two.points(), &one.points(), CostKind::SqDistEuclid).unwrap();
        let plan = kantorovich_lp(&two, &one, &c).unwrap();
        assert!((plan.objective() - 0.5).abs() < 1e-12);
        assert!(plan.marginal_error() < 1e-12);
    }

    #[test]
    fn lp_rejects_mass_mismatch() {
        let mu = DiscreteMeasure::new(Domain::Euclidean(1), vec![Atom { point: vec![0.0], weight: 1.0 }]).unwrap();
        let nu = DiscreteMeasure::new(Domain::Euclidean(1), vec![Atom { point: vec![0.0], weight: 0.5 }]).unwrap();
        let c = DMatrix::zeros(1, 1);
        assert!(matches!(kantorovich_lp(&mu, &nu, &c), Err(Error::MassMismatch { .. })));
    }

    #[test]
    fn lp_matches_assignment_and_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let xs: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let ys: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let mu = uniform_1d(Domain::Torus(1), &xs);
            let nu = uniform_1d(Domain::Torus(1), &ys);
            let c = cost_matrix(&mu.points(), &nu.points(), CostKind::SqDistTorus).unwrap();
            let plan = kantorovich_lp(&mu, &nu, &c).unwrap();
            let w2 = w2_empirical(&mu, &nu, Metric::Torus).unwrap();
            assert!((plan.objective() - w2).abs() <= 1e-9);
            assert!((plan.dual_objective() - plan.objective()).abs() <= 1e-9);
            assert!(plan.marginal_error() <= 1e-10);
        }
    }

    #[test]
    fn lp_random_weights_respects_duality() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.random_range(1..9);
            let m = rng.random_range(1..9);
            let mk = |rng: &mut ChaCha8Rng, k: usize| {
                let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.01).collect();
                let s: f64 = w.iter().sum();
                DiscreteMeasure::new(
                    Domain::Euclidean(2),
                    w.iter().map(|x| Atom { point: vec![rng.random(), rng.random()], weight: x / s }).collect(),
                )
                .unwrap()
            };
            let (mu, nu) = (mk(&mut rng, n), mk(&mut rng, m));
            let c = cost_matrix(&mu.points(), &nu.points(), CostKind::SqDistEuclid).unwrap();
            let plan = kantorovich_lp(&mu, &nu, &c).unwrap();
            assert!(plan.marginal_error() <= 1e-10);
            assert!((plan.dual_objective() - plan.objective()).abs() <= 1e-9);
            for i in 0..n {
                for j in 0..m {
                    assert!(plan.row_potential()[i] + plan.col_potential()[j] <= c[(i, j)] + 1e-9);
                }
            }
        }
    }

    #[test]
    fn semidiscrete_examples() {
        let nu = GridMeasure::uniform(Grid::torus(1, 64).unwrap());
        let delta = uniform_1d(Domain::Torus(1), &[0.5]);
        let h = 1.0 / 64.0;
        let v = w2_semidiscrete(&nu, &delta).unwrap();
        assert!((v - (1.0 / 12.0 - h * h / 12.0)).abs() < 1e-12);
        assert!((v - 1.0 / 12.0).abs() < 1e-4);

        // mu's own histogram moves every atom within its cell.
        let mu = uniform_1d(Domain::Torus(1), &[0.11, 0.52, 0.93]);
        let k = 16;
        let hist = GridMeasure::read_csv(Grid::torus(1, k).unwrap(), {
            let mut buf = Vec::new();
            mu.write_csv(&mut buf).unwrap();
            std::io::Cursor::new(buf)
        })
        .unwrap();
        let step = 1.0 / k as f64;
        assert!(w2_semidiscrete(&hist, &mu).unwrap() <= (step / 2.0).powi(2));

        let huge = GridMeasure::uniform(Grid::torus(2, 257).unwrap());
        assert!(matches!(w2_semidiscrete(&huge, &delta), Err(Error::ResolutionOverflow { .. })));
    }

    #[test]
    fn semidiscrete_lattice_residual_shrinks() {
        let mut last = f64::INFINITY;
        for n in [2usize, 4, 8, 16] {
            let lattice: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
            let mu = uniform_1d(Domain::Torus(1), &lattice);
            let v = w2_semidiscrete(&GridMeasure::uniform(Grid::torus(1, 8 * n).unwrap()), &mu).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn cyclical_examples() {
        let diag: Vec<(Vec<f64>, Vec<f64>)> = (0..8).map(|i| (vec![i as f64 / 7.0], vec![i as f64 / 7.0])).collect();
        assert!(cyclical_monotonicity_check(&diag, 6).unwrap().monotone);

        let bad = vec![(vec![0.0], vec![1.0]), (vec![1.0], vec![0.0])];
        let r = cyclical_monotonicity_check(&bad, 2).unwrap();
        assert!(!r.monotone);
        assert_eq!(r.witness, Some(vec![0, 1]));

        let quartic: Vec<(Vec<f64>, Vec<f64>)> =
            (0..9).map(|i| { let t = -1.0 + i as f64 / 4.0; (vec![t], vec![4.0 * t.powi(3)]) }).collect();
        assert!(cyclical_monotonicity_check(&quartic, 4).unwrap().monotone);

        let many: Vec<(Vec<f64>, Vec<f64>)> = (0..30).map(|i| (vec![i as f64], vec![i as f64])).collect();
        assert!(matches!(cyclical_monotonicity_check(&many, 8), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn rockafellar_examples() {
        let pairs = vec![(vec![0.2, 0.1], vec![1.0, -2.0])];
        assert_eq!(rockafellar_potential(&pairs, 0, &[0.2, 0.1]).unwrap(), 0.0);
        let v = rockafellar_potential(&pairs, 0, &[1.0, 1.0]).unwrap();
        assert!((v - (0.8 * 1.0 + 0.9 * -2.0)).abs() < 1e-15);

        // Samples of the graph of the gradient of x^2/2; f_A is the lower
        // Riemann sum of t dt between the base point and x_i.
        let ts: Vec<f64> = (-5..=5).map(|i| i as f64 / 5.0).collect();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = ts.iter().map(|&t| (vec![t], vec![t])).collect();
        let f = RockafellarPotential::new(pairs, 5).unwrap();
        let gap: f64 = 0.5 * (ts.len() as f64 / 2.0) * 0.2 * 0.2;
        for &t in &ts {
            let exact = 0.5 * t * t;
            let got = f.eval(&[t]);
            assert!(got <= exact + 1e-12 && exact - got <= gap, "t={t}");
            let steps = (t.abs() / 0.2).round();
            assert!((got - (exact - 0.5 * steps * 0.04)).abs() < 1e-12);
        }
        assert_eq!(f.eval(&[0.0]), 0.0);
    }

    #[test]
    fn dual_pair_value_examples() {
        // mu on nodes of a grid, nu a grid measure; neg-inner LP duals give f.
        let g = Grid::nodes(1, 5, 0.0, 1.0).unwrap();
        let mu = DiscreteMeasure::new(
            Domain::Euclidean(1),
            vec![
                Atom { point: vec![0.0], weight: 0.2 },
                Atom { point: vec![0.5], weight: 0.5 },
                Atom { point: vec![1.0], weight: 0.3 },
            ],
        )
        .unwrap();
        let nu = GridMeasure::from_density_fn(Grid::cells(1, 8, 0.0, 1.0).unwrap(), |y| 0.5 + y[0]).unwrap();
        let nu_atoms = nu.to_discrete().unwrap();
        let c = cost_matrix(&mu.points(), &nu_atoms.points(), CostKind::NegInner).unwrap();
        let plan = kantorovich_lp(&mu, &nu_atoms, &c).unwrap();
        let primal = -plan.objective();
        let mut vals = vec![f64::INFINITY; g.len()];
        for (a, u) in mu.atoms().iter().zip(plan.row_potential()) {
            vals[g.locate(&a.point).unwrap()] = -u;
        }
        let f = GridFunction::new(g.clone(), vals).unwrap();
        let value = dual_pair_value(&f, &mu, &nu).unwrap();
        assert!((value - primal).abs() < 1e-6);
        let shifted = dual_pair_value(&f.add_constant(0.7), &mu, &nu).unwrap();
        assert!((shifted - value).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (a, b) = (rng.random_range(0.1..3.0), rng.random_range(-1.0..1.0));
            let convex = GridFunction::from_fn(g.clone(), |x| a * x[0] * x[0] + b * x[0]).unwrap();
            assert!(dual_pair_value(&convex, &mu, &nu).unwrap() >= primal - 1e-12);
        }
    }

    #[test]
    fn plan_support_is_cyclically_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..20 {
            let pts = |rng: &mut ChaCha8Rng| (0..6).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect::<Vec<_>>();
            let mu = DiscreteMeasure::uniform(Domain::Euclidean(2), pts(&mut rng)).unwrap();
            let nu = DiscreteMeasure::uniform(Domain::Euclidean(2), pts(&mut rng)).unwrap();
            let c = cost_matrix(&mu.points(), &nu.points(), CostKind::NegInner).unwrap();
            let plan = kantorovich_lp(&mu, &nu, &c).unwrap();
            let pairs: Vec<(Vec<f64>, Vec<f64>)> =
                plan.support().iter().map(|&(i, j)| (mu.points()[i].clone(), nu.points()[j].clone())).collect();
            assert!(cyclical_monotonicity_check(&pairs, 6).unwrap().monotone);
        }
    }

    #[test]
    fn plan_csv_lists_positive_entries() {
        let mu = uniform_1d(Domain::Euclidean(1), &[0.0, 1.0]);
        let c = cost_matrix(&mu.points(), &mu.points(), CostKind::SqDistEuclid).unwrap();
        let plan = kantorovich_lp(&mu, &mu, &c).unwrap();
        let mut buf = Vec::new();
        plan.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "source,target,mass\n0,0,0.5\n1,1,0.5\n");
    }

    fn config(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn w2_is_a_squared_metric(a in config(5), b in config(5), c in config(5)) {
            let (ma, mb, mc) = (uniform_1d(Domain::Torus(1), &a), uniform_1d(Domain::Torus(1), &b), uniform_1d(Domain::Torus(1), &c));
            let ab = w2_empirical(&ma, &mb, Metric::Torus).unwrap();
            prop_assert_eq!(ab, w2_empirical(&mb, &ma, Metric::Torus).unwrap());
            let bc = w2_empirical(&mb, &mc, Metric::Torus).unwrap();
            let ac = w2_empirical(&ma, &mc, Metric::Torus).unwrap();
            prop_assert!(ac.sqrt() <= ab.sqrt() + bc.sqrt() + 1e-9);
        }

        #[test]
        fn rockafellar_is_convex_along_lines(
            pts in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..8),
            x0 in -2.0f64..2.0, dx in -1.0f64..1.0, y0 in -2.0f64..2.0, dy in -1.0f64..1.0,
        ) {
            // Pairs on the graph of the gradient of the convex |x|^2/2 + x_1^4.
            let pairs: Vec<(Vec<f64>, Vec<f64>)> = pts.iter()
                .map(|&(a, b)| (vec![a, b], vec![a + 4.0 * a.powi(3), b]))
                .collect();
            let f = RockafellarPotential::new(pairs, 0).unwrap();
            let l = f.eval(&[x0 - dx, y0 - dy]);
            let m = f.eval(&[x0, y0]);
            let r = f.eval(&[x0 + dx, y0 + dy]);
            prop_assert!(m <= 0.5 * (l + r) + 1e-12);
        }
    }
}
