//! The Monge–Ampère operator `MA_nu`, the functionals `J_nu` and
//! `F_{beta,mu0,nu}`, a Newton solver for the master equation
//! `MA_nu f = e^{beta f} mu0 / int e^{beta f} mu0`, and the rate function
//! `G = beta W + Ent(mu0, .) + C`.
//!
//! Everything lives on a box grid with cell-centered nodes, and the transport
//! cost is `c(x, y) = -<x, y>`, so `W(mu, nu) = inf_gamma int -<x,y> gamma` is
//! Legendre dual to `J_nu(f) = int f* nu`. In one dimension the operator, `J`
//! and `W` are evaluated exactly for the piecewise-linear conjugate of a grid
//! potential against a piecewise-constant `nu`; in higher dimension they use
//! the grid Legendre transform, central differences and the transport LP.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, GridFunction, Layout};
use crate::legendre::legendre_transform;
use crate::measures::{entropy, log_mgf_grid, pushforward, GridMeasure};
use crate::transport::{cost_matrix, kantorovich_lp, CostKind};

/// Armijo sufficient-decrease constant.
const ARMIJO: f64 = 1e-4;
/// Step halvings tried before the solver gives up on a direction.
const MAX_HALVINGS: usize = 60;
/// Density, relative to the mean density of `nu`, used in place of zero in
/// the Newton system.
const FLOOR_DENSITY: f64 = 0.05;

fn check_box(g: &Grid, what: &str) -> Result<()> {
    if g.is_periodic() || g.layout() != Layout::Centers {
        return Err(Error::DomainMismatch(format!("{what} must live on a cell-centered box grid, got {}", g.describe())));
    }
    Ok(())
}

fn check_same_grid(a: &Grid, b: &Grid) -> Result<()> {
    if a != b {
        return Err(Error::DomainMismatch(format!("grids differ: {} vs {}", a.describe(), b.describe())));
    }
    Ok(())
}

/// Piecewise-constant one-dimensional measure seen through its CDF.
struct Line<'a> {
    lo: f64,
    h: f64,
    mass: &'a [f64],
    cum: Vec<f64>,
}

impl<'a> Line<'a> {
    fn new(nu: &'a GridMeasure) -> Self {
        let g = nu.grid();
        let mut cum = Vec::with_capacity(g.k() + 1);
        let mut acc = 0.0;
        cum.push(0.0);
        for m in nu.mass() {
            acc += m;
            cum.push(acc);
        }
        Self { lo: g.lo()[0], h: g.step(0), mass: nu.mass(), cum }
    }

    fn total(&self) -> f64 {
        *self.cum.last().expect("nonempty")
    }

    /// Cell index and fractional position of `y`, clamped to the box.
    fn position(&self, y: f64) -> (usize, f64) {
        let k = self.mass.len();
        let t = ((y - self.lo) / self.h).clamp(0.0, k as f64);
        let c = (t.floor() as usize).min(k - 1);
        (c, t - c as f64)
    }

    fn cdf(&self, y: f64) -> f64 {
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        if y == f64::INFINITY {
            return self.total();
        }
        let (c, frac) = self.position(y);
        self.cum[c] + frac * self.mass[c]
    }

    fn density(&self, y: f64) -> f64 {
        let k = self.mass.len();
        let t = (y - self.lo) / self.h;
        if !(0.0..k as f64).contains(&t) {
            return 0.0;
        }
        self.mass[t.floor() as usize] / self.h
    }

    /// `int_{a}^{b} y nu(dy)` for `a <= b`, infinite ends allowed.
    fn moment(&self, a: f64, b: f64) -> f64 {
        let (ca, fa) = if a == f64::NEG_INFINITY { (0, 0.0) } else { self.position(a) };
        let (cb, fb) = if b == f64::INFINITY { (self.mass.len() - 1, 1.0) } else { self.position(b) };
        let mut total = 0.0;
        for c in ca..=cb {
            let t0 = if c == ca { fa } else { 0.0 };
            let t1 = if c == cb { fb } else { 1.0 };
            if t1 > t0 {
                let left = self.lo + c as f64 * self.h;
                total += self.mass[c] * (t1 - t0) * (left + 0.5 * (t0 + t1) * self.h);
            }
        }
        total
    }

    /// `int_{u1}^{u2} Q(u) du` for the quantile function `Q` of the measure.
    fn quantile_moment(&self, u1: f64, u2: f64) -> f64 {
        let mut total = 0.0;
        for (c, &m) in self.mass.iter().enumerate() {
            if m <= 0.0 {
                continue;
            }
            let (c0, c1) = (self.cum[c], self.cum[c] + m);
            let (a, b) = (u1.max(c0), u2.min(c1));
            if b > a {
                let left = self.lo + c as f64 * self.h;
                total += (b - a) * (left + (0.5 * (a + b) - c0) / m * self.h);
            }
        }
        total
    }
}

/// Lower convex hull of `(xs[i], fs[i])` with `xs` increasing; returns the
/// hull vertices and the slopes between consecutive ones.
fn lower_hull(xs: &[f64], fs: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
            // Drop b when it lies on or above the chord from a to i.
            if (fs[b] - fs[a]) * (xs[i] - xs[a]) >= (fs[i] - fs[a]) * (xs[b] - xs[a]) {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let slopes = hull.windows(2).map(|w| (fs[w[1]] - fs[w[0]]) / (xs[w[1]] - xs[w[0]])).collect();
    (hull, slopes)
}

/// Breakpoints `s_{v-1}, s_v` bounding the region where hull vertex `v` is the
/// argmax of `<x, y> - f(x)`.
fn cell_bounds(slopes: &[f64], v: usize) -> (f64, f64) {
    let a = if v == 0 { f64::NEG_INFINITY } else { slopes[v - 1] };
    let b = if v == slopes.len() { f64::INFINITY } else { slopes[v] };
    (a, b)
}

fn check_potential(f: &GridFunction, nu: &GridMeasure) -> Result<()> {
    check_box(f.grid(), "the potential")?;
    check_box(nu.grid(), "nu")?;
    if f.grid().dim() != nu.grid().dim() {
        return Err(Error::DomainMismatch("potential and nu differ in dimension".into()));
    }
    if f.values().iter().any(|v| !v.is_finite()) {
        return invalid("potential must be finite");
    }
    Ok(())
}

/// `MA_nu f = (grad f*)_# nu` as a measure on the nodes of `f`'s grid.
pub fn ma_operator(f: &GridFunction, nu: &GridMeasure) -> Result<GridMeasure> {
    check_potential(f, nu)?;
    let g = f.grid();
    if g.dim() == 1 {
        let xs = g.axis_coords(0);
        let line = Line::new(nu);
        let (hull, slopes) = lower_hull(&xs, f.values());
        let mut out = vec![0.0; g.len()];
        for (v, &i) in hull.iter().enumerate() {
            let (a, b) = cell_bounds(&slopes, v);
            out[i] = (line.cdf(b) - line.cdf(a)).max(0.0);
        }
        return GridMeasure::new(g.clone(), out);
    }
    let fstar = legendre_transform(f, nu.grid())?;
    let images = conjugate_gradients(&fstar)?;
    // Gradients of a conjugate lie in the convex hull of the nodes; clamp
    // rounding overshoot back into the box.
    let images: Vec<Vec<f64>> = images
        .into_iter()
        .map(|p| p.iter().enumerate().map(|(a, &c)| c.clamp(g.coord(a, 0), g.coord(a, g.k() - 1))).collect())
        .collect();
    pushforward(nu, &images, g)
}

/// Central differences of `f*` on its grid, second-order one-sided at the
/// boundary so that quadratics are differentiated exactly.
fn conjugate_gradients(fstar: &GridFunction) -> Result<Vec<Vec<f64>>> {
    let g = fstar.grid();
    let k = g.k();
    if k < 3 {
        return invalid("central differences need at least 3 nodes per axis");
    }
    if fstar.values().iter().any(|v| !v.is_finite()) {
        return invalid("conjugate is infinite on the dual grid");
    }
    let d = g.dim();
    Ok((0..g.len())
        .map(|idx| {
            let multi = g.multi_index(idx);
            (0..d)
                .map(|a| {
                    let h = g.step(a);
                    let at = |j: usize| {
                        let mut m = multi.clone();
                        m[a] = j;
                        fstar.value(g.flat_index(&m))
                    };
                    let j = multi[a];
                    if j == 0 {
                        (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
                    } else if j == k - 1 {
                        (3.0 * at(k - 1) - 4.0 * at(k - 2) + at(k - 3)) / (2.0 * h)
                    } else {
                        (at(j + 1) - at(j - 1)) / (2.0 * h)
                    }
                })
                .collect()
        })
        .collect())
}

/// `J_nu(theta) = int theta* nu`.
pub fn j_functional(theta: &GridFunction, nu: &GridMeasure) -> Result<f64> {
    check_potential(theta, nu)?;
    let g = theta.grid();
    if g.dim() == 1 {
        let xs = g.axis_coords(0);
        let line = Line::new(nu);
        let (hull, slopes) = lower_hull(&xs, theta.values());
        let mut total = 0.0;
        for (v, &i) in hull.iter().enumerate() {
            let (a, b) = cell_bounds(&slopes, v);
            if b > a {
                total += xs[i] * line.moment(a, b) - theta.value(i) * (line.cdf(b) - line.cdf(a));
            }
        }
        return Ok(total);
    }
    let fstar = legendre_transform(theta, nu.grid())?;
    Ok(fstar.values().iter().zip(nu.mass()).map(|(f, m)| f * m).sum())
}

/// Optimal cost `W(mu, nu) = inf_gamma int -<x, y> gamma`: exact comonotone
/// coupling in one dimension, the transport LP otherwise.
pub fn transport_cost(mu: &GridMeasure, nu: &GridMeasure) -> Result<f64> {
    check_box(mu.grid(), "mu")?;
    check_box(nu.grid(), "nu")?;
    if mu.grid().dim() == 1 {
        let line = Line::new(nu);
        let xs = mu.grid().axis_coords(0);
        let mut u = 0.0;
        let mut total = 0.0;
        for (x, m) in xs.iter().zip(mu.mass()) {
            if *m > 0.0 {
                total -= x * line.quantile_moment(u, u + m);
                u += m;
            }
        }
        return Ok(total);
    }
    let (a, b) = (mu.to_discrete()?, nu.to_discrete()?);
    let c = cost_matrix(&a.points(), &b.points(), CostKind::NegInner)?;
    Ok(kantorovich_lp(&a, &b, &c)?.objective())
}

/// Quadratic Wasserstein distance `W_2` (cost `|x - y|^2`) between two
/// one-dimensional grid measures, via their quantile functions.
pub fn w2_distance_1d(a: &GridMeasure, b: &GridMeasure) -> Result<f64> {
    if a.grid().dim() != 1 || b.grid().dim() != 1 {
        return invalid("w2_distance_1d needs one-dimensional measures");
    }
    let atoms = |m: &GridMeasure| -> Vec<(f64, f64)> {
        m.grid().axis_coords(0).into_iter().zip(m.mass().iter().copied()).filter(|(_, w)| *w > 0.0).collect()
    };
    let (pa, pb) = (atoms(a), atoms(b));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (pa[0].1, pb[0].1);
    let mut total = 0.0;
    while i < pa.len() && j < pb.len() {
        let step = ra.min(rb);
        total += step * (pa[i].0 - pb[j].0).powi(2);
        ra -= step;
        rb -= step;
        if ra <= 0.0 {
            i += 1;
            if i < pa.len() {
                ra = pa[i].1;
            }
        }
        if rb <= 0.0 {
            j += 1;
            if j < pb.len() {
                rb = pb[j].1;
            }
        }
    }
    Ok(total.max(0.0).sqrt())
}

/// Parameters of the master equation and its solver.
#[derive(Debug, Clone, PartialEq)]
pub struct MasterParams {
    pub beta: f64,
    pub mu0: GridMeasure,
    pub nu: GridMeasure,
    /// Initial step of each line search, in `(0, 1]`.
    pub damping: f64,
    pub max_iter: usize,
    /// Target total-variation residual.
    pub tol: f64,
}

impl MasterParams {
    pub const DEFAULT_MAX_ITER: usize = 500;
    pub const DEFAULT_TOL: f64 = 1e-9;

    pub fn new(beta: f64, mu0: GridMeasure, nu: GridMeasure) -> Result<Self> {
        Self::with_solver(beta, mu0, nu, 1.0, Self::DEFAULT_MAX_ITER, Self::DEFAULT_TOL)
    }

    /// `nu` defaults to the uniform measure on `mu0`'s grid.
    pub fn uniform_target(beta: f64, mu0: GridMeasure) -> Result<Self> {
        let nu = GridMeasure::uniform(mu0.grid().clone());
        Self::new(beta, mu0, nu)
    }

    pub fn with_solver(beta: f64, mu0: GridMeasure, nu: GridMeasure, damping: f64, max_iter: usize, tol: f64) -> Result<Self> {
        if !beta.is_finite() {
            return invalid("beta must be finite");
        }
        if !(damping > 0.0 && damping <= 1.0) {
            return invalid(format!("damping {damping} must lie in (0, 1]"));
        }
        if !(tol > 0.0) {
            return invalid("tolerance must be positive");
        }
        check_box(mu0.grid(), "mu0")?;
        check_same_grid(mu0.grid(), nu.grid())?;
        mu0.check_probability()?;
        nu.check_probability()?;
        Ok(Self { beta, mu0, nu, damping, max_iter, tol })
    }
}

/// Shifts `f` so that `int f nu = 0`.
pub fn normalize_mean_zero(f: &GridFunction, nu: &GridMeasure) -> Result<GridFunction> {
    check_same_grid(f.grid(), nu.grid())?;
    let mean: f64 = f.values().iter().zip(nu.mass()).map(|(a, m)| a * m).sum();
    Ok(f.add_constant(-mean))
}

/// `e^{beta theta} mu0 / int e^{beta theta} mu0`.
pub fn tilted(theta: &GridFunction, params: &MasterParams) -> Result<GridMeasure> {
    check_same_grid(theta.grid(), params.mu0.grid())?;
    let b = params.beta;
    let shift = theta
        .values()
        .iter()
        .zip(params.mu0.mass())
        .filter(|(_, m)| **m > 0.0)
        .map(|(t, _)| b * t)
        .fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = theta
        .values()
        .iter()
        .zip(params.mu0.mass())
        .map(|(t, m)| if *m > 0.0 { m * (b * t - shift).exp() } else { 0.0 })
        .collect();
    let z: f64 = raw.iter().sum();
    GridMeasure::new(theta.grid().clone(), raw.into_iter().map(|v| v / z).collect())
}

/// `F(theta) = (1/beta) I_{mu0}(beta theta) + J_nu(theta)`, and
/// `int theta mu0 + J_nu(theta)` at `beta = 0`.
pub fn f_functional(theta: &GridFunction, params: &MasterParams) -> Result<f64> {
    let j = j_functional(theta, &params.nu)?;
    let b = params.beta;
    let first = if b == 0.0 {
        theta.values().iter().zip(params.mu0.mass()).map(|(t, m)| t * m).sum()
    } else {
        log_mgf_grid(&params.mu0, &theta.map(|t| b * t)?)? / b
    };
    Ok(first + j)
}

/// Total variation `sum |T - MA_nu theta|` of the gradient of `F`, with `T`
/// the tilted measure.
pub fn f_gradient_residual(theta: &GridFunction, params: &MasterParams) -> Result<f64> {
    let t = tilted(theta, params)?;
    let ma = ma_operator(theta, &params.nu)?;
    Ok(t.mass().iter().zip(ma.mass()).map(|(a, b)| (a - b).abs()).sum())
}

/// One accepted solver step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub f_value: f64,
    pub residual: f64,
    pub step: f64,
}

/// Converged output of [`solve_master`].
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    /// `phi_min`, mean zero under `nu`.
    pub potential: GridFunction,
    /// `MA_nu phi_min`.
    pub pushforward: GridMeasure,
    /// `F(phi_min)`.
    pub f_min: f64,
    pub residual: f64,
    pub trace: Vec<IterationRecord>,
}

impl Solution {
    /// `C = beta F(phi_min)`.
    pub fn constant(&self, beta: f64) -> f64 {
        beta * self.f_min
    }
}

/// Newton system for `F` at `f` in one dimension: Hessian of the log-MGF
/// term plus the weighted Laplacian of the hull, with a rank-one term fixing
/// the constant gauge.
fn newton_direction(f: &[f64], xs: &[f64], t: &[f64], grad: &[f64], beta: f64, line: &Line) -> Option<Vec<f64>> {
    let k = f.len();
    let mut h = DMatrix::<f64>::zeros(k, k);
    if beta != 0.0 {
        for i in 0..k {
            for j in 0..k {
                h[(i, j)] = -beta * t[i] * t[j];
            }
            h[(i, i)] += beta * t[i];
        }
    }
    // Where nu puts no mass near a breakpoint, or a node is off the hull, the
    // true Hessian is flat; a floor density keeps the system definite there
    // and leaves the Newton step exact near a solution.
    let floor = FLOOR_DENSITY * line.total() / (line.h * line.mass.len() as f64);
    let mut add_edge = |a: usize, b: usize, weight: f64| {
        h[(a, a)] += weight;
        h[(b, b)] += weight;
        h[(a, b)] -= weight;
        h[(b, a)] -= weight;
    };
    let (hull, slopes) = lower_hull(xs, f);
    let mut on_hull = vec![false; k];
    for (v, w) in hull.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let rho = line.density(slopes[v]);
        add_edge(a, b, if rho > 0.0 { rho } else { floor } / (xs[b] - xs[a]));
        on_hull[a] = true;
        on_hull[b] = true;
    }
    for i in 0..k.saturating_sub(1) {
        if !on_hull[i] || !on_hull[i + 1] {
            add_edge(i, i + 1, floor / (xs[i + 1] - xs[i]));
        }
    }
    let scale = (0..k).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let gauge = scale / k as f64;
    for i in 0..k {
        for j in 0..k {
            h[(i, j)] += gauge;
        }
        h[(i, i)] += 1e-12 * scale;
    }
    let rhs = DVector::from_iterator(k, grad.iter().map(|g| -g));
    let d = h.lu().solve(&rhs)?;
    d.iter().all(|v| v.is_finite()).then(|| d.iter().copied().collect())
}

/// `(f* restricted to the support box of nu)*`: the largest function whose
/// conjugate agrees with `f*` there. It has the same `J` and `MA` as `f`, and
/// is convex with slopes inside the box.
fn c_convexify(f: &GridFunction, line: &Line) -> Result<GridFunction> {
    let xs = f.grid().axis_coords(0);
    let (lo, hi) = (line.lo, line.lo + line.h * line.mass.len() as f64);
    let (hull, slopes) = lower_hull(&xs, f.values());
    let mut ys = vec![lo, hi];
    ys.extend(slopes.iter().copied().filter(|s| *s > lo && *s < hi));
    let fstar: Vec<f64> = ys
        .iter()
        .map(|&y| hull.iter().map(|&i| xs[i] * y - f.value(i)).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let values = xs
        .iter()
        .map(|&x| ys.iter().zip(&fstar).map(|(y, fs)| x * y - fs).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    GridFunction::new(f.grid().clone(), values)
}

/// Solves `MA_nu f = e^{beta f} mu0 / int e^{beta f} mu0` by damped Newton
/// steps on `F` with Armijo backtracking, starting from `initial`. Each step
/// is renormalized to mean zero under `nu`. Stops once the total-variation
/// residual is at most `params.tol`. Only one-dimensional grids are supported.
pub fn solve_master(params: &MasterParams, initial: &GridFunction) -> Result<Solution> {
    let g = params.mu0.grid();
    if g.dim() != 1 {
        return invalid("solve_master supports one-dimensional grids");
    }
    check_same_grid(initial.grid(), g)?;
    let xs = g.axis_coords(0);
    let line = Line::new(&params.nu);
    let mut f = normalize_mean_zero(&c_convexify(initial, &line)?, &params.nu)?;
    let mut value = f_functional(&f, params)?;
    let mut trace = Vec::new();
    let mut residual_trace = Vec::new();
    for iteration in 0..=params.max_iter {
        let t = tilted(&f, params)?;
        let ma = ma_operator(&f, &params.nu)?;
        let grad: Vec<f64> = t.mass().iter().zip(ma.mass()).map(|(a, b)| a - b).collect();
        let residual: f64 = grad.iter().map(|v| v.abs()).sum();
        residual_trace.push(residual);
        let step = trace.last().map_or(0.0, |r: &IterationRecord| r.step);
        trace.push(IterationRecord { iteration, f_value: value, residual, step });
        if residual <= params.tol {
            return Ok(Solution { f_min: value, residual, pushforward: ma, potential: f, trace });
        }
        if iteration == params.max_iter {
            break;
        }
        let mut dir = newton_direction(f.values(), &xs, t.mass(), &grad, params.beta, &line);
        let slope = |d: &[f64]| d.iter().zip(&grad).map(|(a, b)| a * b).sum::<f64>();
        if dir.as_ref().is_none_or(|d| !(slope(d) < 0.0)) {
            dir = Some(grad.iter().map(|v| -v * xs.len() as f64).collect());
        }
        let dir = dir.expect("direction set above");
        let s = slope(&dir);
        let mut step = params.damping;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = GridFunction::new(g.clone(), f.values().iter().zip(&dir).map(|(a, d)| a + step * d).collect())?;
            let cand = normalize_mean_zero(&cand, &params.nu)?;
            let v = f_functional(&cand, params)?;
            // Near the solution F is flat to rounding; allow for that.
            if v <= value + ARMIJO * step * s + 4.0 * f64::EPSILON * value.abs() {
                accepted = Some((cand, v));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, v)) = accepted else { break };
        f = cand;
        value = v;
        if let Some(last) = trace.last_mut() {
            last.step = step;
        }
    }
    Err(Error::NotConverged {
        iterations: residual_trace.len().saturating_sub(1),
        last_residual: *residual_trace.last().unwrap_or(&f64::INFINITY),
        residual_trace,
    })
}

/// Convex starting guess `|x|^2 / 2`.
pub fn quadratic_potential(grid: &Grid) -> Result<GridFunction> {
    GridFunction::from_fn(grid.clone(), |x| 0.5 * x.iter().map(|c| c * c).sum::<f64>())
}

/// `G(mu) = beta W(mu, nu) + Ent(mu0, mu) + C` and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateValue {
    pub value: f64,
    /// `beta W(mu, nu)`.
    pub transport: f64,
    pub entropy: f64,
    /// `C = beta F(phi_min)`.
    pub constant: f64,
}

/// Evaluates `G` at `mu`, which must share `mu0`'s grid. The value is `+inf`
/// when `mu` charges a cell where `mu0` vanishes.
pub fn rate_function_g(mu: &GridMeasure, params: &MasterParams, solution: &Solution) -> Result<RateValue> {
    check_same_grid(mu.grid(), params.mu0.grid())?;
    let ent = entropy(&params.mu0, mu)?;
    let transport = if params.beta == 0.0 { 0.0 } else { params.beta * transport_cost(mu, &params.nu)? };
    let constant = solution.constant(params.beta);
    let value = if ent.is_finite() { transport + ent + constant } else { f64::INFINITY };
    Ok(RateValue { value, transport, entropy: ent, constant })
}

/// A master-equation problem and, once solved, its solution.
#[derive(Debug, Clone, PartialEq)]
pub struct MongeAmpereProblem {
    pub params: MasterParams,
    pub solution: Option<Solution>,
}

impl MongeAmpereProblem {
    pub fn new(params: MasterParams) -> Self {
        Self { params, solution: None }
    }

    /// Runs [`solve_master`] from `|x|^2 / 2`.
    pub fn solve(&mut self) -> Result<&Solution> {
        let init = quadratic_potential(self.params.mu0.grid())?;
        Ok(self.solution.insert(solve_master(&self.params, &init)?))
    }

    pub fn solution(&self) -> Result<&Solution> {
        self.solution.as_ref().ok_or(Error::SolverNotRun)
    }

    pub fn rate(&self, mu: &GridMeasure) -> Result<RateValue> {
        rate_function_g(mu, &self.params, self.solution()?)
    }
}

/// Certificates for the minimizer of `G`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpropReport {
    /// `sum |MA_nu phi - e^{beta phi} mu0 / Z|`.
    pub tv_residual: f64,
    /// `W(mu, nu) + J_nu(phi) + int phi mu` at `mu = MA_nu phi` (zero at equality).
    pub transport_certificate: f64,
    /// `Ent(mu0, mu) - [int beta phi mu - I_{mu0}(beta phi)]` at the tilted
    /// measure (zero at equality).
    pub entropy_certificate: f64,
    /// `G(MA_nu phi)`.
    pub minimum: f64,
    /// Smallest probe value.
    pub min_probe: f64,
    pub probes: usize,
    /// Every probe has `G >= G(MA_nu phi)`.
    pub minimal: bool,
    /// Every probe with `G < 1e-8` is within `W_2` distance `1e-3` of the minimizer.
    pub unique: bool,
}

/// Checks the minimizer identities at the solved potential and compares `G`
/// at the pushforward against every probe.
pub fn gprop_consistency(problem: &MongeAmpereProblem, probes: &[GridMeasure]) -> Result<GpropReport> {
    let sol = problem.solution()?;
    let p = &problem.params;
    let phi = &sol.potential;
    let mu = &sol.pushforward;
    let tv_residual = f_gradient_residual(phi, p)?;
    let pair = |m: &GridMeasure| -> f64 { phi.values().iter().zip(m.mass()).map(|(a, b)| a * b).sum() };
    let transport_certificate = transport_cost(mu, &p.nu)? + j_functional(phi, &p.nu)? + pair(mu);
    let t = tilted(phi, p)?;
    let log_mgf = log_mgf_grid(&p.mu0, &phi.map(|v| p.beta * v)?)?;
    let entropy_certificate = entropy(&p.mu0, &t)? - (p.beta * pair(&t) - log_mgf);
    let minimum = problem.rate(mu)?.value;
    let mut min_probe = f64::INFINITY;
    let mut minimal = true;
    let mut unique = true;
    for probe in probes {
        let v = problem.rate(probe)?.value;
        min_probe = min_probe.min(v);
        minimal &= v >= minimum;
        if v < 1e-8 && p.mu0.grid().dim() == 1 {
            unique &= w2_distance_1d(probe, mu)? <= 1e-3;
        }
    }
    Ok(GpropReport {
        tv_residual,
        transport_certificate,
        entropy_certificate,
        minimum,
        min_probe,
        probes: probes.len(),
        minimal,
        unique,
    })
}

/// Deterministic perturbations `base * exp(scale * xi) / Z` of a measure, with
/// `xi` a random trigonometric polynomial of low degree in each coordinate.
pub fn perturbation_probes(base: &GridMeasure, count: usize, scale: f64, seed: u64) -> Result<Vec<GridMeasure>> {
    let g = base.grid();
    let pts: Vec<Vec<f64>> = g.points().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * std::f64::consts::PI;
    (0..count)
        .map(|_| {
            let coeffs: Vec<(usize, usize, f64, f64)> = (0..g.dim())
                .flat_map(|a| (1..=3).map(move |m| (a, m)))
                .map(|(a, m)| (a, m, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let raw: Vec<f64> = pts
                .iter()
                .zip(base.mass())
                .map(|(x, w)| {
                    let xi: f64 = coeffs
                        .iter()
                        .map(|&(a, m, c, s)| {
                            let arg = tau * m as f64 * (x[a] - g.lo()[a]) / (g.hi()[a] - g.lo()[a]);
                            c * arg.cos() + s * arg.sin()
                        })
                        .sum();
                    w * (scale * xi).exp()
                })
                .collect();
            let z: f64 = raw.iter().sum();
            GridMeasure::new(g.clone(), raw.into_iter().map(|v| v / z).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{w2_empirical, Metric};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit(k: usize) -> Grid {
        Grid::cells(1, k, 0.0, 1.0).unwrap()
    }

    fn bump(k: usize) -> GridMeasure {
        GridMeasure::from_density_fn(unit(k), |x| 1.0 + 0.5 * (2.0 * std::f64::consts::PI * x[0]).cos()).unwrap()
    }

    fn l1(a: &GridMeasure, b: &GridMeasure) -> f64 {
        a.mass().iter().zip(b.mass()).map(|(x, y)| (x - y).abs()).sum()
    }

    #[test]
    fn quadratic_pushes_nu_to_itself() {
        for g in [unit(64), Grid::cells(2, 16, 0.0, 1.0).unwrap()] {
            let nu = GridMeasure::uniform(g.clone());
            let ma = ma_operator(&quadratic_potential(&g).unwrap(), &nu).unwrap();
            assert!(l1(&ma, &nu) < 1e-12, "{}", l1(&ma, &nu));
            assert!((ma.total_mass() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_term_shifts_the_image() {
        let k = 32;
        let c = 2.0 / k as f64;
        let g = unit(k);
        let nu = GridMeasure::uniform(g.clone());
        let f = GridFunction::from_fn(g, |x| 0.5 * x[0] * x[0] + c * x[0]).unwrap();
        let ma = ma_operator(&f, &nu).unwrap();
        // Interior density is nu shifted by -c; the boundary collects the overflow.
        assert!((ma.mass()[0] - 3.0 / k as f64).abs() < 1e-12);
        for i in 1..k - 2 {
            assert!((ma.mass()[i] - 1.0 / k as f64).abs() < 1e-12);
        }
        assert_eq!(ma.mass()[k - 1], 0.0);
        assert!(ma.mass()[k - 2].abs() < 1e-12);
    }

    #[test]
    fn cubic_matches_hessian_density_under_refinement() {
        // f' = x^2 maps [0, 1] onto itself, so MA f has density f'' = 2x.
        let gap = |k: usize| {
            let g = unit(k);
            let nu = GridMeasure::uniform(g.clone());
            let f = GridFunction::from_fn(g.clone(), |x| x[0].powi(3) / 3.0).unwrap();
            let ma = ma_operator(&f, &nu).unwrap();
            let h = 1.0 / k as f64;
            let oracle = GridMeasure::new(g, (0..k).map(|i| ((i + 1) as f64 * h).powi(2) - (i as f64 * h).powi(2)).collect()).unwrap();
            l1(&ma, &oracle)
        };
        let (a, b, c) = (gap(32), gap(128), gap(512));
        assert!(a > b && b > c && c < 0.01, "{a} {b} {c}");
    }

    #[test]
    fn j_examples() {
        let g = unit(256);
        let nu = GridMeasure::uniform(g.clone());
        let q = quadratic_potential(&g).unwrap();
        let j = j_functional(&q, &nu).unwrap();
        // Conjugate of the sampled quadratic is within h^2/8 of y^2/2.
        assert!((j - 1.0 / 6.0).abs() < 1e-5, "{j}");
        let shifted = j_functional(&q.add_constant(0.3), &nu).unwrap();
        assert!((j - shifted - 0.3).abs() < 1e-12);
        let g2 = Grid::cells(2, 16, 0.0, 1.0).unwrap();
        let nu2 = GridMeasure::uniform(g2.clone());
        let j2 = j_functional(&quadratic_potential(&g2).unwrap(), &nu2).unwrap();
        assert!((j2 - 1.0 / 3.0).abs() < 1e-2);
    }

    #[test]
    fn transport_cost_matches_lp() {
        let k = 12;
        let mu = bump(k);
        let nu = GridMeasure::uniform(unit(k));
        let exact = transport_cost(&mu, &nu).unwrap();
        // Refining nu into atoms approaches the semi-discrete value from the LP.
        let fine = GridMeasure::uniform(unit(k * 32));
        let (a, b) = (mu.to_discrete().unwrap(), fine.to_discrete().unwrap());
        let c = cost_matrix(&a.points(), &b.points(), CostKind::NegInner).unwrap();
        let lp = kantorovich_lp(&a, &b, &c).unwrap().objective();
        assert!((exact - lp).abs() < 1e-5, "{exact} {lp}");
    }

    #[test]
    fn w2_distance_matches_sorted_formula() {
        let g = unit(8);
        let a = GridMeasure::uniform(g.clone());
        let mut shifted = vec![0.0; 8];
        shifted[1..].copy_from_slice(&a.mass()[..7]);
        shifted[7] += a.mass()[7];
        let b = GridMeasure::new(g, shifted).unwrap();
        let emp = w2_empirical(&a.to_discrete().unwrap(), &b.to_discrete().unwrap(), Metric::Euclidean);
        let d = w2_distance_1d(&a, &b).unwrap();
        // Seven atoms move one cell; compare with the direct sum.
        assert!((d * d - 7.0 / 8.0 / 64.0).abs() < 1e-15);
        assert!(emp.is_err() || (emp.unwrap() - d * d).abs() < 1e-12);
    }

    #[test]
    fn f_functional_gauge_and_small_beta() {
        let g = unit(64);
        let mu0 = bump(64);
        let theta = GridFunction::from_fn(g, |x| 0.5 * x[0] * x[0] + 0.1 * (3.0 * x[0]).sin()).unwrap();
        for beta in [-1.0, 0.0, 2.0] {
            let p = MasterParams::uniform_target(beta, mu0.clone()).unwrap();
            let a = f_functional(&theta, &p).unwrap();
            let b = f_functional(&theta.add_constant(1.7), &p).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let limit = f_functional(&theta, &MasterParams::uniform_target(0.0, mu0.clone()).unwrap()).unwrap();
        let norm = theta.sup_norm();
        for beta in [1e-3, -1e-3] {
            let v = f_functional(&theta, &MasterParams::uniform_target(beta, mu0.clone()).unwrap()).unwrap();
            assert!((v - limit).abs() <= beta.abs() * norm * norm);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let k = 48;
        let g = unit(k);
        let p = MasterParams::uniform_target(1.5, bump(k)).unwrap();
        let theta = GridFunction::from_fn(g.clone(), |x| 0.6 * x[0] * x[0] + 0.05 * (5.0 * x[0]).cos()).unwrap();
        let grad: Vec<f64> = tilted(&theta, &p)
            .unwrap()
            .mass()
            .iter()
            .zip(ma_operator(&theta, &p.nu).unwrap().mass())
            .map(|(a, b)| a - b)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let eta: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let expect: f64 = eta.iter().zip(&grad).map(|(a, b)| a * b).sum();
            let t = 1e-6;
            let moved = |s: f64| {
                GridFunction::new(g.clone(), theta.values().iter().zip(&eta).map(|(a, e)| a + s * e).collect()).unwrap()
            };
            let fd = (f_functional(&moved(t), &p).unwrap() - f_functional(&moved(-t), &p).unwrap()) / (2.0 * t);
            assert!((fd - expect).abs() < 1e-6, "{fd} {expect}");
        }
    }

    #[test]
    fn symmetric_fixed_point_at_zero_beta() {
        let g = unit(64);
        let p = MasterParams::uniform_target(0.0, GridMeasure::uniform(g.clone())).unwrap();
        let sol = solve_master(&p, &quadratic_potential(&g).unwrap()).unwrap();
        assert!(sol.residual <= 1e-6);
        let expect = normalize_mean_zero(&quadratic_potential(&g).unwrap(), &p.nu).unwrap();
        assert!(sol.potential.zip_with(&expect, |a, b| a - b).unwrap().sup_norm() < 1e-9);
    }

    #[test]
    fn solver_descends_and_normalizes() {
        let k = 96;
        let p = MasterParams::uniform_target(1.0, bump(k)).unwrap();
        let init = GridFunction::from_fn(unit(k), |x| 0.8 * x[0] * x[0]).unwrap();
        let sol = solve_master(&p, &init).unwrap();
        assert!(sol.residual <= 1e-6);
        for w in sol.trace.windows(2) {
            assert!(w[1].f_value <= w[0].f_value + 1e-14);
        }
        let mean: f64 = sol.potential.values().iter().zip(p.nu.mass()).map(|(a, b)| a * b).sum();
        assert!(mean.abs() < 1e-10);
        let p4 = MasterParams::uniform_target(4.0, bump(k)).unwrap();
        let sol4 = solve_master(&p4, &init).unwrap();
        assert!(sol4.residual <= 1e-6);
        assert!(sol4.potential.zip_with(&sol.potential, |a, b| a - b).unwrap().sup_norm() > 1e-3);
    }

    #[test]
    fn solver_reports_non_convergence() {
        let k = 32;
        let p = MasterParams::with_solver(1.0, bump(k), GridMeasure::uniform(unit(k)), 1.0, 0, 1e-9).unwrap();
        match solve_master(&p, &quadratic_potential(&unit(k)).unwrap()) {
            Err(Error::NotConverged { residual_trace, .. }) => assert_eq!(residual_trace.len(), 1),
            other => panic!("{other:?}"),
        }
        assert!(MasterParams::with_solver(1.0, bump(k), GridMeasure::uniform(unit(k)), 1.5, 5, 1e-9).is_err());
    }

    #[test]
    fn rate_function_examples() {
        let k = 64;
        let mut prob = MongeAmpereProblem::new(MasterParams::uniform_target(1.0, bump(k)).unwrap());
        assert!(matches!(prob.rate(&bump(k)), Err(Error::SolverNotRun)));
        let mu = prob.solve().unwrap().pushforward.clone();
        assert!(prob.rate(&mu).unwrap().value.abs() < 1e-9);
        let mut spike = vec![0.0; k];
        spike[3] = 1.0;
        let mut mu0 = bump(k).mass().to_vec();
        mu0[3] = 0.0;
        let s: f64 = mu0.iter().sum();
        let p = MasterParams::uniform_target(1.0, GridMeasure::new(unit(k), mu0.iter().map(|m| m / s).collect()).unwrap()).unwrap();
        let mut prob0 = MongeAmpereProblem::new(p);
        prob0.solve().unwrap();
        assert_eq!(prob0.rate(&GridMeasure::new(unit(k), spike).unwrap()).unwrap().value, f64::INFINITY);
        for probe in perturbation_probes(&mu, 20, 0.1, 4).unwrap() {
            let r = prob.rate(&probe).unwrap();
            assert!(r.value > 0.0);
            assert!((r.value - (r.transport + r.entropy + r.constant)).abs() < 1e-12);
        }
    }

    #[test]
    fn gprop_certificates() {
        for beta in [0.0, 1.0, -0.5] {
            let k = 64;
            let mu0 = if beta == 0.0 { GridMeasure::uniform(unit(k)) } else { bump(k) };
            let mut prob = MongeAmpereProblem::new(MasterParams::uniform_target(beta, mu0).unwrap());
            let mu = prob.solve().unwrap().pushforward.clone();
            let probes = perturbation_probes(&mu, 50, 0.05, 11).unwrap();
            let r = gprop_consistency(&prob, &probes).unwrap();
            assert!(r.tv_residual <= 1e-6);
            assert!(r.transport_certificate.abs() <= 1e-6 && r.entropy_certificate.abs() <= 1e-6);
            assert!(r.minimal && r.unique);
        }
    }

    #[test]
    fn duality_bracket_is_strict_off_the_pushforward() {
        let k = 64;
        let mut prob = MongeAmpereProblem::new(MasterParams::uniform_target(1.0, bump(k)).unwrap());
        let sol = prob.solve().unwrap().clone();
        let j = j_functional(&sol.potential, &prob.params.nu).unwrap();
        let pair = |m: &GridMeasure| -> f64 { sol.potential.values().iter().zip(m.mass()).map(|(a, b)| a * b).sum() };
        let at = transport_cost(&sol.pushforward, &prob.params.nu).unwrap() + j + pair(&sol.pushforward);
        assert!(at.abs() < 1e-12);
        for probe in perturbation_probes(&sol.pushforward, 10, 0.1, 2).unwrap() {
            assert!(transport_cost(&probe, &prob.params.nu).unwrap() + j + pair(&probe) > 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ma_is_a_probability(coeffs in proptest::collection::vec(-0.3f64..0.3, 4)) {
            let g = unit(40);
            let nu = bump(40);
            let f = GridFunction::from_fn(g, |x| {
                0.5 * x[0] * x[0] + coeffs.iter().enumerate().map(|(m, c)| c * ((m + 1) as f64 * x[0]).sin()).sum::<f64>()
            }).unwrap();
            let ma = ma_operator(&f, &nu).unwrap();
            prop_assert!((ma.total_mass() - 1.0).abs() < 1e-14);
            prop_assert!(ma.mass().iter().all(|m| *m >= 0.0));
        }

        #[test]
        fn j_is_midpoint_convex(a in proptest::collection::vec(-1.0f64..1.0, 3), b in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let g = unit(50);
            let nu = bump(50);
            let mk = |c: &[f64]| GridFunction::from_fn(g.clone(), |x| c[0] * x[0] + c[1] * x[0] * x[0] + c[2] * (4.0 * x[0]).sin()).unwrap();
            let (fa, fb) = (mk(&a), mk(&b));
            let mid = fa.zip_with(&fb, |x, y| 0.5 * (x + y)).unwrap();
            let ja = j_functional(&fa, &nu).unwrap();
            let jb = j_functional(&fb, &nu).unwrap();
            prop_assert!(j_functional(&mid, &nu).unwrap() <= 0.5 * (ja + jb) + 1e-12);
        }

        #[test]
        fn duality_bracket_holds(c in proptest::collection::vec(-1.0f64..1.0, 3), seed in 0u64..100) {
            let g = unit(32);
            let nu = GridMeasure::uniform(g.clone());
            let f = GridFunction::from_fn(g.clone(), |x| c[0] * x[0] + c[1] * x[0] * x[0] + c[2] * (6.0 * x[0]).cos()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..32).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let mu = GridMeasure::new(g, raw.iter().map(|v| v / s).collect()).unwrap();
            let pair: f64 = f.values().iter().zip(mu.mass()).map(|(a, b)| a * b).sum();
            prop_assert!(transport_cost(&mu, &nu).unwrap() + j_functional(&f, &nu).unwrap() + pair >= -1e-12);
        }
    }
}
