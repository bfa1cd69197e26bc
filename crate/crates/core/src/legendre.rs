//! Discrete Legendre transforms on tensor grids and the entropy / log-MGF
//! duality on finite alphabets.
//!
//! `+inf` values of a [`GridFunction`] lie outside its effective domain and are
//! skipped exactly by every max-scan.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, Layout};
use crate::measures::{entropy, log_mgf_weights, DiscreteMeasure};
use crate::torus::torus_sq_dist;

pub use crate::grid::GridFunction;

/// Padding applied on each side of the discrete gradient range by
/// [`default_dual_grid`], as a fraction of the range width.
pub const DUAL_PADDING: f64 = 0.1;

/// `f*(y) = max_x <x, y> - f(x)` over the nodes of `f`'s grid, for every
/// node `y` of `dual`. The maximization is separable and done axis by axis in
/// `O(k k')` per axis and row.
pub fn legendre_transform(f: &GridFunction, dual: &Grid) -> Result<GridFunction> {
    let g = f.grid();
    if dual.dim() != g.dim() {
        return Err(Error::DomainMismatch(format!(
            "{}-dimensional dual grid for a {}-dimensional function",
            dual.dim(),
            g.dim()
        )));
    }
    if !f.is_finite_somewhere() {
        return Err(Error::EmptyEffectiveDomain);
    }
    let d = g.dim();
    // h_0 = -f; h_a maximizes x_a y_a + h_{a-1} over the a-th primal axis.
    let mut data: Vec<f64> = f.values().iter().map(|&v| -v).collect();
    let mut shape = vec![g.k(); d];
    for a in 0..d {
        let xs = g.axis_coords(a);
        let ys = dual.axis_coords(a);
        let outer: usize = shape[..a].iter().product();
        let inner: usize = shape[a + 1..].iter().product();
        let kin = shape[a];
        let kout = ys.len();
        let mut next = vec![f64::NEG_INFINITY; outer * kout * inner];
        next.par_chunks_mut(kout * inner).enumerate().for_each(|(o, block)| {
            let src = &data[o * kin * inner..(o + 1) * kin * inner];
            for (j, &y) in ys.iter().enumerate() {
                let out = &mut block[j * inner..(j + 1) * inner];
                for (m, &x) in xs.iter().enumerate() {
                    let row = &src[m * inner..(m + 1) * inner];
                    let xy = x * y;
                    for (o_val, &h) in out.iter_mut().zip(row) {
                        if h != f64::NEG_INFINITY {
                            let cand = xy + h;
                            if cand > *o_val {
                                *o_val = cand;
                            }
                        }
                    }
                }
            }
        });
        shape[a] = kout;
        data = next;
    }
    GridFunction::new(dual.clone(), data)
}

/// Endpoint-inclusive dual grid spanning the range of forward-difference
/// slopes of `f` along each axis, padded by [`DUAL_PADDING`] of the width.
pub fn default_dual_grid(f: &GridFunction, k: usize) -> Result<Grid> {
    let g = f.grid();
    let d = g.dim();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for idx in 0..g.len() {
        let multi = g.multi_index(idx);
        let v = f.value(idx);
        if !v.is_finite() {
            continue;
        }
        for a in 0..d {
            if multi[a] + 1 >= g.k() {
                continue;
            }
            let mut up = multi.clone();
            up[a] += 1;
            let w = f.value(g.flat_index(&up));
            if !w.is_finite() {
                continue;
            }
            let s = (w - v) / (g.coord(a, multi[a] + 1) - g.coord(a, multi[a]));
            lo[a] = lo[a].min(s);
            hi[a] = hi[a].max(s);
        }
    }
    if lo.iter().any(|v| !v.is_finite()) {
        return Err(Error::EmptyEffectiveDomain);
    }
    for a in 0..d {
        let width = hi[a] - lo[a];
        let pad = if width > 0.0 { DUAL_PADDING * width } else { DUAL_PADDING * (1.0 + lo[a].abs()) };
        lo[a] -= pad;
        hi[a] += pad;
    }
    Grid::new(k, lo, hi, Layout::Nodes, false)
}

/// Value of `f` at the grid point `x` (which must be a node up to rounding).
pub fn value_at_node(f: &GridFunction, x: &[f64]) -> Result<f64> {
    let g = f.grid();
    let idx = g
        .locate(x)
        .ok_or_else(|| Error::OutOfDomain { point: x.to_vec(), domain: g.describe() })?;
    let node = g.point(idx);
    let off = node
        .iter()
        .zip(x)
        .enumerate()
        .any(|(a, (n, v))| (n - v).abs() > 1e-9 * g.step(a).max(1.0));
    if off {
        return invalid(format!("{x:?} is not a grid node"));
    }
    Ok(f.value(idx))
}

/// Young gap `f(x) + f*(y) - <x, y>` at grid nodes `x` and `y`.
pub fn duality_gap(f: &GridFunction, fstar: &GridFunction, x: &[f64], y: &[f64]) -> Result<f64> {
    let fx = value_at_node(f, x)?;
    let fy = value_at_node(fstar, y)?;
    let xy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok(fx + fy - xy)
}

/// Outcome of [`biconjugate_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct BiconjugateReport {
    /// `sup max(0, f** - f)`; zero up to rounding for every `f`.
    pub overshoot: f64,
    /// Whether `f` passed the axis-wise discrete midpoint convexity test.
    pub convex: bool,
    /// `sup (f - f**)` over the effective domain.
    pub undershoot: f64,
    /// The biconjugate sampled on `f`'s grid.
    pub biconjugate: GridFunction,
    /// Step of the intermediate dual grid along each axis.
    pub dual_step: Vec<f64>,
}

impl BiconjugateReport {
    /// Overshoot plus, when `f` is convex, the undershoot.
    pub fn gap(&self) -> f64 {
        self.overshoot + if self.convex { self.undershoot } else { 0.0 }
    }
}

/// Computes `f**` through the default dual grid at `f`'s resolution and
/// compares it with `f`.
pub fn biconjugate_check(f: &GridFunction) -> Result<BiconjugateReport> {
    let dual = default_dual_grid(f, f.grid().k())?;
    let fstar = legendre_transform(f, &dual)?;
    let fss = legendre_transform(&fstar, f.grid())?;
    let mut overshoot = 0.0_f64;
    let mut undershoot = 0.0_f64;
    for (&v, &w) in f.values().iter().zip(fss.values()) {
        if v.is_finite() {
            overshoot = overshoot.max(w - v);
            undershoot = undershoot.max(v - w);
        }
    }
    Ok(BiconjugateReport {
        overshoot,
        convex: is_midpoint_convex(f, 1e-12),
        undershoot,
        biconjugate: fss,
        dual_step: (0..dual.dim()).map(|a| dual.step(a)).collect(),
    })
}

/// Discrete midpoint convexity along every grid axis: second differences are
/// at least `-tol` (relative to the values involved) wherever all three
/// values are finite.
pub fn is_midpoint_convex(f: &GridFunction, tol: f64) -> bool {
    let g = f.grid();
    for idx in 0..g.len() {
        let multi = g.multi_index(idx);
        for a in 0..g.dim() {
            if multi[a] == 0 || multi[a] + 1 >= g.k() {
                continue;
            }
            let mut lo = multi.clone();
            lo[a] -= 1;
            let mut hi = multi.clone();
            hi[a] += 1;
            let (l, c, h) = (f.value(g.flat_index(&lo)), f.value(idx), f.value(g.flat_index(&hi)));
            if l.is_finite() && c.is_finite() && h.is_finite() {
                let scale = 1.0 + l.abs().max(c.abs()).max(h.abs());
                if l + h - 2.0 * c < -tol * scale {
                    return false;
                }
            }
        }
    }
    true
}

/// Largest supported alphabet for [`ent_dual_check`].
pub const MAX_DUAL_ALPHABET: usize = 16;

/// Outcome of [`ent_dual_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct EntDualReport {
    /// `Ent(mu0, nu)`.
    pub entropy: f64,
    /// Best value of `<theta, nu> - I_mu0(theta)` found by the grid search.
    pub grid_sup: f64,
    /// Value of the dual objective at `theta = log(nu / mu0)`.
    pub closed_form: f64,
    /// Half-width of the coordinate box searched.
    pub theta_radius: f64,
}

/// Box `[-THETA_RADIUS, THETA_RADIUS]` searched per coordinate.
const THETA_RADIUS: f64 = 40.0;

/// Compares `Ent(mu0, nu)` with the dual sup `sup_theta <theta,nu> - I_mu0(theta)`.
///
/// The sup is searched by cyclic coordinate ascent; each coordinate update is
/// a 1-D grid search that is zoomed around the incumbent. The first
/// coordinate is pinned to zero since the objective is invariant under adding
/// constants to `theta`.
pub fn ent_dual_check(mu0: &DiscreteMeasure, nu: &DiscreteMeasure) -> Result<EntDualReport> {
    let k = mu0.len();
    if k > MAX_DUAL_ALPHABET {
        return invalid(format!("alphabet of size {k} exceeds {MAX_DUAL_ALPHABET}"));
    }
    let m = alphabet_weights(mu0)?;
    let v = alphabet_weights(nu)?;
    if m.len() != v.len() {
        return Err(Error::DomainMismatch(format!("alphabets of size {} and {}", m.len(), v.len())));
    }
    if m.iter().any(|&w| w <= 0.0) {
        return invalid("reference measure must charge every letter");
    }
    let ent = entropy(mu0, nu)?;

    let objective = |theta: &[f64]| -> f64 {
        let lin: f64 = theta.iter().zip(&v).map(|(t, w)| t * w).sum();
        lin - log_mgf_weights(&m, theta).expect("finite potential")
    };

    // theta = log(nu/mu0); letters with nu = 0 get theta = -inf and drop out.
    let support: Vec<usize> = (0..k).filter(|&i| v[i] > 0.0).collect();
    let ms: Vec<f64> = support.iter().map(|&i| m[i]).collect();
    let ts: Vec<f64> = support.iter().map(|&i| (v[i] / m[i]).ln()).collect();
    let lin: f64 = support.iter().zip(&ts).map(|(&i, t)| t * v[i]).sum();
    let closed_form = lin - log_mgf_weights(&ms, &ts)?;

    let mut theta = vec![0.0; k];
    let mut best = objective(&theta);
    let points = 41;
    for _sweep in 0..60 {
        let before = best;
        for c in 1..k {
            let mut center = theta[c];
            let mut half = THETA_RADIUS;
            for _zoom in 0..12 {
                let lo = (center - half).max(-THETA_RADIUS);
                let hi = (center + half).min(THETA_RADIUS);
                for s in 0..points {
                    let t = lo + (hi - lo) * s as f64 / (points - 1) as f64;
                    theta[c] = t;
                    let val = objective(&theta);
                    if val > best {
                        best = val;
                        center = t;
                    }
                }
                theta[c] = center;
                half *= 0.25;
            }
        }
        if best - before < 1e-13 {
            break;
        }
    }
    Ok(EntDualReport { entropy: ent, grid_sup: best, closed_form, theta_radius: THETA_RADIUS })
}

fn alphabet_weights(mu: &DiscreteMeasure) -> Result<Vec<f64>> {
    let crate::measures::Domain::Alphabet(size) = mu.domain() else {
        return invalid("entropy duality needs measures on a finite alphabet");
    };
    let mut w = vec![0.0; size];
    for a in mu.atoms() {
        w[a.point[0] as usize] += a.weight;
    }
    Ok(w)
}

/// Torus c-transform for the cost `d(x, y)^2`:
/// `f^c(y) = max_x [-d(x, y)^2 - f(x)]` over the nodes of `f`'s grid, for each
/// query point `y`. With `f = -theta` this is the zero-temperature limit of
/// `(1/n) log int e^{n theta} phi_i mu0` at the lattice point `y = p_i`.
pub fn torus_c_transform(f: &GridFunction, ys: &[Vec<f64>]) -> Result<Vec<f64>> {
    if !f.is_finite_somewhere() {
        return Err(Error::EmptyEffectiveDomain);
    }
    let g = f.grid();
    let xs: Vec<Vec<f64>> = g.points().collect();
    ys.par_iter()
        .map(|y| {
            let mut best = f64::NEG_INFINITY;
            for (x, &v) in xs.iter().zip(f.values()) {
                if v.is_finite() {
                    best = best.max(-torus_sq_dist(x, y)? - v);
                }
            }
            Ok(best)
        })
        .collect()
}
