//! Permanents, the permanental and tropical Hamiltonians on the torus, their
//! Gibbs ensembles, and the large deviation estimates built on them.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, GridFunction};
use crate::legendre::torus_c_transform;
use crate::measures::{entropy, Atom, DiscreteMeasure, Domain, EmpiricalConfig, GridMeasure};
use crate::torus::{log_phi_matrix, log_theta, TorusLattice, ThetaParams};
use crate::transport::{cost_matrix, hungarian, kantorovich_lp, w2_empirical, w2_semidiscrete, Metric};

/// Largest matrix handled by Ryser's formula.
pub const RYSER_MAX: usize = 24;
/// Largest number of site tuples enumerated by the exact backend.
pub const EXACT_BUDGET: u128 = 1 << 22;
/// Largest number of tuples summed by tensor quadrature.
pub const QUADRATURE_BUDGET: u128 = 1 << 24;
/// Default refinement of the `1/n` lattice used as exact-backend sites.
pub const DEFAULT_SITE_REFINE: usize = 4;

fn check_square(a: &DMatrix<f64>) -> Result<usize> {
    let (rows, cols) = a.shape();
    if rows != cols {
        return Err(Error::NotSquare { rows, cols });
    }
    if rows > RYSER_MAX {
        return invalid(format!("permanent of a {rows}x{rows} matrix exceeds the Ryser limit {RYSER_MAX}"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return invalid("matrix entries must be finite");
    }
    Ok(rows)
}

/// `per A = sum_sigma prod_i A[i][sigma(i)]` by Ryser's inclusion-exclusion
/// formula, visiting column subsets in Gray-code order.
pub fn permanent(a: &DMatrix<f64>) -> Result<f64> {
    let n = check_square(a)?;
    if n == 0 {
        return Ok(1.0);
    }
    let mut row_sums = vec![0.0; n];
    let mut in_set = vec![false; n];
    let mut total = 0.0;
    for k in 1u64..(1u64 << n) {
        let j = k.trailing_zeros() as usize;
        let sign = if in_set[j] { -1.0 } else { 1.0 };
        in_set[j] = !in_set[j];
        for (i, r) in row_sums.iter_mut().enumerate() {
            *r += sign * a[(i, j)];
        }
        let size = (k ^ (k >> 1)).count_ones() as usize;
        let prod: f64 = row_sums.iter().product();
        if (n - size) % 2 == 0 {
            total += prod;
        } else {
            total -= prod;
        }
    }
    Ok(total)
}

/// `log per exp(L)` for a matrix of logarithms: each row is rescaled by its
/// maximum so Ryser's formula works on entries in `(0, 1]`.
pub fn log_permanent_of_logs(logs: &DMatrix<f64>) -> Result<f64> {
    let n = check_square(logs)?;
    let shifts: Vec<f64> = (0..n).map(|i| logs.row(i).max()).collect();
    let scaled = DMatrix::from_fn(n, n, |i, j| (logs[(i, j)] - shifts[i]).exp());
    let p = permanent(&scaled)?;
    if !(p > 0.0) {
        return invalid("permanent of the rescaled matrix is not positive");
    }
    Ok(shifts.iter().sum::<f64>() + p.ln())
}

/// `log tsper exp(L) = max_sigma sum_i L[i][sigma(i)]`.
pub fn log_tropical_permanent_of_logs(logs: &DMatrix<f64>) -> Result<f64> {
    Ok(-hungarian(&logs.map(|v| -v))?.cost)
}

/// Semi-tropical permanent `max_sigma prod_i A[i][sigma(i)]` of a positive matrix.
pub fn tropical_permanent(a: &DMatrix<f64>) -> Result<f64> {
    if a.iter().any(|&v| !(v > 0.0)) {
        return invalid("tropical permanent needs strictly positive entries");
    }
    Ok(log_tropical_permanent_of_logs(&a.map(f64::ln))?.exp())
}

/// Which symmetrization of `Phi` defines the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum HamiltonianKind {
    /// `-(1/n) log per Phi`.
    Permanental,
    /// `-(1/n) log tsper Phi`.
    Tropical,
}

impl std::str::FromStr for HamiltonianKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "permanental" | "per" => Ok(Self::Permanental),
            "tropical" | "tsper" => Ok(Self::Tropical),
            other => invalid(format!("unknown hamiltonian `{other}` (expected permanental or tropical)")),
        }
    }
}

/// `H_n` from a matrix `L = [log phi_i(x_j)]`.
fn hamiltonian_of_logs(kind: HamiltonianKind, n: usize, logs: &DMatrix<f64>) -> Result<f64> {
    let n = n as f64;
    Ok(match kind {
        HamiltonianKind::Permanental => -log_permanent_of_logs(logs)? / n,
        HamiltonianKind::Tropical => hungarian(&logs.map(|v| -v))?.cost / n,
    })
}

/// `H_n(x_1, .., x_N)`. The configuration is put in a canonical order first,
/// which makes the value exactly invariant under permutations.
pub fn hamiltonian(
    kind: HamiltonianKind,
    lattice: &TorusLattice,
    params: &ThetaParams,
    config: &EmpiricalConfig,
) -> Result<f64> {
    let mut pts = config.points().to_vec();
    pts.sort_by(|a, b| lex_cmp(a, b));
    let sorted = EmpiricalConfig::new(config.domain(), pts)?;
    hamiltonian_of_logs(kind, params.n, &log_phi_matrix(lattice, params, &sorted)?)
}

fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

/// Outcome of [`hamiltonian_w2_gap`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HamiltonianGap {
    pub kind: HamiltonianKind,
    pub n: usize,
    pub d: usize,
    pub trials: usize,
    /// `max |H_n / N - W_2^2(delta(p), delta(x))|` over the sampled configurations.
    pub max_gap: f64,
    /// Theta bracket width `(1/n) log (2R+1)^d`, plus `(1/(nN)) log N!` for
    /// the permanental kind.
    pub bound: f64,
    /// `max |W_2(dx, delta(x)) - W_2(delta(p), delta(x))|` when a quadrature grid was given.
    pub max_uniform_gap: Option<f64>,
    /// `W_2(dx, delta(p))` at the same grid, which bounds `max_uniform_gap`.
    pub uniform_bound: Option<f64>,
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// Compares `H_n / n^d` with the lattice-empirical `W_2^2` on random
/// configurations; with `grid_k` it also compares against `W_2^2(dx, .)`
/// computed semi-discretely on a `grid_k^d` torus grid.
pub fn hamiltonian_w2_gap(
    kind: HamiltonianKind,
    n: usize,
    d: usize,
    radius: usize,
    trials: usize,
    seed: u64,
    grid_k: Option<usize>,
) -> Result<HamiltonianGap> {
    let lattice = TorusLattice::new(n, d)?;
    let params = ThetaParams::new(n, radius)?;
    let big_n = lattice.len();
    let limit = match kind {
        HamiltonianKind::Permanental => 9,
        HamiltonianKind::Tropical => 64,
    };
    if big_n > limit {
        return Err(Error::BudgetExceeded { needed: big_n as u128, limit: limit as u128 });
    }
    let reference = DiscreteMeasure::uniform(Domain::Torus(d), lattice.points().to_vec())?;
    let uniform = match grid_k {
        Some(k) => Some(GridMeasure::uniform(Grid::torus(d, k)?)),
        None => None,
    };
    let uniform_bound = match &uniform {
        Some(u) => Some(w2_semidiscrete(u, &reference)?.sqrt()),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap = 0.0_f64;
    let mut max_uniform_gap = uniform.as_ref().map(|_| 0.0_f64);
    for _ in 0..trials {
        let pts: Vec<Vec<f64>> = (0..big_n).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect();
        let config = EmpiricalConfig::new(Domain::Torus(d), pts)?;
        let h = hamiltonian(kind, &lattice, &params, &config)?;
        let emp = DiscreteMeasure::uniform(Domain::Torus(d), config.points().to_vec())?;
        let w = w2_empirical(&reference, &emp, Metric::Torus)?;
        max_gap = max_gap.max((h / big_n as f64 - w).abs());
        if let (Some(u), Some(m)) = (&uniform, max_uniform_gap.as_mut()) {
            let wu = w2_semidiscrete(u, &emp)?;
            *m = m.max((wu.sqrt() - w.sqrt()).abs());
        }
    }
    let mut bound = params.bracket_width(d);
    if kind == HamiltonianKind::Permanental {
        bound += ln_factorial(big_n) / (n as f64 * big_n as f64);
    }
    Ok(HamiltonianGap { kind, n, d, trials, max_gap, bound, max_uniform_gap, uniform_bound })
}

/// How a Gibbs ensemble is realized.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Backend {
    /// Full enumeration over the `(n * refine)^d` lattice sites.
    Exact { refine: usize },
    /// Metropolis chain.
    Mcmc { seed: u64, steps: usize, burn_in: usize, proposal: Proposal },
}

/// State space and proposal of the Metropolis chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Proposal {
    /// Move one particle to a uniform point of the torus; target density
    /// `e^{-beta H} prod mu0`.
    Continuous,
    /// Move one particle to a uniform site of the exact backend's lattice;
    /// targets the same table as [`gibbs_exact`].
    Sites { refine: usize },
}

/// `Gamma_{beta,n}`: `N = n^d` particles on the torus with law
/// `e^{-beta H_n} mu0^{(x) N} / Z`.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsEnsemble {
    pub beta: f64,
    pub n: usize,
    pub d: usize,
    pub mu0: GridMeasure,
    pub kind: HamiltonianKind,
    pub radius: usize,
    pub backend: Backend,
}

impl GibbsEnsemble {
    pub fn new(beta: f64, n: usize, d: usize, mu0: GridMeasure, kind: HamiltonianKind, backend: Backend) -> Result<Self> {
        if !beta.is_finite() {
            return invalid("beta must be finite");
        }
        if !mu0.grid().is_periodic() || mu0.grid().dim() != d {
            return Err(Error::DomainMismatch("mu0 must live on the d-dimensional torus".into()));
        }
        mu0.check_probability()?;
        Ok(Self { beta, n, d, mu0, kind, radius: ThetaParams::DEFAULT_RADIUS, backend })
    }

    pub fn particles(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    /// `r_n = n^d`.
    pub fn rate_normalization(&self) -> f64 {
        self.particles() as f64
    }

    pub fn lattice(&self) -> Result<TorusLattice> {
        TorusLattice::new(self.n, self.d)
    }

    pub fn theta_params(&self) -> Result<ThetaParams> {
        ThetaParams::new(self.n, self.radius)
    }

    /// Sites `(1/(n s)) Z^d` and the `mu0` mass of the cell around each.
    pub fn sites(&self, refine: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if refine == 0 {
            return invalid("site refinement must be positive");
        }
        let g = Grid::torus_lattice(self.d, self.n * refine)?;
        let h = 0.5 / (self.n * refine) as f64;
        let pts: Vec<Vec<f64>> = g.points().collect();
        let w = pts
            .iter()
            .map(|p| {
                let lo: Vec<f64> = p.iter().map(|c| c - h).collect();
                let hi: Vec<f64> = p.iter().map(|c| c + h).collect();
                self.mu0.mass_in_box(&lo, &hi)
            })
            .collect();
        Ok((pts, w))
    }
}

/// Exact law of the ensemble on site tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsTable {
    pub n: usize,
    pub d: usize,
    pub beta: f64,
    pub kind: HamiltonianKind,
    pub sites: Vec<Vec<f64>>,
    pub site_weights: Vec<f64>,
    /// `P[tuple]`, indexed by the base-`S` digits of the tuple (first
    /// particle most significant).
    pub probabilities: Vec<f64>,
    /// `log Z` of the site discretization.
    pub log_partition: f64,
}

impl GibbsTable {
    pub fn particles(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn len(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probabilities.is_empty()
    }

    /// Site indices of tuple `idx`.
    pub fn tuple(&self, mut idx: usize) -> Vec<usize> {
        let s = self.sites.len();
        let mut out = vec![0; self.particles()];
        for slot in out.iter_mut().rev() {
            *slot = idx % s;
            idx /= s;
        }
        out
    }

    pub fn config(&self, idx: usize) -> Result<EmpiricalConfig> {
        EmpiricalConfig::new(Domain::Torus(self.d), self.tuple(idx).iter().map(|&s| self.sites[s].clone()).collect())
    }

    /// Law of one particle on the sites.
    pub fn marginal(&self, particle: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.sites.len()];
        for (idx, p) in self.probabilities.iter().enumerate() {
            out[self.tuple(idx)[particle]] += p;
        }
        out
    }

    /// Law of the empirical measure: probability of each multiset of sites
    /// (sorted site indices).
    pub fn empirical_law(&self) -> BTreeMap<Vec<usize>, f64> {
        let mut law = BTreeMap::new();
        for (idx, &p) in self.probabilities.iter().enumerate() {
            let mut t = self.tuple(idx);
            t.sort_unstable();
            *law.entry(t).or_insert(0.0) += p;
        }
        law
    }

    /// Empirical measure of a multiset of sites.
    pub fn empirical_measure(&self, multiset: &[usize]) -> Result<DiscreteMeasure> {
        DiscreteMeasure::uniform(Domain::Torus(self.d), multiset.iter().map(|&s| self.sites[s].clone()).collect())
    }

    /// `Gamma{ mu : pred(mu) }` over the empirical law.
    pub fn probability_where(&self, mut pred: impl FnMut(&[usize]) -> Result<bool>) -> Result<f64> {
        let mut total = 0.0;
        for (k, p) in self.empirical_law() {
            if pred(&k)? {
                total += p;
            }
        }
        Ok(total)
    }

    /// Mode of the empirical law (first in multiset order among ties).
    pub fn modal_measure(&self) -> Result<DiscreteMeasure> {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for (k, p) in self.empirical_law() {
            if best.as_ref().is_none_or(|b| p > b.1) {
                best = Some((k, p));
            }
        }
        self.empirical_measure(&best.expect("nonempty table").0)
    }

    /// See [`local_rate`].
    pub fn local_rate(&self, center: &DiscreteMeasure, radius: f64) -> Result<RateEstimate> {
        let mut excluded = false;
        let prob = self.probability_where(|k| {
            let inside = w2_to(&self.empirical_measure(k)?, center)?.sqrt() < radius;
            excluded |= !inside;
            Ok(inside)
        })?;
        // A ball containing every configuration has probability one exactly.
        let prob = if excluded { prob.min(1.0) } else { 1.0 };
        let r_n = self.particles() as f64;
        let value = if prob > 0.0 { (-prob.ln() / r_n).max(0.0) } else { f64::INFINITY };
        Ok(RateEstimate { center: center.clone(), radius, r_n, value, prob, method: "exact".into() })
    }
}

/// `W_2^2` between two torus measures with arbitrary weights.
pub fn w2_to(a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<f64> {
    let c = cost_matrix(&a.points(), &b.points(), Metric::Torus.cost())?;
    Ok(kantorovich_lp(a, b, &c)?.objective().max(0.0))
}

fn site_log_phi(lattice: &TorusLattice, params: &ThetaParams, sites: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    (0..lattice.len())
        .map(|i| sites.iter().map(|s| log_theta(lattice, i, params, s)).collect())
        .collect()
}

fn tuple_hamiltonian(
    kind: HamiltonianKind,
    n: usize,
    logphi: &[Vec<f64>],
    tuple: &mut [usize],
) -> Result<f64> {
    tuple.sort_unstable();
    let size = tuple.len();
    let m = DMatrix::from_fn(size, size, |i, j| logphi[i][tuple[j]]);
    hamiltonian_of_logs(kind, n, &m)
}

fn count_tuples(s: usize, n: usize) -> u128 {
    (s as u128).checked_pow(n as u32).unwrap_or(u128::MAX)
}

/// Full probability table of the ensemble over site tuples: each tuple gets
/// weight `e^{-beta H} prod mu0(site cell)`, normalized to one.
pub fn gibbs_exact(ens: &GibbsEnsemble) -> Result<GibbsTable> {
    let Backend::Exact { refine } = ens.backend else {
        return invalid("gibbs_exact needs the exact backend");
    };
    let (sites, weights) = ens.sites(refine)?;
    let big_n = ens.particles();
    let s = sites.len();
    let needed = count_tuples(s, big_n);
    if needed > EXACT_BUDGET {
        return Err(Error::Invalid(format!(
            "exact backend needs {needed} site tuples (limit {EXACT_BUDGET}); use the mcmc backend"
        )));
    }
    let lattice = ens.lattice()?;
    let params = ens.theta_params()?;
    let logphi = site_log_phi(&lattice, &params, &sites)?;
    let log_w: Vec<f64> = weights.iter().map(|w| if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY }).collect();
    let total = needed as usize;
    let logs: Vec<f64> = (0..total)
        .into_par_iter()
        .map(|idx| {
            let mut t = vec![0; big_n];
            let mut r = idx;
            for slot in t.iter_mut().rev() {
                *slot = r % s;
                r /= s;
            }
            let base: f64 = t.iter().map(|&k| log_w[k]).sum();
            if base == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            if ens.beta == 0.0 {
                return Ok(base);
            }
            Ok(base - ens.beta * tuple_hamiltonian(ens.kind, ens.n, &logphi, &mut t)?)
        })
        .collect::<Result<_>>()?;
    let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logs.iter().map(|l| (l - shift).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);
    Ok(GibbsTable {
        n: ens.n,
        d: ens.d,
        beta: ens.beta,
        kind: ens.kind,
        sites,
        site_weights: weights,
        probabilities: probs,
        log_partition: shift + z.ln(),
    })
}

/// Output of [`gibbs_mcmc`].
#[derive(Debug, Clone, PartialEq)]
pub struct McmcRun {
    /// Post-burn-in states, one per step.
    pub samples: Vec<EmpiricalConfig>,
    pub acceptance_rate: f64,
}

/// Metropolis chain for the ensemble: each step moves one uniformly chosen
/// particle according to the backend's [`Proposal`] and accepts with
/// probability `min(1, e^{-beta (H' - H)} w(new) / w(old))`, `w` being the
/// `mu0` density or site weight. Deterministic given the seed.
pub fn gibbs_mcmc(ens: &GibbsEnsemble) -> Result<McmcRun> {
    let Backend::Mcmc { seed, steps, burn_in, proposal } = ens.backend else {
        return invalid("gibbs_mcmc needs the mcmc backend");
    };
    if steps < burn_in {
        return invalid("steps must be at least burn_in");
    }
    let lattice = ens.lattice()?;
    let params = ens.theta_params()?;
    let big_n = ens.particles();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(steps - burn_in);
    let mut accepted = 0usize;
    let to_config = |pts: &[Vec<f64>]| EmpiricalConfig::new(Domain::Torus(ens.d), pts.to_vec());

    match proposal {
        Proposal::Continuous => {
            let mut state: Vec<Vec<f64>> = lattice.points().to_vec();
            let log_w = |x: &[f64]| ens.mu0.density_at(x).ln();
            if state.iter().any(|x| log_w(x) == f64::NEG_INFINITY) {
                return invalid("mu0 must have positive density at the lattice points to start the chain");
            }
            let mut h = hamiltonian(ens.kind, &lattice, &params, &to_config(&state)?)?;
            for step in 0..steps {
                let i = rng.random_range(0..big_n);
                let cand: Vec<f64> = (0..ens.d).map(|_| rng.random::<f64>()).collect();
                let old = std::mem::replace(&mut state[i], cand.clone());
                let h_new = if ens.beta == 0.0 { h } else { hamiltonian(ens.kind, &lattice, &params, &to_config(&state)?)? };
                let log_ratio = -ens.beta * (h_new - h) + log_w(&cand) - log_w(&old);
                if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
                    h = h_new;
                    accepted += 1;
                } else {
                    state[i] = old;
                }
                if step >= burn_in {
                    samples.push(to_config(&state)?);
                }
            }
        }
        Proposal::Sites { refine } => {
            let (sites, weights) = ens.sites(refine)?;
            let logphi = site_log_phi(&lattice, &params, &sites)?;
            let s = sites.len();
            let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
            let mut energy = |t: &[usize]| -> Result<f64> {
                let mut key = t.to_vec();
                key.sort_unstable();
                if let Some(&h) = cache.get(&key) {
                    return Ok(h);
                }
                let h = tuple_hamiltonian(ens.kind, ens.n, &logphi, &mut key.clone())?;
                cache.insert(key, h);
                Ok(h)
            };
            // Start from the sites nearest the lattice points.
            let mut state: Vec<usize> = lattice
                .points()
                .iter()
                .map(|p| p.iter().fold(0, |acc, c| acc * ens.n * refine + (c * (ens.n * refine) as f64).round() as usize))
                .collect();
            if state.iter().any(|&k| weights[k] <= 0.0) {
                return invalid("mu0 must charge the sites at the lattice points to start the chain");
            }
            let mut h = energy(&state)?;
            for step in 0..steps {
                let i = rng.random_range(0..big_n);
                let cand = rng.random_range(0..s);
                let old = state[i];
                state[i] = cand;
                let log_ratio = if weights[cand] <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    let h_new = energy(&state)?;
                    -ens.beta * (h_new - h) + weights[cand].ln() - weights[old].ln()
                };
                if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
                    h = energy(&state)?;
                    accepted += 1;
                } else {
                    state[i] = old;
                }
                if step >= burn_in {
                    let pts: Vec<Vec<f64>> = state.iter().map(|&k| sites[k].clone()).collect();
                    samples.push(to_config(&pts)?);
                }
            }
        }
    }
    Ok(McmcRun { samples, acceptance_rate: if steps == 0 { 0.0 } else { accepted as f64 / steps as f64 } })
}

/// `-(1/r_n) log Gamma{ W_2(delta^N, center) < radius }`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateEstimate {
    pub center: DiscreteMeasure,
    pub radius: f64,
    pub r_n: f64,
    /// `+inf` when the ball has probability zero.
    pub value: f64,
    pub prob: f64,
    pub method: String,
}

/// Local rate of the ensemble at `center`, from the exact table.
pub fn local_rate(ens: &GibbsEnsemble, center: &DiscreteMeasure, radius: f64) -> Result<RateEstimate> {
    gibbs_exact(ens)?.local_rate(center, radius)
}

/// Partition function values computed by [`partition_function`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PartitionFunction {
    /// `log Z` by tensor quadrature over cell centers, when within budget.
    pub log_tensor: Option<f64>,
    /// `log Z = log N! + sum_i log int phi_i mu0` for `beta = n`, permanental.
    pub log_product: Option<f64>,
    pub k: usize,
}

impl PartitionFunction {
    /// Best available `log Z`.
    pub fn log_z(&self) -> Option<f64> {
        self.log_product.or(self.log_tensor)
    }
}

fn quadrature_masses(mu0: &GridMeasure, d: usize, k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let g = Grid::torus(d, k)?;
    let h = 0.5 / k as f64;
    let pts: Vec<Vec<f64>> = g.points().collect();
    let m = pts
        .iter()
        .map(|p| {
            let lo: Vec<f64> = p.iter().map(|c| c - h).collect();
            let hi: Vec<f64> = p.iter().map(|c| c + h).collect();
            mu0.mass_in_box(&lo, &hi)
        })
        .collect();
    Ok((pts, m))
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let shift = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if shift == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    shift + v.map(|x| (x - shift).exp()).sum::<f64>().ln()
}

/// `Z_{beta,n} = int e^{-beta H} mu0^{(x) N}` on the torus grid with `k^d`
/// cells. Tensor quadrature is used when `k^{dN} <= 2^24`; for `beta = n` and
/// the permanental kind the product formula is evaluated as well.
pub fn partition_function(ens: &GibbsEnsemble, k: usize) -> Result<PartitionFunction> {
    let (pts, masses) = quadrature_masses(&ens.mu0, ens.d, k)?;
    let lattice = ens.lattice()?;
    let params = ens.theta_params()?;
    let big_n = ens.particles();
    let log_m: Vec<f64> = masses.iter().map(|m| m.ln()).collect();
    let logphi = site_log_phi(&lattice, &params, &pts)?;

    let product = (ens.kind == HamiltonianKind::Permanental && ens.beta == ens.n as f64).then(|| {
        ln_factorial(big_n)
            + logphi
                .iter()
                .map(|row| log_sum_exp(row.iter().zip(&log_m).map(|(a, b)| a + b)))
                .sum::<f64>()
    });

    let cells = pts.len();
    let needed = count_tuples(cells, big_n);
    if needed > QUADRATURE_BUDGET && product.is_none() {
        return Err(Error::ResolutionOverflow { cells: needed.min(usize::MAX as u128) as usize, limit: QUADRATURE_BUDGET as usize });
    }
    let tensor = if needed <= QUADRATURE_BUDGET {
        let logs: Vec<f64> = (0..needed as usize)
            .into_par_iter()
            .map(|idx| {
                let mut t = vec![0; big_n];
                let mut r = idx;
                for slot in t.iter_mut().rev() {
                    *slot = r % cells;
                    r /= cells;
                }
                let base: f64 = t.iter().map(|&c| log_m[c]).sum();
                if base == f64::NEG_INFINITY || ens.beta == 0.0 {
                    return Ok(base);
                }
                Ok(base - ens.beta * tuple_hamiltonian(ens.kind, ens.n, &logphi, &mut t)?)
            })
            .collect::<Result<_>>()?;
        Some(log_sum_exp(logs.iter().copied()))
    } else {
        None
    };
    Ok(PartitionFunction { log_tensor: tensor, log_product: product, k })
}

/// Outcome of [`sanov_exact`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SanovPoint {
    /// `-(1/n) log P[type class of nu]`.
    pub rate: f64,
    /// `Ent(mu0, nu)`.
    pub entropy: f64,
    /// `P[type class of nu]`.
    pub probability: f64,
    /// Method-of-types bound `k log(n+1) / n` on `|rate - entropy|`.
    pub bound: f64,
}

/// Exact multinomial probability that `n` draws from `mu0` have empirical
/// type `nu`, compared with `Ent(mu0, nu)`.
pub fn sanov_exact(mu0: &[f64], n: usize, nu: &[f64]) -> Result<SanovPoint> {
    let k = mu0.len();
    if k == 0 || k > 6 || nu.len() != k {
        return invalid("sanov_exact needs matching alphabets of size 1..=6");
    }
    if n == 0 || n > 500 {
        return invalid("sanov_exact needs 1 <= n <= 500");
    }
    let mut counts = Vec::with_capacity(k);
    for &v in nu {
        let c = v * n as f64;
        if (c - c.round()).abs() > 1e-9 || c < -1e-9 {
            return invalid(format!("type {nu:?} is not realizable with n = {n}"));
        }
        counts.push(c.round() as usize);
    }
    if counts.iter().sum::<usize>() != n {
        return invalid(format!("type {nu:?} does not sum to one"));
    }
    let mut log_p = ln_factorial(n);
    for (&c, &m) in counts.iter().zip(mu0) {
        log_p -= ln_factorial(c);
        if c > 0 {
            if m <= 0.0 {
                log_p = f64::NEG_INFINITY;
                break;
            }
            log_p += c as f64 * m.ln();
        }
    }
    let a = DiscreteMeasure::on_alphabet(mu0)?;
    let b = DiscreteMeasure::on_alphabet(&counts.iter().map(|&c| c as f64 / n as f64).collect::<Vec<_>>())?;
    Ok(SanovPoint {
        rate: -log_p / n as f64,
        entropy: entropy(&a, &b)?,
        probability: multinomial_probability(&counts, mu0).unwrap_or_else(|| log_p.exp()),
        bound: k as f64 * ((n + 1) as f64).ln() / n as f64,
    })
}

/// `n! / prod c_i! * prod mu_i^c_i` evaluated directly, so dyadic inputs give
/// exact results; `None` when the coefficient leaves the exact integer range
/// or the product underflows.
fn multinomial_probability(counts: &[usize], mu0: &[f64]) -> Option<f64> {
    let mut coeff: u128 = 1;
    let mut total: u128 = 0;
    for &c in counts {
        for j in 1..=c as u128 {
            total += 1;
            coeff = coeff.checked_mul(total)? / j;
        }
    }
    if coeff > 1 << 53 {
        return None;
    }
    let p = counts.iter().zip(mu0).fold(coeff as f64, |acc, (&c, &m)| acc * m.powi(c as i32));
    (p > f64::MIN_POSITIVE || coeff == 0).then_some(p)
}

/// All types `c / n` with `c` a composition of `n` into `k` parts.
pub fn realizable_types(k: usize, n: usize) -> Vec<Vec<f64>> {
    fn rec(k: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            prefix.push(left);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for c in 0..=left {
            prefix.push(c);
            rec(k - 1, left - c, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(k, n, &mut Vec::new(), &mut out);
    out.into_iter().map(|c| c.into_iter().map(|x| x as f64 / n as f64).collect()).collect()
}

/// Zero-temperature moment generating function at lattice size `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZeroTempMgf {
    /// `p_n(theta) = (1/N) sum_i (1/n) log int e^{n theta} phi_i mu0`.
    pub p_n: f64,
    /// `(1/N) sum_i sup_x [theta(x) - d(x, p_i)^2]` over the support of `mu0`.
    pub target: f64,
}

/// Evaluates `p_n(theta)` by midpoint quadrature on `theta`'s grid (the grid of
/// `mu0`) and the lattice target by a torus c-transform on the same grid.
pub fn zero_temp_mgf(theta: &GridFunction, n: usize, mu0: &GridMeasure) -> Result<ZeroTempMgf> {
    if theta.grid() != mu0.grid() {
        return Err(Error::DomainMismatch("theta and mu0 must share a grid".into()));
    }
    if !mu0.grid().is_periodic() {
        return Err(Error::DomainMismatch("zero_temp_mgf works on the torus".into()));
    }
    if theta.values().iter().any(|v| !v.is_finite()) {
        return invalid("theta must be finite");
    }
    let d = mu0.grid().dim();
    let lattice = TorusLattice::new(n, d)?;
    let params = ThetaParams::with_default_radius(n)?;
    let pts: Vec<Vec<f64>> = mu0.grid().points().collect();
    let nf = n as f64;
    let per_point: Vec<f64> = (0..lattice.len())
        .into_par_iter()
        .map(|i| {
            let terms: Vec<f64> = pts
                .iter()
                .zip(theta.values())
                .zip(mu0.mass())
                .map(|((x, &t), &m)| {
                    if m > 0.0 {
                        Ok(nf * t + log_theta(&lattice, i, &params, x)? + m.ln())
                    } else {
                        Ok(f64::NEG_INFINITY)
                    }
                })
                .collect::<Result<_>>()?;
            Ok(log_sum_exp(terms.iter().copied()) / nf)
        })
        .collect::<Result<_>>()?;
    let neg_theta = GridFunction::new(
        mu0.grid().clone(),
        theta.values().iter().zip(mu0.mass()).map(|(t, &m)| if m > 0.0 { -t } else { f64::INFINITY }).collect(),
    )?;
    let targets = torus_c_transform(&neg_theta, lattice.points())?;
    let big_n = lattice.len() as f64;
    Ok(ZeroTempMgf { p_n: per_point.iter().sum::<f64>() / big_n, target: targets.iter().sum::<f64>() / big_n })
}

/// `C_beta = -min over candidates of [beta W_2^2(mu, dx) + Ent(mu0, mu)]` on the
/// torus; `candidates` must share `mu0`'s grid.
pub fn c_beta(beta: f64, mu0: &GridMeasure, candidates: &[GridMeasure]) -> Result<f64> {
    let uniform = GridMeasure::uniform(mu0.grid().clone());
    let mut best = f64::INFINITY;
    for mu in candidates {
        let ent = entropy(mu0, mu)?;
        if !ent.is_finite() {
            continue;
        }
        let w = if beta == 0.0 { 0.0 } else { w2_semidiscrete(&uniform, &mu.to_discrete()?)? };
        best = best.min(beta * w + ent);
    }
    if best == f64::INFINITY {
        return invalid("no candidate is absolutely continuous with respect to mu0");
    }
    Ok(-best)
}

/// The documented sweep set for [`c_beta`]: `mu0`, the uniform measure,
/// geometric interpolations between them, cosine tilts of `mu0`, and
/// `extra` random mixtures of these, all on `mu0`'s grid.
pub fn c_beta_candidates(mu0: &GridMeasure, extra: usize, seed: u64) -> Result<Vec<GridMeasure>> {
    let g = mu0.grid().clone();
    let uniform = GridMeasure::uniform(g.clone());
    let mut out = vec![mu0.clone(), uniform.clone()];
    let normalize = |raw: Vec<f64>| -> Result<GridMeasure> {
        let s: f64 = raw.iter().sum();
        GridMeasure::new(g.clone(), raw.into_iter().map(|v| v / s).collect())
    };
    for t in [0.25, 0.5, 0.75] {
        out.push(normalize(
            mu0.mass().iter().zip(uniform.mass()).map(|(a, b)| a.powf(1.0 - t) * b.powf(t)).collect(),
        )?);
    }
    let pts: Vec<Vec<f64>> = g.points().collect();
    for amp in [-1.0, -0.5, 0.5, 1.0] {
        out.push(normalize(
            mu0.mass()
                .iter()
                .zip(&pts)
                .map(|(m, x)| m * (amp * (2.0 * std::f64::consts::PI * x[0]).cos()).exp())
                .collect(),
        )?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = out.len();
    for _ in 0..extra {
        let (a, b) = (rng.random_range(0..base), rng.random_range(0..base));
        let t: f64 = rng.random();
        out.push(normalize(out[a].mass().iter().zip(out[b].mass()).map(|(x, y)| (1.0 - t) * x + t * y).collect())?);
    }
    Ok(out)
}

/// Uniform-weight empirical measure of site indices, re-exported for callers
/// that assemble centers by hand.
pub fn site_measure(sites: &[Vec<f64>], idx: &[usize], d: usize) -> Result<DiscreteMeasure> {
    let w = 1.0 / idx.len() as f64;
    DiscreteMeasure::new(Domain::Torus(d), idx.iter().map(|&k| Atom { point: sites[k].clone(), weight: w }).collect())
}
