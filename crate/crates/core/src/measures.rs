//! Measure types, the empirical map, relative entropy and the log moment
//! generating functional.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{parse_fields, Grid, GridFunction};

/// Tolerance on total weight for measures flagged as probabilities.
pub const DISCRETE_PROBABILITY_TOL: f64 = 1e-12;
pub const GRID_PROBABILITY_TOL: f64 = 1e-10;
/// Reference masses at or below this count as null for absolute continuity.
pub const NULL_MASS: f64 = 1e-15;

/// Where the atoms of a [`DiscreteMeasure`] live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// The torus chart `[0,1)^d`.
    Torus(usize),
    /// Euclidean space `R^d`.
    Euclidean(usize),
    /// The finite alphabet `{0, .., size-1}`; points are `[symbol as f64]`.
    Alphabet(usize),
}

impl Domain {
    pub fn dim(&self) -> usize {
        match *self {
            Domain::Torus(d) | Domain::Euclidean(d) => d,
            Domain::Alphabet(_) => 1,
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        if x.len() != self.dim() || x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match *self {
            Domain::Torus(_) => x.iter().all(|&v| (0.0..1.0).contains(&v)),
            Domain::Euclidean(_) => true,
            Domain::Alphabet(size) => x[0] >= 0.0 && x[0].fract() == 0.0 && (x[0] as usize) < size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub point: Vec<f64>,
    pub weight: f64,
}

/// Finitely many weighted atoms. Coincident atoms are kept as separate entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    domain: Domain,
    atoms: Vec<Atom>,
}

impl DiscreteMeasure {
    pub fn new(domain: Domain, atoms: Vec<Atom>) -> Result<Self> {
        for a in &atoms {
            if !(a.weight >= 0.0 && a.weight.is_finite()) {
                return invalid(format!("atom weight {} must be finite and nonnegative", a.weight));
            }
            if !domain.contains(&a.point) {
                return Err(Error::OutOfDomain { point: a.point.clone(), domain: format!("{domain:?}") });
            }
        }
        Ok(Self { domain, atoms })
    }

    /// Like [`DiscreteMeasure::new`] but also checks the weights sum to one.
    pub fn probability(domain: Domain, atoms: Vec<Atom>) -> Result<Self> {
        let m = Self::new(domain, atoms)?;
        m.check_probability()?;
        Ok(m)
    }

    /// Probability vector on the alphabet `{0, .., weights.len()-1}`.
    pub fn on_alphabet(weights: &[f64]) -> Result<Self> {
        let atoms = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| Atom { point: vec![i as f64], weight: w })
            .collect();
        Self::probability(Domain::Alphabet(weights.len()), atoms)
    }

    /// Atoms at `points`, each carrying weight `1/N`.
    pub fn uniform(domain: Domain, points: Vec<Vec<f64>>) -> Result<Self> {
        empirical(&EmpiricalConfig::new(domain, points)?)
    }

    pub fn check_probability(&self) -> Result<()> {
        let total = self.total_mass();
        if (total - 1.0).abs() > DISCRETE_PROBABILITY_TOL {
            return invalid(format!("weights sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        self.atoms.iter().map(|a| a.point.clone()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    /// Atoms with equal coordinates merged into one, in coordinate order.
    pub fn merged(&self) -> Vec<Atom> {
        let mut acc: BTreeMap<Vec<OrdF64>, f64> = BTreeMap::new();
        for a in &self.atoms {
            *acc.entry(a.point.iter().map(|&v| OrdF64(v)).collect()).or_insert(0.0) += a.weight;
        }
        acc.into_iter()
            .map(|(k, w)| Atom { point: k.into_iter().map(|v| v.0).collect(), weight: w })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_weighted_rows(out, self.domain.dim(), self.atoms.iter().map(|a| (a.point.as_slice(), a.weight)))
    }

    pub fn read_csv<R: Read>(domain: Domain, input: R) -> Result<Self> {
        let d = domain.dim();
        let mut atoms = Vec::new();
        for row in read_weighted_rows(input, d)? {
            atoms.push(Atom { point: row.0, weight: row.1 });
        }
        Self::new(domain, atoms)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Piecewise-constant measure on the cells of a [`Grid`]. Stored as the mass
/// of each cell; the density is mass divided by cell volume.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    grid: Grid,
    mass: Vec<f64>,
}

impl GridMeasure {
    pub fn new(grid: Grid, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != grid.len() {
            return invalid(format!("{} masses for {} cells", mass.len(), grid.len()));
        }
        if let Some(m) = mass.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return invalid(format!("cell mass {m} must be finite and nonnegative"));
        }
        Ok(Self { grid, mass })
    }

    pub fn probability(grid: Grid, mass: Vec<f64>) -> Result<Self> {
        let m = Self::new(grid, mass)?;
        m.check_probability()?;
        Ok(m)
    }

    pub fn from_density(grid: Grid, density: &[f64]) -> Result<Self> {
        let vol = grid.cell_volume();
        Self::new(grid, density.iter().map(|d| d * vol).collect())
    }

    /// Uniform probability measure on the grid's domain.
    pub fn uniform(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, mass: vec![1.0 / n as f64; n] }
    }

    /// Samples `density` at cell centers (midpoint rule) and normalizes to a
    /// probability measure.
    pub fn from_density_fn(grid: Grid, density: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let raw: Vec<f64> = grid.points().map(|x| density(&x)).collect();
        let total: f64 = raw.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return invalid("density must have positive finite integral");
        }
        Self::new(grid, raw.into_iter().map(|v| v / total).collect())
    }

    pub fn check_probability(&self) -> Result<()> {
        let total = self.total_mass();
        if (total - 1.0).abs() > GRID_PROBABILITY_TOL {
            return invalid(format!("cell masses sum to {total}, not 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn density(&self) -> Vec<f64> {
        let vol = self.grid.cell_volume();
        self.mass.iter().map(|m| m / vol).collect()
    }

    /// Density at an arbitrary point (piecewise constant); zero outside a box grid.
    pub fn density_at(&self, x: &[f64]) -> f64 {
        match self.grid.locate(x) {
            Some(i) => self.mass[i] / self.grid.cell_volume(),
            None => 0.0,
        }
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Atoms at the cell centers; zero-mass cells are dropped.
    pub fn to_discrete(&self) -> Result<DiscreteMeasure> {
        let d = self.grid.dim();
        let domain = if self.grid.is_periodic() { Domain::Torus(d) } else { Domain::Euclidean(d) };
        let atoms = self
            .mass
            .iter()
            .enumerate()
            .filter(|(_, &m)| m > 0.0)
            .map(|(i, &m)| Atom { point: self.grid.point(i), weight: m })
            .collect();
        DiscreteMeasure::new(domain, atoms)
    }

    /// Mass of the axis-aligned box `[lo, hi)` under the piecewise-constant
    /// density. On periodic grids the box may straddle the chart boundary.
    pub fn mass_in_box(&self, lo: &[f64], hi: &[f64]) -> f64 {
        let g = &self.grid;
        let d = g.dim();
        let mut total = 0.0;
        for (i, &m) in self.mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let multi = g.multi_index(i);
            let mut frac = 1.0;
            for a in 0..d {
                let h = g.step(a);
                let c = g.coord(a, multi[a]);
                let (clo, chi) = (c - 0.5 * h, c + 0.5 * h);
                let mut overlap = interval_overlap(clo, chi, lo[a], hi[a]);
                if g.is_periodic() {
                    let w = g.hi()[a] - g.lo()[a];
                    overlap += interval_overlap(clo, chi, lo[a] - w, hi[a] - w);
                    overlap += interval_overlap(clo, chi, lo[a] + w, hi[a] + w);
                }
                frac *= (overlap / h).min(1.0);
                if frac == 0.0 {
                    break;
                }
            }
            total += frac * m;
        }
        total
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let pts: Vec<Vec<f64>> = self.grid.points().collect();
        write_weighted_rows(out, self.grid.dim(), pts.iter().map(|p| p.as_slice()).zip(self.mass.iter().copied()))
    }

    /// Reads `coord.., weight` rows; every row's point is binned into its cell.
    pub fn read_csv<R: Read>(grid: Grid, input: R) -> Result<Self> {
        let mut mass = vec![0.0; grid.len()];
        for (x, w) in read_weighted_rows(input, grid.dim())? {
            let idx = grid
                .locate(&x)
                .ok_or_else(|| Error::OutOfDomain { point: x.clone(), domain: grid.describe() })?;
            mass[idx] += w;
        }
        Self::new(grid, mass)
    }
}

fn interval_overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn write_weighted_rows<'a, W: Write>(
    out: W,
    dim: usize,
    rows: impl Iterator<Item = (&'a [f64], f64)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..dim).map(|a| format!("coord_{a}")).collect();
    header.push("weight".into());
    w.write_record(&header)?;
    for (p, m) in rows {
        let mut rec: Vec<String> = p.iter().map(|c| c.to_string()).collect();
        rec.push(m.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_weighted_rows<R: Read>(input: R, dim: usize) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != dim + 1 {
            return invalid(format!("expected {} columns, found {}", dim + 1, rec.len()));
        }
        let x = parse_fields(&rec, 0..dim)?;
        let w = parse_fields(&rec, dim..dim + 1)?[0];
        rows.push((x, w));
    }
    Ok(rows)
}

/// An ordered tuple of `N >= 1` particle positions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalConfig {
    domain: Domain,
    points: Vec<Vec<f64>>,
}

impl EmpiricalConfig {
    pub fn new(domain: Domain, points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyConfiguration);
        }
        if let Some(p) = points.iter().find(|p| !domain.contains(p)) {
            return Err(Error::OutOfDomain { point: p.clone(), domain: format!("{domain:?}") });
        }
        Ok(Self { domain, points })
    }

    /// Convenience constructor for one-dimensional torus configurations.
    pub fn torus_1d(xs: &[f64]) -> Result<Self> {
        Self::new(Domain::Torus(1), xs.iter().map(|&x| vec![x]).collect())
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }
}

/// The empirical measure `(1/N) sum_i delta_{x_i}`.
pub fn empirical(config: &EmpiricalConfig) -> Result<DiscreteMeasure> {
    if config.points.is_empty() {
        return Err(Error::EmptyConfiguration);
    }
    let w = 1.0 / config.points.len() as f64;
    let atoms = config
        .points
        .iter()
        .map(|p| Atom { point: p.clone(), weight: w })
        .collect();
    DiscreteMeasure::new(config.domain, atoms)
}

/// Measures whose masses can be paired cell-by-cell or atom-by-atom.
pub trait Measure {
    /// `(self mass, other mass)` over the union of both supports.
    fn paired_masses(&self, other: &Self) -> Result<Vec<(f64, f64)>>;
}

impl Measure for GridMeasure {
    fn paired_masses(&self, other: &Self) -> Result<Vec<(f64, f64)>> {
        if self.grid != other.grid {
            return Err(Error::DomainMismatch("grid measures live on different grids".into()));
        }
        Ok(self.mass.iter().copied().zip(other.mass.iter().copied()).collect())
    }
}

impl Measure for DiscreteMeasure {
    fn paired_masses(&self, other: &Self) -> Result<Vec<(f64, f64)>> {
        if self.domain != other.domain {
            return Err(Error::DomainMismatch(format!("{:?} vs {:?}", self.domain, other.domain)));
        }
        let mut acc: BTreeMap<Vec<OrdF64>, (f64, f64)> = BTreeMap::new();
        let key = |p: &[f64]| p.iter().map(|&v| OrdF64(v)).collect::<Vec<_>>();
        for a in &self.atoms {
            acc.entry(key(&a.point)).or_insert((0.0, 0.0)).0 += a.weight;
        }
        for a in &other.atoms {
            acc.entry(key(&a.point)).or_insert((0.0, 0.0)).1 += a.weight;
        }
        Ok(acc.into_values().collect())
    }
}

/// Relative entropy `Ent(mu0, nu) = sum log(nu/mu0) nu`, or `+inf` when `nu`
/// charges a cell/atom where `mu0` has mass at most [`NULL_MASS`].
pub fn entropy<M: Measure>(mu0: &M, nu: &M) -> Result<f64> {
    let pairs = mu0.paired_masses(nu)?;
    entropy_of_masses(pairs.iter().copied())
}

pub(crate) fn entropy_of_masses(pairs: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let mut acc = 0.0;
    for (m0, n) in pairs {
        if n <= 0.0 {
            continue;
        }
        if m0 <= NULL_MASS {
            return Ok(f64::INFINITY);
        }
        acc += n * (n / m0).ln();
    }
    Ok(acc)
}

/// `log sum_i m_i exp(theta_i)`, evaluated with a max shift. Entries with
/// zero mass are skipped; `theta` must be finite wherever mass is positive.
pub fn log_mgf_weights(masses: &[f64], theta: &[f64]) -> Result<f64> {
    if masses.len() != theta.len() {
        return Err(Error::DomainMismatch(format!(
            "{} masses vs {} potential values",
            masses.len(),
            theta.len()
        )));
    }
    let mut shift = f64::NEG_INFINITY;
    for (&m, &t) in masses.iter().zip(theta) {
        if m > 0.0 {
            if !t.is_finite() {
                return invalid("potential must be finite on the support of the measure");
            }
            shift = shift.max(t);
        }
    }
    if shift == f64::NEG_INFINITY {
        return invalid("measure has no mass");
    }
    let s: f64 = masses
        .iter()
        .zip(theta)
        .filter(|(&m, _)| m > 0.0)
        .map(|(&m, &t)| m * (t - shift).exp())
        .sum();
    Ok(shift + s.ln())
}

/// `I_mu(theta) = log int e^theta mu` by the cell-midpoint rule.
pub fn log_mgf_grid(mu: &GridMeasure, theta: &GridFunction) -> Result<f64> {
    if mu.grid() != theta.grid() {
        return Err(Error::DomainMismatch("potential and measure live on different grids".into()));
    }
    log_mgf_weights(mu.mass(), theta.values())
}

/// `I_mu(theta) = log sum_i w_i e^{theta_i}` with one value per atom.
pub fn log_mgf_discrete(mu: &DiscreteMeasure, theta: &[f64]) -> Result<f64> {
    log_mgf_weights(&mu.weights(), theta)
}

/// Pushes `mu` forward along a cellwise map: the whole mass of source cell `i`
/// is deposited in the cell of `target` containing `images[i]`. Periodic
/// targets wrap; images outside a box target are an error.
pub fn pushforward(mu: &GridMeasure, images: &[Vec<f64>], target: &Grid) -> Result<GridMeasure> {
    if images.len() != mu.grid.len() {
        return invalid(format!("{} images for {} source cells", images.len(), mu.grid.len()));
    }
    let mut out = vec![0.0; target.len()];
    for (m, y) in mu.mass.iter().zip(images) {
        let j = target
            .locate(y)
            .ok_or_else(|| Error::OutOfDomain { point: y.clone(), domain: target.describe() })?;
        out[j] += m;
    }
    GridMeasure::new(target.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn alphabet(w: &[f64]) -> DiscreteMeasure {
        DiscreteMeasure::on_alphabet(w).unwrap()
    }

    #[test]
    fn empirical_single_point() {
        let m = empirical(&EmpiricalConfig::torus_1d(&[0.3]).unwrap()).unwrap();
        assert_eq!(m.atoms(), &[Atom { point: vec![0.3], weight: 1.0 }]);
    }

    #[test]
    fn empirical_keeps_coincident_atoms() {
        let m = empirical(&EmpiricalConfig::torus_1d(&[0.2, 0.2]).unwrap()).unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.atoms().iter().all(|a| a.point == vec![0.2] && a.weight == 0.5));
        assert_eq!(m.merged().len(), 1);
    }

    #[test]
    fn empirical_three_points() {
        let m = empirical(&EmpiricalConfig::torus_1d(&[0.1, 0.5, 0.9]).unwrap()).unwrap();
        for a in m.atoms() {
            assert_eq!(a.weight, 1.0 / 3.0);
        }
        assert!((m.total_mass() - 1.0).abs() <= 1e-14);
    }

    #[test]
    fn empirical_rejects_empty() {
        let err = EmpiricalConfig::new(Domain::Torus(1), vec![]).unwrap_err();
        assert_eq!(err.to_string(), "empty configuration");
    }

    #[test]
    fn entropy_examples() {
        let u = alphabet(&[0.5, 0.5]);
        assert_eq!(entropy(&u, &u).unwrap(), 0.0);
        let delta = alphabet(&[1.0, 0.0]);
        assert!((entropy(&u, &delta).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(entropy(&delta, &u).unwrap(), f64::INFINITY);
    }

    #[test]
    fn entropy_rejects_mismatched_domains() {
        let a = alphabet(&[0.5, 0.5]);
        let b = alphabet(&[0.2, 0.3, 0.5]);
        assert!(matches!(entropy(&a, &b), Err(Error::DomainMismatch(_))));
        let g1 = GridMeasure::uniform(Grid::torus(1, 4).unwrap());
        let g2 = GridMeasure::uniform(Grid::torus(1, 8).unwrap());
        assert!(entropy(&g1, &g2).is_err());
    }

    #[test]
    fn entropy_null_threshold() {
        let g = Grid::cells(1, 2, 0.0, 1.0).unwrap();
        let mu0 = GridMeasure::new(g.clone(), vec![1.0 - 1e-16, 1e-16]).unwrap();
        let nu = GridMeasure::uniform(g);
        assert_eq!(entropy(&mu0, &nu).unwrap(), f64::INFINITY);
    }

    #[test]
    fn log_mgf_examples() {
        let u = alphabet(&[0.5, 0.5]);
        assert_eq!(log_mgf_discrete(&u, &[0.0, 0.0]).unwrap(), 0.0);
        assert!((log_mgf_discrete(&u, &[1.7, 1.7]).unwrap() - 1.7).abs() < 1e-15);
        let v = log_mgf_discrete(&u, &[std::f64::consts::LN_2, 0.0]).unwrap();
        assert!((v - 1.5f64.ln()).abs() < 1e-15);
        assert!((v - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn log_mgf_on_grid_uses_midpoint_masses() {
        let g = Grid::cells(1, 4, 0.0, 1.0).unwrap();
        let mu = GridMeasure::uniform(g.clone());
        let theta = GridFunction::from_fn(g, |x| x[0]).unwrap();
        let expected = ((0.125f64.exp() + 0.375f64.exp() + 0.625f64.exp() + 0.875f64.exp()) / 4.0).ln();
        assert!((log_mgf_grid(&mu, &theta).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn pushforward_identity_and_constant() {
        let g = Grid::cells(1, 8, 0.0, 1.0).unwrap();
        let mu = GridMeasure::from_density_fn(g.clone(), |x| 1.0 + x[0]).unwrap();
        let id: Vec<Vec<f64>> = g.points().collect();
        assert_eq!(pushforward(&mu, &id, &g).unwrap(), mu);
        let q = vec![vec![0.6]; g.len()];
        let out = pushforward(&mu, &q, &g).unwrap();
        let cell = g.locate(&[0.6]).unwrap();
        assert!((out.mass()[cell] - mu.total_mass()).abs() < 1e-15);
        assert_eq!(out.mass().iter().filter(|&&m| m > 0.0).count(), 1);
    }

    #[test]
    fn pushforward_torus_shift_preserves_uniform() {
        let g = Grid::torus(1, 8).unwrap();
        let mu = GridMeasure::uniform(g.clone());
        let shifted: Vec<Vec<f64>> = g.points().map(|x| vec![x[0] + 0.25]).collect();
        let out = pushforward(&mu, &shifted, &g).unwrap();
        assert_eq!(out, mu);
    }

    #[test]
    fn pushforward_outside_box_errors() {
        let g = Grid::cells(1, 4, 0.0, 1.0).unwrap();
        let mu = GridMeasure::uniform(g.clone());
        let imgs = vec![vec![2.0]; 4];
        assert!(matches!(pushforward(&mu, &imgs, &g), Err(Error::OutOfDomain { .. })));
    }

    #[test]
    fn pushforward_conserves_mass_exactly_for_dyadic_masses() {
        let g = Grid::torus(2, 16).unwrap();
        let mu = GridMeasure::uniform(g.clone());
        let imgs: Vec<Vec<f64>> = g
            .points()
            .map(|x| vec![(3.0 * x[0] + 0.37).fract(), (x[0] * x[1] + 0.9).fract()])
            .collect();
        let out = pushforward(&mu, &imgs, &g).unwrap();
        assert_eq!(out.total_mass(), mu.total_mass());
    }

    #[test]
    fn mass_in_box_wraps() {
        let g = Grid::torus(1, 4).unwrap();
        let mu = GridMeasure::uniform(g);
        assert!((mu.mass_in_box(&[-0.125], &[0.125]) - 0.25).abs() < 1e-15);
        assert!((mu.mass_in_box(&[0.9], &[1.1]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let m = DiscreteMeasure::new(
            Domain::Torus(2),
            vec![Atom { point: vec![0.1, 0.2], weight: 0.25 }, Atom { point: vec![0.5, 0.75], weight: 0.75 }],
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().starts_with("coord_0,coord_1,weight\n"));
        assert_eq!(DiscreteMeasure::read_csv(Domain::Torus(2), buf.as_slice()).unwrap(), m);
    }

    fn prob_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn empirical_total_weight_is_one(xs in prop::collection::vec(0.0f64..1.0, 1..50)) {
            let m = empirical(&EmpiricalConfig::torus_1d(&xs).unwrap()).unwrap();
            prop_assert!((m.total_mass() - 1.0).abs() <= 1e-14);
        }

        #[test]
        fn entropy_is_nonnegative((a, b) in (2usize..7).prop_flat_map(|k| (prob_vec(k), prob_vec(k)))) {
            let mu0 = DiscreteMeasure::new(Domain::Alphabet(a.len()),
                a.iter().enumerate().map(|(i, &w)| Atom { point: vec![i as f64], weight: w }).collect()).unwrap();
            let nu = DiscreteMeasure::new(Domain::Alphabet(b.len()),
                b.iter().enumerate().map(|(i, &w)| Atom { point: vec![i as f64], weight: w }).collect()).unwrap();
            let e = entropy(&mu0, &nu).unwrap();
            prop_assert!(e >= -1e-15);
            prop_assert!(entropy(&mu0, &mu0).unwrap().abs() < 1e-15);
            let tv: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            // Pinsker: a strictly different pair has strictly positive entropy.
            prop_assert!(e >= tv * tv / 2.0 - 1e-15);
        }

        #[test]
        fn log_mgf_is_midpoint_convex(
            (w, t1, t2) in (2usize..8).prop_flat_map(|k| (
                prob_vec(k),
                prop::collection::vec(-5.0f64..5.0, k),
                prop::collection::vec(-5.0f64..5.0, k),
            ))
        ) {
            let masses = w;
            let mid: Vec<f64> = t1.iter().zip(&t2).map(|(a, b)| 0.5 * (a + b)).collect();
            let lhs = log_mgf_weights(&masses, &mid).unwrap();
            let rhs = 0.5 * log_mgf_weights(&masses, &t1).unwrap() + 0.5 * log_mgf_weights(&masses, &t2).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }
    }
}
