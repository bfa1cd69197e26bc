//! Regular tensor grids and sampled functions on them.
//!
//! A [`Grid`] is the same number of points `k` along each of `dim` axes, laid
//! out over a box `[lo, hi]` (or the torus chart `[0,1)^d` when periodic).
//! Points are enumerated in row-major order: the first coordinate varies
//! slowest.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Placement of the `k` points along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Cell centers `lo + (j + 1/2) h` with `h = (hi - lo) / k`.
    Centers,
    /// Endpoint-inclusive nodes `lo + j h` with `h = (hi - lo) / (k - 1)`.
    Nodes,
    /// Left cell corners `lo + j h` with `h = (hi - lo) / k`; the natural
    /// layout for lattices on a periodic domain.
    Lattice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    k: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    layout: Layout,
    periodic: bool,
}

impl Grid {
    pub fn new(k: usize, lo: Vec<f64>, hi: Vec<f64>, layout: Layout, periodic: bool) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return invalid("grid bounds must be nonempty and of equal length");
        }
        let min_k = if layout == Layout::Nodes { 2 } else { 1 };
        if k < min_k {
            return invalid(format!("grid needs at least {min_k} points per axis, got {k}"));
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return invalid(format!("bad axis bounds [{a}, {b}]"));
            }
        }
        if periodic && layout == Layout::Nodes {
            return invalid("periodic grids cannot use endpoint-inclusive nodes");
        }
        Ok(Self { k, lo, hi, layout, periodic })
    }

    /// Cell-centered grid on the box `[lo, hi]^dim`.
    pub fn cells(dim: usize, k: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(k, vec![lo; dim], vec![hi; dim], Layout::Centers, false)
    }

    /// Endpoint-inclusive nodes on the box `[lo, hi]^dim`.
    pub fn nodes(dim: usize, k: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(k, vec![lo; dim], vec![hi; dim], Layout::Nodes, false)
    }

    /// Cell centers of the torus chart `[0,1)^dim`.
    pub fn torus(dim: usize, k: usize) -> Result<Self> {
        Self::new(k, vec![0.0; dim], vec![1.0; dim], Layout::Centers, true)
    }

    /// The lattice `{j/k}` on the torus chart `[0,1)^dim`.
    pub fn torus_lattice(dim: usize, k: usize) -> Result<Self> {
        Self::new(k, vec![0.0; dim], vec![1.0; dim], Layout::Lattice, true)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    /// Total number of points, `k^dim`.
    pub fn len(&self) -> usize {
        self.k.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self, axis: usize) -> f64 {
        let w = self.hi[axis] - self.lo[axis];
        match self.layout {
            Layout::Nodes => w / (self.k - 1) as f64,
            Layout::Centers | Layout::Lattice => w / self.k as f64,
        }
    }

    /// Volume of the cell owned by one point.
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim()).map(|a| self.step(a)).product()
    }

    pub fn coord(&self, axis: usize, j: usize) -> f64 {
        let h = self.step(axis);
        match self.layout {
            Layout::Centers => self.lo[axis] + (j as f64 + 0.5) * h,
            Layout::Nodes if j + 1 == self.k => self.hi[axis],
            Layout::Nodes | Layout::Lattice => self.lo[axis] + j as f64 * h,
        }
    }

    /// Coordinates along one axis.
    pub fn axis_coords(&self, axis: usize) -> Vec<f64> {
        (0..self.k).map(|j| self.coord(axis, j)).collect()
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let d = self.dim();
        let mut out = vec![0; d];
        for a in (0..d).rev() {
            out[a] = idx % self.k;
            idx /= self.k;
        }
        out
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &j| acc * self.k + j)
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx)
            .iter()
            .enumerate()
            .map(|(a, &j)| self.coord(a, j))
            .collect()
    }

    pub fn points(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Whether `x` lies in the grid's domain (closed box, or `[0,1)^d` chart
    /// for periodic grids).
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().enumerate().all(|(a, &v)| {
                if self.periodic {
                    v >= self.lo[a] && v < self.hi[a]
                } else {
                    v >= self.lo[a] && v <= self.hi[a]
                }
            })
    }

    /// Index of the cell owning `x`: for cell layouts the cell `[x_j - h/2, x_j + h/2)`
    /// around each point. Periodic grids wrap `x` first; box grids return
    /// `None` when `x` falls outside the box.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut multi = Vec::with_capacity(self.dim());
        for (a, &v) in x.iter().enumerate() {
            if !v.is_finite() {
                return None;
            }
            let h = self.step(a);
            let w = self.hi[a] - self.lo[a];
            let mut t = v - self.lo[a];
            if self.periodic {
                t = t.rem_euclid(w);
            } else if t < -1e-12 * w || t > w * (1.0 + 1e-12) {
                return None;
            }
            let raw = match self.layout {
                Layout::Centers => (t / h).floor(),
                Layout::Nodes | Layout::Lattice => (t / h + 0.5).floor(),
            };
            let mut j = raw.max(0.0) as usize;
            if self.periodic {
                j %= self.k;
            } else {
                j = j.min(self.k - 1);
            }
            multi.push(j);
        }
        Some(self.flat_index(&multi))
    }

    pub fn describe(&self) -> String {
        format!(
            "{}grid k={} over {:?}..{:?} ({:?})",
            if self.periodic { "periodic " } else { "" },
            self.k,
            self.lo,
            self.hi,
            self.layout
        )
    }
}

/// Values sampled at the points of a [`Grid`]. `+inf` marks points outside the
/// effective domain; `-inf` and `NaN` are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!(
                "grid function has {} values for {} grid points",
                values.len(),
                grid.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| v.is_nan() || **v == f64::NEG_INFINITY) {
            return invalid(format!("grid function value {v} is not allowed"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let values = grid.points().map(|x| f(&x)).collect();
        Self::new(grid, values)
    }

    pub fn constant(grid: Grid, c: f64) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![c; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, idx: usize) -> f64 {
        self.values[idx]
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite_somewhere(&self) -> bool {
        self.values.iter().any(|v| v.is_finite())
    }

    /// Pointwise map, keeping the grid.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.grid.clone(), self.values.iter().map(|&v| f(v)).collect())
    }

    /// Pointwise combination with another function on the same grid.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.grid != other.grid {
            return Err(Error::DomainMismatch("grid functions live on different grids".into()));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Self::new(self.grid.clone(), values)
    }

    pub fn add_constant(&self, c: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v + c).collect(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Multilinear interpolation at `x`. Periodic grids wrap; box grids clamp
    /// to the outermost points.
    pub fn interpolate(&self, x: &[f64]) -> Result<f64> {
        let g = &self.grid;
        if x.len() != g.dim() {
            return Err(Error::DomainMismatch(format!(
                "point of dimension {} on a {}-dimensional grid",
                x.len(),
                g.dim()
            )));
        }
        let d = g.dim();
        let mut lower = Vec::with_capacity(d);
        let mut frac = Vec::with_capacity(d);
        for (a, &v) in x.iter().enumerate() {
            let h = g.step(a);
            let origin = g.coord(a, 0);
            let mut t = (v - origin) / h;
            if g.periodic {
                t = t.rem_euclid(g.k as f64);
                let j = (t.floor() as usize) % g.k;
                lower.push(j);
                frac.push(t - t.floor());
            } else {
                t = t.clamp(0.0, (g.k - 1) as f64);
                let j = (t.floor() as usize).min(g.k.saturating_sub(2));
                lower.push(j);
                frac.push(if g.k == 1 { 0.0 } else { t - j as f64 });
            }
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut multi = Vec::with_capacity(d);
            for a in 0..d {
                let up = (corner >> a) & 1 == 1;
                let j = if up {
                    if g.periodic {
                        (lower[a] + 1) % g.k
                    } else {
                        (lower[a] + 1).min(g.k - 1)
                    }
                } else {
                    lower[a]
                };
                w *= if up { frac[a] } else { 1.0 - frac[a] };
                multi.push(j);
            }
            if w == 0.0 {
                continue;
            }
            acc += w * self.values[g.flat_index(&multi)];
        }
        Ok(acc)
    }

    /// Writes `coord_0..coord_{d-1}, value` rows; `+inf` is written as `inf`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.grid.dim();
        let mut header: Vec<String> = (0..d).map(|a| format!("coord_{a}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
        for (i, v) in self.values.iter().enumerate() {
            let mut rec: Vec<String> = self.grid.point(i).iter().map(|c| c.to_string()).collect();
            rec.push(format_value(*v));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads values written by [`GridFunction::write_csv`] back onto `grid`.
    pub fn read_csv<R: Read>(grid: Grid, input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let d = grid.dim();
        let mut values = vec![f64::NAN; grid.len()];
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return invalid(format!("expected {} columns, found {}", d + 1, rec.len()));
            }
            let x = parse_fields(&rec, 0..d)?;
            let v = parse_value(&rec[d])?;
            let idx = grid
                .locate(&x)
                .ok_or_else(|| Error::OutOfDomain { point: x.clone(), domain: grid.describe() })?;
            values[idx] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return invalid("csv does not cover every grid point");
        }
        Self::new(grid, values)
    }
}

pub(crate) fn format_value(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        v.to_string()
    }
}

pub(crate) fn parse_value(s: &str) -> Result<f64> {
    let t = s.trim();
    if t == "inf" || t == "+inf" {
        return Ok(f64::INFINITY);
    }
    t.parse::<f64>()
        .map_err(|_| Error::Invalid(format!("cannot parse number {t:?}")))
}

pub(crate) fn parse_fields(rec: &csv::StringRecord, range: std::ops::Range<usize>) -> Result<Vec<f64>> {
    range.map(|i| parse_value(&rec[i])).collect()
}
