//! The flat torus `R^d / Z^d`, its `1/n`-lattice and the theta-like functions
//! `phi_i(x) = sum_m exp(-n |x - p_i - m|^2)`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::grid::Grid;
use crate::measures::EmpiricalConfig;

/// Squared torus distance `min_{m in {-1,0,1}^d} |x - y - m|^2`, exact for
/// points of the chart `[0,1)^d`.
pub fn torus_sq_dist(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DomainMismatch(format!("points of dimension {} and {}", x.len(), y.len())));
    }
    for p in [x, y] {
        if p.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::OutOfDomain { point: p.to_vec(), domain: "torus chart [0,1)^d".into() });
        }
    }
    Ok(x.iter().zip(y).map(|(a, b)| axis_sq_dist(a - b)).sum())
}

/// `min_m (t - m)^2` over `m in {-1, 0, 1}`, for `t` in `(-1, 1)`.
fn axis_sq_dist(t: f64) -> f64 {
    let a = t.abs();
    let w = a.min(1.0 - a);
    w * w
}

/// The `n^d` points of `(1/n) Z^d` inside `[0,1)^d`, in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TorusLattice {
    n: usize,
    d: usize,
    points: Vec<Vec<f64>>,
}

impl TorusLattice {
    pub fn new(n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return invalid("lattice needs n >= 1 and d >= 1");
        }
        let points = Grid::torus_lattice(d, n)?.points().collect();
        Ok(Self { n, d, points })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    /// The lattice points as an empirical configuration.
    pub fn config(&self) -> EmpiricalConfig {
        EmpiricalConfig::new(crate::measures::Domain::Torus(self.d), self.points.clone())
            .expect("lattice points lie in the chart")
    }
}

/// Sharpness `n` of the theta functions and the truncation radius `R` of the
/// sum over `m in {-R..R}^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaParams {
    pub n: usize,
    pub radius: usize,
}

impl ThetaParams {
    pub const DEFAULT_RADIUS: usize = 2;

    pub fn new(n: usize, radius: usize) -> Result<Self> {
        if n == 0 {
            return invalid("theta sharpness n must be positive");
        }
        if radius == 0 {
            return invalid("truncation radius must be at least 1");
        }
        Ok(Self { n, radius })
    }

    pub fn with_default_radius(n: usize) -> Result<Self> {
        Self::new(n, Self::DEFAULT_RADIUS)
    }

    /// Bound `e^{-n (R-1)^2}` on the size of the first omitted term.
    pub fn tail_bound(&self) -> f64 {
        let r = self.radius as f64 - 1.0;
        (-(self.n as f64) * r * r).exp()
    }

    /// Width `(1/n) log (2R+1)^d` of the two-sided bracket on `-(1/n) log phi`.
    pub fn bracket_width(&self, d: usize) -> f64 {
        d as f64 * ((2 * self.radius + 1) as f64).ln() / self.n as f64
    }
}

/// `log phi_i(x)`. The truncated sum factorizes over axes and is centered on
/// the representative of `x - p_i` in `[-1/2, 1/2)`, which keeps it exactly
/// periodic. Each axis sum uses a max shift so large `n` does not underflow.
pub fn log_theta(lattice: &TorusLattice, i: usize, params: &ThetaParams, x: &[f64]) -> Result<f64> {
    let p = lattice.points.get(i).ok_or_else(|| {
        Error::Invalid(format!("lattice index {i} out of range 0..{}", lattice.len()))
    })?;
    if x.len() != lattice.d {
        return Err(Error::DomainMismatch(format!("point of dimension {} on a {}-torus", x.len(), lattice.d)));
    }
    let n = params.n as f64;
    let r = params.radius as i64;
    let mut total = 0.0;
    for (xa, pa) in x.iter().zip(p) {
        let mut t = (xa - pa).rem_euclid(1.0);
        if t >= 0.5 {
            t -= 1.0;
        }
        let exps: Vec<f64> = (-r..=r).map(|m| -n * (t - m as f64).powi(2)).collect();
        let shift = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += shift + exps.iter().map(|e| (e - shift).exp()).sum::<f64>().ln();
    }
    Ok(total)
}

/// `phi_i(x)` truncated to `m in {-R..R}^d`.
pub fn theta(lattice: &TorusLattice, i: usize, params: &ThetaParams, x: &[f64]) -> Result<f64> {
    Ok(log_theta(lattice, i, params, x)?.exp())
}

/// Matrix of `log phi_i(x_j)`; rows indexed by lattice points, columns by
/// configuration points.
pub fn log_phi_matrix(lattice: &TorusLattice, params: &ThetaParams, config: &EmpiricalConfig) -> Result<DMatrix<f64>> {
    let size = lattice.len();
    if config.len() != size {
        return invalid(format!("configuration of {} points for a lattice of {size}", config.len()));
    }
    if config.dim() != lattice.d {
        return Err(Error::DomainMismatch("configuration and lattice dimensions differ".into()));
    }
    let rows: Vec<Vec<f64>> = (0..size)
        .into_par_iter()
        .map(|i| config.points().iter().map(|x| log_theta(lattice, i, params, x)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(size, size, |i, j| rows[i][j]))
}

/// `Phi = [phi_i(x_j)]`.
pub fn phi_matrix(lattice: &TorusLattice, params: &ThetaParams, config: &EmpiricalConfig) -> Result<DMatrix<f64>> {
    Ok(log_phi_matrix(lattice, params, config)?.map(f64::exp))
}

/// Outcome of [`theta_rate_error`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThetaRateError {
    /// `sup_{x, i} |-(1/n) log phi_i(x) - d(p_i, x)^2|`.
    pub sup_error: f64,
    /// `(1/n) log (2R+1)^d`.
    pub bracket_width: f64,
    /// Whether `d^2 - width <= -(1/n) log phi <= d^2` held at every grid point.
    pub bracket_holds: bool,
    pub tail_bound: f64,
}

/// Sweeps the periodic grid of `k^d` cell centers against every lattice point.
pub fn theta_rate_error(params: &ThetaParams, lattice: &TorusLattice, k: usize) -> Result<ThetaRateError> {
    if lattice.d > 2 {
        return invalid("theta_rate_error supports d <= 2");
    }
    let grid = Grid::torus(lattice.d, k)?;
    let xs: Vec<Vec<f64>> = grid.points().collect();
    let n = params.n as f64;
    let width = params.bracket_width(lattice.d);
    let slack = 1e-12;
    let per_point: Vec<(f64, bool)> = xs
        .par_iter()
        .map(|x| {
            let mut sup = 0.0_f64;
            let mut ok = true;
            for (i, p) in lattice.points.iter().enumerate() {
                let rate = -log_theta(lattice, i, params, x)? / n;
                let d2 = torus_sq_dist(p, x)?;
                sup = sup.max((rate - d2).abs());
                ok &= rate <= d2 + slack && rate >= d2 - width - slack;
            }
            Ok((sup, ok))
        })
        .collect::<Result<_>>()?;
    Ok(ThetaRateError {
        sup_error: per_point.iter().map(|p| p.0).fold(0.0, f64::max),
        bracket_width: width,
        bracket_holds: per_point.iter().all(|p| p.1),
        tail_bound: params.tail_bound(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sq_dist_examples() {
        assert_eq!(torus_sq_dist(&[0.3], &[0.3]).unwrap(), 0.0);
        assert!((torus_sq_dist(&[0.1], &[0.9]).unwrap() - 0.04).abs() < 1e-15);
        assert!((torus_sq_dist(&[0.9, 0.9], &[0.1, 0.1]).unwrap() - 0.08).abs() < 1e-15);
        assert!(torus_sq_dist(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn theta_at_lattice_point() {
        let lat = TorusLattice::new(4, 1).unwrap();
        let p = ThetaParams::new(4, 2).unwrap();
        let v = theta(&lat, 0, &p, &[0.0]).unwrap();
        let expected = 1.0 + 2.0 * (-4.0f64).exp() + 2.0 * (-16.0f64).exp();
        assert!((v - expected).abs() < 1e-14);
        assert!((v - 1.036632).abs() < 1e-6);
    }

    #[test]
    fn lattice_is_row_major() {
        let lat = TorusLattice::new(2, 2).unwrap();
        assert_eq!(lat.points(), &[vec![0.0, 0.0], vec![0.0, 0.5], vec![0.5, 0.0], vec![0.5, 0.5]]);
    }

    #[test]
    fn phi_matrix_shapes_and_diagonal() {
        let lat = TorusLattice::new(1, 1).unwrap();
        let p = ThetaParams::with_default_radius(1).unwrap();
        let m = phi_matrix(&lat, &p, &lat.config()).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m[(0, 0)], theta(&lat, 0, &p, &[0.0]).unwrap());

        for n in [8, 12, 16] {
            let lat = TorusLattice::new(n, 1).unwrap();
            let p = ThetaParams::with_default_radius(n).unwrap();
            let m = phi_matrix(&lat, &p, &lat.config()).unwrap();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        assert!(m[(i, i)] > m[(i, j)]);
                    }
                }
            }
        }
        let wrong = EmpiricalConfig::torus_1d(&[0.1]).unwrap();
        assert!(phi_matrix(&TorusLattice::new(2, 1).unwrap(), &p, &wrong).is_err());
    }

    #[test]
    fn column_permutation_permutes_columns() {
        let lat = TorusLattice::new(3, 1).unwrap();
        let p = ThetaParams::with_default_radius(3).unwrap();
        let a = EmpiricalConfig::torus_1d(&[0.1, 0.5, 0.8]).unwrap();
        let b = EmpiricalConfig::torus_1d(&[0.8, 0.1, 0.5]).unwrap();
        let ma = phi_matrix(&lat, &p, &a).unwrap();
        let mb = phi_matrix(&lat, &p, &b).unwrap();
        for i in 0..3 {
            assert_eq!(mb[(i, 0)], ma[(i, 2)]);
            assert_eq!(mb[(i, 1)], ma[(i, 0)]);
            assert_eq!(mb[(i, 2)], ma[(i, 1)]);
        }
    }

    #[test]
    fn rate_error_sweep_decreases() {
        let mut last = f64::INFINITY;
        for n in [8, 16, 32, 64] {
            let lat = TorusLattice::new(n, 1).unwrap();
            let p = ThetaParams::new(n, 2).unwrap();
            let e = theta_rate_error(&p, &lat, 256).unwrap();
            assert!(e.bracket_holds);
            assert!(e.sup_error < last);
            last = e.sup_error;
        }
        assert!(last < 0.05 && last <= 5f64.ln() / 64.0 + 1e-6);
    }

    #[test]
    fn large_n_does_not_underflow() {
        let lat = TorusLattice::new(512, 1).unwrap();
        let p = ThetaParams::with_default_radius(512).unwrap();
        let l = log_theta(&lat, 0, &p, &[0.5]).unwrap();
        assert!(l.is_finite());
        assert!((-l / 512.0 - 0.25).abs() < 2f64.ln() / 512.0 + 1e-12);
    }

    proptest! {
        #[test]
        fn dominant_term_and_periodicity(x in 0.0f64..1.0, i in 0usize..8) {
            let lat = TorusLattice::new(8, 1).unwrap();
            let p = ThetaParams::new(8, 2).unwrap();
            let v = theta(&lat, i, &p, &[x]).unwrap();
            let d2 = torus_sq_dist(lat.point(i), &[x]).unwrap();
            prop_assert!(v > 0.0);
            prop_assert!(v >= (-8.0 * d2).exp() * (1.0 - 1e-12));
            let shifted = (x + 1.0).fract();
            let w = theta(&lat, i, &p, &[shifted]).unwrap();
            prop_assert!((v - w).abs() <= 1e-12 * v);
        }

        #[test]
        fn translation_symmetry(x in 0.0f64..1.0, y in 0.0f64..1.0, i in 0usize..16, j in 0usize..16) {
            let lat = TorusLattice::new(4, 2).unwrap();
            let p = ThetaParams::new(4, 2).unwrap();
            let (pi, pj) = (lat.point(i).to_vec(), lat.point(j).to_vec());
            let q = [x, y];
            let moved: Vec<f64> = (0..2).map(|a| (q[a] + pj[a] - pi[a]).rem_euclid(1.0)).collect();
            let a = theta(&lat, i, &p, &q).unwrap();
            let b = theta(&lat, j, &p, &moved).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }

        #[test]
        fn two_sided_bracket(x in 0.0f64..1.0, y in 0.0f64..1.0, n in 1usize..40) {
            let lat = TorusLattice::new(n, 2).unwrap();
            let p = ThetaParams::new(n, 2).unwrap();
            let i = (x * 7.0) as usize % lat.len();
            let rate = -log_theta(&lat, i, &p, &[x, y]).unwrap() / n as f64;
            let d2 = torus_sq_dist(lat.point(i), &[x, y]).unwrap();
            prop_assert!(rate <= d2 + 1e-12);
            prop_assert!(rate >= d2 - p.bracket_width(2) - 1e-12);
        }
    }
}
