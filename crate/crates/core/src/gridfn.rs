//! Uniform size grids on `[0, m]` and functions sampled on them.
//!
//! Every integral in the crate goes through the composite trapezoid rule
//! implemented here, so discrete identities (mass ledgers, consistency of
//! environments) close exactly rather than to quadrature accuracy.

use serde::{Deserialize, Serialize};

use crate::error::GridError;

/// Uniform partition of `[0, m]` into `n` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    m: f64,
    n: usize,
}

impl Grid {
    pub fn new(m: f64, n: usize) -> Result<Self, GridError> {
        if !(m.is_finite() && m > 0.0) {
            return Err(GridError::InvalidExtent(m));
        }
        if n < 2 {
            return Err(GridError::TooFewCells(n));
        }
        Ok(Self { m, n })
    }

    pub fn m(&self) -> f64 {
        self.m
    }

    /// Number of cells; there are `n + 1` nodes.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.n + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn h(&self) -> f64 {
        self.m / self.n as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        if i == self.n {
            self.m
        } else {
            i as f64 * self.h()
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n).map(move |i| self.node(i))
    }

    /// Trapezoid weight of node `i`.
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i == self.n {
            0.5 * self.h()
        } else {
            self.h()
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.weight(i)).collect()
    }

    pub fn refined(&self, factor: usize) -> Result<Self, GridError> {
        if factor == 0 {
            return Err(GridError::InvalidRefinement);
        }
        Self::new(self.m, self.n * factor)
    }
}

/// Values of a function at the nodes of a [`Grid`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self, GridError> {
        if values.len() != grid.len() {
            return Err(GridError::LengthMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Result<Self, GridError> {
        Self::new(grid, grid.nodes().map(f).collect())
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.len()],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, i: usize) -> f64 {
        self.values[i]
    }

    /// Node-wise map. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Self {
        let values: Vec<f64> = self
            .grid
            .nodes()
            .zip(&self.values)
            .map(|(s, &v)| f(s, v))
            .collect();
        assert!(
            values.iter().all(|v| v.is_finite()),
            "map produced a non-finite value"
        );
        Self {
            grid: self.grid,
            values,
        }
    }

    /// Node-wise combination of two functions on the same grid.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.grid, other.grid, "grid mismatch");
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|_, v| c * v)
    }

    /// Composite trapezoid approximation of the integral over `[0, m]`.
    pub fn integrate(&self) -> f64 {
        let h = self.grid.h();
        self.values
            .windows(2)
            .fold(0.0, |acc, w| acc + 0.5 * h * (w[0] + w[1]))
    }

    /// Running trapezoid integral from 0 to each node.
    pub fn cumulative_integral(&self) -> Self {
        let h = self.grid.h();
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.values.len());
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            out.push(acc);
        }
        Self {
            grid: self.grid,
            values: out,
        }
    }

    /// Integral of the piecewise-linear interpolant over `[a, b]`.
    ///
    /// Agrees with [`integrate`](Self::integrate) on `[0, m]` and is additive
    /// over adjacent intervals, which is what bin indicators need.
    pub fn integrate_between(&self, a: f64, b: f64) -> Result<f64, GridError> {
        if b < a {
            return Ok(-self.integrate_between(b, a)?);
        }
        Ok(self.antiderivative_at(b)? - self.antiderivative_at(a)?)
    }

    fn antiderivative_at(&self, s: f64) -> Result<f64, GridError> {
        let (i, t) = self.locate(s)?;
        let h = self.grid.h();
        let mut acc: f64 = (0..i)
            .map(|k| 0.5 * h * (self.values[k] + self.values[k + 1]))
            .sum();
        if t > 0.0 {
            let v0 = self.values[i];
            let v1 = self.values[i + 1];
            acc += h * t * (v0 + 0.5 * t * (v1 - v0));
        }
        Ok(acc)
    }

    /// Cell index and local coordinate in `[0, 1)` of `s`.
    fn locate(&self, s: f64) -> Result<(usize, f64), GridError> {
        let m = self.grid.m;
        if !(0.0..=m).contains(&s) {
            return Err(GridError::OutOfDomain { s, m });
        }
        let mut x = s / self.grid.h();
        // snap to nodes under rounding so node values are reproduced exactly
        if (x - x.round()).abs() < 1e-9 {
            x = x.round();
        }
        let i = (x.floor() as usize).min(self.grid.n);
        if i == self.grid.n {
            return Ok((self.grid.n, 0.0));
        }
        Ok((i, x - i as f64))
    }

    /// Piecewise-linear interpolation; exact at nodes.
    pub fn interpolate(&self, s: f64) -> Result<f64, GridError> {
        let (i, t) = self.locate(s)?;
        if t == 0.0 {
            return Ok(self.values[i]);
        }
        Ok(self.values[i] + t * (self.values[i + 1] - self.values[i]))
    }

    /// Resample onto a grid with `factor` times as many cells.
    pub fn refine(&self, factor: usize) -> Result<Self, GridError> {
        let fine = self.grid.refined(factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let values = (0..fine.len())
            .map(|i| {
                if i % factor == 0 {
                    Ok(self.values[i / factor])
                } else {
                    self.interpolate(fine.node(i))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(fine, values)
    }

    /// Restrict to a grid whose cell count divides this one's.
    pub fn coarsen_to(&self, coarse: &Grid) -> Result<Self, GridError> {
        if coarse.m != self.grid.m || coarse.n == 0 || !self.grid.n.is_multiple_of(coarse.n) {
            return Err(GridError::IncompatibleGrids);
        }
        let stride = self.grid.n / coarse.n;
        Self::new(
            *coarse,
            (0..coarse.len()).map(|i| self.values[i * stride]).collect(),
        )
    }

    /// Derivative by centered differences, second-order one-sided at the ends.
    pub fn derivative(&self) -> Self {
        let v = &self.values;
        let n = self.grid.n;
        let h = self.grid.h();
        let mut d = vec![0.0; n + 1];
        if n >= 2 {
            d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
            d[n] = (3.0 * v[n] - 4.0 * v[n - 1] + v[n - 2]) / (2.0 * h);
        }
        for i in 1..n {
            d[i] = (v[i + 1] - v[i - 1]) / (2.0 * h);
        }
        Self {
            grid: self.grid,
            values: d,
        }
    }

    pub fn l1_norm(&self) -> f64 {
        self.map(|_, v| v.abs()).integrate()
    }

    pub fn l1_distance(&self, other: &Self) -> f64 {
        self.zip_with(other, |a, b| (a - b).abs()).integrate()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(n: usize) -> Grid {
        Grid::new(1.0, n).unwrap()
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::new(0.0, 10).is_err());
        assert!(Grid::new(1.0, 1).is_err());
        assert!(Grid::new(f64::NAN, 10).is_err());
        let g = unit(4);
        assert!(GridFunction::new(g, vec![0.0; 4]).is_err());
        assert!(GridFunction::new(g, vec![0.0, 1.0, f64::NAN, 0.0, 0.0]).is_err());
    }

    #[test]
    fn nodes_span_domain() {
        let g = Grid::new(2.5, 7).unwrap();
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes[0], 0.0);
        assert_eq!(*nodes.last().unwrap(), 2.5);
        assert!(nodes.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn integrate_examples() {
        let one = GridFunction::constant(unit(10), 1.0);
        assert!((one.integrate() - 1.0).abs() < 1e-15);
        for n in [2, 3, 17, 100] {
            let f = GridFunction::from_fn(unit(n), |s| s).unwrap();
            assert!((f.integrate() - 0.5).abs() < 1e-15);
        }
        let sq = GridFunction::from_fn(unit(2), |s| s * s).unwrap();
        assert!((sq.integrate() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn cumulative_examples() {
        let g = unit(10);
        let c = GridFunction::constant(g, 1.0).cumulative_integral();
        for (i, s) in g.nodes().enumerate() {
            assert!((c.get(i) - s).abs() < 1e-14);
        }
        let lin = GridFunction::from_fn(g, |s| s)
            .unwrap()
            .cumulative_integral();
        for (i, s) in g.nodes().enumerate() {
            assert!((lin.get(i) - 0.5 * s * s).abs() < 1e-15);
        }
        let g = unit(100);
        let e = GridFunction::from_fn(g, f64::exp)
            .unwrap()
            .cumulative_integral();
        let err = g
            .nodes()
            .enumerate()
            .map(|(i, s)| (e.get(i) - (s.exp() - 1.0)).abs())
            .fold(0.0, f64::max);
        // trapezoid constant for e^s on [0,1]: (e - 1)/12 h^2
        assert!(err <= 0.15 * 1e-4, "{err}");
    }

    #[test]
    fn second_order_convergence_on_exp() {
        let exact = std::f64::consts::E - 1.0;
        let err = |n| {
            (GridFunction::from_fn(unit(n), f64::exp)
                .unwrap()
                .integrate()
                - exact)
                .abs()
        };
        let ratio = err(100) / err(200);
        assert!((ratio - 4.0).abs() <= 0.8, "{ratio}");
    }

    #[test]
    fn interpolation_examples() {
        let g = unit(10);
        let f = GridFunction::from_fn(g, |s| s * s).unwrap();
        for i in 0..=10 {
            assert_eq!(f.interpolate(g.node(i)).unwrap(), f.get(i));
        }
        let lin = GridFunction::from_fn(g, |s| s).unwrap();
        assert!((lin.interpolate(0.35).unwrap() - 0.35).abs() < 1e-15);
        // interpolation error bound h^2/8 * max|f''| with h = 0.1, f'' = 2
        let v = f.interpolate(0.05).unwrap();
        assert!((v - 0.0025).abs() <= 0.1 * 0.1 / 8.0 * 2.0 + 1e-15);
        assert!((v - 0.005).abs() < 1e-15);
        assert!(f.interpolate(-0.1).is_err());
        assert!(f.interpolate(1.0001).is_err());
    }

    #[test]
    fn refine_examples() {
        let g = unit(8);
        let f = GridFunction::from_fn(g, |s| s.sin()).unwrap();
        assert_eq!(f.refine(1).unwrap(), f);
        let c = GridFunction::constant(g, 3.25).refine(4).unwrap();
        assert!(c.values().iter().all(|&v| v == 3.25));
        let lin = GridFunction::from_fn(g, |s| s).unwrap().refine(2).unwrap();
        for (i, s) in lin.grid().nodes().enumerate() {
            assert!((lin.get(i) - s).abs() < 1e-15);
        }
        assert!(f.refine(0).is_err());
        assert_eq!(
            lin.coarsen_to(&g).unwrap().values(),
            GridFunction::from_fn(g, |s| s).unwrap().values()
        );
    }

    #[test]
    fn integrate_between_is_additive() {
        let f = GridFunction::from_fn(unit(7), |s| (3.0 * s).cos() + 2.0).unwrap();
        let total = f.integrate();
        let parts: f64 = (0..5)
            .map(|k| {
                f.integrate_between(k as f64 / 5.0, (k + 1) as f64 / 5.0)
                    .unwrap()
            })
            .sum();
        assert!((total - parts).abs() < 1e-14);
        assert!((f.integrate_between(0.0, 1.0).unwrap() - total).abs() < 1e-14);
    }

    #[test]
    fn derivative_is_exact_on_quadratics() {
        let f = GridFunction::from_fn(unit(10), |s| 3.0 * s * s - s).unwrap();
        let d = f.derivative();
        for (i, s) in f.grid().nodes().enumerate() {
            assert!((d.get(i) - (6.0 * s - 1.0)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cumulative_end_matches_integrate(vals in prop::collection::vec(-10.0f64..10.0, 3..60)) {
            let g = unit(vals.len() - 1);
            let f = GridFunction::new(g, vals).unwrap();
            prop_assert_eq!(f.cumulative_integral().values().last().copied().unwrap(), f.integrate());
        }

        #[test]
        fn integrate_is_linear(
            a in -5.0f64..5.0, b in -5.0f64..5.0,
            vals in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        ) {
            let g = unit(vals.len() - 1);
            let f = GridFunction::new(g, vals.iter().map(|v| v.0).collect()).unwrap();
            let h = GridFunction::new(g, vals.iter().map(|v| v.1).collect()).unwrap();
            let comb = f.zip_with(&h, |x, y| a * x + b * y);
            let lhs = comb.integrate();
            let rhs = a * f.integrate() + b * h.integrate();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn positivity(vals in prop::collection::vec(0.0f64..10.0, 3..40)) {
            let g = unit(vals.len() - 1);
            let f = GridFunction::new(g, vals).unwrap();
            prop_assert!(f.integrate() >= 0.0);
            let c = f.cumulative_integral();
            prop_assert!(c.values().windows(2).all(|w| w[1] >= w[0]));
        }
    }
}
