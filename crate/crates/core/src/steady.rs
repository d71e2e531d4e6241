//! Positive steady states through a finite-rank fixed-point construction.
//!
//! For fertility of the form `sum_j beta_j(s) * bbar_j(y, E(y))` an
//! equilibrium is `p(s) = sum_j P^j F_j(s)` where `F_j` is the survival
//! kernel of the j-th birth type and `(E, P^0, P^1..P^l)` is a fixed point of
//! the map [`phi_map`]. General fertility is approximated by piecewise
//! constant decompositions in the parent size ([`decompose_beta`]), whose
//! steady states converge as the rank grows.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{ModelError, SteadyError};
use crate::gridfn::{Grid, GridFunction};
use crate::model::{environment, Args, ModelIngredients, RateExpr, SeparableFertility};
use crate::survival::SurvivalData;

/// How the parent-side factor of a fertility term is evaluated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BirthWeight {
    /// `bbar(y, E(y))` as a rate expression
    Rate(RateExpr),
    /// indicator of the parent-size bin `[lo, hi]`
    Bin { lo: f64, hi: f64 },
}

impl BirthWeight {
    fn eval(&self, y: f64, e: f64) -> f64 {
        match self {
            BirthWeight::Rate(r) => r.eval(&Args {
                y,
                e,
                ..Args::default()
            }),
            BirthWeight::Bin { lo, hi } => {
                if (*lo..=*hi).contains(&y) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Value used when sampling the decomposition pointwise; bins are
    /// half-open `(lo, hi]` (the first one closed) so they do not overlap.
    fn eval_exclusive(&self, y: f64, e: f64) -> f64 {
        match self {
            BirthWeight::Bin { lo, hi } => {
                if (y > *lo || (*lo == 0.0 && y == 0.0)) && y <= *hi {
                    1.0
                } else {
                    0.0
                }
            }
            other => other.eval(y, e),
        }
    }

    /// `int_0^m bbar(s, H(s)) q(s) ds`
    fn integrate_against(&self, q: &GridFunction, h: &GridFunction) -> Result<f64, SteadyError> {
        match self {
            BirthWeight::Rate(r) => Ok(q.zip_with(&weight_on(r, h), |qv, w| qv * w).integrate()),
            BirthWeight::Bin { lo, hi } => Ok(q.integrate_between(*lo, *hi)?),
        }
    }
}

fn weight_on(r: &RateExpr, h: &GridFunction) -> GridFunction {
    h.map(|s, e| {
        r.eval(&Args {
            y: s,
            e,
            ..Args::default()
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FertilityTerm {
    /// `beta_j(s)` on the grid
    pub profile: GridFunction,
    pub weight: BirthWeight,
}

/// Where in each parent-size bin the profile is frozen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinAnchor {
    #[default]
    Right,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DecompositionMode {
    /// user-supplied separable terms, fixed
    Separable,
    /// parent-size bins; profiles refreshed from the environment iterate
    Piecewise {
        bins: usize,
        anchor: BinAnchor,
        minorant: Option<SeparableFertility>,
    },
}

/// Finite list of separable fertility terms.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FertilityDecomposition {
    grid: Grid,
    terms: Vec<FertilityTerm>,
    mode: DecompositionMode,
}

impl FertilityDecomposition {
    /// Fixed separable terms `beta_j(s) * bbar_j(y, E)`.
    pub fn separable(grid: Grid, terms: &[SeparableFertility]) -> Result<Self, SteadyError> {
        if terms.is_empty() {
            return Err(SteadyError::InvalidRank);
        }
        let terms = terms
            .iter()
            .map(|t| FertilityTerm {
                profile: t.profile_on(grid),
                weight: BirthWeight::Rate(t.weight.clone()),
            })
            .collect();
        Ok(Self {
            grid,
            terms,
            mode: DecompositionMode::Separable,
        })
    }

    /// Rank-one decomposition when the model fertility is already separable.
    pub fn from_model(grid: Grid, ing: &ModelIngredients) -> Option<Self> {
        let sep = ing.separable_fertility()?;
        Self::separable(grid, &[sep]).ok()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn terms(&self) -> &[FertilityTerm] {
        &self.terms
    }

    pub fn rank(&self) -> usize {
        self.terms.len()
    }

    pub fn mode(&self) -> &DecompositionMode {
        &self.mode
    }

    /// Recompute bin profiles for the environment `h`. No-op for fixed terms.
    pub fn refreshed(&self, ing: &ModelIngredients, h: &GridFunction) -> Result<Self, SteadyError> {
        match &self.mode {
            DecompositionMode::Separable => Ok(self.clone()),
            DecompositionMode::Piecewise {
                bins,
                anchor,
                minorant,
            } => decompose_beta_with(ing, h, *bins, *anchor, minorant.clone()),
        }
    }

    /// Pointwise value of the decomposed fertility.
    pub fn value(&self, s: f64, y: f64, e: f64) -> Result<f64, SteadyError> {
        let mut acc = 0.0;
        for t in &self.terms {
            let w = t.weight.eval_exclusive(y, e);
            if w != 0.0 {
                acc += t.profile.interpolate(s)? * w;
            }
        }
        Ok(acc)
    }

    /// `max |beta(s, y, H(y)) - beta^l(s, y, H(y))|` over a `samples x samples` lattice.
    pub fn sup_error(
        &self,
        ing: &ModelIngredients,
        h: &GridFunction,
        samples: usize,
    ) -> Result<f64, SteadyError> {
        let m = ing.m;
        let k = samples.max(2);
        let mut worst: f64 = 0.0;
        for i in 0..k {
            let s = m * i as f64 / (k - 1) as f64;
            for j in 0..k {
                let y = m * j as f64 / (k - 1) as f64;
                let e = h.interpolate(y)?;
                let diff = (ing.beta(s, y, e) - self.value(s, y, e)?).abs();
                worst = worst.max(diff);
            }
        }
        Ok(worst)
    }
}

/// Piecewise-constant-in-parent-size decomposition with `l` bins.
///
/// Bin `k` covers `[y_{k-1}, y_k]` with `y_k = k m / l`, and its profile is
/// `beta(s, y*, H(y*))` with `y*` the anchor point of the bin.
pub fn decompose_beta(
    ing: &ModelIngredients,
    h: &GridFunction,
    l: usize,
    anchor: BinAnchor,
) -> Result<FertilityDecomposition, SteadyError> {
    decompose_beta_with(ing, h, l, anchor, None)
}

/// As [`decompose_beta`], with a separable minorant kept as a fixed first
/// term and only the remainder `beta - minorant` split into bins.
pub fn decompose_beta_with(
    ing: &ModelIngredients,
    h: &GridFunction,
    l: usize,
    anchor: BinAnchor,
    minorant: Option<SeparableFertility>,
) -> Result<FertilityDecomposition, SteadyError> {
    if l == 0 {
        return Err(SteadyError::InvalidRank);
    }
    ing.check_grid(h.grid())?;
    let grid = *h.grid();
    let m = ing.m;
    let mut terms = Vec::with_capacity(l + 1);
    if let Some(minor) = &minorant {
        terms.push(FertilityTerm {
            profile: minor.profile_on(grid),
            weight: BirthWeight::Rate(minor.weight.clone()),
        });
    }
    for k in 1..=l {
        let lo = m * (k - 1) as f64 / l as f64;
        let hi = if k == l { m } else { m * k as f64 / l as f64 };
        let y = match anchor {
            BinAnchor::Right => hi,
            BinAnchor::Midpoint => 0.5 * (lo + hi),
        };
        let e = h.interpolate(y)?;
        let under = minorant.as_ref().map_or(0.0, |mi| mi.beta2(y, e));
        let profile = GridFunction::from_fn(grid, |s| {
            let rest = ing.beta(s, y, e) - minorant.as_ref().map_or(0.0, |mi| mi.beta1(s) * under);
            rest.max(0.0)
        })?;
        terms.push(FertilityTerm {
            profile,
            weight: BirthWeight::Bin { lo, hi },
        });
    }
    Ok(FertilityDecomposition {
        grid,
        terms,
        mode: DecompositionMode::Piecewise {
            bins: l,
            anchor,
            minorant,
        },
    })
}

/// Point `(H, P^0, P^1..P^l)` of the positive cone.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPointState {
    pub h: GridFunction,
    pub p0: f64,
    pub births: Vec<f64>,
}

impl FixedPointState {
    pub fn zero(grid: Grid, rank: usize) -> Self {
        Self {
            h: GridFunction::zeros(grid),
            p0: 0.0,
            births: vec![0.0; rank],
        }
    }

    /// `||H||_L1 + |P^0| + sum |P^j|`
    pub fn norm(&self) -> f64 {
        self.h.l1_norm() + self.p0.abs() + self.births.iter().map(|b| b.abs()).sum::<f64>()
    }

    pub fn distance(&self, other: &Self) -> f64 {
        self.h.l1_distance(&other.h)
            + (self.p0 - other.p0).abs()
            + self
                .births
                .iter()
                .zip(&other.births)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
    }

    pub fn in_cone(&self) -> bool {
        self.p0 >= 0.0 && self.births.iter().all(|b| *b >= 0.0) && self.h.min() >= 0.0
    }

    fn to_vec(&self) -> Vec<f64> {
        let mut v = self.h.values().to_vec();
        v.push(self.p0);
        v.extend_from_slice(&self.births);
        v
    }

    fn from_vec(grid: Grid, v: &[f64]) -> Self {
        let n = grid.len();
        Self {
            h: GridFunction::new(grid, v[..n].to_vec()).expect("finite iterate"),
            p0: v[n],
            births: v[n + 1..].to_vec(),
        }
    }
}

fn growth_on(grid: &Grid, ing: &ModelIngredients, p0: f64) -> Result<Vec<f64>, SteadyError> {
    let g2 = ing.gamma2(p0);
    grid.nodes()
        .map(|s| {
            let g = ing.gamma1(s) * g2;
            if g > 0.0 && g.is_finite() {
                Ok(g)
            } else {
                Err(SteadyError::NonPositiveGrowth { s, p: p0, gamma: g })
            }
        })
        .collect()
}

/// Survival data for environment `h` and weighted population `p0`.
pub fn survival_data(
    h: &GridFunction,
    p0: f64,
    ing: &ModelIngredients,
) -> Result<SurvivalData, SteadyError> {
    let grid = *h.grid();
    let gamma = growth_on(&grid, ing, p0)?;
    let mu: Vec<f64> = grid
        .nodes()
        .zip(h.values())
        .map(|(s, &e)| ing.mu(s, e))
        .collect();
    Ok(SurvivalData::new(grid, &mu, &gamma))
}

fn kernel_from(data: &SurvivalData, profile: &GridFunction) -> GridFunction {
    let f: Vec<f64> = profile
        .values()
        .iter()
        .zip(data.gamma())
        .map(|(b, g)| b / g)
        .collect();
    // F_j >= 0 whenever beta_j >= 0; clamp rounding-level negatives
    let vals = data
        .transform_real(&f)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    GridFunction::new(*data.grid(), vals).expect("finite kernel")
}

/// Survival kernel `F_j(s, H(s), P0)` of term `j`.
pub fn survival_kernel(
    j: usize,
    h: &GridFunction,
    p0: f64,
    dec: &FertilityDecomposition,
    ing: &ModelIngredients,
) -> Result<GridFunction, SteadyError> {
    if p0 < 0.0 {
        return Err(SteadyError::InvalidOption(format!(
            "P0 must be non-negative, got {p0}"
        )));
    }
    if let Some((node, &value)) = h.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(ModelError::NegativeDensity { node, value }.into());
    }
    let term = dec.terms.get(j).ok_or(SteadyError::RankMismatch {
        terms: dec.rank(),
        births: j + 1,
    })?;
    let data = survival_data(h, p0, ing)?;
    Ok(kernel_from(&data, &term.profile))
}

fn all_kernels(dec: &FertilityDecomposition, data: &SurvivalData) -> Vec<GridFunction> {
    if dec.terms.len() > 4 {
        dec.terms
            .par_iter()
            .map(|t| kernel_from(data, &t.profile))
            .collect()
    } else {
        dec.terms
            .iter()
            .map(|t| kernel_from(data, &t.profile))
            .collect()
    }
}

/// Density `sum_j P^j F_j`.
fn assemble(kernels: &[GridFunction], births: &[f64], grid: Grid) -> GridFunction {
    let mut acc = vec![0.0; grid.len()];
    for (k, &b) in kernels.iter().zip(births) {
        if b != 0.0 {
            for (a, v) in acc.iter_mut().zip(k.values()) {
                *a += b * v;
            }
        }
    }
    GridFunction::new(grid, acc).expect("finite density")
}

/// One application of the fixed-point map.
///
/// In piecewise mode the bin profiles are first refreshed from `x.h`.
pub fn phi_map(
    x: &FixedPointState,
    dec: &FertilityDecomposition,
    ing: &ModelIngredients,
) -> Result<FixedPointState, SteadyError> {
    let dec = dec.refreshed(ing, &x.h)?;
    phi_with(x, &dec, ing).map(|(next, _)| next)
}

fn phi_with(
    x: &FixedPointState,
    dec: &FertilityDecomposition,
    ing: &ModelIngredients,
) -> Result<(FixedPointState, GridFunction), SteadyError> {
    if x.births.len() != dec.rank() {
        return Err(SteadyError::RankMismatch {
            terms: dec.rank(),
            births: x.births.len(),
        });
    }
    let data = survival_data(&x.h, x.p0.max(0.0), ing)?;
    let kernels = all_kernels(dec, &data);
    let q = assemble(&kernels, &x.births, dec.grid);
    let env = environment(&q, ing)?;
    let births = dec
        .terms
        .iter()
        .map(|t| t.weight.integrate_against(&q, &x.h))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        FixedPointState {
            h: env.e,
            p0: env.p,
            births,
        },
        q,
    ))
}

/// Options for [`solve_fixed_point`].
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_fp: f64,
    /// damping `theta` in `x <- (1 - theta) x + theta Phi(x)`
    pub theta: f64,
    pub max_iter: usize,
    /// Anderson history depth; 0 disables acceleration
    pub anderson_depth: usize,
    /// seed value for `P^0` and every `P^j`
    pub seed: f64,
    pub ceiling: f64,
    /// restarts from larger seeds after a collapse
    pub restarts: usize,
    pub tol_residual_rel: f64,
    pub tol_residual_abs: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_fp: 1e-9,
            theta: 0.5,
            max_iter: 20_000,
            anderson_depth: 3,
            seed: 1e-2,
            ceiling: 1e12,
            restarts: 3,
            tol_residual_rel: 1e-4,
            tol_residual_abs: 1e-8,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SteadyError> {
        let bad = |m: &str| Err(SteadyError::InvalidOption(m.to_string()));
        if !(self.tol_fp > 0.0) {
            return bad("tol_fp must be positive");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta must lie in (0, 1]");
        }
        if !(self.seed > 0.0) {
            return bad("seed must be positive");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive");
        }
        Ok(())
    }

    /// Residual threshold for a density of L1 norm `mass`.
    pub fn residual_tolerance(&self, mass: f64) -> f64 {
        self.tol_residual_rel * mass + self.tol_residual_abs
    }
}

/// Equilibrium assembled from a fixed point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyState {
    pub p_star: GridFunction,
    pub e_star: GridFunction,
    pub p_weighted: f64,
    pub births: Vec<f64>,
    pub residual_l1: f64,
    pub iterations: usize,
    pub converged: bool,
    /// the iteration found only the extinction state
    pub trivial: bool,
    #[serde(skip)]
    pub decomposition: FertilityDecomposition,
}

impl SteadyState {
    /// The extinction equilibrium on `grid`.
    pub fn zero(grid: Grid, dec: FertilityDecomposition) -> Self {
        let rank = dec.rank();
        Self {
            p_star: GridFunction::zeros(grid),
            e_star: GridFunction::zeros(grid),
            p_weighted: 0.0,
            births: vec![0.0; rank],
            residual_l1: 0.0,
            iterations: 0,
            converged: true,
            trivial: true,
            decomposition: dec,
        }
    }

    pub fn mass(&self) -> f64 {
        self.p_star.integrate()
    }

    /// Build a steady state from an explicit density, e.g. for analysis of a
    /// state computed elsewhere.
    pub fn from_density(
        p: GridFunction,
        ing: &ModelIngredients,
        dec: FertilityDecomposition,
    ) -> Result<Self, SteadyError> {
        let env = environment(&p, ing)?;
        let residual = residual_psi(&p, ing)?;
        let trivial = p.max_abs() == 0.0;
        let births = dec
            .terms
            .iter()
            .map(|t| t.weight.integrate_against(&p, &env.e))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            p_star: p,
            e_star: env.e,
            p_weighted: env.p,
            births,
            residual_l1: residual,
            iterations: 0,
            converged: true,
            trivial,
            decomposition: dec,
        })
    }
}

struct Anderson {
    depth: usize,
    weights: Vec<f64>,
    xs: Vec<Vec<f64>>,
    rs: Vec<Vec<f64>>,
}

impl Anderson {
    fn new(depth: usize, weights: Vec<f64>) -> Self {
        Self {
            depth,
            weights,
            xs: Vec::new(),
            rs: Vec::new(),
        }
    }

    fn reset(&mut self) {
        self.xs.clear();
        self.rs.clear();
    }

    /// Next iterate from `x` and `r = Phi(x) - x`.
    fn step(&mut self, x: &[f64], r: &[f64], theta: f64) -> Vec<f64> {
        let picard: Vec<f64> = x.iter().zip(r).map(|(a, b)| a + theta * b).collect();
        self.xs.push(x.to_vec());
        self.rs.push(r.to_vec());
        if self.xs.len() > self.depth + 1 {
            self.xs.remove(0);
            self.rs.remove(0);
        }
        let k = self.xs.len() - 1;
        if self.depth == 0 || k == 0 {
            return picard;
        }
        let len = x.len();
        let dr = DMatrix::from_fn(len, k, |i, j| {
            (self.rs[j + 1][i] - self.rs[j][i]) * self.weights[i].sqrt()
        });
        let rv = DVector::from_fn(len, |i, _| r[i] * self.weights[i].sqrt());
        let mut normal = dr.transpose() * &dr;
        let scale = normal.diagonal().max().max(1e-300);
        for j in 0..k {
            normal[(j, j)] += 1e-12 * scale;
        }
        let rhs = dr.transpose() * rv;
        let Some(coef) = normal.lu().solve(&rhs) else {
            self.reset();
            return picard;
        };
        let mut next = picard;
        for j in 0..k {
            let c = coef[j];
            for (i, v) in next.iter_mut().enumerate() {
                let dx = self.xs[j + 1][i] - self.xs[j][i];
                let drr = self.rs[j + 1][i] - self.rs[j][i];
                *v -= c * (dx + theta * drr);
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            self.reset();
            return x.iter().zip(r).map(|(a, b)| a + theta * b).collect();
        }
        next
    }
}

/// Damped (optionally Anderson-accelerated) fixed-point iteration.
///
/// `dec` is the decomposition template: fixed separable terms, or a
/// piecewise decomposition whose profiles follow the environment iterate.
pub fn solve_fixed_point(
    dec: &FertilityDecomposition,
    ing: &ModelIngredients,
    opts: &SolverOptions,
) -> Result<SteadyState, SteadyError> {
    opts.validate()?;
    ing.check_grid(&dec.grid)?;
    let grid = dec.grid;
    let mut seed = opts.seed;
    let mut total_iters = 0;
    for attempt in 0..=opts.restarts {
        match iterate(dec, ing, opts, seed) {
            Ok((x, iters, converged)) => {
                total_iters += iters;
                return finish(x, dec, ing, total_iters, converged);
            }
            Err(SteadyError::CollapsedToZero { iterations }) if attempt < opts.restarts => {
                total_iters += iterations;
                seed *= 10.0;
            }
            Err(SteadyError::CollapsedToZero { iterations }) => {
                // Phi vanishes identically: the extinction state is the answer
                if iterations == 0 {
                    return Ok(SteadyState::zero(
                        grid,
                        dec.refreshed(ing, &GridFunction::zeros(grid))?,
                    ));
                }
                return Err(SteadyError::CollapsedToZero {
                    iterations: total_iters + iterations,
                });
            }
            Err(e) => return Err(e),
        }
    }
    unreachable!("loop returns on the last attempt")
}

fn iterate(
    template: &FertilityDecomposition,
    ing: &ModelIngredients,
    opts: &SolverOptions,
    seed: f64,
) -> Result<(FixedPointState, usize, bool), SteadyError> {
    let grid = template.grid;
    let rank = template.rank();
    let mut x = FixedPointState {
        h: GridFunction::zeros(grid),
        p0: seed,
        births: vec![seed; rank],
    };
    let mut weights = grid.weights();
    weights.extend(std::iter::repeat_n(1.0, rank + 1));
    let mut accel = Anderson::new(opts.anderson_depth, weights);
    let collapse_floor = 1e-12 * seed;
    let mut last_residual = f64::INFINITY;

    for iter in 1..=opts.max_iter {
        let dec = template.refreshed(ing, &x.h)?;
        let (fx, _) = phi_with(&x, &dec, ing)?;
        if iter == 1 && fx.norm() == 0.0 {
            return Err(SteadyError::CollapsedToZero { iterations: 0 });
        }
        let xv = x.to_vec();
        let rv: Vec<f64> = fx.to_vec().iter().zip(&xv).map(|(a, b)| a - b).collect();
        let residual = fx.distance(&x);
        // guard the accelerated sequence against growth of the residual
        if residual > 10.0 * last_residual {
            accel.reset();
        }
        last_residual = residual;
        let mut next = accel.step(&xv, &rv, opts.theta);
        for v in next.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let next = FixedPointState::from_vec(grid, &next);
        let norm = next.norm();
        if !norm.is_finite() || norm > opts.ceiling {
            return Err(SteadyError::Diverged {
                norm,
                ceiling: opts.ceiling,
            });
        }
        if norm < collapse_floor {
            return Err(SteadyError::CollapsedToZero { iterations: iter });
        }
        let step = next.distance(&x);
        x = next;
        // relative below unit norm so a slow approach to zero is not accepted
        if step <= opts.tol_fp * norm.min(1.0) {
            return Ok((x, iter, true));
        }
    }
    Ok((x, opts.max_iter, false))
}

fn finish(
    x: FixedPointState,
    template: &FertilityDecomposition,
    ing: &ModelIngredients,
    iterations: usize,
    converged: bool,
) -> Result<SteadyState, SteadyError> {
    let grid = template.grid;
    let dec = template.refreshed(ing, &x.h)?;
    let data = survival_data(&x.h, x.p0, ing)?;
    let kernels = all_kernels(&dec, &data);
    let p = assemble(&kernels, &x.births, grid);
    let residual = residual_psi(&p, ing)?;
    let converged = converged && x.in_cone();
    Ok(SteadyState {
        p_star: p,
        e_star: x.h,
        p_weighted: x.p0,
        births: x.births,
        residual_l1: residual,
        iterations,
        converged,
        trivial: false,
        decomposition: dec,
    })
}

/// Recruitment `int_0^m beta(s_i, y, E(y)) q(y) dy` at every node.
pub fn recruitment(q: &GridFunction, e: &GridFunction, ing: &ModelIngredients) -> GridFunction {
    let grid = *q.grid();
    if let Some(sep) = ing.separable_fertility() {
        let births: Vec<f64> = grid
            .nodes()
            .zip(q.values().iter().zip(e.values()))
            .map(|(y, (qv, ev))| qv * sep.beta2(y, *ev))
            .collect();
        let total = GridFunction::new(grid, births)
            .expect("finite births")
            .integrate();
        return GridFunction::from_fn(grid, |s| sep.beta1(s) * total).expect("finite recruitment");
    }
    let wq: Vec<f64> = grid
        .weights()
        .iter()
        .zip(q.values())
        .map(|(w, v)| w * v)
        .collect();
    let nodes: Vec<f64> = grid.nodes().collect();
    let vals: Vec<f64> = nodes
        .par_iter()
        .map(|&s| {
            nodes
                .iter()
                .zip(&wq)
                .zip(e.values())
                .map(|((&y, &w), &ev)| {
                    if w == 0.0 {
                        0.0
                    } else {
                        w * ing.beta(s, y, ev)
                    }
                })
                .sum()
        })
        .collect();
    GridFunction::new(grid, vals).expect("finite recruitment")
}

/// L1 norm of the steady-state defect
/// `(gamma(s, Q) q)' + mu(s, E(s, q)) q - int beta(s, y, E(y, q)) q(y) dy`.
pub fn residual_psi(q: &GridFunction, ing: &ModelIngredients) -> Result<f64, SteadyError> {
    let env = environment(q, ing)?;
    let flux = q.map(|s, v| ing.gamma(s, env.p) * v).derivative();
    let rec = recruitment(q, &env.e, ing);
    let defect: Vec<f64> = q
        .grid()
        .nodes()
        .enumerate()
        .map(|(i, s)| flux.get(i) + ing.mu(s, env.e.get(i)) * q.get(i) - rec.get(i))
        .collect();
    Ok(GridFunction::new(*q.grid(), defect)?.l1_norm())
}

/// Outcome of one hypothesis check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// held on every sample; the quantifier itself is not decidable on a grid
    AdvisoryPass,
    AdvisoryFail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionCheck {
    pub status: CheckStatus,
    pub value: f64,
    pub detail: String,
}

/// Hypotheses of the existence theorems, evaluated on samples.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExistenceReport {
    /// supercriticality at zero: `max_j int bbar_j(s, 0) F_j(s, 0, 0) ds > 1`
    pub supercritical: ConditionCheck,
    /// largest `c` with `kappa >= c * sum_k bbar_k(s, H(s))` on the samples
    pub kappa_bound: ConditionCheck,
    /// `int kappa F <= c` for sampled `(H, P)` of norm above the radius
    pub large_state_bound: ConditionCheck,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExistenceOptions {
    pub radius: f64,
    /// optional `b(s) >= beta(s, y, E)` for the majorant kernel `F_b`
    pub fertility_bound: Option<RateExpr>,
    pub environment_levels: usize,
}

impl Default for ExistenceOptions {
    fn default() -> Self {
        Self {
            radius: 10.0,
            fertility_bound: None,
            environment_levels: 11,
        }
    }
}

/// Advisory check of the existence hypotheses for `dec`.
pub fn check_existence(
    dec: &FertilityDecomposition,
    ing: &ModelIngredients,
    opts: &ExistenceOptions,
) -> Result<ExistenceReport, SteadyError> {
    let grid = dec.grid;
    let zero = GridFunction::zeros(grid);

    // supercriticality at the zero state
    let dec0 = dec.refreshed(ing, &zero)?;
    let data0 = survival_data(&zero, 0.0, ing)?;
    let mut best = 0.0f64;
    for t in &dec0.terms {
        let f = kernel_from(&data0, &t.profile);
        best = best.max(t.weight.integrate_against(&f, &zero)?);
    }
    let supercritical = ConditionCheck {
        status: if best > 1.0 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        value: best,
        detail: format!(
            "largest reproduction integral at zero {best:.6}, margin {:.6}",
            best - 1.0
        ),
    };

    // kappa >= c * sum_k bbar_k over constant environments up to the radius
    let levels = opts.environment_levels.max(2);
    let env_samples: Vec<GridFunction> = (0..levels)
        .map(|i| GridFunction::constant(grid, opts.radius * i as f64 / (levels - 1) as f64))
        .collect();
    let mut c = f64::INFINITY;
    for h in &env_samples {
        for (i, s) in grid.nodes().enumerate() {
            let total: f64 = dec.terms.iter().map(|t| t.weight.eval(s, h.get(i))).sum();
            if total > 0.0 {
                c = c.min(ing.kappa(s) / total);
            }
        }
    }
    let kappa_bound = ConditionCheck {
        status: if c > 0.0 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        value: c,
        detail: format!("kappa >= {c:.6} * sum of birth weights on sampled environments"),
    };

    // large-norm bound, sampled along a few rays
    let bound_profile = opts
        .fertility_bound
        .as_ref()
        .map(|b| GridFunction::from_fn(grid, |s| b.eval(&Args::s(s))))
        .transpose()?;
    let mut worst = 0.0f64;
    let m = ing.m;
    for scale in [1.01, 2.0, 5.0, 10.0, 100.0] {
        let r = opts.radius * scale;
        for share in [0.0, 0.5, 1.0] {
            let h = GridFunction::constant(grid, share * r / m);
            let p = (1.0 - share) * r;
            let data = survival_data(&h, p, ing)?;
            let f = match &bound_profile {
                Some(b) => kernel_from(&data, b),
                None => {
                    let dech = dec.refreshed(ing, &h)?;
                    let ks = all_kernels(&dech, &data);
                    let vals = (0..grid.len())
                        .map(|i| ks.iter().map(|k| k.get(i)).fold(0.0, f64::max))
                        .collect();
                    GridFunction::new(grid, vals)?
                }
            };
            worst = worst.max(f.map(|s, v| ing.kappa(s) * v).integrate());
        }
    }
    let large_state_bound = ConditionCheck {
        status: if worst <= c {
            CheckStatus::AdvisoryPass
        } else {
            CheckStatus::AdvisoryFail
        },
        value: worst,
        detail: format!(
            "max sampled int kappa F = {worst:.6} against c = {c:.6} beyond radius {}",
            opts.radius
        ),
    };

    Ok(ExistenceReport {
        supercritical,
        kappa_bound,
        large_state_bound,
    })
}
