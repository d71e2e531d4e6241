//! Explicit upwind finite-volume integration of the size-structured PIDE.
//!
//! Node `i` owns the control volume of trapezoid weight `w_i` (`h/2` at the
//! ends). The interface flux at `s_{i+1/2}` is `gamma(s_{i+1/2}, P) p_i`, the
//! inflow at `s = 0` is zero and individuals leave at `s = m` with flux
//! `gamma(m, P) p_n`. Sources are integrated with the same weights, so
//! `sum_i w_i p_i` obeys an exact discrete mass ledger.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;
use crate::gridfn::{Grid, GridFunction};
use crate::model::{signed_environment, ModelIngredients, SeparableFertility};

/// Clock in which the equation is integrated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// `p_t + (gamma(s, P) p)_s = sources`
    #[default]
    Quasilinear,
    /// advection by `gamma1` only, sources divided by `gamma2(P)`
    Semilinear,
}

/// Per-step record of the mass ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    /// time at the start of the step
    pub t: f64,
    pub dt: f64,
    /// `sum_i w_i p_i` at the start of the step
    pub mass: f64,
    pub p_weighted: f64,
    pub outflow: f64,
    pub births: f64,
    pub deaths: f64,
    /// `|M_new - M - dt (births - deaths - outflow)| / max(M, M_new)`
    pub ledger_error: f64,
}

struct Rates {
    /// advection speed at interfaces `1/2 .. n-1/2` and at `m`
    speed: Vec<f64>,
    mu: Vec<f64>,
    recruitment: Vec<f64>,
    source_scale: f64,
    p_weighted: f64,
}

fn check_density(p: &GridFunction, ing: &ModelIngredients) -> Result<(), DynamicsError> {
    ing.check_grid(p.grid())?;
    Ok(())
}

fn recruitment(
    p: &GridFunction,
    e: &GridFunction,
    ing: &ModelIngredients,
    sep: Option<&SeparableFertility>,
) -> Vec<f64> {
    let grid = *p.grid();
    let w = grid.weights();
    let nodes: Vec<f64> = grid.nodes().collect();
    if let Some(sep) = sep {
        let total: f64 = nodes
            .iter()
            .zip(&w)
            .zip(p.values().iter().zip(e.values()))
            .map(|((&y, &wk), (&pk, &ek))| wk * sep.beta2(y, ek) * pk)
            .sum();
        return nodes.iter().map(|&s| sep.beta1(s) * total).collect();
    }
    let wp: Vec<f64> = w.iter().zip(p.values()).map(|(a, b)| a * b).collect();
    nodes
        .par_iter()
        .map(|&s| {
            nodes
                .iter()
                .zip(&wp)
                .zip(e.values())
                .filter(|((_, wpk), _)| **wpk != 0.0)
                .map(|((&y, &wpk), &ek)| wpk * ing.beta(s, y, ek))
                .sum()
        })
        .collect()
}

fn rates(p: &GridFunction, ing: &ModelIngredients, mode: Mode) -> Result<Rates, DynamicsError> {
    check_density(p, ing)?;
    let grid = *p.grid();
    let env = signed_environment(p, ing);
    let big_p = env.p;
    let g2 = ing.gamma2(big_p);
    let modulation = match mode {
        Mode::Quasilinear => g2,
        Mode::Semilinear => 1.0,
    };
    let source_scale = match mode {
        Mode::Quasilinear => 1.0,
        Mode::Semilinear => {
            if !(g2 > 0.0) {
                return Err(DynamicsError::InvalidRequest(format!(
                    "gamma2(P) must be positive in semilinear mode, got {g2} at P = {big_p}"
                )));
            }
            1.0 / g2
        }
    };
    let h = grid.h();
    let n = grid.n();
    let mut speed = Vec::with_capacity(n + 1);
    for i in 0..n {
        speed.push(ing.gamma1((i as f64 + 0.5) * h) * modulation);
    }
    speed.push(ing.gamma1(grid.m()) * modulation);
    if let Some(v) = speed.iter().find(|v| !(**v >= 0.0)) {
        return Err(DynamicsError::InvalidRequest(format!(
            "advection speed must be non-negative, got {v}"
        )));
    }
    let mu = grid
        .nodes()
        .zip(env.e.values())
        .map(|(s, &e)| ing.mu(s, e))
        .collect();
    let sep = ing.separable_fertility();
    let recruitment = recruitment(p, &env.e, ing, sep.as_ref());
    Ok(Rates {
        speed,
        mu,
        recruitment,
        source_scale,
        p_weighted: big_p,
    })
}

fn source_bound(p: &GridFunction, ing: &ModelIngredients) -> f64 {
    let grid = *p.grid();
    let env = signed_environment(p, ing);
    let nodes: Vec<f64> = grid.nodes().collect();
    let mu_max = nodes
        .iter()
        .zip(env.e.values())
        .map(|(&s, &e)| ing.mu(s, e).abs())
        .fold(0.0, f64::max);
    let beta_max = match ing.separable_fertility() {
        Some(sep) => {
            let b1 = nodes
                .iter()
                .map(|&s| sep.beta1(s).abs())
                .fold(0.0, f64::max);
            let b2 = nodes
                .iter()
                .zip(env.e.values())
                .map(|(&y, &e)| sep.beta2(y, e).abs())
                .fold(0.0, f64::max);
            b1 * b2
        }
        None => nodes
            .par_iter()
            .map(|&s| {
                nodes
                    .iter()
                    .zip(env.e.values())
                    .map(|(&y, &e)| ing.beta(s, y, e).abs())
                    .fold(0.0, f64::max)
            })
            .reduce(|| 0.0, f64::max),
    };
    mu_max + grid.m() * beta_max
}

fn dt_bound(
    p: &GridFunction,
    ing: &ModelIngredients,
    cfl: f64,
    mode: Mode,
) -> Result<f64, DynamicsError> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(DynamicsError::InvalidCfl(cfl));
    }
    check_density(p, ing)?;
    let grid = *p.grid();
    let big_p = signed_environment(p, ing).p;
    let g2 = ing.gamma2(big_p);
    let (modulation, source_scale) = match mode {
        Mode::Quasilinear => (g2, 1.0),
        Mode::Semilinear => (1.0, 1.0 / g2),
    };
    let gamma_max = grid
        .nodes()
        .map(|s| ing.gamma1(s) * modulation)
        .fold(0.0, f64::max);
    let advective = if gamma_max > 0.0 {
        cfl * grid.h() / gamma_max
    } else {
        f64::INFINITY
    };
    let sources = source_bound(p, ing) * source_scale.abs();
    let reactive = if sources > 0.0 {
        cfl / sources
    } else {
        f64::INFINITY
    };
    Ok(advective.min(reactive))
}

/// Largest stable explicit step for the quasilinear equation at state `p`.
///
/// `min(cfl h / max gamma, cfl / (max mu + m max beta))`. Positivity of the
/// update is guaranteed for `cfl <= 1/3`.
pub fn cfl_dt(p: &GridFunction, ing: &ModelIngredients, cfl: f64) -> Result<f64, DynamicsError> {
    dt_bound(p, ing, cfl, Mode::Quasilinear)
}

/// [`cfl_dt`] for the given clock.
pub fn cfl_dt_mode(
    p: &GridFunction,
    ing: &ModelIngredients,
    cfl: f64,
    mode: Mode,
) -> Result<f64, DynamicsError> {
    dt_bound(p, ing, cfl, mode)
}

/// One explicit Euler step.
pub fn step(
    p: &GridFunction,
    dt: f64,
    ing: &ModelIngredients,
    mode: Mode,
) -> Result<GridFunction, DynamicsError> {
    step_with_diagnostics(p, dt, ing, mode, 0.0).map(|(next, _)| next)
}

/// One explicit Euler step together with its mass ledger.
pub fn step_with_diagnostics(
    p: &GridFunction,
    dt: f64,
    ing: &ModelIngredients,
    mode: Mode,
    t: f64,
) -> Result<(GridFunction, StepDiagnostics), DynamicsError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(DynamicsError::InvalidRequest(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let bound = dt_bound(p, ing, 1.0, mode)?;
    if dt > bound * (1.0 + 1e-12) {
        return Err(DynamicsError::CflViolation { dt, bound });
    }
    let r = rates(p, ing, mode)?;
    let grid = *p.grid();
    let w = grid.weights();
    let n = grid.n();
    let vals = p.values();

    let mut next = Vec::with_capacity(n + 1);
    let (mut births, mut deaths) = (0.0, 0.0);
    for i in 0..=n {
        let inflow = if i == 0 {
            0.0
        } else {
            r.speed[i - 1] * vals[i - 1]
        };
        let outflow = r.speed[i] * vals[i];
        let death = r.mu[i] * vals[i] * r.source_scale;
        let birth = r.recruitment[i] * r.source_scale;
        births += w[i] * birth;
        deaths += w[i] * death;
        next.push(vals[i] + dt * ((inflow - outflow) / w[i] + birth - death));
    }
    let outflow = r.speed[n] * vals[n];
    let mass = weighted_sum(&w, vals);
    let new_mass = weighted_sum(&w, &next);
    let ledger = new_mass - mass - dt * (births - deaths - outflow);
    let scale = mass.abs().max(new_mass.abs());
    let ledger_error = if scale > 0.0 {
        ledger.abs() / scale
    } else {
        ledger.abs()
    };
    let next = GridFunction::new(grid, next)?;
    Ok((
        next,
        StepDiagnostics {
            t,
            dt,
            mass,
            p_weighted: r.p_weighted,
            outflow,
            births,
            deaths,
            ledger_error,
        },
    ))
}

fn weighted_sum(w: &[f64], v: &[f64]) -> f64 {
    w.iter().zip(v).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimOptions {
    pub cfl: f64,
    pub mode: Mode,
    /// snapshot times; `T` is always stored
    pub output_times: Vec<f64>,
    pub mass_ceiling: f64,
    /// keep the state after every step (memory heavy)
    pub store_all_steps: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            cfl: 0.3,
            mode: Mode::Quasilinear,
            output_times: Vec::new(),
            mass_ceiling: 1e12,
            store_all_steps: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub mode: Mode,
    pub times: Vec<f64>,
    pub snapshots: Vec<GridFunction>,
    /// one entry per step, in order
    pub diagnostics: Vec<StepDiagnostics>,
    /// time and weighted population at the end of the run
    pub final_t: f64,
    pub final_p_weighted: f64,
}

impl Trajectory {
    pub fn last(&self) -> &GridFunction {
        self.snapshots
            .last()
            .expect("trajectory stores the final time")
    }

    pub fn max_ledger_error(&self) -> f64 {
        self.diagnostics
            .iter()
            .map(|d| d.ledger_error)
            .fold(0.0, f64::max)
    }

    /// `(t, P(t))` at every step boundary, ending at the final time.
    pub fn weighted_population_series(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = self
            .diagnostics
            .iter()
            .map(|d| (d.t, d.p_weighted))
            .collect();
        out.push((self.final_t, self.final_p_weighted));
        out
    }

    /// Rows `t,s,p` for every snapshot.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("t,s,p\n");
        for (t, snap) in self.times.iter().zip(&self.snapshots) {
            for (s, v) in snap.grid().nodes().zip(snap.values()) {
                out.push_str(&format!("{},{},{}\n", fmt17(*t), fmt17(s), fmt17(*v)));
            }
        }
        out
    }

    /// One row per snapshot: `t,p_0,...,p_n`.
    pub fn to_wide_csv(&self) -> String {
        let mut out = String::from("t");
        if let Some(first) = self.snapshots.first() {
            for i in 0..first.grid().len() {
                out.push_str(&format!(",p{i}"));
            }
        }
        out.push('\n');
        for (t, snap) in self.times.iter().zip(&self.snapshots) {
            out.push_str(&fmt17(*t));
            for v in snap.values() {
                out.push(',');
                out.push_str(&fmt17(*v));
            }
            out.push('\n');
        }
        out
    }

    /// Rows `t,dt,mass,P,outflow,births,deaths,ledger_error`.
    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("t,dt,mass,P,outflow,births,deaths,ledger_error\n");
        for d in &self.diagnostics {
            let row = [
                d.t,
                d.dt,
                d.mass,
                d.p_weighted,
                d.outflow,
                d.births,
                d.deaths,
                d.ledger_error,
            ]
            .map(fmt17)
            .join(",");
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// 17 significant digits in scientific notation.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

/// Integrate from `p0` up to time `t_end`.
pub fn simulate(
    p0: &GridFunction,
    t_end: f64,
    ing: &ModelIngredients,
    opts: &SimOptions,
) -> Result<Trajectory, DynamicsError> {
    if !(t_end > 0.0) || !t_end.is_finite() {
        return Err(DynamicsError::InvalidRequest(format!(
            "final time must be positive, got {t_end}"
        )));
    }
    if let Some((node, &value)) = p0.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(DynamicsError::InvalidRequest(format!(
            "initial density is negative ({value}) at node {node}"
        )));
    }
    if !(opts.cfl > 0.0 && opts.cfl <= 1.0) {
        return Err(DynamicsError::InvalidCfl(opts.cfl));
    }
    let mut outputs: Vec<f64> = opts
        .output_times
        .iter()
        .copied()
        .filter(|t| *t >= 0.0 && *t < t_end)
        .collect();
    outputs.sort_by(f64::total_cmp);
    outputs.dedup();
    outputs.push(t_end);

    let mut times = Vec::with_capacity(outputs.len());
    let mut snapshots = Vec::with_capacity(outputs.len());
    let mut diagnostics = Vec::new();
    let mut next_out = 0;
    let mut t = 0.0;
    let mut p = p0.clone();
    while next_out < outputs.len() && outputs[next_out] <= 0.0 {
        times.push(outputs[next_out]);
        snapshots.push(p.clone());
        next_out += 1;
    }
    while t < t_end {
        let mut dt = dt_bound(&p, ing, opts.cfl, opts.mode)?;
        if !dt.is_finite() {
            dt = t_end - t;
        }
        if t + dt >= t_end || t_end - (t + dt) < 1e-12 * t_end {
            dt = t_end - t;
        }
        let (next, diag) = step_with_diagnostics(&p, dt, ing, opts.mode, t)?;
        diagnostics.push(diag);
        let t_next = if dt == t_end - t { t_end } else { t + dt };
        while next_out < outputs.len() && outputs[next_out] <= t_next {
            let to = outputs[next_out];
            let theta = ((to - t) / dt).clamp(0.0, 1.0);
            times.push(to);
            snapshots.push(if theta == 1.0 {
                next.clone()
            } else {
                p.zip_with(&next, |a, b| a + theta * (b - a))
            });
            next_out += 1;
        }
        if opts.store_all_steps && (times.last() != Some(&t_next)) {
            times.push(t_next);
            snapshots.push(next.clone());
        }
        let mass = weighted_sum(&next.grid().weights(), next.values());
        if !mass.is_finite() || mass > opts.mass_ceiling {
            return Err(DynamicsError::BlowUp {
                t: t_next,
                mass,
                ceiling: opts.mass_ceiling,
            });
        }
        p = next;
        t = t_next;
    }
    let final_p_weighted = signed_environment(&p, ing).p;
    if opts.store_all_steps {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|a, b| times[*a].total_cmp(&times[*b]));
        times = order.iter().map(|&i| times[i]).collect();
        snapshots = order.iter().map(|&i| snapshots[i].clone()).collect();
    }
    Ok(Trajectory {
        mode: opts.mode,
        times,
        snapshots,
        diagnostics,
        final_t: t,
        final_p_weighted,
    })
}

/// Clock change `tau(t) = int_0^t gamma2(P(t')) dt'` along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeRescaling {
    pub times: Vec<f64>,
    pub tau_of_t: Vec<f64>,
    pub g_values: Vec<f64>,
}

impl TimeRescaling {
    /// `tau(t)`, linear between recorded times.
    pub fn tau_at(&self, t: f64) -> f64 {
        interp_monotone(&self.times, &self.tau_of_t, t)
    }

    /// Inverse clock `t(tau)`.
    pub fn t_at(&self, tau: f64) -> f64 {
        interp_monotone(&self.tau_of_t, &self.times, tau)
    }
}

fn interp_monotone(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if xs.len() == 1 || x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let k = xs.partition_point(|v| *v <= x).clamp(1, last);
    let (x0, x1) = (xs[k - 1], xs[k]);
    let theta = (x - x0) / (x1 - x0);
    ys[k - 1] + theta * (ys[k] - ys[k - 1])
}

/// Rescaled clock of a quasilinear trajectory, by the trapezoid rule over
/// the step times.
pub fn time_rescale(traj: &Trajectory, ing: &ModelIngredients) -> TimeRescaling {
    let series = traj.weighted_population_series();
    let times: Vec<f64> = series.iter().map(|(t, _)| *t).collect();
    let g_values: Vec<f64> = series.iter().map(|(_, p)| ing.gamma2(*p)).collect();
    let mut tau_of_t = Vec::with_capacity(times.len());
    let mut acc = 0.0;
    tau_of_t.push(0.0);
    for k in 1..times.len() {
        acc += 0.5 * (times[k] - times[k - 1]) * (g_values[k] + g_values[k - 1]);
        tau_of_t.push(acc);
    }
    TimeRescaling {
        times,
        tau_of_t,
        g_values,
    }
}

/// `t_char = m / max_s gamma(s, P)`, the time to cross the size range.
pub fn crossing_time(ing: &ModelIngredients, grid: &Grid, p_weighted: f64) -> f64 {
    let g = grid
        .nodes()
        .map(|s| ing.gamma(s, p_weighted))
        .fold(0.0, f64::max);
    grid.m() / g
}
