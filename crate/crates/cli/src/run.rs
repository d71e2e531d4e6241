//! Command dispatch and output files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use hierpop_core::dynamics::{
    crossing_time, fmt17, simulate, time_rescale, Mode, SimOptions, Trajectory,
};
use hierpop_core::model::{check_assumptions, AssumptionReport};
use hierpop_core::stability::{
    classify, classify_trivial, net_reproduction, NetReproduction, StabilityReport, Verdict,
};
use hierpop_core::steady::{
    check_existence, decompose_beta_with, solve_fixed_point, ExistenceOptions, ExistenceReport,
    FertilityDecomposition, SteadyState,
};
use hierpop_core::SteadyError;
use hierpop_core::{environment, GridFunction};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::CliError;
use crate::scenario::{sampling, InitialCondition, Scenario};

/// Version of the report and CSV layouts.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// assumption sampling and existence hypotheses
    Check,
    /// positive steady state
    Steady,
    /// time integration
    Simulate,
    /// stability of the computed steady state
    Stability,
    /// stability of the extinction state
    Trivial,
    /// check, steady state, stability and a persistence run
    All,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub assumptions: AssumptionReport,
    pub existence: Option<ExistenceReport>,
    pub existence_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SteadySummary {
    pub converged: bool,
    /// every seed led to the extinction state
    pub collapsed: bool,
    pub trivial: bool,
    pub iterations: usize,
    pub rank: usize,
    pub p_weighted: f64,
    pub mass: f64,
    pub births: Vec<f64>,
    pub residual_l1: f64,
    pub residual_tolerance: f64,
    pub net_reproduction: Option<NetReproduction>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulationSummary {
    pub mode: Mode,
    pub initial: &'static str,
    pub t_end: f64,
    pub steps: usize,
    pub final_mass: f64,
    pub final_p_weighted: f64,
    pub max_ledger_error: f64,
    /// `||p(T) - p_*|| / ||p_*||` for runs started at the steady state
    pub relative_drift: Option<f64>,
    /// rescaled clock at `T` for quasilinear runs
    pub tau_end: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: Command,
    pub scenario: Scenario,
    pub warnings: Vec<String>,
    pub started_unix_seconds: f64,
    pub wall_times: BTreeMap<String, f64>,
    pub check: Option<CheckResult>,
    pub steady: Option<SteadySummary>,
    pub simulation: Option<SimulationSummary>,
    pub stability: Option<StabilityReport>,
    pub trivial: Option<StabilityReport>,
    pub files: Vec<String>,
    pub summary: Vec<String>,
}

/// Report plus the error that ended the run early, if any.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub failure: Option<CliError>,
}

pub struct Runner {
    scenario: Scenario,
    out_dir: PathBuf,
    report: RunReport,
}

impl Runner {
    pub fn new(
        command: Command,
        scenario: Scenario,
        warnings: Vec<String>,
        out_dir: PathBuf,
    ) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let report = RunReport {
            schema_version: SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            scenario: scenario.clone(),
            warnings,
            started_unix_seconds: started,
            wall_times: BTreeMap::new(),
            check: None,
            steady: None,
            simulation: None,
            stability: None,
            trivial: None,
            files: Vec::new(),
            summary: Vec::new(),
        };
        Self {
            scenario,
            out_dir,
            report,
        }
    }

    /// Run the command; the report is written even when a stage fails.
    pub fn run(mut self) -> Result<RunOutcome, CliError> {
        let failure = self.dispatch().err();
        if matches!(failure, Some(CliError::Io { .. })) {
            return Err(failure.expect("matched above"));
        }
        self.write(
            "report.json",
            &serde_json::to_string_pretty(&self.report).expect("serializable report"),
        )?;
        Ok(RunOutcome {
            report: self.report,
            failure,
        })
    }

    fn dispatch(&mut self) -> Result<(), CliError> {
        match self.report.command {
            Command::Check => self.check(),
            Command::Steady => self.steady().map(|_| ()),
            Command::Simulate => self.simulate(),
            Command::Stability => {
                let ss = self.steady()?;
                self.stability(&ss)
            }
            Command::Trivial => self.trivial(),
            Command::All => {
                self.check()?;
                let ss = self.steady()?;
                self.stability(&ss)?;
                if ss.trivial {
                    self.note("persistence: skipped for the extinction state".into());
                    Ok(())
                } else {
                    self.persistence(&ss)
                }
            }
        }
    }

    fn timed<T>(&mut self, stage: &str, f: impl FnOnce(&mut Self) -> T) -> T {
        let t0 = Instant::now();
        let out = f(self);
        self.report
            .wall_times
            .insert(stage.to_string(), t0.elapsed().as_secs_f64());
        out
    }

    fn note(&mut self, line: String) {
        self.report.summary.push(line);
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), CliError> {
        let io = |path: &Path, source| CliError::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(&self.out_dir).map_err(|e| io(&self.out_dir, e))?;
        let path = self.out_dir.join(name);
        fs::write(&path, contents).map_err(|e| io(&path, e))?;
        self.report.files.push(name.to_string());
        Ok(())
    }

    fn decomposition(&self) -> Result<FertilityDecomposition, CliError> {
        let sc = &self.scenario;
        let grid = sc.grid()?;
        let ing = &sc.ingredients;
        match (
            sc.decomposition.rank,
            FertilityDecomposition::from_model(grid, ing),
        ) {
            (None, Some(dec)) => Ok(dec),
            (rank, _) => decompose_beta_with(
                ing,
                &GridFunction::zeros(grid),
                rank.unwrap_or(crate::scenario::DEFAULT_RANK),
                sc.decomposition.anchor,
                sc.decomposition.minorant.clone(),
            )
            .map_err(CliError::steady),
        }
    }

    fn check(&mut self) -> Result<(), CliError> {
        self.timed("check", |r| {
            let sc = &r.scenario;
            let assumptions = check_assumptions(&sc.ingredients, &sampling(sc));
            let opts = ExistenceOptions {
                radius: sc.assumptions.existence_radius,
                fertility_bound: sc.assumptions.fertility_bound.clone(),
                ..ExistenceOptions::default()
            };
            let (existence, existence_error) = match r.decomposition().and_then(|dec| {
                check_existence(&dec, &sc.ingredients, &opts).map_err(CliError::steady)
            }) {
                Ok(rep) => (Some(rep), None),
                Err(e) => (None, Some(e.to_string())),
            };
            r.note(format!(
                "check: {} assumption violation(s)",
                assumptions.violations.len()
            ));
            if let Some(ex) = &existence {
                r.note(format!(
                    "check: supercritical at zero {:?} (value {:.6})",
                    ex.supercritical.status, ex.supercritical.value
                ));
            }
            r.report.check = Some(CheckResult {
                assumptions,
                existence,
                existence_error,
            });
            Ok(())
        })
    }

    fn steady(&mut self) -> Result<SteadyState, CliError> {
        self.timed("steady", |r| {
            let dec = r.decomposition()?;
            let ing = &r.scenario.ingredients;
            let mut collapsed = false;
            let ss = match solve_fixed_point(&dec, ing, &r.scenario.solver) {
                Ok(ss) => ss,
                Err(SteadyError::CollapsedToZero { iterations }) => {
                    collapsed = true;
                    SteadyState {
                        iterations,
                        ..SteadyState::zero(*dec.grid(), dec.clone())
                    }
                }
                Err(e) => return Err(CliError::steady(e)),
            };
            let net = match ing.separable_fertility() {
                Some(fert) if !ss.trivial => Some(
                    net_reproduction(&ss.p_star, &fert, ing).map_err(|e| CliError::stability("steady", e))?,
                ),
                _ => None,
            };
            let mut csv = String::from("s,p_star,e_star\n");
            for (i, s) in ss.p_star.grid().nodes().enumerate() {
                csv.push_str(&format!("{},{},{}\n", fmt17(s), fmt17(ss.p_star.get(i)), fmt17(ss.e_star.get(i))));
            }
            r.write("steady_state.csv", &csv)?;
            let tol = r.scenario.solver.residual_tolerance(ss.p_star.l1_norm());
            r.note(format!(
                "steady: P* = {:.10}, mass = {:.10}, residual = {:.3e} (tolerance {:.3e}), {} iterations{}",
                ss.p_weighted,
                ss.mass(),
                ss.residual_l1,
                tol,
                ss.iterations,
                if ss.trivial { ", extinction state" } else { "" }
            ));
            if collapsed {
                r.note("steady: iteration collapsed to zero from every seed; no positive steady state found".into());
            }
            if let Some(nr) = &net {
                r.note(format!("R(p*) = {:.10} (|R - 1| = {:.3e})", nr.value(), (nr.value() - 1.0).abs()));
            }
            if ss.residual_l1 > tol {
                r.report
                    .warnings
                    .push(format!("steady-state residual {:.3e} exceeds tolerance {tol:.3e}", ss.residual_l1));
            }
            r.report.steady = Some(SteadySummary {
                converged: ss.converged,
                collapsed,
                trivial: ss.trivial,
                iterations: ss.iterations,
                rank: ss.decomposition.rank(),
                p_weighted: ss.p_weighted,
                mass: ss.mass(),
                births: ss.births.clone(),
                residual_l1: ss.residual_l1,
                residual_tolerance: tol,
                net_reproduction: net,
            });
            if !ss.converged {
                return Err(CliError::NoConvergence {
                    command: "steady",
                    message: format!("fixed-point iteration stopped after {} iterations", ss.iterations),
                });
            }
            Ok(ss)
        })
    }

    fn sim_options(&self, t_end: f64) -> SimOptions {
        let d = &self.scenario.dynamics;
        let output_times = if d.output_times.is_empty() {
            let k = d.snapshots.max(1);
            (0..k).map(|i| t_end * i as f64 / k as f64).collect()
        } else {
            d.output_times.clone()
        };
        SimOptions {
            cfl: d.cfl,
            mode: d.mode,
            output_times,
            mass_ceiling: d.mass_ceiling,
            store_all_steps: false,
        }
    }

    fn t_end(&self, p0: &GridFunction) -> Result<f64, CliError> {
        let d = &self.scenario.dynamics;
        if let Some(t) = d.t_end {
            return Ok(t);
        }
        let ing = &self.scenario.ingredients;
        let env = environment(p0, ing).map_err(|e| CliError::Numerical {
            command: "simulate",
            message: e.to_string(),
        })?;
        Ok(d.crossings * crossing_time(ing, p0.grid(), env.p))
    }

    fn run_dynamics(
        &mut self,
        p0: &GridFunction,
        initial: &'static str,
        reference: Option<&GridFunction>,
    ) -> Result<(), CliError> {
        let t_end = self.t_end(p0)?;
        let opts = self.sim_options(t_end);
        let traj = self.timed("simulate", |r| {
            simulate(p0, t_end, &r.scenario.ingredients, &opts).map_err(CliError::dynamics)
        })?;
        self.write("trajectory.csv", &traj.to_long_csv())?;
        self.write("diagnostics.csv", &traj.diagnostics_csv())?;
        let tau_end = if traj.mode == Mode::Quasilinear {
            let resc = time_rescale(&traj, &self.scenario.ingredients);
            let mut csv = String::from("t,tau,gamma2\n");
            for ((t, tau), g) in resc.times.iter().zip(&resc.tau_of_t).zip(&resc.g_values) {
                csv.push_str(&format!("{},{},{}\n", fmt17(*t), fmt17(*tau), fmt17(*g)));
            }
            self.write("time_rescaling.csv", &csv)?;
            Some(resc.tau_at(t_end))
        } else {
            None
        };
        let summary = summarize(&traj, initial, reference, tau_end);
        self.note(format!(
            "simulate: T = {:.6}, {} steps, final mass {:.10}, max ledger error {:.3e}",
            summary.t_end, summary.steps, summary.final_mass, summary.max_ledger_error
        ));
        if let Some(d) = summary.relative_drift {
            self.note(format!("persistence drift: {d:.6e}"));
        }
        self.report.simulation = Some(summary);
        Ok(())
    }

    fn simulate(&mut self) -> Result<(), CliError> {
        match self.scenario.dynamics.initial.clone() {
            InitialCondition::Density { .. } => {
                let grid = self.scenario.grid()?;
                let p0 = self.scenario.dynamics.initial.sample(grid).ok_or_else(|| {
                    CliError::Invalid("dynamics.initial.density is not finite on the grid".into())
                })?;
                self.run_dynamics(&p0, "density", None)
            }
            InitialCondition::Steady { perturbation } => {
                let ss = self.steady()?;
                let p0 = ss.p_star.scale(1.0 + perturbation);
                self.run_dynamics(&p0, "steady", Some(&ss.p_star))
            }
        }
    }

    fn persistence(&mut self, ss: &SteadyState) -> Result<(), CliError> {
        self.run_dynamics(&ss.p_star, "steady", Some(&ss.p_star))
    }

    fn stability(&mut self, ss: &SteadyState) -> Result<(), CliError> {
        let opts = self.scenario.stability.classify_options();
        let rep = self.timed("stability", |r| {
            classify(ss, &r.scenario.ingredients, &opts)
                .map_err(|e| CliError::stability("stability", e))
        })?;
        self.write("stability_roots.csv", &roots_csv(&rep))?;
        self.note(verdict_line("stability", &rep));
        self.report.stability = Some(rep);
        Ok(())
    }

    fn trivial(&mut self) -> Result<(), CliError> {
        let grid = self.scenario.grid()?;
        let opts = self.scenario.stability.classify_options();
        let rep = self.timed("trivial", |r| {
            classify_trivial(grid, &r.scenario.ingredients, &opts)
                .map_err(|e| CliError::stability("trivial", e))
        })?;
        self.write("trivial_roots.csv", &roots_csv(&rep))?;
        self.note(verdict_line("trivial", &rep));
        if let Some(r0) = rep.net_reproduction {
            self.note(format!("R(0) = {r0:.10}"));
        }
        self.report.trivial = Some(rep);
        Ok(())
    }
}

fn summarize(
    traj: &Trajectory,
    initial: &'static str,
    reference: Option<&GridFunction>,
    tau_end: Option<f64>,
) -> SimulationSummary {
    let last = traj.last();
    SimulationSummary {
        mode: traj.mode,
        initial,
        t_end: traj.final_t,
        steps: traj.diagnostics.len(),
        final_mass: last.integrate(),
        final_p_weighted: traj.final_p_weighted,
        max_ledger_error: traj.max_ledger_error(),
        relative_drift: reference.map(|p| last.l1_distance(p) / p.l1_norm().max(f64::MIN_POSITIVE)),
        tau_end,
    }
}

fn verdict_line(stage: &str, rep: &StabilityReport) -> String {
    let word = match rep.verdict {
        Verdict::Stable => "stable",
        Verdict::Unstable => "unstable",
        Verdict::Inconclusive => "inconclusive",
    };
    let root = rep
        .rightmost
        .map(|z| format!(", rightmost {:.6e}{:+.6e}i", z.re, z.im))
        .unwrap_or_default();
    format!("{stage}: verdict {word}{root}")
}

/// Rows `re,im,source` with `source` one of `characteristic`, `real-root`, `oracle`.
pub fn roots_csv(rep: &StabilityReport) -> String {
    let mut out = String::from("re,im,source\n");
    let mut row =
        |z: Complex64, src: &str| out.push_str(&format!("{},{},{src}\n", fmt17(z.re), fmt17(z.im)));
    if let Some(r) = rep.real_root {
        row(Complex64::new(r, 0.0), "real-root");
    }
    for z in &rep.char_roots {
        row(*z, "characteristic");
    }
    for z in &rep.matrix_eigs {
        row(*z, "oracle");
    }
    out
}
