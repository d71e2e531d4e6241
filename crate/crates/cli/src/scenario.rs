//! Scenario files: one JSON document per run.

use std::fs;
use std::path::{Path, PathBuf};

use hierpop_core::dynamics::Mode;
use hierpop_core::model::{
    check_assumptions, AssumptionSampling, ModelIngredients, RateExpr, SeparableFertility,
};
use hierpop_core::stability::{ScanResolution, ScanWindow};
use hierpop_core::steady::{BinAnchor, SolverOptions};
use hierpop_core::{Grid, GridFunction};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub ingredients: ModelIngredients,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub decomposition: DecompositionSection,
    #[serde(default)]
    pub dynamics: DynamicsSection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub assumptions: AssumptionSection,
    /// used when no `--out` is given
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub n: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecompositionSection {
    /// number of parent-size bins; separable fertility is used exactly when
    /// this is absent
    pub rank: Option<usize>,
    pub anchor: BinAnchor,
    pub minorant: Option<SeparableFertility>,
}

impl Default for DecompositionSection {
    fn default() -> Self {
        Self {
            rank: None,
            anchor: BinAnchor::Right,
            minorant: None,
        }
    }
}

/// Rank used for non-separable fertility when none is given.
pub const DEFAULT_RANK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialCondition {
    /// density as a rate expression in `s`
    Density { density: RateExpr },
    /// the computed steady state scaled by `1 + perturbation`
    Steady {
        #[serde(default)]
        perturbation: f64,
    },
}

impl InitialCondition {
    /// Density on `grid` for the `Density` form.
    pub fn sample(&self, grid: Grid) -> Option<GridFunction> {
        match self {
            Self::Density { density } => {
                GridFunction::from_fn(grid, |s| density.eval(&hierpop_core::Args::s(s))).ok()
            }
            Self::Steady { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DynamicsSection {
    pub cfl: f64,
    pub mode: Mode,
    /// final time; defaults to `crossings` crossing times of the size range
    pub t_end: Option<f64>,
    pub crossings: f64,
    /// explicit snapshot times; `snapshots` evenly spaced ones otherwise
    pub output_times: Vec<f64>,
    pub snapshots: usize,
    pub initial: InitialCondition,
    pub mass_ceiling: f64,
}

impl Default for DynamicsSection {
    fn default() -> Self {
        Self {
            cfl: 0.3,
            mode: Mode::Quasilinear,
            t_end: None,
            crossings: 5.0,
            output_times: Vec::new(),
            snapshots: 10,
            initial: InitialCondition::Density {
                density: RateExpr::constant(1.0),
            },
            mass_ceiling: 1e12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StabilitySection {
    pub window: Option<ScanWindow>,
    pub resolution: ScanResolution,
    pub tol_spectral: f64,
    pub tol_neutral: f64,
    pub eps_fraction: f64,
    /// separable `beta~ >= beta` for a positive state
    pub majorant: Option<SeparableFertility>,
    /// separable `beta^l <= beta(., ., 0)` for the extinction state
    pub lower: Option<SeparableFertility>,
    /// separable `beta(., ., 0) <= beta^u` for the extinction state
    pub upper: Option<SeparableFertility>,
    pub keep_eigs: usize,
}

impl Default for StabilitySection {
    fn default() -> Self {
        let d = hierpop_core::stability::ClassifyOptions::default();
        Self {
            window: d.window,
            resolution: d.resolution,
            tol_spectral: d.tol_spectral,
            tol_neutral: d.tol_neutral,
            eps_fraction: d.eps_fraction,
            majorant: None,
            lower: None,
            upper: None,
            keep_eigs: d.keep_eigs,
        }
    }
}

impl StabilitySection {
    pub fn classify_options(&self) -> hierpop_core::stability::ClassifyOptions {
        hierpop_core::stability::ClassifyOptions {
            window: self.window,
            resolution: self.resolution,
            tol_spectral: self.tol_spectral,
            tol_neutral: self.tol_neutral,
            eps_fraction: self.eps_fraction,
            majorant: self.majorant.clone(),
            lower: self.lower.clone(),
            upper: self.upper.clone(),
            keep_eigs: self.keep_eigs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionSection {
    /// largest sampled `P`; ten times the initial weighted population if absent
    pub p_max: Option<f64>,
    /// largest sampled `E`; ten times the initial environment maximum if absent
    pub e_max: Option<f64>,
    pub size_samples: usize,
    pub level_samples: usize,
    /// norm threshold of the large-state bound in the existence check
    pub existence_radius: f64,
    /// `b(s) >= beta(s, y, E)` for the existence check
    pub fertility_bound: Option<RateExpr>,
}

impl Default for AssumptionSection {
    fn default() -> Self {
        let d = AssumptionSampling::default();
        Self {
            p_max: None,
            e_max: None,
            size_samples: d.size_samples,
            level_samples: d.level_samples,
            existence_radius: 10.0,
            fertility_bound: None,
        }
    }
}

/// Smallest accepted grid size.
pub const MIN_CELLS: usize = 16;

/// A validated scenario with its assumption warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub scenario: Scenario,
    pub warnings: Vec<String>,
}

/// Read, parse and validate a scenario file.
///
/// Sampled assumption violations become warnings, or an error when `strict`.
pub fn load_scenario(path: &Path, strict: bool) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text, &path.display().to_string(), strict)
}

/// As [`load_scenario`] for text already in memory; `origin` labels errors.
pub fn parse_scenario(text: &str, origin: &str, strict: bool) -> Result<Loaded, CliError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let mut scenario: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let field = err.path().to_string();
        let inner = err.into_inner();
        CliError::Parse {
            origin: origin.to_string(),
            line: inner.line(),
            column: inner.column(),
            field,
            message: strip_position(&inner.to_string()),
        }
    })?;
    validate(&scenario).map_err(CliError::Invalid)?;
    resolve(&mut scenario);
    let report = check_assumptions(&scenario.ingredients, &sampling(&scenario));
    let warnings: Vec<String> = report
        .violations
        .iter()
        .map(|v| format!("{}: {}", v.rate, v.message))
        .collect();
    if strict && !warnings.is_empty() {
        return Err(CliError::Assumption(warnings.join("\n")));
    }
    Ok(Loaded { scenario, warnings })
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(k) => msg[..k].to_string(),
        None => msg.to_string(),
    }
}

fn validate(sc: &Scenario) -> Result<(), String> {
    sc.ingredients
        .validate()
        .map_err(|e| format!("ingredients: {e}"))?;
    if sc.grid.n < MIN_CELLS {
        return Err(format!(
            "grid.n must be at least {MIN_CELLS}, got {}",
            sc.grid.n
        ));
    }
    sc.solver.validate().map_err(|e| format!("solver: {e}"))?;
    let positive = [
        ("solver.tol_residual_rel", sc.solver.tol_residual_rel),
        ("solver.tol_residual_abs", sc.solver.tol_residual_abs),
        ("solver.ceiling", sc.solver.ceiling),
        ("dynamics.crossings", sc.dynamics.crossings),
        ("dynamics.mass_ceiling", sc.dynamics.mass_ceiling),
        ("stability.tol_spectral", sc.stability.tol_spectral),
        ("stability.tol_neutral", sc.stability.tol_neutral),
        ("stability.eps_fraction", sc.stability.eps_fraction),
        (
            "assumptions.existence_radius",
            sc.assumptions.existence_radius,
        ),
    ];
    for (name, v) in positive {
        if !(v > 0.0 && v.is_finite()) {
            return Err(format!("{name} must be positive and finite, got {v}"));
        }
    }
    if !(sc.dynamics.cfl > 0.0 && sc.dynamics.cfl <= 1.0) {
        return Err(format!(
            "dynamics.cfl must lie in (0, 1], got {}",
            sc.dynamics.cfl
        ));
    }
    if let Some(t) = sc.dynamics.t_end {
        if !(t > 0.0 && t.is_finite()) {
            return Err(format!(
                "dynamics.t_end must be positive and finite, got {t}"
            ));
        }
    }
    if sc
        .dynamics
        .output_times
        .iter()
        .any(|t| !(t.is_finite() && *t >= 0.0))
    {
        return Err("dynamics.output_times must be finite and non-negative".into());
    }
    if sc.stability.eps_fraction > 1.0 {
        return Err("stability.eps_fraction must not exceed 1".into());
    }
    if sc.decomposition.rank == Some(0) {
        return Err("decomposition.rank must be at least 1".into());
    }
    if let InitialCondition::Density { density } = &sc.dynamics.initial {
        density
            .validate()
            .map_err(|e| format!("dynamics.initial.density: {e}"))?;
    }
    if let InitialCondition::Steady { perturbation } = &sc.dynamics.initial {
        if !(perturbation.is_finite() && *perturbation > -1.0) {
            return Err(format!(
                "dynamics.initial.perturbation must exceed -1, got {perturbation}"
            ));
        }
    }
    for (name, v) in [
        ("assumptions.p_max", sc.assumptions.p_max),
        ("assumptions.e_max", sc.assumptions.e_max),
    ] {
        if let Some(v) = v {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("{name} must be positive and finite, got {v}"));
            }
        }
    }
    if sc.assumptions.size_samples < 2 || sc.assumptions.level_samples < 2 {
        return Err("assumptions sample counts must be at least 2".into());
    }
    Ok(())
}

impl Scenario {
    pub fn grid(&self) -> Result<Grid, CliError> {
        self.ingredients
            .grid(self.grid.n)
            .map_err(|e| CliError::Invalid(format!("grid: {e}")))
    }
}

/// Fill data-dependent defaults so the echoed scenario is complete.
fn resolve(sc: &mut Scenario) {
    let initial = sc
        .grid()
        .ok()
        .and_then(|g| sc.dynamics.initial.sample(g))
        .and_then(|p| hierpop_core::environment(&p, &sc.ingredients).ok());
    let (p0, e0) = initial.map_or((0.0, 0.0), |env| (env.p, env.e.max()));
    if sc.assumptions.p_max.is_none() {
        sc.assumptions.p_max = Some(if p0 > 0.0 { 10.0 * p0 } else { 10.0 });
    }
    if sc.assumptions.e_max.is_none() {
        sc.assumptions.e_max = Some(if e0 > 0.0 { 10.0 * e0 } else { 10.0 });
    }
    if sc.decomposition.rank.is_none() && sc.ingredients.separable_fertility().is_none() {
        sc.decomposition.rank = Some(DEFAULT_RANK);
    }
}

pub fn sampling(sc: &Scenario) -> AssumptionSampling {
    AssumptionSampling {
        p_max: sc.assumptions.p_max.unwrap_or(10.0),
        e_max: sc.assumptions.e_max.unwrap_or(10.0),
        size_samples: sc.assumptions.size_samples,
        level_samples: sc.assumptions.level_samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "name": "constants",
        "ingredients": {
            "gamma1": {"family": "constant", "value": 1.0},
            "gamma2": {"family": "constant", "value": 1.0},
            "mu": {"family": "constant", "value": 1.0},
            "beta": {"family": "constant", "value": 2.0},
            "w": {"family": "constant", "value": 1.0},
            "kappa": {"family": "constant", "value": 1.0},
            "alpha": 0.5,
            "m": 1.0
        }
    }"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let loaded = parse_scenario(MINIMAL, "minimal", true).unwrap();
        let sc = loaded.scenario;
        assert_eq!(sc.grid.n, 200);
        assert_eq!(sc.solver, SolverOptions::default());
        assert_eq!(sc.dynamics.cfl, 0.3);
        // initial density 1 gives P = 1
        assert!((sc.assumptions.p_max.unwrap() - 10.0).abs() < 1e-12);
        assert_eq!(sc.decomposition.rank, None);
        assert!(loaded.warnings.is_empty());
        let echo = serde_json::to_string(&sc).unwrap();
        assert_eq!(parse_scenario(&echo, "echo", true).unwrap().scenario, sc);
    }

    #[test]
    fn misspelled_family_names_field_and_catalog() {
        let text = MINIMAL.replace(
            r#""mu": {"family": "constant""#,
            r#""mu": {"family": "constnat""#,
        );
        let err = parse_scenario(&text, "bad", false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("ingredients.mu"), "{msg}");
        assert!(
            msg.contains("exponential-decay") && msg.contains("logistic"),
            "{msg}"
        );
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn arity_and_range_errors() {
        let text = MINIMAL.replace(
            r#""mu": {"family": "constant", "value": 1.0}"#,
            r#""mu": {"family": "affine", "var": "E", "a": 1.0}"#,
        );
        let msg = parse_scenario(&text, "bad", false).unwrap_err().to_string();
        assert!(msg.contains("missing field `b`"), "{msg}");

        let text = MINIMAL.replace(
            r#""name": "constants","#,
            r#""name": "c", "grid": {"n": 8},"#,
        );
        let msg = parse_scenario(&text, "bad", false).unwrap_err().to_string();
        assert!(msg.contains("grid.n"), "{msg}");

        let text = MINIMAL.replace(
            r#""name": "constants","#,
            r#""name": "c", "solver": {"tol_fp": 0},"#,
        );
        assert!(parse_scenario(&text, "bad", false).is_err());

        let text = MINIMAL.replace(r#""name": "constants","#, r#""name": "c", "colour": 3,"#);
        let msg = parse_scenario(&text, "bad", false).unwrap_err().to_string();
        assert!(msg.contains("colour"), "{msg}");
    }

    #[test]
    fn non_positive_growth_depends_on_strictness() {
        let text = MINIMAL.replace(
            r#""gamma1": {"family": "constant", "value": 1.0}"#,
            r#""gamma1": {"family": "affine", "var": "s", "a": 0.5, "b": -1.0}"#,
        );
        let loose = parse_scenario(&text, "g", false).unwrap();
        assert!(
            loose.warnings.iter().any(|w| w.contains("gamma")),
            "{:?}",
            loose.warnings
        );
        let err = parse_scenario(&text, "g", true).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn non_separable_fertility_gets_a_rank() {
        let text = MINIMAL.replace(
            r#""beta": {"family": "constant", "value": 2.0}"#,
            r#""beta": {"family": "sum",
                "left": {"family": "exponential-decay", "var": "s", "a": 1.0, "b": 1.0},
                "right": {"family": "affine", "var": "y", "a": 0.0, "b": 1.0}}"#,
        );
        let sc = parse_scenario(&text, "ns", false).unwrap().scenario;
        assert_eq!(sc.decomposition.rank, Some(DEFAULT_RANK));
    }

    #[test]
    fn parse_error_reports_position() {
        let err = parse_scenario("{\n  \"name\": 3\n}", "pos", false).unwrap_err();
        match err {
            CliError::Parse { line, field, .. } => {
                assert_eq!(line, 2);
                assert_eq!(field, "name");
            }
            other => panic!("{other:?}"),
        }
    }
}
