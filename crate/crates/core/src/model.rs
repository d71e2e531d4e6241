//! Model ingredients: vital rates, their derivatives, the size-specific
//! environment `E(s, p)` and the weighted population `P`.
//!
//! Rates are expressions over the arguments `(s, y, E, P)` built from a small
//! catalog of closed-form families, so first and second partial derivatives
//! are exact. A tabulated family covers data-driven rates; its derivative
//! comes from centered differences of the table.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::gridfn::{Grid, GridFunction};

/// Argument a rate factor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Var {
    /// individual size
    #[serde(rename = "s")]
    S,
    /// parent size
    #[serde(rename = "y")]
    Y,
    /// size-specific environment
    #[serde(rename = "E", alias = "e")]
    E,
    /// weighted population
    #[serde(rename = "P", alias = "p")]
    P,
}

impl Var {
    fn bit(self) -> u8 {
        match self {
            Var::S => 1,
            Var::Y => 2,
            Var::E => 4,
            Var::P => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::S => "s",
            Var::Y => "y",
            Var::E => "E",
            Var::P => "P",
        }
    }
}

/// Point at which a rate is evaluated. Unused slots are ignored.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Args {
    pub s: f64,
    pub y: f64,
    pub e: f64,
    pub p: f64,
}

impl Args {
    pub fn s(s: f64) -> Self {
        Self {
            s,
            ..Self::default()
        }
    }

    pub fn get(&self, v: Var) -> f64 {
        match v {
            Var::S => self.s,
            Var::Y => self.y,
            Var::E => self.e,
            Var::P => self.p,
        }
    }
}

/// Set of variables an expression depends on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VarSet(u8);

impl VarSet {
    pub fn contains(self, v: Var) -> bool {
        self.0 & v.bit() != 0
    }

    fn with(self, v: Var) -> Self {
        Self(self.0 | v.bit())
    }

    fn union(self, other: Self) -> Self {
        Self(self.0 | other.0)
    }

    pub fn is_subset_of(self, vars: &[Var]) -> bool {
        let allowed = vars.iter().fold(0u8, |acc, v| acc | v.bit());
        self.0 & !allowed == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Var> {
        [Var::S, Var::Y, Var::E, Var::P]
            .into_iter()
            .filter(move |v| self.contains(*v))
    }
}

/// A rate expression from the parametric catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RateExpr {
    Constant {
        value: f64,
    },
    /// `sum_k coeffs[k] * x^k`
    Polynomial {
        var: Var,
        coeffs: Vec<f64>,
    },
    /// `a * exp(-b x)`
    ExponentialDecay {
        var: Var,
        a: f64,
        b: f64,
    },
    /// `a / (1 + b x)`
    Logistic {
        var: Var,
        a: f64,
        b: f64,
    },
    /// `a x^c / (1 + x^c)`
    Hill {
        var: Var,
        a: f64,
        c: f64,
    },
    /// `a + b x`
    Affine {
        var: Var,
        a: f64,
        b: f64,
    },
    Product {
        left: Box<RateExpr>,
        right: Box<RateExpr>,
    },
    Sum {
        left: Box<RateExpr>,
        right: Box<RateExpr>,
    },
    /// Samples on a uniform grid over `[0, x_max]`, linear in between and
    /// held constant beyond the ends.
    Tabulated {
        var: Var,
        x_max: f64,
        values: Vec<f64>,
    },
}

/// Names accepted in the `family` field.
pub const FAMILIES: &[&str] = &[
    "constant",
    "polynomial",
    "exponential-decay",
    "logistic",
    "hill",
    "affine",
    "product",
    "sum",
    "tabulated",
];

impl RateExpr {
    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    pub fn affine(var: Var, a: f64, b: f64) -> Self {
        Self::Affine { var, a, b }
    }

    pub fn logistic(var: Var, a: f64, b: f64) -> Self {
        Self::Logistic { var, a, b }
    }

    pub fn exp_decay(var: Var, a: f64, b: f64) -> Self {
        Self::ExponentialDecay { var, a, b }
    }

    pub fn hill(var: Var, a: f64, c: f64) -> Self {
        Self::Hill { var, a, c }
    }

    pub fn polynomial(var: Var, coeffs: Vec<f64>) -> Self {
        Self::Polynomial { var, coeffs }
    }

    pub fn product(left: RateExpr, right: RateExpr) -> Self {
        Self::Product {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn sum(left: RateExpr, right: RateExpr) -> Self {
        Self::Sum {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Constant { .. } => "constant",
            Self::Polynomial { .. } => "polynomial",
            Self::ExponentialDecay { .. } => "exponential-decay",
            Self::Logistic { .. } => "logistic",
            Self::Hill { .. } => "hill",
            Self::Affine { .. } => "affine",
            Self::Product { .. } => "product",
            Self::Sum { .. } => "sum",
            Self::Tabulated { .. } => "tabulated",
        }
    }

    pub fn vars(&self) -> VarSet {
        match self {
            Self::Constant { .. } => VarSet::default(),
            Self::Polynomial { var, .. }
            | Self::ExponentialDecay { var, .. }
            | Self::Logistic { var, .. }
            | Self::Hill { var, .. }
            | Self::Affine { var, .. }
            | Self::Tabulated { var, .. } => VarSet::default().with(*var),
            Self::Product { left, right } | Self::Sum { left, right } => {
                left.vars().union(right.vars())
            }
        }
    }

    pub fn depends_on(&self, v: Var) -> bool {
        self.vars().contains(v)
    }

    /// Coefficient sanity checks that do not depend on the domain.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidCoefficients {
            family: self.family(),
            reason: reason.to_string(),
        };
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        match self {
            Self::Constant { value } if !value.is_finite() => Err(bad("value must be finite")),
            Self::Polynomial { coeffs, .. } if coeffs.is_empty() || !finite(coeffs) => {
                Err(bad("need at least one finite coefficient"))
            }
            Self::ExponentialDecay { a, b, .. }
            | Self::Logistic { a, b, .. }
            | Self::Affine { a, b, .. }
                if !finite(&[*a, *b]) =>
            {
                Err(bad("coefficients must be finite"))
            }
            Self::Hill { a, c, .. } if !finite(&[*a, *c]) || *c <= 0.0 => {
                Err(bad("need finite a and exponent c > 0"))
            }
            Self::Tabulated { x_max, values, .. } => {
                if !(x_max.is_finite() && *x_max > 0.0) {
                    Err(bad("x_max must be positive"))
                } else if values.len() < 3 || !finite(values) {
                    Err(bad("need at least 3 finite samples"))
                } else {
                    Ok(())
                }
            }
            Self::Product { left, right } | Self::Sum { left, right } => {
                left.validate()?;
                right.validate()
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &Args) -> f64 {
        match self {
            Self::Constant { value } => *value,
            Self::Product { left, right } => left.eval(a) * right.eval(a),
            Self::Sum { left, right } => left.eval(a) + right.eval(a),
            Self::Tabulated { var, x_max, values } => table_value(values, *x_max, a.get(*var)),
            _ => self.univariate(a, 0).expect("order 0 always available"),
        }
    }

    /// First partial derivative with respect to `v`.
    pub fn deriv(&self, v: Var, a: &Args) -> Result<f64, ModelError> {
        if !self.depends_on(v) {
            return Ok(0.0);
        }
        match self {
            Self::Product { left, right } => {
                Ok(left.deriv(v, a)? * right.eval(a) + left.eval(a) * right.deriv(v, a)?)
            }
            Self::Sum { left, right } => Ok(left.deriv(v, a)? + right.deriv(v, a)?),
            Self::Tabulated { var, x_max, values } => Ok(table_slope(values, *x_max, a.get(*var))),
            _ => self.univariate(a, 1),
        }
    }

    /// Second partial derivative with respect to `v1` then `v2`.
    pub fn deriv2(&self, v1: Var, v2: Var, a: &Args) -> Result<f64, ModelError> {
        if !self.depends_on(v1) || !self.depends_on(v2) {
            return Ok(0.0);
        }
        match self {
            Self::Product { left, right } => Ok(left.deriv2(v1, v2, a)? * right.eval(a)
                + left.deriv(v1, a)? * right.deriv(v2, a)?
                + left.deriv(v2, a)? * right.deriv(v1, a)?
                + left.eval(a) * right.deriv2(v1, v2, a)?),
            Self::Sum { left, right } => Ok(left.deriv2(v1, v2, a)? + right.deriv2(v1, v2, a)?),
            Self::Tabulated { .. } => Err(ModelError::UnsupportedDerivative {
                family: "tabulated",
                order: 2,
            }),
            // a single-variable family depending on both means v1 == v2
            _ => self.univariate(a, 2),
        }
    }

    /// Value or derivative of a single-variable family.
    fn univariate(&self, a: &Args, order: usize) -> Result<f64, ModelError> {
        let value = match *self {
            Self::Constant { value } => {
                if order == 0 {
                    value
                } else {
                    0.0
                }
            }
            Self::Polynomial { var, ref coeffs } => {
                let x = a.get(var);
                poly_deriv(coeffs, x, order)
            }
            Self::ExponentialDecay { var, a: c, b } => {
                let x = a.get(var);
                c * (-b).powi(order as i32) * (-b * x).exp()
            }
            Self::Logistic { var, a: c, b } => {
                let d = 1.0 + b * a.get(var);
                match order {
                    0 => c / d,
                    1 => -c * b / (d * d),
                    _ => 2.0 * c * b * b / (d * d * d),
                }
            }
            Self::Hill { var, a: amp, c } => {
                let x = a.get(var).max(0.0);
                let u = x.powf(c);
                match order {
                    0 => amp * u / (1.0 + u),
                    1 => amp * c * x.powf(c - 1.0) / ((1.0 + u) * (1.0 + u)),
                    _ => {
                        amp * c * x.powf(c - 2.0) * ((c - 1.0) * (1.0 + u) - 2.0 * c * u)
                            / (1.0 + u).powi(3)
                    }
                }
            }
            Self::Affine { var, a: c, b } => match order {
                0 => c + b * a.get(var),
                1 => b,
                _ => 0.0,
            },
            _ => unreachable!("composite families handled by caller"),
        };
        if value.is_finite() {
            Ok(value)
        } else {
            Err(ModelError::UnsupportedDerivative {
                family: self.family(),
                order,
            })
        }
    }
}

fn poly_deriv(coeffs: &[f64], x: f64, order: usize) -> f64 {
    // Horner on the differentiated coefficients
    let mut acc = 0.0;
    for k in (order..coeffs.len()).rev() {
        let falling: f64 = (0..order).map(|j| (k - j) as f64).product();
        acc = acc * x + coeffs[k] * falling;
    }
    acc
}

fn table_value(values: &[f64], x_max: f64, x: f64) -> f64 {
    let n = values.len() - 1;
    let t = (x / x_max * n as f64).clamp(0.0, n as f64);
    let i = (t.floor() as usize).min(n - 1);
    let f = t - i as f64;
    values[i] + f * (values[i + 1] - values[i])
}

fn table_slope(values: &[f64], x_max: f64, x: f64) -> f64 {
    let n = values.len() - 1;
    let h = x_max / n as f64;
    let slopes: Vec<f64> = (0..=n)
        .map(|i| match i {
            0 => (values[1] - values[0]) / h,
            i if i == n => (values[n] - values[n - 1]) / h,
            i => (values[i + 1] - values[i - 1]) / (2.0 * h),
        })
        .collect();
    table_value(&slopes, x_max, x)
}

/// The vital rates of the model.
///
/// Growth is separable, `gamma(s, P) = gamma1(s) * gamma2(P)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelIngredients {
    pub gamma1: RateExpr,
    pub gamma2: RateExpr,
    pub mu: RateExpr,
    pub beta: RateExpr,
    pub w: RateExpr,
    pub kappa: RateExpr,
    pub alpha: f64,
    pub m: f64,
}

/// Selector for [`ModelIngredients::eval_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rate {
    Gamma,
    GammaS,
    GammaP,
    GammaPs,
    GammaSs,
    Mu,
    MuS,
    MuE,
    Beta,
    BetaE,
    W,
    Kappa,
}

impl ModelIngredients {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        gamma1: RateExpr,
        gamma2: RateExpr,
        mu: RateExpr,
        beta: RateExpr,
        w: RateExpr,
        kappa: RateExpr,
        alpha: f64,
        m: f64,
    ) -> Result<Self, ModelError> {
        let ing = Self {
            gamma1,
            gamma2,
            mu,
            beta,
            w,
            kappa,
            alpha,
            m,
        };
        ing.validate()?;
        Ok(ing)
    }

    /// Structural checks: argument bindings, coefficients, `alpha`, `m`.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(ModelError::InvalidAlpha(self.alpha));
        }
        if !(self.m.is_finite() && self.m > 0.0) {
            return Err(crate::error::GridError::InvalidExtent(self.m).into());
        }
        let bindings: [(&'static str, &RateExpr, &[Var]); 6] = [
            ("gamma1", &self.gamma1, &[Var::S]),
            ("gamma2", &self.gamma2, &[Var::P]),
            ("mu", &self.mu, &[Var::S, Var::E]),
            ("beta", &self.beta, &[Var::S, Var::Y, Var::E]),
            ("w", &self.w, &[Var::S]),
            ("kappa", &self.kappa, &[Var::S]),
        ];
        for (rate, expr, allowed) in bindings {
            expr.validate()?;
            if let Some(var) = expr.vars().iter().find(|v| !allowed.contains(v)) {
                return Err(ModelError::ForbiddenArgument {
                    rate,
                    var: var.name(),
                });
            }
        }
        Ok(())
    }

    pub fn gamma(&self, s: f64, p: f64) -> f64 {
        self.gamma1.eval(&Args::s(s)) * self.gamma2(p)
    }

    pub fn gamma1(&self, s: f64) -> f64 {
        self.gamma1.eval(&Args::s(s))
    }

    pub fn gamma2(&self, p: f64) -> f64 {
        self.gamma2.eval(&Args {
            p,
            ..Args::default()
        })
    }

    pub fn gamma2_p(&self, p: f64) -> Result<f64, ModelError> {
        self.gamma2.deriv(
            Var::P,
            &Args {
                p,
                ..Args::default()
            },
        )
    }

    pub fn mu(&self, s: f64, e: f64) -> f64 {
        self.mu.eval(&Args {
            s,
            e,
            ..Args::default()
        })
    }

    pub fn beta(&self, s: f64, y: f64, e: f64) -> f64 {
        self.beta.eval(&Args { s, y, e, p: 0.0 })
    }

    pub fn w(&self, s: f64) -> f64 {
        self.w.eval(&Args::s(s))
    }

    pub fn kappa(&self, s: f64) -> f64 {
        self.kappa.eval(&Args::s(s))
    }

    /// Evaluate a rate or one of its partial derivatives.
    pub fn eval_rate(&self, which: Rate, a: &Args) -> Result<f64, ModelError> {
        let sa = Args::s(a.s);
        let pa = Args {
            p: a.p,
            ..Args::default()
        };
        let g1 = || self.gamma1.eval(&sa);
        let g2 = || self.gamma2.eval(&pa);
        Ok(match which {
            Rate::Gamma => g1() * g2(),
            Rate::GammaS => self.gamma1.deriv(Var::S, &sa)? * g2(),
            Rate::GammaP => g1() * self.gamma2.deriv(Var::P, &pa)?,
            Rate::GammaPs => self.gamma1.deriv(Var::S, &sa)? * self.gamma2.deriv(Var::P, &pa)?,
            Rate::GammaSs => self.gamma1.deriv2(Var::S, Var::S, &sa)? * g2(),
            Rate::Mu => self.mu.eval(a),
            Rate::MuS => self.mu.deriv(Var::S, a)?,
            Rate::MuE => self.mu.deriv(Var::E, a)?,
            Rate::Beta => self.beta.eval(a),
            Rate::BetaE => self.beta.deriv(Var::E, a)?,
            Rate::W => self.w.eval(&sa),
            Rate::Kappa => self.kappa.eval(&sa),
        })
    }

    /// Uniform grid over `[0, m]` with `n` cells.
    pub fn grid(&self, n: usize) -> Result<Grid, ModelError> {
        Ok(Grid::new(self.m, n)?)
    }

    pub(crate) fn check_grid(&self, grid: &Grid) -> Result<(), ModelError> {
        if (grid.m() - self.m).abs() > 1e-12 * self.m {
            return Err(ModelError::ExtentMismatch {
                expected: self.m,
                got: grid.m(),
            });
        }
        Ok(())
    }

    /// The fertility as `beta1(s) * beta2(y, E)`, when it has that shape.
    pub fn separable_fertility(&self) -> Option<SeparableFertility> {
        SeparableFertility::split(&self.beta)
    }
}

/// Fertility of the form `profile(s) * weight(y, E)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparableFertility {
    /// offspring-size profile, reads `s`
    pub profile: RateExpr,
    /// parent-size and environment factor, reads `y` and `E`
    pub weight: RateExpr,
}

impl SeparableFertility {
    pub fn new(profile: RateExpr, weight: RateExpr) -> Result<Self, ModelError> {
        profile.validate()?;
        weight.validate()?;
        if let Some(v) = profile.vars().iter().find(|v| *v != Var::S) {
            return Err(ModelError::ForbiddenArgument {
                rate: "beta1",
                var: v.name(),
            });
        }
        if let Some(v) = weight.vars().iter().find(|v| !matches!(v, Var::Y | Var::E)) {
            return Err(ModelError::ForbiddenArgument {
                rate: "beta2",
                var: v.name(),
            });
        }
        Ok(Self { profile, weight })
    }

    /// Split a fertility expression into an `s`-factor and a `(y, E)`-factor.
    pub fn split(beta: &RateExpr) -> Option<Self> {
        let mut factors = Vec::new();
        flatten_product(beta, &mut factors);
        let mut profile: Option<RateExpr> = None;
        let mut weight: Option<RateExpr> = None;
        let join = |acc: Option<RateExpr>, f: &RateExpr| {
            Some(match acc {
                None => f.clone(),
                Some(a) => RateExpr::product(a, f.clone()),
            })
        };
        for f in factors {
            let vars = f.vars();
            if vars.is_subset_of(&[Var::S]) {
                profile = join(profile, f);
            } else if vars.is_subset_of(&[Var::Y, Var::E]) {
                weight = join(weight, f);
            } else {
                return None;
            }
        }
        Some(Self {
            profile: profile.unwrap_or(RateExpr::constant(1.0)),
            weight: weight.unwrap_or(RateExpr::constant(1.0)),
        })
    }

    pub fn beta1(&self, s: f64) -> f64 {
        self.profile.eval(&Args::s(s))
    }

    pub fn beta2(&self, y: f64, e: f64) -> f64 {
        self.weight.eval(&Args {
            y,
            e,
            ..Args::default()
        })
    }

    pub fn beta2_e(&self, y: f64, e: f64) -> Result<f64, ModelError> {
        self.weight.deriv(
            Var::E,
            &Args {
                y,
                e,
                ..Args::default()
            },
        )
    }

    pub fn value(&self, s: f64, y: f64, e: f64) -> f64 {
        self.beta1(s) * self.beta2(y, e)
    }

    pub fn profile_on(&self, grid: Grid) -> GridFunction {
        GridFunction::constant(grid, 0.0).map(|s, _| self.beta1(s))
    }

    /// The separable fertility as a single expression.
    pub fn as_expr(&self) -> RateExpr {
        RateExpr::product(self.profile.clone(), self.weight.clone())
    }
}

fn flatten_product<'a>(e: &'a RateExpr, out: &mut Vec<&'a RateExpr>) {
    match e {
        RateExpr::Product { left, right } => {
            flatten_product(left, out);
            flatten_product(right, out);
        }
        other => out.push(other),
    }
}

/// Environment `E(., p)` and weighted population `P` of a density.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentState {
    pub e: GridFunction,
    pub p: f64,
}

/// `E(s) = alpha * int_0^s w p + int_s^m w p` and `P = int kappa p`.
pub fn environment(
    p: &GridFunction,
    ing: &ModelIngredients,
) -> Result<EnvironmentState, ModelError> {
    if let Some((node, &value)) = p.values().iter().enumerate().find(|(_, v)| **v < 0.0) {
        return Err(ModelError::NegativeDensity { node, value });
    }
    ing.check_grid(p.grid())?;
    Ok(signed_environment(p, ing))
}

/// Same as [`environment`] without the sign check; used for perturbations.
pub fn signed_environment(p: &GridFunction, ing: &ModelIngredients) -> EnvironmentState {
    let cum = p.map(|s, v| ing.w(s) * v).cumulative_integral();
    let total = *cum.values().last().unwrap();
    // alpha * C + (C_m - C), written so that alpha = 1 gives C_m exactly
    let e = cum.map(|_, c| total - (1.0 - ing.alpha) * c);
    let weighted = p.map(|s, v| ing.kappa(s) * v).integrate();
    EnvironmentState { e, p: weighted }
}

/// Ranges over which [`check_assumptions`] samples the rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssumptionSampling {
    pub p_max: f64,
    pub e_max: f64,
    pub size_samples: usize,
    pub level_samples: usize,
}

impl Default for AssumptionSampling {
    fn default() -> Self {
        Self {
            p_max: 10.0,
            e_max: 10.0,
            size_samples: 201,
            level_samples: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub rate: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub violations: Vec<Violation>,
}

impl AssumptionReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, rate: &str, message: String) {
        self.violations.push(Violation {
            rate: rate.to_string(),
            message,
        });
    }
}

fn linspace(hi: f64, k: usize) -> impl Iterator<Item = f64> + Clone {
    let k = k.max(2);
    (0..k).map(move |i| hi * i as f64 / (k - 1) as f64)
}

/// Sample every rate and report sign and finiteness violations.
pub fn check_assumptions(
    ing: &ModelIngredients,
    sampling: &AssumptionSampling,
) -> AssumptionReport {
    let mut report = AssumptionReport::default();
    if let Err(e) = ing.validate() {
        report.push("ingredients", e.to_string());
        return report;
    }
    let sizes = linspace(ing.m, sampling.size_samples);
    let coarse = linspace(ing.m, sampling.level_samples.min(sampling.size_samples));
    let levels_p = linspace(sampling.p_max, sampling.level_samples);
    let levels_e = linspace(sampling.e_max, sampling.level_samples);

    // growth: report the first size at which gamma <= 0 for some P
    let mut gamma_bad: Option<(f64, f64, f64)> = None;
    let mut gamma_nan = false;
    'outer: for s in sizes.clone() {
        for p in levels_p.clone() {
            let g = ing.gamma(s, p);
            if !g.is_finite() {
                gamma_nan = true;
            } else if g <= 0.0 {
                gamma_bad = Some((s, p, g));
                break 'outer;
            }
        }
    }
    if let Some((s, p, g)) = gamma_bad {
        report.push(
            "gamma",
            format!("gamma <= 0 at s >= {s:.6} (P = {p:.6}, gamma = {g:.6e})"),
        );
    }
    if gamma_nan {
        report.push("gamma", "non-finite growth rate sampled".into());
    }

    let single =
        |name: &str, f: &dyn Fn(f64) -> f64, strict: bool, report: &mut AssumptionReport| {
            let mut first_bad = None;
            for s in sizes.clone() {
                let v = f(s);
                if !v.is_finite() {
                    report.push(name, format!("non-finite value at s = {s:.6}"));
                    return;
                }
                let bad = if strict { v <= 0.0 } else { v < 0.0 };
                if bad && first_bad.is_none() {
                    first_bad = Some((s, v));
                }
            }
            if let Some((s, v)) = first_bad {
                let rel = if strict { "<= 0" } else { "< 0" };
                report.push(name, format!("{name} {rel} at s = {s:.6} (value {v:.6e})"));
            }
        };
    single("kappa", &|s| ing.kappa(s), true, &mut report);
    single("w", &|s| ing.w(s), false, &mut report);

    // mortality: smallest sampled E at which mu goes negative
    let mut mu_threshold: Option<(f64, f64)> = None;
    for e in levels_e.clone() {
        for s in sizes.clone() {
            let v = ing.mu(s, e);
            if !v.is_finite() {
                report.push("mu", format!("non-finite value at s = {s:.6}, E = {e:.6}"));
                return report;
            }
            if v < 0.0 && mu_threshold.is_none() {
                mu_threshold = Some((e, s));
            }
        }
    }
    if let Some((e, s)) = mu_threshold {
        if e > 0.0 {
            report.push(
                "mu",
                format!("mu may go negative for large E: first negative sample at E = {e:.6} (s = {s:.6})"),
            );
        } else {
            report.push("mu", format!("mu < 0 at s = {s:.6} with E = 0"));
        }
    }

    let mut beta_bad: Option<(f64, f64, f64)> = None;
    'beta: for e in linspace(sampling.e_max, sampling.level_samples.min(21)) {
        for y in coarse.clone() {
            for s in coarse.clone() {
                let v = ing.beta(s, y, e);
                if !v.is_finite() || v < 0.0 {
                    beta_bad = Some((s, y, e));
                    break 'beta;
                }
            }
        }
    }
    if let Some((s, y, e)) = beta_bad {
        report.push(
            "beta",
            format!("beta negative or non-finite at s = {s:.6}, y = {y:.6}, E = {e:.6}"),
        );
    }
    report
}
