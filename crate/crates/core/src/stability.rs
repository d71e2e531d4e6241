//! Linear stability of equilibria.
//!
//! Characteristic functions are built from the double integrals
//! `D[g, f](lambda) = int_0^m g(s) int_0^s f0(s, y; lambda) f(y) dy ds` with
//! `f0 = exp{-int_y^s (gamma_s + mu + lambda) / gamma}`. With this notation
//!
//! * `K(lambda) = -D[kappa, rho / gamma]`, roots solve `K = 1`;
//! * `det(I - A(lambda))` with `a_ri = D[g_r, f_i]`, `g = (kappa, w, beta2)`;
//! * `K^l(lambda) = D[beta2(., 0), beta1 / gamma(., 0)]` at the extinction
//!   state, roots solve `K^l = 1`.
//!
//! A dense discretization of the linearized generator provides an
//! independent eigenvalue estimate.

use nalgebra::{Complex, DMatrix, DVector, Schur};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::StabilityError;
use crate::gridfn::{Grid, GridFunction};
use crate::model::{environment, Args, ModelIngredients, Rate, SeparableFertility};
use crate::steady::{survival_data, SteadyState};
use crate::survival::SurvivalData;

/// Kernels of the separable-fertility characteristic matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparableKernels {
    pub fertility: SeparableFertility,
    /// `(beta1 int beta2_E(x, E_*) p_* dx - mu_E p_*) / gamma`
    pub f2: GridFunction,
    /// `beta1 / gamma`
    pub f3: GridFunction,
    /// `beta2(s, E_*(s))`
    pub beta2: GridFunction,
}

/// Coefficients of the problem linearized around `p_*`.
#[derive(Debug, Clone)]
pub struct LinearizationData {
    pub p_star: GridFunction,
    pub e_star: GridFunction,
    pub p_weighted: f64,
    pub gamma: GridFunction,
    pub mu: GridFunction,
    /// `gamma_Ps p_* + gamma_P p_*'`
    pub rho_star: GridFunction,
    /// `gamma2'(P_*) (gamma1 p_*)'`, the same quantity for separable growth
    pub rho_identity: GridFunction,
    /// `-rho_* / gamma`
    pub f1: GridFunction,
    pub kappa: GridFunction,
    pub w: GridFunction,
    pub separable: Option<SeparableKernels>,
    /// `(gamma_s + mu) / gamma` at the equilibrium
    pub survival_rate: GridFunction,
    survival: SurvivalData,
}

impl LinearizationData {
    pub fn grid(&self) -> &Grid {
        self.p_star.grid()
    }

    pub fn is_trivial(&self) -> bool {
        self.p_star.max_abs() == 0.0
    }

    /// `D[g, f](lambda)`.
    pub fn double_integral(
        &self,
        g: &GridFunction,
        f: &GridFunction,
        lambda: Complex64,
    ) -> Complex64 {
        self.survival
            .double_integral(g.values(), f.values(), lambda)
    }
}

/// Linearize around a steady state; the separable form of the model
/// fertility, if any, feeds the characteristic matrix.
pub fn linearize(
    ss: &SteadyState,
    ing: &ModelIngredients,
) -> Result<LinearizationData, StabilityError> {
    linearize_density(&ss.p_star, ing, ing.separable_fertility())
}

/// Linearize around the density `p`, using `fertility` (a separable
/// majorant, or the model fertility itself) for the characteristic matrix.
pub fn linearize_density(
    p: &GridFunction,
    ing: &ModelIngredients,
    fertility: Option<SeparableFertility>,
) -> Result<LinearizationData, StabilityError> {
    let env = environment(p, ing)?;
    let grid = *p.grid();
    let big_p = env.p;
    let survival = survival_data(&env.e, big_p.max(0.0), ing)?;
    let gamma = GridFunction::new(grid, survival.gamma().to_vec())?;
    let mu = env.e.map(|s, e| ing.mu(s, e));
    let dp = p.derivative();
    let mut rho = Vec::with_capacity(grid.len());
    let mut rate = Vec::with_capacity(grid.len());
    for (i, s) in grid.nodes().enumerate() {
        let a = Args {
            s,
            p: big_p,
            ..Args::default()
        };
        let g_p = ing.eval_rate(Rate::GammaP, &a)?;
        let g_ps = ing.eval_rate(Rate::GammaPs, &a)?;
        let g_s = ing.eval_rate(Rate::GammaS, &a)?;
        rho.push(g_ps * p.get(i) + g_p * dp.get(i));
        rate.push((g_s + mu.get(i)) / gamma.get(i));
    }
    let rho_star = GridFunction::new(grid, rho)?;
    let g2p = ing.gamma2_p(big_p)?;
    let rho_identity = p.map(|s, v| ing.gamma1(s) * v).derivative().scale(g2p);
    let f1 = rho_star.zip_with(&gamma, |r, g| -r / g);

    let separable = match fertility {
        Some(fert) => {
            let mut drift = Vec::with_capacity(grid.len());
            for (s, &e) in grid.nodes().zip(env.e.values()) {
                drift.push(fert.beta2_e(s, e)?);
            }
            let feedback = GridFunction::new(grid, drift)?
                .zip_with(p, |d, v| d * v)
                .integrate();
            let mut f2 = Vec::with_capacity(grid.len());
            for (i, s) in grid.nodes().enumerate() {
                let mu_e = ing.eval_rate(
                    Rate::MuE,
                    &Args {
                        s,
                        e: env.e.get(i),
                        ..Args::default()
                    },
                )?;
                f2.push((fert.beta1(s) * feedback - mu_e * p.get(i)) / gamma.get(i));
            }
            let f3 = GridFunction::from_fn(grid, |s| fert.beta1(s))?.zip_with(&gamma, |b, g| b / g);
            let beta2 = env.e.map(|s, e| fert.beta2(s, e));
            Some(SeparableKernels {
                fertility: fert,
                f2: GridFunction::new(grid, f2)?,
                f3,
                beta2,
            })
        }
        None => None,
    };

    Ok(LinearizationData {
        p_star: p.clone(),
        e_star: env.e,
        p_weighted: big_p,
        kappa: GridFunction::from_fn(grid, |s| ing.kappa(s))?,
        w: GridFunction::from_fn(grid, |s| ing.w(s))?,
        gamma,
        mu,
        rho_star,
        rho_identity,
        f1,
        separable,
        survival_rate: GridFunction::new(grid, rate)?,
        survival,
    })
}

/// `K(lambda) = -D[kappa, rho_* / gamma]`.
pub fn char_k(lambda: Complex64, lin: &LinearizationData) -> Complex64 {
    lin.double_integral(&lin.kappa, &lin.f1, lambda)
}

/// Characteristic matrix and determinant at one point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CharEval {
    pub lambda: Complex64,
    pub matrix_a: [[Complex64; 3]; 3],
    /// `det(I - A(lambda))`
    pub value: Complex64,
    /// `(U1, U2, U3)` spanning the kernel of `I - A` when `|value|` is small
    pub nullvector: Option<[Complex64; 3]>,
}

/// Threshold on `|det(I - A)|` below which a null vector is reported.
pub const NULL_TOL: f64 = 1e-8;

fn trapezoid_c(g: &[f64], v: &[Complex64], h: f64) -> Complex64 {
    v.windows(2)
        .zip(g.windows(2))
        .fold(Complex64::new(0.0, 0.0), |acc, (vw, gw)| {
            acc + 0.5 * h * (gw[0] * vw[0] + gw[1] * vw[1])
        })
}

/// `det(I - A(lambda))` for separable fertility.
pub fn char_det(lambda: Complex64, lin: &LinearizationData) -> Result<CharEval, StabilityError> {
    let sep = lin.separable.as_ref().ok_or(StabilityError::NotSeparable)?;
    let h = lin.grid().h();
    let fs = [&lin.f1, &sep.f2, &sep.f3];
    let gs = [&lin.kappa, &lin.w, &sep.beta2];
    let zero = Complex64::new(0.0, 0.0);
    let mut a = [[zero; 3]; 3];
    for (i, f) in fs.iter().enumerate() {
        if f.max_abs() == 0.0 {
            continue;
        }
        let inner = lin.survival.transform(f.values(), lambda);
        for (r, g) in gs.iter().enumerate() {
            a[r][i] = trapezoid_c(g.values(), &inner, h);
        }
    }
    let m = nalgebra::Matrix3::from_fn(|r, c| {
        let id = if r == c {
            Complex64::new(1.0, 0.0)
        } else {
            zero
        };
        id - a[r][c]
    });
    let value = m.determinant();
    let nullvector = if value.norm() < NULL_TOL {
        let svd = m.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let (k, _) =
            svd.singular_values
                .iter()
                .enumerate()
                .fold(
                    (0, f64::INFINITY),
                    |best, (i, s)| if *s < best.1 { (i, *s) } else { best },
                );
        Some([v_t[(k, 0)].conj(), v_t[(k, 1)].conj(), v_t[(k, 2)].conj()])
    } else {
        None
    };
    Ok(CharEval {
        lambda,
        matrix_a: a,
        value,
        nullvector,
    })
}

/// Rates at the extinction state for a separable fertility.
#[derive(Debug, Clone)]
pub struct TrivialData {
    pub fertility: SeparableFertility,
    /// `beta1 / gamma(., 0)`
    pub f: GridFunction,
    /// `beta2(., 0)`
    pub beta2: GridFunction,
    survival: SurvivalData,
}

impl TrivialData {
    pub fn new(
        grid: Grid,
        fertility: SeparableFertility,
        ing: &ModelIngredients,
    ) -> Result<Self, StabilityError> {
        let zero = GridFunction::zeros(grid);
        let survival = survival_data(&zero, 0.0, ing)?;
        let f = GridFunction::new(
            grid,
            grid.nodes()
                .zip(survival.gamma())
                .map(|(s, g)| fertility.beta1(s) / g)
                .collect(),
        )?;
        let beta2 = GridFunction::from_fn(grid, |s| fertility.beta2(s, 0.0))?;
        Ok(Self {
            fertility,
            f,
            beta2,
            survival,
        })
    }
}

/// `K^l(lambda) = D[beta2(., 0), beta1 / gamma(., 0)]`.
pub fn char_trivial(lambda: Complex64, data: &TrivialData) -> Complex64 {
    data.survival
        .double_integral(data.beta2.values(), data.f.values(), lambda)
}

/// The two equivalent expressions of the net reproduction functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NetReproduction {
    /// survival exponent with `gamma_s`, offspring weighted by `1 / gamma(y)`
    pub first: f64,
    /// survival exponent `mu / gamma` only, parent weighted by `1 / gamma(s)`
    pub second: f64,
}

impl NetReproduction {
    pub fn value(&self) -> f64 {
        self.second
    }

    pub fn relative_gap(&self) -> f64 {
        (self.first - self.second).abs() / self.second.abs().max(f64::MIN_POSITIVE)
    }
}

/// `R(p)` for separable fertility `beta1(s) beta2(y, E)`.
pub fn net_reproduction(
    p: &GridFunction,
    fertility: &SeparableFertility,
    ing: &ModelIngredients,
) -> Result<NetReproduction, StabilityError> {
    let env = environment(p, ing)?;
    let grid = *p.grid();
    let data = survival_data(&env.e, env.p, ing)?;
    let beta1: Vec<f64> = grid.nodes().map(|s| fertility.beta1(s)).collect();
    let beta2: Vec<f64> = grid
        .nodes()
        .zip(env.e.values())
        .map(|(s, &e)| fertility.beta2(s, e))
        .collect();
    let gamma = data.gamma();
    let f: Vec<f64> = beta1.iter().zip(gamma).map(|(b, g)| b / g).collect();
    let inner = data.transform_real(&f);
    let first = trapezoid(&beta2, &inner, grid.h());

    let hazard: Vec<f64> = grid
        .nodes()
        .zip(env.e.values())
        .zip(gamma)
        .map(|((s, &e), g)| ing.mu(s, e) / g)
        .collect();
    let plain = SurvivalData::new(grid, &hazard, &vec![1.0; grid.len()]);
    let inner2 = plain.transform_real(&beta1);
    let outer: Vec<f64> = beta2.iter().zip(gamma).map(|(b, g)| b / g).collect();
    let second = trapezoid(&outer, &inner2, grid.h());
    Ok(NetReproduction { first, second })
}

fn trapezoid(g: &[f64], v: &[f64], h: f64) -> f64 {
    v.windows(2).zip(g.windows(2)).fold(0.0, |acc, (vw, gw)| {
        acc + 0.5 * h * (gw[0] * vw[0] + gw[1] * vw[1])
    })
}

/// Bisection for `char(lambda) = 1` on `[lo, hi]`.
///
/// Returns `None` when `char - 1` has no sign change on the bracket.
pub fn find_real_root(
    char_fn: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
) -> Result<Option<f64>, StabilityError> {
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(StabilityError::InvalidBracket { lo, hi });
    }
    let g = |x: f64| char_fn(x) - 1.0;
    let (mut a, mut b) = (lo, hi);
    let (mut ga, gb) = (g(a), g(b));
    if ga == 0.0 {
        return Ok(Some(a));
    }
    if gb == 0.0 {
        return Ok(Some(b));
    }
    if !(ga.is_finite() && gb.is_finite()) || ga.signum() == gb.signum() {
        return Ok(None);
    }
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        let gm = g(mid);
        if gm == 0.0 {
            return Ok(Some(mid));
        }
        if gm.signum() == ga.signum() {
            a = mid;
            ga = gm;
        } else {
            b = mid;
        }
        if b - a <= 1e-15 * a.abs().max(b.abs()).max(1.0) {
            break;
        }
    }
    Ok(Some(0.5 * (a + b)))
}

/// Smallest `hi = start * 2^k` with `char(hi) < 1`, for a function that
/// tends to zero as `lambda -> +inf`.
pub fn upper_bracket(char_fn: impl Fn(f64) -> f64, start: f64) -> Option<f64> {
    let mut hi = start.max(1e-6);
    for _ in 0..60 {
        if char_fn(hi) < 1.0 {
            return Some(hi);
        }
        hi *= 2.0;
    }
    None
}

/// Rectangle `[re_min, re_max] x [-im_max, im_max]` of the complex plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanWindow {
    pub re_min: f64,
    pub re_max: f64,
    pub im_max: f64,
}

impl ScanWindow {
    /// `[-0.05 L, L] x [-20 L, 20 L]` with `L = 5 * scale`.
    pub fn from_scale(scale: f64) -> Self {
        let l = 5.0 * scale;
        Self {
            re_min: -0.05 * l,
            re_max: l,
            im_max: 20.0 * l,
        }
    }

    fn validate(&self) -> Result<(), StabilityError> {
        if !(self.re_min < self.re_max)
            || !(self.im_max > 0.0)
            || !self.re_max.is_finite()
            || !self.im_max.is_finite()
        {
            return Err(StabilityError::InvalidWindow(format!("{self:?}")));
        }
        Ok(())
    }

    fn contains(&self, z: Complex64) -> bool {
        z.re >= self.re_min && z.re <= self.re_max && z.im.abs() <= self.im_max
    }
}

/// Grid of sub-rectangles used by [`scan_complex`]. An odd `im_cells`
/// keeps the real axis off the contours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanResolution {
    pub re_cells: usize,
    pub im_cells: usize,
}

impl Default for ScanResolution {
    fn default() -> Self {
        Self {
            re_cells: 8,
            im_cells: 41,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScanResult {
    pub window: ScanWindow,
    pub roots: Vec<Complex64>,
    /// total winding number over the window
    pub count: i64,
    /// grid shifts needed to keep contours away from zeros
    pub perturbations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    re0: f64,
    re1: f64,
    im0: f64,
    im1: f64,
}

impl Rect {
    fn center(&self) -> Complex64 {
        Complex64::new(0.5 * (self.re0 + self.re1), 0.5 * (self.im0 + self.im1))
    }

    fn diameter(&self) -> f64 {
        (self.re1 - self.re0).hypot(self.im1 - self.im0)
    }

    fn contains(&self, z: Complex64, slack: f64) -> bool {
        z.re >= self.re0 - slack
            && z.re <= self.re1 + slack
            && z.im >= self.im0 - slack
            && z.im <= self.im1 + slack
    }

    fn quarters(&self) -> [Rect; 4] {
        let (rm, im) = (0.5 * (self.re0 + self.re1), 0.5 * (self.im0 + self.im1));
        [
            Rect {
                re0: self.re0,
                re1: rm,
                im0: self.im0,
                im1: im,
            },
            Rect {
                re0: rm,
                re1: self.re1,
                im0: self.im0,
                im1: im,
            },
            Rect {
                re0: self.re0,
                re1: rm,
                im0: im,
                im1: self.im1,
            },
            Rect {
                re0: rm,
                re1: self.re1,
                im0: im,
                im1: self.im1,
            },
        ]
    }
}

/// Contour value too small to trust the argument.
const HIT_TOL: f64 = 1e-10;

fn edge_arg<F: Fn(Complex64) -> Complex64>(
    f: &F,
    a: Complex64,
    fa: Complex64,
    b: Complex64,
    fb: Complex64,
    depth: u32,
) -> Option<f64> {
    if fa.norm() < HIT_TOL || fb.norm() < HIT_TOL {
        return None;
    }
    let d = (fb / fa).arg();
    if d.abs() < 0.4 || depth == 0 {
        return Some(d);
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid);
    Some(edge_arg(f, a, fa, mid, fm, depth - 1)? + edge_arg(f, mid, fm, b, fb, depth - 1)?)
}

/// Winding number of `f` around the boundary of `r`, or `None` when the
/// contour passes too close to a zero.
fn winding<F: Fn(Complex64) -> Complex64>(f: &F, r: &Rect) -> Option<i64> {
    let corners = [
        Complex64::new(r.re0, r.im0),
        Complex64::new(r.re1, r.im0),
        Complex64::new(r.re1, r.im1),
        Complex64::new(r.re0, r.im1),
    ];
    let mut total = 0.0;
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        // a few fixed samples per edge before adaptive refinement
        let pieces = 8;
        let mut za = a;
        let mut fa = f(za);
        for j in 1..=pieces {
            let zb = a + (b - a) * (j as f64 / pieces as f64);
            let fb = f(zb);
            total += edge_arg(f, za, fa, zb, fb, 24)?;
            za = zb;
            fa = fb;
        }
    }
    Some((total / std::f64::consts::TAU).round() as i64)
}

fn secant<F: Fn(Complex64) -> Complex64>(f: &F, z0: Complex64, step: f64) -> Option<Complex64> {
    let mut a = z0;
    let mut b = z0 + Complex64::new(step, 0.5 * step);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..100 {
        let denom = fb - fa;
        if denom.norm() == 0.0 {
            break;
        }
        let c = b - fb * (b - a) / denom;
        if !(c.re.is_finite() && c.im.is_finite()) {
            return None;
        }
        a = b;
        fa = fb;
        b = c;
        fb = f(b);
        if (b - a).norm() <= 1e-14 * b.norm().max(1.0) || fb.norm() == 0.0 {
            return Some(b);
        }
    }
    (fb.norm() < 1e-9).then_some(b)
}

fn refine<F: Fn(Complex64) -> Complex64>(
    f: &F,
    r: Rect,
    count: i64,
    min_diam: f64,
    out: &mut Vec<Complex64>,
) {
    if count <= 0 {
        return;
    }
    if count == 1 {
        if let Some(z) = secant(f, r.center(), 1e-3 * r.diameter()) {
            if r.contains(z, 1e-9 * r.diameter().max(1.0)) {
                out.push(z);
                return;
            }
        }
    }
    if r.diameter() < min_diam {
        for _ in 0..count {
            out.push(r.center());
        }
        return;
    }
    for q in r.quarters() {
        match winding(f, &q) {
            Some(c) => refine(f, q, c, min_diam, out),
            // zero on a subdivision line; the secant from the centre of the
            // parent usually finds it
            None => {
                if let Some(z) = secant(f, q.center(), 1e-3 * q.diameter()) {
                    if r.contains(z, 0.0) {
                        out.push(z);
                    }
                }
            }
        }
    }
}

/// Zeros of `f` in `window` by the argument principle on a grid of
/// sub-rectangles, refined by subdivision and secant polishing.
pub fn scan_complex<F>(
    f: F,
    window: ScanWindow,
    resolution: ScanResolution,
) -> Result<ScanResult, StabilityError>
where
    F: Fn(Complex64) -> Complex64 + Sync,
{
    window.validate()?;
    if resolution.re_cells == 0 || resolution.im_cells == 0 {
        return Err(StabilityError::InvalidWindow(
            "resolution must be positive".into(),
        ));
    }
    let (nx, ny) = (resolution.re_cells, resolution.im_cells);
    let dx = (window.re_max - window.re_min) / nx as f64;
    let dy = 2.0 * window.im_max / ny as f64;
    let min_diam = 1e-9 * (window.re_max - window.re_min).max(window.im_max);
    for attempt in 0..4 {
        // shift interior lines by a small irrational fraction on retries
        let shift = attempt as f64 * 0.0137;
        let xs: Vec<f64> = (0..=nx)
            .map(|i| {
                if i == 0 || i == nx {
                    window.re_min + i as f64 * dx
                } else {
                    window.re_min + (i as f64 + shift) * dx
                }
            })
            .collect();
        let ys: Vec<f64> = (0..=ny)
            .map(|j| {
                if j == 0 || j == ny {
                    -window.im_max + j as f64 * dy
                } else {
                    -window.im_max + (j as f64 + shift) * dy
                }
            })
            .collect();
        let rects: Vec<Rect> = (0..nx)
            .flat_map(|i| (0..ny).map(move |j| (i, j)))
            .map(|(i, j)| Rect {
                re0: xs[i],
                re1: xs[i + 1],
                im0: ys[j],
                im1: ys[j + 1],
            })
            .collect();
        let counts: Vec<Option<i64>> = rects.par_iter().map(|r| winding(&f, r)).collect();
        if counts.iter().any(Option::is_none) {
            continue;
        }
        let mut roots: Vec<Complex64> = rects
            .par_iter()
            .zip(&counts)
            .flat_map_iter(|(r, c)| {
                let mut out = Vec::new();
                refine(&f, *r, c.unwrap_or(0), min_diam, &mut out);
                out
            })
            .collect();
        roots.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
        let mut unique: Vec<Complex64> = Vec::new();
        for z in roots {
            if window.contains(z)
                && !unique
                    .iter()
                    .any(|u| (u - z).norm() < 1e-8 * z.norm().max(1.0))
            {
                unique.push(z);
            }
        }
        return Ok(ScanResult {
            window,
            roots: unique,
            count: counts.iter().map(|c| c.unwrap_or(0)).sum(),
            perturbations: attempt,
        });
    }
    Err(StabilityError::InvalidWindow(
        "contours kept passing through zeros after 3 grid shifts".into(),
    ))
}

/// Which version of the environment-feedback operators to discretize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorForm {
    /// the linearized generator itself
    Full,
    /// environment feedback through `int w u` only, with separable
    /// fertility; its point spectrum is the zero set of `det(I - A)`
    Modified,
}

/// Dense `(n+1) x (n+1)` discretization of the linearized generator.
///
/// Row 0 carries only a large negative diagonal so every other eigenvector
/// satisfies `u(0) = 0`. Transport is the conservative upwind difference
/// `-(gamma_i u_i - gamma_{i-1} u_{i-1}) / h - mu_i u_i`; integrals use the
/// trapezoid weights of the grid.
pub fn linearized_matrix(
    lin: &LinearizationData,
    ing: &ModelIngredients,
    form: OperatorForm,
) -> Result<DMatrix<f64>, StabilityError> {
    let grid = *lin.grid();
    let n = grid.n();
    let h = grid.h();
    let nodes: Vec<f64> = grid.nodes().collect();
    let omega = grid.weights();
    let gamma = lin.gamma.values();
    let mu = lin.mu.values();
    let p = lin.p_star.values();
    let e = lin.e_star.values();
    let w = lin.w.values();
    let alpha = ing.alpha;
    let mut m = DMatrix::<f64>::zeros(n + 1, n + 1);

    let transport_scale = gamma.iter().fold(0.0f64, |a, g| a.max(g.abs())) / h
        + mu.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    m[(0, 0)] = -(10.0 * transport_scale + 1.0);
    for i in 1..=n {
        m[(i, i)] -= gamma[i] / h + mu[i];
        m[(i, i - 1)] += gamma[i - 1] / h;
    }
    // rank-one growth feedback
    for i in 1..=n {
        let r = lin.rho_star.get(i);
        if r != 0.0 {
            for k in 0..=n {
                m[(i, k)] -= r * omega[k] * lin.kappa.get(k);
            }
        }
    }
    // environment quadrature: E(s_i, u) = sum_k q[i][k] u_k
    let env_row = |i: usize, k: usize| -> f64 {
        match form {
            OperatorForm::Modified => omega[k] * w[k],
            OperatorForm::Full => {
                let c = if i == 0 || k > i {
                    0.0
                } else if k == 0 || k == i {
                    0.5 * h
                } else {
                    h
                };
                (omega[k] - (1.0 - alpha) * c) * w[k]
            }
        }
    };
    let trivial = lin.is_trivial();
    if !trivial {
        for i in 1..=n {
            let mu_e = ing.eval_rate(
                Rate::MuE,
                &Args {
                    s: nodes[i],
                    e: e[i],
                    ..Args::default()
                },
            )?;
            let c = mu_e * p[i];
            if c != 0.0 {
                for k in 0..=n {
                    m[(i, k)] -= c * env_row(i, k);
                }
            }
        }
    }
    match form {
        OperatorForm::Full => {
            let mut fert = DMatrix::<f64>::zeros(n + 1, n + 1);
            let mut feedback = DMatrix::<f64>::zeros(n + 1, n + 1);
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (1..=n)
                .into_par_iter()
                .map(|i| {
                    let mut b = vec![0.0; n + 1];
                    let mut be = vec![0.0; n + 1];
                    for k in 0..=n {
                        b[k] = omega[k] * ing.beta(nodes[i], nodes[k], e[k]);
                        if !trivial && p[k] != 0.0 {
                            let a = Args {
                                s: nodes[i],
                                y: nodes[k],
                                e: e[k],
                                p: 0.0,
                            };
                            be[k] = omega[k]
                                * ing.eval_rate(Rate::BetaE, &a).unwrap_or(f64::NAN)
                                * p[k];
                        }
                    }
                    (b, be)
                })
                .collect();
            for (idx, (b, be)) in rows.into_iter().enumerate() {
                let i = idx + 1;
                for k in 0..=n {
                    fert[(i, k)] = b[k];
                    feedback[(i, k)] = be[k];
                }
            }
            if feedback.iter().any(|v| v.is_nan()) {
                return Err(StabilityError::BadMatrix);
            }
            m += fert;
            if !trivial {
                let q = DMatrix::from_fn(n + 1, n + 1, env_row);
                m += feedback * q;
            }
        }
        OperatorForm::Modified => {
            let sep = lin.separable.as_ref().ok_or(StabilityError::NotSeparable)?;
            let fert = &sep.fertility;
            let mut drift_total = 0.0;
            if !trivial {
                for k in 0..=n {
                    drift_total += omega[k] * fert.beta2_e(nodes[k], e[k])? * p[k];
                }
            }
            for i in 1..=n {
                let b1 = fert.beta1(nodes[i]);
                for k in 0..=n {
                    m[(i, k)] +=
                        b1 * omega[k] * sep.beta2.get(k) + b1 * drift_total * omega[k] * w[k];
                }
            }
        }
    }
    Ok(m)
}

/// All eigenvalues, rightmost first.
pub fn spectrum(matrix: &DMatrix<f64>) -> Result<Vec<Complex64>, StabilityError> {
    if matrix.nrows() == 0 || matrix.nrows() != matrix.ncols() {
        return Err(StabilityError::BadMatrix);
    }
    let n = matrix.nrows();
    let max_iter = 200 * n;
    let schur = Schur::try_new(matrix.clone(), f64::EPSILON, max_iter)
        .ok_or(StabilityError::NoConvergence(max_iter))?;
    let mut eig: Vec<Complex64> = schur
        .complex_eigenvalues()
        .iter()
        .map(|c: &Complex<f64>| Complex64::new(c.re, c.im))
        .collect();
    eig.sort_by(|a, b| b.re.total_cmp(&a.re).then(b.im.total_cmp(&a.im)));
    Ok(eig)
}

/// Largest dimension solved by the dense Schur decomposition.
pub const DENSE_LIMIT: usize = 401;

/// Eigenvalue with the largest real part.
///
/// Dense Schur decomposition up to [`DENSE_LIMIT`] rows, shift-invert
/// iteration from the right Gershgorin edge above.
pub fn rightmost_eigenvalue(matrix: &DMatrix<f64>) -> Result<Complex64, StabilityError> {
    if matrix.nrows() == 0 || matrix.nrows() != matrix.ncols() {
        return Err(StabilityError::BadMatrix);
    }
    if matrix.nrows() <= DENSE_LIMIT {
        return Ok(spectrum(matrix)?[0]);
    }
    let edge = (0..matrix.nrows())
        .map(|i| {
            let off: f64 = (0..matrix.ncols())
                .filter(|j| *j != i)
                .map(|j| matrix[(i, j)].abs())
                .sum();
            matrix[(i, i)] + off
        })
        .fold(f64::NEG_INFINITY, f64::max);
    rightmost_eigenvalue_near(matrix, Complex64::new(edge, 0.0))
}

/// Eigenvalue nearest to `shift` by inverse iteration.
pub fn rightmost_eigenvalue_near(
    matrix: &DMatrix<f64>,
    shift: Complex64,
) -> Result<Complex64, StabilityError> {
    let n = matrix.nrows();
    if n == 0 || n != matrix.ncols() {
        return Err(StabilityError::BadMatrix);
    }
    let scale = matrix.amax().max(1.0);
    // a small imaginary offset separates conjugate pairs
    let sigma = shift + Complex64::new(0.0, 1e-3 * scale.sqrt());
    let shifted = DMatrix::<Complex64>::from_fn(n, n, |i, j| {
        let v = Complex64::new(matrix[(i, j)], 0.0);
        if i == j {
            v - sigma
        } else {
            v
        }
    });
    let lu = shifted.lu();
    let mut x =
        DVector::<Complex64>::from_fn(n, |i, _| Complex64::new(1.0 + (i % 7) as f64 * 0.1, 0.0));
    let mut estimate = sigma;
    let max_iter = 1000;
    for _ in 0..max_iter {
        let y = lu.solve(&x).ok_or(StabilityError::BadMatrix)?;
        let nu = x.dotc(&y) / x.dotc(&x);
        let next = sigma + 1.0 / nu;
        let norm = y.norm();
        x = y / Complex64::new(norm, 0.0);
        if (next - estimate).norm() <= 1e-12 * next.norm().max(1.0) {
            return Ok(next);
        }
        estimate = next;
    }
    Err(StabilityError::NoConvergence(max_iter))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Stable,
    Unstable,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionOutcome {
    pub name: String,
    pub held: bool,
    pub value: Option<f64>,
    pub detail: String,
}

impl ConditionOutcome {
    fn new(name: &str, held: bool, value: Option<f64>, detail: String) -> Self {
        Self {
            name: name.to_string(),
            held,
            value,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub verdict: Verdict,
    pub trivial_state: bool,
    pub triggered_conditions: Vec<ConditionOutcome>,
    /// zeros of the characteristic function found in the window
    pub char_roots: Vec<Complex64>,
    /// positive real root from bisection, when one was sought and found
    pub real_root: Option<f64>,
    /// rightmost eigenvalues of the discretized generator
    pub matrix_eigs: Vec<Complex64>,
    pub oracle_rightmost: Option<Complex64>,
    pub oracle_n: usize,
    /// rightmost characteristic root, or the oracle estimate when none
    pub rightmost: Option<Complex64>,
    pub scan_window: ScanWindow,
    /// `R(p_*)` for a positive state
    pub net_reproduction: Option<f64>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifyOptions {
    pub window: Option<ScanWindow>,
    pub resolution: ScanResolution,
    /// real parts above this count as positive
    pub tol_spectral: f64,
    /// a stable verdict needs every real part below `-tol_neutral`
    pub tol_neutral: f64,
    /// fraction of `[0, m]` searched for non-vanishing `rho_*`
    pub eps_fraction: f64,
    /// separable majorant of the fertility for a positive state
    pub majorant: Option<SeparableFertility>,
    /// separable bounds `beta^l <= beta(., ., 0) <= beta^u` at extinction
    pub lower: Option<SeparableFertility>,
    pub upper: Option<SeparableFertility>,
    /// number of oracle eigenvalues kept in the report
    pub keep_eigs: usize,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        Self {
            window: None,
            resolution: ScanResolution::default(),
            tol_spectral: 1e-6,
            tol_neutral: 1e-3,
            eps_fraction: 0.1,
            majorant: None,
            lower: None,
            upper: None,
            keep_eigs: 10,
        }
    }
}

/// `max(max mu, m max beta)` at the given environment, floored at `1e-3`.
pub fn rate_scale(ing: &ModelIngredients, grid: &Grid, e: &GridFunction) -> f64 {
    let nodes: Vec<f64> = grid.nodes().collect();
    let mu = nodes
        .iter()
        .zip(e.values())
        .map(|(&s, &ev)| ing.mu(s, ev).abs())
        .fold(0.0, f64::max);
    let beta = nodes
        .par_iter()
        .map(|&s| {
            nodes
                .iter()
                .zip(e.values())
                .map(|(&y, &ev)| ing.beta(s, y, ev).abs())
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    mu.max(grid.m() * beta).max(1e-3)
}

/// Sampled check of `lo <= hi` on the grid square at environment `e`.
fn dominates(
    grid: &Grid,
    e: &GridFunction,
    lo: impl Fn(f64, f64, f64) -> f64 + Sync,
    hi: impl Fn(f64, f64, f64) -> f64 + Sync,
) -> f64 {
    let nodes: Vec<f64> = grid.nodes().collect();
    nodes
        .par_iter()
        .map(|&s| {
            nodes
                .iter()
                .zip(e.values())
                .map(|(&y, &ev)| lo(s, y, ev) - hi(s, y, ev))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .reduce(|| f64::NEG_INFINITY, f64::max)
}

fn oracle(
    lin: &LinearizationData,
    ing: &ModelIngredients,
    keep: usize,
) -> Result<(Vec<Complex64>, Complex64), StabilityError> {
    let mat = linearized_matrix(lin, ing, OperatorForm::Full)?;
    if mat.nrows() <= DENSE_LIMIT {
        let eig = spectrum(&mat)?;
        let top = eig[0];
        Ok((eig.into_iter().take(keep).collect(), top))
    } else {
        let top = rightmost_eigenvalue(&mat)?;
        Ok((vec![top], top))
    }
}

/// Stability verdict for a converged or extinction steady state.
pub fn classify(
    ss: &SteadyState,
    ing: &ModelIngredients,
    opts: &ClassifyOptions,
) -> Result<StabilityReport, StabilityError> {
    if ss.trivial || ss.p_star.max_abs() == 0.0 {
        return classify_trivial(*ss.p_star.grid(), ing, opts);
    }
    classify_positive(&ss.p_star, ing, opts)
}

fn classify_positive(
    p: &GridFunction,
    ing: &ModelIngredients,
    opts: &ClassifyOptions,
) -> Result<StabilityReport, StabilityError> {
    let grid = *p.grid();
    let majorant = opts.majorant.clone().or_else(|| ing.separable_fertility());
    let lin = linearize_density(p, ing, majorant.clone())?;
    let scale = rate_scale(ing, &grid, &lin.e_star);
    let window = opts.window.unwrap_or_else(|| ScanWindow::from_scale(scale));
    let mut conds = Vec::new();
    let mut notes = Vec::new();
    let nodes: Vec<f64> = grid.nodes().collect();

    let k0 = char_k(Complex64::new(0.0, 0.0), &lin).re;
    conds.push(ConditionOutcome::new(
        "K(0) > 1",
        k0 > 1.0,
        Some(k0),
        format!("growth-feedback characteristic function at 0 is {k0:.6e}"),
    ));
    let rho_max_abs = lin.rho_star.max_abs();
    let rho_sign = lin.rho_star.max() <= 1e-8 * rho_max_abs;
    conds.push(ConditionOutcome::new(
        "rho_* <= 0",
        rho_sign,
        Some(lin.rho_star.max()),
        format!("max rho_* = {:.6e}", lin.rho_star.max()),
    ));
    let eps = opts.eps_fraction * grid.m();
    let near: Vec<f64> = nodes
        .iter()
        .zip(lin.rho_star.values())
        .filter(|(s, _)| **s <= eps)
        .map(|(_, r)| *r)
        .collect();
    let nonzero = near
        .iter()
        .filter(|r| r.abs() > 1e-12 * rho_max_abs && rho_max_abs > 0.0)
        .count();
    let share = nonzero as f64 / near.len().max(1) as f64;
    conds.push(ConditionOutcome::new(
        "rho_* nonzero near 0",
        share >= 0.9,
        Some(share),
        format!(
            "rho_* != 0 on {:.1}% of nodes in [0, {eps:.4}]",
            100.0 * share
        ),
    ));
    let mut mu_e_max = f64::NEG_INFINITY;
    for (&s, &e) in nodes.iter().zip(lin.e_star.values()) {
        mu_e_max = mu_e_max.max(ing.eval_rate(
            Rate::MuE,
            &Args {
                s,
                e,
                ..Args::default()
            },
        )?);
    }
    let mu_e_ok = mu_e_max <= 1e-14;
    conds.push(ConditionOutcome::new(
        "mu_E <= 0",
        mu_e_ok,
        Some(mu_e_max),
        format!("max mu_E = {mu_e_max:.6e}"),
    ));
    let beta_e_min = -dominates(
        &grid,
        &lin.e_star,
        |s, y, e| {
            -ing.eval_rate(Rate::BetaE, &Args { s, y, e, p: 0.0 })
                .unwrap_or(f64::NEG_INFINITY)
        },
        |_, _, _| 0.0,
    );
    let beta_e_ok = beta_e_min >= -1e-14;
    conds.push(ConditionOutcome::new(
        "beta_E >= 0",
        beta_e_ok,
        Some(beta_e_min),
        format!("min beta_E = {beta_e_min:.6e}"),
    ));
    let rel = (lin.rho_star.l1_distance(&lin.rho_identity)) / rho_max_abs.max(f64::MIN_POSITIVE);
    notes.push(format!(
        "separable-growth identity for rho_*: relative L1 gap {rel:.3e}"
    ));

    let (matrix_eigs, oracle_top) = oracle(&lin, ing, opts.keep_eigs)?;
    let oracle_unstable = oracle_top.re > opts.tol_spectral;
    let oracle_stable = oracle_top.re < -opts.tol_neutral;

    let instability = k0 > 1.0 && rho_sign && share >= 0.9 && mu_e_ok && beta_e_ok;
    let mut real_root = None;
    let mut char_roots = Vec::new();
    let mut verdict = Verdict::Inconclusive;

    if instability {
        let kf = |x: f64| char_k(Complex64::new(x, 0.0), &lin).re;
        if let Some(hi) = upper_bracket(kf, scale) {
            real_root = find_real_root(kf, 0.0, hi)?;
        }
        if let Some(r) = real_root {
            char_roots.push(Complex64::new(r, 0.0));
            if r > opts.tol_spectral {
                verdict = Verdict::Unstable;
            }
            if !oracle_unstable {
                notes.push(format!(
                    "matrix oracle rightmost {oracle_top:.6e} does not confirm the positive root"
                ));
            }
        }
    }

    let mut r_star = None;
    if let Some(maj) = &majorant {
        let gap = dominates(
            &grid,
            &lin.e_star,
            |s, y, e| ing.beta(s, y, e),
            |s, y, e| maj.value(s, y, e),
        );
        let maj_ok = gap <= 1e-12;
        conds.push(ConditionOutcome::new(
            "beta <= separable majorant",
            maj_ok,
            Some(gap),
            format!("max (beta - majorant) = {gap:.6e}"),
        ));
        let mut maj_e_min = f64::INFINITY;
        for (&y, &e) in nodes.iter().zip(lin.e_star.values()) {
            let b1max = nodes
                .iter()
                .map(|&s| maj.beta1(s))
                .fold(f64::NEG_INFINITY, f64::max);
            let b1min = nodes
                .iter()
                .map(|&s| maj.beta1(s))
                .fold(f64::INFINITY, f64::min);
            let d = maj.beta2_e(y, e)?;
            maj_e_min = maj_e_min.min((b1max * d).min(b1min * d));
        }
        let maj_e_ok = maj_e_min >= -1e-14;
        conds.push(ConditionOutcome::new(
            "majorant_E >= 0",
            maj_e_ok,
            Some(maj_e_min),
            format!("min d/dE of the majorant = {maj_e_min:.6e}"),
        ));
        if let Some(fert) = ing.separable_fertility() {
            let r = net_reproduction(p, &fert, ing)?;
            r_star = Some(r.value());
        }
        let scan = scan_complex(
            |z| {
                char_det(z, &lin)
                    .map(|c| c.value)
                    .unwrap_or(Complex64::new(f64::NAN, f64::NAN))
            },
            window,
            opts.resolution,
        )?;
        char_roots.extend(scan.roots.iter().copied());
        let clear = scan.roots.iter().all(|z| z.re < -opts.tol_neutral)
            && scan.count == scan.roots.len() as i64;
        conds.push(ConditionOutcome::new(
            "det(I - A) clear of Re >= 0 in window",
            clear,
            scan.roots.first().map(|z| z.re),
            format!(
                "{} zeros found in [{:.3}, {:.3}] x [-{:.3}, {:.3}]",
                scan.roots.len(),
                window.re_min,
                window.re_max,
                window.im_max,
                window.im_max
            ),
        ));
        let stability = maj_ok && maj_e_ok && mu_e_ok && rho_sign && clear;
        if verdict == Verdict::Inconclusive && stability && oracle_stable {
            verdict = Verdict::Stable;
            notes.push("certified only inside the scan window".into());
        }
    } else {
        notes.push("no separable majorant: stability criterion not evaluated".into());
    }
    conds.push(ConditionOutcome::new(
        "matrix oracle rightmost < 0",
        oracle_stable,
        Some(oracle_top.re),
        format!(
            "rightmost eigenvalue of the discretized generator {:.6e}{:+.6e}i",
            oracle_top.re, oracle_top.im
        ),
    ));
    char_roots.sort_by(|a, b| b.re.total_cmp(&a.re));
    let rightmost = char_roots.first().copied().or(Some(oracle_top));
    Ok(StabilityReport {
        verdict,
        trivial_state: false,
        triggered_conditions: conds,
        char_roots,
        real_root,
        matrix_eigs,
        oracle_rightmost: Some(oracle_top),
        oracle_n: grid.n(),
        rightmost,
        scan_window: window,
        net_reproduction: r_star,
        notes,
    })
}

/// Extinction-state analysis from separable bounds on the fertility.
pub fn classify_trivial(
    grid: Grid,
    ing: &ModelIngredients,
    opts: &ClassifyOptions,
) -> Result<StabilityReport, StabilityError> {
    let zero = GridFunction::zeros(grid);
    let own = ing.separable_fertility();
    let lower = opts.lower.clone().or_else(|| own.clone());
    let upper = opts.upper.clone().or_else(|| own.clone());
    let scale = rate_scale(ing, &grid, &zero);
    let window = opts.window.unwrap_or_else(|| ScanWindow::from_scale(scale));
    let mut conds = Vec::new();
    let mut notes = Vec::new();
    let mut char_roots = Vec::new();
    let mut real_root = None;

    let lin = linearize_density(&zero, ing, None)?;
    let (matrix_eigs, oracle_top) = oracle(&lin, ing, opts.keep_eigs)?;
    let oracle_unstable = oracle_top.re > opts.tol_spectral;
    let oracle_stable = oracle_top.re < -opts.tol_neutral;

    let mut char_unstable = false;
    let mut char_stable = false;
    let mut r_zero = None;

    if let Some(lo) = &lower {
        let gap = dominates(
            &grid,
            &zero,
            |s, y, e| lo.value(s, y, e),
            |s, y, e| ing.beta(s, y, e),
        );
        let valid = gap <= 1e-12;
        let data = TrivialData::new(grid, lo.clone(), ing)?;
        let r = net_reproduction(&zero, lo, ing)?.value();
        r_zero = Some(r);
        conds.push(ConditionOutcome::new(
            "beta^l <= beta(., ., 0)",
            valid,
            Some(gap),
            format!("max (beta^l - beta) = {gap:.6e}"),
        ));
        conds.push(ConditionOutcome::new(
            "R_l(0) > 1",
            r > 1.0,
            Some(r),
            format!("net reproduction of the lower bound at extinction {r:.6}"),
        ));
        if valid && r > 1.0 {
            let kf = |x: f64| char_trivial(Complex64::new(x, 0.0), &data).re;
            if let Some(hi) = upper_bracket(kf, scale) {
                real_root = find_real_root(kf, 0.0, hi)?;
            }
            if let Some(root) = real_root {
                char_roots.push(Complex64::new(root, 0.0));
                char_unstable = root > opts.tol_spectral;
            }
        }
    }
    if let Some(up) = &upper {
        let gap = dominates(
            &grid,
            &zero,
            |s, y, e| ing.beta(s, y, e),
            |s, y, e| up.value(s, y, e),
        );
        let valid = gap <= 1e-12;
        let data = TrivialData::new(grid, up.clone(), ing)?;
        let r = net_reproduction(&zero, up, ing)?.value();
        conds.push(ConditionOutcome::new(
            "beta(., ., 0) <= beta^u",
            valid,
            Some(gap),
            format!("max (beta - beta^u) = {gap:.6e}"),
        ));
        conds.push(ConditionOutcome::new(
            "R_u(0) < 1",
            r < 1.0,
            Some(r),
            format!("net reproduction of the upper bound at extinction {r:.6}"),
        ));
        if r_zero.is_none() {
            r_zero = Some(r);
        }
        if valid && r < 1.0 {
            let scan = scan_complex(
                |z| Complex64::new(1.0, 0.0) - char_trivial(z, &data),
                window,
                opts.resolution,
            )?;
            let clear = scan.roots.iter().all(|z| z.re < -opts.tol_neutral)
                && scan.count == scan.roots.len() as i64;
            conds.push(ConditionOutcome::new(
                "1 - K^u clear of Re >= 0 in window",
                clear,
                scan.roots.first().map(|z| z.re),
                format!("{} zeros found in the scan window", scan.roots.len()),
            ));
            char_roots.extend(scan.roots);
            char_stable = clear;
        }
    }
    if lower.is_none() && upper.is_none() {
        notes.push("fertility is not separable and no bounds were supplied".into());
    }
    conds.push(ConditionOutcome::new(
        "matrix oracle rightmost > 0",
        oracle_unstable,
        Some(oracle_top.re),
        format!(
            "rightmost eigenvalue of the discretized generator {:.6e}{:+.6e}i",
            oracle_top.re, oracle_top.im
        ),
    ));

    let verdict = if char_unstable && oracle_unstable {
        Verdict::Unstable
    } else if char_stable && oracle_stable {
        notes.push("certified only inside the scan window".into());
        Verdict::Stable
    } else {
        if char_unstable != oracle_unstable || char_stable != oracle_stable {
            notes.push("characteristic function and matrix oracle disagree".into());
        }
        Verdict::Inconclusive
    };
    char_roots.sort_by(|a, b| b.re.total_cmp(&a.re));
    let rightmost = char_roots.first().copied().or(Some(oracle_top));
    Ok(StabilityReport {
        verdict,
        trivial_state: true,
        triggered_conditions: conds,
        char_roots,
        real_root,
        matrix_eigs,
        oracle_rightmost: Some(oracle_top),
        oracle_n: grid.n(),
        rightmost,
        scan_window: window,
        net_reproduction: r_zero,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RateExpr, Var};
    use crate::steady::{solve_fixed_point, FertilityDecomposition, SolverOptions};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    /// gamma = g0, mu = mu0, beta = b1 * b2, w = kappa = 1
    fn constants(g0: f64, mu0: f64, b1: f64, b2: f64, m: f64) -> ModelIngredients {
        ModelIngredients::new(
            RateExpr::constant(g0),
            RateExpr::constant(1.0),
            RateExpr::constant(mu0),
            RateExpr::product(RateExpr::constant(b1), RateExpr::constant(b2)),
            RateExpr::constant(1.0),
            RateExpr::constant(1.0),
            0.5,
            m,
        )
        .unwrap()
    }

    /// `(k / (mu0 + lambda)) (m - g0 (1 - e^{-(mu0 + lambda) m / g0}) / (mu0 + lambda))`
    fn closed_form(k: f64, g0: f64, mu0: f64, m: f64, lambda: Complex64) -> Complex64 {
        let a = mu0 + lambda;
        k / a * (m - g0 * (1.0 - (-a * m / g0).exp()) / a)
    }

    fn s2_like() -> ModelIngredients {
        ModelIngredients::new(
            RateExpr::affine(Var::S, 1.0, -0.3),
            RateExpr::logistic(Var::P, 1.0, 0.5),
            RateExpr::affine(Var::E, 0.4, 0.3),
            RateExpr::product(
                RateExpr::exp_decay(Var::S, 4.0, 3.0),
                RateExpr::logistic(Var::E, 1.0, 0.5),
            ),
            RateExpr::constant(1.0),
            RateExpr::affine(Var::S, 0.5, 1.0),
            0.4,
            1.5,
        )
        .unwrap()
    }

    #[test]
    fn linearization_examples() {
        let ing = constants(1.0, 1.0, 2.0, 1.0, 1.0);
        let g = ing.grid(40).unwrap();
        let p = GridFunction::from_fn(g, |s| s * (1.0 - s)).unwrap();
        let lin = linearize_density(&p, &ing, ing.separable_fertility()).unwrap();
        assert_eq!(lin.rho_star.max_abs(), 0.0);
        assert_eq!(lin.f1.max_abs(), 0.0);

        let lin0 =
            linearize_density(&GridFunction::zeros(g), &ing, ing.separable_fertility()).unwrap();
        let sep = lin0.separable.as_ref().unwrap();
        assert_eq!(sep.f2.max_abs(), 0.0);
        for i in 0..g.len() {
            assert_eq!(sep.f3.get(i), 2.0);
        }

        let mut growth = ing.clone();
        growth.gamma2 = RateExpr::affine(Var::P, 1.0, 1.0);
        let g = growth.grid(200).unwrap();
        let p = GridFunction::from_fn(g, |s| s * (1.0 - s)).unwrap();
        let lin = linearize_density(&p, &growth, None).unwrap();
        for (i, s) in g.nodes().enumerate() {
            assert!((lin.rho_star.get(i) - (1.0 - 2.0 * s)).abs() < 1e-10);
            assert!((lin.rho_identity.get(i) - lin.rho_star.get(i)).abs() < 1e-12);
        }
    }

    #[test]
    fn char_k_matches_closed_form() {
        let (k0, r0, g0, mu0, m) = (1.5, 0.7, 1.2, 0.8, 2.0);
        let ing = ModelIngredients::new(
            RateExpr::constant(g0),
            RateExpr::constant(1.0),
            RateExpr::constant(mu0),
            RateExpr::constant(0.0),
            RateExpr::constant(1.0),
            RateExpr::constant(k0),
            0.5,
            m,
        )
        .unwrap();
        let g = ing.grid(200).unwrap();
        let mut lin = linearize_density(&GridFunction::zeros(g), &ing, None).unwrap();
        // impose rho_* = -r0
        lin.rho_star = GridFunction::constant(g, -r0);
        lin.f1 = GridFunction::constant(g, r0 / g0);
        for lam in [c(0.0, 0.0), c(0.5, 0.0), c(2.0, 0.0)] {
            let exact = closed_form(k0 * r0, g0, mu0, m, lam);
            let got = char_k(lam, &lin);
            assert!((got - exact).norm() < 1e-4 * exact.norm(), "{got} {exact}");
        }
        // K -> 0 as Re lambda grows
        assert!(char_k(c(1e4, 0.0), &lin).norm() < 1e-3);
        // rho = 0 gives K = 0
        let lin0 = linearize_density(&GridFunction::zeros(g), &ing, None).unwrap();
        assert_eq!(char_k(c(0.3, 1.0), &lin0), c(0.0, 0.0));
    }

    #[test]
    fn det_is_one_without_kernels_and_reduces_at_zero() {
        let ing = constants(1.0, 1.0, 1.5, 1.0, 1.0);
        let g = ing.grid(100).unwrap();
        let mut lin =
            linearize_density(&GridFunction::zeros(g), &ing, ing.separable_fertility()).unwrap();
        let data = TrivialData::new(g, ing.separable_fertility().unwrap(), &ing).unwrap();
        for k in 0..20 {
            let lam = c(-0.5 + 0.2 * k as f64, 3.0 * (k as f64 - 10.0));
            let d = char_det(lam, &lin).unwrap().value;
            let kl = char_trivial(lam, &data);
            assert!((d - (1.0 - kl)).norm() <= 1e-10);
        }
        lin.separable.as_mut().unwrap().f3 = GridFunction::zeros(g);
        let e = char_det(c(0.2, 0.1), &lin).unwrap();
        assert_eq!(e.value, c(1.0, 0.0));
        assert!(e.matrix_a.iter().flatten().all(|v| *v == c(0.0, 0.0)));
    }

    #[test]
    fn det_reduces_to_k_when_only_growth_feedback() {
        let ing = s2_like();
        let g = ing.grid(120).unwrap();
        let ss = solve_fixed_point(
            &FertilityDecomposition::from_model(g, &ing).unwrap(),
            &ing,
            &SolverOptions::default(),
        )
        .unwrap();
        let mut lin = linearize(&ss, &ing).unwrap();
        let sep = lin.separable.as_mut().unwrap();
        sep.f2 = GridFunction::zeros(g);
        sep.f3 = GridFunction::zeros(g);
        for lam in [c(0.0, 0.0), c(0.4, 2.0), c(-0.2, -5.0)] {
            let e = char_det(lam, &lin).unwrap();
            assert!((e.matrix_a[0][0] - char_k(lam, &lin)).norm() < 1e-15);
            assert!((e.value - (1.0 - e.matrix_a[0][0])).norm() < 1e-14);
        }
    }

    #[test]
    fn example_reduction_to_single_integral() {
        // kappa, w, beta2 constant
        let ing = ModelIngredients::new(
            RateExpr::affine(Var::S, 1.0, 0.2),
            RateExpr::logistic(Var::P, 1.0, 0.5),
            RateExpr::affine(Var::E, 0.6, 0.2),
            RateExpr::product(
                RateExpr::exp_decay(Var::S, 3.0, 1.0),
                RateExpr::constant(0.9),
            ),
            RateExpr::constant(0.7),
            RateExpr::constant(1.3),
            0.5,
            2.0,
        )
        .unwrap();
        let g = ing.grid(100).unwrap();
        let ss = solve_fixed_point(
            &FertilityDecomposition::from_model(g, &ing).unwrap(),
            &ing,
            &SolverOptions::default(),
        )
        .unwrap();
        let lin = linearize(&ss, &ing).unwrap();
        let sep = lin.separable.as_ref().unwrap();
        let combo = GridFunction::new(
            g,
            (0..g.len())
                .map(|i| {
                    1.3 * lin.f1.get(i) + 0.7 * sep.f2.get(i) + sep.beta2.get(0) * sep.f3.get(i)
                })
                .collect(),
        )
        .unwrap();
        let ones = GridFunction::constant(g, 1.0);
        for lam in [c(0.0, 0.0), c(0.3, 0.0), c(-0.1, 4.0), c(1.0, -10.0)] {
            let d = char_det(lam, &lin).unwrap().value;
            let single = 1.0 - lin.double_integral(&ones, &combo, lam);
            assert!((d - single).norm() <= 1e-10, "{d} {single}");
        }
    }

    #[test]
    fn conjugate_symmetry() {
        let ing = s2_like();
        let g = ing.grid(80).unwrap();
        let ss = solve_fixed_point(
            &FertilityDecomposition::from_model(g, &ing).unwrap(),
            &ing,
            &SolverOptions::default(),
        )
        .unwrap();
        let lin = linearize(&ss, &ing).unwrap();
        for lam in [c(0.3, 1.7), c(-0.4, 12.0)] {
            let a = char_det(lam, &lin).unwrap().value;
            let b = char_det(lam.conj(), &lin).unwrap().value;
            assert!((a - b.conj()).norm() < 1e-13);
            assert!((char_k(lam, &lin) - char_k(lam.conj(), &lin).conj()).norm() < 1e-14);
        }
        // continuity
        let z = c(0.2, 0.5);
        let d0 = char_det(z, &lin).unwrap().value;
        let d1 = char_det(z + c(1e-7, 1e-7), &lin).unwrap().value;
        assert!((d0 - d1).norm() < 1e-5);
    }

    #[test]
    fn net_reproduction_examples() {
        let (g0, mu0, b1, b2, m) = (1.3, 0.9, 2.0, 0.75, 1.5);
        let ing = constants(g0, mu0, b1, b2, m);
        let g = ing.grid(400).unwrap();
        let fert = ing.separable_fertility().unwrap();
        let r = net_reproduction(&GridFunction::zeros(g), &fert, &ing).unwrap();
        let exact = b1 * b2 / mu0 * (m - g0 / mu0 * (1.0 - (-mu0 * m / g0).exp()));
        assert!((r.value() - exact).abs() < 1e-5 * exact);
        assert!(r.relative_gap() < 1e-12);

        let zero_b1 =
            SeparableFertility::new(RateExpr::constant(0.0), RateExpr::constant(1.0)).unwrap();
        assert_eq!(
            net_reproduction(&GridFunction::zeros(g), &zero_b1, &ing)
                .unwrap()
                .value(),
            0.0
        );

        // variable rates at a non-zero density: the two forms agree
        let ing = s2_like();
        let g = ing.grid(100).unwrap();
        let p = GridFunction::from_fn(g, |s| s * (1.5 - s)).unwrap();
        let r = net_reproduction(&p, &ing.separable_fertility().unwrap(), &ing).unwrap();
        assert!(r.relative_gap() < 1e-8, "{}", r.relative_gap());
        let data = TrivialData::new(g, ing.separable_fertility().unwrap(), &ing).unwrap();
        let r0 = net_reproduction(
            &GridFunction::zeros(g),
            &ing.separable_fertility().unwrap(),
            &ing,
        )
        .unwrap();
        assert!((char_trivial(c(0.0, 0.0), &data).re - r0.first).abs() <= 1e-12 * r0.first);
    }

    #[test]
    fn real_root_examples() {
        assert!(matches!(
            find_real_root(|_| 0.0, 1.0, 0.0),
            Err(StabilityError::InvalidBracket { .. })
        ));
        assert_eq!(find_real_root(|_| 0.0, 0.0, 1.0).unwrap(), None);

        // R(0) = 2 with unit rates
        let (g0, mu0, m) = (1.0f64, 1.0, 1.0);
        let shape = (m - g0 / mu0 * (1.0 - (-mu0 * m / g0).exp())) / mu0;
        let k = 2.0 / shape;
        let kf = |x: f64| closed_form(k, g0, mu0, m, c(x, 0.0)).re;
        let hi = upper_bracket(kf, 1.0).unwrap();
        let root = find_real_root(kf, 0.0, hi).unwrap().unwrap();
        assert!(root > 0.0 && (kf(root) - 1.0).abs() <= 1e-9);

        let k = 0.5 / shape;
        let kf = |x: f64| closed_form(k, g0, mu0, m, c(x, 0.0)).re;
        assert_eq!(find_real_root(kf, 0.0, 100.0).unwrap(), None);
    }

    #[test]
    fn scan_examples() {
        let w = ScanWindow {
            re_min: -1.0,
            re_max: 5.0,
            im_max: 50.0,
        };
        let r = scan_complex(|_| c(1.0, 0.0), w, ScanResolution::default()).unwrap();
        assert!(r.roots.is_empty() && r.count == 0);

        let r = scan_complex(
            |z| (z - c(1.0, 2.0)) * (z - c(1.0, -2.0)) * (z - c(3.0, 0.0)),
            w,
            ScanResolution::default(),
        )
        .unwrap();
        assert_eq!(r.roots.len(), 3);
        assert!((r.roots[0] - c(3.0, 0.0)).norm() < 1e-10);
        assert!((r.roots[1] - r.roots[2].conj()).norm() < 1e-10);

        // trivial-state constants with R(0) > 1
        let (g0, mu0, m) = (1.0f64, 1.0, 1.0);
        let ing = constants(g0, mu0, 1.5 * std::f64::consts::E, 1.0, m);
        let g = ing.grid(100).unwrap();
        let data = TrivialData::new(g, ing.separable_fertility().unwrap(), &ing).unwrap();
        let kf = |x: f64| char_trivial(c(x, 0.0), &data).re;
        let root = find_real_root(kf, 0.0, upper_bracket(kf, 1.0).unwrap())
            .unwrap()
            .unwrap();
        let scan = scan_complex(
            |z| 1.0 - char_trivial(z, &data),
            ScanWindow::from_scale(4.0),
            ScanResolution::default(),
        )
        .unwrap();
        assert!(
            scan.roots.iter().any(|z| (z - c(root, 0.0)).norm() < 1e-6),
            "{:?}",
            scan.roots
        );
        for z in &scan.roots {
            if z.im.abs() > 1e-9 {
                assert!(scan.roots.iter().any(|u| (u - z.conj()).norm() < 1e-6));
            }
        }
    }

    #[test]
    fn eigenvalue_examples() {
        let d = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0, -3.0]));
        assert!((rightmost_eigenvalue(&d).unwrap() - c(-1.0, 0.0)).norm() < 1e-12);
        let r = DMatrix::from_row_slice(2, 2, &[-1.0, -5.0, 5.0, -1.0]);
        let eig = spectrum(&r).unwrap();
        assert!((eig[0].re + 1.0).abs() < 1e-12 && (eig[0].im.abs() - 5.0).abs() < 1e-12);
        let near = rightmost_eigenvalue_near(&r, c(-1.0, 4.0)).unwrap();
        assert!((near - c(-1.0, 5.0)).norm() < 1e-9);
        assert!(matches!(
            rightmost_eigenvalue(&DMatrix::zeros(2, 3)),
            Err(StabilityError::BadMatrix)
        ));
    }

    #[test]
    fn decay_dominated_spectrum() {
        let mu0 = 0.8;
        let ing = ModelIngredients::new(
            RateExpr::constant(1.0),
            RateExpr::constant(1.0),
            RateExpr::constant(mu0),
            RateExpr::constant(0.0),
            RateExpr::constant(1.0),
            RateExpr::constant(1.0),
            0.5,
            1.0,
        )
        .unwrap();
        let g = ing.grid(60).unwrap();
        let lin = linearize_density(&GridFunction::zeros(g), &ing, None).unwrap();
        let m = linearized_matrix(&lin, &ing, OperatorForm::Full).unwrap();
        for z in spectrum(&m).unwrap() {
            assert!(z.re <= -mu0 + 1e-9, "{z}");
        }
    }

    #[test]
    fn modified_operator_matches_det_roots() {
        // alpha = 1 makes the full and modified environment terms coincide
        let mut ing = s2_like();
        ing.alpha = 1.0;
        let g = ing.grid(200).unwrap();
        let ss = solve_fixed_point(
            &FertilityDecomposition::from_model(g, &ing).unwrap(),
            &ing,
            &SolverOptions::default(),
        )
        .unwrap();
        let lin = linearize(&ss, &ing).unwrap();
        let full =
            spectrum(&linearized_matrix(&lin, &ing, OperatorForm::Full).unwrap()).unwrap()[0];
        let modified =
            spectrum(&linearized_matrix(&lin, &ing, OperatorForm::Modified).unwrap()).unwrap()[0];
        assert!(
            (full - modified).norm() < 1e-8 * full.norm().max(1.0),
            "{full} {modified}"
        );
        // the rightmost discrete eigenvalue is close to a zero of det(I - A)
        let d = |z: Complex64| char_det(z, &lin).unwrap().value;
        let polished = secant(&d, full, 1e-4).unwrap();
        assert!(
            (polished - full).norm() < 0.05 * full.norm().max(0.1),
            "{polished} {full}"
        );
    }

    #[test]
    fn trivial_classification() {
        let e = std::f64::consts::E;
        for (r0, expect) in [(1.5, Verdict::Unstable), (0.5, Verdict::Stable)] {
            let ing = constants(1.0, 1.0, r0 * e, 1.0, 1.0);
            let g = ing.grid(100).unwrap();
            let rep = classify_trivial(g, &ing, &ClassifyOptions::default()).unwrap();
            assert_eq!(rep.verdict, expect, "{rep:?}");
            assert!((rep.net_reproduction.unwrap() - r0).abs() < 1e-4);
        }
    }

    #[test]
    fn neutral_state_is_inconclusive() {
        // R = 1 exactly at the positive state of an E-independent model
        let (g0, mu0, m) = (1.0f64, 1.0, 1.0);
        let e = std::f64::consts::E;
        let ing = constants(g0, mu0, e, 1.0, m);
        let g = ing.grid(100).unwrap();
        let p = GridFunction::from_fn(g, |s| 1.0 - (-s).exp()).unwrap();
        let ss = SteadyState::from_density(
            p,
            &ing,
            FertilityDecomposition::from_model(g, &ing).unwrap(),
        )
        .unwrap();
        let rep = classify(&ss, &ing, &ClassifyOptions::default()).unwrap();
        assert_eq!(rep.verdict, Verdict::Inconclusive);
        assert!(
            !rep.triggered_conditions
                .iter()
                .find(|c| c.name == "K(0) > 1")
                .unwrap()
                .held
        );
    }
}
