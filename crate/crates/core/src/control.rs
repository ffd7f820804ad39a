//! Explicit steering controls built from shear and cellular flows.
//!
//! Every stage prescribes a velocity `u = f(t) u₀(x)` where `u₀` is a steady
//! Euler solution with `−Δω₀ = ω₀`. The vorticity equation then forces
//!
//! ```text
//! g ∂₁θ = F(t) ω₀,   F = f′ + ν₁ f,
//! θ = (F/g) (Θ(x) + x₁ Λ₀(x₂)),
//! ```
//!
//! and the temperature equation fixes the control `h`. The periodic part of
//! `h` enters the spectral solver; the part multiplying `x₁` is kept as a
//! stored profile and the solver receives `Λ = (F/g) Λ₀` through
//! [`Forcing::linear_profile`].

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{drift, nonlinear_b, product, ControlScheme, Forcing, Integrator, IntegratorOptions};
use crate::error::{Error, Result};
use crate::lagrangian::{step_extended_stages, torus_distance, ExtendedState};
use crate::mat2;
use crate::spectral::{
    biot_savart, weighted_norm, PhysicalParams, ScalarField, SpectralGrid, SpectralState, VelocityEvaluator,
};

/// `∫₀¹ exp(−1/(s(1−s))) ds`.
pub fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| adaptive_simpson(&unit_bump, 0.0, 1.0, 1e-16, 60))
}

fn unit_bump(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    // a few starting panels so the flat ends cannot fool the first test
    let panels = 16;
    let w = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * w, a + (i + 1) as f64 * w);
            let xm = 0.5 * (x0 + x1);
            let (f0, f1, f2) = (f(x0), f(xm), f(x1));
            rec(f, x0, x1, f0, f1, f2, w / 6.0 * (f0 + 4.0 * f1 + f2), tol / panels as f64, depth)
        })
        .sum()
}

/// `f(t) = c·exp(−1/(s(1−s)))`, `s = (t − t₀)/(t₁ − t₀)`, with `∫f = integral`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub t0: f64,
    pub t1: f64,
    pub integral: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn new(t0: f64, t1: f64, integral: f64) -> Self {
        assert!(t1 > t0);
        let amplitude = integral / ((t1 - t0) * bump_mass());
        Self { t0, t1, integral, amplitude }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
    }

    /// `(f, f′, f″)` at `t`; zero outside the open interval.
    pub fn eval(&self, t: f64) -> [f64; 3] {
        let len = self.t1 - self.t0;
        let s = (t - self.t0) / len;
        if s <= 0.0 || s >= 1.0 || self.amplitude == 0.0 {
            return [0.0; 3];
        }
        let q = s * (1.0 - s);
        let phi = (-1.0 / q).exp();
        if phi == 0.0 {
            return [0.0; 3];
        }
        let dq = 1.0 - 2.0 * s;
        let p1 = dq / (q * q);
        let p2 = -2.0 / (q * q) - 2.0 * dq * dq / (q * q * q);
        let c = self.amplitude;
        [c * phi, c * p1 * phi / len, c * (p2 + p1 * p1) * phi / (len * len)]
    }
}

/// Velocity profile of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// `(cos(y₂ − b), 0)`
    ShearX1,
    /// `(0, cos(y₁ − a))`
    ShearX2,
    /// `(−sin(y₂ − b), sin(y₁ − a))`, rotation about `(a, b)`
    Cellular,
    /// `(sin(y₂ − b), sin(y₁ − a))`, saddle at `(a, b)`
    CellularMatrix,
}

impl ProfileKind {
    pub fn is_shear(self) -> bool {
        matches!(self, ProfileKind::ShearX1 | ProfileKind::ShearX2)
    }
}

/// The analytic ingredients of a profile at a point.
#[derive(Clone, Copy, Debug, Default)]
struct Pointwise {
    u: [f64; 2],
    du: mat2::Mat2,
    omega: f64,
    theta: f64,
    lambda: f64,
    /// Periodic control: `h = (F′ + ν₂F)/g · h_diff + fF/g · h_adv`.
    h_diff: f64,
    h_adv: f64,
    /// Coefficient of `x₁` in the control, same split.
    l_diff: f64,
    l_adv: f64,
}

fn pointwise(kind: ProfileKind, phase: [f64; 2], y: [f64; 2]) -> Pointwise {
    let (s1, c1) = (y[0] - phase[0]).sin_cos();
    let (s2, c2) = (y[1] - phase[1]).sin_cos();
    match kind {
        ProfileKind::ShearX1 => Pointwise {
            u: [c2, 0.0],
            du: [[0.0, -s2], [0.0, 0.0]],
            omega: s2,
            theta: 0.0,
            lambda: s2,
            h_diff: 0.0,
            h_adv: c2 * s2,
            l_diff: s2,
            l_adv: 0.0,
        },
        ProfileKind::ShearX2 => Pointwise {
            u: [0.0, c1],
            du: [[0.0, 0.0], [-s1, 0.0]],
            omega: -s1,
            theta: c1,
            lambda: 0.0,
            h_diff: c1,
            h_adv: 0.0,
            l_diff: 0.0,
            l_adv: 0.0,
        },
        ProfileKind::Cellular => Pointwise {
            u: [-s2, s1],
            du: [[0.0, -c2], [c1, 0.0]],
            omega: c1 + c2,
            theta: s1,
            lambda: c2,
            h_diff: s1,
            h_adv: -s2 * c1 - s2 * c2,
            l_diff: c2,
            l_adv: -s1 * s2,
        },
        ProfileKind::CellularMatrix => Pointwise {
            u: [s2, s1],
            du: [[0.0, c2], [c1, 0.0]],
            omega: c1 - c2,
            theta: s1,
            lambda: -c2,
            h_diff: s1,
            h_adv: s2 * c1 - s2 * c2,
            l_diff: -c2,
            l_adv: s1 * s2,
        },
    }
}

/// One stage of a plan.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlStage {
    pub kind: ProfileKind,
    pub bump: Bump,
    /// Phase offsets `(a, b)`.
    pub phase: [f64; 2],
}

impl ControlStage {
    pub fn interval(&self) -> (f64, f64) {
        (self.bump.t0, self.bump.t1)
    }

    pub fn contains(&self, t: f64) -> bool {
        t > self.bump.t0 && t < self.bump.t1
    }

    /// Closed-form velocity at `(y, t)`.
    pub fn velocity(&self, y: [f64; 2], t: f64) -> [f64; 2] {
        let f = self.bump.eval(t)[0];
        let u = pointwise(self.kind, self.phase, y).u;
        [f * u[0], f * u[1]]
    }

    /// Closed-form `∇u` (`[i][k] = ∂_k u_i`) at `(y, t)`.
    pub fn velocity_gradient(&self, y: [f64; 2], t: f64) -> mat2::Mat2 {
        let f = self.bump.eval(t)[0];
        mat2::scale(&pointwise(self.kind, self.phase, y).du, f)
    }

    /// Closed-form temperature on the covering space, `x₁` unreduced.
    pub fn temperature(&self, y: [f64; 2], t: f64, params: &PhysicalParams) -> f64 {
        let [f, df, _] = self.bump.eval(t);
        let p = pointwise(self.kind, self.phase, y);
        (df + params.nu1 * f) / params.g * (p.theta + y[0] * p.lambda)
    }

    /// Full control `h(y, t)` on the covering space.
    pub fn control(&self, y: [f64; 2], t: f64, params: &PhysicalParams) -> f64 {
        let [f, df, d2f] = self.bump.eval(t);
        let big_f = df + params.nu1 * f;
        let dbig_f = d2f + params.nu1 * df;
        let a = (dbig_f + params.nu2 * big_f) / params.g;
        let b = f * big_f / params.g;
        let p = pointwise(self.kind, self.phase, y);
        a * p.h_diff + b * p.h_adv + y[0] * (a * p.l_diff + b * p.l_adv)
    }
}

/// Where the controlled particle starts and what it must reach.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct PlanTargets {
    pub position: Option<[f64; 2]>,
    pub direction: Option<[f64; 2]>,
    /// Required `|A₁|`.
    pub matrix_norm: Option<f64>,
}

/// Sequence of explicit control stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPlan {
    pub stages: Vec<ControlStage>,
    pub horizon: f64,
    pub params: PhysicalParams,
    pub start_x: [f64; 2],
    pub start_v: [f64; 2],
    pub targets: PlanTargets,
}

/// Representative of `a` in `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI {
        PI
    } else {
        r
    }
}

/// Signed rotation taking `from` to `to`, in `(−π, π]`.
pub fn signed_angle(from: [f64; 2], to: [f64; 2]) -> f64 {
    let cross = from[0] * to[1] - from[1] * to[0];
    let dot = from[0] * to[0] + from[1] * to[1];
    cross.atan2(dot)
}

fn unit(v: [f64; 2]) -> Result<[f64; 2]> {
    let r = v[0].hypot(v[1]);
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::Config(format!("direction ({}, {}) cannot be normalized", v[0], v[1])));
    }
    Ok([v[0] / r, v[1] / r])
}

/// Two shear stages on `(0, ¼)` and `(¼, ½)` moving `x0` to `x1`.
pub fn build_position_plan(x0: [f64; 2], x1: [f64; 2], params: &PhysicalParams) -> ControlPlan {
    let da = wrap_angle(x1[0] - x0[0]);
    let db = wrap_angle(x1[1] - x0[1]);
    let a1 = x0[0] + da;
    let stages = vec![
        ControlStage { kind: ProfileKind::ShearX1, bump: Bump::new(0.0, 0.25, da), phase: [x0[0], x0[1]] },
        ControlStage { kind: ProfileKind::ShearX2, bump: Bump::new(0.25, 0.5, db), phase: [a1, x0[1]] },
    ];
    ControlPlan {
        stages,
        horizon: 1.0,
        params: *params,
        start_x: x0,
        start_v: [1.0, 0.0],
        targets: PlanTargets { position: Some(x1), ..Default::default() },
    }
}

/// Cellular stage on `(½, 1)` rotating `v_mid` into `v_target` at `at`.
pub fn build_direction_plan(
    v_mid: [f64; 2],
    v_target: [f64; 2],
    at: [f64; 2],
    params: &PhysicalParams,
) -> Result<ControlPlan> {
    let v_mid = unit(v_mid)?;
    let v_target = unit(v_target)?;
    let angle = signed_angle(v_mid, v_target);
    Ok(ControlPlan {
        stages: vec![ControlStage { kind: ProfileKind::Cellular, bump: Bump::new(0.5, 1.0, angle), phase: at }],
        horizon: 1.0,
        params: *params,
        start_x: at,
        start_v: v_mid,
        targets: PlanTargets { position: Some(at), direction: Some(v_target), matrix_norm: None },
    })
}

/// Saddle stage on `(0, 1)` with `∫f = log M`, stretching `A` to norm `M`.
pub fn build_matrix_plan(m: f64, at: [f64; 2], params: &PhysicalParams) -> Result<ControlPlan> {
    if !(m >= 1.0 && m.is_finite()) {
        return Err(Error::Config(format!("matrix target M = {m} must be at least 1")));
    }
    Ok(ControlPlan {
        stages: vec![ControlStage { kind: ProfileKind::CellularMatrix, bump: Bump::new(0.0, 1.0, m.ln()), phase: at }],
        horizon: 1.0,
        params: *params,
        start_x: at,
        start_v: [1.0, 0.0],
        targets: PlanTargets { position: Some(at), direction: None, matrix_norm: Some(m) },
    })
}

/// Position stages followed by the rotation stage at the target.
pub fn build_steering_plan(
    x0: [f64; 2],
    x1: [f64; 2],
    v0: [f64; 2],
    v1: [f64; 2],
    params: &PhysicalParams,
) -> Result<ControlPlan> {
    let mut plan = build_position_plan(x0, x1, params);
    plan.start_v = unit(v0)?;
    plan.then(build_direction_plan(v0, v1, x1, params)?)
}

impl ControlPlan {
    /// Append the stages of `next`; its stages must start after ours end.
    pub fn then(mut self, next: ControlPlan) -> Result<ControlPlan> {
        let end = self.stages.iter().map(|s| s.bump.t1).fold(0.0, f64::max);
        if next.stages.iter().any(|s| s.bump.t0 < end) {
            return Err(Error::Config("control stages overlap".into()));
        }
        self.stages.extend(next.stages);
        self.horizon = self.horizon.max(next.horizon);
        self.targets = PlanTargets {
            position: next.targets.position.or(self.targets.position),
            direction: next.targets.direction.or(self.targets.direction),
            matrix_norm: next.targets.matrix_norm.or(self.targets.matrix_norm),
        };
        Ok(self)
    }

    pub fn active(&self, t: f64) -> Option<&ControlStage> {
        self.stages.iter().find(|s| s.contains(t))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<ControlPlan> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Spectral images of one stage's profiles on a grid.
#[derive(Clone, Debug)]
struct StageFields {
    omega: ScalarField,
    theta: ScalarField,
    lambda: ScalarField,
    h_diff: ScalarField,
    h_adv: ScalarField,
    l_diff: ScalarField,
    l_adv: ScalarField,
}

fn sample(grid: &SpectralGrid, f: impl Fn([f64; 2]) -> f64) -> ScalarField {
    let n = grid.n();
    let mut vals = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            vals[i * n + j] = f([grid.coord(i), grid.coord(j)]);
        }
    }
    // the profiles are trigonometric polynomials; drop transform roundoff
    let mut f = grid.from_physical(&vals);
    let tol = 1e-13 * f.coeffs().iter().fold(0.0f64, |m, z| m.max(z.norm()));
    for z in f.coeffs_mut() {
        if z.norm() <= tol {
            *z = Default::default();
        }
    }
    f
}

impl StageFields {
    fn new(grid: &SpectralGrid, stage: &ControlStage) -> Self {
        let p = |y| pointwise(stage.kind, stage.phase, y);
        Self {
            omega: sample(grid, |y| p(y).omega),
            theta: sample(grid, |y| p(y).theta),
            lambda: sample(grid, |y| p(y).lambda),
            h_diff: sample(grid, |y| p(y).h_diff),
            h_adv: sample(grid, |y| p(y).h_adv),
            l_diff: sample(grid, |y| p(y).l_diff),
            l_adv: sample(grid, |y| p(y).l_adv),
        }
    }
}

/// Time-dependent coefficients `(f, f′, F/g, F′/g, (F′+ν₂F)/g, fF/g)`.
struct Coefs {
    f: f64,
    df: f64,
    big: f64,
    dbig: f64,
    diff: f64,
    adv: f64,
}

fn coefs(stage: &ControlStage, t: f64, params: &PhysicalParams) -> Coefs {
    let [f, df, d2f] = stage.bump.eval(t);
    let big = (df + params.nu1 * f) / params.g;
    let dbig = (d2f + params.nu1 * df) / params.g;
    Coefs { f, df, big, dbig, diff: dbig + params.nu2 * big, adv: f * big }
}

/// A plan discretized on a grid; implements [`Forcing`].
#[derive(Clone, Debug)]
pub struct PlanForcing {
    plan: ControlPlan,
    fields: Vec<StageFields>,
    n: usize,
}

impl PlanForcing {
    pub fn new(plan: &ControlPlan, grid: &SpectralGrid) -> Self {
        let fields = plan.stages.iter().map(|s| StageFields::new(grid, s)).collect();
        Self { plan: plan.clone(), fields, n: grid.n() }
    }

    fn active(&self, t: f64) -> Option<(&ControlStage, &StageFields)> {
        self.plan.stages.iter().zip(&self.fields).find(|(s, _)| s.contains(t))
    }

    /// Closed-form periodic state `(ω^h, θ^h − x₁Λ)` at `t`.
    pub fn closed_form_state(&self, t: f64) -> SpectralState {
        match self.active(t) {
            Some((s, fl)) => {
                let c = coefs(s, t, &self.plan.params);
                SpectralState::new(fl.omega.scale(c.f), fl.theta.scale(c.big))
            }
            None => SpectralState::zeros(self.n),
        }
    }

    /// Time derivative of [`Self::closed_form_state`].
    pub fn closed_form_rate(&self, t: f64) -> SpectralState {
        match self.active(t) {
            Some((s, fl)) => {
                let c = coefs(s, t, &self.plan.params);
                SpectralState::new(fl.omega.scale(c.df), fl.theta.scale(c.dbig))
            }
            None => SpectralState::zeros(self.n),
        }
    }

    /// Coefficient of `x₁` in the control at `t`.
    pub fn linear_control(&self, t: f64) -> ScalarField {
        match self.active(t) {
            Some((s, fl)) => {
                let c = coefs(s, t, &self.plan.params);
                let mut h = fl.l_diff.scale(c.diff);
                h.axpy(c.adv, &fl.l_adv);
                h
            }
            None => ScalarField::zeros(self.n),
        }
    }
}

impl Forcing for PlanForcing {
    fn temperature_forcing(&self, t: f64) -> ScalarField {
        match self.active(t) {
            Some((s, fl)) => {
                let c = coefs(s, t, &self.plan.params);
                let mut h = fl.h_diff.scale(c.diff);
                h.axpy(c.adv, &fl.h_adv);
                h
            }
            None => ScalarField::zeros(self.n),
        }
    }

    fn linear_profile(&self, t: f64) -> Option<ScalarField> {
        let (s, fl) = self.active(t)?;
        if fl.lambda.is_zero() {
            return None;
        }
        Some(fl.lambda.scale(coefs(s, t, &self.plan.params).big))
    }
}

/// Residual of the closed form substituted into the controlled system.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SubstitutionResidual {
    /// `‖∂ₜU^h − drift − control‖_Ĥ`, periodic part.
    pub periodic: f64,
    /// `L²` norm of the residual of the `x₁`-coefficient equation.
    pub linear: f64,
    /// `‖B(U^h, U^h)_ω‖` (zero for steady Euler profiles).
    pub self_advection: f64,
}

/// Substitute the closed form at time `t` into the spectral operators.
pub fn substitution_residual(
    forcing: &PlanForcing,
    grid: &SpectralGrid,
    t: f64,
) -> SubstitutionResidual {
    let params = &forcing.plan.params;
    let u = forcing.closed_form_state(t);
    let mut r = forcing.closed_form_rate(t);
    r.axpy(-1.0, &drift(grid, &u, params));
    r.theta.axpy(-1.0, &forcing.temperature_forcing(t));
    let b = nonlinear_b(grid, &u, &u);
    let mut lin_res = ScalarField::zeros(grid.n());
    if let Some(lam) = forcing.linear_profile(t) {
        r.omega.axpy(-params.g, &lam);
        let (u1, u2) = biot_savart(&u.omega).expect("closed-form vorticity is mean free");
        r.theta.axpy(1.0, &product(grid, &u1, &lam));
        // x₁ (∂ₜΛ − ν₂ΔΛ + u₂∂₂Λ − h_lin); ∂₁Λ = 0 for every profile
        if let Some((s, fl)) = forcing.active(t) {
            let c = coefs(s, t, params);
            lin_res = fl.lambda.scale(c.dbig);
            lin_res.axpy(-params.nu2, &lam.laplacian());
            lin_res.axpy(1.0, &product(grid, &u2, &lam.d2()));
            lin_res.axpy(-1.0, &forcing.linear_control(t));
        }
    }
    SubstitutionResidual {
        periodic: weighted_norm(&r, 0, params).sqrt(),
        linear: lin_res.sobolev_norm_sq(0).sqrt(),
        self_advection: b.omega.sobolev_norm_sq(0).sqrt(),
    }
}

/// Numerical settings of [`verify_steering`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringOptions {
    pub n: usize,
    pub dt: f64,
    pub scheme: ControlScheme,
    /// Random substitution times per stage.
    pub checkpoints: usize,
    pub seed: u64,
}

impl Default for SteeringOptions {
    fn default() -> Self {
        Self { n: 16, dt: 1e-4, scheme: ControlScheme::LawsonRk4, checkpoints: 10, seed: 0 }
    }
}

/// Outcome of a steering run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct SteeringReport {
    /// Largest of the position, angle and relative matrix-norm deficits.
    pub endpoint_error: f64,
    pub position_error: f64,
    pub angle_error: f64,
    /// `|A(horizon)|`.
    pub matrix_norm: f64,
    /// `|det A(horizon) − 1|`.
    pub det_error: f64,
    /// Largest substitution residual of the closed form over checkpoints.
    pub pde_residual: f64,
    /// Same for the `x₁`-coefficient equation.
    pub linear_residual: f64,
    /// Largest `‖U_sim − U^h‖_Ĥ` over all steps.
    pub tracking_error: f64,
    /// `‖U(horizon)‖_Ĥ`.
    pub state_return: f64,
    /// Largest `‖B(U^h,U^h)_ω‖` at shear-stage checkpoints.
    pub shear_self_advection: f64,
    /// Largest `|A − Id|` during shear stages.
    pub shear_matrix_deviation: f64,
    /// Largest particle distance from the cell center during cellular stages.
    pub center_drift: f64,
    /// Largest `|k|_∞` carried by the periodic control.
    pub control_support: i64,
    /// `sup |x₁ Λ|` over `x₁ ∈ [0, 2π)`, the part not held by the spectral state.
    pub linear_amplitude: f64,
}

/// Run the controlled system from rest with the plan's control and compare
/// against the closed form.
pub fn verify_steering(plan: &ControlPlan, opts: &SteeringOptions) -> Result<SteeringReport> {
    let grid = SpectralGrid::new(opts.n)?;
    let params = plan.params;
    let integ = Integrator::with_options(grid.clone(), params, opts.dt, IntegratorOptions::default())?;
    let forcing = PlanForcing::new(plan, &grid);
    let mut rep = SteeringReport::default();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (stage, fl) in plan.stages.iter().zip(&forcing.fields) {
        let (t0, t1) = stage.interval();
        for _ in 0..opts.checkpoints {
            let t = rng.gen_range(t0..t1);
            let res = substitution_residual(&forcing, &grid, t);
            rep.pde_residual = rep.pde_residual.max(res.periodic);
            rep.linear_residual = rep.linear_residual.max(res.linear);
            if stage.kind.is_shear() {
                rep.shear_self_advection = rep.shear_self_advection.max(res.self_advection);
            }
            let h = forcing.temperature_forcing(t);
            rep.control_support = rep.control_support.max(h.max_mode());
            if !fl.lambda.is_zero() {
                let lam = fl.lambda.scale(coefs(stage, t, &params).big);
                let sup = grid.to_physical(&lam).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                rep.linear_amplitude = rep.linear_amplitude.max(2.0 * PI * sup);
            }
        }
    }

    let steps = (plan.horizon / opts.dt).round() as u64;
    if ((steps as f64) * opts.dt - plan.horizon).abs() > 1e-9 * plan.horizon.max(1.0) {
        return Err(Error::TimeMisalignment(format!("horizon {} is not a multiple of dt {}", plan.horizon, opts.dt)));
    }
    let mut u = grid.zero_state();
    let mut p = ExtendedState::new(plan.start_x, [1.0, 0.0], plan.start_v);
    // an unfactored A near e^10 loses its contracting direction to roundoff
    p.qr_every = 1;
    for k in 0..steps {
        let t = k as f64 * opts.dt;
        let step = integ.step_controlled(&u, t, &forcing, opts.scheme)?;
        let fields: Vec<VelocityEvaluator> = match &step.stages {
            Some(st) => st.iter().map(|s| VelocityEvaluator::new(&s.omega)).collect(),
            None => vec![VelocityEvaluator::new(&u.omega); 4],
        };
        p = step_extended_stages(&p, [&fields[0], &fields[1], &fields[2], &fields[3]], opts.dt)?;
        u = step.next;
        let t_next = (k + 1) as f64 * opts.dt;
        let err = weighted_norm(&u.sub(&forcing.closed_form_state(t_next)), 0, &params).sqrt();
        rep.tracking_error = rep.tracking_error.max(err);
        let mid = t + 0.5 * opts.dt;
        if let Some(stage) = plan.active(mid) {
            match stage.kind {
                ProfileKind::ShearX1 | ProfileKind::ShearX2 => {
                    let a = p.jac.matrix();
                    let d = mat2::add(&a, &mat2::scale(&mat2::IDENTITY, -1.0));
                    rep.shear_matrix_deviation = rep.shear_matrix_deviation.max(mat2::frobenius_sq(&d).sqrt());
                }
                ProfileKind::Cellular | ProfileKind::CellularMatrix => {
                    rep.center_drift = rep.center_drift.max(torus_distance(p.x, stage.phase));
                }
            }
        }
    }
    rep.state_return = weighted_norm(&u, 0, &params).sqrt();
    rep.matrix_norm = p.jac.log_norm().exp();
    rep.det_error = (p.jac.det() - 1.0).abs();
    if let Some(x) = plan.targets.position {
        rep.position_error = torus_distance(p.x, x);
    }
    if let Some(v) = plan.targets.direction {
        rep.angle_error = signed_angle(p.v, v).abs();
    }
    let mut endpoint = rep.position_error.max(rep.angle_error);
    if let Some(m) = plan.targets.matrix_norm {
        endpoint = endpoint.max((m - rep.matrix_norm).max(0.0) / m);
    }
    rep.endpoint_error = endpoint;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> PhysicalParams {
        PhysicalParams::default()
    }

    fn coarse() -> SteeringOptions {
        SteeringOptions { dt: 5e-4, ..Default::default() }
    }

    #[test]
    fn bump_mass_against_trapezoid() {
        // the trapezoid rule is spectrally accurate for a flat-ended bump
        let m = 20000;
        let trap: f64 = (1..m).map(|i| unit_bump(i as f64 / m as f64)).sum::<f64>() / m as f64;
        assert_abs_diff_eq!(bump_mass(), trap, epsilon = 1e-14);
        let b = Bump::new(0.25, 0.5, 1.3);
        let trap: f64 = (1..m).map(|i| b.eval(0.25 + 0.25 * i as f64 / m as f64)[0]).sum::<f64>() * 0.25 / m as f64;
        assert_abs_diff_eq!(trap, 1.3, epsilon = 1e-12);
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let b = Bump::new(0.5, 1.0, 0.7);
        let h = 1e-6;
        for &t in &[0.55, 0.6, 0.75, 0.9, 0.97] {
            let [_, df, d2f] = b.eval(t);
            let fd1 = (b.eval(t + h)[0] - b.eval(t - h)[0]) / (2.0 * h);
            let fd2 = (b.eval(t + h)[1] - b.eval(t - h)[1]) / (2.0 * h);
            assert!((df - fd1).abs() < 1e-6 * (1.0 + df.abs()), "{t}: {df} {fd1}");
            assert!((d2f - fd2).abs() < 1e-6 * (1.0 + d2f.abs()), "{t}: {d2f} {fd2}");
        }
        assert_eq!(b.eval(0.5), [0.0; 3]);
        assert_eq!(b.eval(1.0), [0.0; 3]);
        assert_eq!(b.eval(0.2), [0.0; 3]);
    }

    #[test]
    fn angles_are_signed_and_wrapped() {
        assert_abs_diff_eq!(signed_angle([1.0, 0.0], [0.0, 1.0]), PI / 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(signed_angle([1.0, 0.0], [0.0, -1.0]), -PI / 2.0, epsilon = 1e-15);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(1.5 * PI), -0.5 * PI, epsilon = 1e-15);
    }

    #[test]
    fn trivial_plans_have_zero_bumps() {
        let p = params();
        let plan = build_position_plan([0.3, 1.0], [0.3, 1.0], &p);
        assert!(plan.stages.iter().all(|s| s.bump.is_zero()));
        for &t in &[0.1, 0.3, 0.7] {
            for &y in &[[0.1, 0.2], [4.0, 5.0]] {
                assert_eq!(plan.stages[0].control(y, t, &p), 0.0);
                assert_eq!(plan.stages[1].control(y, t, &p), 0.0);
            }
        }
        let d = build_direction_plan([0.6, 0.8], [0.6, 0.8], [1.0, 2.0], &p).unwrap();
        assert!(d.stages[0].bump.is_zero());
        let m = build_matrix_plan(1.0, [0.0, 0.0], &p).unwrap();
        assert!(m.stages[0].bump.is_zero());
        assert!(build_matrix_plan(0.5, [0.0, 0.0], &p).is_err());
    }

    #[test]
    fn zero_plan_reports_zero() {
        let p = params();
        let plan = build_position_plan([1.0, 1.0], [1.0, 1.0], &p);
        let r = verify_steering(&plan, &SteeringOptions { dt: 1e-2, ..Default::default() }).unwrap();
        assert_eq!(r.endpoint_error, 0.0);
        assert_eq!(r.pde_residual, 0.0);
        assert_eq!(r.state_return, 0.0);
        assert_eq!(r.tracking_error, 0.0);
    }

    fn rk4_particle(plan: &ControlPlan, x: [f64; 2], t0: f64, t1: f64, steps: usize) -> ([f64; 2], mat2::Mat2) {
        let h = (t1 - t0) / steps as f64;
        let mut x = x;
        let mut a = mat2::IDENTITY;
        let rhs = |t: f64, x: [f64; 2], a: &mat2::Mat2| {
            let s = plan.active(t);
            let u = s.map_or([0.0; 2], |s| s.velocity(x, t));
            let du = s.map_or([[0.0; 2]; 2], |s| s.velocity_gradient(x, t));
            (u, mat2::mul(&du, a))
        };
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            let (k1, m1) = rhs(t, x, &a);
            let x2 = [x[0] + 0.5 * h * k1[0], x[1] + 0.5 * h * k1[1]];
            let (k2, m2) = rhs(t + 0.5 * h, x2, &mat2::add(&a, &mat2::scale(&m1, 0.5 * h)));
            let x3 = [x[0] + 0.5 * h * k2[0], x[1] + 0.5 * h * k2[1]];
            let (k3, m3) = rhs(t + 0.5 * h, x3, &mat2::add(&a, &mat2::scale(&m2, 0.5 * h)));
            let x4 = [x[0] + h * k3[0], x[1] + h * k3[1]];
            let (k4, m4) = rhs(t + h, x4, &mat2::add(&a, &mat2::scale(&m3, h)));
            for i in 0..2 {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let inc = mat2::add(&mat2::add(&m1, &mat2::scale(&mat2::add(&m2, &m3), 2.0)), &m4);
            a = mat2::add(&a, &mat2::scale(&inc, h / 6.0));
        }
        (x, a)
    }

    #[test]
    fn shear_stage_moves_horizontally_without_stretching() {
        let p = params();
        let plan = build_position_plan([0.0, 0.0], [PI, 0.0], &p);
        assert_abs_diff_eq!(plan.stages[0].bump.integral, PI, epsilon = 0.0);
        let (x, a) = rk4_particle(&plan, [0.0, 0.0], 0.0, 0.25, 4000);
        assert_abs_diff_eq!(x[0], PI, epsilon = 1e-10);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-14);
        for t in [0.03, 0.1, 0.2] {
            let g = plan.stages[0].velocity_gradient([1.0, 0.0], t);
            assert_eq!(g, [[0.0, -0.0], [0.0, 0.0]]);
        }
        assert_abs_diff_eq!(mat2::frobenius_sq(&mat2::add(&a, &mat2::scale(&mat2::IDENTITY, -1.0))), 0.0, epsilon = 1e-24);
    }

    #[test]
    fn saddle_stage_matches_matrix_exponential() {
        let p = params();
        let e = std::f64::consts::E;
        let plan = build_matrix_plan(e, [0.4, 2.0], &p).unwrap();
        let (x, a) = rk4_particle(&plan, [0.4, 2.0], 0.0, 1.0, 4000);
        assert_abs_diff_eq!(torus_distance(x, [0.4, 2.0]), 0.0, epsilon = 1e-14);
        // A₁ = exp(log M · [[0,1],[1,0]])
        let want = [[1.0f64.cosh(), 1.0f64.sinh()], [1.0f64.sinh(), 1.0f64.cosh()]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(a[i][j], want[i][j], epsilon = 1e-9);
            }
        }
        assert_abs_diff_eq!(mat2::norm2(&a), e, epsilon = 1e-9);
        assert_abs_diff_eq!(mat2::det(&a), 1.0, epsilon = 1e-9);
    }

    // the closed form solves the controlled equations pointwise; checked by
    // central differences in (t, x) on the covering space
    #[test]
    fn closed_form_solves_the_controlled_equations_pointwise() {
        let p = params();
        let plans = [
            build_position_plan([0.3, -1.0], [2.0, 1.5], &p),
            build_direction_plan([1.0, 0.0], [0.0, 1.0], [0.7, -0.4], &p).unwrap(),
            build_matrix_plan(3.0, [1.1, 0.2], &p).unwrap(),
        ];
        let h = 1e-4;
        for plan in &plans {
            for s in &plan.stages {
                let (t0, t1) = s.interval();
                for &frac in &[0.3, 0.55, 0.8] {
                    let t = t0 + frac * (t1 - t0);
                    for &y in &[[0.4, 1.3], [5.0, -2.2], [-3.0, 0.9]] {
                        let th = |y: [f64; 2], t: f64| s.temperature(y, t, &p);
                        let dt = (th(y, t + h) - th(y, t - h)) / (2.0 * h);
                        let dx = |i: usize| {
                            let mut a = y;
                            let mut b = y;
                            a[i] += h;
                            b[i] -= h;
                            ((th(a, t) - th(b, t)) / (2.0 * h), (th(a, t) - 2.0 * th(y, t) + th(b, t)) / (h * h))
                        };
                        let (g1, l1) = dx(0);
                        let (g2, l2) = dx(1);
                        let u = s.velocity(y, t);
                        let lhs = dt - p.nu2 * (l1 + l2) + u[0] * g1 + u[1] * g2;
                        let hh = s.control(y, t, &p);
                        assert!((lhs - hh).abs() < 1e-4 * (1.0 + hh.abs()), "{:?} t={t} y={y:?}: {lhs} vs {hh}", s.kind);
                        // ω = ∂₁u₂ − ∂₂u₁ and g∂₁θ = ∂ₜω + ν₁ω (steady Euler)
                        let du = s.velocity_gradient(y, t);
                        let omega = du[1][0] - du[0][1];
                        let [f, df, _] = s.bump.eval(t);
                        let domega = if f != 0.0 { omega * df / f } else { 0.0 };
                        assert!((p.g * g1 - domega - p.nu1 * omega).abs() < 1e-4 * (1.0 + omega.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn spectral_substitution_vanishes() {
        let p = params();
        let grid = SpectralGrid::new(16).unwrap();
        let plan = build_steering_plan([0.3, -1.0], [2.0, 1.5], [1.0, 0.0], [-0.2, 0.9], &p).unwrap();
        let plan_m = build_matrix_plan(5.0, [1.1, 0.2], &p).unwrap();
        for plan in [plan, plan_m] {
            let f = PlanForcing::new(&plan, &grid);
            for s in &plan.stages {
                let (t0, t1) = s.interval();
                for k in 1..10 {
                    let t = t0 + (t1 - t0) * k as f64 / 10.0;
                    let r = substitution_residual(&f, &grid, t);
                    assert!(r.periodic < 1e-9 && r.linear < 1e-9, "{:?} {t} {r:?}", s.kind);
                    if s.kind.is_shear() {
                        assert!(r.self_advection < 1e-12);
                    }
                    assert!(f.temperature_forcing(t).max_mode() <= 2);
                }
                // stages begin and end at rest
                assert!(f.closed_form_state(t0).is_zero() && f.closed_form_state(t1).is_zero());
            }
        }
    }

    #[test]
    fn steering_reaches_position_target() {
        let p = params();
        let plan = build_position_plan([0.0, 0.0], [PI, PI / 2.0], &p);
        let r = verify_steering(&plan, &coarse()).unwrap();
        assert!(r.position_error < 1e-6, "{r:?}");
        assert!(r.pde_residual < 1e-8, "{r:?}");
        assert!(r.state_return < 1e-8, "{r:?}");
        assert!(r.shear_matrix_deviation < 1e-8, "{r:?}");
        assert!(r.shear_self_advection < 1e-12, "{r:?}");
        assert!(r.control_support <= 2);
    }

    #[test]
    fn quarter_turn_rotates_direction() {
        let p = params();
        let plan = build_direction_plan([1.0, 0.0], [0.0, 1.0], [1.0, 2.0], &p).unwrap();
        let r = verify_steering(&plan, &coarse()).unwrap();
        assert!(r.angle_error < 1e-6, "{r:?}");
        assert!(r.center_drift < 1e-10, "{r:?}");
        assert!(r.state_return < 1e-8, "{r:?}");
    }

    #[test]
    fn matrix_plan_reaches_norm() {
        let p = params();
        let e = std::f64::consts::E;
        let plan = build_matrix_plan(e, [0.0, 0.0], &p).unwrap();
        let r = verify_steering(&plan, &coarse()).unwrap();
        assert!((r.matrix_norm / e - 1.0).abs() < 1e-6, "{r:?}");
        assert!(r.det_error < 1e-8, "{r:?}");
    }

    #[test]
    fn large_matrix_plan_keeps_det() {
        let plan = build_matrix_plan(10f64.exp(), [0.0, 0.0], &params()).unwrap();
        let r = verify_steering(&plan, &coarse()).unwrap();
        assert!(r.matrix_norm >= 0.99 * 10f64.exp(), "{r:?}");
        assert!(r.det_error < 1e-8, "{r:?}");
    }

    #[test]
    fn plans_round_trip_through_json() {
        let p = params();
        let plan = build_steering_plan([0.1, 0.2], [3.0, 4.0], [1.0, 1.0], [0.0, -1.0], &p).unwrap();
        let back = ControlPlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(plan, back);
        assert_eq!(back.stages.len(), 3);
        assert!(plan.clone().then(plan).is_err());
    }
}
