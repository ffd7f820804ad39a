//! Drift, noise and time stepping for the vorticity–temperature system
//!
//! ```text
//! dω = (ν₁Δω − u·∇ω + g∂₁θ) dt
//! dθ = (ν₂Δθ − u·∇θ) dt + Σ αᵢ eᵢ dWⁱ,   (e₁..e₄) = (cos x₁, sin x₁, cos x₂, sin x₂)
//! ```

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;
use crate::spectral::{
    biot_savart_unchecked, idx, wavenumber, weighted_norm, PhysicalParams, ScalarField, SpectralGrid, SpectralState,
    TWO_PI,
};

/// The forced temperature modes in the order of the amplitudes.
pub const FORCED_MODES: [([i64; 2], u8); 4] = [([1, 0], 0), ([1, 0], 1), ([0, 1], 0), ([0, 1], 1)];

/// Brownian increments of the four driving processes over one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseIncrement {
    pub dw: [f64; 4],
    pub dt: f64,
}

impl NoiseIncrement {
    pub fn zero(dt: f64) -> Self {
        Self { dw: [0.0; 4], dt }
    }

    pub fn draw(stream: &NoiseStream, step: u64, dt: f64) -> Self {
        Self { dw: stream.increments(step, dt), dt }
    }
}

/// `B(U, V) = (u_U·∇ω_V, u_U·∇θ_V)`, dealiased and mean-free.
pub fn nonlinear_b(grid: &SpectralGrid, u: &SpectralState, v: &SpectralState) -> SpectralState {
    b_with_speed(grid, u, v).0
}

#[inline]
fn pack(a: Complex64, b: Complex64) -> Complex64 {
    Complex64::new(a.re - b.im, a.im + b.re)
}

#[inline]
fn times_i(z: Complex64, s: f64) -> Complex64 {
    Complex64::new(-s * z.im, s * z.re)
}

/// `B(U, V)` together with `max |u_U|` over the grid. Inputs are read on the
/// retained modes only, which is what makes the product alias-free.
pub(crate) fn b_with_speed(grid: &SpectralGrid, u: &SpectralState, v: &SpectralState) -> (SpectralState, f64) {
    let n = grid.n();
    if u.omega.is_zero() || v.is_zero() {
        return (SpectralState::zeros(n), if u.omega.is_zero() { 0.0 } else { max_speed(grid, &u.omega) });
    }
    let t = grid.tables();
    let zero = Complex64::new(0.0, 0.0);
    let mut vel = vec![zero; n * n];
    let mut gw = vec![zero; n * n];
    let mut gt = vec![zero; n * n];
    let (wu, wv, tv) = (u.omega.coeffs(), v.omega.coeffs(), v.theta.coeffs());
    for &i in &t.retained {
        let (kx, ky) = (t.kx[i], t.ky[i]);
        let w = wu[i] * t.inv_ksq[i];
        vel[i] = pack(times_i(w, ky), times_i(w, -kx));
        gw[i] = pack(times_i(wv[i], kx), times_i(wv[i], ky));
        gt[i] = pack(times_i(tv[i], kx), times_i(tv[i], ky));
    }
    grid.inverse_transposed(&mut vel);
    grid.inverse_transposed(&mut gw);
    grid.inverse_transposed(&mut gt);
    let mut speed2: f64 = 0.0;
    for i in 0..n * n {
        let (a, b, c) = (vel[i], gw[i], gt[i]);
        gw[i] = Complex64::new(a.re * b.re + a.im * b.im, a.re * c.re + a.im * c.im);
        speed2 = speed2.max(a.re * a.re + a.im * a.im);
    }
    grid.forward_transposed(&mut gw);
    let (mut omega, mut theta) = grid.unpack_pair(&gw);
    // keep structural zeros exact instead of at roundoff level
    if v.omega.is_zero() {
        omega = ScalarField::zeros(n);
    }
    if v.theta.is_zero() {
        theta = ScalarField::zeros(n);
    }
    (SpectralState { omega, theta }, speed2.sqrt())
}

/// `max |u|` over grid points for the velocity induced by `omega`.
pub fn max_speed(grid: &SpectralGrid, omega: &ScalarField) -> f64 {
    let (u1, u2) = biot_savart_unchecked(omega);
    let (p, q) = grid.to_physical_pair(&u1, &u2);
    p.iter().zip(&q).fold(0.0f64, |m, (a, b)| m.max(a * a + b * b)).sqrt()
}

/// Pointwise product of two fields, dealiased.
pub fn product(grid: &SpectralGrid, a: &ScalarField, b: &ScalarField) -> ScalarField {
    let (pa, pb) = grid.to_physical_pair(a, b);
    let prod: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
    grid.from_physical(&prod)
}

/// `AU = (−ν₁Δω, −ν₂Δθ)`.
pub fn linear_a(u: &SpectralState, params: &PhysicalParams) -> SpectralState {
    SpectralState { omega: u.omega.laplacian().scale(-params.nu1), theta: u.theta.laplacian().scale(-params.nu2) }
}

/// `GU = (g∂₁θ, 0)`.
pub fn buoyancy(u: &SpectralState, params: &PhysicalParams) -> SpectralState {
    SpectralState { omega: u.theta.d1().scale(params.g), theta: ScalarField::zeros(u.n()) }
}

/// `F(U) = −AU − B(U,U) + GU`.
pub fn drift(grid: &SpectralGrid, u: &SpectralState, params: &PhysicalParams) -> SpectralState {
    let mut f = linear_a(u, params).scale(-1.0);
    f.axpy(-1.0, &nonlinear_b(grid, u, u));
    f.axpy(1.0, &buoyancy(u, params));
    f
}

/// `σ_θ dW`: the increment placed on the four forced temperature modes.
pub fn noise_map(n: usize, inc: &NoiseIncrement, params: &PhysicalParams) -> SpectralState {
    let mut theta = ScalarField::zeros(n);
    for (i, (j, m)) in FORCED_MODES.iter().enumerate() {
        let a = params.alphas[i] * inc.dw[i];
        if a != 0.0 {
            theta.axpy(a, &ScalarField::trig(n, j[0], j[1], *m));
        }
    }
    SpectralState { omega: ScalarField::zeros(n), theta }
}

/// Time-dependent forcing of the controlled system.
///
/// The temperature may carry a prescribed component `x₁Λ(t, x₂)` that is
/// linear in `x₁`; the periodic part evolves and `Λ` enters through
/// `g∂₁(x₁Λ) = gΛ` and `u·∇(x₁Λ) = u₁Λ + x₁u₂∂₂Λ`. The `x₁`-linear remainder
/// is the responsibility of the plan.
pub trait Forcing: Sync {
    /// Periodic forcing `h(t, ·)` in the temperature equation.
    fn temperature_forcing(&self, t: f64) -> ScalarField;

    /// Profile `Λ(t, ·)` of the `x₁`-linear temperature component.
    fn linear_profile(&self, _t: f64) -> Option<ScalarField> {
        None
    }
}

/// `h ≡ 0`.
#[derive(Clone, Copy, Debug)]
pub struct NoForcing {
    pub n: usize,
}

impl Forcing for NoForcing {
    fn temperature_forcing(&self, _t: f64) -> ScalarField {
        ScalarField::zeros(self.n)
    }
}

/// Piecewise-constant forcing `h = σ_θ ΔW / Δt` reproducing a noise path
/// sampled on a grid of width `dt`.
#[derive(Clone, Debug)]
pub struct NoisePathForcing {
    pub n: usize,
    pub params: PhysicalParams,
    pub stream: NoiseStream,
    pub dt: f64,
}

impl Forcing for NoisePathForcing {
    fn temperature_forcing(&self, t: f64) -> ScalarField {
        let step = (t / self.dt + 1e-9).floor().max(0.0) as u64;
        let inc = NoiseIncrement::draw(&self.stream, step, self.dt);
        noise_map(self.n, &inc, &self.params).theta.scale(1.0 / self.dt)
    }
}

/// Scheme for deterministic, controlled steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ControlScheme {
    /// Exponential Euler, the same integrator as the stochastic step.
    #[default]
    ExpEuler,
    /// Integrating-factor (Lawson) fourth-order Runge–Kutta.
    LawsonRk4,
}

/// One controlled step, with the internal stage states when available.
#[derive(Clone, Debug)]
pub struct ControlledStep {
    pub next: SpectralState,
    /// States at `t, t+h/2, t+h/2, t+h` used by the RK4 stages.
    pub stages: Option<[SpectralState; 4]>,
}

/// Options of the integrator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    /// Include `B(U,U)`; switching it off leaves a linear system.
    pub nonlinear: bool,
    /// Enforce `dt·max|u| ≤ 0.5·2π/n`.
    pub cfl_check: bool,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        Self { nonlinear: true, cfl_check: true }
    }
}

/// Exponential integrator with precomputed per-mode factors.
#[derive(Clone, Debug)]
pub struct Integrator {
    grid: SpectralGrid,
    params: PhysicalParams,
    dt: f64,
    opts: IntegratorOptions,
    e_w: Vec<f64>,
    e_t: Vec<f64>,
    phi_w: Vec<f64>,
    phi_t: Vec<f64>,
    eh_w: Vec<f64>,
    eh_t: Vec<f64>,
    noise_gain: f64,
}

fn factors(n: usize, nu: f64, h: f64) -> (Vec<f64>, Vec<f64>) {
    let mut e = vec![0.0; n * n];
    let mut phi = vec![0.0; n * n];
    for i in 0..n * n {
        let k1 = wavenumber(n, i / n);
        let k2 = wavenumber(n, i % n);
        let lam = nu * (k1 * k1 + k2 * k2) as f64;
        e[i] = (-lam * h).exp();
        // (1 − e^{−λh})/λ without cancellation
        phi[i] = if lam == 0.0 { h } else { -(-lam * h).exp_m1() / lam };
    }
    (e, phi)
}

fn mul(f: &ScalarField, fac: &[f64]) -> ScalarField {
    let mut out = f.clone();
    for (z, &a) in out.coeffs_mut().iter_mut().zip(fac) {
        *z *= a;
    }
    out
}

fn mul_state(u: &SpectralState, fw: &[f64], ft: &[f64]) -> SpectralState {
    SpectralState { omega: mul(&u.omega, fw), theta: mul(&u.theta, ft) }
}

impl Integrator {
    pub fn new(grid: SpectralGrid, params: PhysicalParams, dt: f64) -> Result<Self> {
        Self::with_options(grid, params, dt, IntegratorOptions::default())
    }

    pub fn with_options(grid: SpectralGrid, params: PhysicalParams, dt: f64, opts: IntegratorOptions) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Config(format!("dt = {dt} must be positive")));
        }
        let n = grid.n();
        let (e_w, phi_w) = factors(n, params.nu1, dt);
        let (e_t, phi_t) = factors(n, params.nu2, dt);
        let (eh_w, _) = factors(n, params.nu1, 0.5 * dt);
        let (eh_t, _) = factors(n, params.nu2, 0.5 * dt);
        let lh = params.nu2 * dt;
        let noise_gain = (-(-2.0 * lh).exp_m1() / (2.0 * lh)).sqrt();
        Ok(Self { grid, params, dt, opts, e_w, e_t, phi_w, phi_t, eh_w, eh_t, noise_gain })
    }

    pub fn grid(&self) -> &SpectralGrid {
        &self.grid
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn options(&self) -> IntegratorOptions {
        self.opts
    }

    /// Semigroup `e^{−A dt}`.
    pub fn propagate(&self, u: &SpectralState) -> SpectralState {
        mul_state(u, &self.e_w, &self.e_t)
    }

    /// `φ₁(−A dt) dt` applied to a source term.
    pub fn phi1(&self, s: &SpectralState) -> SpectralState {
        mul_state(s, &self.phi_w, &self.phi_t)
    }

    fn half(&self, u: &SpectralState) -> SpectralState {
        mul_state(u, &self.eh_w, &self.eh_t)
    }

    /// `N(U) = −B(U,U) + GU` and the grid speed of `U`.
    fn explicit_part(&self, u: &SpectralState) -> (SpectralState, f64) {
        let mut out = buoyancy(u, &self.params);
        let speed = if self.opts.nonlinear {
            let (b, speed) = b_with_speed(&self.grid, u, u);
            out.axpy(-1.0, &b);
            speed
        } else if self.opts.cfl_check {
            max_speed(&self.grid, &u.omega)
        } else {
            0.0
        };
        (out, speed)
    }

    /// Explicit part of the controlled system at time `t`.
    fn controlled_part(&self, u: &SpectralState, t: f64, forcing: &dyn Forcing) -> (SpectralState, f64) {
        let (mut out, speed) = self.explicit_part(u);
        out.theta.axpy(1.0, &forcing.temperature_forcing(t));
        if let Some(lam) = forcing.linear_profile(t) {
            out.omega.axpy(self.params.g, &lam);
            if !u.omega.is_zero() {
                let (u1, _) = biot_savart_unchecked(&u.omega);
                out.theta.axpy(-1.0, &product(&self.grid, &u1, &lam));
            }
        }
        (out, speed)
    }

    fn check_cfl(&self, speed: f64) -> Result<()> {
        if !self.opts.cfl_check {
            return Ok(());
        }
        let courant = self.dt * speed;
        let limit = 0.5 * TWO_PI / self.grid.n() as f64;
        if courant > limit {
            return Err(Error::Cfl { courant, limit });
        }
        Ok(())
    }

    /// Deterministic exponential Euler step with an explicit source.
    fn etd1(&self, u: &SpectralState, source: &SpectralState) -> SpectralState {
        let mut next = self.propagate(u);
        next.axpy(1.0, &self.phi1(source));
        next
    }

    /// One stochastic step with the noise of `step` on `stream`.
    pub fn step_sde(&self, u: &SpectralState, stream: &NoiseStream, step: u64) -> Result<SpectralState> {
        let inc = NoiseIncrement::draw(stream, step, self.dt);
        self.step_with_increment(u, &inc).map_err(|e| match e {
            Error::Divergence { .. } => {
                Error::Divergence { step, seed: stream.stream, time: step as f64 * self.dt }
            }
            other => other,
        })
    }

    /// One stochastic step with a given increment; `inc.dt` must equal `dt`.
    pub fn step_with_increment(&self, u: &SpectralState, inc: &NoiseIncrement) -> Result<SpectralState> {
        let n = self.grid.n();
        let (b, speed) = if self.opts.nonlinear {
            b_with_speed(&self.grid, u, u)
        } else {
            (SpectralState::zeros(n), if self.opts.cfl_check { max_speed(&self.grid, &u.omega) } else { 0.0 })
        };
        self.check_cfl(speed)?;
        let t = self.grid.tables();
        let g = self.params.g;
        let mut next = SpectralState::zeros(n);
        {
            let (w, th) = (u.omega.coeffs(), u.theta.coeffs());
            let (bw, bt) = (b.omega.coeffs(), b.theta.coeffs());
            let nw = next.omega.coeffs_mut();
            for i in 0..n * n {
                nw[i] = w[i] * self.e_w[i] + (times_i(th[i], g * t.kx[i]) - bw[i]) * self.phi_w[i];
            }
            let nt = next.theta.coeffs_mut();
            for i in 0..n * n {
                nt[i] = th[i] * self.e_t[i] - bt[i] * self.phi_t[i];
            }
        }
        for (i, (j, m)) in FORCED_MODES.iter().enumerate() {
            let a = self.noise_gain * self.params.alphas[i] * inc.dw[i];
            if a != 0.0 {
                let z = if *m == 0 { Complex64::new(0.5 * a, 0.0) } else { Complex64::new(0.0, -0.5 * a) };
                let c = next.theta.coeffs_mut();
                c[idx(n, j[0], j[1])] += z;
                c[idx(n, -j[0], -j[1])] += z.conj();
            }
        }
        if !next.is_finite() {
            return Err(Error::Divergence { step: 0, seed: 0, time: f64::NAN });
        }
        Ok(next)
    }

    /// Deterministic step without noise.
    pub fn step_deterministic(&self, u: &SpectralState) -> Result<SpectralState> {
        self.step_with_increment(u, &NoiseIncrement::zero(self.dt))
    }

    /// One step of the controlled system from time `t`.
    pub fn step_controlled(
        &self,
        u: &SpectralState,
        t: f64,
        forcing: &dyn Forcing,
        scheme: ControlScheme,
    ) -> Result<ControlledStep> {
        let h = self.dt;
        let out = match scheme {
            ControlScheme::ExpEuler => {
                let (k, speed) = self.controlled_part(u, t, forcing);
                self.check_cfl(speed)?;
                ControlledStep { next: self.etd1(u, &k), stages: None }
            }
            ControlScheme::LawsonRk4 => {
                let (k1, speed) = self.controlled_part(u, t, forcing);
                self.check_cfl(speed)?;
                let mut ua = u.clone();
                ua.axpy(0.5 * h, &k1);
                let ua = self.half(&ua);
                let (k2, _) = self.controlled_part(&ua, t + 0.5 * h, forcing);
                let mut ub = self.half(u);
                ub.axpy(0.5 * h, &k2);
                let (k3, _) = self.controlled_part(&ub, t + 0.5 * h, forcing);
                let mut uc = self.propagate(u);
                uc.axpy(h, &self.half(&k3));
                let (k4, _) = self.controlled_part(&uc, t + h, forcing);
                let mut acc = self.propagate(&k1);
                let mut mid = k2.clone();
                mid.axpy(1.0, &k3);
                acc.axpy(2.0, &self.half(&mid));
                acc.axpy(1.0, &k4);
                let mut next = self.propagate(u);
                next.axpy(h / 6.0, &acc);
                ControlledStep { next, stages: Some([u.clone(), ua, ub, uc]) }
            }
        };
        if !out.next.is_finite() {
            return Err(Error::Divergence { step: (t / h).round() as u64, seed: 0, time: t });
        }
        Ok(out)
    }
}

/// Energy diagnostics of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub t: f64,
    pub h_norm_sq: f64,
    pub h1_norm_sq: f64,
    /// Running `∫₀ᵗ ‖U‖²_{Ĥ¹}` (trapezoid rule over the samples).
    pub dissipation_budget: f64,
    pub super_lyapunov_v: f64,
    /// `‖U_t‖² e^{κt} / ‖U₀‖²` for unforced runs.
    pub decay_ratio: Option<f64>,
}

/// Constants of the diagnostic `V(U) = ι(‖U‖² + δ‖U‖_{Ĥ⁴}^{1/3})`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyOptions {
    pub iota: f64,
    pub delta: f64,
    pub unforced: bool,
}

impl Default for EnergyOptions {
    fn default() -> Self {
        Self { iota: 0.1, delta: 0.1, unforced: false }
    }
}

pub fn super_lyapunov(u: &SpectralState, params: &PhysicalParams, iota: f64, delta: f64) -> f64 {
    iota * (weighted_norm(u, 0, params) + delta * weighted_norm(u, 4, params).powf(1.0 / 6.0))
}

/// Diagnostics series along `(t, U_t)` samples.
pub fn energy_report(traj: &[(f64, SpectralState)], params: &PhysicalParams, opts: &EnergyOptions) -> Vec<Diagnostics> {
    let mut out: Vec<Diagnostics> = Vec::with_capacity(traj.len());
    let e0 = traj.first().map(|(_, u)| weighted_norm(u, 0, params)).unwrap_or(0.0);
    let t0 = traj.first().map(|(t, _)| *t).unwrap_or(0.0);
    let kappa = params.kappa();
    for (t, u) in traj {
        let h = weighted_norm(u, 0, params);
        let h1 = weighted_norm(u, 1, params);
        let budget = match out.last() {
            Some(prev) => prev.dissipation_budget + 0.5 * (t - prev.t) * (h1 + prev.h1_norm_sq),
            None => 0.0,
        };
        let decay_ratio = if opts.unforced {
            Some(if e0 == 0.0 { 0.0 } else { h * (kappa * (t - t0)).exp() / e0 })
        } else {
            None
        };
        out.push(Diagnostics {
            t: *t,
            h_norm_sq: h,
            h1_norm_sq: h1,
            dissipation_budget: budget,
            super_lyapunov_v: super_lyapunov(u, params, opts.iota, opts.delta),
            decay_ratio,
        });
    }
    out
}

/// Stationary second moment `E‖θ‖²` of the linear (B-free) temperature
/// equation started from zero, at time `t`.
pub fn ou_theta_second_moment(params: &PhysicalParams, t: f64) -> f64 {
    let lam = params.nu2;
    let per_mode = -(-2.0 * lam * t).exp_m1() / (2.0 * lam);
    params.alphas.iter().map(|a| a * a).sum::<f64>() * per_mode * 2.0 * std::f64::consts::PI.powi(2)
}
