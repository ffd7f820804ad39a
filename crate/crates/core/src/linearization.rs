//! First and second variations of the extended process along a stored base
//! trajectory.
//!
//! Both variations are the exact derivatives of the discrete base step: the
//! spectral block differentiates the exponential Euler map and the particle
//! block runs RK4 on the augmented system, reusing the stage points of the
//! base particle. A forward finite difference of the full nonlinear map
//! therefore converges to [`jacobian_action`] at first order in `ε`.
//!
//! Spectral block (`u(ψ)` is the velocity induced by the vorticity slot):
//! ```text
//! ψ̇ = −Aψ + Gψ − B(U,ψ) − B(ψ,U)
//! φ̇ = −Aφ + Gφ − B(U,φ) − B(φ,U) − 2B(ψ,ψ)
//! ```
//! Particle block with `δu = u(ψ)`, `δ²u = u(φ)`:
//! ```text
//! ẏ = Du y + δu
//! ζ̇ = Du ζ + D²u[y]τ + Dδu τ
//! Ḃ = Du B + D²u[y]A + Dδu A
//! ż = Du z + δ²u + D²u[y,y] + 2Dδu y
//! ξ̇ = Du ξ + Dδ²u τ + D²u[z]τ + D³u[y,y]τ + 2D²δu[y]τ + 2D²u[y]ζ + 2Dδu ζ
//! Ċ = (same with τ, ζ replaced by A, B)
//! ```

use serde::{Deserialize, Serialize};

use crate::dynamics::{buoyancy, nonlinear_b, Integrator, NoiseIncrement};
use crate::error::{Error, Result};
use crate::lagrangian::rk4;
use crate::mat2::{self, Mat2};
use crate::rng::NoiseStream;
use crate::spectral::{PhysicalParams, SpectralState, VelocityEvaluator, VelocityJet};

/// Position, tangent vector and full Jacobian of one particle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub x: [f64; 2],
    pub tau: [f64; 2],
    pub a: Mat2,
}

impl Particle {
    pub fn new(x: [f64; 2], tau: [f64; 2]) -> Self {
        Self { x, tau, a: mat2::IDENTITY }
    }

    fn pack(&self) -> [f64; 8] {
        pack8(self.x, self.tau, &self.a)
    }

    fn unpack(y: &[f64; 8]) -> Self {
        let (x, tau, a) = unpack8(y);
        Self { x, tau, a }
    }
}

fn pack8(p: [f64; 2], q: [f64; 2], m: &Mat2) -> [f64; 8] {
    [p[0], p[1], q[0], q[1], m[0][0], m[0][1], m[1][0], m[1][1]]
}

fn unpack8(y: &[f64]) -> ([f64; 2], [f64; 2], Mat2) {
    ([y[0], y[1]], [y[2], y[3]], [[y[4], y[5]], [y[6], y[7]]])
}

/// First variation `(ψ, y, ζ, B)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationState {
    pub psi: SpectralState,
    pub y: [f64; 2],
    pub zeta: [f64; 2],
    pub b: Mat2,
}

/// Second variation `(φ, z, ξ, C)`; always started from zero.
#[derive(Clone, Debug, PartialEq)]
pub struct SecondVariationState {
    pub phi: SpectralState,
    pub z: [f64; 2],
    pub xi: [f64; 2],
    pub c: Mat2,
}

impl VariationState {
    pub fn zeros(n: usize) -> Self {
        Self { psi: SpectralState::zeros(n), y: [0.0; 2], zeta: [0.0; 2], b: [[0.0; 2]; 2] }
    }

    /// Perturbation of the base state only.
    pub fn from_state(psi: SpectralState) -> Self {
        Self { psi, y: [0.0; 2], zeta: [0.0; 2], b: [[0.0; 2]; 2] }
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.psi = out.psi.scale(a);
        for v in out.tail_mut() {
            *v *= a;
        }
        out
    }

    pub fn axpy(&mut self, a: f64, x: &VariationState) {
        self.psi.axpy(a, &x.psi);
        let xt = x.tail();
        for (v, w) in self.tail_mut().into_iter().zip(xt) {
            *v += a * w;
        }
    }

    /// `(y, ζ, B)` flattened.
    pub fn tail(&self) -> [f64; 8] {
        pack8(self.y, self.zeta, &self.b)
    }

    fn tail_mut(&mut self) -> [&mut f64; 8] {
        let [b0, b1] = &mut self.b;
        let [b00, b01] = b0;
        let [b10, b11] = b1;
        let [y0, y1] = &mut self.y;
        let [z0, z1] = &mut self.zeta;
        [y0, y1, z0, z1, b00, b01, b10, b11]
    }

    fn set_tail(&mut self, t: &[f64]) {
        let (y, zeta, b) = unpack8(t);
        self.y = y;
        self.zeta = zeta;
        self.b = b;
    }

    /// `⟨·,·⟩_{Ĥˢ}` on the state plus the Euclidean product on `(y, ζ, B)`.
    pub fn inner(&self, other: &VariationState, s: u32, params: &PhysicalParams) -> f64 {
        let a = self.tail();
        let b = other.tail();
        self.psi.inner(&other.psi, s, params) + a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>()
    }

    pub fn norm(&self, s: u32, params: &PhysicalParams) -> f64 {
        self.inner(self, s, params).max(0.0).sqrt()
    }
}

impl SecondVariationState {
    pub fn zeros(n: usize) -> Self {
        Self { phi: SpectralState::zeros(n), z: [0.0; 2], xi: [0.0; 2], c: [[0.0; 2]; 2] }
    }

    /// The same data viewed as a [`VariationState`], for norms and differences.
    pub fn as_variation(&self) -> VariationState {
        VariationState { psi: self.phi.clone(), y: self.z, zeta: self.xi, b: self.c }
    }
}

/// Stage point of the base particle RK4 step.
#[derive(Clone, Copy, Debug)]
struct Stage {
    x: [f64; 2],
    tau: [f64; 2],
    a: Mat2,
    jet: VelocityJet,
}

/// Base trajectory `(U_k, particle_k)` on the grid `t_k = k·dt`, with the
/// RK4 stage data every variation step needs.
#[derive(Clone, Debug)]
pub struct BaseTrajectory {
    integ: Integrator,
    states: Vec<SpectralState>,
    particles: Vec<Particle>,
    increments: Vec<NoiseIncrement>,
    stages: Vec<[Stage; 4]>,
}

/// Base particle RK4 step with the field of `U_k` frozen over the step.
pub fn step_particle(p: &Particle, field: &VelocityEvaluator, dt: f64) -> Particle {
    step_particle_stages(p, field, dt).0
}

fn step_particle_stages(p: &Particle, field: &VelocityEvaluator, dt: f64) -> (Particle, [Stage; 4]) {
    let blank = Stage { x: [0.0; 2], tau: [0.0; 2], a: mat2::IDENTITY, jet: VelocityJet::default() };
    let mut stages = [blank; 4];
    let y1 = rk4(&p.pack(), dt, |s, y| {
        let (x, tau, a) = unpack8(y);
        let jet = field.jet(x, 3);
        stages[s] = Stage { x, tau, a, jet };
        let du = &jet.du;
        let dt = mat2::apply(du, &tau);
        let da = mat2::mul(du, &a);
        pack8(jet.u, dt, &da)
    });
    (Particle::unpack(&y1), stages)
}

impl BaseTrajectory {
    /// Integrate from `(u0, p0)` with the given increments.
    pub fn from_increments(integ: Integrator, u0: SpectralState, p0: Particle, increments: Vec<NoiseIncrement>) -> Result<Self> {
        let mut states = Vec::with_capacity(increments.len() + 1);
        let mut particles = Vec::with_capacity(increments.len() + 1);
        let mut stages = Vec::with_capacity(increments.len());
        let dt = integ.dt();
        let mut u = u0;
        let mut p = p0;
        for inc in &increments {
            let field = VelocityEvaluator::new(&u.omega);
            let next = integ.step_with_increment(&u, inc)?;
            let (np, st) = step_particle_stages(&p, &field, dt);
            if !np.x.iter().chain(&np.tau).chain(np.a.iter().flatten()).all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient { x: p.x });
            }
            states.push(u);
            particles.push(p);
            stages.push(st);
            u = next;
            p = np;
        }
        states.push(u);
        particles.push(p);
        Ok(Self { integ, states, particles, increments, stages })
    }

    /// Integrate `steps` steps driven by `stream`.
    pub fn record(integ: Integrator, u0: SpectralState, p0: Particle, stream: &NoiseStream, steps: usize) -> Result<Self> {
        let dt = integ.dt();
        let incs = (0..steps as u64).map(|k| NoiseIncrement::draw(stream, k, dt)).collect();
        Self::from_increments(integ, u0, p0, incs)
    }

    /// The same increments from a perturbed initial condition.
    pub fn rerun(&self, u0: SpectralState, p0: Particle) -> Result<Self> {
        Self::from_increments(self.integ.clone(), u0, p0, self.increments.clone())
    }

    pub fn integrator(&self) -> &Integrator {
        &self.integ
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn dt(&self) -> f64 {
        self.integ.dt()
    }

    pub fn horizon(&self) -> f64 {
        self.steps() as f64 * self.dt()
    }

    pub fn state(&self, k: usize) -> &SpectralState {
        &self.states[k]
    }

    pub fn particle(&self, k: usize) -> &Particle {
        &self.particles[k]
    }

    pub fn increments(&self) -> &[NoiseIncrement] {
        &self.increments
    }

    /// Grid index of time `t`; rejects times off the step grid.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let r = t / self.dt();
        let k = r.round();
        if !(t >= 0.0) || (r - k).abs() > 1e-9 * r.abs().max(1.0) || k as usize > self.steps() {
            return Err(Error::TimeMisalignment(format!(
                "t = {t} is not a grid time in [0, {}] with dt = {}",
                self.horizon(),
                self.dt()
            )));
        }
        Ok(k as usize)
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k >= self.steps() {
            return Err(Error::TimeMisalignment(format!("step {k} outside base trajectory of {} steps", self.steps())));
        }
        Ok(())
    }
}

/// `DF(U)ψ` without the dissipative part: `Gψ − B(U,ψ) − B(ψ,U)`.
fn linearized_source(integ: &Integrator, u: &SpectralState, psi: &SpectralState) -> SpectralState {
    let mut s = buoyancy(psi, integ.params());
    if integ.options().nonlinear {
        s.axpy(-1.0, &nonlinear_b(integ.grid(), u, psi));
        s.axpy(-1.0, &nonlinear_b(integ.grid(), psi, u));
    }
    s
}

fn etd(integ: &Integrator, v: &SpectralState, source: &SpectralState) -> SpectralState {
    let mut out = integ.propagate(v);
    out.axpy(1.0, &integ.phi1(source));
    out
}

/// `M[i][k] = Σ_l ∂_k∂_l u_i y_l`.
fn d2_mat(j: &VelocityJet, y: &[f64; 2]) -> Mat2 {
    let mut m = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            m[i][k] = j.d2u[i][k][0] * y[0] + j.d2u[i][k][1] * y[1];
        }
    }
    m
}

/// `M[i][k] = Σ_{l,m} ∂_k∂_l∂_m u_i y_l y_m`.
fn d3_mat(j: &VelocityJet, y: &[f64; 2]) -> Mat2 {
    let mut m = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            let mut acc = 0.0;
            for l in 0..2 {
                for q in 0..2 {
                    acc += j.d3u[i][k][l][q] * y[l] * y[q];
                }
            }
            m[i][k] = acc;
        }
    }
    m
}

fn add2(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

fn first_rhs(st: &Stage, d: &VelocityJet, t: &[f64]) -> [f64; 8] {
    let (y, zeta, b) = unpack8(t);
    let du = &st.jet.du;
    let m2 = d2_mat(&st.jet, &y);
    let dy = add2(mat2::apply(du, &y), d.u);
    let dz = add2(add2(mat2::apply(du, &zeta), mat2::apply(&m2, &st.tau)), mat2::apply(&d.du, &st.tau));
    let db = mat2::add(&mat2::add(&mat2::mul(du, &b), &mat2::mul(&m2, &st.a)), &mat2::mul(&d.du, &st.a));
    pack8(dy, dz, &db)
}

/// Advance the first variation over base step `k`.
pub fn step_first_variation(var: &VariationState, base: &BaseTrajectory, k: usize) -> Result<VariationState> {
    base.check_step(k)?;
    let integ = &base.integ;
    let u = &base.states[k];
    let psi = etd(integ, &var.psi, &linearized_source(integ, u, &var.psi));
    let delta = VelocityEvaluator::new(&var.psi.omega);
    let st = &base.stages[k];
    let t1 = rk4(&var.tail(), integ.dt(), |s, t| {
        let d = if delta.is_zero() { VelocityJet::default() } else { delta.jet(st[s].x, 1) };
        first_rhs(&st[s], &d, t)
    });
    let mut out = VariationState { psi, ..VariationState::zeros(u.n()) };
    out.set_tail(&t1);
    Ok(out)
}

/// Advance the second variation over base step `k`; `var` is the first
/// variation at the start of the same step.
pub fn step_second_variation(
    sec: &SecondVariationState,
    var: &VariationState,
    base: &BaseTrajectory,
    k: usize,
) -> Result<SecondVariationState> {
    base.check_step(k)?;
    let integ = &base.integ;
    let u = &base.states[k];
    let mut source = linearized_source(integ, u, &sec.phi);
    if integ.options().nonlinear {
        source.axpy(-2.0, &nonlinear_b(integ.grid(), &var.psi, &var.psi));
    }
    let phi = etd(integ, &sec.phi, &source);
    let delta = VelocityEvaluator::new(&var.psi.omega);
    let delta2 = VelocityEvaluator::new(&sec.phi.omega);
    let st = &base.stages[k];
    let mut y0 = [0.0; 16];
    y0[..8].copy_from_slice(&var.tail());
    y0[8..].copy_from_slice(&sec.as_variation().tail());
    let y1 = rk4(&y0, integ.dt(), |s, w| {
        let stage = &st[s];
        let d = if delta.is_zero() { VelocityJet::default() } else { delta.jet(stage.x, 2) };
        let d2 = if delta2.is_zero() { VelocityJet::default() } else { delta2.jet(stage.x, 1) };
        let mut out = [0.0; 16];
        out[..8].copy_from_slice(&first_rhs(stage, &d, &w[..8]));
        let (y, zeta, b) = unpack8(&w[..8]);
        let (z, xi, c) = unpack8(&w[8..]);
        let j = &stage.jet;
        let du = &j.du;
        let m2y = d2_mat(j, &y);
        let m2z = d2_mat(j, &z);
        let m3 = d3_mat(j, &y);
        let md2 = d2_mat(&d, &y);
        let dz = [
            mat2::apply(du, &z),
            d2.u,
            mat2::apply(&m2y, &y),
            mat2::apply(&mat2::scale(&d.du, 2.0), &y),
        ]
        .into_iter()
        .fold([0.0; 2], add2);
        // operator acting on the tangent (τ) or Jacobian (A) slot, and on ζ or B
        let on_base = mat2::add(&mat2::add(&d2.du, &m2z), &mat2::add(&m3, &mat2::scale(&md2, 2.0)));
        let on_first = mat2::scale(&mat2::add(&m2y, &d.du), 2.0);
        let dxi = [mat2::apply(du, &xi), mat2::apply(&on_base, &stage.tau), mat2::apply(&on_first, &zeta)]
            .into_iter()
            .fold([0.0; 2], add2);
        let dc = mat2::add(&mat2::add(&mat2::mul(du, &c), &mat2::mul(&on_base, &stage.a)), &mat2::mul(&on_first, &b));
        out[8..].copy_from_slice(&pack8(dz, dxi, &dc));
        out
    });
    let (z, xi, c) = unpack8(&y1[8..]);
    Ok(SecondVariationState { phi, z, xi, c })
}

/// `𝒥_{s,t} p` for grid times `s ≤ t`.
pub fn jacobian_action(p: &VariationState, s: f64, t: f64, base: &BaseTrajectory) -> Result<VariationState> {
    if s > t {
        return Err(Error::TimeMisalignment(format!("s = {s} > t = {t}")));
    }
    let (ks, kt) = (base.step_index(s)?, base.step_index(t)?);
    jacobian_action_steps(p, ks, kt, base)
}

/// `𝒥` between grid indices `ks ≤ kt`.
pub fn jacobian_action_steps(p: &VariationState, ks: usize, kt: usize, base: &BaseTrajectory) -> Result<VariationState> {
    if ks > kt || kt > base.steps() {
        return Err(Error::TimeMisalignment(format!("invalid step range {ks}..{kt}")));
    }
    let mut v = p.clone();
    for k in ks..kt {
        v = step_first_variation(&v, base, k)?;
    }
    Ok(v)
}

/// `(𝒥_{s,t}p, 𝒥²_{s,t}(p, p))`.
pub fn second_variation(
    p: &VariationState,
    s: f64,
    t: f64,
    base: &BaseTrajectory,
) -> Result<(VariationState, SecondVariationState)> {
    if s > t {
        return Err(Error::TimeMisalignment(format!("s = {s} > t = {t}")));
    }
    let (ks, kt) = (base.step_index(s)?, base.step_index(t)?);
    let mut v = p.clone();
    let mut w = SecondVariationState::zeros(p.psi.n());
    for k in ks..kt {
        w = step_second_variation(&w, &v, base, k)?;
        v = step_first_variation(&v, base, k)?;
    }
    Ok((v, w))
}

/// `(U, particle)` displaced by `ε p`.
pub fn displaced(u: &SpectralState, particle: &Particle, p: &VariationState, eps: f64) -> (SpectralState, Particle) {
    let mut v = u.clone();
    v.axpy(eps, &p.psi);
    let q = Particle {
        x: [particle.x[0] + eps * p.y[0], particle.x[1] + eps * p.y[1]],
        tau: [particle.tau[0] + eps * p.zeta[0], particle.tau[1] + eps * p.zeta[1]],
        a: mat2::add(&particle.a, &mat2::scale(&p.b, eps)),
    };
    (v, q)
}

/// End point of the nonlinear flow as a [`VariationState`]-shaped vector
/// (state, position, tangent, Jacobian), for finite differences.
pub fn endpoint(base: &BaseTrajectory) -> VariationState {
    let k = base.steps();
    let p = base.particle(k);
    VariationState { psi: base.state(k).clone(), y: p.x, zeta: p.tau, b: p.a }
}
