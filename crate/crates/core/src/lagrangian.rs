//! Lagrangian, tangent, projective and Jacobian processes on top of a base
//! trajectory, and the two Lyapunov estimators.
//!
//! With `Du[i][k] = ∂_k u_i`:
//! `ẋ = u(x)`, `τ̇ = Du τ`, `v̇ = Du v − (v·Du v) v`, `Ȧ = Du A`.

use serde::{Deserialize, Serialize};

use crate::dynamics::Integrator;
use crate::error::{Error, Result};
use crate::mat2::{self, Mat2};
use crate::par::{self, Execution};
use crate::rng::NoiseStream;
use crate::spectral::{circle_diff, PhysicalParams, SpectralGrid, SpectralState, VelocityEvaluator, VelocityJet, TWO_PI};
use crate::stats::{self, MeanCi};

/// Renormalize when `|Ã|_F` exceeds this.
const QR_NORM_LIMIT: f64 = 1e6;
/// Re-project the determinant when it drifts further than this from 1.
pub const DET_TOLERANCE: f64 = 1e-6;

/// Classical RK4 where stage `s` (0: start, 1–2: midpoint, 3: end) may use a
/// different velocity field.
pub(crate) fn rk4<const N: usize>(y: &[f64; N], h: f64, mut f: impl FnMut(usize, &[f64; N]) -> [f64; N]) -> [f64; N] {
    let stage = |y: &[f64; N], k: &[f64; N], c: f64| -> [f64; N] {
        let mut out = *y;
        for i in 0..N {
            out[i] += c * k[i];
        }
        out
    };
    let k1 = f(0, y);
    let k2 = f(1, &stage(y, &k1, 0.5 * h));
    let k3 = f(2, &stage(y, &k2, 0.5 * h));
    let k4 = f(3, &stage(y, &k3, h));
    let mut out = *y;
    for i in 0..N {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// Jacobian `A = Ã R`, with the accumulated upper-triangular factor kept in
/// log form: `R = e^{L₁} [[1, ρ], [0, e^{L₂−L₁}]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianProcess {
    pub a: Mat2,
    pub log_r11: f64,
    pub log_r22: f64,
    pub rho: f64,
    /// Sum of `log det` removed by re-projections.
    pub removed_log_det: f64,
    pub projections: u64,
    /// Largest `|det A − 1|` seen before any re-projection.
    pub max_det_dev: f64,
}

impl Default for JacobianProcess {
    fn default() -> Self {
        Self { a: mat2::IDENTITY, log_r11: 0.0, log_r22: 0.0, rho: 0.0, removed_log_det: 0.0, projections: 0, max_det_dev: 0.0 }
    }
}

impl JacobianProcess {
    fn r_shape(&self) -> Mat2 {
        [[1.0, self.rho], [0.0, (self.log_r22 - self.log_r11).exp()]]
    }

    /// `log |A|` (operator norm) without forming `A`.
    pub fn log_norm(&self) -> f64 {
        self.log_r11 + mat2::norm2(&mat2::mul(&self.a, &self.r_shape())).ln()
    }

    pub fn log_det(&self) -> f64 {
        mat2::det(&self.a).abs().ln() + self.log_r11 + self.log_r22
    }

    pub fn det(&self) -> f64 {
        mat2::det(&self.a) * (self.log_r11 + self.log_r22).exp()
    }

    /// `log |det|` including everything removed by re-projection.
    pub fn raw_log_det(&self) -> f64 {
        self.log_det() + self.removed_log_det
    }

    /// The full matrix (may overflow for long horizons).
    pub fn matrix(&self) -> Mat2 {
        mat2::scale(&mat2::mul(&self.a, &self.r_shape()), self.log_r11.exp())
    }

    /// Move the triangular part of `Ã` into the accumulator.
    pub fn renormalize(&mut self) {
        let (q, r) = mat2::qr(&self.a);
        let (a, b, c) = (r[0][0], r[0][1], r[1][1]);
        // r12/r11 of the product [[a, b], [0, c]] R
        self.rho += (b / a) * (self.log_r22 - self.log_r11).exp();
        self.log_r11 += a.ln();
        self.log_r22 += c.ln();
        self.a = q;
    }

    /// QR log-diagonal `(L₁, L₂)` of the current `A`, without mutating.
    pub fn qr_logs(&self) -> (f64, f64) {
        let mut tmp = *self;
        tmp.renormalize();
        (tmp.log_r11, tmp.log_r22)
    }

    fn check_det(&mut self) {
        let d = self.det();
        let dev = (d - 1.0).abs();
        if dev > self.max_det_dev {
            self.max_det_dev = dev;
        }
        if dev > DET_TOLERANCE && d > 0.0 {
            let ld = d.ln();
            self.removed_log_det += ld;
            self.a = mat2::scale(&self.a, (-0.5 * ld).exp());
            self.projections += 1;
            log::debug!("jacobian determinant re-projected (det = {d})");
        }
    }
}

/// `(x, τ, v, A)` plus the running integral `∫ v·Du v`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    /// Position on the covering space (not wrapped).
    pub x: [f64; 2],
    pub tau: [f64; 2],
    pub v: [f64; 2],
    pub jac: JacobianProcess,
    /// `∫ v·Du v dt`, equal to `log |A v₀|` pathwise.
    pub log_stretch: f64,
    pub steps_since_qr: u32,
    pub qr_every: u32,
}

impl ExtendedState {
    pub fn new(x: [f64; 2], tau: [f64; 2], v: [f64; 2]) -> Self {
        let nv = v[0].hypot(v[1]);
        Self {
            x,
            tau,
            v: [v[0] / nv, v[1] / nv],
            jac: JacobianProcess::default(),
            log_stretch: 0.0,
            steps_since_qr: 0,
            qr_every: 20,
        }
    }

    /// Restart the Jacobian and the projective integral (burn-in end).
    pub fn reset_growth(&mut self) {
        self.jac = JacobianProcess::default();
        self.log_stretch = 0.0;
        self.steps_since_qr = 0;
    }

    fn pack(&self) -> [f64; 11] {
        let a = &self.jac.a;
        [self.x[0], self.x[1], self.tau[0], self.tau[1], self.v[0], self.v[1], a[0][0], a[0][1], a[1][0], a[1][1], self.log_stretch]
    }

    fn unpack(&mut self, y: &[f64; 11]) {
        self.x = [y[0], y[1]];
        self.tau = [y[2], y[3]];
        let nv = y[4].hypot(y[5]);
        self.v = [y[4] / nv, y[5] / nv];
        self.jac.a = [[y[6], y[7]], [y[8], y[9]]];
        self.log_stretch = y[10];
    }

    /// Position reduced into the fundamental domain.
    pub fn wrapped_x(&self) -> [f64; 2] {
        [self.x[0].rem_euclid(TWO_PI), self.x[1].rem_euclid(TWO_PI)]
    }
}

fn extended_rhs(j: &VelocityJet, y: &[f64; 11]) -> [f64; 11] {
    let du = &j.du;
    let tau = [y[2], y[3]];
    let v = [y[4], y[5]];
    let dv = mat2::apply(du, &v);
    let s = v[0] * dv[0] + v[1] * dv[1];
    let vv = v[0] * v[0] + v[1] * v[1];
    let dt = mat2::apply(du, &tau);
    let a = [[y[6], y[7]], [y[8], y[9]]];
    let da = mat2::mul(du, &a);
    [j.u[0], j.u[1], dt[0], dt[1], dv[0] - s * v[0], dv[1] - s * v[1], da[0][0], da[0][1], da[1][0], da[1][1], s / vv]
}

/// Advance with RK4; `fields[s]` is the velocity used at stage `s`.
pub fn step_extended_stages(state: &ExtendedState, fields: [&VelocityEvaluator; 4], dt: f64) -> Result<ExtendedState> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt = {dt} must be positive")));
    }
    let mut out = *state;
    let y = state.pack();
    let mut bad: Option<[f64; 2]> = None;
    let y1 = rk4(&y, dt, |s, y| {
        let x = [y[0], y[1]];
        let j = fields[s].jet(x, 1);
        if !(j.du.iter().flatten().all(|v| v.is_finite()) && j.u.iter().all(|v| v.is_finite())) {
            bad = Some(x);
        }
        extended_rhs(&j, y)
    });
    if let Some(x) = bad {
        return Err(Error::NonFiniteGradient { x });
    }
    if !y1.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteGradient { x: state.x });
    }
    out.unpack(&y1);
    out.jac.check_det();
    out.steps_since_qr += 1;
    if out.steps_since_qr >= out.qr_every || mat2::frobenius_sq(&out.jac.a) > QR_NORM_LIMIT * QR_NORM_LIMIT {
        out.jac.renormalize();
        out.steps_since_qr = 0;
    }
    Ok(out)
}

/// Advance against a velocity field frozen over the step.
pub fn step_extended(state: &ExtendedState, field: &VelocityEvaluator, dt: f64) -> Result<ExtendedState> {
    step_extended_stages(state, [field; 4], dt)
}

/// `lim log|det A_t| / t` from the raw determinant accumulation.
pub fn lyapunov_sum(state: &ExtendedState, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    state.jac.raw_log_det() / t
}

/// Distance on the torus.
pub fn torus_distance(x: [f64; 2], y: [f64; 2]) -> f64 {
    circle_diff(x[0], y[0]).hypot(circle_diff(x[1], y[1]))
}

/// Both points advected by the same frozen field.
pub fn two_point_step(x: [f64; 2], y: [f64; 2], field: &VelocityEvaluator, dt: f64) -> Result<([f64; 2], [f64; 2])> {
    if torus_distance(x, y) < 1e-12 {
        return Err(Error::Degenerate("two-point process started on the diagonal".into()));
    }
    let z = rk4(&[x[0], x[1], y[0], y[1]], dt, |_, z| {
        let a = field.velocity([z[0], z[1]]);
        let b = field.velocity([z[2], z[3]]);
        [a[0], a[1], b[0], b[1]]
    });
    if !z.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFiniteGradient { x });
    }
    Ok(([z[0], z[1]], [z[2], z[3]]))
}

/// Lyapunov experiment parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovConfig {
    pub n: usize,
    pub params: PhysicalParams,
    pub dt: f64,
    /// Total simulated time, burn-in included.
    pub horizon: f64,
    pub burn_in: f64,
    pub seeds: usize,
    pub master_seed: u64,
    pub qr_every: u32,
    /// Emit a series sample every this many steps.
    pub record_every: usize,
    /// Window after burn-in over which `|det A − 1|` is reported.
    pub det_window: f64,
    #[serde(default)]
    pub execution: Execution,
}

impl Default for LyapunovConfig {
    fn default() -> Self {
        Self {
            n: 64,
            params: PhysicalParams::default(),
            dt: 2.5e-3,
            horizon: 400.0,
            burn_in: 50.0,
            seeds: 16,
            master_seed: 1,
            qr_every: 20,
            record_every: 400,
            det_window: 100.0,
            execution: Execution::Parallel,
        }
    }
}

impl LyapunovConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon <= self.burn_in {
            return Err(Error::Config(format!("horizon {} must exceed burn-in {}", self.horizon, self.burn_in)));
        }
        if self.burn_in < 0.0 || !(self.dt > 0.0) || self.seeds == 0 {
            return Err(Error::Config("burn-in must be nonnegative, dt positive and seeds > 0".into()));
        }
        self.params.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSample {
    pub t: f64,
    /// `log |A_t|` since the end of burn-in.
    pub log_norm_growth: f64,
    /// `∫ v·Du v` since the end of burn-in.
    pub projective_average: f64,
}

/// Per-seed outcome of the Lyapunov experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovSeed {
    pub seed_index: u64,
    pub lambda_norm: f64,
    pub lambda_projective: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_sum: f64,
    pub max_det_dev_window: f64,
    pub max_det_dev: f64,
    pub projections: u64,
    /// Largest pathwise gap between `log|A v₀|` and `∫ v·Du v`.
    pub paired_gap: f64,
    pub series: Vec<LyapunovSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMethod {
    JacobianLogNorm,
    ProjectiveAverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovEstimate {
    pub lambda_top: f64,
    pub lambda_sum: f64,
    pub ci_halfwidth: f64,
    pub method: EstimatorMethod,
    pub samples: usize,
}

/// Ensemble summary with both estimators from the same trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LyapunovReport {
    pub norm: LyapunovEstimate,
    pub projective: LyapunovEstimate,
    /// Mean of `(λ̂₁ + λ̂₂)` with its interval; the theoretical value is 0.
    pub lambda_sum: MeanCi,
    pub lambda_sum_theory: f64,
    /// Interval of the paired difference of the two estimators.
    pub paired_difference: MeanCi,
    pub agree: bool,
    pub ci_excludes_zero: bool,
    pub seeds: Vec<LyapunovSeed>,
    pub failures: Vec<(u64, String)>,
}

/// Run one ensemble member.
pub fn lyapunov_seed(cfg: &LyapunovConfig, stream: &NoiseStream) -> Result<LyapunovSeed> {
    cfg.validate()?;
    let grid = SpectralGrid::new(cfg.n)?;
    let integ = Integrator::new(grid, cfg.params, cfg.dt)?;
    let x0 = [TWO_PI * stream.aux_uniform(0), TWO_PI * stream.aux_uniform(1)];
    let phi = TWO_PI * stream.aux_uniform(2);
    let mut ext = ExtendedState::new(x0, [1.0, 0.0], [phi.cos(), phi.sin()]);
    ext.qr_every = cfg.qr_every.max(1);
    let mut u = SpectralState::zeros(cfg.n);
    let burn_steps = (cfg.burn_in / cfg.dt).round() as u64;
    let total = (cfg.horizon / cfg.dt).round() as u64;
    let window_steps = burn_steps + (cfg.det_window / cfg.dt).round() as u64;
    let mut series = Vec::new();
    let mut max_det_window = 0.0f64;
    let mut paired_gap = 0.0f64;
    let mut v0 = ext.v;
    for step in 0..total {
        if step == burn_steps {
            ext.reset_growth();
            v0 = ext.v;
        }
        let field = VelocityEvaluator::new(&u.omega);
        let next = integ.step_sde(&u, stream, step)?;
        ext = step_extended(&ext, &field, cfg.dt)?;
        u = next;
        let done = step + 1;
        if done > burn_steps {
            if done <= window_steps {
                max_det_window = max_det_window.max(ext.jac.max_det_dev);
            }
            if cfg.record_every > 0 && (done - burn_steps) % cfg.record_every as u64 == 0 {
                let av0 = mat2::apply(&ext.jac.matrix_scaled(), &v0);
                let log_av0 = ext.jac.log_r11 + av0[0].hypot(av0[1]).ln();
                paired_gap = paired_gap.max((log_av0 - ext.log_stretch).abs());
                series.push(LyapunovSample { t: done as f64 * cfg.dt, log_norm_growth: ext.jac.log_norm(), projective_average: ext.log_stretch });
            }
        }
    }
    let span = (total - burn_steps) as f64 * cfg.dt;
    let (l1, l2) = ext.jac.qr_logs();
    Ok(LyapunovSeed {
        seed_index: stream.stream,
        lambda_norm: ext.jac.log_norm() / span,
        lambda_projective: ext.log_stretch / span,
        lambda1: l1 / span,
        lambda2: l2 / span,
        lambda_sum: lyapunov_sum(&ext, span),
        max_det_dev_window: max_det_window,
        max_det_dev: ext.jac.max_det_dev,
        projections: ext.jac.projections,
        paired_gap,
        series,
    })
}

impl JacobianProcess {
    /// `A / e^{L₁}`, safe from overflow.
    pub fn matrix_scaled(&self) -> Mat2 {
        mat2::mul(&self.a, &self.r_shape())
    }
}

/// Summaries of the two estimators over completed seeds.
pub fn summarize(seeds: Vec<LyapunovSeed>, failures: Vec<(u64, String)>) -> LyapunovReport {
    let norm: Vec<f64> = seeds.iter().map(|s| s.lambda_norm).collect();
    let proj: Vec<f64> = seeds.iter().map(|s| s.lambda_projective).collect();
    let sums: Vec<f64> = seeds.iter().map(|s| s.lambda1 + s.lambda2).collect();
    let diffs: Vec<f64> = norm.iter().zip(&proj).map(|(a, b)| a - b).collect();
    let ci = |xs: &[f64]| {
        if xs.len() >= 2 {
            stats::mean_ci(xs, 0.95)
        } else {
            // single trajectory: batch means over its own increments
            let inc: Vec<f64> = seeds
                .first()
                .map(|s| {
                    s.series
                        .windows(2)
                        .map(|w| (w[1].log_norm_growth - w[0].log_norm_growth) / (w[1].t - w[0].t))
                        .collect()
                })
                .unwrap_or_default();
            let mut m = stats::batch_means_ci(&inc, 10, 0.95);
            m.mean = stats::mean(xs);
            m
        }
    };
    let cn = ci(&norm);
    let cp = ci(&proj);
    let cs = stats::mean_ci(&sums, 0.95);
    let cd = stats::mean_ci(&diffs, 0.95);
    let lambda_sum = stats::mean(&seeds.iter().map(|s| s.lambda_sum).collect::<Vec<_>>());
    let agree = (cn.mean - cp.mean).abs() <= (cn.halfwidth.powi(2) + cp.halfwidth.powi(2)).sqrt();
    LyapunovReport {
        norm: LyapunovEstimate { lambda_top: cn.mean, lambda_sum, ci_halfwidth: cn.halfwidth, method: EstimatorMethod::JacobianLogNorm, samples: norm.len() },
        projective: LyapunovEstimate { lambda_top: cp.mean, lambda_sum, ci_halfwidth: cp.halfwidth, method: EstimatorMethod::ProjectiveAverage, samples: proj.len() },
        lambda_sum: cs,
        lambda_sum_theory: 0.0,
        paired_difference: cd,
        agree,
        ci_excludes_zero: cn.lower() > 0.0 && cp.lower() > 0.0,
        seeds,
        failures,
    }
}

/// The full ensemble experiment.
pub fn lyapunov_top(cfg: &LyapunovConfig) -> Result<LyapunovReport> {
    cfg.validate()?;
    let master = NoiseStream::new(cfg.master_seed, 0);
    let results = par::map_indexed(cfg.execution, cfg.seeds, |i| lyapunov_seed(cfg, &master.split(i as u64)));
    let mut seeds = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => seeds.push(s),
            Err(e) => {
                log::warn!("seed {i} failed: {e}");
                failures.push((i as u64, e.to_string()));
            }
        }
    }
    if seeds.is_empty() {
        return Err(Error::Numerical(format!("all {} seeds failed", cfg.seeds)));
    }
    Ok(summarize(seeds, failures))
}

/// One regime of the parameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub g: f64,
    pub alpha_scale: f64,
    /// `None` when every seed of the regime failed.
    pub report: Option<LyapunovReport>,
    pub error: Option<String>,
}

/// Sweep `g` and the noise scale until a regime with a strictly positive
/// interval is found. Regimes are visited in increasing order of forcing; a
/// regime in which every seed fails is recorded and skipped.
pub fn lyapunov_sweep(base: &LyapunovConfig, gs: &[f64], scales: &[f64]) -> Result<Vec<SweepEntry>> {
    base.validate()?;
    let mut out = Vec::new();
    for &scale in scales {
        for &g in gs {
            let mut cfg = base.clone();
            cfg.params.g = g;
            cfg.params.alphas = base.params.alphas.map(|a| a * scale);
            match lyapunov_top(&cfg) {
                Ok(report) => {
                    let positive = report.ci_excludes_zero;
                    log::info!("sweep g = {g}, scale = {scale}: lambda = {:.4} +- {:.4}", report.norm.lambda_top, report.norm.ci_halfwidth);
                    out.push(SweepEntry { g, alpha_scale: scale, report: Some(report), error: None });
                    if positive {
                        return Ok(out);
                    }
                }
                Err(e @ (Error::Numerical(_) | Error::Cfl { .. } | Error::Divergence { .. })) => {
                    log::warn!("sweep g = {g}, scale = {scale}: {e}");
                    out.push(SweepEntry { g, alpha_scale: scale, report: None, error: Some(e.to_string()) });
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(out)
}
