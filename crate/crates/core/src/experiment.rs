//! Experiment configuration, orchestration and output files.
//!
//! A run reads one TOML document, validates it, executes the requested
//! experiment over the seed ensemble and writes CSV series plus a JSON
//! summary into the output directory. Seed `i` always uses the noise stream
//! `(master_seed, i)`, so the outputs are a function of the configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::brackets::{lie_bracket_fd, span_check, y_field, z_field, z_sigma_bracket, bar_vorticity, BracketKind, SpanPoint};
use crate::checkpoint::Trajectory;
use crate::control::{build_matrix_plan, build_steering_plan, verify_steering, ControlPlan, SteeringOptions, SteeringReport};
use crate::dynamics::{drift, energy_report, ou_theta_second_moment, EnergyOptions, Integrator, IntegratorOptions, NoiseIncrement};
use crate::error::{Error, Result};
use crate::lagrangian::{lyapunov_sweep, lyapunov_top, ExtendedState, LyapunovConfig, LyapunovReport};
use crate::linearization::{BaseTrajectory, Particle};
use crate::malliavin::{cone_probe, malliavin_gram, regularized_controls, DirectionSet, GramOptions, NodeSolutions};
use crate::par::{self, Execution};
use crate::rng::NoiseStream;
use crate::spectral::{in_half_lattice, trig_mode, weighted_norm, PhysicalParams, Slot, SpectralGrid, SpectralState, TWO_PI};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Lyapunov,
    ControlDemo,
    BracketCheck,
    MalliavinProbe,
    SpanCheck,
    EnergyAudit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Lyapunov => "lyapunov",
            ExperimentKind::ControlDemo => "control-demo",
            ExperimentKind::BracketCheck => "bracket-check",
            ExperimentKind::MalliavinProbe => "malliavin-probe",
            ExperimentKind::SpanCheck => "span-check",
            ExperimentKind::EnergyAudit => "energy-audit",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateOptions {
    pub record_every: usize,
    /// Write a checkpoint of every seed at the end of the run.
    pub checkpoint: bool,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        Self { record_every: 100, checkpoint: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LyapunovOptions {
    pub qr_every: u32,
    pub record_every: usize,
    pub det_window: f64,
    /// Values of `g` and noise scalings visited when `sweep` is set.
    pub sweep: bool,
    pub sweep_g: Vec<f64>,
    pub sweep_scale: Vec<f64>,
}

impl Default for LyapunovOptions {
    fn default() -> Self {
        Self {
            qr_every: 20,
            record_every: 400,
            det_window: 100.0,
            sweep: false,
            sweep_g: vec![1.0, 2.0, 4.0],
            sweep_scale: vec![1.0, 2.0, 4.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlOptions {
    /// Random `(x₀, x′, v₀, v′)` steering problems.
    pub plans: usize,
    /// `log M` of the matrix plan.
    pub log_matrix_target: f64,
    pub n: usize,
    pub dt: f64,
}

impl Default for ControlOptions {
    fn default() -> Self {
        Self { plans: 20, log_matrix_target: 10.0, n: 16, dt: 1e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BracketOptions {
    /// Largest `|j|` checked.
    pub j_max: f64,
    /// Random base states per mode.
    pub samples: usize,
    /// Finite-difference steps, decreasing.
    pub eps: Vec<f64>,
    /// Modes of the random base states, `|k|_∞ ≤ state_kmax`.
    pub state_kmax: i64,
    pub n: usize,
}

impl Default for BracketOptions {
    fn default() -> Self {
        Self { j_max: 4.0, samples: 10, eps: vec![1e-2, 1e-3, 1e-4], state_kmax: 3, n: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MalliavinOptions {
    pub n: usize,
    pub dt: f64,
    /// Time horizon `T` of the base trajectory.
    pub horizon: f64,
    /// Radius of the structure span (`|j| ≤ span_radius`).
    pub span_radius: usize,
    /// Radius `N` of the cone probe span.
    pub cone_radius: usize,
    pub alpha: f64,
    pub trials: usize,
    pub node_every: usize,
    pub betas: Vec<f64>,
    pub probe_directions: usize,
}

impl Default for MalliavinOptions {
    fn default() -> Self {
        Self {
            n: 32,
            dt: 5e-3,
            horizon: 1.0,
            span_radius: 1,
            cone_radius: 2,
            alpha: 0.5,
            trials: 2000,
            node_every: 10,
            betas: vec![1e-1, 1e-2, 1e-3, 1e-4],
            probe_directions: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanOptions {
    /// Time of the field sample `U_T`.
    pub horizon: f64,
    /// Radius `N` for the two-point and Jacobian checks; the tangent check
    /// always uses `|j| ≤ 2`.
    pub n_max: f64,
    /// Points per kind and seed.
    pub points: usize,
}

impl Default for SpanOptions {
    fn default() -> Self {
        Self { horizon: 1.0, n_max: 3.0, points: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnergyAuditOptions {
    /// Coefficient size of the random unforced initial state.
    pub amplitude: f64,
    pub record_every: usize,
    /// Horizon of the linear forced runs.
    pub ou_horizon: f64,
}

impl Default for EnergyAuditOptions {
    fn default() -> Self {
        Self { amplitude: 0.5, record_every: 10, ou_horizon: 2.0 }
    }
}

/// One experiment, as read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub n: usize,
    pub params: PhysicalParams,
    pub dt: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub ensemble: usize,
    pub seed: u64,
    pub execution: Execution,
    pub simulate: SimulateOptions,
    pub lyapunov: LyapunovOptions,
    pub control: ControlOptions,
    pub bracket: BracketOptions,
    pub malliavin: MalliavinOptions,
    pub span: SpanOptions,
    pub energy: EnergyAuditOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::Simulate,
            n: 64,
            params: PhysicalParams::default(),
            dt: 2.5e-3,
            horizon: 10.0,
            burn_in: 0.0,
            ensemble: 4,
            seed: 1,
            execution: Execution::Parallel,
            simulate: SimulateOptions::default(),
            lyapunov: LyapunovOptions::default(),
            control: ControlOptions::default(),
            bracket: BracketOptions::default(),
            malliavin: MalliavinOptions::default(),
            span: SpanOptions::default(),
            energy: EnergyAuditOptions::default(),
        }
    }
}

fn steps_for(horizon: f64, dt: f64, what: &str) -> Result<u64> {
    let steps = (horizon / dt).round();
    if (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::Config(format!("{what} {horizon} is not a multiple of dt = {dt}")));
    }
    Ok(steps as u64)
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        SpectralGrid::new(self.n)?;
        self.params.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon = {} must be positive", self.horizon)));
        }
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble must contain at least one seed".into()));
        }
        if self.params.kappa() < 2.0 {
            log::warn!("kappa = min(nu1, nu2) = {} is below 2", self.params.kappa());
        }
        match self.kind {
            ExperimentKind::Simulate => {
                steps_for(self.horizon, self.dt, "horizon")?;
            }
            ExperimentKind::Lyapunov => {
                self.lyapunov_config().validate()?;
                steps_for(self.horizon, self.dt, "horizon")?;
                steps_for(self.burn_in, self.dt, "burn-in")?;
            }
            ExperimentKind::ControlDemo => {
                let c = &self.control;
                SpectralGrid::new(c.n)?;
                if !(c.dt > 0.0) || c.log_matrix_target < 0.0 {
                    return Err(Error::Config("control dt must be positive and log_matrix_target nonnegative".into()));
                }
                steps_for(1.0, c.dt, "control horizon")?;
            }
            ExperimentKind::BracketCheck => {
                let b = &self.bracket;
                let grid = SpectralGrid::new(b.n)?;
                if b.eps.is_empty() || b.eps.iter().any(|e| !(*e >= crate::brackets::FD_EPS_FLOOR)) {
                    return Err(Error::Config("finite-difference steps must be at least 1e-9".into()));
                }
                if b.j_max.ceil() as usize > grid.cut() || b.state_kmax as usize > grid.cut() {
                    return Err(Error::Config(format!("modes beyond the truncation {} of n = {}", grid.cut(), b.n)));
                }
            }
            ExperimentKind::MalliavinProbe => {
                let m = &self.malliavin;
                let grid = SpectralGrid::new(m.n)?;
                if m.cone_radius.max(m.span_radius) > grid.cut() || m.node_every == 0 {
                    return Err(Error::Config("malliavin radii exceed the truncation or node_every = 0".into()));
                }
                if !(0.0..=1.0).contains(&m.alpha) || m.betas.iter().any(|b| !(*b > 0.0)) {
                    return Err(Error::Config("alpha must lie in [0,1] and betas be positive".into()));
                }
                let steps = steps_for(m.horizon, m.dt, "malliavin horizon")?;
                if steps < 2 {
                    return Err(Error::Config("malliavin horizon needs at least two steps".into()));
                }
            }
            ExperimentKind::SpanCheck => {
                steps_for(self.span.horizon, self.dt, "span horizon")?;
                if self.span.n_max < 2.0 {
                    return Err(Error::Config("span radius must be at least 2".into()));
                }
            }
            ExperimentKind::EnergyAudit => {
                steps_for(self.energy.ou_horizon, self.dt, "ou_horizon")?;
                steps_for(self.horizon, self.dt, "horizon")?;
            }
        }
        Ok(())
    }

    pub fn lyapunov_config(&self) -> LyapunovConfig {
        LyapunovConfig {
            n: self.n,
            params: self.params,
            dt: self.dt,
            horizon: self.horizon,
            burn_in: self.burn_in,
            seeds: self.ensemble,
            master_seed: self.seed,
            qr_every: self.lyapunov.qr_every,
            record_every: self.lyapunov.record_every,
            det_window: self.lyapunov.det_window,
            execution: self.execution,
        }
    }

    fn master(&self) -> NoiseStream {
        NoiseStream::new(self.seed, 0)
    }
}

/// Status of one ensemble member.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedStatus {
    pub seed_index: u64,
    pub ok: bool,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub revision: String,
    pub seeds: Vec<SeedStatus>,
    pub files: Vec<String>,
    pub wall_clock_seconds: f64,
    /// `ok`, `partial` (some seeds failed) or `failed`.
    pub status: String,
}

pub fn revision() -> String {
    option_env!("BQLAB_REVISION").unwrap_or(concat!("boussinesq-core ", env!("CARGO_PKG_VERSION"))).to_string()
}

/// Output directory bookkeeping.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(name))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        fs::write(self.path(name), s)?;
        Ok(())
    }
}

/// Execute `cfg`, writing its artifacts into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let mut o = Outputs::new(out)?;
    fs::write(o.path("config.toml"), cfg.to_toml_string()?)?;
    let seeds = match cfg.kind {
        ExperimentKind::Simulate => run_simulate(cfg, &mut o)?,
        ExperimentKind::Lyapunov => run_lyapunov(cfg, &mut o)?,
        ExperimentKind::ControlDemo => run_control(cfg, &mut o)?,
        ExperimentKind::BracketCheck => run_brackets(cfg, &mut o)?,
        ExperimentKind::MalliavinProbe => run_malliavin(cfg, &mut o)?,
        ExperimentKind::SpanCheck => run_span(cfg, &mut o)?,
        ExperimentKind::EnergyAudit => run_energy(cfg, &mut o)?,
    };
    let failed = seeds.iter().filter(|s| !s.ok).count();
    let status = if failed == 0 {
        "ok"
    } else if failed < seeds.len() {
        "partial"
    } else {
        "failed"
    };
    let mut record = RunRecord {
        kind: cfg.kind,
        config_hash: cfg.hash(),
        revision: revision(),
        seeds,
        files: Vec::new(),
        wall_clock_seconds: 0.0,
        status: status.to_string(),
    };
    record.files = o.files.clone();
    record.files.push("run.json".into());
    record.wall_clock_seconds = start.elapsed().as_secs_f64();
    o.json("run.json", &record)?;
    if failed == record.seeds.len() && !record.seeds.is_empty() {
        let msg = record.seeds.iter().find_map(|s| s.message.clone()).unwrap_or_default();
        return Err(Error::Numerical(format!("every seed failed: {msg}")));
    }
    Ok(record)
}

fn statuses<T>(results: &[Result<T>]) -> Vec<SeedStatus> {
    results
        .iter()
        .enumerate()
        .map(|(i, r)| SeedStatus { seed_index: i as u64, ok: r.is_ok(), message: r.as_ref().err().map(|e| e.to_string()) })
        .collect()
}

/// Random state with every coefficient in `|k|_∞ ≤ kmax` drawn uniformly
/// in `[−amp, amp]² / (1 + |k|²)`.
pub fn random_state(n: usize, kmax: i64, amp: f64, seed: u64) -> SpectralState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SpectralState::zeros(n);
    for f in [&mut s.omega, &mut s.theta] {
        for k1 in 0..=kmax {
            for k2 in -kmax..=kmax {
                if !in_half_lattice([k1, k2]) {
                    continue;
                }
                let w = amp / (1.0 + (k1 * k1 + k2 * k2) as f64);
                f.set_pair(k1, k2, Complex64::new(w * rng.gen_range(-1.0..1.0), w * rng.gen_range(-1.0..1.0)));
            }
        }
    }
    s
}

fn uniform_point(stream: &NoiseStream, counter: u64) -> [f64; 2] {
    [TWO_PI * stream.aux_uniform(counter), TWO_PI * stream.aux_uniform(counter + 1)]
}

fn unit_vector(stream: &NoiseStream, counter: u64) -> [f64; 2] {
    let phi = TWO_PI * stream.aux_uniform(counter);
    [phi.cos(), phi.sin()]
}

// ---------------------------------------------------------------- simulate

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulateRow {
    pub seed: u64,
    pub step: u64,
    pub t: f64,
    pub h_norm_sq: f64,
    pub h1_norm_sq: f64,
    pub x1: f64,
    pub x2: f64,
    pub log_norm: f64,
}

/// Fresh trajectory of seed `index`: field at rest, particle and direction
/// drawn from the auxiliary stream.
pub fn seed_trajectory(cfg: &ExperimentConfig, index: u64) -> Result<Trajectory> {
    let integ = Integrator::new(SpectralGrid::new(cfg.n)?, cfg.params, cfg.dt)?;
    let stream = cfg.master().split(index);
    let p = ExtendedState::new(uniform_point(&stream, 0), [1.0, 0.0], unit_vector(&stream, 2));
    Ok(Trajectory::new(integ, SpectralState::zeros(cfg.n), p, stream))
}

fn sample_row(tr: &Trajectory) -> SimulateRow {
    let p = tr.integrator().params();
    let x = tr.particle.wrapped_x();
    SimulateRow {
        seed: tr.stream.stream,
        step: tr.step,
        t: tr.time(),
        h_norm_sq: weighted_norm(&tr.u, 0, p),
        h1_norm_sq: weighted_norm(&tr.u, 1, p),
        x1: x[0],
        x2: x[1],
        log_norm: tr.particle.jac.log_norm(),
    }
}

/// Advance `tr` until `total` steps, sampling every `every` steps.
pub fn simulate_until(tr: &mut Trajectory, total: u64, every: usize) -> Result<Vec<SimulateRow>> {
    let mut rows = Vec::new();
    let every = every.max(1) as u64;
    if tr.step % every == 0 {
        rows.push(sample_row(tr));
    }
    while tr.step < total {
        tr.advance()?;
        if tr.step % every == 0 {
            rows.push(sample_row(tr));
        }
    }
    Ok(rows)
}

fn run_simulate(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    let total = steps_for(cfg.horizon, cfg.dt, "horizon")?;
    let results = par::map_indexed(cfg.execution, cfg.ensemble, |i| {
        let mut tr = seed_trajectory(cfg, i as u64)?;
        let rows = simulate_until(&mut tr, total, cfg.simulate.record_every)?;
        Ok((rows, tr))
    });
    let mut rows = Vec::new();
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok((series, tr)) => {
                rows.extend_from_slice(series);
                if cfg.simulate.checkpoint {
                    tr.save(&o.path(&format!("checkpoint_seed{i}.bqck")))?;
                }
            }
            Err(e) => log::warn!("seed {i} failed: {e}"),
        }
    }
    o.csv("simulate.csv", &rows)?;
    Ok(statuses(&results))
}

/// Continue a checkpoint up to the configured horizon.
pub fn replay_checkpoint(cfg: &ExperimentConfig, path: &Path, out: &Path) -> Result<RunRecord> {
    let start = Instant::now();
    let mut tr = Trajectory::restore(path, Some(cfg.n))?;
    let total = steps_for(cfg.horizon, cfg.dt, "horizon")?;
    if (tr.integrator().dt() - cfg.dt).abs() > 0.0 {
        return Err(Error::Checkpoint(format!("checkpoint dt {} differs from configured dt {}", tr.integrator().dt(), cfg.dt)));
    }
    let mut o = Outputs::new(out)?;
    let seed_index = tr.stream.stream;
    let res = simulate_until(&mut tr, total, cfg.simulate.record_every);
    let status = SeedStatus { seed_index, ok: res.is_ok(), message: res.as_ref().err().map(|e| e.to_string()) };
    let rows = res?;
    o.csv("replay.csv", &rows)?;
    tr.save(&o.path("replay_final.bqck"))?;
    let mut record = RunRecord {
        kind: ExperimentKind::Simulate,
        config_hash: cfg.hash(),
        revision: revision(),
        seeds: vec![status],
        files: o.files.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        status: "ok".into(),
    };
    record.files.push("run.json".into());
    o.json("run.json", &record)?;
    Ok(record)
}

/// Re-verify a saved control plan, or every plan of a `plans.json` list.
pub fn replay_plan(path: &Path, opts: &SteeringOptions, out: &Path) -> Result<Vec<SteeringReport>> {
    let text = fs::read_to_string(path)?;
    let plans: Vec<ControlPlan> = match serde_json::from_str::<Vec<ControlPlan>>(&text) {
        Ok(list) => list,
        Err(_) => vec![ControlPlan::from_json(&text)?],
    };
    let reports = plans.iter().map(|p| verify_steering(p, opts)).collect::<Result<Vec<_>>>()?;
    let mut o = Outputs::new(out)?;
    o.json("replay_plan.json", &reports)?;
    Ok(reports)
}

// ---------------------------------------------------------------- lyapunov

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct LyapunovRow {
    seed: u64,
    t: f64,
    log_norm_growth: f64,
    projective_average: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LyapunovSeedRow {
    seed: u64,
    lambda_norm: f64,
    lambda_projective: f64,
    lambda1: f64,
    lambda2: f64,
    lambda_sum: f64,
    max_det_dev_window: f64,
    projections: u64,
    paired_gap: f64,
}

fn lyapunov_rows(report: &LyapunovReport) -> (Vec<LyapunovRow>, Vec<LyapunovSeedRow>) {
    let mut series = Vec::new();
    let mut seeds = Vec::new();
    for s in &report.seeds {
        for p in &s.series {
            series.push(LyapunovRow { seed: s.seed_index, t: p.t, log_norm_growth: p.log_norm_growth, projective_average: p.projective_average });
        }
        seeds.push(LyapunovSeedRow {
            seed: s.seed_index,
            lambda_norm: s.lambda_norm,
            lambda_projective: s.lambda_projective,
            lambda1: s.lambda1,
            lambda2: s.lambda2,
            lambda_sum: s.lambda_sum,
            max_det_dev_window: s.max_det_dev_window,
            projections: s.projections,
            paired_gap: s.paired_gap,
        });
    }
    (series, seeds)
}

fn without_series(report: &LyapunovReport) -> LyapunovReport {
    let mut r = report.clone();
    for s in &mut r.seeds {
        s.series.clear();
    }
    r
}

fn run_lyapunov(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    let base = cfg.lyapunov_config();
    let report = lyapunov_top(&base)?;
    let (series, seeds) = lyapunov_rows(&report);
    o.csv("lyapunov.csv", &series)?;
    o.csv("lyapunov_seeds.csv", &seeds)?;
    o.json("summary.json", &without_series(&report))?;
    if cfg.lyapunov.sweep {
        let sweep = lyapunov_sweep(&base, &cfg.lyapunov.sweep_g, &cfg.lyapunov.sweep_scale)?;
        let compact: Vec<_> = sweep
            .iter()
            .map(|e| {
                serde_json::json!({
                    "g": e.g,
                    "alpha_scale": e.alpha_scale,
                    "report": e.report.as_ref().map(without_series),
                    "error": e.error,
                })
            })
            .collect();
        o.json("sweep.json", &compact)?;
    }
    let mut st: Vec<SeedStatus> = report
        .seeds
        .iter()
        .map(|s| SeedStatus { seed_index: s.seed_index, ok: true, message: None })
        .chain(report.failures.iter().map(|(i, m)| SeedStatus { seed_index: *i, ok: false, message: Some(m.clone()) }))
        .collect();
    st.sort_by_key(|s| s.seed_index);
    Ok(st)
}

// ----------------------------------------------------------------- control

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub plan: usize,
    pub kind: String,
    pub endpoint_error: f64,
    pub position_error: f64,
    pub angle_error: f64,
    pub matrix_norm: f64,
    pub det_error: f64,
    pub pde_residual: f64,
    pub linear_residual: f64,
    pub tracking_error: f64,
    pub state_return: f64,
    pub shear_self_advection: f64,
    pub shear_matrix_deviation: f64,
    pub center_drift: f64,
    pub control_support: i64,
}

impl ControlRow {
    fn new(plan: usize, kind: &str, r: &SteeringReport) -> Self {
        Self {
            plan,
            kind: kind.to_string(),
            endpoint_error: r.endpoint_error,
            position_error: r.position_error,
            angle_error: r.angle_error,
            matrix_norm: r.matrix_norm,
            det_error: r.det_error,
            pde_residual: r.pde_residual,
            linear_residual: r.linear_residual,
            tracking_error: r.tracking_error,
            state_return: r.state_return,
            shear_self_advection: r.shear_self_advection,
            shear_matrix_deviation: r.shear_matrix_deviation,
            center_drift: r.center_drift,
            control_support: r.control_support,
        }
    }
}

/// The random steering plans of a control demo, followed by the matrix plan.
pub fn control_plans(cfg: &ExperimentConfig) -> Result<Vec<(String, ControlPlan)>> {
    let stream = cfg.master().split(u64::MAX);
    let mut out = Vec::new();
    for i in 0..cfg.control.plans {
        let c = 8 * i as u64;
        let x0 = uniform_point(&stream, c);
        let x1 = uniform_point(&stream, c + 2);
        let v0 = unit_vector(&stream, c + 4);
        let v1 = unit_vector(&stream, c + 5);
        out.push(("steering".to_string(), build_steering_plan(x0, x1, v0, v1, &cfg.params)?));
    }
    let at = uniform_point(&stream, 8 * cfg.control.plans as u64);
    out.push(("matrix".to_string(), build_matrix_plan(cfg.control.log_matrix_target.exp(), at, &cfg.params)?));
    Ok(out)
}

pub fn steering_options(cfg: &ExperimentConfig) -> SteeringOptions {
    SteeringOptions { n: cfg.control.n, dt: cfg.control.dt, seed: cfg.seed, ..Default::default() }
}

fn run_control(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    let plans = control_plans(cfg)?;
    let opts = steering_options(cfg);
    let results = par::map_slice(cfg.execution, &plans, |(_, p)| verify_steering(p, &opts));
    let rows: Vec<ControlRow> = results
        .iter()
        .zip(&plans)
        .enumerate()
        .filter_map(|(i, (r, (k, _)))| r.as_ref().ok().map(|r| ControlRow::new(i, k, r)))
        .collect();
    o.csv("control.csv", &rows)?;
    let plan_list: Vec<&ControlPlan> = plans.iter().map(|(_, p)| p).collect();
    o.json("plans.json", &plan_list)?;
    let max = |f: fn(&ControlRow) -> f64, kind: &str| rows.iter().filter(|r| r.kind == kind).map(f).fold(0.0, f64::max);
    let summary = serde_json::json!({
        "steering_plans": cfg.control.plans,
        "max_position_error": max(|r| r.position_error, "steering"),
        "max_angle_error": max(|r| r.angle_error, "steering"),
        "max_pde_residual": max(|r| r.pde_residual, "steering"),
        "max_state_return": max(|r| r.state_return, "steering"),
        "max_shear_matrix_deviation": max(|r| r.shear_matrix_deviation, "steering"),
        "matrix_norm": max(|r| r.matrix_norm, "matrix"),
        "matrix_target": cfg.control.log_matrix_target.exp(),
        "matrix_det_error": max(|r| r.det_error, "matrix"),
    });
    o.json("summary.json", &summary)?;
    Ok(statuses(&results))
}

// ---------------------------------------------------------------- brackets

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketRow {
    pub kind: BracketKind,
    pub j1: i64,
    pub j2: i64,
    pub m: u8,
    pub eps: f64,
    /// Largest relative error over the random base states.
    pub max_rel_error: f64,
}

/// Convergence summary of one bracket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketEntry {
    pub kind: BracketKind,
    pub j: [i64; 2],
    pub m: u8,
    /// Error at the smallest step.
    pub max_rel_error: f64,
    /// Smallest observed order over consecutive steps with errors above
    /// roundoff; `None` when no such pair exists.
    pub order: Option<f64>,
    /// Every error is at the roundoff level of its step: the difference
    /// quotient is exact for the polynomial vector fields involved.
    pub exact: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketSummary {
    pub entries: Vec<BracketEntry>,
    pub rows: Vec<BracketRow>,
    /// Largest coefficient error of `[Z_j^m, σ_k^{m'}]` against its closed form.
    pub z_sigma_max_error: f64,
    /// Largest coefficient change of the finite-difference `[Z, σ]` between
    /// two base states.
    pub z_sigma_state_dependence: f64,
}

/// Roundoff level of a difference quotient of `depth` nested levels.
fn roundoff(eps: f64, depth: i32) -> f64 {
    1e-13 / eps.powi(depth)
}

fn bracket_modes(j_max: f64) -> Vec<[i64; 2]> {
    let r = j_max.floor() as i64;
    let mut out = Vec::new();
    for j1 in 0..=r {
        for j2 in -r..=r {
            if in_half_lattice([j1, j2]) && ((j1 * j1 + j2 * j2) as f64) <= j_max * j_max {
                out.push([j1, j2]);
            }
        }
    }
    out
}

/// Closed-form `Y`, `Z` and `[Z, σ]` against finite-difference brackets.
pub fn bracket_check(opts: &BracketOptions, params: &PhysicalParams, seed: u64, exec: Execution) -> Result<BracketSummary> {
    let grid = SpectralGrid::new(opts.n)?;
    let states: Vec<SpectralState> =
        (0..opts.samples).map(|i| random_state(opts.n, opts.state_kmax, 0.5, seed.wrapping_add(i as u64))).collect();
    let modes = bracket_modes(opts.j_max);
    let tasks: Vec<([i64; 2], u8)> = modes.iter().flat_map(|j| [(*j, 0u8), (*j, 1u8)]).collect();
    let per_task = par::map_slice(exec, &tasks, |&(j, m)| -> Result<Vec<BracketRow>> {
        let g = grid.clone();
        let f = |v: &SpectralState| drift(&g, v, params);
        let s = trig_mode(&grid, j, m, Slot::Temperature)?;
        let sigma = |_: &SpectralState| s.clone();
        let mut y_err = vec![0.0f64; opts.eps.len()];
        let mut z_err = vec![0.0f64; opts.eps.len()];
        for u in &states {
            let y = y_field(&grid, j, m, u, params)?.value;
            let z = z_field(&grid, j, m, u, params)?.value;
            for (k, &eps) in opts.eps.iter().enumerate() {
                let yfd = lie_bracket_fd(&f, &sigma, u, eps)?;
                y_err[k] = y_err[k].max(yfd.sub(&y).max_abs() / y.max_abs().max(f64::MIN_POSITIVE));
                let ynested = |v: &SpectralState| lie_bracket_fd(&f, &sigma, v, eps).expect("step validated");
                let zfd = lie_bracket_fd(&f, &ynested, u, eps)?;
                z_err[k] = z_err[k].max(zfd.sub(&z).max_abs() / z.max_abs().max(f64::MIN_POSITIVE));
            }
        }
        let mut rows = Vec::new();
        for (kind, errs) in [(BracketKind::Y, &y_err), (BracketKind::Z, &z_err)] {
            for (k, &eps) in opts.eps.iter().enumerate() {
                rows.push(BracketRow { kind, j1: j[0], j2: j[1], m, eps, max_rel_error: errs[k] });
            }
        }
        Ok(rows)
    });
    let mut rows = Vec::new();
    for r in per_task {
        rows.extend(r?);
    }
    let mut entries = Vec::new();
    for &(j, m) in &tasks {
        for (kind, depth) in [(BracketKind::Y, 1), (BracketKind::Z, 2)] {
            let errs: Vec<&BracketRow> =
                rows.iter().filter(|r| r.kind == kind && r.j1 == j[0] && r.j2 == j[1] && r.m == m).collect();
            let exact = errs.iter().all(|r| r.max_rel_error <= roundoff(r.eps, depth));
            let mut order: Option<f64> = None;
            for w in errs.windows(2) {
                if w[1].max_rel_error > roundoff(w[1].eps, depth) {
                    let o = (w[0].max_rel_error / w[1].max_rel_error).ln() / (w[0].eps / w[1].eps).ln();
                    order = Some(order.map_or(o, |p: f64| p.min(o)));
                }
            }
            entries.push(BracketEntry {
                kind,
                j,
                m,
                max_rel_error: errs.last().map(|r| r.max_rel_error).unwrap_or(0.0),
                order,
                exact,
            });
        }
    }

    // [Z_j^m, σ_k^{m'}] for |j| ≤ 2 against the two forced directions
    let mut zs_err = 0.0f64;
    let mut zs_dep = 0.0f64;
    let u_a = states.first().cloned().unwrap_or_else(|| grid.zero_state());
    let u_b = random_state(opts.n, opts.state_kmax, 0.5, seed ^ 0x5a5a);
    for j in bracket_modes(2.0) {
        for m in 0..2u8 {
            for k in [[1i64, 0i64], [0, 1]] {
                for mk in 0..2u8 {
                    let closed = z_sigma_bracket(&grid, j, m, k, mk, params)?.value;
                    let sk = trig_mode(&grid, k, mk, Slot::Temperature)?;
                    let zf = |v: &SpectralState| z_field(&grid, j, m, v, params).expect("valid mode").value;
                    let fa = lie_bracket_fd(&zf, &|_| sk.clone(), &u_a, 0.5)?;
                    let fb = lie_bracket_fd(&zf, &|_| sk.clone(), &u_b, 0.5)?;
                    zs_err = zs_err.max(fa.sub(&closed).max_abs());
                    zs_dep = zs_dep.max(fa.sub(&fb).max_abs());
                }
            }
        }
    }
    Ok(BracketSummary { entries, rows, z_sigma_max_error: zs_err, z_sigma_state_dependence: zs_dep })
}

fn run_brackets(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    let summary = bracket_check(&cfg.bracket, &cfg.params, cfg.seed, cfg.execution)?;
    o.csv("brackets.csv", &summary.rows)?;
    let compact = serde_json::json!({
        "entries": summary.entries,
        "z_sigma_max_error": summary.z_sigma_max_error,
        "z_sigma_state_dependence": summary.z_sigma_state_dependence,
    });
    o.json("summary.json", &compact)?;
    Ok(vec![SeedStatus { seed_index: 0, ok: true, message: None }])
}

// --------------------------------------------------------------- malliavin

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalliavinSeed {
    pub seed: u64,
    pub span_directions: usize,
    pub min_eigenvalue: f64,
    pub asymmetry: f64,
    /// `max |M(h/2) − M(h)| / max |M(h)|` with half the node spacing.
    pub quadrature_change: f64,
    pub cone_directions: usize,
    pub cone_probe_min: f64,
    pub cone_min_eigenvalue: f64,
    /// `max` over probe directions and `β` of the identity gap.
    pub max_identity_gap: f64,
    /// Probe directions whose `‖ρ^β‖` does not increase as `β` decreases.
    pub monotone_directions: usize,
    pub probe_directions: usize,
    /// `‖ρ^β‖` per probe direction, in the order of the configured betas.
    pub rho_norms: Vec<Vec<f64>>,
}

/// Malliavin structure checks on one base trajectory.
pub fn malliavin_seed(cfg: &ExperimentConfig, index: u64) -> Result<MalliavinSeed> {
    let m = &cfg.malliavin;
    let grid = SpectralGrid::new(m.n)?;
    let integ = Integrator::new(grid.clone(), cfg.params, m.dt)?;
    let stream = cfg.master().split(index);
    let steps = steps_for(m.horizon, m.dt, "malliavin horizon")? as usize;
    let p0 = Particle::new(uniform_point(&stream, 0), unit_vector(&stream, 2));
    let base = BaseTrajectory::record(integ, grid.zero_state(), p0, &stream, steps)?;
    // the Gram work is already parallel over nodes and modes
    let opts = GramOptions { node_every: m.node_every, sobolev: 4, execution: cfg.execution };

    let dirs = DirectionSet::low_modes(&grid, m.span_radius, 4, &cfg.params)?;
    let solved = NodeSolutions::solve(&base, steps, m.node_every, cfg.execution)?;
    let gram = solved.gram(&dirs, opts.sobolev);
    // doubling the node spacing bounds the quadrature error of `gram`
    let coarse = solved.coarsen(2)?.gram(&dirs, opts.sobolev);
    let quadrature_change = (&gram.entries - &coarse.entries).amax() / gram.entries.amax().max(f64::MIN_POSITIVE);

    let cone_dirs = DirectionSet::low_modes(&grid, m.cone_radius, 4, &cfg.params)?;
    let cone_gram = solved.gram(&cone_dirs, opts.sobolev);
    let probe = cone_probe(&cone_gram.entries, &cone_dirs.in_pi, m.alpha, m.trials, cfg.seed ^ index)?;

    let half = steps / 2;
    let half_gram = malliavin_gram(&base, &dirs, half, &opts)?;
    let mut max_gap = 0.0f64;
    let mut monotone = 0;
    let mut rho_norms = Vec::new();
    for d in 0..m.probe_directions {
        let c: Vec<f64> = (0..dirs.len()).map(|a| stream.aux_uniform(100 + (d * dirs.len() + a) as u64) - 0.5).collect();
        let nrm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        let p = dirs.combine(&c.iter().map(|x| x / nrm).collect::<Vec<_>>());
        let mut norms = Vec::new();
        for rc in regularized_controls(&base, &dirs, &half_gram, &p, &m.betas, steps, &opts)? {
            max_gap = max_gap.max(rc.identity_gap);
            norms.push(rc.rho_identity.norm(4, &cfg.params));
        }
        // betas are listed in decreasing order
        if norms.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)) {
            monotone += 1;
        }
        rho_norms.push(norms);
    }
    Ok(MalliavinSeed {
        seed: index,
        span_directions: dirs.len(),
        min_eigenvalue: gram.min_eigenvalue(),
        asymmetry: gram.asymmetry(),
        quadrature_change,
        cone_directions: cone_dirs.len(),
        cone_probe_min: probe.probe_min,
        cone_min_eigenvalue: probe.min_eigenvalue,
        max_identity_gap: max_gap,
        monotone_directions: monotone,
        probe_directions: m.probe_directions,
        rho_norms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MalliavinRow {
    seed: u64,
    min_eigenvalue: f64,
    asymmetry: f64,
    quadrature_change: f64,
    cone_probe_min: f64,
    cone_min_eigenvalue: f64,
    max_identity_gap: f64,
    monotone_directions: usize,
    probe_directions: usize,
}

fn run_malliavin(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    // seeds run one after another; each Gram evaluation is parallel inside
    let results: Vec<Result<MalliavinSeed>> = (0..cfg.ensemble as u64).map(|i| malliavin_seed(cfg, i)).collect();
    let ok: Vec<&MalliavinSeed> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let rows: Vec<MalliavinRow> = ok
        .iter()
        .map(|s| MalliavinRow {
            seed: s.seed,
            min_eigenvalue: s.min_eigenvalue,
            asymmetry: s.asymmetry,
            quadrature_change: s.quadrature_change,
            cone_probe_min: s.cone_probe_min,
            cone_min_eigenvalue: s.cone_min_eigenvalue,
            max_identity_gap: s.max_identity_gap,
            monotone_directions: s.monotone_directions,
            probe_directions: s.probe_directions,
        })
        .collect();
    o.csv("malliavin.csv", &rows)?;
    let positive = ok.iter().filter(|s| s.cone_probe_min > 0.0).count();
    let summary = serde_json::json!({
        "seeds": ok.len(),
        "cone_positive_fraction": positive as f64 / ok.len().max(1) as f64,
        "min_eigenvalue": ok.iter().map(|s| s.min_eigenvalue).fold(f64::INFINITY, f64::min),
        "max_quadrature_change": ok.iter().map(|s| s.quadrature_change).fold(0.0, f64::max),
        "max_identity_gap": ok.iter().map(|s| s.max_identity_gap).fold(0.0, f64::max),
        "per_seed": ok,
    });
    o.json("summary.json", &summary)?;
    Ok(statuses(&results))
}

// -------------------------------------------------------------------- span

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanRow {
    pub seed: u64,
    pub kind: String,
    pub point: usize,
    pub fields: usize,
    pub min_singular: f64,
}

/// Field sample `(U_T, W_T)` of seed `index`.
pub fn field_sample(cfg: &ExperimentConfig, index: u64, horizon: f64) -> Result<(SpectralState, [f64; 4])> {
    let integ = Integrator::new(SpectralGrid::new(cfg.n)?, cfg.params, cfg.dt)?;
    let stream = cfg.master().split(index);
    let steps = steps_for(horizon, cfg.dt, "horizon")?;
    let mut u = SpectralState::zeros(cfg.n);
    let mut w = [0.0; 4];
    for k in 0..steps {
        let inc = NoiseIncrement::draw(&stream, k, cfg.dt);
        u = integ.step_with_increment(&u, &inc).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { step: k, seed: index, time: k as f64 * cfg.dt },
            other => other,
        })?;
        for i in 0..4 {
            w[i] += inc.dw[i];
        }
    }
    Ok((u, w))
}

const TANGENT_RADIUS: f64 = 2.0;

/// Span checks at random points of the three manifolds for seed `index`.
pub fn span_seed(cfg: &ExperimentConfig, index: u64) -> Result<Vec<SpanRow>> {
    let s = &cfg.span;
    let (u, w) = field_sample(cfg, index, s.horizon)?;
    let mut omega_sum = bar_vorticity(&u, w, &cfg.params);
    omega_sum.axpy(1.0, &u.omega);
    let stream = cfg.master().split(index);
    let mut rows = Vec::new();
    for i in 0..s.points {
        let c = 1000 + 8 * i as u64;
        let x = uniform_point(&stream, c);
        let e = unit_vector(&stream, c + 2);
        let r = 0.1 + (std::f64::consts::PI - 0.1) * stream.aux_uniform(c + 3);
        let y = [x[0] + r * e[0], x[1] + r * e[1]];
        let tau_len = 0.1 + 9.9 * stream.aux_uniform(c + 4);
        let tau = [tau_len * e[0], tau_len * e[1]];
        let checks = [
            ("two_point", SpanPoint::TwoPoint { x, y }, s.n_max),
            ("tangent", SpanPoint::Tangent { x, tau }, TANGENT_RADIUS),
            ("jacobian", SpanPoint::Jacobian { x }, s.n_max),
        ];
        for (kind, point, radius) in checks {
            let rep = span_check(&point, &omega_sum, radius, &cfg.params)?;
            rows.push(SpanRow { seed: index, kind: kind.into(), point: i, fields: rep.fields, min_singular: rep.min_singular });
        }
    }
    Ok(rows)
}

/// Median and minimum of the smallest singular values per kind.
pub fn span_summary(rows: &[SpanRow]) -> serde_json::Value {
    let mut out = serde_json::Map::new();
    for kind in ["two_point", "tangent", "jacobian"] {
        let v: Vec<f64> = rows.iter().filter(|r| r.kind == kind).map(|r| r.min_singular).collect();
        out.insert(
            kind.into(),
            serde_json::json!({
                "samples": v.len(),
                "median": stats::median(&v),
                "min": v.iter().copied().fold(f64::INFINITY, f64::min),
            }),
        );
    }
    serde_json::Value::Object(out)
}

fn run_span(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    let results = par::map_indexed(cfg.execution, cfg.ensemble, |i| span_seed(cfg, i as u64));
    let rows: Vec<SpanRow> = results.iter().filter_map(|r| r.as_ref().ok()).flatten().cloned().collect();
    o.csv("span.csv", &rows)?;
    o.json("summary.json", &span_summary(&rows))?;
    Ok(statuses(&results))
}

// ------------------------------------------------------------------ energy

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyAudit {
    /// `max_t ‖U_t‖² e^{κt} / ‖U₀‖²` of the unforced run.
    pub max_decay_ratio: f64,
    /// `‖U_t‖²` never increased between samples.
    pub monotone: bool,
    pub ou_horizon: f64,
    /// Ensemble mean of `‖θ_T‖²` with `B` disabled.
    pub ou_mean: f64,
    /// Monte Carlo standard error of `ou_mean`.
    pub ou_std_error: f64,
    pub ou_theory: f64,
    pub ou_z_score: f64,
    pub ou_seeds: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct EnergyRow {
    t: f64,
    h_norm_sq: f64,
    h1_norm_sq: f64,
    dissipation_budget: f64,
    super_lyapunov_v: f64,
    decay_ratio: f64,
}

fn unforced_series(cfg: &ExperimentConfig) -> Result<Vec<(f64, SpectralState)>> {
    let grid = SpectralGrid::new(cfg.n)?;
    let integ = Integrator::new(grid, cfg.params, cfg.dt)?;
    let steps = steps_for(cfg.horizon, cfg.dt, "horizon")?;
    let mut u = random_state(cfg.n, 4, cfg.energy.amplitude, cfg.seed);
    let every = cfg.energy.record_every.max(1) as u64;
    let mut traj = vec![(0.0, u.clone())];
    for k in 1..=steps {
        u = integ.step_deterministic(&u)?;
        if k % every == 0 {
            traj.push((k as f64 * cfg.dt, u.clone()));
        }
    }
    Ok(traj)
}

/// `‖θ_T‖²` of the linear system for seed `index`.
fn ou_sample(cfg: &ExperimentConfig, index: u64) -> Result<f64> {
    let opts = IntegratorOptions { nonlinear: false, cfl_check: false };
    let integ = Integrator::with_options(SpectralGrid::new(cfg.n)?, cfg.params, cfg.dt, opts)?;
    let stream = cfg.master().split(index);
    let steps = steps_for(cfg.energy.ou_horizon, cfg.dt, "ou_horizon")?;
    let mut u = SpectralState::zeros(cfg.n);
    for k in 0..steps {
        u = integ.step_sde(&u, &stream, k)?;
    }
    Ok(u.theta.sobolev_norm_sq(0))
}

/// Unforced decay and the linear-forcing variance check.
pub fn energy_audit(cfg: &ExperimentConfig) -> Result<(EnergyAudit, Vec<(f64, SpectralState)>)> {
    let traj = unforced_series(cfg)?;
    let diag = energy_report(&traj, &cfg.params, &EnergyOptions { unforced: true, ..Default::default() });
    let max_ratio = diag.iter().filter_map(|d| d.decay_ratio).fold(0.0, f64::max);
    let monotone = diag.windows(2).all(|w| w[1].h_norm_sq <= w[0].h_norm_sq * (1.0 + 1e-12));
    let samples: Vec<Result<f64>> = par::map_indexed(cfg.execution, cfg.ensemble, |i| ou_sample(cfg, i as u64));
    let vals: Vec<f64> = samples.into_iter().collect::<Result<_>>()?;
    let mean = stats::mean(&vals);
    let se = stats::std_dev(&vals) / (vals.len() as f64).sqrt();
    let theory = ou_theta_second_moment(&cfg.params, cfg.energy.ou_horizon);
    let audit = EnergyAudit {
        max_decay_ratio: max_ratio,
        monotone,
        ou_horizon: cfg.energy.ou_horizon,
        ou_mean: mean,
        ou_std_error: se,
        ou_theory: theory,
        ou_z_score: if se > 0.0 { (mean - theory) / se } else { f64::INFINITY },
        ou_seeds: vals.len(),
    };
    Ok((audit, traj))
}

fn run_energy(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<Vec<SeedStatus>> {
    let (audit, traj) = energy_audit(cfg)?;
    let diag = energy_report(&traj, &cfg.params, &EnergyOptions { unforced: true, ..Default::default() });
    let rows: Vec<EnergyRow> = diag
        .iter()
        .map(|d| EnergyRow {
            t: d.t,
            h_norm_sq: d.h_norm_sq,
            h1_norm_sq: d.h1_norm_sq,
            dissipation_budget: d.dissipation_budget,
            super_lyapunov_v: d.super_lyapunov_v,
            decay_ratio: d.decay_ratio.unwrap_or(f64::NAN),
        })
        .collect();
    o.csv("energy.csv", &rows)?;
    o.json("summary.json", &audit)?;
    Ok((0..cfg.ensemble as u64).map(|i| SeedStatus { seed_index: i, ok: true, message: None }).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_defaults_and_unknown_keys() {
        let c = ExperimentConfig::from_toml_str("kind = \"lyapunov\"\nn = 32\n[params]\nnu1 = 0.2\nnu2 = 0.1\ng = 1.0\nalphas = [1.0, 1.0, 1.0, 1.0]\n").unwrap();
        assert_eq!(c.kind, ExperimentKind::Lyapunov);
        assert_eq!(c.n, 32);
        assert_eq!(c.params.nu1, 0.2);
        assert_eq!(c.lyapunov, LyapunovOptions::default());
        assert!(ExperimentConfig::from_toml_str("kind = \"lyapunov\"\nbogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml_str("kind = \"nothing\"\n").is_err());
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut c = ExperimentConfig { n: 31, ..Default::default() };
        assert!(c.validate().is_err());
        c.n = 16;
        c.validate().unwrap();
        c.dt = 0.3;
        assert!(c.validate().is_err());
        let c = ExperimentConfig { kind: ExperimentKind::Lyapunov, burn_in: 20.0, horizon: 10.0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = ExperimentConfig { params: PhysicalParams { nu1: -1.0, ..Default::default() }, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_is_stable() {
        let c = ExperimentConfig::default();
        assert_eq!(c.hash(), ExperimentConfig::default().hash());
        let d = ExperimentConfig { seed: 2, ..Default::default() };
        assert_ne!(c.hash(), d.hash());
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn bracket_modes_radius() {
        let m = bracket_modes(1.0);
        assert_eq!(m, vec![[0, 1], [1, 0]]);
        assert_eq!(bracket_modes(2.0).len(), 6);
    }

    #[test]
    fn random_state_is_valid() {
        let u = random_state(16, 3, 1.0, 4);
        assert!(u.is_valid());
        assert_eq!(u.omega.max_mode(), 3);
        assert_eq!(u, random_state(16, 3, 1.0, 4));
    }
}
