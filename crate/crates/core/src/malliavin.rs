//! Malliavin matrix on a finite direction span, cone probes and the
//! Tikhonov-regularized control.
//!
//! For directions `p_a` the Gram entries are
//! `M_ab = Σ_q α_q² ∫₀ᵀ ⟨p_a, 𝒥_{r,T}σ_q⟩⟨p_b, 𝒥_{r,T}σ_q⟩ dr`,
//! with `𝒥_{r,T}σ_q` obtained by forward variation solves seeded at nodes `r`
//! every `node_every` base steps. Pairings are interpolated linearly in `r`
//! between nodes and integrated by the trapezoid rule at the step resolution.
//! No adjoint solve is needed: `𝒜*` only ever acts on the span.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dynamics::FORCED_MODES;
use crate::error::{Error, Result};
use crate::linearization::{jacobian_action_steps, BaseTrajectory, VariationState};
use crate::par::{self, Execution};
use crate::spectral::{in_half_lattice, trig_mode, PhysicalParams, Slot, SpectralGrid};

/// Orthonormal direction set with the mask of the low-mode/manifold block
/// that `Π_N` keeps.
#[derive(Clone, Debug)]
pub struct DirectionSet {
    pub dirs: Vec<VariationState>,
    pub in_pi: Vec<bool>,
    pub labels: Vec<String>,
}

impl DirectionSet {
    /// `ψ_j^m` and `σ_j^m` for `j ∈ ℤ²₊`, `|j| ≤ n_max`, normalized in `Ĥˢ`,
    /// followed by the unit vectors of the tangent-process block `(y, ζ)`.
    pub fn low_modes(grid: &SpectralGrid, n_max: usize, s: u32, params: &PhysicalParams) -> Result<Self> {
        let r = n_max as i64;
        let mut out = DirectionSet { dirs: Vec::new(), in_pi: Vec::new(), labels: Vec::new() };
        for slot in [Slot::Vorticity, Slot::Temperature] {
            for j1 in 0..=r {
                for j2 in -r..=r {
                    let j = [j1, j2];
                    if !in_half_lattice(j) || j1 * j1 + j2 * j2 > r * r {
                        continue;
                    }
                    for m in 0..2u8 {
                        let st = trig_mode(grid, j, m, slot)?;
                        let nrm = st.inner(&st, s, params).sqrt();
                        let name = if slot == Slot::Vorticity { "psi" } else { "sigma" };
                        out.dirs.push(VariationState::from_state(st.scale(1.0 / nrm)));
                        out.in_pi.push(slot == Slot::Vorticity);
                        out.labels.push(format!("{name}_({j1},{j2})^{m}"));
                    }
                }
            }
        }
        for (i, name) in ["y1", "y2", "zeta1", "zeta2"].iter().enumerate() {
            let mut d = VariationState::zeros(grid.n());
            if i < 2 {
                d.y[i] = 1.0;
            } else {
                d.zeta[i - 2] = 1.0;
            }
            out.dirs.push(d);
            out.in_pi.push(true);
            out.labels.push((*name).to_string());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    /// Element `Σ c_a p_a`.
    pub fn combine(&self, c: &[f64]) -> VariationState {
        let mut out = VariationState::zeros(self.dirs[0].psi.n());
        for (d, &w) in self.dirs.iter().zip(c) {
            if w != 0.0 {
                out.axpy(w, d);
            }
        }
        out
    }

    /// Coefficients `⟨p_a, v⟩`.
    pub fn coefficients(&self, v: &VariationState, s: u32, params: &PhysicalParams) -> Vec<f64> {
        self.dirs.iter().map(|d| d.inner(v, s, params)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramOptions {
    /// Base steps between forward-solve seeds.
    pub node_every: usize,
    /// Sobolev index of the state inner product.
    pub sobolev: u32,
    pub execution: Execution,
}

impl Default for GramOptions {
    fn default() -> Self {
        Self { node_every: 10, sobolev: 4, execution: Execution::Parallel }
    }
}

/// Gram matrix over a direction span together with the data the control
/// needs.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    /// Horizon `T` in time units.
    pub horizon: f64,
    /// Base steps covered (quadrature points minus one).
    pub quad_steps: usize,
    nodes: Vec<usize>,
    /// `α_q 𝒥_{r,T}σ_q` at each node.
    node_solutions: Vec<[VariationState; 4]>,
    /// `α_q ⟨p_a, 𝒥_{r,T}σ_q⟩` at each node, indexed `[node][q][a]`.
    node_pairings: Vec<[Vec<f64>; 4]>,
    dt: f64,
}

impl GramMatrix {
    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        if self.dim() == 0 {
            return 0.0;
        }
        self.entries.clone().symmetric_eigen().eigenvalues.min()
    }

    pub fn asymmetry(&self) -> f64 {
        (&self.entries - self.entries.transpose()).amax()
    }

    /// Node bracket and linear weight of base step `k`.
    fn locate(&self, k: usize) -> (usize, f64) {
        let i = match self.nodes.binary_search(&k) {
            Ok(i) => i.min(self.nodes.len() - 2),
            Err(i) => i - 1,
        };
        let (a, b) = (self.nodes[i], self.nodes[i + 1]);
        (i, (k - a) as f64 / (b - a) as f64)
    }

    /// Interpolated pairings `[q][a]` at base step `k`.
    fn pairings_at(&self, k: usize) -> [Vec<f64>; 4] {
        if self.nodes.len() == 1 {
            return self.node_pairings[0].clone();
        }
        let (i, w) = self.locate(k);
        std::array::from_fn(|q| {
            let (p0, p1) = (&self.node_pairings[i][q], &self.node_pairings[i + 1][q]);
            p0.iter().zip(p1).map(|(a, b)| (1.0 - w) * a + w * b).collect()
        })
    }

    fn trapezoid_weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.quad_steps {
            0.5 * self.dt
        } else {
            self.dt
        }
    }
}

/// Seed nodes `0, e, 2e, …` plus the end step.
fn node_grid(steps: usize, every: usize) -> Vec<usize> {
    let mut nodes: Vec<usize> = (0..=steps).step_by(every).collect();
    if *nodes.last().unwrap() != steps {
        nodes.push(steps);
    }
    nodes
}

/// Forward solves `α_q 𝒥_{r,T}σ_q` seeded at a node grid. One set serves
/// every direction span and every coarser node grid over the same window.
#[derive(Clone, Debug)]
pub struct NodeSolutions {
    pub end_step: usize,
    nodes: Vec<usize>,
    solutions: Vec<[VariationState; 4]>,
    dt: f64,
    params: PhysicalParams,
}

impl NodeSolutions {
    /// Solve from nodes `0, e, 2e, …, end_step`.
    pub fn solve(base: &BaseTrajectory, end_step: usize, node_every: usize, execution: Execution) -> Result<Self> {
        if node_every == 0 {
            return Err(Error::Config("node spacing must be positive".into()));
        }
        if end_step > base.steps() {
            return Err(Error::TimeMisalignment(format!(
                "Gram horizon of {end_step} steps exceeds the stored {} steps",
                base.steps()
            )));
        }
        let integ = base.integrator();
        let params = *integ.params();
        let dt = base.dt();
        if end_step == 0 {
            return Ok(Self { end_step, nodes: vec![0], solutions: Vec::new(), dt, params });
        }
        let grid = integ.grid();
        let nodes = node_grid(end_step, node_every);
        let sigmas: Vec<VariationState> = FORCED_MODES
            .iter()
            .zip(params.alphas)
            .map(|((j, m), a)| trig_mode(grid, *j, *m, Slot::Temperature).map(|s| VariationState::from_state(s.scale(a))))
            .collect::<Result<_>>()?;
        let jobs = nodes.len() * 4;
        let solved = par::map_indexed(execution, jobs, |i| {
            let (node, q) = (nodes[i / 4], i % 4);
            jacobian_action_steps(&sigmas[q], node, end_step, base)
        });
        let mut flat = Vec::with_capacity(jobs);
        for s in solved {
            flat.push(s?);
        }
        let mut it = flat.into_iter();
        let solutions = nodes.iter().map(|_| std::array::from_fn(|_| it.next().unwrap())).collect();
        Ok(Self { end_step, nodes, solutions, dt, params })
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Every `factor`-th node, keeping the end node.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("coarsening factor must be positive".into()));
        }
        let last = self.nodes.len() - 1;
        let keep: Vec<usize> = (0..=last).filter(|&i| i % factor == 0 || i == last).collect();
        Ok(Self {
            end_step: self.end_step,
            nodes: keep.iter().map(|&i| self.nodes[i]).collect(),
            solutions: if self.solutions.is_empty() { Vec::new() } else { keep.iter().map(|&i| self.solutions[i].clone()).collect() },
            dt: self.dt,
            params: self.params,
        })
    }

    /// Gram matrix of these solutions over `dirs`.
    pub fn gram(&self, dirs: &DirectionSet, sobolev: u32) -> GramMatrix {
        let d = dirs.len();
        let node_pairings: Vec<[Vec<f64>; 4]> = self
            .solutions
            .iter()
            .map(|sols| std::array::from_fn(|q| dirs.coefficients(&sols[q], sobolev, &self.params)))
            .collect();
        let mut gram = GramMatrix {
            entries: DMatrix::zeros(d, d),
            horizon: self.end_step as f64 * self.dt,
            quad_steps: self.end_step,
            nodes: self.nodes.clone(),
            node_solutions: self.solutions.clone(),
            node_pairings,
            dt: self.dt,
        };
        if self.end_step == 0 {
            return gram;
        }
        let mut m = DMatrix::zeros(d, d);
        for k in 0..=self.end_step {
            let w = gram.trapezoid_weight(k);
            for c in gram.pairings_at(k).iter() {
                let v = DVector::from_column_slice(c);
                m.ger(w, &v, &v, 1.0);
            }
        }
        gram.entries = m;
        gram
    }
}

/// Malliavin matrix over `[0, t_k]` (`t_k` = `end_step · dt`) restricted to
/// `dirs`.
pub fn malliavin_gram(base: &BaseTrajectory, dirs: &DirectionSet, end_step: usize, opts: &GramOptions) -> Result<GramMatrix> {
    Ok(NodeSolutions::solve(base, end_step, opts.node_every, opts.execution)?.gram(dirs, opts.sobolev))
}

/// Outcome of a cone probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConeProbe {
    pub alpha: f64,
    /// Smallest Rayleigh quotient over the sampled cone directions.
    pub probe_min: f64,
    /// Smallest eigenvalue of the matrix over the whole span.
    pub min_eigenvalue: f64,
    pub samples: usize,
}

/// Unit directions with a uniformly distributed weight `‖Π c‖ ∈ [0, 1]`;
/// the cone `‖Π c‖ ≥ α` selects a subset, so the probe is monotone in `α`.
pub fn cone_samples(in_pi: &[bool], trials: usize, seed: u64) -> Vec<(f64, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unif = Uniform::new_inclusive(0.0, 1.0);
    let has_rest = in_pi.iter().any(|b| !b);
    let unit = |mask: bool, rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> =
                in_pi.iter().map(|&b| if b == mask { StandardNormal.sample(rng) } else { 0.0 }).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-12 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    };
    (0..trials)
        .map(|_| {
            let a: f64 = if has_rest { unif.sample(&mut rng) } else { 1.0 };
            let u = unit(true, &mut rng);
            let w = if has_rest { unit(false, &mut rng) } else { vec![0.0; in_pi.len()] };
            let b = (1.0 - a * a).max(0.0).sqrt();
            (a, u.iter().zip(&w).map(|(x, y)| a * x + b * y).collect())
        })
        .collect()
}

/// `min ⟨c, M c⟩` over sampled unit `c` with `‖Π c‖ ≥ α`.
pub fn cone_probe(m: &DMatrix<f64>, in_pi: &[bool], alpha: f64, trials: usize, seed: u64) -> Result<ConeProbe> {
    if m.nrows() != in_pi.len() || !in_pi.iter().any(|&b| b) {
        return Err(Error::Config("cone probe needs a nonempty low-mode block matching the matrix".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("cone parameter {alpha} outside [0, 1]")));
    }
    let mut best = f64::INFINITY;
    let mut count = 0;
    for (a, c) in cone_samples(in_pi, trials, seed) {
        if a < alpha {
            continue;
        }
        let v = DVector::from_vec(c);
        best = best.min(v.dot(&(m * &v)));
        count += 1;
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("no sampled direction inside the cone alpha = {alpha}")));
    }
    let min_eigenvalue = m.clone().symmetric_eigen().eigenvalues.min();
    Ok(ConeProbe { alpha, probe_min: best, min_eigenvalue, samples: count })
}

/// Regularized control `v^β` on `[0, t_h]` and its residual at `t_1`.
#[derive(Clone, Debug)]
pub struct RegularizedControl {
    pub beta: f64,
    /// `v^β` at each base step of `[0, t_h]`, one entry per forced mode.
    pub control: Vec<[f64; 4]>,
    /// `β 𝒥_{h,1}(M + β)^{-1}𝒥_{0,h}p` (on the span).
    pub rho_identity: VariationState,
    /// `𝒥_{h,1}(Π𝒥_{0,h}p − Π𝒜_{0,h}v^β)` computed from the control itself.
    pub rho_direct: VariationState,
    /// `𝒥_{0,1}p − 𝒜_{0,1}v^β` with nothing projected.
    pub rho_full: VariationState,
    /// `‖ρ_direct − ρ_identity‖ / max(‖ρ_identity‖, ‖𝒥_{0,1}p‖)`.
    pub identity_gap: f64,
    pub control_norm: f64,
}

/// Control for direction `p` with the Gram matrix over `[0, half_step]` and
/// residual at `end_step`.
pub fn regularized_control(
    base: &BaseTrajectory,
    dirs: &DirectionSet,
    p: &VariationState,
    beta: f64,
    half_step: usize,
    end_step: usize,
    opts: &GramOptions,
) -> Result<RegularizedControl> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Config(format!("regularization beta = {beta} must be positive")));
    }
    if half_step > end_step || end_step > base.steps() {
        return Err(Error::TimeMisalignment(format!("invalid control window {half_step}/{end_step}")));
    }
    let gram = malliavin_gram(base, dirs, half_step, opts)?;
    regularized_control_with(base, dirs, &gram, p, beta, end_step, opts)
}

/// As [`regularized_control`] with the Gram matrix over `[0, t_h]` given.
pub fn regularized_control_with(
    base: &BaseTrajectory,
    dirs: &DirectionSet,
    gram: &GramMatrix,
    p: &VariationState,
    beta: f64,
    end_step: usize,
    opts: &GramOptions,
) -> Result<RegularizedControl> {
    Ok(regularized_controls(base, dirs, gram, p, &[beta], end_step, opts)?.remove(0))
}

/// Controls for several `β` sharing the solves that do not depend on `β`.
pub fn regularized_controls(
    base: &BaseTrajectory,
    dirs: &DirectionSet,
    gram: &GramMatrix,
    p: &VariationState,
    betas: &[f64],
    end_step: usize,
    opts: &GramOptions,
) -> Result<Vec<RegularizedControl>> {
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
        return Err(Error::Config(format!("regularization beta = {b} must be positive")));
    }
    let half_step = gram.quad_steps;
    if half_step > end_step || end_step > base.steps() {
        return Err(Error::TimeMisalignment(format!("invalid control window {half_step}/{end_step}")));
    }
    let params = *base.integrator().params();
    let s = opts.sobolev;
    let d = dirs.len();
    let jp = jacobian_action_steps(p, 0, half_step, base)?;
    let full_jp = jacobian_action_steps(&jp, half_step, end_step, base)?;
    let q = DVector::from_vec(dirs.coefficients(&jp, s, &params));
    betas
        .iter()
        .map(|&beta| {
            let reg = &gram.entries + DMatrix::identity(d, d) * beta;
            let x = match reg.clone().cholesky() {
                Some(ch) => ch.solve(&q),
                None => reg.lu().solve(&q).ok_or_else(|| Error::Numerical("singular regularized Gram matrix".into()))?,
            };
            // v_q(r_k) = Σ_a α_q⟨p_a, 𝒥_{r,h}σ_q⟩ x_a
            let mut control = Vec::with_capacity(half_step + 1);
            let mut a_v = VariationState::zeros(p.psi.n());
            let mut proj_av = DVector::zeros(d);
            let mut vnorm = 0.0;
            if half_step > 0 {
                for k in 0..=half_step {
                    let pk = gram.pairings_at(k);
                    let v: [f64; 4] = std::array::from_fn(|qi| pk[qi].iter().zip(x.iter()).map(|(a, b)| a * b).sum());
                    let w = gram.trapezoid_weight(k);
                    let (i, lw) = if gram.nodes.len() == 1 { (0, 0.0) } else { gram.locate(k) };
                    for qi in 0..4 {
                        let c = w * v[qi];
                        if c == 0.0 {
                            continue;
                        }
                        a_v.axpy(c * (1.0 - lw), &gram.node_solutions[i][qi]);
                        if lw != 0.0 {
                            a_v.axpy(c * lw, &gram.node_solutions[i + 1][qi]);
                        }
                        proj_av += DVector::from_column_slice(&pk[qi]) * c;
                        vnorm += w * v[qi] * v[qi];
                    }
                    control.push(v);
                }
            }
            let rho_identity = jacobian_action_steps(&dirs.combine((x.clone() * beta).as_slice()), half_step, end_step, base)?;
            let resid = &q - &proj_av;
            let rho_direct = jacobian_action_steps(&dirs.combine(resid.as_slice()), half_step, end_step, base)?;
            let mut rho_full = full_jp.clone();
            rho_full.axpy(-1.0, &jacobian_action_steps(&a_v, half_step, end_step, base)?);
            let mut diff = rho_direct.clone();
            diff.axpy(-1.0, &rho_identity);
            let scale = rho_identity.norm(s, &params).max(full_jp.norm(s, &params)).max(f64::MIN_POSITIVE);
            Ok(RegularizedControl {
                beta,
                control,
                identity_gap: diff.norm(s, &params) / scale,
                rho_identity,
                rho_direct,
                rho_full,
                control_norm: vnorm.sqrt(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Integrator;
    use crate::linearization::Particle;
    use crate::rng::NoiseStream;
    use crate::testutil::random_state;
    use approx::assert_abs_diff_eq;

    fn base(seed: u64, steps: usize, params: PhysicalParams) -> BaseTrajectory {
        let integ = Integrator::new(SpectralGrid::new(16).unwrap(), params, 5e-3).unwrap();
        let u0 = random_state(16, 3, 4, 0.3, seed);
        BaseTrajectory::record(integ, u0, Particle::new([1.0, 2.0], [1.0, 0.0]), &NoiseStream::new(seed, 1), steps).unwrap()
    }

    fn dirs(n_max: usize) -> DirectionSet {
        DirectionSet::low_modes(&SpectralGrid::new(16).unwrap(), n_max, 4, &PhysicalParams::default()).unwrap()
    }

    #[test]
    fn direction_set_is_orthonormal() {
        let d = dirs(2);
        assert_eq!(d.len(), 28);
        let p = PhysicalParams::default();
        for a in 0..d.len() {
            for b in 0..d.len() {
                let ip = d.dirs[a].inner(&d.dirs[b], 4, &p);
                assert_abs_diff_eq!(ip, if a == b { 1.0 } else { 0.0 }, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn coarsened_solutions_match_direct_solve() {
        let b = base(3, 12, PhysicalParams::default());
        let fine = NodeSolutions::solve(&b, 12, 2, Execution::Sequential).unwrap();
        let coarse = fine.coarsen(2).unwrap();
        assert_eq!(coarse.nodes(), &[0, 4, 8, 12]);
        let direct = malliavin_gram(&b, &dirs(1), 12, &GramOptions { node_every: 4, sobolev: 4, execution: Execution::Sequential }).unwrap();
        assert_eq!(coarse.gram(&dirs(1), 4).entries, direct.entries);
        // uneven tail keeps the end node
        assert_eq!(NodeSolutions::solve(&b, 10, 4, Execution::Sequential).unwrap().coarsen(2).unwrap().nodes(), &[0, 8, 10]);
    }

    #[test]
    fn zero_horizon_gives_zero_matrix() {
        let b = base(1, 4, PhysicalParams::default());
        let g = malliavin_gram(&b, &dirs(1), 0, &GramOptions::default()).unwrap();
        assert_eq!(g.entries.amax(), 0.0);
        assert!(malliavin_gram(&b, &dirs(1), 5, &GramOptions::default()).is_err());
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let b = base(2, 40, PhysicalParams::default());
        let g = malliavin_gram(&b, &dirs(2), 40, &GramOptions::default()).unwrap();
        assert!(g.asymmetry() < 1e-14 * g.entries.amax());
        assert!(g.min_eigenvalue() >= -1e-10);
        let seq = malliavin_gram(&b, &dirs(2), 40, &GramOptions { execution: Execution::Sequential, ..Default::default() })
            .unwrap();
        assert_eq!(seq.entries, g.entries);
    }

    #[test]
    fn single_mode_quadratic_form() {
        // one forced mode: ⟨p, M p⟩ = α² ∫ ⟨p, 𝒥_{r,T}σ⟩² dr, computed here
        // independently with a solve from every step
        let params = PhysicalParams::default().with_alphas([0.7, 0.0, 0.0, 0.0]);
        let b = base(3, 30, params);
        let grid = SpectralGrid::new(16).unwrap();
        let sigma = VariationState::from_state(trig_mode(&grid, [1, 0], 0, Slot::Temperature).unwrap());
        let p = jacobian_action_steps(&sigma, 12, 30, &b).unwrap();
        let set = DirectionSet { dirs: vec![p.clone()], in_pi: vec![true], labels: vec!["p".into()] };
        let fine = malliavin_gram(&b, &set, 30, &GramOptions { node_every: 1, ..Default::default() }).unwrap();
        let mut direct = 0.0;
        for k in 0..=30 {
            let f = p.inner(&jacobian_action_steps(&sigma, k, 30, &b).unwrap(), 4, &params);
            let w = if k == 0 || k == 30 { 0.5 } else { 1.0 } * b.dt();
            direct += w * 0.49 * f * f;
        }
        assert_abs_diff_eq!(fine.entries[(0, 0)], direct, epsilon = 1e-12 * direct);
        let coarse = malliavin_gram(&b, &set, 30, &GramOptions { node_every: 10, ..Default::default() }).unwrap();
        let half = malliavin_gram(&b, &set, 30, &GramOptions { node_every: 5, ..Default::default() }).unwrap();
        let (c, h) = (coarse.entries[(0, 0)], half.entries[(0, 0)]);
        assert!((c - direct).abs() / direct < 1e-2, "coarse {c} vs {direct}");
        assert!((h - direct).abs() <= (c - direct).abs() + 1e-15);
    }

    #[test]
    fn cone_probe_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let r = cone_probe(&id, &[true, false, false], 0.3, 200, 1).unwrap();
        assert_abs_diff_eq!(r.probe_min, 1.0, epsilon = 1e-12);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        for alpha in [0.2, 0.5, 0.9] {
            let r = cone_probe(&m, &[true, false], alpha, 500, 2).unwrap();
            assert!(r.probe_min >= alpha * alpha - 1e-14);
            assert_abs_diff_eq!(r.min_eigenvalue, 0.0, epsilon = 1e-15);
        }
        assert!(cone_probe(&m, &[false, false], 0.5, 10, 0).is_err());
    }

    #[test]
    fn cone_probe_monotone_in_alpha() {
        let b = base(4, 30, PhysicalParams::default());
        let d = dirs(2);
        let g = malliavin_gram(&b, &d, 30, &GramOptions::default()).unwrap();
        let mut last = -1.0;
        for alpha in [0.0, 0.25, 0.5, 0.75] {
            let r = cone_probe(&g.entries, &d.in_pi, alpha, 400, 9).unwrap();
            assert!(r.probe_min >= last);
            assert!(r.probe_min >= r.min_eigenvalue - 1e-15);
            last = r.probe_min;
        }
    }

    #[test]
    fn control_identity_and_limits() {
        let b = base(5, 40, PhysicalParams::default());
        let d = dirs(1);
        let opts = GramOptions::default();
        let p = d.dirs[0].clone();
        let c = regularized_control(&b, &d, &p, 1e-2, 20, 40, &opts).unwrap();
        assert!(c.identity_gap < 1e-8, "gap {}", c.identity_gap);
        let zero = regularized_control(&b, &d, &VariationState::zeros(16), 1e-2, 20, 40, &opts).unwrap();
        assert_eq!(zero.control_norm, 0.0);
        assert_eq!(zero.rho_identity.norm(4, b.integrator().params()), 0.0);
        // β → ∞: no control, ρ → Π-projected 𝒥_{0,1}p on the span
        let big = regularized_control(&b, &d, &p, 1e12, 20, 40, &opts).unwrap();
        assert!(big.control_norm < 1e-9);
        let jp = jacobian_action_steps(&p, 0, 40, &b).unwrap();
        let mut diff = big.rho_full.clone();
        diff.axpy(-1.0, &jp);
        assert!(diff.norm(4, b.integrator().params()) < 1e-8 * jp.norm(4, b.integrator().params()));
        assert!(regularized_control(&b, &d, &p, 0.0, 20, 40, &opts).is_err());
    }

    #[test]
    fn batched_controls_match_single() {
        let b = base(7, 40, PhysicalParams::default());
        let d = dirs(1);
        let opts = GramOptions::default();
        let g = malliavin_gram(&b, &d, 20, &opts).unwrap();
        let p = d.dirs[3].clone();
        let all = regularized_controls(&b, &d, &g, &p, &[1e-1, 1e-3], 40, &opts).unwrap();
        for rc in &all {
            let one = regularized_control_with(&b, &d, &g, &p, rc.beta, 40, &opts).unwrap();
            assert_eq!(one.control, rc.control);
            assert_eq!(one.identity_gap, rc.identity_gap);
        }
        assert!(regularized_controls(&b, &d, &g, &p, &[1e-1, -1.0], 40, &opts).is_err());
    }

    #[test]
    fn residual_shrinks_with_beta() {
        let b = base(6, 200, PhysicalParams::default());
        let d = dirs(1);
        let params = *b.integrator().params();
        for idx in [2, 6] {
            let p = d.dirs[idx].clone();
            let mut last = f64::INFINITY;
            for beta in [1.0, 1e-2, 1e-4, 1e-6] {
                let c = regularized_control(&b, &d, &p, beta, 100, 200, &GramOptions::default()).unwrap();
                let r = c.rho_identity.norm(4, &params);
                assert!(r <= last, "{}: beta {beta}: {r} > {last}", d.labels[idx]);
                last = r;
            }
        }
    }
}
