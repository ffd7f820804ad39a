//! Closed-form Lie brackets of the drift with the forcing directions, their
//! finite-difference counterparts, and the span vector fields on the particle
//! manifold.
//!
//! Conventions: `[X, Y](U) = DY(U)X(U) − DX(U)Y(U)`, `σ_j^m` sits in the
//! temperature slot and `ψ_j^m` in the vorticity slot, `cos` for even `m` and
//! `sin` for odd `m`, indices of `m` taken mod 2.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::{drift, linear_a, nonlinear_b, buoyancy, FORCED_MODES};
use crate::error::{Error, Result};
use crate::lagrangian::torus_distance;
use crate::mat2::{self, Mat2};
use crate::spectral::{
    in_half_lattice, trig_gradient, trig_mode, trig_value, PhysicalParams, ScalarField, Slot, SpectralGrid, SpectralState,
    VelocityEvaluator,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BracketKind {
    Y,
    Z,
    ZSigma,
    Jjm,
}

/// A bracket vector field evaluated at one base state.
#[derive(Clone, Debug, PartialEq)]
pub struct BracketField {
    pub value: SpectralState,
    pub kind: BracketKind,
    /// `(j, m)` and, for two-index brackets, `(k, m')`.
    pub indices: Vec<([i64; 2], u8)>,
}

/// Below this `ε` central differences are dominated by roundoff.
pub const FD_EPS_FLOOR: f64 = 1e-9;

fn sigma(grid: &SpectralGrid, j: [i64; 2], m: u8) -> Result<SpectralState> {
    trig_mode(grid, j, m % 2, Slot::Temperature)
}

fn psi(grid: &SpectralGrid, j: [i64; 2], m: u8) -> Result<SpectralState> {
    trig_mode(grid, j, m % 2, Slot::Vorticity)
}

fn sign(m: u8) -> f64 {
    if m % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn norm_sq(j: [i64; 2]) -> f64 {
    (j[0] * j[0] + j[1] * j[1]) as f64
}

/// `DY(U)X(U) − DX(U)Y(U)` with central differences of step `eps`.
pub fn lie_bracket_fd(
    x: &dyn Fn(&SpectralState) -> SpectralState,
    y: &dyn Fn(&SpectralState) -> SpectralState,
    u: &SpectralState,
    eps: f64,
) -> Result<SpectralState> {
    if !(eps >= FD_EPS_FLOOR && eps.is_finite()) {
        return Err(Error::Config(format!("finite-difference step {eps} below the roundoff floor {FD_EPS_FLOOR}")));
    }
    let xu = x(u);
    let yu = y(u);
    let dir = |f: &dyn Fn(&SpectralState) -> SpectralState, v: &SpectralState| {
        let mut plus = u.clone();
        plus.axpy(eps, v);
        let mut minus = u.clone();
        minus.axpy(-eps, v);
        f(&plus).sub(&f(&minus)).scale(0.5 / eps)
    };
    let mut out = dir(y, &xu);
    out.axpy(-1.0, &dir(x, &yu));
    if !out.is_finite() {
        return Err(Error::Numerical("non-finite finite-difference bracket".into()));
    }
    Ok(out)
}

/// `Y_j^m(U) = [F(U), σ_j^m] = ν₂|j|²σ_j^m + B(U,σ_j^m) + (−1)^m g j₁ ψ_j^{m+1}`.
pub fn y_field(grid: &SpectralGrid, j: [i64; 2], m: u8, u: &SpectralState, params: &PhysicalParams) -> Result<BracketField> {
    let s = sigma(grid, j, m)?;
    let mut v = s.scale(params.nu2 * norm_sq(j));
    v.axpy(1.0, &nonlinear_b(grid, u, &s));
    if j[0] != 0 {
        v.axpy(sign(m) * params.g * j[0] as f64, &psi(grid, j, m + 1)?);
    }
    Ok(BracketField { value: v, kind: BracketKind::Y, indices: vec![(j, m % 2)] })
}

/// `Z_j^m(U) = [F(U), Y_j^m(U)]` from its eight-term expansion.
pub fn z_field(grid: &SpectralGrid, j: [i64; 2], m: u8, u: &SpectralState, params: &PhysicalParams) -> Result<BracketField> {
    let s = sigma(grid, j, m)?;
    let p1 = psi(grid, j, m + 1)?;
    let g = params.g;
    let j1 = j[0] as f64;
    let k2 = norm_sq(j);
    let bs = nonlinear_b(grid, u, &s);
    let f = drift(grid, u, params);

    let mut v = nonlinear_b(grid, &f, &s);
    v.axpy(params.nu2 * params.nu2 * k2 * k2, &s);
    v.axpy(sign(m) * (params.nu1 + params.nu2) * g * j1 * k2, &p1);
    v.axpy(1.0, &linear_a(&bs, params));
    v.axpy(sign(m) * g * j1, &nonlinear_b(grid, &p1, u));
    let mut inner = s.scale(-params.nu2 * k2);
    inner.axpy(-sign(m) * g * j1, &p1);
    v.axpy(-1.0, &nonlinear_b(grid, u, &inner));
    v.axpy(1.0, &nonlinear_b(grid, u, &bs));
    v.axpy(-1.0, &buoyancy(&bs, params));
    Ok(BracketField { value: v, kind: BracketKind::Z, indices: vec![(j, m % 2)] })
}

/// `[Z_j^m(U), σ_k^{m'}] = g((−1)^{m+1} j₁ B(ψ_j^{m+1}, σ_k^{m'}) + (−1)^{m'} k₁ B(ψ_k^{m'+1}, σ_j^m))`,
/// which does not depend on `U` and lives in the temperature slot.
pub fn z_sigma_bracket(
    grid: &SpectralGrid,
    j: [i64; 2],
    m: u8,
    k: [i64; 2],
    mk: u8,
    params: &PhysicalParams,
) -> Result<BracketField> {
    let sj = sigma(grid, j, m)?;
    let sk = sigma(grid, k, mk)?;
    let mut v = SpectralState::zeros(grid.n());
    if j[0] != 0 {
        v.axpy(-sign(m) * params.g * j[0] as f64, &nonlinear_b(grid, &psi(grid, j, m + 1)?, &sk));
    }
    if k[0] != 0 {
        v.axpy(sign(mk) * params.g * k[0] as f64, &nonlinear_b(grid, &psi(grid, k, mk + 1)?, &sj));
    }
    Ok(BracketField { value: v, kind: BracketKind::ZSigma, indices: vec![(j, m % 2), (k, mk % 2)] })
}

/// The affine field `J_{j,m}(U)` projected onto `|k|_∞ ≤ n_hat`.
///
/// For `j₁ = 0` the combination uses `H_{p,q}^{a,b} := [Z_p^a, σ_q^b]`; this
/// branch is experimental.
pub fn j_jm_field(
    grid: &SpectralGrid,
    j: [i64; 2],
    m: u8,
    u: &SpectralState,
    n_hat: usize,
    params: &PhysicalParams,
) -> Result<BracketField> {
    if !in_half_lattice(j) {
        return Err(Error::InvalidMode { j, reason: "not in the half lattice".into() });
    }
    if n_hat > grid.cut() {
        return Err(Error::Config(format!("projection cutoff {n_hat} exceeds truncation {}", grid.cut())));
    }
    let g = params.g;
    let v = if j[0] != 0 {
        let s1 = sigma(grid, j, m + 1)?;
        let c = sign(m) / (g * j[0] as f64);
        let mut v = s1.scale(c * params.nu2 * norm_sq(j));
        v.axpy(c, &nonlinear_b(grid, u, &s1));
        v
    } else {
        let jj = norm_sq(j);
        let pre = (1.0 + jj) / (g * g * jj.powf(1.5));
        let p = [j[0] + 1, j[1]];
        let e1 = [1, 0];
        let h = |a: u8, b: u8| z_sigma_bracket(grid, p, a, e1, b, params).map(|f| f.value);
        let mut v = if m % 2 == 0 { h(0, 0)?.add(&h(1, 1)?).scale(-1.0) } else { h(1, 0)?.sub(&h(0, 1)?) };
        v = v.scale(pre);
        v
    };
    let value = SpectralState { omega: v.omega.project(n_hat), theta: v.theta.project(n_hat) };
    Ok(BracketField { value, kind: BracketKind::Jjm, indices: vec![(j, m % 2)] })
}

/// `ω̄_T = ω_T − g∂₁(σ̃_θ W_T)`: the vorticity with the direct response to
/// the accumulated noise removed.
pub fn bar_vorticity(u_t: &SpectralState, w_t: [f64; 4], params: &PhysicalParams) -> ScalarField {
    let n = u_t.n();
    let mut s = ScalarField::zeros(n);
    for (i, (k, l)) in FORCED_MODES.iter().enumerate() {
        s.axpy(params.alphas[i] * w_t[i], &ScalarField::trig(n, k[0], k[1], *l));
    }
    let mut out = u_t.omega.clone();
    out.axpy(-params.g, &s.d1());
    out
}

/// Span vector field
/// `𝒱_j^m = (−1)^m g j₁ (j⊥jᵀ/|j|²) ψ̃_j^{m+1} w − g j₁ ∇w (j⊥/|j|²) ψ̃_j^m − (ν₁+ν₂) g j₁ j⊥ ψ̃_j^m`
/// with `w = u_T + ū_T` and `j⊥ = (−j₂, j₁)`.
#[derive(Clone, Debug)]
pub struct VSpanField {
    pub j: [i64; 2],
    pub m: u8,
    w: VelocityEvaluator,
    g: f64,
    nu_sum: f64,
}

impl VSpanField {
    /// From `ω_T + ω̄_T`, the vorticity whose velocity is `u_T + ū_T`.
    pub fn new(j: [i64; 2], m: u8, omega_sum: &ScalarField, params: &PhysicalParams) -> Result<Self> {
        if !in_half_lattice(j) {
            return Err(Error::InvalidMode { j, reason: "not in the half lattice".into() });
        }
        if j[0] == 0 {
            log::warn!("span field with j₁ = 0 vanishes identically (j = {j:?})");
        }
        Ok(Self { j, m: m % 2, w: VelocityEvaluator::new(omega_sum), g: params.g, nu_sum: params.nu1 + params.nu2 })
    }

    /// From `U_T` and the Brownian path value `W_T`.
    pub fn from_state(j: [i64; 2], m: u8, u_t: &SpectralState, w_t: [f64; 4], params: &PhysicalParams) -> Result<Self> {
        let mut sum = bar_vorticity(u_t, w_t, params);
        sum.axpy(1.0, &u_t.omega);
        Self::new(j, m, &sum, params)
    }

    pub fn is_zero(&self) -> bool {
        self.j[0] == 0
    }

    pub fn eval(&self, x: [f64; 2]) -> [f64; 2] {
        self.jet(x).0
    }

    /// Value and gradient `D[i][k] = ∂_k 𝒱_i`.
    pub fn jet(&self, x: [f64; 2]) -> ([f64; 2], Mat2) {
        if self.is_zero() {
            return ([0.0; 2], [[0.0; 2]; 2]);
        }
        let (j, m) = (self.j, self.m);
        let jj = norm_sq(j);
        let jp = [-(j[1] as f64), j[0] as f64];
        let jv = [j[0] as f64, j[1] as f64];
        let gj = self.g * j[0] as f64;
        let c1 = sign(m) * gj / jj;
        let c2 = gj / jj;
        let c3 = self.nu_sum * gj;
        let (p1, g1) = (trig_value(j, m + 1, x), trig_gradient(j, m + 1, x));
        let (p0, g0) = (trig_value(j, m, x), trig_gradient(j, m, x));
        let wj = self.w.jet(x, 2);
        let jw = jv[0] * wj.u[0] + jv[1] * wj.u[1];
        let dw_jp = mat2::apply(&wj.du, &jp);
        let mut val = [0.0; 2];
        let mut grad = [[0.0; 2]; 2];
        for i in 0..2 {
            val[i] = c1 * p1 * jp[i] * jw - c2 * p0 * dw_jp[i] - c3 * p0 * jp[i];
            for k in 0..2 {
                let d_jw = jv[0] * wj.du[0][k] + jv[1] * wj.du[1][k];
                let d_dwjp = wj.d2u[i][0][k] * jp[0] + wj.d2u[i][1][k] * jp[1];
                grad[i][k] = c1 * jp[i] * (g1[k] * jw + p1 * d_jw) - c2 * (g0[k] * dw_jp[i] + p0 * d_dwjp) - c3 * g0[k] * jp[i];
            }
        }
        (val, grad)
    }
}

/// Modes `j ∈ ℤ²₊` with `|j| ≤ n_max` and `j₁ ≠ 0`.
pub fn span_modes(n_max: f64) -> Vec<[i64; 2]> {
    let r = n_max.floor() as i64;
    let mut out = Vec::new();
    for j1 in 1..=r {
        for j2 in -r..=r {
            if ((j1 * j1 + j2 * j2) as f64) <= n_max * n_max {
                out.push([j1, j2]);
            }
        }
    }
    out
}

/// Point of the particle manifold at which the span is tested.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpanPoint {
    TwoPoint { x: [f64; 2], y: [f64; 2] },
    Tangent { x: [f64; 2], tau: [f64; 2] },
    /// The Jacobian factor is represented by `∇𝒱` in `sl₂` coordinates
    /// (right-trivialized tangent space), independent of `A`.
    Jacobian { x: [f64; 2] },
}

impl SpanPoint {
    pub fn dim(&self) -> usize {
        match self {
            SpanPoint::TwoPoint { .. } | SpanPoint::Tangent { .. } => 4,
            SpanPoint::Jacobian { .. } => 5,
        }
    }

    /// `Θ_𝒱` at this point.
    pub fn lift(&self, v: &VSpanField) -> Vec<f64> {
        match *self {
            SpanPoint::TwoPoint { x, y } => {
                let (a, b) = (v.eval(x), v.eval(y));
                vec![a[0], a[1], b[0], b[1]]
            }
            SpanPoint::Tangent { x, tau } => {
                let (a, d) = v.jet(x);
                let t = mat2::apply(&d, &tau);
                vec![a[0], a[1], t[0], t[1]]
            }
            SpanPoint::Jacobian { x } => {
                let (a, d) = v.jet(x);
                let s = mat2::sl2_coords(&d);
                vec![a[0], a[1], s[0], s[1], s[2]]
            }
        }
    }
}

/// Result of a span test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanReport {
    pub fields: usize,
    pub dim: usize,
    pub singular_values: Vec<f64>,
    pub min_singular: f64,
}

/// Smallest singular value of the lifted span vectors `Θ_{𝒱_j^m}` for
/// `|j| ≤ n_max`, `j₁ ≠ 0`, `m ∈ {0, 1}`.
pub fn span_check(point: &SpanPoint, omega_sum: &ScalarField, n_max: f64, params: &PhysicalParams) -> Result<SpanReport> {
    if n_max < 1.0 {
        return Err(Error::Config(format!("span radius {n_max} must be at least 1")));
    }
    if let SpanPoint::TwoPoint { x, y } = point {
        if torus_distance(*x, *y) < 1e-8 {
            return Err(Error::Degenerate("two-point span check on the diagonal".into()));
        }
    }
    let modes = span_modes(n_max);
    let mut cols = Vec::new();
    for j in &modes {
        for m in 0..2 {
            cols.push(point.lift(&VSpanField::new(*j, m, omega_sum, params)?));
        }
    }
    let dim = point.dim();
    let mat = DMatrix::from_fn(dim, cols.len(), |r, c| cols[c][r]);
    let mut sv: Vec<f64> = mat.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let min = if cols.len() < dim { 0.0 } else { sv.last().copied().unwrap_or(0.0) };
    Ok(SpanReport { fields: cols.len(), dim, singular_values: sv, min_singular: min })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::random_state;
    use approx::assert_abs_diff_eq;

    fn grid() -> SpectralGrid {
        SpectralGrid::new(16).unwrap()
    }

    fn max_diff(a: &SpectralState, b: &SpectralState) -> f64 {
        a.sub(b).max_abs()
    }

    #[test]
    fn constant_fields_commute() {
        let u = random_state(16, 3, 4, 0.5, 1);
        let c1 = random_state(16, 3, 4, 0.5, 2);
        let c2 = random_state(16, 3, 4, 0.5, 3);
        let b = lie_bracket_fd(&|_| c1.clone(), &|_| c2.clone(), &u, 1e-4).unwrap();
        assert!(b.max_abs() == 0.0);
        assert!(lie_bracket_fd(&|_| c1.clone(), &|_| c2.clone(), &u, 1e-12).is_err());
    }

    #[test]
    fn bilinear_pair() {
        // X(U) = B(U,U), Y ≡ ψ_{(1,0)}^0: [X, Y] = −B(U,ψ) − B(ψ,U)
        let g = grid();
        let u = random_state(16, 3, 4, 0.5, 4);
        let p = trig_state_v(&g);
        let gb = g.clone();
        let b = lie_bracket_fd(&move |v| nonlinear_b(&gb, v, v), &|_| p.clone(), &u, 1e-3).unwrap();
        let mut exact = nonlinear_b(&g, &u, &p).scale(-1.0);
        exact.axpy(-1.0, &nonlinear_b(&g, &p, &u));
        assert!(max_diff(&b, &exact) < 1e-11);
    }

    fn trig_state_v(g: &SpectralGrid) -> SpectralState {
        trig_mode(g, [1, 0], 0, Slot::Vorticity).unwrap()
    }

    #[test]
    fn y_at_rest() {
        let g = grid();
        let p = PhysicalParams::new(0.1, 1.0, 1.0, [0.25; 4]).unwrap();
        let y = y_field(&g, [1, 0], 0, &SpectralState::zeros(16), &p).unwrap().value;
        let x = [0.7, 1.9];
        assert_abs_diff_eq!(y.omega.eval(x), x[0].sin(), epsilon = 1e-14);
        assert_abs_diff_eq!(y.theta.eval(x), x[0].cos(), epsilon = 1e-14);
        // j₁ = 0 carries no vorticity term
        let u = random_state(16, 3, 4, 0.5, 5);
        let y = y_field(&g, [0, 1], 1, &u, &p).unwrap().value;
        let s = trig_mode(&g, [0, 1], 1, Slot::Temperature).unwrap();
        let mut exact = s.scale(p.nu2);
        exact.axpy(1.0, &nonlinear_b(&g, &u, &s));
        assert!(max_diff(&y, &exact) < 1e-15);
    }

    #[test]
    fn y_and_z_match_finite_differences() {
        let g = grid();
        let p = PhysicalParams::default();
        for seed in 0..3 {
            let u = random_state(16, 3, 5, 0.5, 10 + seed);
            for (j, m) in [([1, 0], 0u8), ([0, 1], 1), ([1, -1], 1), ([2, 1], 0)] {
                let f = |v: &SpectralState| drift(&g, v, &p);
                let s = trig_mode(&g, j, m, Slot::Temperature).unwrap();
                let fd = lie_bracket_fd(&f, &|_| s.clone(), &u, 1e-3).unwrap();
                let y = y_field(&g, j, m, &u, &p).unwrap().value;
                let scale = y.max_abs().max(1.0);
                assert!(max_diff(&fd, &y) < 1e-10 * scale, "Y mismatch {}", max_diff(&fd, &y));
                let yf = |v: &SpectralState| y_field(&g, j, m, v, &p).unwrap().value;
                let fd = lie_bracket_fd(&f, &yf, &u, 1e-3).unwrap();
                let z = z_field(&g, j, m, &u, &p).unwrap().value;
                let scale = z.max_abs().max(1.0);
                assert!(max_diff(&fd, &z) < 1e-9 * scale, "Z mismatch {}", max_diff(&fd, &z));
            }
        }
    }

    #[test]
    fn z_at_rest() {
        let g = grid();
        let p = PhysicalParams::new(0.2, 0.3, 1.5, [0.25; 4]).unwrap();
        let j = [2, 1];
        for m in 0..2u8 {
            let z = z_field(&g, j, m, &SpectralState::zeros(16), &p).unwrap().value;
            let s = trig_mode(&g, j, m, Slot::Temperature).unwrap();
            let ps = trig_mode(&g, j, (m + 1) % 2, Slot::Vorticity).unwrap();
            let mut exact = s.scale(p.nu2 * p.nu2 * 25.0);
            exact.axpy(sign(m) * (p.nu1 + p.nu2) * p.g * 2.0 * 5.0, &ps);
            assert!(max_diff(&z, &exact) < 1e-12);
        }
    }

    #[test]
    fn z_sigma_examples() {
        let g = grid();
        let p = PhysicalParams::default();
        let z = z_sigma_bracket(&g, [0, 1], 0, [0, 2], 1, &p).unwrap();
        assert!(z.value.is_zero());
        // j = k = (1,0), m = m' = 0: g(−B(ψ¹,σ⁰) + B(ψ¹,σ⁰)) = 0 by symmetry
        let z = z_sigma_bracket(&g, [1, 0], 0, [1, 0], 0, &p).unwrap();
        assert!(z.value.max_abs() < 1e-16);
        // j = (1,0), m = 0, k = (0,1), m' = 0: −g B(sin x₁, cos x₂);
        // u(sin x₁) = (0, −cos x₁), so the θ part is −g·(−cos x₁)(−sin x₂)
        let z = z_sigma_bracket(&g, [1, 0], 0, [0, 1], 0, &p).unwrap().value;
        assert!(z.omega.is_zero());
        for x in [[0.3f64, 1.2f64], [2.5, 4.0]] {
            assert_abs_diff_eq!(z.theta.eval(x), -p.g * x[0].cos() * x[1].sin(), epsilon = 1e-13);
        }
    }

    #[test]
    fn z_sigma_is_state_independent_and_matches_fd() {
        let g = grid();
        let p = PhysicalParams::default();
        let (j, m, k, mk) = ([1, 1], 0u8, [1, 0], 1u8);
        let exact = z_sigma_bracket(&g, j, m, k, mk, &p).unwrap().value;
        for seed in 0..3 {
            let u = random_state(16, 3, 5, 0.5, 30 + seed);
            let zf = |v: &SpectralState| z_field(&g, j, m, v, &p).unwrap().value;
            let s = trig_mode(&g, k, mk, Slot::Temperature).unwrap();
            let fd = lie_bracket_fd(&zf, &|_| s.clone(), &u, 0.5).unwrap();
            assert!(max_diff(&fd, &exact) < 1e-10, "{}", max_diff(&fd, &exact));
        }
    }

    #[test]
    fn j_jm_examples() {
        let g = grid();
        let p = PhysicalParams::new(0.1, 0.3, 2.0, [0.25; 4]).unwrap();
        let jf = j_jm_field(&g, [1, 0], 0, &SpectralState::zeros(16), 5, &p).unwrap().value;
        let exact = trig_mode(&g, [1, 0], 1, Slot::Temperature).unwrap().scale(p.nu2 / p.g);
        assert!(max_diff(&jf, &exact) < 1e-15);
        let u = random_state(16, 4, 6, 0.5, 40);
        let jf = j_jm_field(&g, [2, 1], 1, &u, 2, &p).unwrap().value;
        for (k1, k2, z) in jf.theta.modes().chain(jf.omega.modes()) {
            if k1.abs() > 2 || k2.abs() > 2 {
                assert_eq!(z.norm(), 0.0);
            }
        }
        assert!(j_jm_field(&g, [1, 0], 0, &u, 6, &p).is_err());
    }

    #[test]
    fn j_jm_is_affine() {
        let g = grid();
        let p = PhysicalParams::default();
        let u1 = random_state(16, 3, 5, 0.5, 50);
        let u2 = random_state(16, 3, 5, 0.5, 51);
        for (j, m) in [([1, 2], 0u8), ([0, 1], 0), ([0, 2], 1)] {
            let f = |v: &SpectralState| j_jm_field(&g, j, m, v, 5, &p).unwrap().value;
            let mut d = f(&u1.add(&u2));
            d.axpy(-1.0, &f(&u1));
            d.axpy(-1.0, &f(&u2));
            d.axpy(1.0, &f(&SpectralState::zeros(16)));
            assert!(d.max_abs() < 1e-14);
        }
    }

    #[test]
    fn span_field_at_rest() {
        let p = PhysicalParams::default();
        let zero = ScalarField::zeros(16);
        let v = VSpanField::new([1, 0], 0, &zero, &p).unwrap();
        let x = [0.4, 2.0];
        let val = v.eval(x);
        assert_abs_diff_eq!(val[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(val[1], -(p.nu1 + p.nu2) * p.g * x[0].cos(), epsilon = 1e-15);
        let v = VSpanField::new([0, 1], 0, &zero, &p).unwrap();
        assert_eq!(v.eval(x), [0.0, 0.0]);
        // the constant-coefficient term is the velocity of the linear part of Z at rest
        let g = grid();
        for (j, m) in [([1, 0], 0u8), ([1, 1], 1), ([2, -1], 0)] {
            let z = z_field(&g, j, m, &SpectralState::zeros(16), &p).unwrap().value;
            let vel = VelocityEvaluator::new(&z.omega).velocity(x);
            let v = VSpanField::new(j, m, &zero, &p).unwrap().eval(x);
            assert_abs_diff_eq!(vel[0], v[0], epsilon = 1e-13);
            assert_abs_diff_eq!(vel[1], v[1], epsilon = 1e-13);
        }
    }

    #[test]
    fn span_field_gradient_and_assembly() {
        let p = PhysicalParams::default();
        let u = random_state(16, 3, 5, 0.5, 60);
        let w_t = [0.3, -0.2, 0.5, 0.1];
        let bar = bar_vorticity(&u, w_t, &p);
        let v = VSpanField::from_state([1, 1], 1, &u, w_t, &p).unwrap();
        let x = [1.3, 0.4];
        let (_, d) = v.jet(x);
        let h = 1e-6;
        for k in 0..2 {
            let mut xp = x;
            xp[k] += h;
            let mut xm = x;
            xm[k] -= h;
            let (a, b) = (v.eval(xp), v.eval(xm));
            for i in 0..2 {
                assert_abs_diff_eq!(d[i][k], (a[i] - b[i]) / (2.0 * h), epsilon = 1e-7);
            }
        }
        // 𝒱 is the sum of the Z-part (driven by ū) and the x-bracket part (driven by u)
        let (j, m) = ([1i64, 1i64], 1u8);
        let jj = 2.0;
        let jp = [-1.0, 1.0];
        let jv = [1.0, 1.0];
        let part = |omega: &ScalarField, with_linear: bool| -> [f64; 2] {
            let w = VelocityEvaluator::new(omega).jet(x, 1);
            let p1 = trig_value(j, m + 1, x);
            let p0 = trig_value(j, m, x);
            let jw = jv[0] * w.u[0] + jv[1] * w.u[1];
            let dj = mat2::apply(&w.du, &jp);
            let mut out = [0.0; 2];
            for i in 0..2 {
                out[i] = -p.g * p1 * jp[i] * jw / jj - p.g * p0 * dj[i] / jj;
                if with_linear {
                    out[i] -= (p.nu1 + p.nu2) * p.g * jp[i] * p0;
                }
            }
            out
        };
        let (zp, yp) = (part(&bar, true), part(&u.omega, false));
        let val = v.eval(x);
        assert_abs_diff_eq!(val[0], zp[0] + yp[0], epsilon = 1e-13);
        assert_abs_diff_eq!(val[1], zp[1] + yp[1], epsilon = 1e-13);
    }

    #[test]
    fn span_at_rest_and_degenerate_pairs() {
        let p = PhysicalParams::default();
        let zero = ScalarField::zeros(16);
        let r = span_check(&SpanPoint::Tangent { x: [0.3, 1.7], tau: [1.0, 0.0] }, &zero, 2.0, &p).unwrap();
        assert_eq!(r.dim, 4);
        assert_eq!(r.fields, 8);
        assert!(r.min_singular > 1e-3, "{}", r.min_singular);
        let r = span_check(&SpanPoint::Jacobian { x: [0.3, 1.7] }, &zero, 2.0, &p).unwrap();
        assert!(r.min_singular > 1e-3);
        let r = span_check(&SpanPoint::TwoPoint { x: [0.3, 1.7], y: [2.0, 4.0] }, &zero, 2.0, &p).unwrap();
        assert!(r.min_singular > 1e-3);
        let e = span_check(&SpanPoint::TwoPoint { x: [0.3, 1.7], y: [0.3, 1.7] }, &zero, 2.0, &p);
        assert!(matches!(e, Err(Error::Degenerate(_))));
    }
}
