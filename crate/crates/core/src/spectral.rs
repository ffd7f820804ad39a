//! Truncated Fourier fields on the torus [0, 2π]².
//!
//! Coefficients are stored in a full `n × n` complex array so that
//! `f(x) = Σ c_k e^{i k·x}`; index `(k1 mod n) * n + (k2 mod n)`.
//! Every field produced here is Hermitian and mean-zero, with the Nyquist
//! row/column zeroed.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TWO_PI: f64 = 2.0 * PI;
const AREA: f64 = 4.0 * PI * PI;

/// Grid resolution plus cached FFT plans.
#[derive(Clone)]
pub struct SpectralGrid {
    n: usize,
    cut: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    tables: Arc<Tables>,
}

/// Per-index wavenumber tables.
#[derive(Debug)]
pub(crate) struct Tables {
    pub kx: Vec<f64>,
    pub ky: Vec<f64>,
    pub ksq: Vec<f64>,
    pub inv_ksq: Vec<f64>,
    /// Flat indices with `0 < |k|_∞ ≤ cut` (below Nyquist).
    pub retained: Vec<usize>,
    /// Flat index of `−k` for each entry of `retained`.
    pub mirror: Vec<usize>,
}

impl Tables {
    fn new(n: usize, cut: usize) -> Self {
        let mut t = Tables {
            kx: vec![0.0; n * n],
            ky: vec![0.0; n * n],
            ksq: vec![0.0; n * n],
            inv_ksq: vec![0.0; n * n],
            retained: Vec::new(),
            mirror: Vec::new(),
        };
        let lim = (cut as i64).min(n as i64 / 2 - 1);
        for i in 0..n * n {
            let k1 = wavenumber(n, i / n);
            let k2 = wavenumber(n, i % n);
            t.kx[i] = k1 as f64;
            t.ky[i] = k2 as f64;
            let q = (k1 * k1 + k2 * k2) as f64;
            t.ksq[i] = q;
            t.inv_ksq[i] = if q == 0.0 { 0.0 } else { 1.0 / q };
            if (k1 != 0 || k2 != 0) && k1.abs() <= lim && k2.abs() <= lim {
                t.retained.push(i);
                t.mirror.push(idx(n, -k1, -k2));
            }
        }
        t
    }
}

impl fmt::Debug for SpectralGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpectralGrid").field("n", &self.n).field("cut", &self.cut).finish()
    }
}

impl SpectralGrid {
    /// Grid with the default two-thirds cutoff `⌊n/3⌋`.
    pub fn new(n: usize) -> Result<Self> {
        Self::with_cut(n, n / 3)
    }

    pub fn with_cut(n: usize, cut: usize) -> Result<Self> {
        if n < 8 || n % 2 != 0 {
            return Err(Error::InvalidGrid(format!("n = {n} must be even and at least 8")));
        }
        if cut > n / 2 {
            return Err(Error::InvalidGrid(format!("dealias cut {cut} exceeds n/2 = {}", n / 2)));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            cut,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            tables: Arc::new(Tables::new(n, cut)),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn cut(&self) -> usize {
        self.cut
    }

    /// Largest wavenumber that can be represented (below Nyquist).
    pub fn kmax(&self) -> i64 {
        self.n as i64 / 2 - 1
    }

    pub fn zeros(&self) -> ScalarField {
        ScalarField::zeros(self.n)
    }

    pub fn zero_state(&self) -> SpectralState {
        SpectralState::zeros(self.n)
    }

    /// Grid point coordinates `2π j / n`.
    pub fn coord(&self, j: usize) -> f64 {
        TWO_PI * j as f64 / self.n as f64
    }

    fn fft2(&self, buf: &mut [Complex64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(buf);
        transpose(buf, self.n);
        plan.process(buf);
        transpose(buf, self.n);
    }

    pub(crate) fn tables(&self) -> &Tables {
        &self.tables
    }

    /// Rows `|k1| ≤ cut` of an `n × n` buffer, as at most two contiguous ranges.
    fn low_rows(&self, buf: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let (n, c) = (self.n, self.cut);
        if 2 * c + 1 >= n {
            plan.process(buf);
        } else {
            plan.process(&mut buf[..(c + 1) * n]);
            plan.process(&mut buf[(n - c) * n..]);
        }
    }

    /// Inverse transform of a spectrum supported in `|k1| ≤ cut`; the grid
    /// values come out transposed (`x₂` index major).
    pub(crate) fn inverse_transposed(&self, buf: &mut [Complex64]) {
        self.low_rows(buf, &self.inv);
        transpose(buf, self.n);
        self.inv.process(buf);
    }

    /// Forward transform of transposed grid values; only rows `|k1| ≤ cut`
    /// of the result are valid, and they are unnormalized.
    pub(crate) fn forward_transposed(&self, buf: &mut [Complex64]) {
        self.fwd.process(buf);
        transpose(buf, self.n);
        self.low_rows(buf, &self.fwd);
    }

    /// Split an unnormalized transform of `p + i q` into the retained
    /// spectra of `p` and `q`.
    pub(crate) fn unpack_pair(&self, buf: &[Complex64]) -> (ScalarField, ScalarField) {
        let n = self.n;
        let scale = 0.5 / (n * n) as f64;
        let mut a = ScalarField::zeros(n);
        let mut b = ScalarField::zeros(n);
        let t = &self.tables;
        for (&i, &j) in t.retained.iter().zip(&t.mirror) {
            let z = buf[i];
            let zm = buf[j].conj();
            a.c[i] = (z + zm) * scale;
            let d = z - zm;
            b.c[i] = Complex64::new(d.im * scale, -d.re * scale);
        }
        (a, b)
    }

    /// Physical values on the grid, `out[j1 * n + j2] = f(x_{j1}, x_{j2})`.
    pub fn to_physical(&self, f: &ScalarField) -> Vec<f64> {
        debug_assert_eq!(f.n, self.n);
        let mut buf = f.c.clone();
        self.fft2(&mut buf, true);
        buf.iter().map(|z| z.re).collect()
    }

    /// Two real fields with one complex transform.
    pub fn to_physical_pair(&self, a: &ScalarField, b: &ScalarField) -> (Vec<f64>, Vec<f64>) {
        let mut buf: Vec<Complex64> =
            a.c.iter().zip(&b.c).map(|(x, y)| Complex64::new(x.re - y.im, x.im + y.re)).collect();
        self.fft2(&mut buf, true);
        (buf.iter().map(|z| z.re).collect(), buf.iter().map(|z| z.im).collect())
    }

    /// Forward transform of grid values, truncated to the dealias cut.
    pub fn from_physical(&self, p: &[f64]) -> ScalarField {
        let zero = vec![0.0; p.len()];
        self.from_physical_pair(p, &zero).0
    }

    /// Forward transform of two real grid functions, each dealiased,
    /// mean-removed and exactly Hermitian.
    pub fn from_physical_pair(&self, p: &[f64], q: &[f64]) -> (ScalarField, ScalarField) {
        let n = self.n;
        assert_eq!(p.len(), n * n);
        assert_eq!(q.len(), n * n);
        let mut buf: Vec<Complex64> = p.iter().zip(q).map(|(&a, &b)| Complex64::new(a, b)).collect();
        self.fft2(&mut buf, false);
        self.unpack_pair(&buf)
    }

    /// Wavenumbers in storage order for one axis.
    pub fn wavenumber(&self, i: usize) -> i64 {
        wavenumber(self.n, i)
    }
}

fn transpose(buf: &mut [Complex64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            buf.swap(i * n + j, j * n + i);
        }
    }
}

#[inline]
pub(crate) fn idx(n: usize, k1: i64, k2: i64) -> usize {
    let m = n as i64;
    (k1.rem_euclid(m) * m + k2.rem_euclid(m)) as usize
}

#[inline]
pub(crate) fn wavenumber(n: usize, i: usize) -> i64 {
    let i = i as i64;
    let m = n as i64;
    if i < m / 2 {
        i
    } else if i > m / 2 {
        i - m
    } else {
        m / 2
    }
}

/// Multiply by `i s` without rounding asymmetries.
#[inline]
fn times_i(z: Complex64, s: f64) -> Complex64 {
    Complex64::new(-s * z.im, s * z.re)
}

/// Real scalar field given by its Fourier coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    n: usize,
    c: Vec<Complex64>,
}

impl ScalarField {
    pub fn zeros(n: usize) -> Self {
        Self { n, c: vec![Complex64::new(0.0, 0.0); n * n] }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.c
    }

    /// Raw mutable access. Callers must keep the field Hermitian.
    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.c
    }

    /// Build from raw coefficients, validating the real-field invariants.
    pub fn from_coeffs(n: usize, c: Vec<Complex64>) -> Result<Self> {
        if c.len() != n * n {
            return Err(Error::InvalidGrid(format!("expected {} coefficients, got {}", n * n, c.len())));
        }
        let f = Self { n, c };
        if f.c[0].norm() != 0.0 {
            return Err(Error::NonZeroMean(f.c[0].norm()));
        }
        if !f.is_hermitian() {
            return Err(Error::InvalidGrid("coefficients are not Hermitian".into()));
        }
        Ok(f)
    }

    pub fn coeff(&self, k1: i64, k2: i64) -> Complex64 {
        self.c[idx(self.n, k1, k2)]
    }

    /// Set `c_k = z` and `c_{-k} = conj z`.
    pub fn set_pair(&mut self, k1: i64, k2: i64, z: Complex64) {
        let n = self.n;
        let h = n as i64 / 2;
        assert!(k1.abs() < h && k2.abs() < h, "mode ({k1},{k2}) outside resolution");
        assert!(k1 != 0 || k2 != 0, "mean mode is not a free coefficient");
        self.c[idx(n, k1, k2)] = z;
        self.c[idx(n, -k1, -k2)] = z.conj();
    }

    /// `cos(k·x)` (m = 0) or `sin(k·x)` (m = 1).
    pub fn trig(n: usize, k1: i64, k2: i64, m: u8) -> Self {
        let mut f = Self::zeros(n);
        let z = if m % 2 == 0 { Complex64::new(0.5, 0.0) } else { Complex64::new(0.0, -0.5) };
        f.set_pair(k1, k2, z);
        f
    }

    pub fn mean(&self) -> Complex64 {
        self.c[0]
    }

    pub fn is_hermitian(&self) -> bool {
        let n = self.n;
        let m = n as i64;
        for i in 0..n {
            for j in 0..n {
                let k1 = wavenumber(n, i);
                let k2 = wavenumber(n, j);
                if self.c[i * n + j] != self.c[idx(n, -k1, -k2)].conj() {
                    return false;
                }
                if (k1 == m / 2 || k2 == m / 2) && self.c[i * n + j].norm() != 0.0 {
                    return false;
                }
            }
        }
        true
    }

    /// Largest `|k|_∞` with a nonzero coefficient.
    pub fn max_mode(&self) -> i64 {
        let n = self.n;
        let mut best = 0;
        for i in 0..n {
            for j in 0..n {
                if self.c[i * n + j].norm() != 0.0 {
                    best = best.max(wavenumber(n, i).abs().max(wavenumber(n, j).abs()));
                }
            }
        }
        best
    }

    pub fn is_zero(&self) -> bool {
        self.c.iter().all(|z| z.re == 0.0 && z.im == 0.0)
    }

    /// Iterate `(k1, k2, c_k)` over all stored modes.
    pub fn modes(&self) -> impl Iterator<Item = (i64, i64, Complex64)> + '_ {
        let n = self.n;
        self.c.iter().enumerate().map(move |(i, &z)| (wavenumber(n, i / n), wavenumber(n, i % n), z))
    }

    fn map_modes(&self, f: impl Fn(i64, i64, Complex64) -> Complex64) -> Self {
        let n = self.n;
        let c = self
            .c
            .iter()
            .enumerate()
            .map(|(i, &z)| f(wavenumber(n, i / n), wavenumber(n, i % n), z))
            .collect();
        Self { n, c }
    }

    /// `∂₁ f`.
    pub fn d1(&self) -> Self {
        self.map_modes(|k1, _, z| times_i(z, k1 as f64))
    }

    /// `∂₂ f`.
    pub fn d2(&self) -> Self {
        self.map_modes(|_, k2, z| times_i(z, k2 as f64))
    }

    pub fn laplacian(&self) -> Self {
        self.map_modes(|k1, k2, z| z * (-((k1 * k1 + k2 * k2) as f64)))
    }

    /// `Δ⁻¹ f` on mean-zero fields.
    pub fn inv_laplacian(&self) -> Self {
        self.map_modes(|k1, k2, z| {
            let k2s = (k1 * k1 + k2 * k2) as f64;
            if k2s == 0.0 {
                Complex64::new(0.0, 0.0)
            } else {
                z * (-1.0 / k2s)
            }
        })
    }

    /// Multiply each mode by `exp(-nu |k|^2 h)`.
    pub fn heat(&self, nu_h: f64) -> Self {
        self.map_modes(|k1, k2, z| z * (-nu_h * (k1 * k1 + k2 * k2) as f64).exp())
    }

    /// Zero every coefficient with `|k|_∞ > cut`.
    pub fn dealias(&self, cut: usize) -> Self {
        let cut = cut as i64;
        self.map_modes(|k1, k2, z| if k1.abs() > cut || k2.abs() > cut { Complex64::new(0.0, 0.0) } else { z })
    }

    /// Keep only modes with `|k|_∞ ≤ cut`; alias of [`dealias`](Self::dealias)
    /// used for low-mode projections.
    pub fn project(&self, cut: usize) -> Self {
        self.dealias(cut)
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { n: self.n, c: self.c.iter().map(|z| z * a).collect() }
    }

    pub fn axpy(&mut self, a: f64, x: &ScalarField) {
        for (y, xv) in self.c.iter_mut().zip(&x.c) {
            *y += xv * a;
        }
    }

    /// `(2π)² Σ (1+|k|²)^s |c_k|²`.
    pub fn sobolev_norm_sq(&self, s: u32) -> f64 {
        self.sobolev_inner(self, s)
    }

    pub fn sobolev_inner(&self, other: &ScalarField, s: u32) -> f64 {
        let n = self.n;
        let mut acc = 0.0;
        for (i, (a, b)) in self.c.iter().zip(&other.c).enumerate() {
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            let k1 = wavenumber(n, i / n);
            let k2 = wavenumber(n, i % n);
            let w = (1.0 + (k1 * k1 + k2 * k2) as f64).powi(s as i32);
            acc += w * (a.re * b.re + a.im * b.im);
        }
        AREA * acc
    }

    /// Exact trigonometric sum at an arbitrary point.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.jet(x, 0).d[0][0]
    }

    /// All partial derivatives `∂₁^a ∂₂^b f(x)` with `a + b ≤ order` (≤ 4).
    pub fn jet(&self, x: [f64; 2], order: usize) -> Jet {
        PointEvaluator::new(self).jet(x, order)
    }
}

/// Half-plane list of the nonzero modes of one field, for repeated
/// off-grid evaluation.
#[derive(Clone, Debug)]
pub struct PointEvaluator {
    modes: Vec<(i64, i64, Complex64)>,
    kmax: i64,
}

impl PointEvaluator {
    pub fn new(f: &ScalarField) -> Self {
        let n = f.n;
        let mut modes = Vec::new();
        let mut kmax = 0;
        for (i, &z) in f.c.iter().enumerate() {
            if z.re == 0.0 && z.im == 0.0 {
                continue;
            }
            let (k1, k2) = (wavenumber(n, i / n), wavenumber(n, i % n));
            if k1 > 0 || (k1 == 0 && k2 > 0) {
                modes.push((k1, k2, z));
                kmax = kmax.max(k1.abs().max(k2.abs()));
            }
        }
        Self { modes, kmax }
    }

    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.jet(x, 0).d[0][0]
    }

    /// All partial derivatives `∂₁^a ∂₂^b f(x)` with `a + b ≤ order` (≤ 4).
    pub fn jet(&self, x: [f64; 2], order: usize) -> Jet {
        assert!(order <= 4);
        let kmax = self.kmax;
        let e1: Vec<Complex64> = (0..=kmax).map(|k| cis(k as f64 * x[0])).collect();
        let e2: Vec<Complex64> = (-kmax..=kmax).map(|k| cis(k as f64 * x[1])).collect();
        let mut d = [[0.0; 5]; 5];
        if order <= 2 {
            for &(k1, k2, c) in &self.modes {
                let z = c * e1[k1 as usize] * e2[(k2 + kmax) as usize];
                let (re, im) = (2.0 * z.re, 2.0 * z.im);
                let (f1, f2) = (k1 as f64, k2 as f64);
                d[0][0] += re;
                d[1][0] -= f1 * im;
                d[0][1] -= f2 * im;
                if order == 2 {
                    d[2][0] -= f1 * f1 * re;
                    d[1][1] -= f1 * f2 * re;
                    d[0][2] -= f2 * f2 * re;
                }
            }
            return Jet { d, order };
        }
        for &(k1, k2, c) in &self.modes {
            let z = c * e1[k1 as usize] * e2[(k2 + kmax) as usize];
            // Re(i^p z) for p = 0..3
            let rot = [z.re, -z.im, -z.re, z.im];
            let (f1, f2) = (k1 as f64, k2 as f64);
            let mut p1 = 1.0;
            for a in 0..=order {
                let mut p12 = p1;
                for b in 0..=(order - a) {
                    d[a][b] += 2.0 * p12 * rot[(a + b) % 4];
                    p12 *= f2;
                }
                p1 *= f1;
            }
        }
        Jet { d, order }
    }
}

#[inline]
fn cis(t: f64) -> Complex64 {
    let (s, c) = t.sin_cos();
    Complex64::new(c, s)
}

/// Partial derivatives of a scalar at a point: `d[a][b] = ∂₁^a ∂₂^b f`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    pub d: [[f64; 5]; 5],
    pub order: usize,
}

/// Velocity and its derivatives at a point.
///
/// `du[i][k] = ∂_k u_i`, `d2u[i][k][l] = ∂_k ∂_l u_i`,
/// `d3u[i][k][l][m] = ∂_k ∂_l ∂_m u_i`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct VelocityJet {
    pub u: [f64; 2],
    pub du: [[f64; 2]; 2],
    pub d2u: [[[f64; 2]; 2]; 2],
    pub d3u: [[[[f64; 2]; 2]; 2]; 2],
}

impl VelocityJet {
    /// From the jet of the stream function (`u = (-∂₂ψ, ∂₁ψ)`).
    pub fn from_stream(psi: &Jet) -> Self {
        let d = &psi.d;
        let order = psi.order;
        // ∂^{(a,b)} u_i for multi-index counts
        let comp = |i: usize, a: usize, b: usize| -> f64 {
            if i == 0 {
                -d[a][b + 1]
            } else {
                d[a + 1][b]
            }
        };
        let mut out = VelocityJet::default();
        for i in 0..2 {
            out.u[i] = comp(i, 0, 0);
            if order >= 2 {
                for k in 0..2 {
                    out.du[i][k] = comp(i, (k == 0) as usize, (k == 1) as usize);
                }
            }
            if order >= 3 {
                for k in 0..2 {
                    for l in 0..2 {
                        let a = (k == 0) as usize + (l == 0) as usize;
                        out.d2u[i][k][l] = comp(i, a, 2 - a);
                    }
                }
            }
            if order >= 4 {
                for k in 0..2 {
                    for l in 0..2 {
                        for m in 0..2 {
                            let a = (k == 0) as usize + (l == 0) as usize + (m == 0) as usize;
                            out.d3u[i][k][l][m] = comp(i, a, 3 - a);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Stream function `ψ = Δ⁻¹ ω`, so that `u = ∇⊥ψ = (−∂₂ψ, ∂₁ψ)`.
pub fn stream_function(omega: &ScalarField) -> ScalarField {
    omega.inv_laplacian()
}

/// Velocity jet of the field induced by `omega` at `x`; `order` is the
/// number of velocity derivatives wanted (0..=3).
pub fn velocity_jet(omega: &ScalarField, x: [f64; 2], order: usize) -> VelocityJet {
    assert!(order <= 3);
    let psi = stream_function(omega);
    VelocityJet::from_stream(&psi.jet(x, order + 1))
}

/// Precomputed stream function for repeated point queries on one field.
#[derive(Clone, Debug)]
pub struct VelocityEvaluator {
    psi: PointEvaluator,
}

impl VelocityEvaluator {
    pub fn new(omega: &ScalarField) -> Self {
        Self { psi: PointEvaluator::new(&stream_function(omega)) }
    }

    /// Velocity of a field that vanishes identically.
    pub fn zero() -> Self {
        Self { psi: PointEvaluator { modes: Vec::new(), kmax: 0 } }
    }

    pub fn is_zero(&self) -> bool {
        self.psi.modes.is_empty()
    }

    pub fn velocity(&self, x: [f64; 2]) -> [f64; 2] {
        self.jet(x, 0).u
    }

    pub fn jet(&self, x: [f64; 2], order: usize) -> VelocityJet {
        VelocityJet::from_stream(&self.psi.jet(x, order + 1))
    }
}

/// Biot–Savart: `u = ∇⊥Δ⁻¹ω`, returned as spectral components `(u₁, u₂)`.
pub fn biot_savart(omega: &ScalarField) -> Result<(ScalarField, ScalarField)> {
    if omega.c[0].norm() != 0.0 {
        return Err(Error::NonZeroMean(omega.c[0].norm()));
    }
    Ok(biot_savart_unchecked(omega))
}

pub(crate) fn biot_savart_unchecked(omega: &ScalarField) -> (ScalarField, ScalarField) {
    let u1 = omega.map_modes(|k1, k2, z| {
        let k2s = (k1 * k1 + k2 * k2) as f64;
        if k2s == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            times_i(z, k2 as f64 / k2s)
        }
    });
    let u2 = omega.map_modes(|k1, k2, z| {
        let k2s = (k1 * k1 + k2 * k2) as f64;
        if k2s == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            times_i(z, -(k1 as f64) / k2s)
        }
    });
    (u1, u2)
}

/// Physical constants of the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    pub nu1: f64,
    pub nu2: f64,
    pub g: f64,
    pub alphas: [f64; 4],
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self { nu1: 0.1, nu2: 0.1, g: 1.0, alphas: [0.25; 4] }
    }
}

impl PhysicalParams {
    pub fn new(nu1: f64, nu2: f64, g: f64, alphas: [f64; 4]) -> Result<Self> {
        let p = Self { nu1, nu2, g, alphas };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.nu1 > 0.0 && self.nu1.is_finite()) || !(self.nu2 > 0.0 && self.nu2.is_finite()) {
            return Err(Error::InvalidParams(format!("viscosities must be positive (nu1 = {}, nu2 = {})", self.nu1, self.nu2)));
        }
        if self.g == 0.0 || !self.g.is_finite() {
            return Err(Error::InvalidParams("g must be nonzero".into()));
        }
        if self.alphas.iter().any(|a| *a == 0.0 || !a.is_finite()) {
            return Err(Error::InvalidParams(format!("noise amplitudes must be nonzero: {:?}", self.alphas)));
        }
        Ok(())
    }

    pub fn kappa(&self) -> f64 {
        self.nu1.min(self.nu2)
    }

    pub fn varkappa(&self) -> f64 {
        self.nu1 * self.nu2 / (self.g * self.g)
    }

    /// Same physics with different noise amplitudes; zero amplitudes are
    /// allowed here for deterministic and diagnostic runs.
    pub fn with_alphas(mut self, alphas: [f64; 4]) -> Self {
        self.alphas = alphas;
        self
    }
}

/// Base process state `U = (ω, θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub omega: ScalarField,
    pub theta: ScalarField,
}

/// Which component a basis function occupies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Vorticity,
    Temperature,
}

impl SpectralState {
    pub fn zeros(n: usize) -> Self {
        Self { omega: ScalarField::zeros(n), theta: ScalarField::zeros(n) }
    }

    pub fn new(omega: ScalarField, theta: ScalarField) -> Self {
        assert_eq!(omega.n, theta.n);
        Self { omega, theta }
    }

    pub fn n(&self) -> usize {
        self.omega.n
    }

    pub fn scale(&self, a: f64) -> Self {
        Self { omega: self.omega.scale(a), theta: self.theta.scale(a) }
    }

    pub fn axpy(&mut self, a: f64, x: &SpectralState) {
        self.omega.axpy(a, &x.omega);
        self.theta.axpy(a, &x.theta);
    }

    pub fn add(&self, other: &SpectralState) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &SpectralState) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn map(&self, f: impl Fn(&ScalarField) -> ScalarField) -> Self {
        Self { omega: f(&self.omega), theta: f(&self.theta) }
    }

    pub fn dealias(&self, cut: usize) -> Self {
        self.map(|f| f.dealias(cut))
    }

    pub fn is_zero(&self) -> bool {
        self.omega.is_zero() && self.theta.is_zero()
    }

    pub fn is_finite(&self) -> bool {
        self.omega.c.iter().chain(&self.theta.c).all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn is_valid(&self) -> bool {
        self.omega.mean().norm() == 0.0
            && self.theta.mean().norm() == 0.0
            && self.omega.is_hermitian()
            && self.theta.is_hermitian()
    }

    /// Weighted inner product `ϰ⟨ω,ω'⟩_{Wˢ} + ⟨θ,θ'⟩_{Wˢ}`.
    pub fn inner(&self, other: &SpectralState, s: u32, params: &PhysicalParams) -> f64 {
        params.varkappa() * self.omega.sobolev_inner(&other.omega, s) + self.theta.sobolev_inner(&other.theta, s)
    }

    /// Largest coefficient modulus over both components.
    pub fn max_abs(&self) -> f64 {
        self.omega.c.iter().chain(&self.theta.c).fold(0.0, |m, z| m.max(z.norm()))
    }
}

/// `‖U‖²_{Ĥˢ} = ϰ‖ω‖²_{Wˢ} + ‖θ‖²_{Wˢ}`.
pub fn weighted_norm(u: &SpectralState, s: u32, params: &PhysicalParams) -> f64 {
    u.inner(u, s, params)
}

/// `(j₁, j₂)` lies in the half lattice `j₁ > 0` or `j₁ = 0, j₂ > 0`.
pub fn in_half_lattice(j: [i64; 2]) -> bool {
    j[0] > 0 || (j[0] == 0 && j[1] > 0)
}

/// Basis element: `σ_j^m` in the temperature slot, `ψ_j^m` in the vorticity
/// slot; `cos(j·x)` for even `m`, `sin(j·x)` for odd `m`.
pub fn trig_mode(grid: &SpectralGrid, j: [i64; 2], m: u8, slot: Slot) -> Result<SpectralState> {
    if !in_half_lattice(j) {
        return Err(Error::InvalidMode { j, reason: "not in the half lattice".into() });
    }
    if j[0].abs() > grid.cut as i64 || j[1].abs() > grid.cut as i64 {
        return Err(Error::InvalidMode { j, reason: format!("outside truncation |k|_inf <= {}", grid.cut) });
    }
    Ok(trig_state(grid.n, j, m, slot))
}

pub(crate) fn trig_state(n: usize, j: [i64; 2], m: u8, slot: Slot) -> SpectralState {
    let f = ScalarField::trig(n, j[0], j[1], m);
    match slot {
        Slot::Vorticity => SpectralState { omega: f, theta: ScalarField::zeros(n) },
        Slot::Temperature => SpectralState { omega: ScalarField::zeros(n), theta: f },
    }
}

/// Pointwise value of `cos(j·x)` or `sin(j·x)`.
pub fn trig_value(j: [i64; 2], m: u8, x: [f64; 2]) -> f64 {
    let a = j[0] as f64 * x[0] + j[1] as f64 * x[1];
    if m % 2 == 0 {
        a.cos()
    } else {
        a.sin()
    }
}

/// Gradient of `cos(j·x)` or `sin(j·x)`.
pub fn trig_gradient(j: [i64; 2], m: u8, x: [f64; 2]) -> [f64; 2] {
    let a = j[0] as f64 * x[0] + j[1] as f64 * x[1];
    let d = if m % 2 == 0 { -a.sin() } else { a.cos() };
    [j[0] as f64 * d, j[1] as f64 * d]
}

/// Reduce a coordinate into `[0, 2π)`.
pub fn wrap(x: f64) -> f64 {
    let r = x.rem_euclid(TWO_PI);
    if r >= TWO_PI {
        0.0
    } else {
        r
    }
}

/// Signed difference `a − b` reduced to `(−π, π]`.
pub fn circle_diff(a: f64, b: f64) -> f64 {
    let mut d = (a - b).rem_euclid(TWO_PI);
    if d > PI {
        d -= TWO_PI;
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(n: usize, kmax: i64, modes: usize, rng: &mut impl Rng) -> ScalarField {
        let mut f = ScalarField::zeros(n);
        for _ in 0..modes {
            let k1 = rng.gen_range(0..=kmax);
            let k2 = rng.gen_range(-kmax..=kmax);
            if k1 == 0 && k2 <= 0 {
                continue;
            }
            let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            f.set_pair(k1, k2, z);
        }
        f
    }

    #[test]
    fn grid_validation() {
        assert!(SpectralGrid::new(6).is_err());
        assert!(SpectralGrid::new(9).is_err());
        assert!(SpectralGrid::with_cut(16, 9).is_err());
        let g = SpectralGrid::new(64).unwrap();
        assert_eq!(g.cut(), 21);
    }

    #[test]
    fn biot_savart_examples() {
        let n = 16;
        let w = ScalarField::trig(n, 1, 0, 0);
        let (u1, u2) = biot_savart(&w).unwrap();
        assert!(u1.is_zero());
        let x = [0.7, 1.3];
        assert_abs_diff_eq!(u2.eval(x), x[0].sin(), epsilon = 1e-14);

        let (z1, z2) = biot_savart(&ScalarField::zeros(n)).unwrap();
        assert!(z1.is_zero() && z2.is_zero());

        let w = ScalarField::trig(n, 1, 1, 1);
        let (u1, u2) = biot_savart(&w).unwrap();
        let c = (x[0] + x[1]).cos();
        assert_abs_diff_eq!(u1.eval(x), 0.5 * c, epsilon = 1e-14);
        assert_abs_diff_eq!(u2.eval(x), -0.5 * c, epsilon = 1e-14);
    }

    #[test]
    fn biot_savart_rejects_mean() {
        let mut c = vec![Complex64::new(0.0, 0.0); 64];
        c[0] = Complex64::new(1.0, 0.0);
        let f = ScalarField { n: 8, c };
        assert!(matches!(biot_savart(&f), Err(Error::NonZeroMean(_))));
    }

    #[test]
    fn trig_mode_examples() {
        let g = SpectralGrid::new(16).unwrap();
        let s = trig_mode(&g, [1, 0], 0, Slot::Temperature).unwrap();
        assert!(s.omega.is_zero());
        assert_abs_diff_eq!(s.theta.eval([0.4, 2.0]), 0.4f64.cos(), epsilon = 1e-15);
        let s = trig_mode(&g, [0, 1], 1, Slot::Vorticity).unwrap();
        assert!(s.theta.is_zero());
        assert_abs_diff_eq!(s.omega.eval([0.4, 2.0]), 2.0f64.sin(), epsilon = 1e-15);
        let s = trig_mode(&g, [1, 1], 1, Slot::Temperature).unwrap();
        assert_abs_diff_eq!(s.theta.eval([PI / 2.0, 0.0]), 1.0, epsilon = 1e-15);
        assert!(trig_mode(&g, [0, -1], 0, Slot::Temperature).is_err());
        assert!(trig_mode(&g, [-1, 3], 0, Slot::Temperature).is_err());
        assert!(trig_mode(&g, [9, 0], 0, Slot::Temperature).is_err());
    }

    #[test]
    fn weighted_norm_examples() {
        let p = PhysicalParams::new(1.0, 1.0, 1.0, [1.0; 4]).unwrap();
        let n = 16;
        let u = SpectralState::new(ScalarField::trig(n, 1, 0, 0), ScalarField::zeros(n));
        assert_abs_diff_eq!(weighted_norm(&u, 0, &p), 2.0 * PI * PI, epsilon = 1e-12);
        assert_eq!(weighted_norm(&SpectralState::zeros(n), 3, &p), 0.0);
        let u = SpectralState::new(ScalarField::zeros(n), ScalarField::trig(n, 0, 1, 1));
        assert_abs_diff_eq!(weighted_norm(&u, 1, &p), 4.0 * PI * PI, epsilon = 1e-12);
    }

    #[test]
    fn eval_examples() {
        let f = ScalarField::trig(16, 1, 0, 0);
        assert_abs_diff_eq!(f.eval([0.0, 2.2]), 1.0, epsilon = 1e-15);
        let f = ScalarField::trig(16, 1, 1, 1);
        assert_abs_diff_eq!(f.eval([PI / 4.0, PI / 4.0]), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn eval_matches_dense_synthesis() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = random_field(16, 5, 8, &mut rng);
        let big = 512;
        let mut c = vec![Complex64::new(0.0, 0.0); big * big];
        for (k1, k2, z) in f.modes() {
            c[idx(big, k1, k2)] = z;
        }
        let dense = ScalarField { n: big, c };
        let grid = SpectralGrid::with_cut(big, 170).unwrap();
        let phys = grid.to_physical(&dense);
        for _ in 0..20 {
            let j1 = rng.gen_range(0..big);
            let j2 = rng.gen_range(0..big);
            let x = [grid.coord(j1), grid.coord(j2)];
            assert_abs_diff_eq!(f.eval(x), phys[j1 * big + j2], epsilon = 1e-12);
        }
    }

    #[test]
    fn dealias_examples() {
        let g = SpectralGrid::with_cut(32, 10).unwrap();
        let f = ScalarField::trig(32, 1, 0, 0);
        assert_eq!(f.dealias(g.cut()), f);
        let f = ScalarField::trig(32, 12, 0, 0);
        assert!(f.dealias(g.cut()).is_zero());

        // cos(10 x1)^2 = 1/2 + cos(20 x1)/2; the mode 20 aliases onto ±12
        let f = ScalarField::trig(32, 10, 0, 0);
        let p = g.to_physical(&f);
        let sq: Vec<f64> = p.iter().map(|v| v * v).collect();
        let undealiased = {
            let grid_full = SpectralGrid::with_cut(32, 15).unwrap();
            grid_full.from_physical(&sq)
        };
        assert!(undealiased.coeff(12, 0).norm() > 0.1);
        let prod = g.from_physical(&sq);
        // exact convolution restricted to |k| <= 10 after mean removal is zero
        assert!(prod.coeffs().iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn derivatives_match_jet() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(16, 4, 10, &mut rng);
        let x = [1.1, -0.3];
        let j = f.jet(x, 4);
        assert_abs_diff_eq!(j.d[1][0], f.d1().eval(x), epsilon = 1e-12);
        assert_abs_diff_eq!(j.d[0][1], f.d2().eval(x), epsilon = 1e-12);
        assert_abs_diff_eq!(j.d[2][2], f.d1().d1().d2().d2().eval(x), epsilon = 1e-10);
        assert_abs_diff_eq!(j.d[1][3], f.d1().d2().d2().d2().eval(x), epsilon = 1e-10);
        let low = f.jet(x, 2);
        for a in 0..=2 {
            for b in 0..=(2 - a) {
                assert_abs_diff_eq!(low.d[a][b], j.d[a][b], epsilon = 1e-11);
            }
        }
    }

    #[test]
    fn velocity_jet_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random_field(16, 4, 10, &mut rng);
        let (u1, u2) = biot_savart(&w).unwrap();
        let x = [2.0, 0.5];
        let vj = velocity_jet(&w, x, 3);
        assert_abs_diff_eq!(vj.u[0], u1.eval(x), epsilon = 1e-13);
        assert_abs_diff_eq!(vj.u[1], u2.eval(x), epsilon = 1e-13);
        assert_abs_diff_eq!(vj.du[0][1], u1.d2().eval(x), epsilon = 1e-12);
        assert_abs_diff_eq!(vj.du[1][0], u2.d1().eval(x), epsilon = 1e-12);
        assert_abs_diff_eq!(vj.d2u[0][0][1], u1.d1().d2().eval(x), epsilon = 1e-12);
        assert_abs_diff_eq!(vj.d3u[1][0][0][1], u2.d1().d1().d2().eval(x), epsilon = 1e-11);
        assert_abs_diff_eq!(vj.du[0][0] + vj.du[1][1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn physical_pair_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = SpectralGrid::new(32).unwrap();
        let a = random_field(32, 10, 30, &mut rng);
        let b = random_field(32, 10, 30, &mut rng);
        let (pa, pb) = g.to_physical_pair(&a, &b);
        assert_eq!(pa.len(), 32 * 32);
        assert_abs_diff_eq!(pa[5 * 32 + 7], a.eval([g.coord(5), g.coord(7)]), epsilon = 1e-12);
        let (ra, rb) = g.from_physical_pair(&pa, &pb);
        assert!(ra.is_hermitian() && rb.is_hermitian());
        for (x, y) in ra.coeffs().iter().zip(a.coeffs()) {
            assert!((x - y).norm() < 1e-14);
        }
        for (x, y) in rb.coeffs().iter().zip(b.coeffs()) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn circle_helpers() {
        assert_abs_diff_eq!(circle_diff(0.1, TWO_PI - 0.1), 0.2, epsilon = 1e-14);
        assert_abs_diff_eq!(circle_diff(PI, 0.0), PI, epsilon = 1e-14);
        assert!(wrap(-1e-18) < TWO_PI);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn biot_savart_is_exact(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = random_field(16, 5, 12, &mut rng);
            let (u1, u2) = biot_savart(&w).unwrap();
            prop_assert!(u1.is_hermitian() && u2.is_hermitian());
            prop_assert_eq!(u1.mean().norm(), 0.0);
            for (k1, k2, z) in u1.modes() {
                let div = z * k1 as f64 + u2.coeff(k1, k2) * k2 as f64;
                prop_assert!(div.norm() <= 1e-15 * (1.0 + z.norm()));
            }
            let curl = {
                let mut c = u2.d1();
                c.axpy(-1.0, &u1.d2());
                c
            };
            for (a, b) in curl.coeffs().iter().zip(w.coeffs()) {
                prop_assert!((a - b).norm() < 1e-13);
            }
        }

        #[test]
        fn parseval_matches_quadrature(seed in any::<u64>(), nu1 in 0.05f64..2.0, g in 0.5f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = SpectralGrid::new(32).unwrap();
            let u = SpectralState::new(random_field(32, 10, 20, &mut rng), random_field(32, 10, 20, &mut rng));
            let p = PhysicalParams::new(nu1, 0.3, g, [1.0; 4]).unwrap();
            let spec = weighted_norm(&u, 0, &p);
            let (w, t) = grid.to_physical_pair(&u.omega, &u.theta);
            let h = (TWO_PI / 32.0).powi(2);
            let quad: f64 = w.iter().zip(&t).map(|(a, b)| p.varkappa() * a * a + b * b).sum::<f64>() * h;
            prop_assert!((spec - quad).abs() <= 1e-10 * spec.max(1e-300));
        }

        #[test]
        fn derived_fields_stay_real(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = SpectralGrid::new(16).unwrap();
            let f = random_field(16, 5, 10, &mut rng);
            for h in [f.d1(), f.d2(), f.laplacian(), f.inv_laplacian(), f.heat(0.3), f.dealias(3)] {
                prop_assert!(h.is_hermitian());
                prop_assert_eq!(h.mean().norm(), 0.0);
            }
            let p = grid.to_physical(&f);
            let q: Vec<f64> = p.iter().map(|v| v * v).collect();
            let sq = grid.from_physical(&q);
            prop_assert!(sq.is_hermitian());
            prop_assert_eq!(sq.mean().norm(), 0.0);
        }
    }
}
