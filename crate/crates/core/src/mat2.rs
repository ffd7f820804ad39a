//! 2×2 matrix helpers (row-major `[[a, b], [c, d]]`).

pub type Mat2 = [[f64; 2]; 2];

pub const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

pub fn mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

pub fn apply(a: &Mat2, v: &[f64; 2]) -> [f64; 2] {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

pub fn det(a: &Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

pub fn add(a: &Mat2, b: &Mat2) -> Mat2 {
    [[a[0][0] + b[0][0], a[0][1] + b[0][1]], [a[1][0] + b[1][0], a[1][1] + b[1][1]]]
}

pub fn scale(a: &Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

pub fn frobenius_sq(a: &Mat2) -> f64 {
    a.iter().flatten().map(|x| x * x).sum()
}

/// Largest singular value.
pub fn norm2(a: &Mat2) -> f64 {
    let f = frobenius_sq(a);
    let d = det(a);
    let disc = (f * f - 4.0 * d * d).max(0.0).sqrt();
    (0.5 * (f + disc)).sqrt()
}

/// Smallest singular value.
pub fn min_singular(a: &Mat2) -> f64 {
    let big = norm2(a);
    if big == 0.0 {
        0.0
    } else {
        det(a).abs() / big
    }
}

/// `exp(t [[0, 1], [1, 0]])`.
pub fn exp_saddle(t: f64) -> Mat2 {
    let (c, s) = (t.cosh(), t.sinh());
    [[c, s], [s, c]]
}

/// Rotation by angle `phi` (counterclockwise).
pub fn rotation(phi: f64) -> Mat2 {
    let (s, c) = phi.sin_cos();
    [[c, -s], [s, c]]
}

/// Gram–Schmidt QR: returns `(Q, R)` with `R` upper triangular and
/// positive diagonal.
pub fn qr(a: &Mat2) -> (Mat2, Mat2) {
    let c0 = [a[0][0], a[1][0]];
    let c1 = [a[0][1], a[1][1]];
    let r11 = c0[0].hypot(c0[1]);
    let q0 = [c0[0] / r11, c0[1] / r11];
    let r12 = q0[0] * c1[0] + q0[1] * c1[1];
    let w = [c1[0] - r12 * q0[0], c1[1] - r12 * q0[1]];
    let r22 = w[0].hypot(w[1]);
    let q1 = [w[0] / r22, w[1] / r22];
    ([[q0[0], q1[0]], [q0[1], q1[1]]], [[r11, r12], [0.0, r22]])
}

/// Traceless (sl₂) coordinates `(a, b, c)` of `[[a, b], [c, −a]]` after
/// removing the trace part.
pub fn sl2_coords(m: &Mat2) -> [f64; 3] {
    let a = 0.5 * (m[0][0] - m[1][1]);
    [a, m[0][1], m[1][0]]
}
