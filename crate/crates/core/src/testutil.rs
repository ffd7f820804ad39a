use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::spectral::SpectralState;

/// Random state with `modes` coefficients per component in `|k|_∞ ≤ kmax`.
pub(crate) fn random_state(n: usize, kmax: i64, modes: usize, amp: f64, seed: u64) -> SpectralState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = SpectralState::zeros(n);
    for f in [&mut s.omega, &mut s.theta] {
        for _ in 0..modes {
            let k1 = rng.gen_range(0..=kmax);
            let k2 = rng.gen_range(-kmax..=kmax);
            if k1 == 0 && k2 <= 0 {
                continue;
            }
            f.set_pair(k1, k2, Complex64::new(rng.gen_range(-amp..amp), rng.gen_range(-amp..amp)));
        }
    }
    s
}
