//! Resumable trajectories and the `BQCK1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BQCK1"  u32 section count
//! per section: [u8; 4] tag, u64 length, payload, u64 checksum
//! ```
//!
//! The checksum is the first eight bytes of SHA-256 over tag and payload.
//! Sections: `HEAD` (grid, step, dt, seeds, parameters), `SPEC` (the
//! coefficients of `ω` then `θ`), `PART` (the extended particle state).

use std::path::Path;

use num_complex::Complex64;
use sha2::{Digest, Sha256};

use crate::dynamics::Integrator;
use crate::error::{Error, Result};
use crate::lagrangian::{step_extended, ExtendedState, JacobianProcess};
use crate::rng::NoiseStream;
use crate::spectral::{PhysicalParams, ScalarField, SpectralGrid, SpectralState, VelocityEvaluator};

pub const MAGIC: &[u8; 5] = b"BQCK1";

/// SDE trajectory with a Lagrangian particle, advanced by the step counter.
#[derive(Clone, Debug)]
pub struct Trajectory {
    integ: Integrator,
    pub u: SpectralState,
    pub particle: ExtendedState,
    pub stream: NoiseStream,
    /// Steps completed.
    pub step: u64,
}

impl Trajectory {
    pub fn new(integ: Integrator, u: SpectralState, particle: ExtendedState, stream: NoiseStream) -> Self {
        Self { integ, u, particle, stream, step: 0 }
    }

    pub fn integrator(&self) -> &Integrator {
        &self.integ
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.integ.dt()
    }

    /// One step of the field and the particle (velocity frozen over the step).
    pub fn advance(&mut self) -> Result<()> {
        let field = VelocityEvaluator::new(&self.u.omega);
        let next = self.integ.step_sde(&self.u, &self.stream, self.step)?;
        self.particle = step_extended(&self.particle, &field, self.integ.dt())?;
        self.u = next;
        self.step += 1;
        Ok(())
    }

    pub fn advance_by(&mut self, steps: u64) -> Result<()> {
        for _ in 0..steps {
            self.advance()?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.integ.params();
        let mut head = Writer::default();
        head.u64(self.integ.grid().n() as u64);
        head.u64(self.integ.grid().cut() as u64);
        head.u64(self.step);
        head.f64(self.integ.dt());
        head.u64(self.stream.master_seed);
        head.u64(self.stream.stream);
        for v in [p.nu1, p.nu2, p.g] {
            head.f64(v);
        }
        for a in p.alphas {
            head.f64(a);
        }
        let opts = self.integ.options();
        head.u64(opts.nonlinear as u64 | (opts.cfl_check as u64) << 1);

        let mut spec = Writer::default();
        for f in [&self.u.omega, &self.u.theta] {
            for z in f.coeffs() {
                spec.f64(z.re);
                spec.f64(z.im);
            }
        }

        let e = &self.particle;
        let mut part = Writer::default();
        for v in e.x.iter().chain(&e.tau).chain(&e.v).chain(e.jac.a.iter().flatten()) {
            part.f64(*v);
        }
        for v in [e.jac.log_r11, e.jac.log_r22, e.jac.rho, e.jac.removed_log_det, e.jac.max_det_dev, e.log_stretch] {
            part.f64(v);
        }
        part.u64(e.jac.projections);
        part.u64(e.steps_since_qr as u64);
        part.u64(e.qr_every as u64);

        let sections = [(*b"HEAD", head.0), (*b"SPEC", spec.0), (*b"PART", part.0)];
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in &sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(payload);
            out.extend_from_slice(&checksum(tag, payload).to_le_bytes());
        }
        out
    }

    /// Decode a checkpoint; `expected_n` rejects a different resolution.
    pub fn from_bytes(bytes: &[u8], expected_n: Option<usize>) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != b"BQCK" {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        if &bytes[..5] != MAGIC {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {:?}", bytes[4] as char)));
        }
        let mut r = Reader { buf: bytes, pos: 5 };
        let count = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        let mut head = None;
        let mut spec = None;
        let mut part = None;
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let sum = r.u64()?;
            if sum != checksum(&tag, payload) {
                return Err(Error::Checkpoint(format!("checksum mismatch in section {}", String::from_utf8_lossy(&tag))));
            }
            match &tag {
                b"HEAD" => head = Some(payload),
                b"SPEC" => spec = Some(payload),
                b"PART" => part = Some(payload),
                _ => log::warn!("skipping unknown checkpoint section {:?}", String::from_utf8_lossy(&tag)),
            }
        }
        let missing = |s: &str| Error::Checkpoint(format!("missing section {s}"));
        let mut h = Reader { buf: head.ok_or_else(|| missing("HEAD"))?, pos: 0 };
        let n = h.u64()? as usize;
        if let Some(want) = expected_n {
            if want != n {
                return Err(Error::Checkpoint(format!("checkpoint resolution n = {n} does not match n = {want}")));
            }
        }
        let cut = h.u64()? as usize;
        let step = h.u64()?;
        let dt = h.f64()?;
        let stream = NoiseStream::new(h.u64()?, h.u64()?);
        let (nu1, nu2, g) = (h.f64()?, h.f64()?, h.f64()?);
        let alphas = [h.f64()?, h.f64()?, h.f64()?, h.f64()?];
        let flags = h.u64()?;
        let params = PhysicalParams { nu1, nu2, g, alphas };
        let opts = crate::dynamics::IntegratorOptions { nonlinear: flags & 1 != 0, cfl_check: flags & 2 != 0 };
        let integ = Integrator::with_options(SpectralGrid::with_cut(n, cut)?, params, dt, opts)?;

        let mut s = Reader { buf: spec.ok_or_else(|| missing("SPEC"))?, pos: 0 };
        let mut field = || -> Result<ScalarField> {
            let c = (0..n * n).map(|_| Ok(Complex64::new(s.f64()?, s.f64()?))).collect::<Result<Vec<_>>>()?;
            ScalarField::from_coeffs(n, c)
        };
        let u = SpectralState::new(field()?, field()?);

        let mut p = Reader { buf: part.ok_or_else(|| missing("PART"))?, pos: 0 };
        let mut f = [0.0; 16];
        for v in f.iter_mut() {
            *v = p.f64()?;
        }
        let jac = JacobianProcess {
            a: [[f[6], f[7]], [f[8], f[9]]],
            log_r11: f[10],
            log_r22: f[11],
            rho: f[12],
            removed_log_det: f[13],
            max_det_dev: f[14],
            projections: p.u64()?,
        };
        let particle = ExtendedState {
            x: [f[0], f[1]],
            tau: [f[2], f[3]],
            v: [f[4], f[5]],
            jac,
            log_stretch: f[15],
            steps_since_qr: p.u64()? as u32,
            qr_every: p.u64()? as u32,
        };
        Ok(Self { integ, u, particle, stream, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn restore(path: &Path, expected_n: Option<usize>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, expected_n)
    }
}

fn checksum(tag: &[u8; 4], payload: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(tag);
    h.update(payload);
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < len {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trajectory(n: usize) -> Trajectory {
        let integ = Integrator::new(SpectralGrid::new(n).unwrap(), PhysicalParams::default(), 1e-2).unwrap();
        let p = ExtendedState::new([1.0, 2.0], [1.0, 0.0], [0.6, 0.8]);
        Trajectory::new(integ, SpectralState::zeros(n), p, NoiseStream::new(7, 3))
    }

    #[test]
    fn restore_continues_bit_exactly() {
        let mut a = trajectory(16);
        a.advance_by(30).unwrap();
        let bytes = a.to_bytes();
        a.advance_by(30).unwrap();
        let mut b = Trajectory::from_bytes(&bytes, Some(16)).unwrap();
        assert_eq!(b.step, 30);
        b.advance_by(30).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.particle, b.particle);
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn corrupt_truncated_and_mismatched_files_are_rejected() {
        let mut a = trajectory(16);
        a.advance_by(5).unwrap();
        let bytes = a.to_bytes();
        let short = &bytes[..bytes.len() - 20];
        assert!(matches!(Trajectory::from_bytes(short, None), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        let err = Trajectory::from_bytes(&flipped, None).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
        let err = Trajectory::from_bytes(&bytes, Some(32)).unwrap_err().to_string();
        assert!(err.contains("resolution"), "{err}");
        let mut v2 = bytes.clone();
        v2[4] = b'2';
        let err = Trajectory::from_bytes(&v2, None).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(Trajectory::from_bytes(b"hello", None).is_err());
    }
}
