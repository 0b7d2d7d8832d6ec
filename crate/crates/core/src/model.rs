// SPDX-License-Identifier: Apache-2.0

//! Signal priors and finite-N instances of the spiked symmetric model
//! `Y = X0^T X0 / sqrt(N) + W`.
//!
//! Randomness is keyed: every draw comes from a ChaCha stream selected by
//! `(seed, domain, index)`, where the index is a column of the signal or a row
//! of the noise. Output therefore does not depend on thread count or on the
//! order in which rows are filled.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::parallel;

/// Largest N for which a dense observation matrix is supported (8 bytes per entry).
pub const MAX_DIMENSION: usize = 30_000;

pub(crate) const DOMAIN_SIGNAL: u64 = 1;
pub(crate) const DOMAIN_NOISE: u64 = 2;
pub(crate) const DOMAIN_AMP_INIT: u64 = 3;
pub(crate) const DOMAIN_SE_SAMPLES: u64 = 4;

/// A ChaCha8 stream selected by `(seed, domain, index)`.
pub(crate) fn keyed_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 56) ^ index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorFamily {
    /// `(1-rho) delta(x) + rho N(0, I_r)`.
    GaussBernoulli,
    /// `rho delta(x-1) + (1-rho) delta(x)`, rank one.
    BernoulliSpike,
    /// `rho/2 delta(x-1) + rho/2 delta(x+1) + (1-rho) delta(x)`, rank one.
    RademacherBernoulli,
}

impl PriorFamily {
    pub fn short_name(self) -> &'static str {
        match self {
            PriorFamily::GaussBernoulli => "gb",
            PriorFamily::BernoulliSpike => "spike",
            PriorFamily::RademacherBernoulli => "rademacher",
        }
    }
}

impl fmt::Display for PriorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for PriorFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gb" | "gauss-bernoulli" | "gauss_bernoulli" | "gaussbernoulli" => {
                Ok(PriorFamily::GaussBernoulli)
            }
            "spike" | "bernoulli" | "bernoulli-spike" | "bernoulli_spike" | "bernoullispike" => {
                Ok(PriorFamily::BernoulliSpike)
            }
            "rademacher" | "rb" | "rademacher-bernoulli" | "rademacher_bernoulli" => {
                Ok(PriorFamily::RademacherBernoulli)
            }
            other => Err(invalid(format!("unknown prior family '{other}'"))),
        }
    }
}

/// Distribution of one column x_mu of the signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    family: PriorFamily,
    rho: f64,
    rank: usize,
}

impl PriorSpec {
    pub fn new(family: PriorFamily, rho: f64, rank: usize) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(invalid(format!("rho must lie in (0, 1], got {rho}")));
        }
        if rank == 0 {
            return Err(invalid("rank must be at least 1"));
        }
        if rank != 1 && family != PriorFamily::GaussBernoulli {
            return Err(invalid(format!("{family} prior is only defined for rank 1")));
        }
        Ok(PriorSpec { family, rho, rank })
    }

    pub fn gauss_bernoulli(rho: f64, rank: usize) -> Result<Self> {
        Self::new(PriorFamily::GaussBernoulli, rho, rank)
    }

    pub fn bernoulli_spike(rho: f64) -> Result<Self> {
        Self::new(PriorFamily::BernoulliSpike, rho, 1)
    }

    pub fn rademacher_bernoulli(rho: f64) -> Result<Self> {
        Self::new(PriorFamily::RademacherBernoulli, rho, 1)
    }

    pub fn family(&self) -> PriorFamily {
        self.family
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Same family and rank at a different density.
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.family, rho, self.rank)
    }

    pub fn is_zero_mean(&self) -> bool {
        self.family != PriorFamily::BernoulliSpike
    }

    /// E[x_i^2] for one component; equal to `rho` for all three families.
    pub fn component_second_moment(&self) -> f64 {
        self.rho
    }

    pub fn mean(&self) -> DVector<f64> {
        match self.family {
            PriorFamily::BernoulliSpike => DVector::from_element(1, self.rho),
            _ => DVector::zeros(self.rank),
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self.family {
            PriorFamily::BernoulliSpike => {
                DMatrix::from_element(1, 1, self.rho * (1.0 - self.rho))
            }
            _ => DMatrix::identity(self.rank, self.rank) * self.rho,
        }
    }

    /// E[x x^T].
    pub fn second_moment(&self) -> DMatrix<f64> {
        DMatrix::identity(self.rank, self.rank) * self.rho
    }

    /// Atoms `(weight, value)` of the rank-one discrete families; `None` for
    /// Gauss–Bernoulli.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self.family {
            PriorFamily::GaussBernoulli => None,
            PriorFamily::BernoulliSpike => Some(vec![(1.0 - self.rho, 0.0), (self.rho, 1.0)]),
            PriorFamily::RademacherBernoulli => Some(vec![
                (1.0 - self.rho, 0.0),
                (0.5 * self.rho, 1.0),
                (0.5 * self.rho, -1.0),
            ]),
        }
    }

    /// Draws one column into `out` (length `rank`).
    pub fn sample_into<R: rand::Rng>(&self, rng: &mut R, out: &mut [f64]) {
        let u: f64 = rng.random();
        match self.family {
            PriorFamily::GaussBernoulli => {
                if u < self.rho {
                    for x in out.iter_mut() {
                        *x = rng.sample(StandardNormal);
                    }
                } else {
                    out.fill(0.0);
                }
            }
            PriorFamily::BernoulliSpike => out[0] = if u < self.rho { 1.0 } else { 0.0 },
            PriorFamily::RademacherBernoulli => {
                out[0] = if u < 0.5 * self.rho {
                    1.0
                } else if u < self.rho {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Exact mean and covariance of the prior.
pub fn prior_moments(prior: &PriorSpec) -> (DVector<f64>, DMatrix<f64>) {
    (prior.mean(), prior.covariance())
}

/// Draws the `r x N` signal; column `mu` is keyed by `(seed, mu)`.
pub fn sample_signal(prior: &PriorSpec, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    let r = prior.rank();
    let mut data = vec![0.0; r * n];
    parallel::for_each_chunk_mut(&mut data, r, |mu, col| {
        let mut rng = keyed_rng(seed, DOMAIN_SIGNAL, mu as u64);
        prior.sample_into(&mut rng, col);
    });
    Ok(DMatrix::from_vec(r, n, data))
}

/// Dense symmetric `N x N` matrix, stored in full, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    /// Builds from a full row-major buffer; fails unless it is exactly symmetric.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(invalid(format!(
                "expected {} entries for a {n}x{n} matrix, got {}",
                n * n,
                data.len()
            )));
        }
        for i in 0..n {
            for j in 0..i {
                if data[i * n + j].to_bits() != data[j * n + i].to_bits() {
                    return Err(invalid(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(SymmetricMatrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `out = Y * a` where `a` is `N x r` row-major.
    pub fn mul_rows(&self, a: &[f64], r: usize, out: &mut [f64]) {
        let n = self.n;
        debug_assert_eq!(a.len(), n * r);
        debug_assert_eq!(out.len(), n * r);
        if r == 1 {
            parallel::for_each_chunk_mut(out, 1, |mu, o| {
                o[0] = self.row(mu).iter().zip(a).map(|(y, x)| y * x).sum();
            });
            return;
        }
        parallel::for_each_chunk_mut(out, r, |mu, o| {
            o.fill(0.0);
            for (nu, &y) in self.row(mu).iter().enumerate() {
                let av = &a[nu * r..(nu + 1) * r];
                for (oc, &ac) in o.iter_mut().zip(av) {
                    *oc += y * ac;
                }
            }
        });
    }

    /// Largest `|y_ij - y_ji|`; zero by construction.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// One finite-N realization of the model.
#[derive(Debug, Clone)]
pub struct Instance {
    pub n: usize,
    pub delta: f64,
    /// Ground truth, `r x N`; column `mu` is x_mu.
    pub x0: DMatrix<f64>,
    pub y: SymmetricMatrix,
    pub seed: u64,
}

impl Instance {
    /// Samples the signal and the observation from one seed.
    pub fn generate(prior: &PriorSpec, n: usize, delta: f64, seed: u64) -> Result<Self> {
        if n > MAX_DIMENSION {
            return Err(invalid(format!("n = {n} exceeds the supported maximum {MAX_DIMENSION}")));
        }
        let x0 = sample_signal(prior, n, seed)?;
        let y = generate_observation(&x0, delta, seed)?;
        Ok(Instance {
            n,
            delta,
            x0,
            y,
            seed,
        })
    }

    pub fn rank(&self) -> usize {
        self.x0.nrows()
    }

    /// Writes the binary dump: a 32-byte little-endian header
    /// (`"SPCA"`, version u32, N u64, r u32, reserved u32, delta f64), the
    /// signal as `r x N` row-major f64, then the upper triangle of Y row by row
    /// (diagonal included).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let r = self.rank();
        let mut header = [0u8; 32];
        header[0..4].copy_from_slice(INSTANCE_MAGIC);
        header[4..8].copy_from_slice(&INSTANCE_VERSION.to_le_bytes());
        header[8..16].copy_from_slice(&(self.n as u64).to_le_bytes());
        header[16..20].copy_from_slice(&(r as u32).to_le_bytes());
        header[24..32].copy_from_slice(&self.delta.to_le_bytes());
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * self.n.max(r * self.n));
        for i in 0..r {
            buf.clear();
            for mu in 0..self.n {
                buf.extend_from_slice(&self.x0[(i, mu)].to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        for mu in 0..self.n {
            buf.clear();
            for &v in &self.y.row(mu)[mu..] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a dump written by [`Instance::write_to`]. The seed is not stored
    /// and is set to 0.
    pub fn read_from<R: Read>(mut rd: R) -> Result<Self> {
        let mut header = [0u8; 32];
        rd.read_exact(&mut header)?;
        if &header[0..4] != INSTANCE_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
        if version != INSTANCE_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes")) as usize;
        let r = u32::from_le_bytes(header[16..20].try_into().expect("4 bytes")) as usize;
        let delta = f64::from_le_bytes(header[24..32].try_into().expect("8 bytes"));
        if n == 0 || n > MAX_DIMENSION || r == 0 {
            return Err(Error::Format(format!("implausible dimensions n={n}, r={r}")));
        }
        let mut read_f64 = || -> Result<f64> {
            let mut b = [0u8; 8];
            rd.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        };
        let mut x0 = DMatrix::zeros(r, n);
        for i in 0..r {
            for mu in 0..n {
                x0[(i, mu)] = read_f64()?;
            }
        }
        let mut data = vec![0.0; n * n];
        for mu in 0..n {
            for nu in mu..n {
                let v = read_f64()?;
                data[mu * n + nu] = v;
                data[nu * n + mu] = v;
            }
        }
        Ok(Instance {
            n,
            delta,
            x0,
            y: SymmetricMatrix { n, data },
            seed: 0,
        })
    }
}

const INSTANCE_MAGIC: &[u8; 4] = b"SPCA";
const INSTANCE_VERSION: u32 = 1;

/// `Y = X0^T X0 / sqrt(N) + W` with symmetric Gaussian noise of variance
/// `delta` on every entry, the diagonal included. Row `mu` of the upper
/// triangle of W is keyed by `(seed, mu)`.
pub fn generate_observation(x0: &DMatrix<f64>, delta: f64, seed: u64) -> Result<SymmetricMatrix> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(invalid(format!("delta must be positive, got {delta}")));
    }
    let (r, n) = x0.shape();
    if n == 0 {
        return Err(invalid("signal has no columns"));
    }
    if n > MAX_DIMENSION {
        return Err(invalid(format!("n = {n} exceeds the supported maximum {MAX_DIMENSION}")));
    }
    let sd = delta.sqrt();
    let scale = 1.0 / (n as f64).sqrt();
    let xs = x0.as_slice();
    let mut data = vec![0.0; n * n];
    parallel::for_each_chunk_mut(&mut data, n, |mu, row| {
        let mut rng = keyed_rng(seed, DOMAIN_NOISE, mu as u64);
        let xm = &xs[mu * r..(mu + 1) * r];
        for (nu, y) in row.iter_mut().enumerate().skip(mu) {
            let xn = &xs[nu * r..(nu + 1) * r];
            let dot: f64 = xm.iter().zip(xn).map(|(a, b)| a * b).sum();
            let w: f64 = rng.sample(StandardNormal);
            *y = dot * scale + sd * w;
        }
    });
    for mu in 1..n {
        for nu in 0..mu {
            data[mu * n + nu] = data[nu * n + mu];
        }
    }
    Ok(SymmetricMatrix { n, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prior_validation() {
        assert!(PriorSpec::gauss_bernoulli(0.0, 1).is_err());
        assert!(PriorSpec::gauss_bernoulli(1.2, 1).is_err());
        assert!(PriorSpec::gauss_bernoulli(0.5, 0).is_err());
        assert!(PriorSpec::new(PriorFamily::BernoulliSpike, 0.3, 2).is_err());
        assert!(PriorSpec::gauss_bernoulli(1.0, 3).is_ok());
    }

    #[test]
    fn moments_are_exact() {
        let (m, c) = prior_moments(&PriorSpec::gauss_bernoulli(0.1, 2).unwrap());
        assert_eq!(m, DVector::zeros(2));
        assert_eq!(c, DMatrix::identity(2, 2) * 0.1);
        let (m, c) = prior_moments(&PriorSpec::bernoulli_spike(0.3).unwrap());
        assert!((m[0] - 0.3).abs() < 1e-15);
        assert!((c[(0, 0)] - 0.21).abs() < 1e-15);
        let (m, c) = prior_moments(&PriorSpec::rademacher_bernoulli(0.5).unwrap());
        assert_eq!(m[0], 0.0);
        assert_eq!(c[(0, 0)], 0.5);
    }

    #[test]
    fn family_names_parse() {
        for f in [
            PriorFamily::GaussBernoulli,
            PriorFamily::BernoulliSpike,
            PriorFamily::RademacherBernoulli,
        ] {
            assert_eq!(f.short_name().parse::<PriorFamily>().unwrap(), f);
        }
        assert!("laplace".parse::<PriorFamily>().is_err());
    }

    #[test]
    fn pure_gaussian_variance() {
        let x = sample_signal(&PriorSpec::gauss_bernoulli(1.0, 1).unwrap(), 10_000, 3).unwrap();
        let var = x.iter().map(|v| v * v).sum::<f64>() / 10_000.0;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn sparse_zero_fraction() {
        let x = sample_signal(&PriorSpec::gauss_bernoulli(0.1, 1).unwrap(), 100_000, 11).unwrap();
        let zeros = x.iter().filter(|v| **v == 0.0).count() as f64 / 1e5;
        assert!((0.897..=0.903).contains(&zeros), "zero fraction {zeros}");
    }

    #[test]
    fn spike_entries_and_mean() {
        let x = sample_signal(&PriorSpec::bernoulli_spike(0.3).unwrap(), 100_000, 5).unwrap();
        assert!(x.iter().all(|v| *v == 0.0 || *v == 1.0));
        let mean = x.sum() / 1e5;
        assert!((mean - 0.3).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = PriorSpec::gauss_bernoulli(0.4, 3).unwrap();
        assert_eq!(sample_signal(&p, 500, 9).unwrap(), sample_signal(&p, 500, 9).unwrap());
        assert_ne!(sample_signal(&p, 500, 9).unwrap(), sample_signal(&p, 500, 10).unwrap());
    }

    #[test]
    fn zero_signal_gives_pure_noise() {
        let n = 300;
        let delta = 0.7;
        let y = generate_observation(&DMatrix::zeros(1, n), delta, 2).unwrap();
        assert_eq!(y.asymmetry(), 0.0);
        let var = y.as_slice().iter().map(|v| v * v).sum::<f64>() / (n * n) as f64;
        assert!((var - delta).abs() < 0.03 * delta, "variance {var}");
    }

    #[test]
    fn noiseless_limit() {
        let p = PriorSpec::gauss_bernoulli(0.5, 2).unwrap();
        let x = sample_signal(&p, 200, 4).unwrap();
        let y = generate_observation(&x, 1e-12, 4).unwrap();
        let clean = x.transpose() * &x / (200f64).sqrt();
        for i in 0..200 {
            for j in 0..200 {
                assert!((y.get(i, j) - clean[(i, j)]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn single_nonzero_entry() {
        let n = 64;
        let mut x = DMatrix::zeros(1, n);
        x[(0, 0)] = 1.0;
        let y = generate_observation(&x, 0.5, 8).unwrap();
        let w = generate_observation(&DMatrix::zeros(1, n), 0.5, 8).unwrap();
        assert!((y.get(0, 0) - (1.0 / 8.0 + w.get(0, 0))).abs() < 1e-15);
        assert_eq!(y.get(3, 5), w.get(3, 5));
    }

    #[test]
    fn rejects_bad_delta() {
        assert!(generate_observation(&DMatrix::zeros(1, 4), 0.0, 1).is_err());
        assert!(generate_observation(&DMatrix::zeros(1, 4), -1.0, 1).is_err());
    }

    #[test]
    fn mul_rows_matches_dense_product() {
        let p = PriorSpec::gauss_bernoulli(0.5, 3).unwrap();
        let inst = Instance::generate(&p, 40, 0.3, 12).unwrap();
        let a: Vec<f64> = (0..120).map(|k| ((k * 37) % 11) as f64 - 5.0).collect();
        let mut out = vec![0.0; 120];
        inst.y.mul_rows(&a, 3, &mut out);
        let ym = DMatrix::from_row_slice(40, 40, inst.y.as_slice());
        let am = DMatrix::from_row_slice(40, 3, &a);
        let expect = ym * am;
        for mu in 0..40 {
            for c in 0..3 {
                assert!((out[mu * 3 + c] - expect[(mu, c)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn from_row_major_rejects_asymmetry() {
        assert!(SymmetricMatrix::from_row_major(2, vec![1.0, 2.0, 2.0, 1.0]).is_ok());
        assert!(SymmetricMatrix::from_row_major(2, vec![1.0, 2.0, 2.5, 1.0]).is_err());
        assert!(SymmetricMatrix::from_row_major(2, vec![1.0]).is_err());
    }
}
