// SPDX-License-Identifier: Apache-2.0

//! Posterior mean, covariance and log-normalization of the tilted measure
//! `M(x; A, B) ∝ P(x) exp(-x^T A x / 2 + B^T x)`, in closed form for each
//! prior family.
//!
//! [`TiltedPrior`] does the per-`A` work once (eigendecomposition, inverse and
//! log-determinant of `I + A`) so that AMP can evaluate N fields cheaply.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::model::{PriorFamily, PriorSpec};
use crate::quadrature::{log_add_exp, logistic, softplus};

/// Condition number of `I + A` beyond which the tilt is rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Arguments `(A, B)` of the denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserInput {
    pub a_mat: DMatrix<f64>,
    pub b_vec: DVector<f64>,
}

impl DenoiserInput {
    pub fn new(a_mat: DMatrix<f64>, b_vec: DVector<f64>) -> Self {
        DenoiserInput { a_mat, b_vec }
    }

    /// Rank-one convenience constructor.
    pub fn scalar(a: f64, b: f64) -> Self {
        DenoiserInput {
            a_mat: DMatrix::from_element(1, 1, a),
            b_vec: DVector::from_element(1, b),
        }
    }
}

/// Mean, covariance and `ln N(A, B)` of one tilted measure.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub log_norm: f64,
}

#[derive(Debug, Clone)]
enum Kernel {
    GaussBernoulli {
        /// (I + A)^{-1}, row-major r x r.
        inv: Vec<f64>,
        half_log_det: f64,
        /// ln((1 - rho) / rho), or None when rho = 1.
        log_prior_odds: Option<f64>,
        ln_rho: f64,
    },
    Atoms {
        a: f64,
        /// (ln weight, value) per atom.
        atoms: Vec<(f64, f64)>,
    },
}

/// The prior tilted by a fixed quadratic term `A`, ready to evaluate many `B`.
#[derive(Debug, Clone)]
pub struct TiltedPrior {
    rank: usize,
    kernel: Kernel,
}

impl TiltedPrior {
    pub fn new(prior: &PriorSpec, a_mat: &DMatrix<f64>) -> Result<Self> {
        let r = prior.rank();
        if a_mat.shape() != (r, r) {
            return Err(invalid(format!(
                "A must be {r}x{r}, got {}x{}",
                a_mat.nrows(),
                a_mat.ncols()
            )));
        }
        let scale = a_mat.amax().max(1.0);
        if !a_mat.iter().all(|v| v.is_finite()) {
            return Err(invalid("A has non-finite entries"));
        }
        for i in 0..r {
            for j in 0..i {
                if (a_mat[(i, j)] - a_mat[(j, i)]).abs() > 1e-10 * scale {
                    return Err(invalid("A must be symmetric"));
                }
            }
        }
        let kernel = match prior.family() {
            PriorFamily::GaussBernoulli => {
                let (inv, half_log_det) = if r == 1 {
                    let a = a_mat[(0, 0)];
                    check_spectrum(a, a)?;
                    (vec![1.0 / (1.0 + a)], 0.5 * a.ln_1p())
                } else {
                    let sym = (a_mat + a_mat.transpose()) * 0.5;
                    let eig = SymmetricEigen::new(sym);
                    let lo = eig.eigenvalues.min();
                    let hi = eig.eigenvalues.max();
                    check_spectrum(lo, hi)?;
                    let d = eig.eigenvalues.map(|l| 1.0 / (1.0 + l.max(0.0)));
                    let inv = &eig.eigenvectors
                        * DMatrix::from_diagonal(&d)
                        * eig.eigenvectors.transpose();
                    let hld = 0.5 * eig.eigenvalues.iter().map(|l| l.max(0.0).ln_1p()).sum::<f64>();
                    let mut rm = Vec::with_capacity(r * r);
                    for i in 0..r {
                        for j in 0..r {
                            rm.push(0.5 * (inv[(i, j)] + inv[(j, i)]));
                        }
                    }
                    (rm, hld)
                };
                let rho = prior.rho();
                Kernel::GaussBernoulli {
                    inv,
                    half_log_det,
                    log_prior_odds: (rho < 1.0).then(|| (1.0 - rho).ln() - rho.ln()),
                    ln_rho: rho.ln(),
                }
            }
            PriorFamily::BernoulliSpike | PriorFamily::RademacherBernoulli => {
                let a = a_mat[(0, 0)];
                check_spectrum(a, a)?;
                let atoms = prior
                    .atoms()
                    .expect("discrete family")
                    .into_iter()
                    .filter(|(w, _)| *w > 0.0)
                    .map(|(w, x)| (w.ln(), x))
                    .collect();
                Kernel::Atoms { a, atoms }
            }
        };
        Ok(TiltedPrior { rank: r, kernel })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Writes the posterior mean into `mean` (length r) and covariance into
    /// `cov` (row-major r x r); returns `ln N(A, B)`.
    pub fn eval_into(&self, b: &[f64], mean: &mut [f64], cov: &mut [f64]) -> f64 {
        let r = self.rank;
        debug_assert_eq!(b.len(), r);
        match &self.kernel {
            Kernel::GaussBernoulli {
                inv,
                half_log_det,
                log_prior_odds,
                ln_rho,
            } => {
                // m = (I + A)^{-1} B, staged in `mean`.
                for i in 0..r {
                    mean[i] = (0..r).map(|j| inv[i * r + j] * b[j]).sum();
                }
                let quad: f64 = mean.iter().zip(b).map(|(m, b)| m * b).sum();
                let log_slab = 0.5 * quad - half_log_det;
                let (support, log_norm) = match log_prior_odds {
                    None => (1.0, log_slab),
                    Some(odds) => {
                        // ln[(1-rho) / (rho g)], g the slab normalization.
                        let l = odds - log_slab;
                        (logistic(-l), ln_rho + log_slab + softplus(l))
                    }
                };
                let spread = support * (1.0 - support);
                for i in 0..r {
                    for j in 0..r {
                        cov[i * r + j] = support * inv[i * r + j] + spread * mean[i] * mean[j];
                    }
                }
                for m in mean.iter_mut() {
                    *m *= support;
                }
                log_norm
            }
            Kernel::Atoms { a, atoms } => {
                let bs = b[0];
                let max_bx = atoms.iter().fold(0.0f64, |m, &(_, x)| m.max((bs * x).abs()));
                if max_bx <= 1.0 {
                    // Small field: writing e^{bx} = 1 + expm1(bx) keeps the
                    // mean accurate to relative precision where symmetric atoms
                    // would otherwise cancel.
                    let c = atoms
                        .iter()
                        .map(|&(lw, x)| lw - 0.5 * a * x * x)
                        .fold(f64::NEG_INFINITY, f64::max);
                    let (mut z, mut base, mut tilt, mut m2) = (0.0, 0.0, 0.0, 0.0);
                    for &(lw, x) in atoms {
                        let w = (lw - 0.5 * a * x * x - c).exp();
                        let e = (bs * x).exp_m1();
                        z += w * (1.0 + e);
                        base += w * x;
                        tilt += w * x * e;
                        m2 += w * x * x * (1.0 + e);
                    }
                    let m1 = (base + tilt) / z;
                    mean[0] = m1;
                    cov[0] = (m2 / z - m1 * m1).max(0.0);
                    return c + z.ln();
                }
                let mut lse = f64::NEG_INFINITY;
                for &(lw, x) in atoms {
                    lse = log_add_exp(lse, lw - 0.5 * a * x * x + bs * x);
                }
                let (mut m1, mut m2) = (0.0, 0.0);
                for &(lw, x) in atoms {
                    let p = (lw - 0.5 * a * x * x + bs * x - lse).exp();
                    m1 += p * x;
                    m2 += p * x * x;
                }
                mean[0] = m1;
                cov[0] = (m2 - m1 * m1).max(0.0);
                lse
            }
        }
    }

    pub fn eval(&self, b: &DVector<f64>) -> Posterior {
        let r = self.rank;
        let mut mean = vec![0.0; r];
        let mut cov = vec![0.0; r * r];
        let log_norm = self.eval_into(b.as_slice(), &mut mean, &mut cov);
        Posterior {
            mean: DVector::from_vec(mean),
            cov: DMatrix::from_row_slice(r, r, &cov),
            log_norm,
        }
    }
}

fn check_spectrum(lo: f64, hi: f64) -> Result<()> {
    // A is required PSD; tiny negative round-off is tolerated.
    if lo < -1e-9 * hi.abs().max(1.0) {
        return Err(Error::NotPsd(lo));
    }
    let cond = (1.0 + hi.max(0.0)) / (1.0 + lo.max(0.0));
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::SingularTilt(cond));
    }
    Ok(())
}

fn check_input(input: &DenoiserInput, prior: &PriorSpec) -> Result<TiltedPrior> {
    if input.b_vec.len() != prior.rank() {
        return Err(invalid(format!(
            "B must have length {}, got {}",
            prior.rank(),
            input.b_vec.len()
        )));
    }
    TiltedPrior::new(prior, &input.a_mat)
}

/// Mean, covariance and log-normalization in one call.
pub fn posterior(input: &DenoiserInput, prior: &PriorSpec) -> Result<Posterior> {
    Ok(check_input(input, prior)?.eval(&input.b_vec))
}

/// f(A, B): mean of the tilted measure.
pub fn posterior_mean(input: &DenoiserInput, prior: &PriorSpec) -> Result<DVector<f64>> {
    posterior(input, prior).map(|p| p.mean)
}

/// ∂f/∂B, equal to the covariance of the tilted measure.
pub fn posterior_cov(input: &DenoiserInput, prior: &PriorSpec) -> Result<DMatrix<f64>> {
    posterior(input, prior).map(|p| p.cov)
}

/// `ln N(A, B)`.
pub fn log_norm(input: &DenoiserInput, prior: &PriorSpec) -> Result<f64> {
    posterior(input, prior).map(|p| p.log_norm)
}

/// Log-odds `ln[(1-rho) / rho] - b²/(2(1+a)) + (r/2) ln(1+a)` of the zero atom
/// against the slab, for isotropic `A = a I`.
pub(crate) fn support_log_odds(a: f64, b_sq: f64, rho: f64, r: usize) -> f64 {
    (1.0 - rho).ln() - rho.ln() - b_sq / (2.0 * (1.0 + a)) + 0.5 * r as f64 * a.ln_1p()
}

/// Posterior probability that a Gauss–Bernoulli component is non-zero, for
/// `A = a I` and `|B|² = b_sq`.
pub fn posterior_support(a: f64, b_sq: f64, prior: &PriorSpec) -> Result<f64> {
    if prior.family() != PriorFamily::GaussBernoulli {
        return Err(invalid("posterior_support is defined for the Gauss-Bernoulli prior"));
    }
    if !(a >= 0.0) || !(b_sq >= 0.0) {
        return Err(invalid(format!("need a >= 0 and b_sq >= 0, got ({a}, {b_sq})")));
    }
    if prior.rho() >= 1.0 {
        return Ok(1.0);
    }
    Ok(logistic(-support_log_odds(a, b_sq, prior.rho(), prior.rank())))
}
