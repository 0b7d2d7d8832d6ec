// SPDX-License-Identifier: Apache-2.0

//! Asymptotic state evolution of AMP.
//!
//! The general recursion acts on two `r x r` order parameters,
//!
//! ```text
//! Q' = E[f(Q/Δ, (M/Δ) x0 + W) f(·)^T],   M' = E[f(Q/Δ, (M/Δ) x0 + W) x0^T]
//! ```
//!
//! with `x0 ~ P0` and `W ~ N(0, Q/Δ)`. In the matched (Bayes-optimal) setting
//! `M = Q` along the whole trajectory, and for the Gauss–Bernoulli prior an
//! isotropic start stays isotropic, which reduces the recursion to one scalar
//! `q` driven by a single integral over the chi distribution.
//!
//! Expectations are evaluated three ways:
//! * rank one: exact sum over the atoms (or spike/slab) of `x0` and adaptive
//!   Gauss–Kronrod in the Gaussian noise;
//! * any rank: Monte Carlo with antithetic noise pairs, reported with
//!   standard errors;
//! * Gauss–Bernoulli scalar path: adaptive Gauss–Kronrod over the chi density.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::RngExt;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::amp::InitMode;
use crate::denoiser::{support_log_odds, TiltedPrior};
use crate::error::{invalid, Error, Result};
use crate::model::{keyed_rng, PriorFamily, PriorSpec, DOMAIN_SE_SAMPLES};
use crate::parallel;
use crate::quadrature::{gauss_kronrod, gaussian_expectation_adaptive, log_add_exp, logistic};

/// Starting overlap of the uninformative trajectory.
pub const UNINFORMATIVE_EPSILON: f64 = 1e-8;
/// Overlaps below this are treated as having collapsed onto `q = 0`.
pub const ZERO_FLOOR: f64 = 1e-15;

const GAUSS_TOL: f64 = 1e-13;
const CHI_TOL: f64 = 1e-12;
const MC_CHUNK: usize = 4096;

/// Order parameters of the recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct SeState {
    pub q_mat: DMatrix<f64>,
    pub m_mat: DMatrix<f64>,
    /// Set when `Q = q I` is tracked on the isotropic path.
    pub scalar_q: Option<f64>,
    pub delta: f64,
}

impl SeState {
    /// `Q = M = q I`.
    pub fn isotropic(q: f64, r: usize, delta: f64) -> Self {
        let m = DMatrix::identity(r, r) * q;
        SeState {
            q_mat: m.clone(),
            m_mat: m,
            scalar_q: Some(q),
            delta,
        }
    }

    pub fn rank(&self) -> usize {
        self.q_mat.nrows()
    }

    /// `Tr Q / r`.
    pub fn mean_q(&self) -> f64 {
        self.q_mat.trace() / self.rank() as f64
    }
}

/// Result of one general step, with Monte Carlo standard errors (zero for
/// quadrature).
#[derive(Debug, Clone)]
pub struct SeStep {
    pub state: SeState,
    pub q_stderr: DMatrix<f64>,
    pub m_stderr: DMatrix<f64>,
    /// Standard error of each entry of `M' − Q'`.
    pub nishimori_stderr: DMatrix<f64>,
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(invalid(format!("delta must be positive and finite, got {delta}")));
    }
    Ok(())
}

fn check_state(state: &SeState, prior: &PriorSpec) -> Result<()> {
    check_delta(state.delta)?;
    let r = prior.rank();
    if state.q_mat.shape() != (r, r) || state.m_mat.shape() != (r, r) {
        return Err(invalid(format!("order parameters must be {r}x{r}")));
    }
    if !state.q_mat.iter().chain(state.m_mat.iter()).all(|v| v.is_finite()) {
        return Err(invalid("order parameters must be finite"));
    }
    Ok(())
}

/// Symmetric square root of a PSD matrix.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if lo < -1e-9 * hi.abs().max(1.0) {
        return Err(Error::NotPsd(lo));
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// One step of the general recursion. Rank one uses quadrature; higher rank
/// uses [`se_step_monte_carlo`].
pub fn se_step_general(
    state: &SeState,
    prior: &PriorSpec,
    n_samples: usize,
    seed: u64,
) -> Result<SeStep> {
    if prior.rank() == 1 {
        se_step_quadrature(state, prior)
    } else {
        se_step_monte_carlo(state, prior, n_samples, seed)
    }
}

/// Rank-one step by exact summation over `x0` and adaptive quadrature in `W`.
pub fn se_step_quadrature(state: &SeState, prior: &PriorSpec) -> Result<SeStep> {
    check_state(state, prior)?;
    if prior.rank() != 1 {
        return Err(invalid("quadrature step requires rank one"));
    }
    let delta = state.delta;
    let q = state.q_mat[(0, 0)];
    let m = state.m_mat[(0, 0)];
    if q < -1e-12 {
        return Err(Error::NotPsd(q / delta));
    }
    let a = q.max(0.0) / delta;
    let gain = m / delta;
    let tilt = TiltedPrior::new(prior, &DMatrix::from_element(1, 1, a))?;
    let f = |b: f64| {
        let (mut mean, mut cov) = ([0.0], [0.0]);
        tilt.eval_into(&[b], &mut mean, &mut cov);
        mean[0]
    };
    let noise = a.sqrt();
    // Both moments are O(a) for small a; keep the tolerance relative. The
    // integrand of E[f x] is only O(√a) pointwise and cancels down to O(a), so
    // its tolerance follows the integrand scale to stay above roundoff.
    let tol = GAUSS_TOL * (a / (1.0 + a)).max(f64::MIN_POSITIVE);
    let tol_m = GAUSS_TOL * (a / (1.0 + a)).sqrt().max(f64::MIN_POSITIVE);
    let (mut q_next, mut m_next) = (0.0, 0.0);
    match prior.atoms() {
        Some(atoms) => {
            for (w, x) in atoms {
                if w == 0.0 {
                    continue;
                }
                let ff = gaussian_expectation_adaptive(
                    |z| {
                        let v = f(gain * x + noise * z);
                        v * v
                    },
                    tol,
                );
                q_next += w * ff;
                // The zero atom drops out of M; its odd integrand would also
                // never meet a relative tolerance.
                if x != 0.0 {
                    let fx = gaussian_expectation_adaptive(|z| f(gain * x + noise * z), tol_m);
                    m_next += w * fx * x;
                }
            }
        }
        None => {
            let rho = prior.rho();
            // Slab: x0 ~ N(0, 1), B ~ N(0, gain² + a), E[x0 | B] = gain B / σ².
            let sigma = (gain * gain + a).sqrt();
            let slab_ff = gaussian_expectation_adaptive(
                |z| {
                    let v = f(sigma * z);
                    v * v
                },
                tol,
            );
            let slab_fz = gaussian_expectation_adaptive(|z| f(sigma * z) * z, tol_m);
            let zero_ff = if rho < 1.0 {
                gaussian_expectation_adaptive(
                    |z| {
                        let v = f(noise * z);
                        v * v
                    },
                    tol,
                )
            } else {
                0.0
            };
            q_next = rho * slab_ff + (1.0 - rho) * zero_ff;
            m_next = if sigma > 0.0 {
                rho * gain / sigma * slab_fz
            } else {
                0.0
            };
        }
    }
    let zero = DMatrix::zeros(1, 1);
    Ok(SeStep {
        state: SeState {
            q_mat: DMatrix::from_element(1, 1, q_next),
            m_mat: DMatrix::from_element(1, 1, m_next),
            scalar_q: state.scalar_q.map(|_| q_next),
            delta,
        },
        q_stderr: zero.clone(),
        m_stderr: zero.clone(),
        nishimori_stderr: zero,
    })
}

#[derive(Clone)]
struct ChunkSums {
    pairs: usize,
    // Per-entry first and second moments of the pair-averaged samples.
    ff: Vec<f64>,
    ff2: Vec<f64>,
    fx: Vec<f64>,
    fx2: Vec<f64>,
    diff2: Vec<f64>,
}

/// Monte Carlo step for any rank.
///
/// Samples are drawn in chunks of 4096 antithetic pairs `(W, −W)`; chunk `k`
/// uses its own keyed stream, and chunk sums are combined in index order, so
/// the result depends only on `(state, seed, n_samples)`.
pub fn se_step_monte_carlo(
    state: &SeState,
    prior: &PriorSpec,
    n_samples: usize,
    seed: u64,
) -> Result<SeStep> {
    check_state(state, prior)?;
    if n_samples < 1000 {
        return Err(invalid(format!("n_samples must be at least 1000, got {n_samples}")));
    }
    let r = prior.rank();
    let rr = r * r;
    let delta = state.delta;
    let a_mat = (&state.q_mat + state.q_mat.transpose()) * (0.5 / delta);
    let root = psd_sqrt(&a_mat)?;
    let gain = &state.m_mat / delta;
    let tilt = TiltedPrior::new(prior, &a_mat)?;

    let n_pairs = n_samples.div_ceil(2);
    let n_chunks = n_pairs.div_ceil(MC_CHUNK);
    let chunks = parallel::map_range(n_chunks, |k| {
        let pairs = MC_CHUNK.min(n_pairs - k * MC_CHUNK);
        let mut rng = keyed_rng(seed, DOMAIN_SE_SAMPLES, k as u64);
        let mut sums = ChunkSums {
            pairs,
            ff: vec![0.0; rr],
            ff2: vec![0.0; rr],
            fx: vec![0.0; rr],
            fx2: vec![0.0; rr],
            diff2: vec![0.0; rr],
        };
        let mut x = vec![0.0; r];
        let mut z = vec![0.0; r];
        let mut base = vec![0.0; r];
        let mut w = vec![0.0; r];
        let mut b = vec![0.0; r];
        let mut f_plus = vec![0.0; r];
        let mut f_minus = vec![0.0; r];
        let mut cov = vec![0.0; rr];
        for _ in 0..pairs {
            prior.sample_into(&mut rng, &mut x);
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..r {
                base[i] = (0..r).map(|j| gain[(i, j)] * x[j]).sum();
                w[i] = (0..r).map(|j| root[(i, j)] * z[j]).sum();
            }
            for i in 0..r {
                b[i] = base[i] + w[i];
            }
            tilt.eval_into(&b, &mut f_plus, &mut cov);
            for i in 0..r {
                b[i] = base[i] - w[i];
            }
            tilt.eval_into(&b, &mut f_minus, &mut cov);
            for i in 0..r {
                for j in 0..r {
                    let ff = 0.5 * (f_plus[i] * f_plus[j] + f_minus[i] * f_minus[j]);
                    let fx = 0.5 * (f_plus[i] + f_minus[i]) * x[j];
                    let k = i * r + j;
                    sums.ff[k] += ff;
                    sums.ff2[k] += ff * ff;
                    sums.fx[k] += fx;
                    sums.fx2[k] += fx * fx;
                    sums.diff2[k] += (fx - ff) * (fx - ff);
                }
            }
        }
        sums
    });

    let mut total = ChunkSums {
        pairs: 0,
        ff: vec![0.0; rr],
        ff2: vec![0.0; rr],
        fx: vec![0.0; rr],
        fx2: vec![0.0; rr],
        diff2: vec![0.0; rr],
    };
    let mut cross = vec![0.0; rr];
    for c in &chunks {
        total.pairs += c.pairs;
        for k in 0..rr {
            total.ff[k] += c.ff[k];
            total.ff2[k] += c.ff2[k];
            total.fx[k] += c.fx[k];
            total.fx2[k] += c.fx2[k];
            total.diff2[k] += c.diff2[k];
        }
    }
    let n = total.pairs as f64;
    let stderr = |s1: f64, s2: f64| {
        let mean = s1 / n;
        ((s2 / n - mean * mean).max(0.0) / (n - 1.0)).sqrt()
    };
    let mut q_next = DMatrix::zeros(r, r);
    let mut m_next = DMatrix::zeros(r, r);
    let mut q_se = DMatrix::zeros(r, r);
    let mut m_se = DMatrix::zeros(r, r);
    let mut d_se = DMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            let k = i * r + j;
            q_next[(i, j)] = total.ff[k] / n;
            m_next[(i, j)] = total.fx[k] / n;
            q_se[(i, j)] = stderr(total.ff[k], total.ff2[k]);
            m_se[(i, j)] = stderr(total.fx[k], total.fx2[k]);
            cross[k] = total.fx[k] - total.ff[k];
            d_se[(i, j)] = stderr(cross[k], total.diff2[k]);
        }
    }
    let scalar_q = state.scalar_q.map(|_| q_next.trace() / r as f64);
    Ok(SeStep {
        state: SeState {
            q_mat: q_next,
            m_mat: m_next,
            scalar_q,
            delta,
        },
        q_stderr: q_se,
        m_stderr: m_se,
        nishimori_stderr: d_se,
    })
}

/// Log-density of the chi distribution with `r` degrees of freedom (the norm
/// of a standard Gaussian vector in `r` dimensions).
pub fn chi_log_density(u: f64, r: usize) -> f64 {
    let rf = r as f64;
    if u < 0.0 {
        return f64::NEG_INFINITY;
    }
    let radial = if r == 1 { 0.0 } else { (rf - 1.0) * u.ln() };
    radial - 0.5 * u * u - (0.5 * rf - 1.0) * std::f64::consts::LN_2 - ln_gamma(0.5 * rf)
}

fn chi_expectation<F: FnMut(f64) -> f64>(r: usize, mut g: F) -> f64 {
    let hi = (r as f64).sqrt() + 12.0 * std::f64::consts::SQRT_2;
    gauss_kronrod(
        |u| {
            let lp = chi_log_density(u, r);
            if lp == f64::NEG_INFINITY {
                0.0
            } else {
                lp.exp() * g(u)
            }
        },
        0.0,
        hi,
        CHI_TOL,
        0.0,
        if r <= 4 { 6 } else { 32 },
    )
    .value
}

fn support_probability(a: f64, s: f64, rho: f64, r: usize) -> f64 {
    if rho >= 1.0 {
        1.0
    } else {
        logistic(-support_log_odds(a, s, rho, r))
    }
}

/// `J_r(a, τ) = E_u[{1 + τ u² (1 − ρ̂)/(r(1 + a))} ρ̂(a, τ u²)]`, `u ~ chi_r`.
pub fn j_r(a: f64, tau: f64, rho: f64, r: usize) -> f64 {
    let rf = r as f64;
    chi_expectation(r, |u| {
        let p = support_probability(a, tau * u * u, rho, r);
        (1.0 + tau * u * u * (1.0 - p) / (rf * (1.0 + a))) * p
    })
}

fn check_gb_scalar(q: f64, delta: f64, rho: f64, r: usize) -> Result<()> {
    check_delta(delta)?;
    if !(q >= 0.0) || !q.is_finite() {
        return Err(invalid(format!("q must be finite and non-negative, got {q}")));
    }
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(invalid(format!("rho must lie in (0, 1], got {rho}")));
    }
    if r == 0 {
        return Err(invalid("rank must be at least 1"));
    }
    Ok(())
}

/// One step of the isotropic Gauss–Bernoulli recursion,
/// `q' = ρ q/(Δ + q) · J_r(q/Δ, q/Δ + q²/Δ²)`.
pub fn se_step_scalar_gb(q: f64, delta: f64, rho: f64, r: usize) -> Result<f64> {
    check_gb_scalar(q, delta, rho, r)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let a = q / delta;
    let tau = a + a * a;
    Ok(rho * a / (1.0 + a) * j_r(a, tau, rho, r))
}

/// Bayes-optimal scalar map `q ↦ q'` for any supported prior, assuming
/// `Q = M = q I`.
pub fn se_map(prior: &PriorSpec, delta: f64, q: f64) -> Result<f64> {
    match prior.family() {
        PriorFamily::GaussBernoulli => se_step_scalar_gb(q, delta, prior.rho(), prior.rank()),
        _ => {
            let state = SeState::isotropic(q, 1, delta);
            let step = se_step_quadrature(&state, prior)?;
            Ok(step.state.q_mat[(0, 0)])
        }
    }
}

/// Bayes-optimal overlap of the scalar Gaussian channel `y = √γ x + z` per
/// component. The fixed points of the recursion at noise `Δ` are exactly the
/// `q = γΔ` with `Δ = overlap_map(γ)/γ`.
pub fn overlap_map(prior: &PriorSpec, gamma: f64) -> Result<f64> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be finite and non-negative, got {gamma}")));
    }
    if gamma == 0.0 {
        let mean = prior.mean();
        return Ok(mean.norm_squared() / prior.rank() as f64);
    }
    se_map(prior, 1.0, gamma)
}

/// The first `steps` iterates of the scalar map starting at `q0`, including `q0`.
pub fn se_trajectory(prior: &PriorSpec, delta: f64, q0: f64, steps: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(steps + 1);
    let mut q = q0;
    out.push(q);
    for _ in 0..steps {
        q = se_map(prior, delta, q)?;
        out.push(q);
    }
    Ok(out)
}

/// Bethe log-likelihood at `Q = M = q I`.
///
/// Gauss–Bernoulli:
/// `φ = E_u{ρ ψ(a, τu²) + (1 − ρ) ψ(a, a u²)} − r q²/(4Δ)` with
/// `ψ(a, s) = ln N(aI, √s e)`. Discrete priors use the rank-one quadrature.
pub fn se_likelihood(q: f64, prior: &PriorSpec, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(q >= 0.0) || !q.is_finite() {
        return Err(invalid(format!("q must be finite and non-negative, got {q}")));
    }
    let r = prior.rank();
    let rf = r as f64;
    let a = q / delta;
    let penalty = rf * q * q / (4.0 * delta);
    let rho = prior.rho();
    let value = match prior.family() {
        PriorFamily::GaussBernoulli => {
            if q == 0.0 {
                return Ok(0.0);
            }
            let tau = a + a * a;
            let ln_slab_weight = rho.ln() - 0.5 * rf * a.ln_1p();
            let ln_zero = if rho < 1.0 { (1.0 - rho).ln() } else { f64::NEG_INFINITY };
            let psi = |s: f64| log_add_exp(ln_zero, ln_slab_weight + s / (2.0 * (1.0 + a)));
            let slab = chi_expectation(r, |u| psi(tau * u * u));
            let zero = if rho < 1.0 {
                chi_expectation(r, |u| psi(a * u * u))
            } else {
                0.0
            };
            rho * slab + (1.0 - rho) * zero
        }
        _ => {
            let tilt = TiltedPrior::new(prior, &DMatrix::from_element(1, 1, a))?;
            let noise = a.sqrt();
            let atoms = prior.atoms().expect("discrete family");
            atoms
                .into_iter()
                .filter(|(w, _)| *w > 0.0)
                .map(|(w, x)| {
                    w * gaussian_expectation_adaptive(
                        |z| {
                            let (mut m, mut c) = ([0.0], [0.0]);
                            tilt.eval_into(&[a * x + noise * z], &mut m, &mut c)
                        },
                        GAUSS_TOL,
                    )
                })
                .sum()
        }
    };
    Ok(value - penalty)
}

/// `Tr[E(x0 x0^T) − 2M + Q]`.
pub fn mse_from_order_params(q_mat: &DMatrix<f64>, m_mat: &DMatrix<f64>, prior: &PriorSpec) -> f64 {
    (prior.second_moment() - m_mat * 2.0 + q_mat).trace()
}

/// Fixed-point driver settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Overlap of the uninformative start.
    pub epsilon: f64,
    /// Stop on the Aitken-extrapolated change instead of the raw change.
    pub aitken: bool,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig {
            tol: 1e-10,
            max_iter: 100_000,
            epsilon: UNINFORMATIVE_EPSILON,
            aitken: false,
        }
    }
}

/// Outcome of [`se_fixed_point`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointReport {
    pub prior: PriorFamily,
    pub rho: f64,
    pub r: usize,
    pub delta: f64,
    pub init: InitMode,
    pub q_star: f64,
    pub mse: f64,
    pub phi: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates the Bayes-optimal scalar map to a fixed point.
///
/// The uninformative start is `q = ε`, the informative start the prior second
/// moment. Iteration stops when `|q' − q| < tol · min(1, q'/s)` with `s` the
/// per-component second moment, or when `q'` drops below [`ZERO_FLOOR`]. The
/// relative form keeps a slowly growing trajectory from being mistaken for a
/// fixed point at `ε`.
pub fn se_fixed_point(
    prior: &PriorSpec,
    delta: f64,
    mode: InitMode,
    config: &SeConfig,
) -> Result<FixedPointReport> {
    check_delta(delta)?;
    if !(config.tol > 0.0) {
        return Err(invalid(format!("tol must be positive, got {}", config.tol)));
    }
    let s = prior.component_second_moment();
    let mut q = match mode {
        InitMode::Uninformative => config.epsilon,
        InitMode::Informative => s,
    };
    let mut history: [f64; 2] = [f64::NAN, f64::NAN];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let next = se_map(prior, delta, q)?;
        iterations += 1;
        if next < ZERO_FLOOR {
            q = 0.0;
            converged = true;
            break;
        }
        let threshold = config.tol * (next / s).min(1.0);
        if config.aitken && history[1].is_finite() {
            let (q0, q1, q2) = (history[1], q, next);
            let denom = (q2 - q1) - (q1 - q0);
            if denom != 0.0 {
                let extrapolated = q2 - (q2 - q1) * (q2 - q1) / denom;
                if extrapolated.is_finite() && (extrapolated - q2).abs() < threshold {
                    q = extrapolated.clamp(0.0, s);
                    converged = true;
                    break;
                }
            }
        }
        let change = (next - q).abs();
        history = [history[1], q];
        q = next;
        if change < threshold {
            converged = true;
            break;
        }
    }
    let r = prior.rank();
    let mse = r as f64 * (s - q);
    let phi = se_likelihood(q, prior, delta)?;
    Ok(FixedPointReport {
        prior: prior.family(),
        rho: prior.rho(),
        r,
        delta,
        init: mode,
        q_star: q,
        mse,
        phi,
        iterations,
        converged,
    })
}

/// The report with the largest `φ`; ties within `1e-10` go to the smaller MSE.
pub fn mmse_select(reports: &[FixedPointReport]) -> Result<FixedPointReport> {
    let mut best: Option<&FixedPointReport> = None;
    for r in reports {
        best = Some(match best {
            None => r,
            Some(b) if r.phi > b.phi + 1e-10 => r,
            Some(b) if (r.phi - b.phi).abs() <= 1e-10 && r.mse < b.mse => r,
            Some(b) => b,
        });
    }
    best.cloned().ok_or_else(|| invalid("mmse_select needs at least one report"))
}
