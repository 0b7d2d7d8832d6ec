// SPDX-License-Identifier: Apache-2.0

//! Finite-N approximate message passing for the symmetric spiked model.
//!
//! One iteration maps the current means `a^t` and variances `v^t` to
//!
//! ```text
//! A^t   = (1/(NΔ)) Σ_μ a_μ a_μ^T
//! B_μ^t = (1/(Δ√N)) Σ_ν y_μν a_ν − (1/(ΔN)) (Σ_ν v_ν^t) a_μ^{t−1}
//! a_μ^{t+1} = f(A^t, B_μ^t),   v_μ^{t+1} = ∂f/∂B (A^t, B_μ^t)
//! ```
//!
//! The Onsager term multiplies the previous mean by the summed variances of
//! the current iterate (the derivative of the denoiser that produced `a^t`).

use nalgebra::DMatrix;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::denoiser::TiltedPrior;
use crate::error::{invalid, Error, Result};
use crate::model::{keyed_rng, Instance, PriorSpec, DOMAIN_AMP_INIT};
use crate::parallel;

/// Magnitude of the uniform perturbation used by the uninformative start.
pub const INIT_EPSILON: f64 = 1e-6;
/// Any |a_μ| beyond this aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Tiny random means, prior covariance as variance.
    Uninformative,
    /// Start at the ground truth with zero variance.
    Informative,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::Uninformative => "uninformative",
            InitMode::Informative => "informative",
        }
    }
}

impl std::fmt::Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for InitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uninformative" | "uninf" | "random" => Ok(InitMode::Uninformative),
            "informative" | "inf" | "planted" => Ok(InitMode::Informative),
            other => Err(invalid(format!("unknown init mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpConfig {
    /// Stop once `(1/N) Σ |a^{t+1} − a^t|² < tol²`, i.e. `tol` bounds the RMS
    /// change. A bound of `tol` itself would stop an uninformative start, whose
    /// steps begin near `INIT_EPSILON²`, before the signal can grow.
    pub tol: f64,
    pub max_iter: usize,
    /// `new = (1 − damping) update + damping old`.
    pub damping: f64,
    /// Disable only to demonstrate what the correction buys.
    pub onsager: bool,
}

impl Default for AmpConfig {
    fn default() -> Self {
        AmpConfig {
            tol: 1e-8,
            max_iter: 2000,
            damping: 0.0,
            onsager: true,
        }
    }
}

impl AmpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(invalid("max_iter must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(invalid(format!("damping must lie in [0, 1), got {}", self.damping)));
        }
        Ok(())
    }
}

/// Iterate of the algorithm. Buffers are row-major: `a`, `b`, `a_prev` are
/// `N x r`, `v` holds N stacked `r x r` blocks.
#[derive(Debug, Clone)]
pub struct AmpState {
    pub n: usize,
    pub r: usize,
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    /// Coupling `A` used in the most recent update (zero before the first step).
    pub a_mat: DMatrix<f64>,
    /// Fields `B_μ` used in the most recent update.
    pub b: Vec<f64>,
    pub a_prev: Vec<f64>,
    /// Σ_ν v_ν paired with `a_prev` in the most recent Onsager term.
    pub v_sum_prev: DMatrix<f64>,
    pub t: usize,
}

impl AmpState {
    /// All-zero state (the trivial fixed point of zero-mean priors).
    pub fn zeros(n: usize, r: usize) -> Self {
        AmpState {
            n,
            r,
            a: vec![0.0; n * r],
            v: vec![0.0; n * r * r],
            a_mat: DMatrix::zeros(r, r),
            b: vec![0.0; n * r],
            a_prev: vec![0.0; n * r],
            v_sum_prev: DMatrix::zeros(r, r),
            t: 0,
        }
    }

    /// Current means as an `N x r` matrix.
    pub fn estimate(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.r, &self.a)
    }

    /// `(1/N) Σ_μ a_μ a_μ^T`.
    pub fn self_overlap(&self) -> DMatrix<f64> {
        outer_sum(&self.a, self.r) / self.n as f64
    }

    fn variance_sum(&self) -> DMatrix<f64> {
        let r = self.r;
        let mut s = DMatrix::zeros(r, r);
        for block in self.v.chunks(r * r) {
            for i in 0..r {
                for j in 0..r {
                    s[(i, j)] += block[i * r + j];
                }
            }
        }
        s
    }
}

/// `Σ_μ a_μ a_μ^T` for row-major `N x r` data, summed in index order.
fn outer_sum(a: &[f64], r: usize) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(r, r);
    for row in a.chunks(r) {
        for i in 0..r {
            for j in 0..r {
                s[(i, j)] += row[i] * row[j];
            }
        }
    }
    s
}

fn check_ranks(instance: &Instance, prior: &PriorSpec) -> Result<()> {
    if instance.rank() != prior.rank() {
        return Err(invalid(format!(
            "instance has rank {} but prior has rank {}",
            instance.rank(),
            prior.rank()
        )));
    }
    Ok(())
}

/// Starting point of the iteration.
///
/// Uninformative: `a_μ` uniform in `[−ε, ε]^r` (keyed by the instance seed),
/// `v_μ` the prior covariance. Informative: `a_μ = (x0)_μ`, `v_μ = 0`. In both
/// cases `a_prev = 0`, so the first Onsager term vanishes.
pub fn amp_init(instance: &Instance, prior: &PriorSpec, mode: InitMode) -> Result<AmpState> {
    check_ranks(instance, prior)?;
    let (n, r) = (instance.n, prior.rank());
    let mut state = AmpState::zeros(n, r);
    match mode {
        InitMode::Uninformative => {
            parallel::for_each_chunk_mut(&mut state.a, r, |mu, row| {
                let mut rng = keyed_rng(instance.seed, DOMAIN_AMP_INIT, mu as u64);
                for x in row.iter_mut() {
                    *x = INIT_EPSILON * (2.0 * rng.random::<f64>() - 1.0);
                }
            });
            let cov = prior.covariance();
            for block in state.v.chunks_mut(r * r) {
                for i in 0..r {
                    for j in 0..r {
                        block[i * r + j] = cov[(i, j)];
                    }
                }
            }
        }
        InitMode::Informative => {
            state.a.copy_from_slice(instance.x0.as_slice());
        }
    }
    Ok(state)
}

/// `Y a` for row-major `N x r` data.
pub fn field_product(instance: &Instance, a: &[f64], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; instance.n * r];
    instance.y.mul_rows(a, r, &mut out);
    out
}

/// One AMP update in place; returns the mean-squared change of the means.
pub fn amp_step(
    state: &mut AmpState,
    instance: &Instance,
    prior: &PriorSpec,
    config: &AmpConfig,
) -> Result<f64> {
    check_ranks(instance, prior)?;
    let (n, r) = (state.n, state.r);
    let nf = n as f64;
    let delta = instance.delta;

    let a_mat = outer_sum(&state.a, r) / (nf * delta);
    let ya = field_product(instance, &state.a, r);
    let v_sum = state.variance_sum();
    let field_scale = 1.0 / (delta * nf.sqrt());
    let onsager = if config.onsager {
        &v_sum / (delta * nf)
    } else {
        DMatrix::zeros(r, r)
    };

    let mut b = ya;
    for (bm, prev) in b.chunks_mut(r).zip(state.a_prev.chunks(r)) {
        let corr: Vec<f64> = (0..r)
            .map(|i| (0..r).map(|j| onsager[(i, j)] * prev[j]).sum())
            .collect();
        for (x, c) in bm.iter_mut().zip(corr) {
            *x = *x * field_scale - c;
        }
    }

    let tilt = TiltedPrior::new(prior, &a_mat)?;
    let mut a_new = vec![0.0; n * r];
    let mut v_new = vec![0.0; n * r * r];
    parallel::for_each_chunk_pair_mut(&mut a_new, r, &mut v_new, r * r, |mu, am, vm| {
        tilt.eval_into(&b[mu * r..(mu + 1) * r], am, vm);
    });

    let magnitude = a_new.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(magnitude <= DIVERGENCE_LIMIT) {
        return Err(Error::Divergence {
            iteration: state.t + 1,
            magnitude,
        });
    }

    let d = config.damping;
    if d > 0.0 {
        for (x, old) in a_new.iter_mut().zip(&state.a) {
            *x = (1.0 - d) * *x + d * old;
        }
        for (x, old) in v_new.iter_mut().zip(&state.v) {
            *x = (1.0 - d) * *x + d * old;
        }
    }

    let change = a_new
        .iter()
        .zip(&state.a)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / nf;

    state.a_prev = std::mem::replace(&mut state.a, a_new);
    state.v = v_new;
    state.a_mat = a_mat;
    state.b = b;
    state.v_sum_prev = v_sum;
    state.t += 1;
    Ok(change)
}

/// Outcome of [`amp_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmpReport {
    pub init: InitMode,
    pub mse: f64,
    pub phi: f64,
    /// Aligned overlap with the truth per iteration, starting at t = 0.
    pub q_trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates [`amp_step`] to convergence and reports the aligned MSE and the
/// Bethe log-likelihood at the final iterate.
pub fn amp_run(
    instance: &Instance,
    prior: &PriorSpec,
    mode: InitMode,
    config: &AmpConfig,
) -> Result<AmpReport> {
    amp_run_with_state(instance, prior, mode, config).map(|(report, _)| report)
}

/// Like [`amp_run`] but also returns the final state.
pub fn amp_run_with_state(
    instance: &Instance,
    prior: &PriorSpec,
    mode: InitMode,
    config: &AmpConfig,
) -> Result<(AmpReport, AmpState)> {
    config.validate()?;
    let mut state = amp_init(instance, prior, mode)?;
    let mut trajectory = vec![aligned_overlap(&state.estimate(), &instance.x0)];
    let mut converged = false;
    while state.t < config.max_iter {
        let change = amp_step(&mut state, instance, prior, config)?;
        trajectory.push(aligned_overlap(&state.estimate(), &instance.x0));
        if change < config.tol * config.tol {
            converged = true;
            break;
        }
    }
    let mse = mse_aligned(&state.estimate(), &instance.x0);
    let phi = bethe_likelihood(&state, instance, prior)?;
    Ok((
        AmpReport {
            init: mode,
            mse,
            phi,
            q_trajectory: trajectory,
            iterations: state.t,
            converged,
        },
        state,
    ))
}

/// Bethe log-likelihood per variable at a (near-)fixed point:
///
/// ```text
/// φ = (1/N) Σ_μ ln N(A, B_μ) − (1/(2N)) Σ_μ Z̃_μ + (1/Δ) Tr(v̄ Q̂)
/// Z̃_μ = (1/(Δ√N)) a_μ^T Σ_ν y_μν a_ν − (1/(2ΔN)) a_μ^T (Σ_ν a_ν a_ν^T) a_μ
/// ```
///
/// with `Q̂ = (1/N) Σ a a^T` and `v̄ = (1/N) Σ v`. The last term is the
/// reaction of the noise on the quadratic form `a^T Y a`; without it φ is
/// biased by `Tr(v̄ Q̂)/Δ` relative to its state-evolution value.
pub fn bethe_likelihood(state: &AmpState, instance: &Instance, prior: &PriorSpec) -> Result<f64> {
    check_ranks(instance, prior)?;
    let (n, r) = (state.n, state.r);
    let nf = n as f64;
    let delta = instance.delta;
    let tilt = TiltedPrior::new(prior, &state.a_mat)?;
    let log_norms = parallel::map_range(n, |mu| {
        let mut m = vec![0.0; r];
        let mut c = vec![0.0; r * r];
        tilt.eval_into(&state.b[mu * r..(mu + 1) * r], &mut m, &mut c)
    });
    let ya = field_product(instance, &state.a, r);
    let aa = outer_sum(&state.a, r);
    let mut z_sum = 0.0;
    for mu in 0..n {
        let am = &state.a[mu * r..(mu + 1) * r];
        let lin: f64 = am.iter().zip(&ya[mu * r..(mu + 1) * r]).map(|(x, y)| x * y).sum();
        let mut quad = 0.0;
        for i in 0..r {
            for j in 0..r {
                quad += am[i] * aa[(i, j)] * am[j];
            }
        }
        z_sum += lin / (delta * nf.sqrt()) - quad / (2.0 * delta * nf);
    }
    let q_hat = &aa / nf;
    let v_bar = state.variance_sum() / nf;
    let reaction = (&v_bar * &q_hat).trace() / delta;
    let phi = log_norms.iter().sum::<f64>() / nf - z_sum / (2.0 * nf) + reaction;
    if !phi.is_finite() {
        return Err(Error::BetheUndefined(format!(
            "non-finite value at iteration {}",
            state.t
        )));
    }
    Ok(phi)
}

/// Orthogonal Procrustes rotation `R` maximizing `Tr(R^T a^T x0^T)`.
fn procrustes(a: &DMatrix<f64>, x0: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = a.transpose() * x0.transpose();
    let svd = cross.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    u * v_t
}

/// `min_R (1/N) ‖a R − x0^T‖²_F` over orthogonal `R`; `a` is `N x r`, `x0` is `r x N`.
pub fn mse_aligned(a: &DMatrix<f64>, x0: &DMatrix<f64>) -> f64 {
    assert_eq!(a.nrows(), x0.ncols(), "a and x0 disagree on N");
    assert_eq!(a.ncols(), x0.nrows(), "a and x0 disagree on r");
    let n = a.nrows() as f64;
    let rot = procrustes(a, x0);
    let diff = a * rot - x0.transpose();
    diff.norm_squared() / n
}

/// `Tr[(1/N) a^T x0^T R] / r` after Procrustes alignment; comparable to the
/// scalar state-evolution overlap.
pub fn aligned_overlap(a: &DMatrix<f64>, x0: &DMatrix<f64>) -> f64 {
    let n = a.nrows() as f64;
    let r = a.ncols() as f64;
    let cross = a.transpose() * x0.transpose() / n;
    cross.singular_values().sum() / r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PriorSpec;

    fn rotation3(seed: u64) -> DMatrix<f64> {
        let mut rng = keyed_rng(seed, 99, 0);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.random::<f64>() - 0.5);
        m.qr().q()
    }

    #[test]
    fn mse_of_exact_recovery_is_zero() {
        let p = PriorSpec::gauss_bernoulli(0.3, 3).unwrap();
        let x0 = crate::model::sample_signal(&p, 500, 1).unwrap();
        assert!(mse_aligned(&x0.transpose(), &x0) < 1e-20);
        let rotated = x0.transpose() * rotation3(4);
        assert!(mse_aligned(&rotated, &x0) < 1e-10);
        let zero = DMatrix::zeros(500, 3);
        let expect = x0.norm_squared() / 500.0;
        assert!((mse_aligned(&zero, &x0) - expect).abs() < 1e-14);
        assert!((expect - 0.9).abs() < 0.25);
    }

    #[test]
    fn init_modes() {
        let p = PriorSpec::gauss_bernoulli(0.1, 2).unwrap();
        let inst = Instance::generate(&p, 200, 0.01, 3).unwrap();
        let s = amp_init(&inst, &p, InitMode::Informative).unwrap();
        assert!(mse_aligned(&s.estimate(), &inst.x0) < 1e-20);
        assert!(s.v.iter().all(|v| *v == 0.0));
        let s = amp_init(&inst, &p, InitMode::Uninformative).unwrap();
        for block in s.v.chunks(4) {
            assert_eq!(block, &[0.1, 0.0, 0.0, 0.1]);
        }
        for row in s.a.chunks(2) {
            let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
            assert!(norm <= 2f64.sqrt() * INIT_EPSILON);
        }
        assert!(s.a_prev.iter().all(|v| *v == 0.0));
        let bad = PriorSpec::gauss_bernoulli(0.1, 1).unwrap();
        assert!(amp_init(&inst, &bad, InitMode::Informative).is_err());
    }

    #[test]
    fn zero_state_is_fixed() {
        let p = PriorSpec::rademacher_bernoulli(0.3).unwrap();
        let inst = Instance::generate(&p, 100, 0.2, 2).unwrap();
        let mut s = AmpState::zeros(100, 1);
        let change = amp_step(&mut s, &inst, &p, &AmpConfig::default()).unwrap();
        assert_eq!(change, 0.0);
        assert!(s.a.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn coupling_matches_previous_means() {
        let p = PriorSpec::gauss_bernoulli(0.2, 2).unwrap();
        let inst = Instance::generate(&p, 300, 0.02, 6).unwrap();
        let mut s = amp_init(&inst, &p, InitMode::Uninformative).unwrap();
        for _ in 0..10 {
            amp_step(&mut s, &inst, &p, &AmpConfig::default()).unwrap();
            let expect = outer_sum(&s.a_prev, 2) / (300.0 * inst.delta);
            assert!((&s.a_mat - expect).amax() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = AmpConfig::default();
        assert!(c.validate().is_ok());
        c.damping = 1.0;
        assert!(c.validate().is_err());
        c = AmpConfig { tol: 0.0, ..AmpConfig::default() };
        assert!(c.validate().is_err());
        c = AmpConfig { max_iter: 0, ..AmpConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn bethe_vanishes_at_zero_state() {
        let p = PriorSpec::gauss_bernoulli(0.1, 1).unwrap();
        let inst = Instance::generate(&p, 200, 0.05, 1).unwrap();
        let s = AmpState::zeros(200, 1);
        assert_eq!(bethe_likelihood(&s, &inst, &p).unwrap(), 0.0);
    }

    /// Independent O(N² r) evaluation of the field update.
    fn brute_force_fields(state: &AmpState, inst: &Instance, by_column: bool) -> Vec<f64> {
        let (n, r) = (state.n, state.r);
        let delta = inst.delta;
        let mut v_sum = vec![0.0; r * r];
        for block in state.v.chunks(r * r) {
            for (s, x) in v_sum.iter_mut().zip(block) {
                *s += x;
            }
        }
        let mut b = vec![0.0; n * r];
        for mu in 0..n {
            for i in 0..r {
                let mut acc = 0.0;
                for nu in 0..n {
                    let y = if by_column { inst.y.get(nu, mu) } else { inst.y.get(mu, nu) };
                    acc += y * state.a[nu * r + i];
                }
                let mut ons = 0.0;
                for j in 0..r {
                    ons += v_sum[i * r + j] * state.a_prev[mu * r + j];
                }
                b[mu * r + i] = acc / (delta * (n as f64).sqrt()) - ons / (delta * n as f64);
            }
        }
        b
    }

    #[test]
    fn fields_match_brute_force() {
        let p = PriorSpec::gauss_bernoulli(0.3, 2).unwrap();
        let inst = Instance::generate(&p, 50, 0.05, 9).unwrap();
        let cfg = AmpConfig::default();
        let mut s = amp_init(&inst, &p, InitMode::Uninformative).unwrap();
        for _ in 0..5 {
            let expect_row = brute_force_fields(&s, &inst, false);
            let expect_col = brute_force_fields(&s, &inst, true);
            amp_step(&mut s, &inst, &p, &cfg).unwrap();
            for ((got, row), col) in s.b.iter().zip(&expect_row).zip(&expect_col) {
                assert!((got - row).abs() < 1e-10);
                assert_eq!(row, col);
            }
        }
    }

    #[test]
    fn first_step_gains_overlap_below_threshold() {
        let p = PriorSpec::gauss_bernoulli(0.1, 1).unwrap();
        let inst = Instance::generate(&p, 2000, 0.005, 21).unwrap();
        let mut s = amp_init(&inst, &p, InitMode::Uninformative).unwrap();
        let before = aligned_overlap(&s.estimate(), &inst.x0);
        amp_step(&mut s, &inst, &p, &AmpConfig::default()).unwrap();
        assert!(aligned_overlap(&s.estimate(), &inst.x0) > before);
    }

    #[test]
    fn onsager_term_matters() {
        let p = PriorSpec::gauss_bernoulli(0.1, 1).unwrap();
        let inst = Instance::generate(&p, 2000, 0.008, 5).unwrap();
        let with = amp_run(&inst, &p, InitMode::Uninformative, &AmpConfig::default()).unwrap();
        let cfg = AmpConfig { onsager: false, ..AmpConfig::default() };
        let without = amp_run(&inst, &p, InitMode::Uninformative, &cfg).unwrap();
        assert!((with.mse - without.mse).abs() > 1e-3, "{} vs {}", with.mse, without.mse);
    }

    #[test]
    fn converged_state_satisfies_finite_n_nishimori() {
        let p = PriorSpec::gauss_bernoulli(0.1, 1).unwrap();
        let inst = Instance::generate(&p, 4000, 0.005, 8).unwrap();
        let (rep, s) = amp_run_with_state(&inst, &p, InitMode::Uninformative, &AmpConfig::default()).unwrap();
        assert!(rep.converged);
        let q = s.self_overlap()[(0, 0)];
        let m = aligned_overlap(&s.estimate(), &inst.x0);
        assert!((q - m).abs() < 3.0 / (4000f64).sqrt(), "q={q} m={m}");
        for block in s.v.chunks(1) {
            assert!(block[0] >= 0.0);
        }
    }
}
