// SPDX-License-Identifier: Apache-2.0

//! Test-only oracles, written independently of the library's numerics.

#![allow(dead_code)]

use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use sparse_pca_amp::amp::{amp_init, amp_step, AmpConfig, AmpState, InitMode};
use sparse_pca_amp::denoiser::{posterior, DenoiserInput};
use sparse_pca_amp::model::{Instance, PriorFamily, PriorSpec};
use sparse_pca_amp::state_evolution::{se_step_general, se_step_scalar_gb, SeState};

/// Integration window per coordinate.
const HALF_WIDTH: f64 = 12.0;
const LEGENDRE_DEGREE: usize = 16;

/// Composite Gauss–Legendre nodes on `[−12, 12]` with `panels` equal panels.
fn composite_nodes(panels: usize) -> Vec<(f64, f64)> {
    let rule = GaussLegendre::new(NonZeroUsize::new(LEGENDRE_DEGREE).unwrap());
    let width = 2.0 * HALF_WIDTH / panels as f64;
    let mut out = Vec::with_capacity(panels * LEGENDRE_DEGREE);
    for k in 0..panels {
        let (lo, hi) = (-HALF_WIDTH + k as f64 * width, -HALF_WIDTH + (k + 1) as f64 * width);
        let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for &(x, w) in rule.iter() {
            out.push((mid + half * x, half * w));
        }
    }
    out
}

/// `(Z, E[x], E[x x^T])` of the tilted measure, unnormalized moments divided by `Z`.
#[derive(Debug, Clone)]
pub struct OracleMoments {
    pub log_norm: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn finish(z: f64, first: DVector<f64>, second: DMatrix<f64>) -> OracleMoments {
    let mean = &first / z;
    let cov = &second / z - &mean * mean.transpose();
    OracleMoments {
        log_norm: z.ln(),
        mean,
        cov,
    }
}

/// Gauss–Bernoulli tilted measure by tensor quadrature (rank 1 or 2).
fn gauss_bernoulli_moments(rho: f64, a: &DMatrix<f64>, b: &DVector<f64>, panels: usize) -> OracleMoments {
    let r = b.len();
    let nodes = composite_nodes(panels);
    let gauss_norm = (2.0 * std::f64::consts::PI).powf(-0.5 * r as f64);
    let mut z = 1.0 - rho;
    let mut first = DVector::zeros(r);
    let mut second = DMatrix::zeros(r, r);
    match r {
        1 => {
            let (p, b) = (1.0 + a[(0, 0)], b[0]);
            for &(x, w) in &nodes {
                let f = rho * gauss_norm * w * (b * x - 0.5 * p * x * x).exp();
                z += f;
                first[0] += f * x;
                second[(0, 0)] += f * x * x;
            }
        }
        2 => {
            let (p11, p12, p22) = (1.0 + a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), 1.0 + a[(1, 1)]);
            let (mut s1, mut s2, mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(x1, w1) in &nodes {
                for &(x2, w2) in &nodes {
                    let quad = p11 * x1 * x1 + 2.0 * p12 * x1 * x2 + p22 * x2 * x2;
                    let f = rho * gauss_norm * w1 * w2 * (b[0] * x1 + b[1] * x2 - 0.5 * quad).exp();
                    z += f;
                    s1 += f * x1;
                    s2 += f * x2;
                    s11 += f * x1 * x1;
                    s12 += f * x1 * x2;
                    s22 += f * x2 * x2;
                }
            }
            first = DVector::from_vec(vec![s1, s2]);
            second = DMatrix::from_row_slice(2, 2, &[s11, s12, s12, s22]);
        }
        _ => panic!("oracle supports rank 1 and 2"),
    }
    finish(z, first, second)
}

/// Discrete rank-one priors by direct summation over atoms.
fn atom_moments(family: PriorFamily, rho: f64, a: f64, b: f64) -> OracleMoments {
    let atoms: Vec<(f64, f64)> = match family {
        PriorFamily::BernoulliSpike => vec![(1.0 - rho, 0.0), (rho, 1.0)],
        PriorFamily::RademacherBernoulli => vec![(1.0 - rho, 0.0), (0.5 * rho, 1.0), (0.5 * rho, -1.0)],
        PriorFamily::GaussBernoulli => unreachable!(),
    };
    let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (w, x) in atoms {
        let f = w * (b * x - 0.5 * a * x * x).exp();
        z += f;
        m1 += f * x;
        m2 += f * x * x;
    }
    finish(
        z,
        DVector::from_element(1, m1),
        DMatrix::from_element(1, 1, m2),
    )
}

/// Oracle moments; the quadrature is run at two resolutions and must agree.
pub fn oracle(prior: &PriorSpec, a: &DMatrix<f64>, b: &DVector<f64>) -> OracleMoments {
    match prior.family() {
        PriorFamily::GaussBernoulli => {
            let panels = if b.len() == 1 { 96 } else { 24 };
            let coarse = gauss_bernoulli_moments(prior.rho(), a, b, panels);
            let fine = gauss_bernoulli_moments(prior.rho(), a, b, 2 * panels);
            assert!(
                (coarse.log_norm - fine.log_norm).abs() < 1e-11
                    && (&coarse.mean - &fine.mean).amax() < 1e-11
                    && (&coarse.cov - &fine.cov).amax() < 1e-11,
                "oracle quadrature not resolved"
            );
            fine
        }
        family => atom_moments(family, prior.rho(), a[(0, 0)], b[0]),
    }
}

/// Relative error with a floor so that entries near zero are compared absolutely.
pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-3)
}

/// Denoiser against the quadrature oracle and against central finite
/// differences (step `1e-6`) of its own `ln N` and mean. Returns the worst
/// relative error of the three checks.
pub fn denoiser_errors(prior: &PriorSpec, a: &DMatrix<f64>, b: &DVector<f64>) -> (f64, f64, f64) {
    const STEP: f64 = 1e-6;
    let r = b.len();
    let input = DenoiserInput::new(a.clone(), b.clone());
    let post = posterior(&input, prior).unwrap();
    let want = oracle(prior, a, b);

    let mut vs_oracle = rel_err(post.log_norm, want.log_norm);
    for i in 0..r {
        vs_oracle = vs_oracle.max(rel_err(post.mean[i], want.mean[i]));
        for j in 0..r {
            vs_oracle = vs_oracle.max(rel_err(post.cov[(i, j)], want.cov[(i, j)]));
        }
    }

    let mut grad_log_norm = 0.0f64;
    let mut jac_mean = 0.0f64;
    for j in 0..r {
        let mut up = b.clone();
        let mut down = b.clone();
        up[j] += STEP;
        down[j] -= STEP;
        let pu = posterior(&DenoiserInput::new(a.clone(), up), prior).unwrap();
        let pd = posterior(&DenoiserInput::new(a.clone(), down), prior).unwrap();
        let d_log = (pu.log_norm - pd.log_norm) / (2.0 * STEP);
        grad_log_norm = grad_log_norm.max(rel_err(d_log, post.mean[j]));
        for i in 0..r {
            let d_mean = (pu.mean[i] - pd.mean[i]) / (2.0 * STEP);
            jac_mean = jac_mean.max(rel_err(d_mean, post.cov[(i, j)]));
        }
    }
    (vs_oracle, grad_log_norm, jac_mean)
}

/// Deterministic probe set for the denoiser: every family at rank one and
/// Gauss–Bernoulli at rank two with a full `A`.
pub fn denoiser_probes() -> Vec<(PriorSpec, DMatrix<f64>, DVector<f64>)> {
    let mut out = Vec::new();
    for &rho in &[0.05, 0.3, 0.9] {
        for &(a, b) in &[(0.0, 0.0), (0.4, -1.3), (2.5, 2.0), (5.0, -4.5)] {
            for prior in [
                PriorSpec::gauss_bernoulli(rho, 1).unwrap(),
                PriorSpec::bernoulli_spike(rho).unwrap(),
                PriorSpec::rademacher_bernoulli(rho).unwrap(),
            ] {
                out.push((prior, DMatrix::from_element(1, 1, a), DVector::from_element(1, b)));
            }
        }
        let prior = PriorSpec::gauss_bernoulli(rho, 2).unwrap();
        for (a, b) in [
            (vec![0.5, 0.2, 0.2, 1.0], vec![0.7, -1.1]),
            (vec![3.0, -0.8, -0.8, 0.3], vec![-2.0, 1.5]),
        ] {
            out.push((prior, DMatrix::from_row_slice(2, 2, &a), DVector::from_vec(b)));
        }
    }
    out
}

/// Fields `B_μ` of the next step, computed entry by entry from `Y`
/// (by rows, or by columns when `by_column`).
pub fn brute_force_fields(state: &AmpState, inst: &Instance, by_column: bool) -> Vec<f64> {
    let (n, r) = (state.n, state.r);
    let nf = n as f64;
    let delta = inst.delta;
    let mut v_sum = vec![0.0; r * r];
    for block in state.v.chunks(r * r) {
        for (s, x) in v_sum.iter_mut().zip(block) {
            *s += x;
        }
    }
    let mut out = vec![0.0; n * r];
    for mu in 0..n {
        for i in 0..r {
            let mut acc = 0.0;
            for nu in 0..n {
                let y = if by_column { inst.y.get(nu, mu) } else { inst.y.get(mu, nu) };
                acc += y * state.a[nu * r + i];
            }
            let mut onsager = 0.0;
            for j in 0..r {
                onsager += v_sum[i * r + j] * state.a_prev[mu * r + j];
            }
            out[mu * r + i] = acc / (delta * nf.sqrt()) - onsager / (nf * delta);
        }
    }
    out
}

/// Largest deviation between the library's fields and the brute-force sum over
/// `steps` iterations at `N = 50`.
pub fn onsager_brute_force_error(prior: &PriorSpec, delta: f64, seed: u64, steps: usize) -> f64 {
    let inst = Instance::generate(prior, 50, delta, seed).unwrap();
    let cfg = AmpConfig::default();
    let mut state = amp_init(&inst, prior, InitMode::Uninformative).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..steps {
        let rows = brute_force_fields(&state, &inst, false);
        let cols = brute_force_fields(&state, &inst, true);
        amp_step(&mut state, &inst, prior, &cfg).unwrap();
        for ((got, x), y) in state.b.iter().zip(&rows).zip(&cols) {
            worst = worst.max((got - x).abs()).max((x - y).abs());
        }
    }
    worst
}

/// Runs the joint recursion from `M = Q = q0 I` over independent replicate
/// seeds and returns the worst `|mean(M − Q)|` in units of its standard error
/// across replicates. Sampling errors propagate along a trajectory, so the
/// spread is measured on whole trajectories rather than taken from one step.
pub fn nishimori_z_score(
    prior: &PriorSpec,
    q0: f64,
    delta: f64,
    steps: usize,
    n_samples: usize,
    replicates: usize,
) -> f64 {
    let r = prior.rank();
    // diffs[t][k] holds replicate k's M − Q after step t.
    let mut diffs = vec![Vec::with_capacity(replicates); steps];
    for k in 0..replicates {
        let mut state = SeState::isotropic(q0, r, delta);
        state.scalar_q = None;
        for (t, slot) in diffs.iter_mut().enumerate() {
            let seed = 1000 * (k as u64 + 1) + t as u64;
            let step = se_step_general(&state, prior, n_samples, seed).unwrap();
            slot.push(&step.state.m_mat - &step.state.q_mat);
            state = step.state;
        }
    }
    let kf = replicates as f64;
    let mut worst = 0.0f64;
    for per_step in &diffs {
        for i in 0..r {
            for j in 0..r {
                let xs: Vec<f64> = per_step.iter().map(|d| d[(i, j)]).collect();
                let mean = xs.iter().sum::<f64>() / kf;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (kf - 1.0).max(1.0);
                let se = (var / kf).sqrt();
                let z = if se > 0.0 {
                    mean.abs() / se
                } else if mean.abs() < 1e-12 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst = worst.max(z);
            }
        }
    }
    worst
}

/// Compares the general Monte Carlo step with the scalar Gauss–Bernoulli map
/// on a 5x5 `(q, Δ)` grid; returns the worst deviation in standard errors.
pub fn scalar_vs_general_z_score(rho: f64, r: usize, n_samples: usize) -> f64 {
    let prior = PriorSpec::gauss_bernoulli(rho, r).unwrap();
    let mut worst = 0.0f64;
    for (k, &frac) in [0.05, 0.2, 0.4, 0.6, 0.9].iter().enumerate() {
        for (l, &dscale) in [0.03, 0.1, 0.3, 1.0, 3.0].iter().enumerate() {
            let q = frac * rho;
            let delta = dscale * rho * rho;
            let mut state = SeState::isotropic(q, r, delta);
            state.scalar_q = None;
            let seed = 77 + (5 * k + l) as u64;
            let step = se_step_general(&state, &prior, n_samples, seed).unwrap();
            let scalar = se_step_scalar_gb(q, delta, rho, r).unwrap();
            for i in 0..r {
                for j in 0..r {
                    let want = if i == j { scalar } else { 0.0 };
                    let diff = (step.state.q_mat[(i, j)] - want).abs();
                    worst = worst.max(diff / step.q_stderr[(i, j)]);
                }
            }
        }
    }
    worst
}
