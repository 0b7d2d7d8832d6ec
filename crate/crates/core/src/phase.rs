// SPDX-License-Identifier: Apache-2.0

//! Phase transitions of the state evolution.
//!
//! Four thresholds organize the phase diagram along a noise (or density) axis:
//!
//! * `Δ_u`: the trivial fixed point `q = 0` is linearly stable above it
//!   (zero-mean priors only);
//! * `Δ_AMP`: above it the uninformative trajectory no longer reaches the
//!   informative branch;
//! * `Δ_2nd`: above it the informative branch no longer exists;
//! * `Δ_c`: the two branches have equal Bethe log-likelihood.
//!
//! A first-order transition has `Δ_AMP ≤ Δ_c ≤ Δ_2nd`; a continuous one has
//! all three equal. Thresholds are found by bracketing on a log grid and then
//! bisecting on branch membership.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amp::InitMode;
use crate::error::{invalid, Error, Result};
use crate::model::{PriorFamily, PriorSpec};
use crate::parallel;
use crate::state_evolution::{
    mmse_select, overlap_map, se_fixed_point, se_trajectory, FixedPointReport, SeConfig,
    UNINFORMATIVE_EPSILON,
};

/// Overlaps above this belong to an informative branch.
pub const BRANCH_THRESHOLD: f64 = 1e-4;
/// Default bisection width.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Iterations used by [`measure_instability_onset`].
pub const ONSET_HORIZON: usize = 200;

const GRID_POINTS: usize = 64;

/// Largest squared eigenvalue of the prior covariance, or `None` when the
/// prior mean is nonzero (then `q = 0` is not a fixed point at all).
pub fn stability_threshold(prior: &PriorSpec) -> Option<f64> {
    if !prior.is_zero_mean() {
        return None;
    }
    let eig = prior.covariance().symmetric_eigenvalues();
    Some(eig.iter().map(|l| l * l).fold(0.0, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionOrder {
    Continuous,
    FirstOrder,
    None,
}

impl std::fmt::Display for TransitionOrder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TransitionOrder::Continuous => "continuous",
            TransitionOrder::FirstOrder => "first_order",
            TransitionOrder::None => "none",
        })
    }
}

/// The control parameter swept while the other is held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis {
    /// Sweep `Δ` for a fixed prior.
    Delta { prior: PriorSpec },
    /// Sweep `ρ` at fixed `Δ`.
    Rho {
        family: PriorFamily,
        rank: usize,
        delta: f64,
    },
}

impl Axis {
    /// Prior and noise at coordinate `x`.
    pub fn point(&self, x: f64) -> Result<(PriorSpec, f64)> {
        match *self {
            Axis::Delta { prior } => Ok((prior, x)),
            Axis::Rho {
                family,
                rank,
                delta,
            } => Ok((PriorSpec::new(family, x, rank)?, delta)),
        }
    }

    /// Whether increasing the coordinate weakens the signal.
    fn noise_like(&self) -> bool {
        matches!(self, Axis::Delta { .. })
    }

    fn zero_mean(&self) -> bool {
        match self {
            Axis::Delta { prior } => prior.is_zero_mean(),
            Axis::Rho { family, .. } => *family != PriorFamily::BernoulliSpike,
        }
    }

    /// Stability threshold expressed on this axis.
    pub fn stability(&self) -> Option<f64> {
        match *self {
            Axis::Delta { prior } => stability_threshold(&prior),
            // Both zero-mean families have covariance ρ I, so ρ_u = √Δ.
            Axis::Rho { family, delta, .. } => {
                (family != PriorFamily::BernoulliSpike).then(|| delta.sqrt())
            }
        }
    }

    /// Default search interval for [`find_transitions`].
    pub fn default_range(&self) -> (f64, f64) {
        match *self {
            Axis::Delta { prior } => {
                let s = prior.component_second_moment();
                (1e-3 * s * s, 10.0 * s)
            }
            Axis::Rho { .. } => (1e-3, 1.0),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Delta { .. } => "delta",
            Axis::Rho { .. } => "rho",
        }
    }

    pub fn family(&self) -> PriorFamily {
        match self {
            Axis::Delta { prior } => prior.family(),
            Axis::Rho { family, .. } => *family,
        }
    }

    pub fn rank(&self) -> usize {
        match self {
            Axis::Delta { prior } => prior.rank(),
            Axis::Rho { rank, .. } => *rank,
        }
    }

    /// The parameter held fixed (`ρ` on the `Δ` axis and vice versa).
    pub fn fixed_value(&self) -> f64 {
        match self {
            Axis::Delta { prior } => prior.rho(),
            Axis::Rho { delta, .. } => *delta,
        }
    }
}

/// Both fixed points at one coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchPair {
    pub uninformative: FixedPointReport,
    pub informative: FixedPointReport,
}

impl BranchPair {
    pub fn evaluate(axis: &Axis, x: f64, config: &SeConfig) -> Result<Self> {
        let (prior, delta) = axis.point(x)?;
        Ok(BranchPair {
            uninformative: se_fixed_point(&prior, delta, InitMode::Uninformative, config)?,
            informative: se_fixed_point(&prior, delta, InitMode::Informative, config)?,
        })
    }

    pub fn coincide(&self) -> bool {
        (self.informative.q_star - self.uninformative.q_star).abs() <= BRANCH_THRESHOLD
    }

    /// The uninformative start lands on the informative branch.
    fn amp_succeeds(&self, zero_mean: bool) -> bool {
        if zero_mean {
            self.uninformative.q_star > BRANCH_THRESHOLD
        } else {
            self.coincide()
        }
    }

    /// A separate informative branch exists.
    fn informative_exists(&self, zero_mean: bool) -> bool {
        if zero_mean {
            self.informative.q_star > BRANCH_THRESHOLD
        } else {
            !self.coincide()
        }
    }

    pub fn phi_gap(&self) -> f64 {
        self.informative.phi - self.uninformative.phi
    }
}

/// Thresholds along one axis. On the `ρ` axis the `delta_*` fields hold
/// densities (`ρ_u`, `ρ_AMP`, `ρ_c`, `ρ_2nd`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionSet {
    pub family: PriorFamily,
    pub axis: String,
    /// `ρ` on the `Δ` axis, `Δ` on the `ρ` axis.
    pub fixed: f64,
    pub r: usize,
    pub delta_u: Option<f64>,
    pub delta_amp: Option<f64>,
    pub delta_c: Option<f64>,
    pub delta_2nd: Option<f64>,
    pub order: TransitionOrder,
}

/// Bisection on a predicate that holds at `yes` and fails at `no`; returns the
/// midpoint of the final bracket.
fn bisect<F>(mut yes: f64, mut no: f64, tol: f64, mut pred: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<bool>,
{
    while (no - yes).abs() > tol {
        let mid = 0.5 * (yes + no);
        if pred(mid)? {
            yes = mid;
        } else {
            no = mid;
        }
    }
    Ok(0.5 * (yes + no))
}

/// Orders a bracket as `(strong, weak)`: the signal is stronger at the first end.
fn strong_weak(axis: &Axis, bracket: (f64, f64)) -> (f64, f64) {
    let (lo, hi) = (bracket.0.min(bracket.1), bracket.0.max(bracket.1));
    if axis.noise_like() {
        (lo, hi)
    } else {
        (hi, lo)
    }
}

fn check_bracket(lo: f64, hi: f64, ok: bool, reason: &str) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo == hi || !ok {
        return Err(Error::InvalidBracket {
            lo: lo.min(hi),
            hi: lo.max(hi),
            reason: reason.to_string(),
        });
    }
    Ok(())
}

/// AMP spinodal on `axis` inside `bracket`.
pub fn find_spinodal_amp_on(axis: &Axis, bracket: (f64, f64), tol: f64, config: &SeConfig) -> Result<f64> {
    let zm = axis.zero_mean();
    let (strong, weak) = strong_weak(axis, bracket);
    let pred = |x: f64| BranchPair::evaluate(axis, x, config).map(|b| b.amp_succeeds(zm));
    let ok = pred(strong)? && !pred(weak)?;
    check_bracket(strong, weak, ok, "uninformative branch must be informative at the strong end only")?;
    bisect(strong, weak, tol, pred)
}

/// Informative-branch spinodal on `axis` inside `bracket`.
pub fn find_spinodal_2nd_on(axis: &Axis, bracket: (f64, f64), tol: f64, config: &SeConfig) -> Result<f64> {
    let zm = axis.zero_mean();
    let (strong, weak) = strong_weak(axis, bracket);
    let pred = |x: f64| BranchPair::evaluate(axis, x, config).map(|b| b.informative_exists(zm));
    let ok = pred(strong)? && !pred(weak)?;
    check_bracket(strong, weak, ok, "informative branch must exist at the strong end only")?;
    bisect(strong, weak, tol, pred)
}

/// Equal-likelihood point on `axis` inside `bracket`; both branches must stay
/// distinct throughout.
pub fn find_delta_c_on(axis: &Axis, bracket: (f64, f64), tol: f64, config: &SeConfig) -> Result<f64> {
    let (strong, weak) = strong_weak(axis, bracket);
    let gap = |x: f64| -> Result<f64> {
        let b = BranchPair::evaluate(axis, x, config)?;
        if b.coincide() {
            return Err(Error::BranchesMerged { at: x });
        }
        Ok(b.phi_gap())
    };
    let ok = gap(strong)? > 0.0 && gap(weak)? <= 0.0;
    check_bracket(strong, weak, ok, "likelihood gap must change sign across the bracket")?;
    bisect(strong, weak, tol, |x| gap(x).map(|g| g > 0.0))
}

/// [`find_spinodal_amp_on`] along `Δ`.
pub fn find_spinodal_amp(prior: &PriorSpec, bracket: (f64, f64), tol: f64) -> Result<f64> {
    find_spinodal_amp_on(&Axis::Delta { prior: *prior }, bracket, tol, &SeConfig::default())
}

/// [`find_spinodal_2nd_on`] along `Δ`.
pub fn find_spinodal_2nd(prior: &PriorSpec, bracket: (f64, f64), tol: f64) -> Result<f64> {
    find_spinodal_2nd_on(&Axis::Delta { prior: *prior }, bracket, tol, &SeConfig::default())
}

/// [`find_delta_c_on`] along `Δ`.
pub fn find_delta_c(prior: &PriorSpec, bracket: (f64, f64), tol: f64) -> Result<f64> {
    find_delta_c_on(&Axis::Delta { prior: *prior }, bracket, tol, &SeConfig::default())
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    let mut grid: Vec<f64> = (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect();
    grid[0] = lo;
    grid[n - 1] = hi;
    grid
}

/// All thresholds along `axis`, bracketed automatically on a log grid over
/// `range` (default: [`Axis::default_range`]).
///
/// When the two spinodals are within `2 tol` of each other the transition is
/// reported as continuous and all three thresholds are set to their midpoint.
pub fn find_transitions(
    axis: &Axis,
    range: Option<(f64, f64)>,
    tol: f64,
    config: &SeConfig,
) -> Result<TransitionSet> {
    if !(tol > 0.0) {
        return Err(invalid(format!("tol must be positive, got {tol}")));
    }
    let (lo, hi) = range.unwrap_or_else(|| axis.default_range());
    if !(lo > 0.0 && hi > lo) {
        return Err(invalid(format!("range must satisfy 0 < lo < hi, got ({lo}, {hi})")));
    }
    let zm = axis.zero_mean();
    let mut grid = log_grid(lo, hi, GRID_POINTS);
    if !axis.noise_like() {
        grid.reverse();
    }
    // Grid runs from strong to weak signal.
    let pairs = parallel::map_slice(&grid, |&x| BranchPair::evaluate(axis, x, config));
    let pairs: Vec<BranchPair> = pairs.into_iter().collect::<Result<_>>()?;

    let mut set = TransitionSet {
        family: axis.family(),
        axis: axis.name().to_string(),
        fixed: axis.fixed_value(),
        r: axis.rank(),
        delta_u: axis.stability(),
        delta_amp: None,
        delta_c: None,
        delta_2nd: None,
        order: TransitionOrder::None,
    };

    // Last strong-side point where the predicate holds, with its weak neighbor.
    let edge = |pred: &dyn Fn(&BranchPair) -> bool| -> Option<(f64, f64)> {
        let last = pairs.iter().rposition(pred)?;
        (last + 1 < pairs.len()).then(|| (grid[last], grid[last + 1]))
    };
    // Relative resolution keeps bisection meaningful for thresholds far below `tol`.
    let tol_at = |x: f64| tol.min(1e-3 * x.abs());

    let (amp_bracket, second_bracket) = if zm {
        (
            edge(&|b: &BranchPair| b.amp_succeeds(true)),
            edge(&|b: &BranchPair| b.informative_exists(true)),
        )
    } else {
        let first = pairs.iter().position(|b| !b.coincide());
        match first {
            None => return Ok(set),
            Some(0) => {
                return Err(Error::InvalidBracket {
                    lo,
                    hi,
                    reason: "branches already distinct at the strong end of the range".into(),
                })
            }
            Some(k) => (
                Some((grid[k - 1], grid[k])),
                edge(&|b: &BranchPair| !b.coincide()),
            ),
        }
    };
    let (Some((a_yes, a_no)), Some((s_yes, s_no))) = (amp_bracket, second_bracket) else {
        return Ok(set);
    };
    let amp_tol = tol_at(a_yes);
    let second_tol = tol_at(s_yes);
    let amp = bisect(a_yes, a_no, amp_tol, |x| {
        BranchPair::evaluate(axis, x, config).map(|b| b.amp_succeeds(zm))
    })?;
    let second = bisect(s_yes, s_no, second_tol, |x| {
        BranchPair::evaluate(axis, x, config).map(|b| b.informative_exists(zm))
    })?;

    if (second - amp).abs() <= 2.0 * amp_tol.max(second_tol) {
        let mut mid = 0.5 * (amp + second);
        if zm {
            // The branch threshold biases both spinodals by O(threshold) when
            // q* vanishes continuously; locate the loss of stability directly.
            let bracket = (mid * 0.99, mid * 1.01);
            if let Ok(x) = instability_onset_on(axis, bracket, tol_at(mid)) {
                mid = x;
            }
        }
        set.delta_amp = Some(mid);
        set.delta_c = Some(mid);
        set.delta_2nd = Some(mid);
        set.order = TransitionOrder::Continuous;
        return Ok(set);
    }

    // Likelihood crossing strictly inside the coexistence window.
    let c_tol = tol_at(amp.min(second));
    let step = c_tol.min(0.25 * (second - amp).abs());
    let dir = (second - amp).signum();
    let inner_strong = amp + dir * step;
    let inner_weak = second - dir * step;
    let gap = |x: f64| BranchPair::evaluate(axis, x, config).map(|b| b.phi_gap());
    let g_strong = gap(inner_strong)?;
    let g_weak = gap(inner_weak)?;
    let c = if g_strong > 0.0 && g_weak <= 0.0 {
        bisect(inner_strong, inner_weak, c_tol, |x| gap(x).map(|g| g > 0.0))?
    } else if g_strong <= 0.0 {
        amp
    } else {
        second
    };
    set.delta_amp = Some(amp);
    set.delta_c = Some(c);
    set.delta_2nd = Some(second);
    set.order = TransitionOrder::FirstOrder;
    Ok(set)
}

/// Bisection on whether the uninformative trajectory grows over
/// [`ONSET_HORIZON`] iterations; growth on the strong side, decay on the weak.
pub fn measure_instability_onset(prior: &PriorSpec, bracket: (f64, f64), tol: f64) -> Result<f64> {
    instability_onset_on(&Axis::Delta { prior: *prior }, bracket, tol)
}

/// [`measure_instability_onset`] along any axis.
pub fn instability_onset_on(axis: &Axis, bracket: (f64, f64), tol: f64) -> Result<f64> {
    if !axis.zero_mean() {
        return Err(invalid("instability onset is defined for zero-mean priors"));
    }
    let grows = |x: f64| -> Result<bool> {
        let (prior, delta) = axis.point(x)?;
        let traj = se_trajectory(&prior, delta, UNINFORMATIVE_EPSILON, ONSET_HORIZON)?;
        Ok(traj[ONSET_HORIZON] > traj[0])
    };
    let (strong, weak) = strong_weak(axis, bracket);
    let ok = grows(strong)? && !grows(weak)?;
    check_bracket(strong, weak, ok, "trajectory must grow at the strong end and decay at the weak end")?;
    bisect(strong, weak, tol, grows)
}

/// `K(a, τ) = −τ/(1 + a) + ln(1 + a)`; the support estimator approaches one
/// exponentially in `r` wherever it is negative.
pub fn k_function(a: f64, tau: f64) -> f64 {
    -tau / (1.0 + a) + a.ln_1p()
}

/// Large-rank predictions `q = max(ρ − Δ, 0)` and
/// `φ(q) = −(ρ r/2)[ln(1 + q/Δ) − q/Δ + q²/(2ρΔ)]`, dropping `O(1)` terms.
pub fn large_r_prediction(rho: f64, delta: f64, r: usize) -> (f64, f64) {
    let q = (rho - delta).max(0.0);
    let x = q / delta;
    let phi = -0.5 * rho * r as f64 * (x.ln_1p() - x + q * q / (2.0 * rho * delta));
    (q, phi)
}

/// Exponent `d ln Δ / d ln γ` of the fixed-point curve `Δ(γ) = h(γ)/γ`.
fn curve_slope(prior: &PriorSpec, gamma: f64) -> Result<f64> {
    const STEP: f64 = 1e-4;
    let up = overlap_map(prior, gamma * STEP.exp())?;
    let down = overlap_map(prior, gamma * (-STEP).exp())?;
    Ok((up.ln() - down.ln()) / (2.0 * STEP) - 1.0)
}

/// Fixed points as a curve: each `γ = q/Δ` is a fixed point at
/// `Δ(γ) = h(γ)/γ` with `q = h(γ)`, `h` the scalar-channel overlap.
pub fn fixed_point_curve(prior: &PriorSpec, gammas: &[f64]) -> Result<Vec<(f64, f64, f64)>> {
    parallel::map_slice(gammas, |&g| {
        let h = overlap_map(prior, g)?;
        Ok((g, h / g, h))
    })
    .into_iter()
    .collect()
}

/// Largest `d ln Δ / d ln γ` along the fixed-point curve and where it occurs.
/// A positive value means `Δ(γ)` is non-monotone: several fixed points
/// coexist over a window of `Δ`, which is the signature of a first-order
/// transition.
pub fn max_curve_slope(prior: &PriorSpec) -> Result<(f64, f64)> {
    let grid = log_grid(1e-3, 1e6, 241);
    let slopes = parallel::map_slice(&grid, |&g| curve_slope(prior, g));
    let slopes: Vec<f64> = slopes.into_iter().collect::<Result<_>>()?;
    let (k, _) = slopes
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &s)| if s > best.1 { (i, s) } else { best });
    let lo = grid[k.saturating_sub(1)].ln();
    let hi = grid[(k + 1).min(grid.len() - 1)].ln();
    // Golden-section refinement in ln γ.
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (lo, hi);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = curve_slope(prior, c.exp())?;
    let mut fd = curve_slope(prior, d.exp())?;
    for _ in 0..40 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = curve_slope(prior, c.exp())?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = curve_slope(prior, d.exp())?;
        }
    }
    let (g, s) = if fc > fd { (c, fc) } else { (d, fd) };
    let best = slopes[k];
    Ok(if s >= best { (g.exp(), s) } else { (grid[k], best) })
}

/// Whether the fixed-point curve is non-monotone.
pub fn has_first_order(prior: &PriorSpec) -> Result<bool> {
    Ok(max_curve_slope(prior)?.1 > 0.0)
}

/// Density separating first-order (below) from continuous (above) behavior,
/// by bisection on [`has_first_order`] inside `bracket`.
pub fn find_tricritical_density(
    family: PriorFamily,
    rank: usize,
    bracket: (f64, f64),
    tol: f64,
) -> Result<f64> {
    let first_order = |rho: f64| has_first_order(&PriorSpec::new(family, rho, rank)?);
    let (lo, hi) = (bracket.0.min(bracket.1), bracket.0.max(bracket.1));
    let ok = first_order(lo)? && !first_order(hi)?;
    check_bracket(lo, hi, ok, "first-order structure must hold at the low density only")?;
    bisect(lo, hi, tol, first_order)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseLabel {
    /// The likelihood-maximizing fixed point is trivial.
    Undetectable,
    /// The uninformative start reaches the likelihood-maximizing fixed point.
    AmpOptimal,
    /// A better fixed point exists that the uninformative start cannot reach.
    Hard,
    /// One fixed point only (nonzero-mean priors).
    SinglePhase,
    /// The point could not be evaluated.
    Failed,
}

/// Label of one grid point.
pub fn classify(pair: &BranchPair, zero_mean: bool) -> Result<PhaseLabel> {
    let best = mmse_select(&[pair.uninformative.clone(), pair.informative.clone()])?;
    if zero_mean && best.q_star <= BRANCH_THRESHOLD {
        return Ok(PhaseLabel::Undetectable);
    }
    if (pair.uninformative.q_star - best.q_star).abs() <= BRANCH_THRESHOLD {
        if !zero_mean && pair.coincide() {
            return Ok(PhaseLabel::SinglePhase);
        }
        return Ok(PhaseLabel::AmpOptimal);
    }
    Ok(PhaseLabel::Hard)
}

/// One row of a phase-diagram scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub family: String,
    pub rho: f64,
    pub delta: f64,
    pub r: usize,
    pub q_uninf: f64,
    pub q_inf: f64,
    pub mse_uninf: f64,
    pub mse_inf: f64,
    pub phi_uninf: f64,
    pub phi_inf: f64,
    pub phase_label: PhaseLabel,
    pub iters_uninf: usize,
    pub iters_inf: usize,
    pub converged: bool,
}

impl PhasePoint {
    fn key(&self) -> (String, u64, u64, usize) {
        (self.family.clone(), self.rho.to_bits(), self.delta.to_bits(), self.r)
    }
}

/// Evaluates one `(ρ, Δ)` point; evaluation errors become a `failed` row.
pub fn phase_point(family: PriorFamily, rho: f64, delta: f64, r: usize, config: &SeConfig) -> PhasePoint {
    let failed = || PhasePoint {
        family: family.short_name().to_string(),
        rho,
        delta,
        r,
        q_uninf: f64::NAN,
        q_inf: f64::NAN,
        mse_uninf: f64::NAN,
        mse_inf: f64::NAN,
        phi_uninf: f64::NAN,
        phi_inf: f64::NAN,
        phase_label: PhaseLabel::Failed,
        iters_uninf: 0,
        iters_inf: 0,
        converged: false,
    };
    let Ok(prior) = PriorSpec::new(family, rho, r) else {
        return failed();
    };
    let axis = Axis::Delta { prior };
    let Ok(pair) = BranchPair::evaluate(&axis, delta, config) else {
        return failed();
    };
    let Ok(label) = classify(&pair, prior.is_zero_mean()) else {
        return failed();
    };
    let (u, i) = (&pair.uninformative, &pair.informative);
    PhasePoint {
        family: family.short_name().to_string(),
        rho,
        delta,
        r,
        q_uninf: u.q_star,
        q_inf: i.q_star,
        mse_uninf: u.mse,
        mse_inf: i.mse,
        phi_uninf: u.phi,
        phi_inf: i.phi,
        phase_label: label,
        iters_uninf: u.iterations,
        iters_inf: i.iterations,
        converged: u.converged && i.converged,
    }
}

fn check_grid(name: &str, grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(format!("{name} grid is empty")));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid(format!("{name} grid must be strictly increasing")));
    }
    Ok(())
}

/// Evaluates every `(ρ, Δ)` pair; rows come back in `ρ`-major order.
pub fn scan_phase_diagram(
    family: PriorFamily,
    rho_grid: &[f64],
    delta_grid: &[f64],
    r: usize,
    config: &SeConfig,
) -> Result<Vec<PhasePoint>> {
    check_grid("rho", rho_grid)?;
    check_grid("delta", delta_grid)?;
    let points: Vec<(f64, f64)> = rho_grid
        .iter()
        .flat_map(|&rho| delta_grid.iter().map(move |&d| (rho, d)))
        .collect();
    Ok(parallel::map_slice(&points, |&(rho, d)| phase_point(family, rho, d, r, config)))
}

/// Appends scan rows to a CSV file, skipping points already present. Work is
/// committed one `ρ` row at a time so an interrupted scan loses at most one row.
/// `progress` is called with (rows done, rows total) after each commit.
pub fn scan_to_csv<P, F>(
    path: P,
    family: PriorFamily,
    rho_grid: &[f64],
    delta_grid: &[f64],
    r: usize,
    config: &SeConfig,
    mut progress: F,
) -> Result<Vec<PhasePoint>>
where
    P: AsRef<Path>,
    F: FnMut(usize, usize),
{
    check_grid("rho", rho_grid)?;
    check_grid("delta", delta_grid)?;
    let path = path.as_ref();
    let mut existing: Vec<PhasePoint> = Vec::new();
    if path.exists() && std::fs::metadata(path)?.len() > 0 {
        let mut rd = csv::Reader::from_path(path)?;
        for row in rd.deserialize() {
            existing.push(row?);
        }
    }
    let done: HashSet<_> = existing.iter().map(PhasePoint::key).collect();
    let needs_header = existing.is_empty() && !(path.exists() && std::fs::metadata(path)?.len() > 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut wr = csv::WriterBuilder::new().has_headers(needs_header).from_writer(file);

    let mut all = existing;
    for (k, &rho) in rho_grid.iter().enumerate() {
        let todo: Vec<f64> = delta_grid
            .iter()
            .copied()
            .filter(|&d| {
                !done.contains(&(family.short_name().to_string(), rho.to_bits(), d.to_bits(), r))
            })
            .collect();
        let rows = parallel::map_slice(&todo, |&d| phase_point(family, rho, d, r, config));
        for row in &rows {
            wr.serialize(row)?;
        }
        wr.flush()?;
        all.extend(rows);
        progress(k + 1, rho_grid.len());
    }
    Ok(all)
}
