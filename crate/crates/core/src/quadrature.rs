// SPDX-License-Identifier: Apache-2.0

//! One-dimensional integration rules used by the state-evolution code.
//!
//! * [`gauss_kronrod`]: globally adaptive 7/15-point Gauss–Kronrod on a finite
//!   interval (the QUADPACK `qag` strategy: always split the panel with the
//!   largest error estimate).
//! * [`gaussian_expectation`]: E[g(z)] for z ~ N(0, 1) with a fixed
//!   Gauss–Hermite rule.
//! * [`gaussian_expectation_adaptive`]: the same expectation by adaptive
//!   Gauss–Kronrod on a truncated line, for integrands too sharp for a fixed rule.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::num::NonZeroUsize;
use std::sync::OnceLock;

use gauss_quad::GaussHermite;

/// Number of Gauss–Hermite nodes used for rank-one expectations.
pub const HERMITE_NODES: usize = 61;

// Published QUADPACK digits, kept verbatim.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// 7-point Gauss weights at XGK[1], XGK[3], XGK[5], XGK[7].
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error) == Ordering::Equal
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod_panel<F: FnMut(f64) -> f64>(f: &mut F, lo: f64, hi: f64) -> Panel {
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let fc = f(center);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (j, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let pair = f(center - dx) + f(center + dx);
        kronrod += wk * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    Panel {
        lo,
        hi,
        value: kronrod * half,
        error: ((kronrod - gauss) * half).abs(),
    }
}

/// Adaptive Gauss–Kronrod integration of `f` over `[lo, hi]`.
///
/// The interval is first cut into `initial_panels` equal pieces, then the
/// panel with the largest error estimate is bisected until the summed error
/// drops below `max(abs_tol, rel_tol * |value|)` or 4000 panels are in use.
pub fn gauss_kronrod<F>(
    mut f: F,
    lo: f64,
    hi: f64,
    abs_tol: f64,
    rel_tol: f64,
    initial_panels: usize,
) -> Integral
where
    F: FnMut(f64) -> f64,
{
    const MAX_PANELS: usize = 4000;
    if hi == lo {
        return Integral {
            value: 0.0,
            error: 0.0,
            evaluations: 0,
        };
    }
    let pieces = initial_panels.max(1);
    let width = (hi - lo) / pieces as f64;
    let mut heap = BinaryHeap::with_capacity(2 * pieces + 64);
    for k in 0..pieces {
        let a = lo + width * k as f64;
        let b = if k + 1 == pieces { hi } else { a + width };
        heap.push(kronrod_panel(&mut f, a, b));
    }
    let mut evaluations = 15 * pieces;
    loop {
        let (value, error) = heap
            .iter()
            .fold((0.0, 0.0), |(v, e), p| (v + p.value, e + p.error));
        let target = abs_tol.max(rel_tol * value.abs());
        if error <= target || heap.len() >= MAX_PANELS {
            return Integral {
                value,
                error,
                evaluations,
            };
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.lo + worst.hi);
        if mid <= worst.lo || mid >= worst.hi {
            // Panel cannot be split further in double precision.
            heap.push(Panel { error: 0.0, ..worst });
            continue;
        }
        heap.push(kronrod_panel(&mut f, worst.lo, mid));
        heap.push(kronrod_panel(&mut f, mid, worst.hi));
        evaluations += 30;
    }
}

fn hermite_rule() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| {
        let n = NonZeroUsize::new(HERMITE_NODES).expect("nonzero");
        let rule = GaussHermite::new(n);
        let norm = std::f64::consts::PI.sqrt();
        rule.iter()
            .map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / norm))
            .collect()
    })
}

/// Standard-normal nodes and probability weights of the Gauss–Hermite rule.
pub fn hermite_nodes() -> &'static [(f64, f64)] {
    hermite_rule()
}

/// E[g(z)] for z ~ N(0, 1) with the 61-node Gauss–Hermite rule.
pub fn gaussian_expectation<F: FnMut(f64) -> f64>(mut g: F) -> f64 {
    hermite_rule().iter().map(|&(z, w)| w * g(z)).sum()
}

/// E[g(z)] for z ~ N(0, 1) by adaptive Gauss–Kronrod on `[-12, 12]`.
pub fn gaussian_expectation_adaptive<F: FnMut(f64) -> f64>(mut g: F, abs_tol: f64) -> f64 {
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    gauss_kronrod(
        |z| norm * (-0.5 * z * z).exp() * g(z),
        -12.0,
        12.0,
        abs_tol,
        1e-12,
        8,
    )
    .value
}

/// Numerically stable `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function `1 / (1 + e^{-x})`.
pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(e^a + e^b)` tolerating `-inf` arguments.
pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}
