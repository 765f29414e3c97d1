//! Adaptive Gauss–Kronrod quadrature with endpoint substitutions.
//!
//! Every integral that appears in Wicksell's problem carries square-root
//! endpoint singularities (`1/sqrt(x - z)` kernels, `sqrt` kinks of the
//! observation density). The helpers here map each sub-interval through a
//! smoothstep `x = a + (b - a) u^2 (3 - 2u)`, which turns `(x - a)^{±1/2}`
//! behaviour into a smooth integrand in `u`, and then run a globally adaptive
//! G10/K21 rule.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

const XGK: [f64; 11] = [
    0.995_657_163_025_808_080_735_527_280_689_003,
    0.973_906_528_517_171_720_077_964_012_084_452,
    0.930_157_491_355_708_226_001_207_180_059_508,
    0.865_063_366_688_984_510_732_096_688_423_493,
    0.780_817_726_586_416_897_063_717_578_345_042,
    0.679_409_568_299_024_406_234_327_365_114_874,
    0.562_757_134_668_604_683_339_000_099_272_694,
    0.433_395_394_129_247_190_799_265_943_165_784,
    0.294_392_862_701_460_198_131_126_603_103_866,
    0.148_874_338_981_631_210_884_826_001_129_720,
    0.0,
];

const WG: [f64; 5] = [
    0.066_671_344_308_688_137_593_568_809_893_332,
    0.149_451_349_150_580_593_145_776_339_657_697,
    0.219_086_362_515_982_043_995_534_934_228_163,
    0.269_266_719_309_996_355_091_226_921_569_469,
    0.295_524_224_714_752_870_173_892_994_651_338,
];

const WGK: [f64; 11] = [
    0.011_694_638_867_371_874_278_064_396_062_192,
    0.032_558_162_307_964_727_478_818_972_459_390,
    0.054_755_896_574_351_996_031_381_300_244_580,
    0.075_039_674_810_919_952_767_043_140_916_190,
    0.093_125_454_583_697_605_535_065_465_083_366,
    0.109_387_158_802_297_641_899_210_590_325_805,
    0.123_491_976_262_065_851_077_958_109_831_074,
    0.134_709_217_311_473_325_928_054_001_771_707,
    0.142_775_938_577_060_080_797_094_273_138_717,
    0.147_739_104_901_338_491_374_841_515_972_068,
    0.149_445_554_002_916_905_664_936_468_389_821,
];

/// One 21-point Kronrod panel: returns (estimate, error estimate).
pub fn gk21<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut kronrod = fc * WGK[10];
    let mut gauss = 0.0;
    for j in 0..10 {
        let dx = half * XGK[j];
        let pair = f(center - dx) + f(center + dx);
        kronrod += WGK[j] * pair;
        if j % 2 == 1 {
            gauss += WG[j / 2] * pair;
        }
    }
    let value = kronrod * half;
    let err = ((kronrod - gauss) * half).abs();
    (value, err)
}

#[derive(Debug, Clone, Copy)]
struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
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
        self.error.partial_cmp(&other.error).unwrap_or(Ordering::Equal)
    }
}

/// Tolerances for the adaptive integrator.
#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub max_panels: usize,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { rel: 1e-10, abs: 1e-15, max_panels: 4000 }
    }
}

impl Tolerance {
    pub fn rel(rel: f64) -> Self {
        Tolerance { rel, ..Default::default() }
    }
}

/// Globally adaptive integration of `f` over the finite interval `[a, b]`.
pub fn adaptive<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64, tol: Tolerance) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let (value, error) = gk21(f, a, b);
    if !value.is_finite() {
        return Err(Error::Quadrature { a, b, error: f64::INFINITY });
    }
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total = value;
    let mut total_err = error;
    while total_err > tol.abs.max(tol.rel * total.abs()) {
        if heap.len() >= tol.max_panels {
            // Accept if the remaining error is at round-off level.
            if total_err <= 1e3 * f64::EPSILON * total.abs().max(tol.abs) {
                break;
            }
            return Err(Error::Quadrature { a, b, error: total_err });
        }
        let worst = heap.pop().expect("heap never empties");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval can no longer be split in floating point.
            heap.push(Panel { error: 0.0, ..worst });
            total_err -= worst.error;
            continue;
        }
        let (v1, e1) = gk21(f, worst.a, mid);
        let (v2, e2) = gk21(f, mid, worst.b);
        if !(v1.is_finite() && v2.is_finite()) {
            return Err(Error::Quadrature { a: worst.a, b: worst.b, error: f64::INFINITY });
        }
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
        if heap.len() % 64 == 0 {
            // Refresh the running sums to keep cancellation from accumulating.
            total = heap.iter().map(|p| p.value).sum();
            total_err = heap.iter().map(|p| p.error).sum();
        }
    }
    Ok(heap.iter().map(|p| p.value).sum())
}

/// Integrates over `[a, b]` after the smoothstep substitution, which removes
/// square-root type singularities (and kinks) sitting at either endpoint.
pub fn smooth_ends<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, b: f64, tol: Tolerance) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let w = b - a;
    let g = |u: f64| {
        let s = u * u * (3.0 - 2.0 * u);
        let ds = 6.0 * u * (1.0 - u);
        let x = a + w * s;
        // nodes that round onto an endpoint would hit the singularity itself
        if ds == 0.0 || x == a || x == b {
            return 0.0;
        }
        f(x) * w * ds
    };
    adaptive(&g, 0.0, 1.0, tol)
}

/// Integrates across consecutive breakpoints, each piece with [`smooth_ends`].
/// Breakpoints are sorted and deduplicated first.
pub fn with_breaks<F: Fn(f64) -> f64 + ?Sized>(f: &F, points: &[f64], tol: Tolerance) -> Result<f64> {
    let mut pts: Vec<f64> = points.iter().copied().filter(|p| p.is_finite()).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let mut total = 0.0;
    for w in pts.windows(2) {
        total += smooth_ends(f, w[0], w[1], tol)?;
    }
    Ok(total)
}

/// Integrates over `[a, ∞)` with `x = a + (u / (1 - u))^2`, which also
/// removes a square-root singularity at `a`.
pub fn to_infinity<F: Fn(f64) -> f64 + ?Sized>(f: &F, a: f64, tol: Tolerance) -> Result<f64> {
    let g = |u: f64| {
        if u >= 1.0 {
            return 0.0;
        }
        let r = u / (1.0 - u);
        let dx = 2.0 * u / (1.0 - u).powi(3);
        let v = f(a + r * r);
        if dx == 0.0 || v == 0.0 {
            0.0
        } else {
            v * dx
        }
    };
    adaptive(&g, 0.0, 1.0, tol)
}
