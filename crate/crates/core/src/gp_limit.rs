//! The Gaussian-process limit of `√n (U_n - U)` and the limit law `L_x` of the
//! isotonic estimator where `F` is flat around `x`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::isotonic::ConcaveMajorant;
use crate::models::ObservationModel;
use crate::quadrature::{self, Tolerance};
use crate::rng::RngStream;

fn tol() -> Tolerance {
    Tolerance { rel: 1e-11, abs: 1e-15, max_panels: 4000 }
}

#[inline]
fn phi(z: f64, t: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else if z <= t {
        z.sqrt()
    } else {
        t / (z.sqrt() + (z - t).sqrt())
    }
}

/// Breakpoints for integrating against `g`: model kinks, support, and extras.
fn breaks(obs: &ObservationModel, extra: &[f64]) -> Vec<f64> {
    let upper = obs.model().effective_upper();
    let (lo, hi) = obs.model().support();
    let mut pts = vec![0.0, upper, lo, hi];
    if let crate::models::CdfKind::Flat { pieces } = obs.model().kind() {
        for p in pieces {
            pts.extend([p.a, p.b]);
        }
    }
    if let crate::models::CdfKind::Holder { x0, .. } = obs.model().kind() {
        pts.push(*x0);
    }
    pts.extend_from_slice(extra);
    pts.retain(|p| p.is_finite() && *p >= 0.0 && *p <= upper);
    pts
}

/// `E_g[h(Z)]` by quadrature with the given extra breakpoints.
pub fn expect_g<F: Fn(f64) -> f64>(obs: &ObservationModel, h: F, extra: &[f64]) -> Result<f64> {
    if obs.model().is_atomic() {
        return Err(Error::Domain("kernel quadrature needs a continuous model".into()));
    }
    // a failed density evaluation surfaces as a non-finite quadrature error
    let f = |z: f64| obs.g(z).map(|g| h(z) * g).unwrap_or(f64::NAN);
    quadrature::with_breaks(&f, &breaks(obs, extra), tol())
}

/// `Cov(φ_s(Z), φ_t(Z))` with `φ_t(z) = √z - √((z - t)₊)`, using `E φ_t = U(t) / 2`.
pub fn base_kernel(obs: &ObservationModel, s: f64, t: f64) -> Result<f64> {
    if !(s >= 0.0 && t >= 0.0) {
        return Err(Error::Domain(format!("kernel arguments must be nonnegative, got ({s}, {t})")));
    }
    if s == 0.0 || t == 0.0 {
        return Ok(0.0);
    }
    let (s, t) = if s <= t { (s, t) } else { (t, s) };
    let second = expect_g(obs, |z| phi(z, s) * phi(z, t), &[s, t])?;
    Ok(second - obs.u_exact(s)? * obs.u_exact(t)? / 4.0)
}

/// Variance factor of `√n (U_n - U)`: `U_n` averages `2 φ_t(Z_i)`.
pub const PROCESS_SCALE: f64 = 4.0;

/// Grid, anchor, flat interval and factorized covariance of the anchored process.
#[derive(Debug, Clone)]
pub struct GpSpec {
    obs: ObservationModel,
    x: f64,
    k_lo: f64,
    k_hi: f64,
    grid: Vec<f64>,
    anchor: usize,
    cov: DMatrix<f64>,
    /// Lower factor of the covariance with the anchor row and column removed.
    factor: DMatrix<f64>,
    jitter: f64,
}

impl GpSpec {
    /// Default grid: 241 equispaced points on `[x_lo - 0.25, x_hi + 0.25] ∩ [0, ∞)`.
    pub fn new(obs: ObservationModel, x: f64) -> Result<Self> {
        let (k_lo, k_hi) = obs
            .model()
            .flat_interval(x)
            .ok_or_else(|| Error::Domain(format!("{} is not flat around x = {x}", obs.model())))?;
        let k_hi = if k_hi.is_finite() { k_hi } else { x + (x - k_lo).max(0.5) };
        let lo = (k_lo - 0.25).max(0.0);
        let hi = k_hi + 0.25;
        let grid = equispaced_with(lo, hi, 241, x);
        GpSpec::with_grid(obs, x, (k_lo, k_hi), grid)
    }

    /// Explicit grid; the anchor is snapped to the nearest grid point.
    pub fn with_grid(obs: ObservationModel, x: f64, flat: (f64, f64), grid: Vec<f64>) -> Result<Self> {
        let (k_lo, k_hi) = flat;
        if !(k_lo <= x && x <= k_hi) {
            return Err(Error::Domain(format!("anchor {x} outside [{k_lo}, {k_hi}]")));
        }
        if grid.len() < 2 || grid.windows(2).any(|w| !(w[1] > w[0])) || grid[0] < 0.0 {
            return Err(Error::Domain("grid must be strictly increasing and nonnegative".into()));
        }
        let anchor = nearest(&grid, x);
        let x = grid[anchor];
        if !(grid[0] < x && x < *grid.last().unwrap()) {
            return Err(Error::Domain("anchor must be an interior grid point".into()));
        }
        let m = grid.len();
        let mut base = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let k = base_kernel(&obs, grid[i], grid[j])?;
                base[(i, j)] = k;
                base[(j, i)] = k;
            }
        }
        let a = anchor;
        let mut cov = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                cov[(i, j)] = PROCESS_SCALE * (base[(i, j)] - base[(i, a)] - base[(a, j)] + base[(a, a)]);
            }
        }
        for i in 0..m {
            cov[(i, a)] = 0.0;
            cov[(a, i)] = 0.0;
        }
        let reduced = cov.clone().remove_row(a).remove_column(a);
        let (factor, jitter) = factorize(&reduced)?;
        Ok(GpSpec { obs, x, k_lo, k_hi, grid, anchor, cov, factor, jitter })
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn flat_interval(&self) -> (f64, f64) {
        (self.k_lo, self.k_hi)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn obs(&self) -> &ObservationModel {
        &self.obs
    }

    /// `4 (K(s,t) - K(s,x) - K(x,t) + K(x,x))`.
    pub fn anchored_kernel(&self, s: f64, t: f64) -> Result<f64> {
        let x = self.x;
        let k = |a: f64, b: f64| base_kernel(&self.obs, a, b);
        Ok(PROCESS_SCALE * (k(s, t)? - k(s, x)? - k(x, t)? + k(x, x)?))
    }

    /// One path on the grid, exactly 0 at the anchor.
    pub fn path(&self, stream: RngStream) -> Vec<f64> {
        let mut rng = stream.rng();
        let m = self.factor.nrows();
        let xi = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut rng)));
        let y = &self.factor * xi;
        let mut out = Vec::with_capacity(m + 1);
        out.extend_from_slice(&y.as_slice()[..self.anchor]);
        out.push(0.0);
        out.extend_from_slice(&y.as_slice()[self.anchor..]);
        out
    }

    /// Indices of grid points inside the flat interval.
    fn flat_range(&self) -> std::ops::Range<usize> {
        let eps = 1e-12 * (1.0 + self.k_hi.abs());
        let lo = self.grid.partition_point(|&s| s < self.k_lo - eps);
        let hi = self.grid.partition_point(|&s| s <= self.k_hi + eps);
        lo..hi
    }

    /// Right derivative at `x` of the LCM of a path restricted to `K_x`.
    pub fn l_x_of_path(&self, path: &[f64]) -> Result<f64> {
        let r = self.flat_range();
        let maj = ConcaveMajorant::from_points(&self.grid[r.clone()], &path[r])?;
        Ok(maj.v_hat(self.x))
    }

    /// Switch-relation route: `L_x ≤ a` iff the smallest maximizer of
    /// `path(s) - a s` over `K_x` is at most `x`.
    pub fn l_x_at_most(&self, path: &[f64], a: f64) -> bool {
        let r = self.flat_range();
        let mut best = f64::NEG_INFINITY;
        let mut arg = f64::NAN;
        for i in r {
            let v = path[i] - a * self.grid[i];
            if v > best {
                best = v;
                arg = self.grid[i];
            }
        }
        arg <= self.x
    }
}

fn equispaced_with(lo: f64, hi: f64, m: usize, x: f64) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect();
    let k = nearest(&grid, x);
    grid[k] = x;
    grid
}

fn nearest(grid: &[f64], x: f64) -> usize {
    let mut best = 0;
    for (i, &g) in grid.iter().enumerate() {
        if (g - x).abs() < (grid[best] - x).abs() {
            best = i;
        }
    }
    best
}

/// Cholesky with the jitter policy: `1e-10 · trace / m`, grown ×10 up to
/// three times. Fails if the matrix is clearly indefinite.
pub fn factorize(cov: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let m = cov.nrows();
    if m == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let trace = cov.trace();
    if trace == 0.0 && cov.iter().all(|&v| v == 0.0) {
        return Ok((DMatrix::zeros(m, m), 0.0));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    if min_eig < -1e-8 * trace / m as f64 {
        return Err(Error::Factorization(format!(
            "covariance is indefinite (minimum eigenvalue {min_eig:e})"
        )));
    }
    let mut jitter = 0.0;
    for attempt in 0..=3 {
        let mut a = sym.clone();
        for i in 0..m {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = nalgebra::linalg::Cholesky::new(a) {
            return Ok((ch.l(), jitter));
        }
        jitter = 1e-10 * trace / m as f64 * 10f64.powi(attempt);
    }
    Err(Error::Factorization("Cholesky failed after maximum jitter".into()))
}

/// Paths, one per row, each from its own substream of `seed`.
pub fn sample_paths(spec: &GpSpec, n_paths: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..n_paths)
        .into_par_iter()
        .map(|p| spec.path(RngStream::new(seed, p as u64)))
        .collect()
}

/// Draws of the limit variable `L_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LxSample {
    pub values: Vec<f64>,
    pub n_paths: usize,
    pub seed: u64,
}

pub fn l_x_distribution(spec: &GpSpec, n_paths: usize, seed: u64) -> Result<LxSample> {
    let values = (0..n_paths)
        .into_par_iter()
        .map(|p| spec.l_x_of_path(&spec.path(RngStream::new(seed, p as u64))))
        .collect::<Result<Vec<f64>>>()?;
    Ok(LxSample { values, n_paths, seed })
}

/// Normal fit and Kolmogorov–Smirnov distance to it.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct NormalFit {
    pub mean: f64,
    pub sd: f64,
    pub ks: f64,
    pub p_value: f64,
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Asymptotic Kolmogorov p-value `2 Σ (-1)^{k-1} exp(-2 k² λ²)`, 100 terms.
pub fn kolmogorov_p(lambda: f64) -> f64 {
    // The alternating series is useless for tiny λ, where the p-value is 1.
    if lambda < 0.27 {
        return 1.0;
    }
    let mut total = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        total += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * total).clamp(0.0, 1.0)
}

/// Fits mean and sd (denominator `n - 1`) and measures the KS distance to that
/// normal. The p-value ignores the estimated parameters and is conservative.
pub fn ks_fit_normal(values: &[f64]) -> Result<NormalFit> {
    let n = values.len();
    if n < 3 {
        return Err(Error::Domain(format!("need at least 3 values for a normal fit, got {n}")));
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) {
        return Err(Error::Domain("values have zero spread".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut ks: f64 = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        let c = normal_cdf((v - mean) / sd);
        ks = ks.max((i + 1) as f64 / nf - c).max(c - i as f64 / nf);
    }
    let p_value = kolmogorov_p(nf.sqrt() * ks);
    Ok(NormalFit { mean, sd, ks, p_value })
}

/// `E(√((Z - x)₊) - √((Z - x - ε)₊))²` by quadrature.
pub fn increment_second_moment(obs: &ObservationModel, x: f64, eps: f64) -> Result<f64> {
    let h = |z: f64| {
        if z <= x {
            0.0
        } else if z <= x + eps {
            z - x
        } else {
            let d = eps / ((z - x).sqrt() + (z - x - eps).sqrt());
            d * d
        }
    };
    let extra = [x, x + eps, x + 2.0 * eps, x + 10.0 * eps, x + 100.0 * eps, x + 1000.0 * eps];
    expect_g(obs, h, &extra)
}

/// Ratio of the increment second moment to `ε² log(1/ε) g(x) / 4`.
pub fn increment_ratio(obs: &ObservationModel, x: f64, eps: f64) -> Result<f64> {
    let m = increment_second_moment(obs, x, eps)?;
    Ok(m / (eps * eps * (1.0 / eps).ln() * obs.g(x)? / 4.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CdfModel;
    use rand::Rng;

    fn uniform() -> ObservationModel {
        ObservationModel::new(CdfModel::uniform01()).unwrap()
    }

    fn flat() -> ObservationModel {
        ObservationModel::new(CdfModel::flat_default()).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let obs = uniform();
        assert_eq!(base_kernel(&obs, 0.0, 0.7).unwrap(), 0.0);
        let a = base_kernel(&obs, 0.3, 0.8).unwrap();
        let b = base_kernel(&obs, 0.8, 0.3).unwrap();
        assert_eq!(a, b);
        let k11 = base_kernel(&obs, 1.0, 1.0).unwrap();
        let oracle = 0.4 - (3.0 * std::f64::consts::PI / 16.0).powi(2);
        assert!((k11 - oracle).abs() < 1e-10, "{k11} vs {oracle}");
    }

    #[test]
    fn kernel_matches_monte_carlo() {
        // Var √Z for uniform01 by simulation.
        let model = CdfModel::uniform01();
        let s = crate::sampler::Sampler::new(&model).unwrap();
        let mut rng = RngStream::new(3, 0).rng();
        let n = 200_000;
        let v: Vec<f64> = (0..n).map(|_| s.observation(&mut rng).sqrt()).collect();
        let m = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var - base_kernel(&uniform(), 1.0, 1.0).unwrap()).abs() < 0.002);
    }

    #[test]
    fn anchored_kernel_vanishes_at_anchor_and_matches_mc() {
        let spec = GpSpec::with_grid(flat(), 2.5, (2.0, 3.0), vec![1.9, 2.2, 2.5, 2.8, 3.1]).unwrap();
        assert_eq!(spec.anchored_kernel(2.5, 2.5).unwrap(), 0.0);
        assert!(spec.anchored_kernel(2.5, 2.9).unwrap().abs() < 1e-12);
        // MC oracle: 2(φ_s - φ_x) has covariance equal to the anchored kernel.
        let model = CdfModel::flat_default();
        let sampler = crate::sampler::Sampler::new(&model).unwrap();
        let mut rng = RngStream::new(5, 0).rng();
        let (s, t, x) = (2.2, 2.8, 2.5);
        let n = 400_000;
        let mut a = Vec::with_capacity(n);
        let mut b = Vec::with_capacity(n);
        for _ in 0..n {
            let z = sampler.observation(&mut rng);
            a.push(2.0 * (phi(z, s) - phi(z, x)));
            b.push(2.0 * (phi(z, t) - phi(z, x)));
        }
        let ma = a.iter().sum::<f64>() / n as f64;
        let mb = b.iter().sum::<f64>() / n as f64;
        let prods: Vec<f64> = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).collect();
        let cov = prods.iter().sum::<f64>() / (n - 1) as f64;
        let sd = (prods.iter().map(|v| (v - cov).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        let k = spec.anchored_kernel(s, t).unwrap();
        assert!((cov - k).abs() < 3.0 * se, "{cov} vs {k} (se {se})");
    }

    #[test]
    fn kernel_psd_on_60_point_grids() {
        for (obs, lo, hi) in [(uniform(), 0.01, 1.2), (flat(), 0.1, 4.2)] {
            let grid: Vec<f64> = (0..60).map(|i| lo + (hi - lo) * i as f64 / 59.0).collect();
            let mut k = DMatrix::zeros(60, 60);
            for i in 0..60 {
                for j in 0..60 {
                    k[(i, j)] = base_kernel(&obs, grid[i], grid[j]).unwrap();
                }
            }
            let eig = SymmetricEigen::new(k.clone()).eigenvalues.min();
            assert!(eig >= -1e-8 * k.trace() / 60.0, "{eig}");
        }
    }

    #[test]
    fn paths_pass_through_anchor_and_match_variance() {
        let grid: Vec<f64> = (0..21).map(|i| 1.9 + 1.2 * i as f64 / 20.0).collect();
        let spec = GpSpec::with_grid(flat(), 2.5, (2.0, 3.0), grid).unwrap();
        let paths = sample_paths(&spec, 10_000, 9);
        let a = spec.anchor;
        assert!(paths.iter().all(|p| p[a] == 0.0));
        for i in [0, 5, 15, 20] {
            let var = paths.iter().map(|p| p[i] * p[i]).sum::<f64>() / paths.len() as f64;
            let k = spec.covariance()[(i, i)];
            assert!((var / k - 1.0).abs() < 0.05, "i={i}: {var} vs {k}");
        }
        assert_eq!(sample_paths(&spec, 3, 9), sample_paths(&spec, 3, 9));
    }

    #[test]
    fn zero_kernel_gives_zero_l_x() {
        // Past the support of g every φ_t equals √z, so the anchored kernel vanishes.
        let grid: Vec<f64> = (0..11).map(|i| 1.2 + 0.06 * i as f64).collect();
        let spec = GpSpec::with_grid(uniform(), 1.5, (1.0, 2.0), grid).unwrap();
        let l = l_x_distribution(&spec, 20, 1).unwrap();
        assert!(l.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn switch_relation_matches_hull() {
        let grid: Vec<f64> = (0..41).map(|i| 1.9 + 1.2 * i as f64 / 40.0).collect();
        let spec = GpSpec::with_grid(flat(), 2.5, (2.0, 3.0), grid).unwrap();
        let mut rng = RngStream::new(2, 0).rng();
        for p in 0..100 {
            let path = spec.path(RngStream::new(44, p));
            let l = spec.l_x_of_path(&path).unwrap();
            for _ in 0..5 {
                let a: f64 = l + rng.random_range(-1.0..1.0);
                assert_eq!(l <= a, spec.l_x_at_most(&path, a));
            }
        }
    }

    #[test]
    fn l_x_monotone_coupling() {
        let grid: Vec<f64> = (0..41).map(|i| 1.9 + 1.2 * i as f64 / 40.0).collect();
        let spec = GpSpec::with_grid(flat(), 2.5, (2.0, 3.0), grid.clone()).unwrap();
        for p in 0..50 {
            let path = spec.path(RngStream::new(8, p));
            let base = spec.l_x_of_path(&path).unwrap();
            let lifted: Vec<f64> = path
                .iter()
                .zip(&grid)
                .map(|(&v, &s)| if s < 2.5 { v + 0.3 } else { v })
                .collect();
            assert!(spec.l_x_of_path(&lifted).unwrap() <= base);
        }
    }

    #[test]
    fn ks_fit_examples() {
        let f = ks_fit_normal(&[-1.0, 0.0, 1.0]).unwrap();
        assert!((f.mean).abs() < 1e-15 && (f.sd - 1.0).abs() < 1e-15);
        assert!((f.ks - 0.174_66).abs() < 1e-4, "{}", f.ks);
        let n = 100;
        let q: Vec<f64> = (1..=n)
            .map(|i| {
                let p = (i as f64 - 0.5) / n as f64;
                crate::models::bisect_increasing(normal_cdf, p, -10.0, 10.0)
            })
            .collect();
        assert!(ks_fit_normal(&q).unwrap().ks < 0.01);
        let mut spike = vec![0.0; 99];
        spike.push(100.0);
        assert!(ks_fit_normal(&spike).unwrap().p_value < 1e-10);
        assert!(ks_fit_normal(&[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn kolmogorov_tail() {
        assert!((kolmogorov_p(1.36) - 0.0494).abs() < 1e-3);
        assert_eq!(kolmogorov_p(0.0), 1.0);
    }
}
