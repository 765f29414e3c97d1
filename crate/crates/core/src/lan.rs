//! The least-favourable perturbation path `F_{h_n}` through `F`, its
//! observation density `g_n`, and the quantities of the LAN expansion.
//!
//! With `h_{i,n} = h_i / √(n log n)`, window `η_n` and truncation levels
//! `δ_0 = n^{-1/(2γ_0)}`, `δ_x = n^{-1/(2γ_x)}`:
//!
//! ```text
//! χ_1(v) = 1{δ_0 ≤ v ≤ η} / v         χ_2(w) = 1{δ_x ≤ |w| ≤ η} / w
//! F_h(u) = (F(u) + h_{1,n} ∫_0^u χ_1 + h_{2,n} ∫_0^u χ_2(· - x)) / D
//! ```

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::models::{CdfModel, ObservationModel};
use crate::sampler::SampleSet;

/// Path through `F` at anchor `x`, for sample size `n`.
#[derive(Debug, Clone)]
pub struct PerturbationSpec {
    obs: ObservationModel,
    x: f64,
    h: (f64, f64),
    n: f64,
    gamma0: f64,
    gammax: f64,
    eta: f64,
    delta0: f64,
    deltax: f64,
    h1n: f64,
    h2n: f64,
    /// `∫ √v χ_1(v) dv` and `∫ √v χ_2(v - x) dv`.
    a1: f64,
    a2: f64,
    d: f64,
    md: f64,
}

/// Default window `η_n = (log n)^{-1/2}`.
pub fn default_eta(n: f64) -> f64 {
    1.0 / n.ln().sqrt()
}

/// `∫_{δ ≤ |w| ≤ η} √(x + w) / w dw` via the antiderivative of
/// `(√(x + w) - √(x - w)) / w`.
fn sqrt_chi2_integral(x: f64, delta: f64, eta: f64) -> f64 {
    let big_g = |w: f64| {
        let (p, m, r) = ((x + w).sqrt(), (x - w).sqrt(), x.sqrt());
        2.0 * (p - m) - 2.0 * r * ((p + r) / (m + r)).ln()
    };
    big_g(eta) - big_g(delta)
}

impl PerturbationSpec {
    pub fn new(
        obs: ObservationModel,
        x: f64,
        h: (f64, f64),
        n: f64,
        gamma0: f64,
        gammax: f64,
        eta: Option<f64>,
    ) -> Result<Self> {
        let fail = |m: String| Err(Error::Perturbation(m));
        if !(n >= 3.0 && n.is_finite()) {
            return fail(format!("n = {n} must be at least 3"));
        }
        if !(h.0.is_finite() && h.1.is_finite()) {
            return fail("h must be finite".into());
        }
        if !(gamma0 > 0.5 && gammax > 0.5) {
            return fail(format!("exponents must exceed 1/2, got ({gamma0}, {gammax})"));
        }
        let eta = eta.unwrap_or_else(|| default_eta(n));
        if !(eta > 0.0 && eta <= 1.0) {
            return fail(format!("window η = {eta} must lie in (0, 1]"));
        }
        let delta0 = n.powf(-1.0 / (2.0 * gamma0));
        let deltax = n.powf(-1.0 / (2.0 * gammax));
        if delta0 >= eta || deltax >= eta {
            return fail(format!(
                "truncation levels ({delta0}, {deltax}) reach the window η = {eta}; increase n"
            ));
        }
        if !(x >= eta) {
            return fail(format!("anchor x = {x} must be at least η = {eta} so the window stays in [0, ∞)"));
        }
        let scale = (n * n.ln()).sqrt();
        let (h1n, h2n) = (h.0 / scale, h.1 / scale);
        // ∫ χ_1 = log(η / δ_0)
        let d = 1.0 + h1n * (eta / delta0).ln();
        if !(d > 0.0) {
            return fail(format!("normalizer D = {d} is not positive"));
        }
        let a1 = 2.0 * (eta.sqrt() - delta0.sqrt());
        let a2 = sqrt_chi2_integral(x, deltax, eta);
        let md = obs.m0() + h1n * a1 + h2n * a2;
        Ok(PerturbationSpec { obs, x, h, n, gamma0, gammax, eta, delta0, deltax, h1n, h2n, a1, a2, d, md })
    }

    pub fn obs(&self) -> &ObservationModel {
        &self.obs
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn h(&self) -> (f64, f64) {
        self.h
    }

    pub fn n(&self) -> f64 {
        self.n
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn gammas(&self) -> (f64, f64) {
        (self.gamma0, self.gammax)
    }

    pub fn truncation(&self) -> (f64, f64) {
        (self.delta0, self.deltax)
    }

    /// `(h_{1,n}, h_{2,n})`.
    pub fn hn(&self) -> (f64, f64) {
        (self.h1n, self.h2n)
    }

    /// `∫_0^u χ_1(v) dv`.
    pub fn chi1_primitive(&self, u: f64) -> f64 {
        if u <= self.delta0 {
            0.0
        } else {
            (u.min(self.eta) / self.delta0).ln()
        }
    }

    /// `∫_0^u χ_2(v - x) dv`: zero outside `(x - η, x + η)`, with the plateau
    /// `log(δ_x / η)` on `|u - x| < δ_x`.
    pub fn chi2_primitive(&self, u: f64) -> f64 {
        let w = (u - self.x).abs();
        if w >= self.eta {
            0.0
        } else if w <= self.deltax {
            (self.deltax / self.eta).ln()
        } else {
            (w / self.eta).ln()
        }
    }

    /// `D_{h_n} = 1 + h_{1,n} ∫ χ_1`.
    pub fn d_hn(&self) -> f64 {
        self.d
    }

    /// `m_{h_n} D_{h_n} = m_0 + h_{1,n} ∫ √v χ_1 + h_{2,n} ∫ √v χ_2(v - x)`.
    pub fn md(&self) -> f64 {
        self.md
    }

    /// `(∫ √v χ_1, ∫ √v χ_2(v - x))`.
    pub fn sqrt_chi_integrals(&self) -> (f64, f64) {
        (self.a1, self.a2)
    }

    /// `F_{h_n}(u)`.
    pub fn perturbed_cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let f = self.obs.model().cdf(u);
        (f + self.h1n * self.chi1_primitive(u) + self.h2n * self.chi2_primitive(u)) / self.d
    }

    /// `F_{h_n}(u) - F(u)` without cancellation.
    pub fn cdf_shift(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let f = self.obs.model().cdf(u);
        (self.h1n * self.chi1_primitive(u) + self.h2n * self.chi2_primitive(u) - (self.d - 1.0) * f) / self.d
    }

    /// Errors if `F_{h_n}` decreases anywhere on the grid.
    pub fn check_monotone(&self, grid: &[f64]) -> Result<()> {
        let mut prev = f64::NEG_INFINITY;
        for &u in grid {
            let v = self.perturbed_cdf(u);
            if v < prev - 1e-14 {
                return Err(Error::Perturbation(format!(
                    "F_h decreases near u = {u} at n = {}; use a larger n",
                    self.n
                )));
            }
            prev = prev.max(v);
        }
        Ok(())
    }

    /// Monotonicity on an evenly spaced grid covering the perturbation windows.
    pub fn check_monotone_default(&self) -> Result<()> {
        let top = (self.x + 2.0 * self.eta).max(self.obs.model().effective_upper().min(self.x + 10.0));
        let grid: Vec<f64> = (0..=10_000).map(|k| top * k as f64 / 10_000.0).collect();
        self.check_monotone(&grid)
    }

    /// `ζ_{1,n}(z)` and `ζ_{2,n}(z - x)`.
    pub fn zetas(&self, z: f64) -> Result<(f64, f64)> {
        Ok((zeta_n(z, self.delta0, self.eta)?, zeta_n(z - self.x, self.deltax, self.eta)?))
    }

    /// `g_n(z) = (2 m_0 g(z) + h_{1,n} ζ_1(z) + h_{2,n} ζ_2(z - x)) / (2 m_{h_n} D_{h_n})`.
    pub fn perturbed_g(&self, z: f64) -> Result<f64> {
        let g = self.obs.g(z)?;
        let (z1, z2) = self.zetas(z)?;
        let v = (2.0 * self.obs.m0() * g + self.h1n * z1 + self.h2n * z2) / (2.0 * self.md);
        if v < 0.0 {
            return Err(Error::Perturbation(format!(
                "g_n({z}) = {v} < 0: n = {} is below the monotonicity threshold",
                self.n
            )));
        }
        Ok(v)
    }

    /// `Σ log(g_n(Z_i) / g(Z_i))`.
    pub fn loglik_sum(&self, sample: &SampleSet) -> Result<f64> {
        if self.h == (0.0, 0.0) {
            return Ok(0.0);
        }
        let m0 = self.obs.m0();
        let log_norm = (self.md / m0).ln();
        let mut total = 0.0;
        for &z in sample.values() {
            let g = self.obs.g(z)?;
            if !(g > 0.0) {
                return Err(Error::Perturbation(format!("g({z}) = 0")));
            }
            let (z1, z2) = self.zetas(z)?;
            let rel = (self.h1n * z1 + self.h2n * z2) / (2.0 * m0 * g);
            if !(rel > -1.0) {
                return Err(Error::Perturbation(format!("g_n({z}) <= 0 at n = {}", self.n)));
            }
            total += rel.ln_1p() - log_norm;
        }
        Ok(total)
    }

    /// Score `Δ_n = (Σ ζ_1/(2g) - ∫√v χ_1, Σ ζ_2/(2g) - ∫√v χ_2) / (m_{h_n} D_{h_n} √(n log n))`.
    pub fn delta_n(&self, sample: &SampleSet) -> Result<(f64, f64)> {
        let (mut s1, mut s2) = (0.0, 0.0);
        for &z in sample.values() {
            let g = self.obs.g(z)?;
            if !(g > 0.0) {
                return Err(Error::Perturbation(format!("g({z}) = 0")));
            }
            let (z1, z2) = self.zetas(z)?;
            s1 += z1 / (2.0 * g) - self.a1;
            s2 += z2 / (2.0 * g) - self.a2;
        }
        let scale = self.md * (self.n * self.n.ln()).sqrt();
        Ok((s1 / scale, s2 / scale))
    }

    /// `√(n / log n) (F_{h_n}(x) - F(x))`.
    pub fn hadamard_value(&self) -> f64 {
        (self.n / self.n.ln()).sqrt() * self.cdf_shift(self.x)
    }
}

/// `ζ_n(x) = ∫_x^∞ 1{δ ≤ |v| ≤ η} / (v √(v - x)) dv` in closed form.
pub fn zeta_n(x: f64, delta: f64, eta: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < eta) {
        return Err(Error::Domain(format!("need 0 < δ < η, got δ = {delta}, η = {eta}")));
    }
    let mut total = 0.0;
    // v ∈ [max(δ, x), η]
    let a = delta.max(x);
    if a < eta {
        total += pos_antiderivative(x, eta) - pos_antiderivative(x, a);
    }
    // v ∈ [-min(c, η), -δ] with c = -x, written in w = -v
    if x < -delta {
        let c = -x;
        let m = c.min(eta);
        let l = |w: f64| ((c.sqrt() + (c - w).max(0.0).sqrt()) / w.sqrt()).ln();
        total += 2.0 / c.sqrt() * (l(m) - l(delta));
    }
    Ok(total)
}

/// Antiderivative of `1 / (v √(v - x))` for `v > max(x, 0)`.
fn pos_antiderivative(x: f64, v: f64) -> f64 {
    if x > 0.0 {
        -2.0 / x.sqrt() * x.sqrt().atan2((v - x).sqrt())
    } else if x == 0.0 {
        -2.0 / v.sqrt()
    } else {
        let c = -x;
        -2.0 / c.sqrt() * (c / v).sqrt().asinh()
    }
}

/// Diagonal of `J = (π² / 8 m_0²) diag(1 / (γ_0 g(0)), 1 / (γ_x g(x)))`.
pub fn j_matrix(obs: &ObservationModel, x: f64, gamma0: f64, gammax: f64) -> Result<[[f64; 2]; 2]> {
    let (g0, gx) = (obs.g(0.0)?, obs.g(x)?);
    if !(g0 > 0.0 && gx > 0.0 && g0.is_finite() && gx.is_finite()) {
        return Err(Error::Domain(format!("J needs 0 < g < ∞ at 0 and x (got {g0}, {gx})")));
    }
    let c = PI * PI / (8.0 * obs.m0() * obs.m0());
    Ok([[c / (gamma0 * g0), 0.0], [0.0, c / (gammax * gx)]])
}

/// `ψ̇ = ((1 - F(x)) / (2γ_0), -1 / (2γ_x))`.
pub fn psi_dot(model: &CdfModel, x: f64, gamma0: f64, gammax: f64) -> (f64, f64) {
    ((1.0 - model.cdf(x)) / (2.0 * gamma0), -1.0 / (2.0 * gammax))
}

/// `(4 m_0² / π²) (g(x) / (2γ_x) + (1 - F(x))² g(0) / (2γ_0))`.
pub fn efficient_variance(obs: &ObservationModel, x: f64, gamma0: f64, gammax: f64) -> Result<f64> {
    let (g0, gx) = (obs.g(0.0)?, obs.g(x)?);
    if !(g0.is_finite() && gx.is_finite()) {
        return Err(Error::Domain("efficient variance needs g finite at 0 and x".into()));
    }
    let f = obs.model().cdf(x);
    let m0 = obs.m0();
    Ok(4.0 * m0 * m0 / (PI * PI) * (gx / (2.0 * gammax) + (1.0 - f).powi(2) * g0 / (2.0 * gamma0)))
}

/// `ψ̇ᵀ J⁻¹ ψ̇`.
pub fn psi_j_psi(obs: &ObservationModel, x: f64, gamma0: f64, gammax: f64) -> Result<f64> {
    let j = j_matrix(obs, x, gamma0, gammax)?;
    let p = psi_dot(obs.model(), x, gamma0, gammax);
    Ok(p.0 * p.0 / j[0][0] + p.1 * p.1 / j[1][1])
}

/// The everything-but-`n` part of a [`PerturbationSpec`].
#[derive(Debug, Clone)]
pub struct PathTemplate {
    pub obs: ObservationModel,
    pub x: f64,
    pub h: (f64, f64),
    pub gamma0: f64,
    pub gammax: f64,
    pub eta: Option<f64>,
}

impl PathTemplate {
    pub fn at(&self, n: f64) -> Result<PerturbationSpec> {
        PerturbationSpec::new(self.obs.clone(), self.x, self.h, n, self.gamma0, self.gammax, self.eta)
    }

    /// Limit `hᵀ ψ̇` of the ladder.
    pub fn limit(&self) -> f64 {
        let p = psi_dot(self.obs.model(), self.x, self.gamma0, self.gammax);
        self.h.0 * p.0 + self.h.1 * p.1
    }
}

/// `√(n / log n) (F_{h_n}(x) - F(x))` for each `n`.
pub fn hadamard_ladder(template: &PathTemplate, ns: &[f64]) -> Result<Vec<f64>> {
    if ns.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Domain("ladder sizes must increase".into()));
    }
    ns.iter().map(|&n| Ok(template.at(n)?.hadamard_value())).collect()
}

/// Replication summary of the LAN experiment.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct LanReport {
    pub replications: usize,
    pub loglik_mean: f64,
    pub loglik_var: f64,
    pub delta_mean: [f64; 2],
    pub delta_cov: [[f64; 2]; 2],
    pub j: [[f64; 2]; 2],
    /// `-½ hᵀ J h`.
    pub theory_mean: f64,
    /// `hᵀ J h`.
    pub theory_var: f64,
}

impl LanReport {
    pub fn from_replications(loglik: &[f64], deltas: &[(f64, f64)], j: [[f64; 2]; 2], h: (f64, f64)) -> Self {
        let r = loglik.len();
        let rf = r as f64;
        let mean = loglik.iter().sum::<f64>() / rf;
        let var = if r > 1 {
            loglik.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (rf - 1.0)
        } else {
            0.0
        };
        let m1 = deltas.iter().map(|d| d.0).sum::<f64>() / rf;
        let m2 = deltas.iter().map(|d| d.1).sum::<f64>() / rf;
        let mut cov = [[0.0; 2]; 2];
        if r > 1 {
            for d in deltas {
                let e = [d.0 - m1, d.1 - m2];
                for a in 0..2 {
                    for b in 0..2 {
                        cov[a][b] += e[a] * e[b] / (rf - 1.0);
                    }
                }
            }
        }
        let quad = h.0 * h.0 * j[0][0] + h.1 * h.1 * j[1][1] + 2.0 * h.0 * h.1 * j[0][1];
        LanReport {
            replications: r,
            loglik_mean: mean,
            loglik_var: var,
            delta_mean: [m1, m2],
            delta_cov: cov,
            j,
            theory_mean: -0.5 * quad,
            theory_var: quad,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{self, Tolerance};
    use crate::rng::mix64;
    use crate::sampler::sample_dataset;
    use proptest::prelude::*;

    fn uniform() -> ObservationModel {
        ObservationModel::new(CdfModel::uniform01()).unwrap()
    }

    fn spec(h: (f64, f64), n: f64, eta: Option<f64>) -> PerturbationSpec {
        PerturbationSpec::new(uniform(), 0.5, h, n, 1.0, 1.0, eta).unwrap()
    }

    fn unit(state: &mut u64) -> f64 {
        *state = mix64(*state);
        (*state >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn chi2_primitive_examples() {
        let s = spec((1.0, 1.0), 100.0, Some(0.5));
        assert_eq!(s.chi2_primitive(0.0), 0.0);
        assert!((s.chi2_primitive(0.5) - 0.2f64.ln()).abs() < 1e-15);
        assert_eq!(s.chi2_primitive(1.0), 0.0);
        assert_eq!(s.chi2_primitive(50.0), 0.0);
    }

    #[test]
    fn d_hn_examples() {
        assert_eq!(spec((0.0, 1.0), 100.0, Some(0.5)).d_hn(), 1.0);
        let d = spec((1.0, 0.0), 100.0, Some(0.5)).d_hn();
        let h1n = 1.0 / (100.0 * 100f64.ln()).sqrt();
        assert!((h1n - 0.046_599).abs() < 1e-6);
        assert!((d - (1.0 + h1n * 5f64.ln())).abs() < 1e-15);
        assert!((d - 1.075).abs() < 1e-3);
        let mut prev = f64::INFINITY;
        for n in [1e3, 1e6, 1e9] {
            let gap = (spec((1.0, 1.0), n, None).d_hn() - 1.0).abs();
            assert!(gap < prev);
            prev = gap;
        }
    }

    #[test]
    fn construction_errors() {
        assert!(PerturbationSpec::new(uniform(), 0.5, (1.0, 1.0), 2.0, 1.0, 1.0, None).is_err());
        // n^{-1/2} = 0.5 collides with η = 0.5
        assert!(PerturbationSpec::new(uniform(), 0.6, (1.0, 1.0), 4.0, 1.0, 1.0, Some(0.5)).is_err());
        assert!(PerturbationSpec::new(uniform(), 0.5, (f64::NAN, 1.0), 1e4, 1.0, 1.0, None).is_err());
        assert!(PerturbationSpec::new(uniform(), 0.5, (-1e6, 0.0), 1e4, 1.0, 1.0, None).is_err());
    }

    #[test]
    fn primitives_match_quadrature() {
        let s = spec((1.0, 1.0), 1e4, None);
        let (d0, dx) = s.truncation();
        let eta = s.eta();
        let chi1 = |v: f64| if v >= d0 && v <= eta { 1.0 / v } else { 0.0 };
        let chi2 = |v: f64| {
            let w = v - 0.5;
            if w.abs() >= dx && w.abs() <= eta { 1.0 / w } else { 0.0 }
        };
        let mut state = 1u64;
        for _ in 0..100 {
            let u = 1.2 * unit(&mut state);
            let mut p1 = vec![0.0, u, d0, eta];
            p1.retain(|p| *p <= u);
            let q1 = quadrature::with_breaks(&chi1, &p1, Tolerance::rel(1e-13)).unwrap();
            let mut p2 = vec![0.0, u, 0.5 - eta, 0.5 - dx, 0.5 + dx, 0.5 + eta];
            p2.retain(|p| *p <= u && *p >= 0.0);
            let q2 = quadrature::with_breaks(&chi2, &p2, Tolerance::rel(1e-13)).unwrap();
            assert!((s.chi1_primitive(u) - q1).abs() < 1e-10, "u={u}");
            assert!((s.chi2_primitive(u) - q2).abs() < 1e-10, "u={u}");
        }
        assert!((s.chi1_primitive(10.0) - ((eta / d0).ln())).abs() < 1e-15);
    }

    #[test]
    fn md_identity_matches_quadrature() {
        for &(n, x) in &[(1e4, 0.5), (1e6, 0.8), (1e3, 2.0)] {
            let s = PerturbationSpec::new(uniform(), x, (0.7, -1.3), n, 1.0, 1.5, None).unwrap();
            let (d0, dx) = s.truncation();
            let eta = s.eta();
            let q1 = quadrature::smooth_ends(&|v: f64| v.sqrt() / v, d0, eta, Tolerance::rel(1e-13)).unwrap();
            let f2 = |w: f64| (x + w).sqrt() / w;
            let q2 = quadrature::smooth_ends(&f2, dx, eta, Tolerance::rel(1e-13)).unwrap()
                + quadrature::smooth_ends(&f2, -eta, -dx, Tolerance::rel(1e-13)).unwrap();
            let (a1, a2) = s.sqrt_chi_integrals();
            assert!((a1 - q1).abs() < 1e-10 && (a2 - q2).abs() < 1e-10, "{a2} vs {q2}");
            let (h1n, h2n) = s.hn();
            assert!((s.md() - (2.0 / 3.0 + h1n * q1 + h2n * q2)).abs() < 1e-10);
        }
    }

    #[test]
    fn perturbed_cdf_examples() {
        let s0 = spec((0.0, 0.0), 1e4, None);
        for &u in &[0.1, 0.5, 0.9, 2.0] {
            assert_eq!(s0.perturbed_cdf(u), CdfModel::uniform01().cdf(u));
        }
        let s = spec((0.0, 1.0), 1e4, None);
        let (_, h2n) = s.hn();
        let plateau = (s.truncation().1 / s.eta()).ln();
        assert!((s.perturbed_cdf(0.5) - (0.5 + h2n * plateau)).abs() < 1e-15);
        assert!((spec((1.0, 1.0), 1e4, None).perturbed_cdf(1e6) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn perturbed_cdf_monotone_for_large_n() {
        let mut state = 5u64;
        for _ in 0..20 {
            let h = (4.0 * unit(&mut state) - 2.0, 4.0 * unit(&mut state) - 2.0);
            let n = 10f64.powf(3.0 + 4.0 * unit(&mut state));
            let s = spec(h, n, None);
            let grid: Vec<f64> = (0..10_000).map(|k| 1.2 * k as f64 / 9999.0).collect();
            s.check_monotone(&grid).unwrap();
        }
    }

    #[test]
    fn zeta_examples() {
        assert_eq!(zeta_n(1.5, 1e-3, 1.0).unwrap(), 0.0);
        let z = zeta_n(0.25, 1e-6, 1.0).unwrap();
        assert!((z - 4.0 * PI / 3.0).abs() < 1e-12);
        assert!((z - 2.0 * PI).abs() <= PI);
        let wide = zeta_n(0.25, 1e-12, 1e12).unwrap();
        assert!((wide - 2.0 * PI).abs() < 1e-5);
        assert!(zeta_n(0.1, 0.5, 0.5).is_err());
    }

    fn zeta_quadrature(x: f64, delta: f64, eta: f64) -> f64 {
        let tol = Tolerance { rel: 1e-11, abs: 1e-300, max_panels: 20_000 };
        let f = |v: f64| 1.0 / (v * (v - x).sqrt());
        // decade breakpoints between |lo| and |hi|
        let decades = |lo: f64, hi: f64| {
            let mut pts = vec![];
            let mut p = 10.0 * lo;
            while p < hi {
                pts.push(p);
                p *= 10.0;
            }
            pts
        };
        let mut total = 0.0;
        let a = delta.max(x);
        if a < eta {
            total += if x >= 0.0 {
                // v = x + w² removes the square root
                let g = |w: f64| 2.0 / (x + w * w);
                let mut pts = vec![(a - x).sqrt(), (eta - x).sqrt()];
                pts.extend(decades(a, eta).into_iter().map(|p| (p - x).sqrt()));
                quadrature::with_breaks(&g, &pts, tol).unwrap()
            } else {
                let mut pts = vec![a, eta];
                pts.extend(decades(a, eta));
                quadrature::with_breaks(&f, &pts, tol).unwrap()
            };
        }
        if x < -delta {
            let lo = x.max(-eta);
            let mut pts = vec![lo, -delta];
            pts.extend(decades(delta, -lo).into_iter().map(|p| -p));
            total += quadrature::with_breaks(&f, &pts, tol).unwrap();
        }
        total
    }

    fn random_triple(state: &mut u64) -> (f64, f64, f64) {
        let eta = 10f64.powf(-2.0 * unit(state));
        let delta = eta * 10f64.powf(-6.0 * unit(state) - 1e-3);
        let x = (3.0 * unit(state) - 2.0) * eta * 10f64.powf(-3.0 * unit(state));
        (x, delta, eta)
    }

    #[test]
    fn zeta_closed_form_matches_quadrature() {
        let mut state = 99u64;
        for _ in 0..300 {
            let (x, delta, eta) = random_triple(&mut state);
            let c = zeta_n(x, delta, eta).unwrap();
            let q = zeta_quadrature(x, delta, eta);
            assert!((c - q).abs() <= 1e-8 * (1.0 + q.abs()), "x={x} δ={delta} η={eta}: {c} vs {q}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn zeta_bounds(seed in any::<u64>()) {
            let mut state = seed;
            let (x, delta, eta) = random_triple(&mut state);
            let z = zeta_n(x, delta, eta).unwrap();
            let c = (3.0 + 2.0 * 2f64.sqrt()).ln();
            let slack = 1e-9 * (1.0 + z.abs());
            if x > eta {
                prop_assert_eq!(z, 0.0);
            } else if x >= delta {
                prop_assert!((z - PI / x.sqrt()).abs() <= PI / eta.sqrt() + slack);
            } else if x >= -delta {
                prop_assert!(z.abs() <= PI / delta.sqrt() + slack);
            } else if x <= -eta {
                prop_assert!(z.abs() <= c / eta.sqrt() + slack);
            } else {
                let cx = -x;
                prop_assert!(z.abs() <= c * delta / cx.powf(1.5) + 2.0 / eta.sqrt() + slack);
            }
        }
    }

    #[test]
    fn perturbed_g_integrates_to_one() {
        let mut state = 17u64;
        let mut specs = vec![spec((1.0, 1.0), 1e4, None)];
        for _ in 0..9 {
            let h = (4.0 * unit(&mut state) - 2.0, 4.0 * unit(&mut state) - 2.0);
            let n = 10f64.powf(3.0 + 3.0 * unit(&mut state));
            specs.push(spec(h, n, None));
        }
        for s in specs {
            let (d0, dx) = s.truncation();
            let eta = s.eta();
            let pts = [0.0, d0, eta, 0.5 - eta, 0.5 - dx, 0.5, 0.5 + dx, 0.5 + eta, 1.0];
            let f = |z: f64| s.perturbed_g(z).unwrap();
            let total = quadrature::with_breaks(&f, &pts, Tolerance::rel(1e-10)).unwrap();
            assert!((total - 1.0).abs() < 1e-6, "h={:?} n={}: {total}", s.h(), s.n());
        }
    }

    #[test]
    fn perturbed_g_far_from_windows() {
        for n in [1e4, 1e6, 1e8] {
            let s = spec((1.0, 1.0), n, None);
            let z = 0.99;
            if z > 0.5 + s.eta() {
                let ratio = s.perturbed_g(z).unwrap() / uniform().g(z).unwrap();
                assert!((ratio - 2.0 / 3.0 / s.md()).abs() < 1e-12);
            }
        }
        let s0 = spec((0.0, 0.0), 1e4, None);
        assert_eq!(s0.perturbed_g(0.3).unwrap(), uniform().g(0.3).unwrap());
    }

    #[test]
    fn loglik_and_delta_contracts() {
        let data = sample_dataset(&CdfModel::uniform01(), 2000, 3).unwrap();
        assert_eq!(spec((0.0, 0.0), 2000.0, None).loglik_sum(&data).unwrap(), 0.0);
        // Δ_n carries h only through m_{h_n} D_{h_n}
        let a = spec((1.0, 0.0), 2000.0, None);
        let b = spec((0.0, 1.0), 2000.0, None);
        let (da, db) = (a.delta_n(&data).unwrap(), b.delta_n(&data).unwrap());
        assert!((da.0 * a.md() - db.0 * b.md()).abs() < 1e-12);
        assert!((da.1 * a.md() - db.1 * b.md()).abs() < 1e-12);
    }

    #[test]
    fn loglik_derivative_is_the_score() {
        let n = 5000.0;
        let data = sample_dataset(&CdfModel::uniform01(), n as usize, 8).unwrap();
        let eps = 1e-4;
        let up = spec((0.0, eps), n, None).loglik_sum(&data).unwrap();
        let down = spec((0.0, -eps), n, None).loglik_sum(&data).unwrap();
        let fd = (up - down) / (2.0 * eps);
        let score = spec((0.0, 0.0), n, None).delta_n(&data).unwrap().1;
        assert!((fd - score).abs() < 0.01 * score.abs().max(0.1), "{fd} vs {score}");
        let small = spec((0.0, eps), n, None).loglik_sum(&data).unwrap();
        assert!((small - eps * score).abs() < 0.05 * (eps * score).abs().max(1e-9));
    }

    #[test]
    fn delta_is_centered() {
        let model = CdfModel::uniform01();
        let sampler = crate::sampler::Sampler::new(&model).unwrap();
        let s = spec((1.0, 1.0), 2000.0, None);
        let reps = 500;
        let draws: Vec<(f64, f64)> = (0..reps)
            .map(|r| s.delta_n(&sampler.dataset(2000, crate::rng::RngStream::new(12, r)).unwrap()).unwrap())
            .collect();
        for c in 0..2 {
            let v: Vec<f64> = draws.iter().map(|d| if c == 0 { d.0 } else { d.1 }).collect();
            let m = v.iter().sum::<f64>() / reps as f64;
            let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            assert!(m.abs() < 3.0 * sd / (reps as f64).sqrt(), "component {c}: {m}");
        }
    }

    #[test]
    fn information_and_derivative() {
        let obs = uniform();
        let j = j_matrix(&obs, 0.5, 1.0, 1.0).unwrap();
        assert!((j[0][0] - 1.850_55).abs() < 1e-5);
        assert!((j[1][1] - 2.617_07).abs() < 1e-5);
        assert_eq!(j[0][1], 0.0);
        assert_eq!(j[1][0], 0.0);
        let j2 = j_matrix(&obs, 0.5, 2.0, 2.0).unwrap();
        assert!((j2[0][0] * 2.0 - j[0][0]).abs() < 1e-15);
        assert_eq!(psi_dot(obs.model(), 0.5, 1.0, 1.0), (0.25, -0.5));
        assert_eq!(psi_dot(obs.model(), 1.0, 1.0, 1.0), (0.0, -0.5));
        let v = efficient_variance(&obs, 0.5, 1.0, 1.0).unwrap();
        assert!((v - 0.129_30).abs() < 1e-5, "{v}");
        assert!((v - psi_j_psi(&obs, 0.5, 1.0, 1.0).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn ladder_examples() {
        let template = PathTemplate { obs: uniform(), x: 0.5, h: (0.0, 0.0), gamma0: 1.0, gammax: 1.0, eta: None };
        assert!(hadamard_ladder(&template, &[1e4, 1e6]).unwrap().iter().all(|&v| v == 0.0));
        let t = PathTemplate { h: (1.0, 1.0), ..template };
        assert_eq!(t.limit(), -0.25);
        let ns = [1e4, 1e6, 1e8, 1e10];
        let vals = hadamard_ladder(&t, &ns).unwrap();
        let errs: Vec<f64> = vals.iter().map(|v| (v + 0.25).abs()).collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0]), "{errs:?}");
        assert!(errs[3] <= 0.08);
        assert!(hadamard_ladder(&t, &[1e6, 1e4]).is_err());
    }
}
