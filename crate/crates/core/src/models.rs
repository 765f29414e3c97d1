//! Sphere-size models `F` (over squared radii) and the induced density `g`
//! of observed squared circle radii.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::quadrature::{self, Tolerance};
use crate::series::zeta_range;

/// Weight of each atom `x0 ± i^{-1/γ}` of the discrete model is `W i^{-2}`.
const DISCRETE_W: f64 = 3.0 / (PI * PI);
/// Index cap for the discrete model; the mass beyond it is below 1e-15.
const INDEX_CAP: f64 = 1e15;

/// Regularized lower incomplete gamma, extended by 0 for `x <= 0` and 1 at `∞`.
pub(crate) fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x == f64::INFINITY {
        1.0
    } else {
        gamma_lr(a, x)
    }
}

fn tol() -> Tolerance {
    Tolerance { rel: 1e-12, abs: 1e-16, max_panels: 6000 }
}

/// One piece of a piecewise-constant density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatPiece {
    pub a: f64,
    pub b: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CdfKind {
    /// `F(u) = u` on `[0, 1]`.
    Uniform01,
    /// Gamma with shape and rate.
    Gamma { shape: f64, rate: f64 },
    /// Piecewise-constant density over disjoint intervals.
    Flat { pieces: Vec<FlatPiece> },
    /// `F(u) = clamp(base + K sgn(u - x0) |u - x0|^γ, 0, 1)`.
    Holder { x0: f64, gamma: f64, k: f64, base: f64 },
    /// Atoms at `x0 ± i^{-1/γ}` with weight `(3/π²) i^{-2}` each.
    Discrete { x0: f64, gamma: f64 },
    /// All mass at one point.
    PointMass { at: f64 },
}

/// Declared local smoothness of `F` at 0 and at the anchor `x`:
/// `H_y(δ) ≈ K_y sgn(δ) |δ|^{γ_y}` for `y ∈ {0, x}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothnessSpec {
    pub gamma0: f64,
    pub gammax: f64,
    pub k0: f64,
    pub kx: f64,
    pub x: f64,
}

impl SmoothnessSpec {
    pub fn new(gamma0: f64, gammax: f64, k0: f64, kx: f64, x: f64) -> Result<Self> {
        if !(gamma0 > 0.5 && gammax > 0.5) {
            return Err(Error::InvalidModel(format!(
                "smoothness exponents must exceed 1/2 (got {gamma0}, {gammax})"
            )));
        }
        if !(k0 > 0.0 && kx > 0.0) {
            return Err(Error::InvalidModel("smoothness constants must be positive".into()));
        }
        if !(x.is_finite() && x >= 0.0) {
            return Err(Error::InvalidModel(format!("anchor {x} must be finite and nonnegative")));
        }
        Ok(SmoothnessSpec { gamma0, gammax, k0, kx, x })
    }
}

/// A sphere squared-radius distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfModel {
    kind: CdfKind,
    smoothness: Option<SmoothnessSpec>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidModel(msg.into())
}

impl CdfModel {
    pub fn uniform01() -> Self {
        CdfModel { kind: CdfKind::Uniform01, smoothness: None }
    }

    pub fn gamma(shape: f64, rate: f64) -> Result<Self> {
        if !(shape > 0.0 && rate > 0.0 && shape.is_finite() && rate.is_finite()) {
            return Err(bad(format!("gamma needs positive shape and rate, got {shape}, {rate}")));
        }
        Ok(CdfModel { kind: CdfKind::Gamma { shape, rate }, smoothness: None })
    }

    pub fn flat(mut pieces: Vec<FlatPiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(bad("flat mixture needs at least one piece"));
        }
        pieces.sort_by(|p, q| p.a.partial_cmp(&q.a).unwrap_or(std::cmp::Ordering::Equal));
        let mut mass = 0.0;
        for (i, p) in pieces.iter().enumerate() {
            if !(p.a >= 0.0 && p.b > p.a && p.b.is_finite()) {
                return Err(bad(format!("piece [{}, {}] is not a finite interval in [0, ∞)", p.a, p.b)));
            }
            if !(p.density >= 0.0 && p.density.is_finite()) {
                return Err(bad(format!("piece density {} must be nonnegative", p.density)));
            }
            if i > 0 && p.a < pieces[i - 1].b {
                return Err(bad("flat mixture pieces overlap"));
            }
            mass += p.density * (p.b - p.a);
        }
        if (mass - 1.0).abs() > 1e-9 {
            return Err(bad(format!("flat mixture has total mass {mass}, expected 1")));
        }
        Ok(CdfModel { kind: CdfKind::Flat { pieces }, smoothness: None })
    }

    /// Density 0.4 on `[0.5, 2]` and on `[3, 4]`: flat on `[0, 0.5]` and `[2, 3]`.
    pub fn flat_default() -> Self {
        CdfModel::flat(vec![
            FlatPiece { a: 0.5, b: 2.0, density: 0.4 },
            FlatPiece { a: 3.0, b: 4.0, density: 0.4 },
        ])
        .expect("default flat mixture is valid")
    }

    pub fn holder(x0: f64, gamma: f64, k: f64, base: f64) -> Result<Self> {
        if !(gamma > 0.0 && k > 0.0 && (0.0..=1.0).contains(&base) && x0.is_finite()) {
            return Err(bad("holder needs gamma > 0, K > 0 and base in [0, 1]"));
        }
        let lo = x0 - (base / k).powf(1.0 / gamma);
        if lo < 0.0 {
            return Err(bad(format!(
                "holder support starts at {lo} < 0; need x0 >= (base/K)^(1/gamma)"
            )));
        }
        Ok(CdfModel { kind: CdfKind::Holder { x0, gamma, k, base }, smoothness: None })
    }

    pub fn discrete(x0: f64, gamma: f64) -> Result<Self> {
        if !(gamma > 0.5 && gamma.is_finite()) {
            return Err(bad(format!("discrete example needs gamma > 1/2, got {gamma}")));
        }
        if !(x0 >= 1.0 && x0.is_finite()) {
            return Err(bad(format!("discrete example needs x0 >= 1 so atoms are nonnegative, got {x0}")));
        }
        Ok(CdfModel { kind: CdfKind::Discrete { x0, gamma }, smoothness: None })
    }

    pub fn point_mass(at: f64) -> Result<Self> {
        if !(at > 0.0 && at.is_finite()) {
            return Err(bad(format!("point mass location must be positive, got {at}")));
        }
        Ok(CdfModel { kind: CdfKind::PointMass { at }, smoothness: None })
    }

    pub fn with_smoothness(mut self, s: SmoothnessSpec) -> Self {
        self.smoothness = Some(s);
        self
    }

    pub fn kind(&self) -> &CdfKind {
        &self.kind
    }

    pub fn smoothness(&self) -> Option<&SmoothnessSpec> {
        self.smoothness.as_ref()
    }

    /// Smoothness implied by the model's closed form at anchor `x`, where the
    /// model has one (`None` otherwise).
    pub fn declared_smoothness(&self, x: f64) -> Option<SmoothnessSpec> {
        if let Some(s) = self.smoothness {
            if s.x == x {
                return Some(s);
            }
        }
        match self.kind {
            CdfKind::Uniform01 if x > 0.0 && x < 1.0 => SmoothnessSpec::new(1.0, 1.0, 0.5, 0.5, x).ok(),
            CdfKind::Gamma { shape, rate } if x > 0.0 && shape > 0.5 => {
                // F(y) ≈ rate^k y^k / Γ(k + 1) near 0
                let k0 = (shape * rate.ln() - ln_gamma(shape + 2.0)).exp();
                let fx = self.density(x).unwrap_or(0.0);
                SmoothnessSpec::new(shape, 1.0, k0, fx / 2.0, x).ok()
            }
            CdfKind::Holder { x0, gamma, k, .. } if x == x0 && gamma > 0.5 => {
                // F is zero near 0, so only the anchor exponent is meaningful;
                // the exponent at 0 is set to the anchor's.
                SmoothnessSpec::new(gamma, gamma, k / (1.0 + gamma), k / (1.0 + gamma), x).ok()
            }
            CdfKind::Discrete { x0, gamma } if x == x0 => {
                let c = DISCRETE_W / (1.0 + gamma);
                SmoothnessSpec::new(gamma, gamma, c, c, x).ok()
            }
            _ => None,
        }
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self.kind, CdfKind::Discrete { .. } | CdfKind::PointMass { .. })
    }

    /// Smallest and largest support points (`hi` may be infinite).
    pub fn support(&self) -> (f64, f64) {
        match &self.kind {
            CdfKind::Uniform01 => (0.0, 1.0),
            CdfKind::Gamma { .. } => (0.0, f64::INFINITY),
            CdfKind::Flat { pieces } => {
                let lo = pieces.iter().find(|p| p.density > 0.0).map_or(0.0, |p| p.a);
                let hi = pieces.iter().rev().find(|p| p.density > 0.0).map_or(0.0, |p| p.b);
                (lo, hi)
            }
            CdfKind::Holder { x0, gamma, k, base } => (
                x0 - (base / k).powf(1.0 / gamma),
                x0 + ((1.0 - base) / k).powf(1.0 / gamma),
            ),
            CdfKind::Discrete { x0, .. } => (x0 - 1.0, x0 + 1.0),
            CdfKind::PointMass { at } => (*at, *at),
        }
    }

    /// A point beyond which `F` has mass below 1e-14.
    pub fn effective_upper(&self) -> f64 {
        match self.kind {
            CdfKind::Gamma { .. } => self.quantile(1.0 - 1e-14),
            _ => self.support().1,
        }
    }

    /// `F(u)`; zero for `u <= 0`.
    pub fn cdf(&self, u: f64) -> f64 {
        if u.is_nan() || u <= 0.0 {
            return 0.0;
        }
        match &self.kind {
            CdfKind::Uniform01 => u.min(1.0),
            CdfKind::Gamma { shape, rate } => gamma_p(*shape, rate * u),
            CdfKind::Flat { pieces } => pieces
                .iter()
                .map(|p| p.density * (u.min(p.b) - p.a).max(0.0))
                .sum::<f64>()
                .min(1.0),
            CdfKind::Holder { x0, gamma, k, base } => {
                let d = u - x0;
                (base + k * d.signum() * d.abs().powf(*gamma)).clamp(0.0, 1.0)
            }
            CdfKind::Discrete { x0, gamma } => {
                let (l, r) = discrete_ranges_le(*x0, *gamma, u);
                let mass = range_zeta(2.0, l) + range_zeta(2.0, r);
                (DISCRETE_W * mass).min(1.0)
            }
            CdfKind::PointMass { at } => {
                if u >= *at {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Density of `F` for absolutely continuous kinds.
    pub fn density(&self, u: f64) -> Option<f64> {
        match &self.kind {
            CdfKind::Uniform01 => Some(if (0.0..=1.0).contains(&u) { 1.0 } else { 0.0 }),
            CdfKind::Gamma { shape, rate } => Some(if u <= 0.0 {
                0.0
            } else {
                (shape * rate.ln() + (shape - 1.0) * u.ln() - rate * u - ln_gamma(*shape)).exp()
            }),
            CdfKind::Flat { pieces } => Some(
                pieces
                    .iter()
                    .find(|p| u >= p.a && u < p.b)
                    .map_or(0.0, |p| p.density),
            ),
            CdfKind::Holder { x0, gamma, k, .. } => {
                let (lo, hi) = self.support();
                Some(if u > lo && u < hi && u != *x0 {
                    k * gamma * (u - x0).abs().powf(gamma - 1.0)
                } else {
                    0.0
                })
            }
            CdfKind::Discrete { .. } | CdfKind::PointMass { .. } => None,
        }
    }

    /// Generalized inverse `inf{u : F(u) >= p}` for `p ∈ [0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        match &self.kind {
            CdfKind::Uniform01 => p,
            CdfKind::Gamma { shape, rate } => {
                if p <= 0.0 {
                    return 0.0;
                }
                let mean = shape / rate;
                let mut hi = mean.max(1.0 / rate);
                while gamma_p(*shape, rate * hi) < p && hi < 1e300 {
                    hi *= 2.0;
                }
                bisect_increasing(|u| gamma_p(*shape, rate * u), p, 0.0, hi)
            }
            CdfKind::Flat { pieces } => {
                let mut cum = 0.0;
                let mut last = 0.0;
                for piece in pieces.iter().filter(|q| q.density > 0.0) {
                    let mass = piece.density * (piece.b - piece.a);
                    if p <= cum + mass {
                        return piece.a + ((p - cum) / piece.density).max(0.0);
                    }
                    cum += mass;
                    last = piece.b;
                }
                last
            }
            CdfKind::Holder { x0, gamma, k, base } => {
                let d = p - base;
                x0 + d.signum() * (d.abs() / k).powf(1.0 / gamma)
            }
            CdfKind::Discrete { x0, gamma } => discrete_quantile(*x0, *gamma, p),
            CdfKind::PointMass { at } => *at,
        }
    }

    /// `∫_{[0, x]} y^p dF(y)`; `x = ∞` gives the full moment.
    pub fn partial_moment(&self, p: f64, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        match &self.kind {
            CdfKind::Uniform01 => Ok(x.min(1.0).powf(p + 1.0) / (p + 1.0)),
            CdfKind::Gamma { shape, rate } => {
                if shape + p <= 0.0 {
                    return Err(Error::DivergentMoment(format!("gamma shape {shape} with power {p}")));
                }
                let full = (ln_gamma(shape + p) - ln_gamma(*shape) - p * rate.ln()).exp();
                Ok(if x.is_infinite() { full } else { full * gamma_p(shape + p, rate * x) })
            }
            CdfKind::Flat { pieces } => Ok(pieces
                .iter()
                .filter(|q| q.a < x)
                .map(|q| q.density * (x.min(q.b).powf(p + 1.0) - q.a.powf(p + 1.0)) / (p + 1.0))
                .sum()),
            CdfKind::Holder { base, .. } => {
                // ∫ y^p dF = ∫_0^{F(x)} Q(u)^p du, smooth in u away from `base`.
                let top = self.cdf(x);
                let f = |u: f64| self.quantile(u).powf(p);
                let mut pts = vec![0.0, top];
                if *base > 0.0 && *base < top {
                    pts.push(*base);
                }
                quadrature::with_breaks(&f, &pts, tol())
            }
            CdfKind::Discrete { x0, gamma } => {
                let (l, r) = discrete_ranges_le(*x0, *gamma, x);
                let (x0, g) = (*x0, *gamma);
                let left = index_sum(|s| s.powi(-2) * (x0 - s.powf(-1.0 / g)).max(0.0).powf(p), l, &[])?;
                let right = index_sum(|s| s.powi(-2) * (x0 + s.powf(-1.0 / g)).powf(p), r, &[])?;
                Ok(DISCRETE_W * (left + right))
            }
            CdfKind::PointMass { at } => Ok(if x >= *at { at.powf(p) } else { 0.0 }),
        }
    }

    pub fn moment(&self, p: f64) -> Result<f64> {
        let v = self.partial_moment(p, f64::INFINITY)?;
        if !v.is_finite() {
            return Err(Error::DivergentMoment(format!("∫ y^{p} dF is not finite")));
        }
        Ok(v)
    }

    /// Expected sphere radius `m0 = ∫ √y dF(y)`.
    pub fn m0(&self) -> Result<f64> {
        self.moment(0.5)
    }

    /// Size-biased cdf `F^b(x) = ∫_0^x √y dF(y) / m0`.
    pub fn biased_cdf(&self, x: f64, m0: f64) -> Result<f64> {
        Ok((self.partial_moment(0.5, x)? / m0).min(1.0))
    }

    /// `∫_0^x F(y) dy`.
    pub fn integrated_cdf(&self, x: f64) -> Result<f64> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        Ok(x * self.cdf(x) - self.partial_moment(1.0, x)?)
    }

    /// `H_x(δ) = ∫_0^1 (F(x + uδ) - F(x)) du`.
    pub fn h_smooth(&self, x: f64, delta: f64) -> Result<f64> {
        if delta == 0.0 || !delta.is_finite() {
            return Err(Error::Domain(format!("smoothness increment must be nonzero, got {delta}")));
        }
        let fx = self.cdf(x);
        match &self.kind {
            CdfKind::Discrete { x0, gamma } => {
                // Atoms in the window contribute linearly in their position.
                let (lo, hi) = if delta > 0.0 { (x, x + delta) } else { (x + delta, x) };
                let (l, r) = discrete_ranges_in(*x0, *gamma, lo, hi);
                let s1 = 2.0 + 1.0 / gamma;
                let mass = range_zeta(2.0, l) + range_zeta(2.0, r);
                let first = x0 * mass - range_zeta(s1, l) + range_zeta(s1, r);
                let h = if delta > 0.0 {
                    ((x + delta) * mass - first) / delta
                } else {
                    -(first - (x + delta) * mass) / delta.abs()
                };
                Ok(DISCRETE_W * h)
            }
            CdfKind::PointMass { at } => Ok(if delta > 0.0 {
                if x < *at && *at <= x + delta {
                    (x + delta - at) / delta
                } else {
                    0.0
                }
            } else if x + delta < *at && *at <= x {
                -(at - (x + delta)) / delta.abs()
            } else {
                0.0
            }),
            _ => {
                let f = |u: f64| self.cdf(x + u * delta) - fx;
                let mut pts = vec![0.0, 1.0];
                for k in self.kinks() {
                    let u = (k - x) / delta;
                    if u > 0.0 && u < 1.0 {
                        pts.push(u);
                    }
                }
                quadrature::with_breaks(&f, &pts, tol())
            }
        }
    }

    /// Points where the continuous cdf is not smooth.
    fn kinks(&self) -> Vec<f64> {
        match &self.kind {
            CdfKind::Uniform01 => vec![0.0, 1.0],
            CdfKind::Gamma { .. } => vec![0.0],
            CdfKind::Flat { pieces } => pieces.iter().flat_map(|p| [p.a, p.b]).collect(),
            CdfKind::Holder { x0, .. } => {
                let (lo, hi) = self.support();
                vec![lo, *x0, hi]
            }
            CdfKind::Discrete { .. } | CdfKind::PointMass { .. } => vec![],
        }
    }

    /// The largest interval around `x` on which `F` is constant, if any.
    pub fn flat_interval(&self, x: f64) -> Option<(f64, f64)> {
        let (lo, hi) = self.support();
        match &self.kind {
            CdfKind::Flat { pieces } => {
                let active: Vec<&FlatPiece> = pieces.iter().filter(|p| p.density > 0.0).collect();
                if active.iter().any(|p| x > p.a && x < p.b) {
                    return None;
                }
                let left = active.iter().filter(|p| p.b <= x).map(|p| p.b).fold(0.0, f64::max);
                let right = active
                    .iter()
                    .filter(|p| p.a >= x)
                    .map(|p| p.a)
                    .fold(f64::INFINITY, f64::min);
                if right > left {
                    Some((left, right))
                } else {
                    None
                }
            }
            CdfKind::Uniform01 | CdfKind::Holder { .. } | CdfKind::PointMass { .. } => {
                if x < lo {
                    Some((0.0, lo))
                } else if x > hi {
                    Some((hi, f64::INFINITY))
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    /// Canonical model-spec string.
    pub fn spec(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for CdfModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            CdfKind::Uniform01 => write!(f, "uniform01"),
            CdfKind::Gamma { shape, rate } => write!(f, "gamma:{shape}:{rate}"),
            CdfKind::Flat { pieces } => {
                let body: Vec<String> = pieces.iter().map(|p| format!("{},{},{}", p.a, p.b, p.density)).collect();
                write!(f, "flat:{}", body.join(";"))
            }
            CdfKind::Holder { x0, gamma, k, base } => write!(f, "holder:x0={x0},gamma={gamma},K={k},base={base}"),
            CdfKind::Discrete { x0, gamma } => write!(f, "discrete:x0={x0},gamma={gamma}"),
            CdfKind::PointMass { at } => write!(f, "point:{at}"),
        }
    }
}

fn parse_num(spec: &str, s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::ModelSpec {
        spec: spec.to_string(),
        reason: format!("`{s}` is not a number"),
    })
}

fn parse_keyed(spec: &str, body: &str, keys: &[&str]) -> Result<Vec<f64>> {
    let mut out = vec![None; keys.len()];
    for part in body.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::ModelSpec {
            spec: spec.to_string(),
            reason: format!("expected key=value, got `{part}`"),
        })?;
        let idx = keys.iter().position(|key| *key == k.trim()).ok_or_else(|| Error::ModelSpec {
            spec: spec.to_string(),
            reason: format!("unknown key `{}`", k.trim()),
        })?;
        out[idx] = Some(parse_num(spec, v)?);
    }
    keys.iter()
        .zip(out)
        .map(|(k, v)| {
            v.ok_or_else(|| Error::ModelSpec { spec: spec.to_string(), reason: format!("missing `{k}`") })
        })
        .collect()
}

impl FromStr for CdfModel {
    type Err = Error;

    /// Grammar: `uniform01`, `gamma:<shape>:<rate>` (or `gamma:<shape>:scale=<s>`),
    /// `flat:default`, `flat:<a>,<b>,<d>;...`, `holder:x0=..,gamma=..,K=..,base=..`,
    /// `discrete:x0=..,gamma=..`, `point:<a>`.
    fn from_str(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        let err = |reason: &str| Error::ModelSpec { spec: spec.to_string(), reason: reason.to_string() };
        let (head, body) = spec.split_once(':').unwrap_or((spec, ""));
        let model = match head {
            "uniform01" if body.is_empty() => CdfModel::uniform01(),
            "gamma" => {
                let (shape, param) = body.split_once(':').ok_or_else(|| err("expected gamma:<shape>:<rate>"))?;
                let shape = parse_num(spec, shape)?;
                let rate = match param.trim().strip_prefix("scale=") {
                    Some(s) => 1.0 / parse_num(spec, s)?,
                    None => parse_num(spec, param.trim().strip_prefix("rate=").unwrap_or(param))?,
                };
                CdfModel::gamma(shape, rate)?
            }
            "flat" if body == "default" => CdfModel::flat_default(),
            "flat" => {
                let mut pieces = Vec::new();
                for part in body.split(';').filter(|p| !p.trim().is_empty()) {
                    let nums: Vec<&str> = part.split(',').collect();
                    if nums.len() != 3 {
                        return Err(err("flat pieces are `a,b,density`"));
                    }
                    pieces.push(FlatPiece {
                        a: parse_num(spec, nums[0])?,
                        b: parse_num(spec, nums[1])?,
                        density: parse_num(spec, nums[2])?,
                    });
                }
                CdfModel::flat(pieces)?
            }
            "holder" => {
                let v = parse_keyed(spec, body, &["x0", "gamma", "K", "base"])?;
                CdfModel::holder(v[0], v[1], v[2], v[3])?
            }
            "discrete" => {
                let v = parse_keyed(spec, body, &["x0", "gamma"])?;
                CdfModel::discrete(v[0], v[1])?
            }
            "point" => CdfModel::point_mass(parse_num(spec, body)?)?,
            _ => return Err(err("unknown model kind")),
        };
        Ok(model)
    }
}

/// Smallest `x ∈ [lo, hi]` with `f(x) >= target` for nondecreasing `f`, to 1e-12
/// (relative for large `x`).
pub(crate) fn bisect_increasing<F: Fn(f64) -> f64>(f: F, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-12 * hi.abs().max(1.0) || mid <= lo || mid >= hi {
            break;
        }
        if f(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// ---- discrete example helpers ------------------------------------------

/// Inclusive index range `[lo, hi]`, `hi` possibly infinite; empty if `lo > hi`.
type IndexRange = (f64, f64);
const EMPTY: IndexRange = (1.0, 0.0);

fn t_of(gamma: f64, i: f64) -> f64 {
    i.powf(-1.0 / gamma)
}

/// `#{i >= 1 : t_i >= c}`.
fn n_ge(gamma: f64, c: f64) -> f64 {
    if c <= 0.0 {
        return f64::INFINITY;
    }
    if c > 1.0 {
        return 0.0;
    }
    let guess = c.powf(-gamma).floor();
    if guess >= INDEX_CAP {
        return f64::INFINITY;
    }
    let mut m = guess;
    while m >= 1.0 && t_of(gamma, m) < c {
        m -= 1.0;
    }
    while t_of(gamma, m + 1.0) >= c {
        m += 1.0;
    }
    m
}

/// `#{i >= 1 : t_i > c}`.
fn n_gt(gamma: f64, c: f64) -> f64 {
    if c <= 0.0 {
        return f64::INFINITY;
    }
    if c >= 1.0 {
        return 0.0;
    }
    let guess = c.powf(-gamma).floor();
    if guess >= INDEX_CAP {
        return f64::INFINITY;
    }
    let mut m = guess;
    while m >= 1.0 && t_of(gamma, m) <= c {
        m -= 1.0;
    }
    while t_of(gamma, m + 1.0) > c {
        m += 1.0;
    }
    m
}

/// Index ranges of the left and right atoms lying in `[0, x]`.
fn discrete_ranges_le(x0: f64, gamma: f64, x: f64) -> (IndexRange, IndexRange) {
    let left = (1.0, n_ge(gamma, x0 - x));
    let right = if x > x0 { (n_gt(gamma, x - x0) + 1.0, f64::INFINITY) } else { EMPTY };
    (left, right)
}

/// Index ranges of the left and right atoms lying in `(a, b]`.
fn discrete_ranges_in(x0: f64, gamma: f64, a: f64, b: f64) -> (IndexRange, IndexRange) {
    // left atoms: t_i ∈ [x0 - b, x0 - a)
    let left = if a < x0 { (n_ge(gamma, x0 - a) + 1.0, n_ge(gamma, x0 - b)) } else { EMPTY };
    // right atoms: t_i ∈ (a - x0, b - x0]
    let right = if b > x0 { (n_gt(gamma, b - x0) + 1.0, n_gt(gamma, a - x0)) } else { EMPTY };
    (left, right)
}

fn range_zeta(s: f64, r: IndexRange) -> f64 {
    let (lo, hi) = r;
    if hi < lo || lo >= INDEX_CAP {
        0.0
    } else {
        zeta_range(s, lo, hi)
    }
}

/// `Σ_{i ∈ range} f(i)`: the first and last few thousand terms directly, the
/// middle by the midpoint rule turned into an integral over `s`.
fn index_sum<F: Fn(f64) -> f64>(f: F, r: IndexRange, breaks: &[f64]) -> Result<f64> {
    const DIRECT: f64 = 4000.0;
    let (lo, hi) = r;
    if hi < lo || lo >= INDEX_CAP {
        return Ok(0.0);
    }
    if hi - lo < 2.0 * DIRECT {
        let mut total = 0.0;
        let mut i = hi;
        while i >= lo {
            total += f(i);
            i -= 1.0;
        }
        return Ok(total);
    }
    let head_end = lo + DIRECT - 1.0;
    let mut total = 0.0;
    let mut i = head_end;
    while i >= lo {
        total += f(i);
        i -= 1.0;
    }
    let (mid_hi, tail) = if hi.is_finite() {
        let mut t = 0.0;
        let mut i = hi;
        while i > hi - DIRECT {
            t += f(i);
            i -= 1.0;
        }
        (hi - DIRECT + 0.5, t)
    } else {
        (f64::INFINITY, 0.0)
    };
    // Integral over s ∈ [a, mid_hi] with s = a / v, which maps s^{-2} decay to
    // a bounded integrand on v ∈ (a / mid_hi, 1].
    let a = head_end + 0.5;
    let g = |v: f64| if v <= 0.0 { 0.0 } else { f(a / v) * a / (v * v) };
    let v_lo = if mid_hi.is_finite() { a / mid_hi } else { 0.0 };
    let mut pts = vec![v_lo, 1.0];
    for &s in breaks {
        if s > a && s < mid_hi {
            pts.push(a / s);
        }
    }
    let middle = quadrature::with_breaks(&g, &pts, tol())?;
    Ok(total + middle + tail)
}

fn discrete_quantile(x0: f64, gamma: f64, p: f64) -> f64 {
    let half = 0.5;
    let zeta2 = PI * PI / 6.0;
    if p <= 0.0 {
        return x0 - 1.0;
    }
    if p <= half {
        // Smallest i with W (ζ(2) - tail(i + 1)) >= p.
        let need = p / DISCRETE_W;
        let ok = |i: f64| zeta2 - crate::series::zeta_tail(2.0, i + 1.0) >= need * (1.0 - 1e-15);
        let i = search_first(ok);
        x0 - t_of(gamma, i)
    } else {
        // Smallest atom x0 + t_i with 1/2 + W tail(i) >= p: largest such i.
        let need = (p - half) / DISCRETE_W;
        let fails = |i: f64| crate::series::zeta_tail(2.0, i) < need * (1.0 - 1e-15);
        let first_fail = search_first(fails);
        x0 + t_of(gamma, (first_fail - 1.0).max(1.0))
    }
}

/// Smallest integer `i >= 1` with `pred(i)` for a monotone predicate.
fn search_first<P: Fn(f64) -> bool>(pred: P) -> f64 {
    let mut hi = 1.0;
    while !pred(hi) {
        hi *= 2.0;
        if hi > INDEX_CAP {
            return INDEX_CAP;
        }
    }
    let mut lo = (hi / 2.0).floor().max(0.0);
    // invariant: pred(hi), !pred(lo) or lo == 0
    while hi - lo > 1.0 {
        let mid = ((lo + hi) / 2.0).floor();
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// ---- observation model ----------------------------------------------------

/// `F` together with its cached `m0`, giving access to `g`, `V` and `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    model: CdfModel,
    m0: f64,
}

impl ObservationModel {
    pub fn new(model: CdfModel) -> Result<Self> {
        let m0 = model.m0()?;
        if !(m0 > 0.0 && m0.is_finite()) {
            return Err(Error::InvalidModel(format!("m0 = {m0} must be positive and finite")));
        }
        model.moment(1.5)?;
        Ok(ObservationModel { model, m0 })
    }

    pub fn model(&self) -> &CdfModel {
        &self.model
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    /// Observation density `g(z) = (1/2m0) ∫_{[z,∞)} dF(x) / √(x - z)`.
    ///
    /// An atom sitting exactly at `z` makes the value `+∞`.
    pub fn g(&self, z: f64) -> Result<f64> {
        if !(z >= 0.0) {
            return Err(Error::Domain(format!("g is defined for z >= 0, got {z}")));
        }
        let m0 = self.m0;
        let value = match self.model.kind() {
            CdfKind::Uniform01 => 1.5 * (1.0 - z).max(0.0).sqrt(),
            CdfKind::Flat { pieces } => {
                pieces
                    .iter()
                    .filter(|p| p.b > z)
                    .map(|p| 2.0 * p.density * ((p.b - z).sqrt() - (p.a.max(z) - z).sqrt()))
                    .sum::<f64>()
                    / (2.0 * m0)
            }
            CdfKind::PointMass { at } => {
                if z > *at {
                    0.0
                } else {
                    1.0 / (2.0 * m0 * (at - z).sqrt())
                }
            }
            CdfKind::Gamma { .. } => {
                // x = z + t² removes the 1/√(x - z) singularity.
                let f = |t: f64| self.model.density(z + t * t).unwrap_or(0.0);
                quadrature::to_infinity(&f, 0.0, tol())? / m0
            }
            CdfKind::Holder { x0, gamma, k, base } => {
                let (_, hi) = self.model.support();
                if z >= hi {
                    0.0
                } else if z == *x0 {
                    // ∫_base^1 (K / (u - base))^{1/(2γ)} du
                    let e = 1.0 - 0.5 / gamma;
                    k.powf(0.5 / gamma) * (1.0 - base).powf(e) / e / (2.0 * m0)
                } else {
                    // Over w = |F(x) - base| the integrand is smooth apart from
                    // the square-root endpoint w_z where x = z. Near w_z the gap
                    // d = x - z is formed from v = |w - w_z| via expm1/ln_1p so
                    // it carries no cancellation.
                    let delta = x0 - z;
                    let ad = delta.abs();
                    let wz = k * ad.powf(*gamma);
                    let inv = 1.0 / gamma;
                    let integrate = |f: &dyn Fn(f64) -> f64, hi: f64| -> Result<f64> {
                        if hi <= 0.0 {
                            return Ok(0.0);
                        }
                        let mut pts = vec![0.0, hi];
                        for m in [0.01, 0.1, 1.0, 10.0] {
                            pts.push((m * wz).min(hi));
                        }
                        quadrature::with_breaks(f, &pts, tol())
                    };
                    let inv_sqrt = |d: f64| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 };
                    if delta > 0.0 {
                        // right of x0: d = δ + (w/K)^{1/γ}; left: w = w_z - v
                        let right = integrate(&|w: f64| inv_sqrt(delta + (w / k).powf(inv)), 1.0 - base)?;
                        let left = if wz <= *base {
                            integrate(&|v: f64| inv_sqrt(-ad * ((-v / wz).ln_1p() * inv).exp_m1()), wz)?
                        } else {
                            // the whole left branch lies above z
                            integrate(&|w: f64| inv_sqrt(delta - (w / k).powf(inv)), *base)?
                        };
                        (left + right) / (2.0 * m0)
                    } else {
                        // right of x0 only, w = w_z + v
                        let f = |v: f64| inv_sqrt(ad * ((v / wz).ln_1p() * inv).exp_m1());
                        integrate(&f, 1.0 - base - wz)? / (2.0 * m0)
                    }
                }
            }
            CdfKind::Discrete { x0, gamma } => {
                let (x0, g) = (*x0, *gamma);
                // atoms x_j >= z: right t_i >= z - x0, left t_i <= x0 - z
                let right_range = (1.0, n_ge(g, z - x0));
                let left_range = if z <= x0 { (n_gt(g, x0 - z) + 1.0, f64::INFINITY) } else { EMPTY };
                let right = if z == x0 {
                    // the terms reduce to s^{-(2 - 1/(2γ))}, too slowly decaying for the midpoint integral
                    range_zeta(2.0 - 0.5 / g, right_range)
                } else {
                    index_sum(|s| s.powi(-2) / (x0 + t_of(g, s) - z).sqrt(), right_range, &[])?
                };
                let left = index_sum(|s| s.powi(-2) / (x0 - t_of(g, s) - z).sqrt(), left_range, &[])?;
                DISCRETE_W * (left + right) / (2.0 * m0)
            }
        };
        Ok(value)
    }

    /// `V(x) = π (1 - F(x)) / (2 m0)`.
    pub fn v_exact(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!("V is defined for x >= 0, got {x}")));
        }
        Ok(PI * (1.0 - self.model.cdf(x)) / (2.0 * self.m0))
    }

    /// `U(x) = (π / 2 m0) ∫_0^x (1 - F(y)) dy`.
    pub fn u_exact(&self, x: f64) -> Result<f64> {
        if !(x >= 0.0) {
            return Err(Error::Domain(format!("U is defined for x >= 0, got {x}")));
        }
        let integral = x - self.model.integrated_cdf(x)?;
        Ok(PI * integral / (2.0 * self.m0))
    }

    /// Cdf of one observation, `G(z) = (1/m0) E_F[√X - √((X - z)₊)]`.
    pub fn obs_cdf(&self, z: f64) -> Result<f64> {
        if z <= 0.0 {
            return Ok(0.0);
        }
        let m0 = self.m0;
        let psi = |x: f64| {
            if x <= 0.0 {
                0.0
            } else if x <= z {
                x.sqrt()
            } else {
                z / (x.sqrt() + (x - z).sqrt())
            }
        };
        let value = match self.model.kind() {
            CdfKind::Uniform01 => 1.0 - (1.0 - z).max(0.0).powf(1.5),
            CdfKind::PointMass { at } => psi(*at) / m0,
            CdfKind::Discrete { x0, gamma } => {
                let (x0, g) = (*x0, *gamma);
                let kink = |sign: f64| {
                    let t = sign * (z - x0);
                    if t > 0.0 && t < 1.0 {
                        vec![t.powf(-g)]
                    } else {
                        vec![]
                    }
                };
                let all = (1.0, f64::INFINITY);
                let right = index_sum(|s| s.powi(-2) * psi(x0 + t_of(g, s)), all, &kink(1.0))?;
                let left = index_sum(|s| s.powi(-2) * psi(x0 - t_of(g, s)), all, &kink(-1.0))?;
                DISCRETE_W * (left + right) / m0
            }
            _ => {
                let (lo, _) = self.model.support();
                let upper = self.model.effective_upper();
                let f = |x: f64| psi(x) * self.model.density(x).unwrap_or(0.0);
                let mut pts = self.model.kinks();
                pts.retain(|p| p.is_finite());
                pts.extend([lo, upper]);
                if z > lo && z < upper {
                    pts.push(z);
                }
                quadrature::with_breaks(&f, &pts, tol())? / m0
            }
        };
        Ok(value.clamp(0.0, 1.0))
    }

    /// `E Z = (2 / 3 m0) ∫ y^{3/2} dF(y)`.
    pub fn mean_z(&self) -> Result<f64> {
        Ok(2.0 * self.model.moment(1.5)? / (3.0 * self.m0))
    }
}
