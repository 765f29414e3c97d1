//! Forward simulation of the observation mechanism: size-biased sphere
//! selection followed by a uniform planar section.

use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{bisect_increasing, gamma_p, CdfKind, CdfModel, ObservationModel};
use crate::quadrature::{self, Tolerance};
use crate::rng::RngStream;

/// Where a sample came from.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Simulated { model: String },
    Ingested { file: String },
    Literal,
}

/// Observed squared circle radii, sorted ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    values: Vec<f64>,
    pub seed: Option<u64>,
    pub provenance: Provenance,
}

impl SampleSet {
    pub fn new(mut values: Vec<f64>, seed: Option<u64>, provenance: Provenance) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("observations must be finite and nonnegative, got {bad}")));
        }
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(SampleSet { values, seed, provenance })
    }

    /// A literal sample, e.g. for tests.
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        SampleSet::new(values, None, Provenance::Literal)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max(&self) -> f64 {
        *self.values.last().expect("sample is nonempty")
    }
}

const TABLE_KNOTS: usize = 1 << 12;

#[derive(Debug, Clone)]
enum Biased {
    Uniform,
    Point(f64),
    Flat { pieces: Vec<(f64, f64, f64, f64)>, m0: f64 },
    /// Tabulated closed-form `F^b` refined by bisection (gamma).
    GammaTable { shape: f64, rate: f64, xs: Vec<f64>, ps: Vec<f64> },
    /// Draw from `F`, accept with probability `√X / √x_max`.
    Rejection { sqrt_max: f64 },
}

/// Draws spheres, size-biased spheres and observations for one model.
#[derive(Debug, Clone)]
pub struct Sampler {
    model: CdfModel,
    biased: Biased,
}

impl Sampler {
    pub fn new(model: &CdfModel) -> Result<Self> {
        let m0 = model.m0()?;
        let biased = match model.kind() {
            CdfKind::Uniform01 => Biased::Uniform,
            CdfKind::PointMass { at } => Biased::Point(*at),
            CdfKind::Flat { pieces } => {
                // (a, density, cumulative F^b at a, F^b mass of the piece)
                let mut cum = 0.0;
                let mut out = Vec::new();
                for p in pieces.iter().filter(|p| p.density > 0.0) {
                    let mass = p.density * (2.0 / 3.0) * (p.b.powf(1.5) - p.a.powf(1.5)) / m0;
                    out.push((p.a, p.density, cum, mass));
                    cum += mass;
                }
                Biased::Flat { pieces: out, m0 }
            }
            CdfKind::Gamma { shape, rate } => {
                let a = shape + 0.5;
                let mut hi = (a / rate).max(1.0);
                while gamma_p(a, rate * hi) < 1.0 - 1e-15 && hi < 1e300 {
                    hi *= 2.0;
                }
                let xs: Vec<f64> = (0..TABLE_KNOTS).map(|i| hi * i as f64 / (TABLE_KNOTS - 1) as f64).collect();
                let ps = xs.iter().map(|&x| gamma_p(a, rate * x)).collect();
                Biased::GammaTable { shape: *shape, rate: *rate, xs, ps }
            }
            CdfKind::Holder { .. } | CdfKind::Discrete { .. } => {
                Biased::Rejection { sqrt_max: model.support().1.sqrt() }
            }
        };
        Ok(Sampler { model: model.clone(), biased })
    }

    pub fn model(&self) -> &CdfModel {
        &self.model
    }

    /// Squared radius `X ~ F` by inversion.
    pub fn sphere<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.model.quantile(rng.random::<f64>())
    }

    /// Size-biased squared radius `X^b ~ F^b`, `dF^b ∝ √x dF`.
    pub fn biased<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.biased {
            Biased::Uniform => rng.random::<f64>().powf(2.0 / 3.0),
            Biased::Point(a) => *a,
            Biased::Flat { pieces, m0 } => {
                let u: f64 = rng.random();
                let (a, d, cum, _) = pieces
                    .iter()
                    .copied()
                    .find(|&(_, _, cum, mass)| u < cum + mass)
                    .unwrap_or(*pieces.last().expect("flat model has a positive piece"));
                // F^b(y) = cum + (2d / 3m0)(y^{3/2} - a^{3/2}) on the piece
                (a.powf(1.5) + (u - cum).max(0.0) * 1.5 * m0 / d).powf(2.0 / 3.0)
            }
            Biased::GammaTable { shape, rate, xs, ps } => {
                let u: f64 = rng.random();
                let i = ps.partition_point(|&p| p < u).clamp(1, xs.len() - 1);
                let a = shape + 0.5;
                bisect_increasing(|x| gamma_p(a, rate * x), u, xs[i - 1], xs[i])
            }
            Biased::Rejection { sqrt_max } => loop {
                let x = self.sphere(rng);
                let v: f64 = rng.random();
                if v * sqrt_max < x.sqrt() {
                    return x;
                }
            },
        }
    }

    /// Observed squared circle radius `Z = (1 - U²) X^b`.
    pub fn observation<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let xb = self.biased(rng);
        let u: f64 = rng.random();
        (1.0 - u) * (1.0 + u) * xb
    }

    /// `n` sorted observations from one stream.
    pub fn dataset(&self, n: usize, stream: RngStream) -> Result<SampleSet> {
        if n == 0 {
            return Err(Error::Domain("sample size must be at least 1".into()));
        }
        let mut rng = stream.rng();
        let values = (0..n).map(|_| self.observation(&mut rng)).collect();
        SampleSet::new(values, Some(stream.seed), Provenance::Simulated { model: self.model.spec() })
    }
}

pub fn sample_sphere(model: &CdfModel, stream: RngStream) -> Result<f64> {
    Ok(Sampler::new(model)?.sphere(&mut stream.rng()))
}

pub fn sample_biased(model: &CdfModel, stream: RngStream) -> Result<f64> {
    Ok(Sampler::new(model)?.biased(&mut stream.rng()))
}

pub fn sample_observation(model: &CdfModel, stream: RngStream) -> Result<f64> {
    Ok(Sampler::new(model)?.observation(&mut stream.rng()))
}

/// `n` sorted observations, deterministic in `seed`.
pub fn sample_dataset(model: &CdfModel, n: usize, seed: u64) -> Result<SampleSet> {
    Sampler::new(model)?.dataset(n, RngStream::new(seed, 0))
}

/// Inverse-cdf table for the observation density `g` itself, an independent
/// route used to cross-check [`Sampler::observation`].
#[derive(Debug, Clone)]
pub struct InverseTable {
    zs: Vec<f64>,
    cdf: Vec<f64>,
}

impl InverseTable {
    pub fn new(obs: &ObservationModel) -> Result<Self> {
        let model = obs.model();
        let upper = model.effective_upper();
        // Knots cluster at both ends, where g may have square-root behaviour.
        let zs: Vec<f64> = (0..=TABLE_KNOTS)
            .map(|k| {
                let u = k as f64 / TABLE_KNOTS as f64;
                upper * u * u * (3.0 - 2.0 * u)
            })
            .collect();
        let mut cdf = Vec::with_capacity(zs.len());
        if model.is_atomic() {
            for &z in &zs {
                cdf.push(obs.obs_cdf(z)?);
            }
        } else {
            let g = |z: f64| obs.g(z).unwrap_or(f64::NAN);
            let tol = Tolerance { rel: 1e-9, abs: 1e-14, max_panels: 2000 };
            let mut acc = 0.0;
            cdf.push(0.0);
            for w in zs.windows(2) {
                acc += quadrature::smooth_ends(&g, w[0], w[1], tol)
                    .map_err(|e| Error::Table(format!("integrating g on [{}, {}]: {e}", w[0], w[1])))?;
                cdf.push(acc);
            }
        }
        let total = *cdf.last().expect("table is nonempty");
        if !((total - 1.0).abs() < 1e-3) {
            return Err(Error::Table(format!("g integrates to {total}, not 1")));
        }
        let mut prev = 0.0;
        for c in cdf.iter_mut() {
            *c = (*c / total).max(prev);
            prev = *c;
        }
        Ok(InverseTable { zs, cdf })
    }

    pub fn knots(&self) -> (&[f64], &[f64]) {
        (&self.zs, &self.cdf)
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let i = self.cdf.partition_point(|&c| c < p).clamp(1, self.zs.len() - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let (z0, z1) = (self.zs[i - 1], self.zs[i]);
        if c1 <= c0 {
            return z1;
        }
        z0 + (z1 - z0) * ((p - c0) / (c1 - c0)).clamp(0.0, 1.0)
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

pub fn sample_observation_inverse(obs: &ObservationModel, stream: RngStream) -> Result<f64> {
    Ok(InverseTable::new(obs)?.draw(&mut stream.rng()))
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
