//! Plug-in estimators `V_n`, `U_n` and the isotonic inverse estimator built
//! from the least concave majorant (LCM) of `U_n`.
//!
//! Between consecutive order statistics `U_n` is convex (its derivative `V_n`
//! increases there), so its LCM coincides with the upper concave hull of the
//! points `(0, 0)` and `(Z_(i), U_n(Z_(i)))`. Only the knot values are needed.

use crate::error::{Error, Result};
use crate::sampler::SampleSet;

/// `V_n(x) = (1/n) Σ_{Z_i > x} (Z_i - x)^{-1/2}`; `+∞` when `x` is an observation.
pub fn v_n(sample: &SampleSet, x: f64) -> f64 {
    let z = sample.values();
    let start = z.partition_point(|&v| v < x);
    if start < z.len() && z[start] == x {
        return f64::INFINITY;
    }
    let sum: f64 = z[start..].iter().rev().map(|&v| 1.0 / (v - x).sqrt()).sum();
    sum / z.len() as f64
}

/// `√z - √((z - x)₊)` without cancellation.
#[inline]
fn phi(z: f64, x: f64) -> f64 {
    if z <= x {
        z.sqrt()
    } else {
        x / (z.sqrt() + (z - x).sqrt())
    }
}

/// `U_n(x) = (2/n) Σ (√Z_i - √((Z_i - x)₊))`.
pub fn u_n(sample: &SampleSet, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let z = sample.values();
    let sum: f64 = z.iter().rev().map(|&v| phi(v, x)).sum();
    2.0 * sum / z.len() as f64
}

/// Piecewise-linear concave majorant: knots `0 = x_0 < … < x_m`, values at the
/// knots and the slope of each segment; the slope is 0 beyond `x_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcaveMajorant {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

/// Indices of the upper concave hull of points with strictly increasing `xs`.
pub fn upper_hull(xs: &[f64], ys: &[f64]) -> Vec<usize> {
    debug_assert_eq!(xs.len(), ys.len());
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let b = hull[hull.len() - 1];
            let a = hull[hull.len() - 2];
            // drop b when it lies on or below the chord from a to i
            let left = (ys[b] - ys[a]) * (xs[i] - xs[b]);
            let right = (ys[i] - ys[b]) * (xs[b] - xs[a]);
            if left <= right {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

impl ConcaveMajorant {
    /// LCM of the piecewise-linear interpolant through `(xs, ys)`, on `[xs[0], xs[last]]`.
    pub fn from_points(xs: &[f64], ys: &[f64]) -> Result<Self> {
        if xs.is_empty() || xs.len() != ys.len() {
            return Err(Error::Domain("hull needs matching, nonempty coordinates".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Domain("hull abscissae must be strictly increasing".into()));
        }
        let idx = upper_hull(xs, ys);
        let knots: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
        let values: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
        let slopes = knots
            .windows(2)
            .zip(values.windows(2))
            .map(|(k, v)| (v[1] - v[0]) / (k[1] - k[0]))
            .collect();
        Ok(ConcaveMajorant { knots, values, slopes })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    fn segment(&self, x: f64) -> usize {
        self.knots.partition_point(|&k| k <= x).saturating_sub(1)
    }

    /// Majorant value; constant beyond the last knot and before the first.
    pub fn value(&self, x: f64) -> f64 {
        if x <= self.knots[0] {
            return self.values[0];
        }
        let i = self.segment(x);
        if i >= self.slopes.len() {
            return *self.values.last().expect("nonempty");
        }
        self.values[i] + self.slopes[i] * (x - self.knots[i])
    }

    /// Right derivative; the first slope left of the first knot, 0 from the
    /// last knot on.
    pub fn v_hat(&self, x: f64) -> f64 {
        if self.slopes.is_empty() {
            return 0.0;
        }
        if x < self.knots[0] {
            return self.slopes[0];
        }
        let i = self.segment(x);
        self.slopes.get(i).copied().unwrap_or(0.0)
    }

    /// `F̂_n(x) = 1 - V̂_n(x) / V̂_n(0)`; 0 for `x < 0`.
    pub fn f_hat(&self, x: f64) -> Result<f64> {
        let v0 = self.v_hat(0.0);
        if !(v0 > 0.0) {
            return Err(Error::AllZero);
        }
        if x < 0.0 {
            return Ok(0.0);
        }
        Ok((1.0 - self.v_hat(x) / v0).clamp(0.0, 1.0))
    }
}

/// Below this many distinct knots `U_n` is evaluated by direct summation, so
/// hull vertices reproduce [`u_n`] bit for bit.
const DIRECT_LIMIT: usize = 2048;

/// Distinct knots of the sample and `U_n` at each of them.
pub fn u_n_at_knots(sample: &SampleSet) -> (Vec<f64>, Vec<f64>) {
    let z = sample.values();
    let mut knots: Vec<f64> = z.iter().copied().filter(|&v| v > 0.0).collect();
    knots.dedup();
    let values = if knots.len() <= DIRECT_LIMIT {
        knots.iter().map(|&x| u_n(sample, x)).collect()
    } else {
        let tree = SqrtTree::new(z);
        let n = z.len() as f64;
        knots.iter().map(|&x| 2.0 * tree.phi_sum(x) / n).collect()
    };
    (knots, values)
}

/// LCM of `U_n` on `[0, ∞)`.
pub fn lcm(sample: &SampleSet) -> Result<ConcaveMajorant> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let (knots, values) = u_n_at_knots(sample);
    let mut xs = Vec::with_capacity(knots.len() + 1);
    let mut ys = Vec::with_capacity(knots.len() + 1);
    xs.push(0.0);
    ys.push(0.0);
    xs.extend(knots);
    ys.extend(values);
    ConcaveMajorant::from_points(&xs, &ys)
}

pub fn v_hat(maj: &ConcaveMajorant, x: f64) -> f64 {
    maj.v_hat(x)
}

pub fn f_hat(sample: &SampleSet, x: f64) -> Result<f64> {
    lcm(sample)?.f_hat(x)
}

/// Naive plug-in `F_n(x) = 1 - V_n(x) / V_n(0)`; may leave `[0, 1]`.
pub fn f_naive(sample: &SampleSet, x: f64) -> Result<f64> {
    if sample.values()[0] == 0.0 {
        return Err(Error::NaiveUndefined("an observation equals 0, so V_n(0) is infinite".into()));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    let vx = v_n(sample, x);
    if vx.is_infinite() {
        return Err(Error::NaiveUndefined(format!("x = {x} coincides with an observation")));
    }
    Ok(1.0 - vx / v_n(sample, 0.0))
}

/// Smallest maximizer of `U_n(t) - a t` over a grid of spacing `resolution`
/// on `[0, max Z]` together with every knot. `+∞` when `a < 0`.
pub fn argmax_t(sample: &SampleSet, a: f64, resolution: f64) -> f64 {
    if a < 0.0 {
        return f64::INFINITY;
    }
    let top = sample.max();
    let mut cands: Vec<f64> = sample.values().to_vec();
    if resolution > 0.0 {
        let steps = (top / resolution).floor().min(1e6) as usize;
        cands.extend((0..=steps).map(|k| k as f64 * resolution));
    }
    cands.push(0.0);
    cands.sort_by(|p, q| p.partial_cmp(q).unwrap());
    cands.dedup();
    let mut best_t = 0.0;
    let mut best = f64::NEG_INFINITY;
    for t in cands {
        let v = u_n(sample, t) - a * t;
        if v > best {
            best = v;
            best_t = t;
        }
    }
    best_t
}

// ---- fast evaluation of Σ φ(Z_i, y) at many points -----------------------

const LEAF: usize = 32;
const ORDER: usize = 48;
/// Far-field test: node radius over distance to the query.
const THETA: f64 = 0.5;

struct Node {
    lo: usize,
    hi: usize,
    center: f64,
    radius: f64,
    /// `Σ ((z - center) / radius)^k`, k = 0..=ORDER.
    moments: Vec<f64>,
    children: Option<(usize, usize)>,
}

/// Binary tree over sorted points with scaled moments, evaluating
/// `Σ_i φ(z_i, y)` by direct sums near `y` and binomial series far from it.
struct SqrtTree<'a> {
    z: &'a [f64],
    prefix_sqrt: Vec<f64>,
    nodes: Vec<Node>,
    binom: [f64; ORDER + 1],
}

impl<'a> SqrtTree<'a> {
    fn new(z: &'a [f64]) -> Self {
        let mut prefix_sqrt = Vec::with_capacity(z.len() + 1);
        let mut acc = 0.0;
        prefix_sqrt.push(0.0);
        for &v in z {
            acc += v.sqrt();
            prefix_sqrt.push(acc);
        }
        let mut binom = [0.0; ORDER + 1];
        binom[0] = 1.0;
        for k in 1..=ORDER {
            binom[k] = binom[k - 1] * (0.5 - (k as f64 - 1.0)) / k as f64;
        }
        let mut tree = SqrtTree { z, prefix_sqrt, nodes: Vec::new(), binom };
        tree.build(0, z.len());
        tree
    }

    fn build(&mut self, lo: usize, hi: usize) -> usize {
        let (zmin, zmax) = (self.z[lo], self.z[hi - 1]);
        let center = 0.5 * (zmin + zmax);
        let radius = (0.5 * (zmax - zmin)).max(f64::MIN_POSITIVE);
        let id = self.nodes.len();
        self.nodes.push(Node { lo, hi, center, radius, moments: Vec::new(), children: None });
        let moments = if hi - lo <= LEAF {
            let mut m = vec![0.0; ORDER + 1];
            for &v in &self.z[lo..hi] {
                let e = (v - center) / radius;
                let mut p = 1.0;
                for mk in m.iter_mut() {
                    *mk += p;
                    p *= e;
                }
            }
            m
        } else {
            let mid = lo + (hi - lo) / 2;
            let l = self.build(lo, mid);
            let r = self.build(mid, hi);
            self.nodes[id].children = Some((l, r));
            let mut m = vec![0.0; ORDER + 1];
            for child in [l, r] {
                self.shift_into(child, center, radius, &mut m);
            }
            m
        };
        self.nodes[id].moments = moments;
        id
    }

    /// Adds a child's moments re-expressed about `(center, radius)`.
    fn shift_into(&self, child: usize, center: f64, radius: f64, out: &mut [f64]) {
        let node = &self.nodes[child];
        let s = node.radius / radius;
        let d = (node.center - center) / radius;
        // ((z - c)/R)^k = Σ_j C(k, j) (s e)^j d^{k-j}, e = (z - c_child)/r_child
        let mut scaled = [0.0; ORDER + 1];
        let mut sp = 1.0;
        for j in 0..=ORDER {
            scaled[j] = node.moments[j] * sp;
            sp *= s;
        }
        let mut dpow = [0.0; ORDER + 1];
        dpow[0] = 1.0;
        for k in 1..=ORDER {
            dpow[k] = dpow[k - 1] * d;
        }
        let mut row = [0.0; ORDER + 1];
        row[0] = 1.0;
        for k in 0..=ORDER {
            if k > 0 {
                for j in (1..=k).rev() {
                    row[j] += row[j - 1];
                }
            }
            let mut acc = 0.0;
            for j in 0..=k {
                acc += row[j] * scaled[j] * dpow[k - j];
            }
            out[k] += acc;
        }
    }

    /// `Σ_i φ(z_i, y)` with `φ(z, y) = √z - √((z - y)₊)`.
    fn phi_sum(&self, y: f64) -> f64 {
        let below = self.z.partition_point(|&v| v <= y);
        self.prefix_sqrt[below] + self.far(0, y, below)
    }

    /// Contribution of points with index `>= first` (all of them exceed `y`).
    fn far(&self, id: usize, y: f64, first: usize) -> f64 {
        let node = &self.nodes[id];
        if node.hi <= first {
            return 0.0;
        }
        if node.lo >= first {
            let dist = node.center - y;
            if node.radius <= THETA * dist {
                return self.expansion(node, y, dist);
            }
        }
        match node.children {
            Some((l, r)) => self.far(l, y, first) + self.far(r, y, first),
            None => {
                let start = node.lo.max(first);
                self.z[start..node.hi].iter().map(|&v| phi(v, y)).sum()
            }
        }
    }

    /// `Σ_k C(1/2, k) μ_k r^k (c^{1/2-k} - D^{1/2-k})`, `D = c - y`.
    fn expansion(&self, node: &Node, y: f64, dist: f64) -> f64 {
        let c = node.center;
        let r = node.radius;
        let m = &node.moments;
        // k = 0 term without cancellation
        let mut total = m[0] * y / (c.sqrt() + dist.sqrt());
        let rc = r / c;
        let rd = r / dist;
        let stable = y < 0.5 * c;
        let lambda = if stable { -(-y / c).ln_1p() } else { 0.0 };
        let (sc, sd) = (c.sqrt(), dist.sqrt());
        let mut pc = sc;
        let mut pd = sd;
        for k in 1..=ORDER {
            pc *= rc;
            pd *= rd;
            let diff = if stable {
                // c^{1/2}(r/c)^k (1 - (c/D)^{k-1/2})
                -pc * ((k as f64 - 0.5) * lambda).exp_m1()
            } else {
                pc - pd
            };
            let term = self.binom[k] * m[k] * diff;
            total += term;
            if pd * m[0] < 1e-17 * total.abs() {
                break;
            }
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::CdfModel;
    use crate::sampler::sample_dataset;
    use proptest::prelude::*;

    fn s(v: &[f64]) -> SampleSet {
        SampleSet::from_values(v.to_vec()).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn v_n_examples() {
        let x = s(&[1.0, 4.0]);
        assert!(close(v_n(&x, 0.0), 0.75, 1e-15));
        assert!(close(v_n(&x, 0.5), 0.974_368_023_098_971_9, 1e-14));
        assert_eq!(v_n(&x, 4.0), f64::INFINITY);
        assert_eq!(v_n(&x, 5.0), 0.0);
    }

    #[test]
    fn u_n_examples() {
        let x = s(&[1.0, 4.0]);
        assert_eq!(u_n(&x, 0.0), 0.0);
        assert!(close(u_n(&x, 1.0), 3.0 - 3f64.sqrt(), 1e-15));
        assert!(close(u_n(&x, 4.0), 3.0, 1e-15));
        assert!(close(u_n(&x, 9.0), 3.0, 1e-15));
    }

    #[test]
    fn lcm_examples() {
        let m = lcm(&s(&[1.0, 4.0])).unwrap();
        assert_eq!(m.knots(), &[0.0, 1.0, 4.0]);
        assert!(close(m.slopes()[0], 1.267_949_192_431_122_7, 1e-14));
        assert!(close(m.slopes()[1], 0.577_350_269_189_625_7, 1e-14));
        let pooled = lcm(&s(&[1.0, 1.21])).unwrap();
        assert_eq!(pooled.knots(), &[0.0, 1.21]);
        assert!(close(pooled.slopes()[0], 2.1 / 1.21, 1e-14));
        let single = lcm(&s(&[2.5])).unwrap();
        assert!(close(single.slopes()[0], 2.0 / 2.5f64.sqrt(), 1e-15));
        assert_eq!(single.v_hat(2.5), 0.0);
        assert!(lcm(&s(&[0.0, 0.0])).unwrap().f_hat(1.0).is_err());
    }

    #[test]
    fn lcm_matches_exhaustive_grid_majorant() {
        // On a 10³ grid the smallest concave majorant of U_n is at most the hull
        // and at least every grid value.
        for v in [vec![1.0, 4.0], vec![1.0, 1.21], vec![0.3, 0.31, 0.9, 2.0, 2.05]] {
            let sample = s(&v);
            let m = lcm(&sample).unwrap();
            let top = sample.max();
            for k in 0..=1000 {
                let t = top * 1.2 * k as f64 / 1000.0;
                assert!(m.value(t) >= u_n(&sample, t) - 1e-12);
            }
        }
    }

    #[test]
    fn v_hat_and_f_hat_examples() {
        let m = lcm(&s(&[1.0, 4.0])).unwrap();
        assert!(close(m.v_hat(0.0), 1.267_949_192_431_122_7, 1e-14));
        assert!(close(m.v_hat(1.0), 0.577_350_269_189_625_7, 1e-14));
        assert_eq!(m.v_hat(4.0), 0.0);
        assert_eq!(m.f_hat(0.0).unwrap(), 0.0);
        assert!(close(m.f_hat(2.0).unwrap(), 0.544_658_198_738_520_5, 1e-12));
        assert_eq!(m.f_hat(5.0).unwrap(), 1.0);
        assert_eq!(m.f_hat(-1.0).unwrap(), 0.0);
    }

    #[test]
    fn f_naive_examples() {
        let x = s(&[1.0, 4.0]);
        assert!(close(f_naive(&x, 0.5).unwrap(), -0.299_157_364_131_962_5, 1e-12));
        assert_eq!(f_naive(&x, 0.0).unwrap(), 0.0);
        assert_eq!(f_naive(&x, 5.0).unwrap(), 1.0);
        assert!(f_naive(&x, 1.0).is_err());
        assert!(f_naive(&s(&[0.0, 1.0]), 0.5).is_err());
    }

    #[test]
    fn argmax_examples() {
        let x = s(&[1.0, 4.0]);
        assert_eq!(argmax_t(&x, 2.0, 1e-3), 0.0);
        assert_eq!(argmax_t(&x, 0.0, 1e-3), 4.0);
        assert_eq!(argmax_t(&x, 1.0, 1e-3), 1.0);
    }

    #[test]
    fn tree_matches_direct_sums() {
        for spec in ["uniform01", "flat:default", "discrete:x0=1,gamma=0.75"] {
            let model: CdfModel = spec.parse().unwrap();
            let sample = sample_dataset(&model, 6000, 4).unwrap();
            let (knots, fast) = u_n_at_knots(&sample);
            let mut worst: f64 = 0.0;
            for (k, (&x, &u)) in knots.iter().zip(&fast).enumerate() {
                if k % 7 == 0 || k < 20 {
                    worst = worst.max((u - u_n(&sample, x)).abs());
                }
            }
            assert!(worst < 1e-13, "{spec}: {worst}");
        }
    }

    #[test]
    fn u_n_unbiased() {
        let model = CdfModel::uniform01();
        let obs = crate::models::ObservationModel::new(model.clone()).unwrap();
        let xs = [0.25, 0.5, 0.75];
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        let reps = 1000;
        let sampler = crate::sampler::Sampler::new(&model).unwrap();
        for r in 0..reps {
            let sample = sampler.dataset(1000, crate::rng::RngStream::new(77, r)).unwrap();
            for (j, &x) in xs.iter().enumerate() {
                let u = u_n(&sample, x);
                sums[j] += u;
                sq[j] += u * u;
            }
        }
        for (j, &x) in xs.iter().enumerate() {
            let mean = sums[j] / reps as f64;
            let var = sq[j] / reps as f64 - mean * mean;
            let se = (var / reps as f64).sqrt();
            let target = obs.u_exact(x).unwrap();
            assert!((mean - target).abs() < 3.0 * se, "x={x}: {mean} vs {target} (se {se})");
        }
    }

    fn random_sample(seed: u64, n: usize) -> SampleSet {
        let mut state = seed;
        let v = (0..n)
            .map(|_| {
                state = crate::rng::mix64(state);
                let u = (state >> 11) as f64 / (1u64 << 53) as f64;
                // a few exact ties exercise deduplication
                if state % 11 == 0 { 0.5 } else { 3.0 * u * u }
            })
            .collect();
        SampleSet::from_values(v).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn majorization_and_minimality(seed in any::<u64>(), n in 1usize..=50) {
            let sample = random_sample(seed, n);
            let m = lcm(&sample).unwrap();
            for (&k, &v) in m.knots().iter().zip(m.values()) {
                prop_assert_eq!(v, u_n(&sample, k));
            }
            let mut state = seed ^ 0xABCD;
            for _ in 0..1000 {
                state = crate::rng::mix64(state);
                let t = (state >> 11) as f64 / (1u64 << 53) as f64 * sample.max() * 1.1;
                prop_assert!(m.value(t) >= u_n(&sample, t) - 1e-12 * (1.0 + m.value(t)));
            }
            let slopes = m.slopes();
            prop_assert!(slopes.iter().all(|&s| s > 0.0));
            prop_assert!(slopes.windows(2).all(|w| w[1] < w[0]));
        }

        #[test]
        fn switch_relation(seed in any::<u64>(), n in 1usize..=50, a_frac in 0.0f64..1.2, t_frac in 0.0f64..1.1) {
            let sample = random_sample(seed, n);
            let m = lcm(&sample).unwrap();
            let a = a_frac * m.v_hat(0.0);
            let t = t_frac * sample.max();
            let tn = argmax_t(&sample, a, sample.max() / 200.0);
            prop_assert_eq!(tn <= t, m.v_hat(t) <= a);
        }

        #[test]
        fn estimators_monotone(seed in any::<u64>(), n in 1usize..=200) {
            let sample = random_sample(seed, n);
            let m = lcm(&sample).unwrap();
            let mut prev_v = f64::INFINITY;
            let mut prev_f = 0.0;
            for k in 0..=300 {
                let x = sample.max() * 1.05 * k as f64 / 300.0;
                let v = m.v_hat(x);
                let f = m.f_hat(x).unwrap();
                prop_assert!(v <= prev_v);
                prop_assert!(f >= prev_f && (0.0..=1.0).contains(&f));
                prev_v = v;
                prev_f = f;
            }
        }
    }
}
