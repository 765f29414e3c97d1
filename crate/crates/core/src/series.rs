//! Tail sums of `i^{-s}`, used by the discrete example model.

/// `Σ_{i ≥ m} i^{-s}` for integer-valued `m ≥ 1` and `s > 1`.
///
/// Small indices are summed directly; the remainder uses Euler–Maclaurin with
/// three Bernoulli corrections, which is accurate to round-off once the
/// starting index is at least 50.
pub fn zeta_tail(s: f64, m: f64) -> f64 {
    debug_assert!(s > 1.0);
    let m = m.max(1.0);
    if !m.is_finite() {
        return 0.0;
    }
    let mut head = 0.0;
    let mut a = m;
    while a < 50.0 {
        head += a.powf(-s);
        a += 1.0;
    }
    head + euler_maclaurin(s, a)
}

fn euler_maclaurin(s: f64, a: f64) -> f64 {
    let fa = a.powf(-s);
    let integral = a * fa / (s - 1.0);
    let inv = 1.0 / a;
    let inv2 = inv * inv;
    let c1 = s / 12.0 * fa * inv;
    let c2 = -s * (s + 1.0) * (s + 2.0) / 720.0 * fa * inv * inv2;
    let c3 = s * (s + 1.0) * (s + 2.0) * (s + 3.0) * (s + 4.0) / 30240.0 * fa * inv * inv2 * inv2;
    integral + 0.5 * fa + c1 + c2 + c3
}

/// `Σ_{lo ≤ i ≤ hi} i^{-s}`; `hi = ∞` is allowed.
pub fn zeta_range(s: f64, lo: f64, hi: f64) -> f64 {
    if hi < lo {
        return 0.0;
    }
    if hi - lo < 64.0 {
        let mut total = 0.0;
        let mut i = hi;
        while i >= lo {
            total += i.powf(-s);
            i -= 1.0;
        }
        return total;
    }
    zeta_tail(s, lo) - zeta_tail(s, hi + 1.0)
}
