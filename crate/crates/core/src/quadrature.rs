//! Quadrature rules on the reference triangle `{xi1, xi2 >= 0, xi1 + xi2 <= 1}`
//! and Gauss-Legendre rules on intervals.
//!
//! Triangle weights are normalized to sum to one; multiply by the
//! reference area 1/2 and the Jacobian to integrate.

/// A symmetric triangle rule: `(xi1, xi2, weight)`.
pub type TriangleRule = &'static [(f64, f64, f64)];

const A6: f64 = 0.445_948_490_915_965;
const B6: f64 = 0.108_103_018_168_070;
const C6: f64 = 0.091_576_213_509_771;
const D6: f64 = 0.816_847_572_980_459;
const WA6: f64 = 0.223_381_589_678_011;
const WC6: f64 = 0.109_951_743_655_322;

/// Degree-4 six-point rule. Barycentric `(L1, L2, L3)` maps to
/// `(xi1, xi2) = (L2, L3)`.
pub const RULE6: TriangleRule = &[
    (A6, A6, WA6),
    (A6, B6, WA6),
    (B6, A6, WA6),
    (C6, C6, WC6),
    (C6, D6, WC6),
    (D6, C6, WC6),
];

const A12: f64 = 0.249_286_745_170_910;
const B12: f64 = 0.501_426_509_658_179;
const C12: f64 = 0.063_089_014_491_502;
const D12: f64 = 0.873_821_971_016_996;
const P12: f64 = 0.053_145_049_844_817;
const Q12: f64 = 0.310_352_451_033_784;
const R12: f64 = 0.636_502_499_121_399;
const WA12: f64 = 0.116_786_275_726_379;
const WC12: f64 = 0.050_844_906_370_207;
const WP12: f64 = 0.082_851_075_618_374;

/// Degree-6 twelve-point rule, used as the error estimator of the
/// adaptive near-singular integration.
pub const RULE12: TriangleRule = &[
    (A12, A12, WA12),
    (A12, B12, WA12),
    (B12, A12, WA12),
    (C12, C12, WC12),
    (C12, D12, WC12),
    (D12, C12, WC12),
    (Q12, R12, WP12),
    (R12, Q12, WP12),
    (P12, R12, WP12),
    (R12, P12, WP12),
    (P12, Q12, WP12),
    (Q12, P12, WP12),
];

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_01(n: usize) -> Vec<(f64, f64)> {
    gauss_legendre(n)
        .into_iter()
        .map(|(x, w)| (0.5 * (x + 1.0), 0.5 * w))
        .collect()
}

/// Gauss-Legendre nodes and weights on `[-1, 1]` by Newton iteration on
/// the three-term recurrence.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    assert!(n > 0);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out.reverse();
    out
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, dp)
}
