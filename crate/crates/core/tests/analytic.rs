use std::f64::consts::PI;

use fdbem::analytic::*;
use fdbem::geometry::Vec3;
use fdbem::kernels::{KernelKind, LayeredKernel, WaveContext};
use fdbem::C64;

/// Power series `j_m(x) = sum_l (-x^2/2)^l / l! * x^m / (2m + 2l + 1)!!`.
fn j_series(m: usize, x: f64) -> f64 {
    let mut dfact = 1.0;
    for i in (1..=2 * m + 1).step_by(2) {
        dfact *= i as f64;
    }
    let mut term = x.powi(m as i32) / dfact;
    let mut sum = term;
    for l in 1..200 {
        term *= -x * x / (2.0 * l as f64 * (2 * m + 2 * l + 1) as f64);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// Closed forms from `sin` and `cos`, exact enough when `x` is large.
fn j_closed(m: usize, x: f64) -> f64 {
    let (s, c) = x.sin_cos();
    let j0 = s / x;
    let j1 = s / (x * x) - c / x;
    let mut v = vec![j0, j1];
    for n in 1..m {
        v.push((2 * n + 1) as f64 / x * v[n] - v[n - 1]);
    }
    v[m]
}

#[test]
fn bessel_j_matches_series_and_closed_forms() {
    for &x in &[0.05, 0.5, 1.0, 3.7, 8.0] {
        let j = spherical_bessel_j(5, x);
        for m in 0..=5 {
            let r = j_series(m, x);
            assert!((j[m] - r).abs() <= 1e-12 * r.abs().max(1e-300), "m={m} x={x}: {} vs {r}", j[m]);
        }
    }
    // Upward recurrence is stable once x exceeds the order.
    for &x in &[12.0, 25.0, 60.0] {
        let j = spherical_bessel_j(5, x);
        for m in 0..=5 {
            assert!((j[m] - j_closed(m, x)).abs() < 1e-12, "m={m} x={x}");
        }
    }
}

#[test]
fn bessel_y_closed_forms() {
    for &x in &[0.3, 1.0, 4.2, 30.0] {
        let y = spherical_bessel_y(2, x).unwrap();
        let (s, c) = x.sin_cos();
        let y2 = (-3.0 / (x * x * x) + 1.0 / x) * c - 3.0 / (x * x) * s;
        assert!((y[0] + c / x).abs() < 1e-14 * (1.0 / x).max(1.0));
        assert!((y[2] - y2).abs() < 1e-12 * y2.abs().max(1.0), "x={x}");
    }
}

#[test]
fn cross_product_identity_holds_to_high_order() {
    // j_m y_{m-1} - j_{m-1} y_m = 1 / x^2.
    for &x in &[2.0, 7.5, 20.0] {
        let j = spherical_bessel_j(30, x);
        let y = spherical_bessel_y(30, x).unwrap();
        for m in 1..=30 {
            let w = j[m] * y[m - 1] - j[m - 1] * y[m];
            assert!((w * x * x - 1.0).abs() < 1e-10, "m={m} x={x}: {}", w * x * x);
        }
    }
}

#[test]
fn tiny_arguments_and_high_orders_stay_finite() {
    let j = spherical_bessel_j(60, 0.1);
    assert!(j.iter().all(|v| v.is_finite()));
    assert!(j[60] >= 0.0 && j[60] < 1e-100);
    assert!(matches!(spherical_bessel_y(400, 0.01), Err(AnalyticError::Overflow(_))));
}

#[test]
fn pulsating_sphere_examples() {
    assert_eq!(pulsating_sphere_solution(0.0f64), C64::new(1.0, 0.0));
    let u = pulsating_sphere_solution(2.0 * PI);
    assert!((u - C64::new(1.0, 0.0) / C64::new(1.0, -2.0 * PI)).norm() < 1e-15);
    assert!((u.norm_sqr() - 1.0 / (1.0 + 4.0 * PI * PI)).abs() < 1e-15);
    let single = pulsating_sphere_solution(1.0f32);
    assert!((single.re - 0.5).abs() < 1e-6 && (single.im - 0.5).abs() < 1e-6);
}

#[test]
fn mie_series_satisfies_sound_hard_condition() {
    let s = MieSeries::new(2.0 * PI, None).unwrap();
    assert_eq!(s.order, default_mie_order(2.0 * PI));
    assert!(s.neumann_residual.iter().all(|&r| r < 1e-12));
}

#[test]
fn mie_series_is_converged_at_default_order() {
    for k in [1.0, 2.0 * PI, 8.0 * PI] {
        let m = default_mie_order(k);
        for theta in [0.0, 0.7, PI / 2.0, 2.5, PI] {
            let (_, a) = mie_surface_field(k, theta, None).unwrap();
            let (_, b) = mie_surface_field(k, theta, Some(m + 10)).unwrap();
            assert!((a - b).norm() < 1e-10 * b.norm(), "k={k} theta={theta}");
        }
    }
}

#[test]
fn mie_low_frequency_limit() {
    // Potential flow around a rigid sphere: u = 1 + 3/2 ik cos(theta) + O(k^2).
    let k = 1e-3;
    for theta in [0.0, 1.0, 2.0, PI] {
        let (_, total) = mie_surface_field(k, theta, None).unwrap();
        let approx = C64::new(1.0, 1.5 * k * theta.cos());
        assert!((total - approx).norm() < 10.0 * k * k, "theta={theta}: {total}");
    }
}

#[test]
fn mie_shadow_and_lit_sides_differ_at_high_frequency() {
    let (_, lit) = mie_surface_field(8.0 * PI, PI, None).unwrap();
    let (_, shadow) = mie_surface_field(8.0 * PI, 0.0, None).unwrap();
    // Lit side doubles the incident amplitude; the forward point is
    // dominated by creeping waves and diffraction.
    assert!((lit.norm() - 2.0).abs() < 0.2, "{lit}");
    assert!(shadow.norm() < lit.norm());
}

#[test]
fn rel_error_examples() {
    let r = vec![C64::new(3.0, 4.0), C64::new(0.0, 0.0)];
    assert_eq!(rel_error(&r, &r).unwrap(), 0.0);
    let doubled: Vec<C64> = r.iter().map(|z| z * 2.0).collect();
    assert!((rel_error(&doubled, &r).unwrap() - 1.0).abs() < 1e-15);
    let shifted = vec![C64::new(3.0, 4.0), C64::new(0.5, 0.0)];
    assert!((rel_error(&shifted, &r).unwrap() - 0.1).abs() < 1e-15);
    assert!(matches!(rel_error(&r, &[C64::new(0.0, 0.0); 2]), Err(AnalyticError::ZeroReference)));
    assert!(matches!(rel_error(&r, &r[..1]), Err(AnalyticError::Length(2, 1))));
}

#[test]
fn direct_sum_is_linear_and_rejects_coincidence() {
    let ctx = WaveContext::new(3.0);
    let kernel = LayeredKernel::from_kind(KernelKind::Double, &ctx);
    let src = vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.5)];
    let nrm = vec![Vec3::new(0.0, 0.0, 1.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(1.0, 0.0, 0.0)];
    let tgt = vec![Vec3::new(2.0, 2.0, 2.0), Vec3::new(-1.0, 0.3, 0.2)];
    let a = vec![C64::new(1.0, 0.5), C64::new(-2.0, 0.0), C64::new(0.0, 1.0)];
    let b = vec![C64::new(0.3, 0.0), C64::new(1.0, 1.0), C64::new(-0.5, 2.0)];
    let s = C64::new(0.7, -1.3);
    let comb: Vec<C64> = a.iter().zip(&b).map(|(x, y)| x * s + y).collect();
    let pa = direct_sum(&kernel, &src, &nrm, &a, &tgt, &[]).unwrap();
    let pb = direct_sum(&kernel, &src, &nrm, &b, &tgt, &[]).unwrap();
    let pc = direct_sum(&kernel, &src, &nrm, &comb, &tgt, &[]).unwrap();
    for i in 0..2 {
        assert!((pc[i] - (pa[i] * s + pb[i])).norm() < 1e-14);
    }
    let manual = kernel.eval(tgt[1], src[2], Vec3::zero(), nrm[2]) * a[2]
        + kernel.eval(tgt[1], src[1], Vec3::zero(), nrm[1]) * a[1]
        + kernel.eval(tgt[1], src[0], Vec3::zero(), nrm[0]) * a[0];
    assert!((pa[1] - manual).norm() < 1e-15);
    assert!(matches!(
        direct_sum(&kernel, &src, &nrm, &a, &src[1..2], &[]),
        Err(AnalyticError::Coincident { target: 0, source_index: 1 })
    ));
    assert!(matches!(direct_sum(&kernel, &src, &nrm, &a[..2], &tgt, &[]), Err(AnalyticError::Length(3, 2))));
}

#[test]
fn random_targets_are_sorted_distinct_and_reproducible() {
    let a = random_targets(1000, 50, 3);
    assert_eq!(a.len(), 50);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(a, random_targets(1000, 50, 3));
    assert_ne!(a, random_targets(1000, 50, 4));
    assert_eq!(random_targets(10, 50, 1), (0..10).collect::<Vec<_>>());
}
