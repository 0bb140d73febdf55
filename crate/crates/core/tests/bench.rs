use std::f64::consts::PI;

use fdbem::bench::*;
use fdbem::fda::StorageMode;

#[test]
fn exact_n_log_n_data_fits_perfectly() {
    let n = [1000, 4000, 16000];
    let y: Vec<f64> = n.iter().map(|&v| 3e-7 * v as f64 * (v as f64).ln()).collect();
    let fit = fit_n_log_n(&n, &y);
    assert!((fit.a - 3e-7).abs() < 1e-18, "{}", fit.a);
    assert!((fit.r_squared - 1.0).abs() < 1e-12);
    // Quadratic growth fits badly.
    let q: Vec<f64> = n.iter().map(|&v| (v as f64).powi(2)).collect();
    assert!(fit_n_log_n(&n, &q).r_squared < 0.95);
}

#[test]
fn cloud_size_examples() {
    // Unit sphere area 4 pi, 20 points per wavelength of 0.5.
    assert_eq!(cloud_size(4.0 * PI, 20.0), (4.0 * PI * 1600.0f64).round() as usize);
    assert_eq!(cloud_size(2.0 * PI, 10.0), (400.0 * PI).round() as usize);
}

#[test]
fn summation_benchmark_rows_share_inputs() {
    let mut cfg = SummationConfig::new(2500, 3.0 * PI, 1e-4);
    cfg.leaf_threshold = Some(30);
    let rows = summation_benchmark(&cfg, &[StorageMode::Raw, StorageMode::Reduced, StorageMode::LowRank]).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.eps_a < 1e-3, "{:?}: {:e}", r.mode, r.eps_a);
        assert_eq!(r.points, 2500);
        assert!(r.row().starts_with(r.mode.name()));
    }
    assert!(rows[1].cache_bytes < rows[0].cache_bytes);
    let table = summation_table(&rows);
    assert_eq!(table.lines().count(), 4);
    assert_eq!(table.lines().next().unwrap(), SummationResult::HEADER);
    // Same seed, same charges and targets.
    let again = summation_benchmark(&cfg, &[StorageMode::Raw]).unwrap();
    assert_eq!(again[0].eps_a, rows[0].eps_a);
}

#[test]
fn mode_comparison_ratios() {
    let mut cfg = SummationConfig::new(2500, 3.0 * PI, 1e-4);
    cfg.leaf_threshold = Some(30);
    let c = compare_modes(&cfg).unwrap();
    assert_eq!(c.raw.mode, StorageMode::Raw);
    assert_eq!(c.compressed.mode, StorageMode::LowRank);
    assert!(c.memory_ratio() > 1.0);
    assert!(c.m2l_ratio() > 0.0 && c.upward_ratio() > 0.0);
    assert!(c.compressed.eps_a < 10.0 * c.raw.eps_a.max(1e-4));
    assert!(c.report().contains("ratios raw/compressed"));
}

#[test]
fn small_scaling_series() {
    let mut cfg = ScalingConfig::new(1e-4);
    cfg.k0 = 2.0;
    let mut seen = Vec::new();
    let s = run_scaling_with(&cfg, 3, |level, op| seen.push((level, op.num_points()))).unwrap();
    assert_eq!(s.rows.len(), 3);
    assert!(!s.truncated);
    assert_eq!(seen.iter().map(|p| p.1).collect::<Vec<_>>(), s.rows.iter().map(|r| r.points).collect::<Vec<_>>());
    assert!(s.rows.windows(2).all(|w| w[1].points > w[0].points && w[1].k == 2.0 * w[0].k));
    print!("{}", s.table());
    assert!(s.rows.iter().all(|r| r.converged && r.error < 2e-2));
    assert_eq!(s.time_ratios().len(), 2);
    assert_eq!(s.table().lines().count(), 4);
    assert!(s.summary().contains("R^2"));

    cfg.max_points = s.rows[1].points;
    let cut = run_scaling(&cfg, 3).unwrap();
    assert!(cut.truncated);
    assert_eq!(cut.rows.len(), 2);
}
