use std::f64::consts::PI;
use std::sync::Arc;

use fdbem::analytic::rel_error;
use fdbem::compress::*;
use fdbem::fda::{FdaOperator, FdaParams, M2lOperator, StorageMode, TranslationCache};
use fdbem::geometry::{fibonacci_sphere, Vec3};
use fdbem::kernels::{KernelKind, LayeredKernel, WaveContext};
use fdbem::linalg::CMatrix;
use fdbem::octree::Octree;
use fdbem::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_charges(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> CMatrix<f64> {
    CMatrix::from_fn(rows, cols, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
}

struct Setup {
    tree: Arc<Octree<f64>>,
    points: Arc<Vec<Vec3<f64>>>,
    raw: TranslationCache<f64>,
}

fn setup(n: usize, k: f64, epsilon: f64, leaf: usize) -> Setup {
    let points = fibonacci_sphere(n);
    let tree = Octree::build_with_threshold(&points, k, leaf);
    let raw = TranslationCache::build(&tree, &FdaParams::new(epsilon)).unwrap();
    Setup {
        tree: Arc::new(tree),
        points: Arc::new(points),
        raw,
    }
}

impl Setup {
    fn apply(&self, cache: TranslationCache<f64>, kind: KernelKind, q: &[C64]) -> Vec<C64> {
        let op = FdaOperator::new(self.tree.clone(), self.points.clone(), self.points.clone(), Arc::new(cache)).unwrap();
        op.apply(&LayeredKernel::from_kind(kind, &WaveContext::new(self.raw.k)), q)
    }
}

#[test]
fn reduced_and_low_rank_modes_agree_with_raw() {
    for (n, k, eps) in [(3000, 2.0, 1e-4), (6000, 8.0 * PI, 1e-4), (6000, 8.0 * PI, 1e-6)] {
        let s = setup(n, k, eps, 30);
        let q = random_charges(n, 11);
        for kind in [KernelKind::Single, KernelKind::BmH] {
            let raw = s.apply(s.raw.clone(), kind, &q);
            for mode in [StorageMode::Reduced, StorageMode::LowRank] {
                let c = convert(&s.raw, mode, None).unwrap();
                assert_eq!(c.mode, mode);
                let err = rel_error(&s.apply(c, kind, &q), &raw).unwrap();
                assert!(err < 10.0 * eps, "n={n} k={k} eps={eps} {kind:?} {mode:?}: {err:e}");
            }
        }
    }
}

#[test]
fn storage_shrinks_with_compression() {
    let s = setup(6000, 8.0 * PI, 1e-4, 30);
    let reduced = convert(&s.raw, StorageMode::Reduced, None).unwrap();
    let low = convert(&s.raw, StorageMode::LowRank, None).unwrap();
    assert!(reduced.bytes() < s.raw.bytes(), "{} vs {}", reduced.bytes(), s.raw.bytes());
    assert!(low.bytes() <= reduced.bytes());
}

#[test]
fn reducing_twice_is_rejected() {
    let s = setup(2000, 2.0, 1e-4, 30);
    let reduced = reduce_cache(&s.raw).unwrap();
    assert!(matches!(reduce_cache(&reduced), Err(CompressError::AlreadyReduced(_))));
    assert!(matches!(low_rank_cache(&reduced, None), Err(CompressError::AlreadyReduced(_))));
}

#[test]
fn cache_file_round_trip_is_exact() {
    let s = setup(3000, 4.0 * PI, 1e-4, 30);
    let dir = tempfile::tempdir().unwrap();
    let q = random_charges(3000, 2);
    for mode in [StorageMode::Raw, StorageMode::Reduced, StorageMode::LowRank] {
        let c = convert(&s.raw, mode, None).unwrap();
        let path = dir.path().join(format!("{}.cache", mode.name()));
        write_cache(&c, &path).unwrap();
        let back: TranslationCache<f64> = read_cache(&path).unwrap();
        assert_eq!(back.mode, c.mode);
        assert_eq!(back.epsilon, c.epsilon);
        assert_eq!(back.tree_signature, c.tree_signature);
        assert_eq!(back.bytes(), c.bytes());
        let a = s.apply(c, KernelKind::Double, &q);
        let b = s.apply(back, KernelKind::Double, &q);
        assert_eq!(a, b, "{mode:?}");
    }
}

#[test]
fn corrupt_cache_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cache");
    std::fs::write(&path, b"not a cache file at all").unwrap();
    assert!(matches!(read_cache::<f64>(&path), Err(CompressError::Format(_))));

    let s = setup(2000, 2.0, 1e-4, 30);
    write_cache(&s.raw, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(read_cache::<f64>(&path).is_err());
    assert!(matches!(read_cache::<f64>(&dir.path().join("missing")), Err(CompressError::Io(_))));
}

#[test]
fn factorization_recovers_low_rank_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_matrix(60, 3, &mut rng);
    let b = random_matrix(3, 60, &mut rng);
    let k = a.matmul(&b);
    match factorize_m2l(&k, 1e-8) {
        M2lOperator::Factored { u, v } => {
            assert_eq!(u.cols(), 3);
            let diff = u.matmul(&v).max_abs_diff(&k);
            assert!(diff < 1e-10 * k.frobenius_norm(), "{diff:e}");
        }
        M2lOperator::Dense(_) => panic!("rank-3 matrix kept dense"),
    }
}

#[test]
fn factorization_keeps_full_rank_matrix_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = random_matrix(40, 40, &mut rng);
    assert!(matches!(factorize_m2l(&k, 1e-6), M2lOperator::Dense(_)));
    // Rank exactly half the dimension is not worth factoring.
    let half = random_matrix(40, 20, &mut rng).matmul(&random_matrix(20, 40, &mut rng));
    assert!(matches!(factorize_m2l(&half, 1e-8), M2lOperator::Dense(_)));
}

#[test]
fn truncation_error_tracks_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Singular values 2^-j on random unitary-ish factors.
    let n = 48;
    let a = fdbem::linalg::svd(&random_matrix(n, n, &mut rng)).u;
    let b = fdbem::linalg::svd(&random_matrix(n, n, &mut rng)).u;
    let mut ad = a.clone();
    ad.scale_cols(&(0..n).map(|j| 0.5f64.powi(j as i32)).collect::<Vec<_>>());
    let k = ad.matmul(&b.adjoint());
    for eps in [1e-2, 1e-4, 1e-6] {
        let op = factorize_m2l(&k, eps);
        let x = random_charges(n, 7);
        let y = apply_m2l(&op, &x).unwrap();
        // Spectral bound |K x - K_r x| <= eps sigma_1 |x| with sigma_1 = 1.
        let err: f64 = y.iter().zip(k.matvec(&x)).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
        let xn: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!(err <= eps * xn, "eps {eps}: {err:e}");
    }
}

#[test]
fn apply_checks_dimension() {
    let op = M2lOperator::Dense(CMatrix::<f64>::identity(4));
    assert!(matches!(
        apply_m2l(&op, &[C64::new(1.0, 0.0); 3]),
        Err(CompressError::Dimension { expected: 4, got: 3 })
    ));
}

#[test]
fn rank_census_counts_every_interaction_matrix() {
    let s = setup(6000, 8.0 * PI, 1e-4, 30);
    let low = convert(&s.raw, StorageMode::LowRank, None).unwrap();
    let census = rank_census(&low, 1e-4);
    assert!(!census.is_empty());
    for (c, lev) in census.iter().zip(low.levels.iter().filter(|l| !l.m2l.is_empty())) {
        assert_eq!(c.matrices, lev.m2l.len());
        assert_eq!(c.histogram.iter().sum::<usize>(), c.matrices);
        assert!(c.factored <= c.matrices);
        assert!(c.line().starts_with(&format!("level={}", c.level)));
    }
    assert!(census.iter().any(|c| c.factored > 0));
}

#[test]
fn single_precision_reduction_tracks_double() {
    let points: Vec<Vec3<f32>> = fibonacci_sphere(2000);
    let tree = Octree::build_with_threshold(&points, 2.0f32, 30);
    let raw = TranslationCache::build(&tree, &FdaParams::new(1e-3)).unwrap();
    let low = convert(&raw, StorageMode::LowRank, None).unwrap();
    let q: Vec<fdbem::C32> = random_charges(2000, 3).iter().map(|z| fdbem::C32::new(z.re as f32, z.im as f32)).collect();
    let tree = Arc::new(tree);
    let pts = Arc::new(points);
    let kernel = LayeredKernel::from_kind(KernelKind::Single, &WaveContext::new(2.0f32));
    let a = FdaOperator::new(tree.clone(), pts.clone(), pts.clone(), Arc::new(raw)).unwrap().apply(&kernel, &q);
    let b = FdaOperator::new(tree, pts.clone(), pts, Arc::new(low)).unwrap().apply(&kernel, &q);
    assert!(rel_error(&b, &a).unwrap() < 1e-2);
}
