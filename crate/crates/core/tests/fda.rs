use std::f64::consts::PI;
use std::sync::Arc;

use fdbem::analytic::{direct_sum, random_targets, rel_error};
use fdbem::fda::*;
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

fn matrix_rel_diff(a: &CMatrix<f64>, b: &CMatrix<f64>) -> f64 {
    let mut d = a.clone();
    for (x, y) in d.data_mut().iter_mut().zip(b.data()) {
        *x -= *y;
    }
    d.frobenius_norm() / b.frobenius_norm()
}

struct Problem {
    op: FdaOperator<f64>,
    points: Vec<Vec3<f64>>,
    ctx: WaveContext<f64>,
}

fn sphere_problem(n: usize, k: f64, epsilon: f64, leaf: usize) -> Problem {
    let points: Vec<Vec3<f64>> = fibonacci_sphere(n);
    let tree = Octree::build_with_threshold(&points, k, leaf);
    let cache = TranslationCache::build(&tree, &FdaParams::new(epsilon)).unwrap();
    let op = FdaOperator::new(Arc::new(tree), Arc::new(points.clone()), Arc::new(points.clone()), Arc::new(cache)).unwrap();
    Problem {
        op,
        points,
        ctx: WaveContext::new(k),
    }
}

/// Far-field error against a brute-force sum restricted to far pairs.
fn far_error(p: &Problem, kind: KernelKind, seed: u64) -> f64 {
    let kernel = LayeredKernel::from_kind(kind, &p.ctx);
    let q = random_charges(p.points.len(), seed);
    let fast = p.op.apply(&kernel, &q);
    let near = p.op.apply_near_direct(&kernel, &q);
    let idx = random_targets(p.points.len(), 200, seed);
    let mut approx = Vec::new();
    let mut exact = Vec::new();
    for &i in &idx {
        let sources: Vec<usize> = (0..p.points.len()).filter(|&j| j != i).collect();
        let ys: Vec<Vec3<f64>> = sources.iter().map(|&j| p.points[j]).collect();
        let qs: Vec<C64> = sources.iter().map(|&j| q[j]).collect();
        let full = direct_sum(&kernel, &ys, &ys, &qs, &[p.points[i]], &[p.points[i]]).unwrap()[0];
        exact.push(full - near[i]);
        approx.push(fast[i]);
    }
    rel_error(&approx, &exact).unwrap()
}

#[test]
fn pinv_of_identity_is_identity() {
    let p = truncated_pinv(&CMatrix::<f64>::identity(5), 1e-8).unwrap();
    assert_eq!(p.rank(), 5);
    assert!(p.dense().max_abs_diff(&CMatrix::identity(5)) < 1e-14);
}

#[test]
fn pinv_truncates_small_singular_value() {
    let eps = 1e-4;
    let mut r = CMatrix::<f64>::zeros(2, 2);
    r[(0, 0)] = C64::new(1.0, 0.0);
    r[(1, 1)] = C64::new(eps / 10.0, 0.0);
    let p = truncated_pinv(&r, eps).unwrap();
    assert_eq!(p.rank(), 1);
    let d = p.dense();
    assert!((d[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-14);
    assert!(d[(1, 1)].norm() < 1e-14);
}

#[test]
fn pinv_recovers_known_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_matrix(40, 15, &mut rng);
    let b = random_matrix(15, 60, &mut rng);
    let mut r = a.matmul(&b);
    for v in r.data_mut() {
        *v += C64::new(rng.gen_range(-1e-12..1e-12), rng.gen_range(-1e-12..1e-12));
    }
    let p = truncated_pinv(&r, 1e-8).unwrap();
    assert_eq!(p.rank(), 15);
    // R R^+ R = R up to the truncation level.
    let rrr = r.matmul(&p.dense()).matmul(&r);
    assert!(matrix_rel_diff(&rrr, &r) < 1e-8);
}

#[test]
fn pinv_rejects_zero_matrix() {
    assert_eq!(truncated_pinv(&CMatrix::<f64>::zeros(3, 4), 1e-6).unwrap_err(), FdaError::ZeroMatrix);
}

#[test]
fn monopole_at_center_is_reproduced_far_away() {
    let (k, w, eps) = (3.0, 0.5, 1e-6);
    let s = lf_surface::<f64>(k, w, &FdaParams::new(eps)).unwrap();
    let g = LayeredKernel::single(k);
    let src = [Vec3::new(0.0, 0.0, 0.0)];
    let check = g.block(&s.check, &[], &src, &[]);
    let density = s.pinv.dense().matmul(&check);
    let far: Vec<Vec3<f64>> = fibonacci_sphere::<f64>(100).into_iter().map(|d| d * (2.0 * w)).collect();
    let approx = g.block(&far, &[], &s.equivalent, &[]).matmul(&density).column(0);
    let exact = g.block(&far, &[], &src, &[]).column(0);
    assert!(rel_error(&approx, &exact).unwrap() < 10.0 * eps);
}

#[test]
fn dipole_is_approximated_by_equivalent_monopoles() {
    let (k, w, eps) = (3.0, 0.5, 1e-6);
    let s = lf_surface::<f64>(k, w, &FdaParams::new(eps)).unwrap();
    let y = Vec3::new(0.1, -0.05, 0.07);
    let n = Vec3::new(1.0, 2.0, -1.0).normalized();
    let dipole = LayeredKernel::from_kind(KernelKind::Double, &WaveContext::new(k));
    let g = LayeredKernel::single(k);
    let density = s.pinv.dense().matmul(&dipole.block(&s.check, &[], &[y], &[n]));
    let far: Vec<Vec3<f64>> = fibonacci_sphere::<f64>(100).into_iter().map(|d| d * (2.0 * w)).collect();
    let approx = g.block(&far, &[], &s.equivalent, &[]).matmul(&density).column(0);
    // Two-monopole finite difference of the dipole.
    let h = 1e-5;
    let exact: Vec<C64> = far
        .iter()
        .map(|&x| (g.eval(x, y + n * h, Vec3::zero(), Vec3::zero()) - g.eval(x, y - n * h, Vec3::zero(), Vec3::zero())) / (2.0 * h))
        .collect();
    assert!(rel_error(&approx, &exact).unwrap() < 10.0 * eps);
}

#[test]
fn tangential_dipole_has_zero_check_potential() {
    let k = 2.0;
    let s = lf_surface::<f64>(k, 1.0, &FdaParams::new(1e-4)).unwrap();
    let dipole = LayeredKernel::from_kind(KernelKind::Double, &WaveContext::new(k));
    // Every check point sits in a plane through y orthogonal to n.
    let y = Vec3::new(0.0, 0.0, 0.0);
    let n = Vec3::new(0.0, 0.0, 1.0);
    let plane: Vec<Vec3<f64>> = s.check.iter().map(|p| Vec3::new(p.x(), p.y(), 0.0)).filter(|p| p.norm() > 0.0).collect();
    let e = dipole.block(&plane, &[], &[y], &[n]);
    assert!(e.data().iter().all(|v| v.norm() == 0.0));
}

#[test]
fn downward_pseudo_inverse_is_upward_transposed() {
    let s = lf_surface::<f64>(4.0, 0.7, &FdaParams::new(1e-6)).unwrap();
    let r_dn = LayeredKernel::single(4.0).block(&s.equivalent, &[], &s.check, &[]);
    let dn = truncated_pinv(&r_dn, 1e-6).unwrap().dense();
    let up_t = s.pinv.dense().transpose();
    assert_eq!(truncated_pinv(&r_dn, 1e-6).unwrap().rank(), s.pinv.rank());
    // Rounding is amplified by up to 1 / eps through the pseudo-inverse.
    let d = matrix_rel_diff(&dn, &up_t);
    assert!(d < 1e-8, "{d:e}");
}

#[test]
fn local_to_local_is_transposed_multipole_to_multipole() {
    let k = 2.0;
    let eps = 1e-6;
    let points: Vec<Vec3<f64>> = fibonacci_sphere(3000);
    let tree = Octree::build_with_threshold(&points, k, 40);
    let cache = TranslationCache::build(&tree, &FdaParams::new(eps)).unwrap();
    let g = LayeredKernel::single(k);
    let mut checked = 0;
    for l in cache.first_active..tree.num_levels() - 1 {
        let (parent, child) = (&cache.levels[l], &cache.levels[l + 1]);
        let (ps, cs) = match (&parent.surface, &child.surface) {
            (Some(p), Some(c)) => (p, c),
            _ => continue,
        };
        for (&(q, d), m) in &parent.m2m {
            assert_eq!(d, 0);
            let off = octant_offset(q, child.width);
            // Incoming equivalent points of the parent are its outgoing
            // check points, incoming check points of the child its outgoing
            // equivalent points.
            let r_dn = g.block(&ps.equivalent, &[], &ps.check, &[]);
            let r_dn_pinv = truncated_pinv(&r_dn, eps).unwrap().dense();
            let e = g.block(&cs.equivalent_at(off, None), &[], &ps.check, &[]);
            let l2l = e.matmul(&r_dn_pinv);
            let d = matrix_rel_diff(&l2l, &m.transpose());
            assert!(d < 1e-8, "level {l} octant {q}: {d:e}");
            checked += 1;
        }
    }
    assert!(checked >= 8);
}

#[test]
fn interaction_matrix_is_translation_invariant() {
    let (k, w) = (3.0, 0.25);
    let s = lf_surface::<f64>(k, w, &FdaParams::new(1e-4)).unwrap();
    let g = LayeredKernel::single(k);
    let offset = Vec3::new(3.0 * w, 0.0, -2.0 * w);
    let block_at = |base: Vec3<f64>| g.block(&s.check_at(base, None), &[], &s.equivalent_at(base + offset, None), &[]);
    let a = block_at(Vec3::zero());
    let b = block_at(Vec3::new(0.37, -1.2, 2.5));
    assert!(matrix_rel_diff(&b, &a) < 1e-12);
}

#[test]
fn zero_charges_give_zero() {
    let p = sphere_problem(1500, 2.0 * PI, 1e-4, 40);
    let kernel = LayeredKernel::from_kind(KernelKind::BmH, &p.ctx);
    let out = p.op.apply(&kernel, &vec![C64::new(0.0, 0.0); p.points.len()]);
    assert!(out.iter().all(|v| v.norm() == 0.0));
}

#[test]
fn apply_is_linear() {
    let p = sphere_problem(1500, 2.0 * PI, 1e-4, 40);
    for kind in [KernelKind::Single, KernelKind::BmG, KernelKind::BmH] {
        let kernel = LayeredKernel::from_kind(kind, &p.ctx);
        let a = random_charges(p.points.len(), 1);
        let b = random_charges(p.points.len(), 2);
        let sum: Vec<C64> = a.iter().zip(&b).map(|(x, y)| x + y * 2.5).collect();
        let fa = p.op.apply(&kernel, &a);
        let fb = p.op.apply(&kernel, &b);
        let combined: Vec<C64> = fa.iter().zip(&fb).map(|(x, y)| x + y * 2.5).collect();
        assert!(rel_error(&p.op.apply(&kernel, &sum), &combined).unwrap() < 1e-12, "{kind:?}");
    }
}

#[test]
fn burton_miller_kernels_match_direct_far_sum() {
    // Diameter of four wavelengths.
    let eps = 1e-4;
    let p = sphere_problem(1000, 4.0 * PI, eps, 20);
    for kind in [KernelKind::BmG, KernelKind::BmH] {
        let err = far_error(&p, kind, 11);
        assert!(err <= 10.0 * eps, "{kind:?}: {err:e}");
    }
}

#[test]
fn every_kernel_kind_is_accurate_with_high_frequency_levels() {
    for eps in [1e-4, 1e-6] {
        let p = sphere_problem(6000, 8.0 * PI, eps, 30);
        assert!(p.op.tree.level_info.iter().any(|l| l.directions.is_some()));
        for kind in [KernelKind::Single, KernelKind::Double, KernelKind::BmG, KernelKind::BmH] {
            let err = far_error(&p, kind, 3);
            assert!(err <= 10.0 * eps, "eps {eps:e} {kind:?}: {err:e}");
        }
    }
}

#[test]
fn precomputed_leaf_operators_give_same_result() {
    let mut p = sphere_problem(1500, 2.0 * PI, 1e-4, 40);
    let kernel = LayeredKernel::from_kind(KernelKind::BmH, &p.ctx);
    let q = random_charges(p.points.len(), 5);
    let before = p.op.apply(&kernel, &q);
    p.op.precompute_leaf_operators(&[kernel.source], &[kernel.target]);
    assert!(p.op.leaf_operator_bytes() > 0);
    let after = p.op.apply(&kernel, &q);
    assert!(rel_error(&after, &before).unwrap() < 1e-12);
}

#[test]
fn cache_for_another_tree_is_rejected() {
    let a: Vec<Vec3<f64>> = fibonacci_sphere(800);
    let b: Vec<Vec3<f64>> = a.iter().map(|p| *p * 1.5).collect();
    let ta = Octree::build(&a, 3.0, 1e-4);
    let tb = Octree::build(&b, 3.0, 1e-4);
    let cache = TranslationCache::build(&ta, &FdaParams::new(1e-4)).unwrap();
    let r = FdaOperator::new(Arc::new(tb), Arc::new(b.clone()), Arc::new(b), Arc::new(cache));
    assert!(r.is_err());
}
