//! Brute-force references shared by the integration tests.
#![allow(dead_code)]

use fdbem::kernels::{KernelKind, LayeredKernel, WaveContext};
use fdbem::linalg::CMatrix;
use fdbem::mesh::{Mesh, QuadPoint};
use fdbem::nystrom::{element_moments, LocalRegions, MomentSolver, NystromParams};
use fdbem::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub fn random_vector(n: usize, seed: u64) -> Vec<C64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect()
}

/// Dense Nyström matrix of one kernel: plain `K(x_i, y_j) w_j` everywhere
/// off the diagonal, overwritten by corrected weights on the local region.
pub fn dense_nystrom(
    mesh: &Mesh<f64>,
    kind: KernelKind,
    ctx: &WaveContext<f64>,
    params: &NystromParams,
) -> CMatrix<f64> {
    let points = mesh.quadrature_points();
    let regions = LocalRegions::build(mesh, &points, params.region_factor);
    dense_rows(mesh, &points, &regions, kind, ctx, params, &(0..points.len()).collect::<Vec<_>>())
}

/// Selected rows of [`dense_nystrom`].
pub fn dense_rows(
    mesh: &Mesh<f64>,
    points: &[QuadPoint<f64>],
    regions: &LocalRegions,
    kind: KernelKind,
    ctx: &WaveContext<f64>,
    params: &NystromParams,
    rows: &[usize],
) -> CMatrix<f64> {
    let kernel = LayeredKernel::from_kind(kind, ctx);
    let solver = MomentSolver::<f64>::new(params.max_condition).unwrap();
    let s = params.normal_sign;
    let n = points.len();
    let data: Vec<Vec<C64>> = rows
        .par_iter()
        .map(|&i| {
            let x = &points[i];
            let mut row: Vec<C64> = points
                .iter()
                .enumerate()
                .map(|(j, y)| {
                    if j == i {
                        C64::new(0.0, 0.0)
                    } else {
                        kernel.eval(x.position, y.position, x.normal * s, y.normal * s) * y.weight
                    }
                })
                .collect();
            for &e in regions.region(i) {
                let m = element_moments(&[kernel], mesh, points, i, e, params).unwrap();
                let w = solver.solve(&m[0]);
                row[6 * e..6 * e + 6].copy_from_slice(&w);
            }
            row
        })
        .collect();
    let mut out = CMatrix::zeros(rows.len(), n);
    for (r, row) in data.into_iter().enumerate() {
        for (j, v) in row.into_iter().enumerate() {
            out[(r, j)] = v;
        }
    }
    out
}

pub fn rel_l2(a: &[C64], b: &[C64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}
