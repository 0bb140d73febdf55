//! Locally corrected Nyström quadrature on curved quadratic triangles.
//!
//! For a collocation point `x_i` every element within twice its longest side
//! gets six corrected weights that integrate the monomials `xi1^p xi2^q`,
//! `p + q <= 2`, against the kernel exactly. Elements containing `x_i` are
//! integrated in polar coordinates around `x_i`, with the `r^-3` part of the
//! hypersingular kernel removed through its Laurent expansion and restored
//! as a Hadamard finite part. Other elements of the local region use
//! adaptive subdivision with a 6 versus 12 point error estimate.

use std::io::Write;

use num_complex::Complex;
use rayon::prelude::*;

use crate::geometry::Vec3;
use crate::kernels::{KernelKind, LayeredKernel, SourceLayer, TargetLayer, WaveContext};
use crate::linalg::{condition_1, invert_real};
use crate::mesh::{ElementMap, Mesh, QuadPoint};
use crate::octree::Octree;
use crate::quadrature::{gauss_legendre_01, TriangleRule, RULE12, RULE6};
use crate::scalar::{czero, Real};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NystromError {
    #[error("moment matrix of element {element} has condition {condition:e}")]
    IllConditioned { element: usize, condition: f64 },
    #[error("adaptive quadrature on element {element} for point {point} did not converge by depth {depth}")]
    NoConvergence { element: usize, point: usize, depth: usize },
    #[error("at most {max} kernels can be integrated together, got {got}")]
    TooManyKernels { max: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NystromParams {
    /// Elements closer than this multiple of their longest side are corrected.
    pub region_factor: f64,
    /// Relative tolerance of the adaptive near-singular integration.
    pub near_tolerance: f64,
    pub max_depth: usize,
    /// Gauss points per radial line and per angular piece of the polar rule.
    pub polar_order: usize,
    /// `+1` keeps the mesh normals, `-1` reverses them.
    pub normal_sign: f64,
    pub max_condition: f64,
}

impl Default for NystromParams {
    fn default() -> Self {
        Self {
            region_factor: 2.0,
            near_tolerance: 1e-12,
            max_depth: 12,
            polar_order: 12,
            normal_sign: 1.0,
            max_condition: 1e12,
        }
    }
}

/// Exponents `(p, q)` of the moment monomials `xi1^p xi2^q`.
pub const MONOMIALS: [(u32, u32); 6] = [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)];

/// The six moment monomials at an intrinsic point.
#[inline]
pub fn monomials<T: Real>(xi: [T; 2]) -> [T; 6] {
    let [a, b] = xi;
    [T::one(), a, b, a * a, a * b, b * b]
}

fn monomial_gradients<T: Real>(xi: [T; 2]) -> [[T; 2]; 6] {
    let [a, b] = xi;
    let (z, o, two) = (T::zero(), T::one(), T::c(2.0));
    [[z, z], [o, z], [z, o], [two * a, z], [b, a], [z, two * b]]
}

/// Elements whose corrected weights are used for one collocation point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalRegion {
    pub point: usize,
    pub elements: Vec<usize>,
}

/// Positions used to measure point-to-element distance: the six nodes and
/// the six quadrature points.
fn element_samples<T: Real>(map: &ElementMap<T>) -> [Vec3<T>; 12] {
    let mut s = [Vec3::zero(); 12];
    s[..6].copy_from_slice(&map.nodes);
    for (n, &(x1, x2, _)) in RULE6.iter().enumerate() {
        s[6 + n] = map.position(T::c(x1), T::c(x2));
    }
    s
}

fn in_region<T: Real>(x: Vec3<T>, samples: &[Vec3<T>; 12], side: T, factor: T) -> bool {
    let d2 = samples.iter().map(|s| (*s - x).norm_sqr()).fold(T::infinity(), |a, b| a.min(b));
    d2.sqrt() <= factor * side
}

/// Local region of quadrature point `i` by a scan over all elements.
pub fn local_region<T: Real>(mesh: &Mesh<T>, points: &[QuadPoint<T>], i: usize, factor: f64) -> LocalRegion {
    let x = points[i].position;
    let owner = points[i].owner_element;
    let f = T::c(factor);
    let elements = (0..mesh.num_elements())
        .filter(|&e| {
            let map = mesh.element_map(e);
            e == owner || in_region(x, &element_samples(&map), map.max_corner_edge(), f)
        })
        .collect();
    LocalRegion { point: i, elements }
}

/// Local regions of every quadrature point, found through a hash grid.
#[derive(Debug, Clone)]
pub struct LocalRegions {
    offsets: Vec<usize>,
    elements: Vec<usize>,
}

impl LocalRegions {
    pub fn build<T: Real>(mesh: &Mesh<T>, points: &[QuadPoint<T>], factor: f64) -> Self {
        use std::collections::HashMap;
        let ne = mesh.num_elements();
        let f = T::c(factor);
        let geo: Vec<([Vec3<T>; 12], T)> = (0..ne)
            .map(|e| {
                let map = mesh.element_map(e);
                (element_samples(&map), map.max_corner_edge())
            })
            .collect();
        let reach = geo.iter().map(|g| g.1).fold(T::zero(), |a, b| a.max(b)) * f;
        let cell = reach.max(T::c(1e-300));
        let key = |p: Vec3<T>| -> [i64; 3] { [0, 1, 2].map(|a| (p[a] / cell).floor().to_f64_lossy() as i64) };
        let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (e, (s, _)) in geo.iter().enumerate() {
            let mut keys: Vec<[i64; 3]> = s.iter().map(|&p| key(p)).collect();
            keys.sort_unstable();
            keys.dedup();
            for k in keys {
                grid.entry(k).or_default().push(e);
            }
        }
        let rows: Vec<Vec<usize>> = points
            .par_iter()
            .map(|q| {
                let c = key(q.position);
                let mut cand = Vec::new();
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            if let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                                cand.extend_from_slice(list);
                            }
                        }
                    }
                }
                cand.push(q.owner_element);
                cand.sort_unstable();
                cand.dedup();
                cand.retain(|&e| e == q.owner_element || in_region(q.position, &geo[e].0, geo[e].1, f));
                cand
            })
            .collect();
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        offsets.push(0);
        let mut elements = Vec::new();
        for r in rows {
            elements.extend(r);
            offsets.push(elements.len());
        }
        Self { offsets, elements }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn region(&self, i: usize) -> &[usize] {
        &self.elements[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn max_size(&self) -> usize {
        (0..self.len()).map(|i| self.region(i).len()).max().unwrap_or(0)
    }

    pub fn mean_size(&self) -> f64 {
        self.elements.len() as f64 / self.len().max(1) as f64
    }
}

/// Integration target: a point with its normal, and its intrinsic
/// coordinates when it lies on the integrated element.
#[derive(Debug, Clone, Copy)]
pub struct Collocation<T> {
    pub position: Vec3<T>,
    pub normal: Vec3<T>,
    pub on_element: Option<[T; 2]>,
}

const MAX_KERNELS: usize = 2;

type Moments<T> = [[Complex<T>; 6]; MAX_KERNELS];

fn zero_moments<T: Real>() -> Moments<T> {
    [[czero(); 6]; MAX_KERNELS]
}

fn add_scaled<T: Real>(acc: &mut Moments<T>, v: &Moments<T>, s: T, nk: usize) {
    for k in 0..nk {
        for n in 0..6 {
            acc[k][n] += v[k][n].scale(s);
        }
    }
}

/// Coefficient of `d2G/dn_x dn_y` inside a layered kernel.
fn hyper_coefficient<T: Real>(k: &LayeredKernel<T>) -> Complex<T> {
    let one = Complex::new(T::one(), T::zero());
    let s = match k.source {
        SourceLayer::Monopole => czero(),
        SourceLayer::Dipole => one,
        SourceLayer::MonopoleDipole(b) => b,
    };
    let t = match k.target {
        TargetLayer::Potential => czero(),
        TargetLayer::NormalDerivative => one,
        TargetLayer::BurtonMiller(a) => a,
    };
    s * t
}

struct Integrand<'a, T: Real> {
    kernels: &'a [LayeredKernel<T>],
    map: &'a ElementMap<T>,
    x: Vec3<T>,
    nx: Vec3<T>,
    sign: T,
}

impl<T: Real> Integrand<'_, T> {
    /// `K(x, y(xi)) J(xi) phi_n(xi)` for every kernel and monomial.
    #[inline]
    fn eval(&self, xi: [T; 2]) -> Moments<T> {
        let sp = self.map.eval(xi[0], xi[1]);
        let ny = sp.normal * self.sign;
        let phi = monomials(xi);
        let mut out = zero_moments();
        for (k, ker) in self.kernels.iter().enumerate() {
            let v = ker.eval(self.x, sp.position, self.nx, ny) * sp.jacobian;
            for n in 0..6 {
                out[k][n] = v.scale(phi[n]);
            }
        }
        out
    }
}

fn rule_on<T: Real>(f: &Integrand<T>, tri: &[[T; 2]; 3], rule: TriangleRule) -> Moments<T> {
    let [p0, p1, p2] = *tri;
    let e1 = [p1[0] - p0[0], p1[1] - p0[1]];
    let e2 = [p2[0] - p0[0], p2[1] - p0[1]];
    let area = (e1[0] * e2[1] - e1[1] * e2[0]).abs() * T::c(0.5);
    let mut acc = zero_moments();
    for &(u, v, w) in rule {
        let (u, v) = (T::c(u), T::c(v));
        let xi = [p0[0] + u * e1[0] + v * e2[0], p0[1] + u * e1[1] + v * e2[1]];
        add_scaled(&mut acc, &f.eval(xi), area * T::c(w), f.kernels.len());
    }
    acc
}

fn adaptive<T: Real>(
    f: &Integrand<T>,
    tri: &[[T; 2]; 3],
    fine: Moments<T>,
    tol: &[T; MAX_KERNELS],
    depth: usize,
    max_depth: usize,
) -> Result<Moments<T>, usize> {
    let coarse = rule_on(f, tri, RULE6);
    let nk = f.kernels.len();
    let ok = (0..nk).all(|k| (0..6).all(|n| (fine[k][n] - coarse[k][n]).norm() <= tol[k]));
    if ok {
        return Ok(fine);
    }
    if depth >= max_depth {
        return Err(depth);
    }
    let [a, b, c] = *tri;
    let mid = |p: [T; 2], q: [T; 2]| [(p[0] + q[0]) * T::c(0.5), (p[1] + q[1]) * T::c(0.5)];
    let (ab, bc, ca) = (mid(a, b), mid(b, c), mid(c, a));
    let mut acc = zero_moments();
    for sub in [[a, ab, ca], [ab, b, bc], [ca, bc, c], [bc, ca, ab]] {
        let fine_sub = rule_on(f, &sub, RULE12);
        let v = adaptive(f, &sub, fine_sub, tol, depth + 1, max_depth)?;
        add_scaled(&mut acc, &v, T::one(), nk);
    }
    Ok(acc)
}

const REFERENCE: [[f64; 2]; 3] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];

fn polar<T: Real>(f: &Integrand<T>, xi0: [T; 2], order: usize) -> Moments<T> {
    let nk = f.kernels.len();
    let map = f.map;
    let four_pi = T::c(4.0) * T::PI();
    // Local expansion y - x = rho A + rho^2 B at xi0.
    let (x1, x2) = map.tangents(xi0[0], xi0[1]);
    let (x11, x12, x22) = map.second_derivatives();
    let c0 = x1.cross(&x2);
    let j0 = c0.norm();
    let nhat = c0 * (T::one() / j0);
    let grad_j = [
        nhat.dot(&(x11.cross(&x2) + x1.cross(&x12))),
        nhat.dot(&(x12.cross(&x2) + x1.cross(&x22))),
    ];
    let phi0 = monomials(xi0);
    let dphi = monomial_gradients(xi0);
    let hyper: Vec<Complex<T>> = f.kernels.iter().map(hyper_coefficient).collect();
    let any_hyper = hyper.iter().any(|h| h.norm() > T::zero());
    let rule: Vec<(T, T)> = gauss_legendre_01(order).into_iter().map(|(x, w)| (T::c(x), T::c(w))).collect();
    let two_pi = T::c(2.0) * T::PI();
    let mut acc = zero_moments();
    for e in 0..3 {
        let a = REFERENCE[e].map(T::c);
        let b = REFERENCE[(e + 1) % 3].map(T::c);
        let da = [a[0] - xi0[0], a[1] - xi0[1]];
        let db = [b[0] - xi0[0], b[1] - xi0[1]];
        let ta = da[1].atan2(da[0]);
        let mut tb = db[1].atan2(db[0]);
        if tb < ta {
            tb += two_pi;
        }
        let t = [b[0] - a[0], b[1] - a[1]];
        let tl2 = t[0] * t[0] + t[1] * t[1];
        let s = -(da[0] * t[0] + da[1] * t[1]) / tl2;
        let foot = [da[0] + s * t[0], da[1] + s * t[1]];
        let d = (foot[0] * foot[0] + foot[1] * foot[1]).sqrt();
        let tn = foot[1].atan2(foot[0]);
        // Angle from the edge foot, phi = atan(sinh w), so that rho_max dtheta = d dw.
        let wrap = |phi: T| {
            let mut phi = phi;
            while phi > T::PI() {
                phi = phi - two_pi;
            }
            while phi < -T::PI() {
                phi = phi + two_pi;
            }
            phi.tan().asinh()
        };
        let wa = wrap(ta - tn);
        let wb = wrap(tb - tn);
        let pieces = ((wb - wa) / T::c(0.75)).ceil().to_f64_lossy().max(1.0) as usize;
        let dw = (wb - wa) / T::from_usize_lossy(pieces);
        for piece in 0..pieces {
            let w0 = wa + dw * T::from_usize_lossy(piece);
            for &(u, wu) in &rule {
                let w = w0 + dw * u;
                let phi = w.sinh().atan();
                let theta = tn + phi;
                let wt = dw * wu * phi.cos();
                let (sn, cs) = theta.sin_cos();
                let rho_max = d / (theta - tn).cos();
                for &(v, wv) in &rule {
                    let rho = rho_max * v;
                    let val = f.eval([xi0[0] + rho * cs, xi0[1] + rho * sn]);
                    add_scaled(&mut acc, &val, rho * rho_max * wv * wt, nk);
                }
                if !any_hyper {
                    continue;
                }
                let av = x1 * cs + x2 * sn;
                let bv = (x11 * (cs * cs) + x12 * (T::c(2.0) * cs * sn) + x22 * (sn * sn)) * T::c(0.5);
                let a_norm = av.norm();
                let ab = av.dot(&bv);
                let beta = T::one() / a_norm;
                let gamma = -ab / (a_norm * a_norm * a_norm * a_norm);
                let j_theta = grad_j[0] * cs + grad_j[1] * sn;
                let scale = T::one() / (four_pi * a_norm * a_norm * a_norm);
                for n in 0..6 {
                    let phi_theta = dphi[n][0] * cs + dphi[n][1] * sn;
                    let f2 = j0 * phi0[n] * scale;
                    let f1 = (j0 * phi_theta + phi0[n] * j_theta - T::c(3.0) * j0 * phi0[n] * ab / (a_norm * a_norm)) * scale;
                    // Remove the r^-3 part along the radial line, then add its finite part.
                    let mut sub = T::zero();
                    for &(v, wv) in &rule {
                        let rho = rho_max * v;
                        sub += (f2 / (rho * rho) + f1 / rho) * rho_max * wv;
                    }
                    let finite = f1 * (rho_max / beta).ln() - f2 * (gamma / (beta * beta) + T::one() / rho_max);
                    for k in 0..nk {
                        acc[k][n] += hyper[k].scale((finite - sub) * wt);
                    }
                }
            }
        }
    }
    acc
}

/// `int_Delta K(x, y) phi_n(y) dS_y` for up to two kernels at once.
///
/// Returns the six moments of each kernel in the order of [`MONOMIALS`].
pub fn reference_integrals<T: Real>(
    kernels: &[LayeredKernel<T>],
    target: &Collocation<T>,
    map: &ElementMap<T>,
    params: &NystromParams,
) -> Result<Vec<[Complex<T>; 6]>, usize> {
    assert!(kernels.len() <= MAX_KERNELS && !kernels.is_empty(), "one or two kernels");
    let f = Integrand {
        kernels,
        map,
        x: target.position,
        nx: target.normal,
        sign: T::c(params.normal_sign),
    };
    let m = match target.on_element {
        Some(xi0) => polar(&f, xi0, params.polar_order),
        None => {
            let tri = REFERENCE.map(|p| p.map(T::c));
            let fine = rule_on(&f, &tri, RULE12);
            let mut tol = [T::zero(); MAX_KERNELS];
            for k in 0..kernels.len() {
                let scale = fine[k].iter().map(|z| z.norm()).fold(T::zero(), |a, b| a.max(b));
                tol[k] = T::c(params.near_tolerance) * scale.max(T::min_positive_value());
            }
            adaptive(&f, &tri, fine, &tol, 0, params.max_depth)?
        }
    };
    Ok(m[..kernels.len()].to_vec())
}

/// Inverse of the moment matrix `V[n][j] = phi_n(xi_j)` of the six-point rule.
#[derive(Debug, Clone)]
pub struct MomentSolver<T> {
    inverse: Vec<Vec<T>>,
    pub condition: f64,
}

impl<T: Real> MomentSolver<T> {
    pub fn new(max_condition: f64) -> Result<Self, NystromError> {
        let v: Vec<Vec<T>> = (0..6)
            .map(|n| RULE6.iter().map(|&(a, b, _)| monomials([T::c(a), T::c(b)])[n]).collect())
            .collect();
        let condition = condition_1(&v).to_f64_lossy();
        if !(condition <= max_condition) {
            return Err(NystromError::IllConditioned { element: 0, condition });
        }
        let inverse = invert_real(&v).ok_or(NystromError::IllConditioned {
            element: 0,
            condition: f64::INFINITY,
        })?;
        Ok(Self { inverse, condition })
    }

    /// Weights `w` with `sum_j w_j phi_n(xi_j) = moments_n`.
    pub fn solve(&self, moments: &[Complex<T>; 6]) -> [Complex<T>; 6] {
        let mut w = [czero(); 6];
        for (j, wj) in w.iter_mut().enumerate() {
            for n in 0..6 {
                *wj += moments[n].scale(self.inverse[j][n]);
            }
        }
        w
    }
}

/// Corrected weights of kernel `kind` for point `i` over element `e`.
pub fn corrected_weights<T: Real>(
    kind: KernelKind,
    ctx: &WaveContext<T>,
    mesh: &Mesh<T>,
    points: &[QuadPoint<T>],
    i: usize,
    e: usize,
    params: &NystromParams,
) -> Result<[Complex<T>; 6], NystromError> {
    let solver = MomentSolver::new(params.max_condition)?;
    let kernel = LayeredKernel::from_kind(kind, ctx);
    let m = element_moments(&[kernel], mesh, points, i, e, params)?;
    Ok(solver.solve(&m[0]))
}

/// Moments of the given kernels for point `i` over element `e`.
pub fn element_moments<T: Real>(
    kernels: &[LayeredKernel<T>],
    mesh: &Mesh<T>,
    points: &[QuadPoint<T>],
    i: usize,
    e: usize,
    params: &NystromParams,
) -> Result<Vec<[Complex<T>; 6]>, NystromError> {
    let p = &points[i];
    let target = Collocation {
        position: p.position,
        normal: p.normal * T::c(params.normal_sign),
        on_element: (p.owner_element == e).then_some(p.intrinsic),
    };
    reference_integrals(kernels, &target, &mesh.element_map(e), params).map_err(|depth| NystromError::NoConvergence {
        element: e,
        point: i,
        depth,
    })
}

/// Sparse near-field blocks of the Burton-Miller kernels.
///
/// Row `i` holds, for every column `j` the fast summation does not cover,
/// the entry of the discrete operator, and for corrected columns it does
/// cover, the correction relative to the plain `K(x_i, y_j) w_j`.
#[derive(Debug, Clone)]
pub struct NearField<T> {
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    /// `G + alpha dG/dn_x` entries.
    pub g: Vec<Complex<T>>,
    /// `dG/dn_y + alpha d2G/dn_x dn_y` entries.
    pub h: Vec<Complex<T>>,
    /// Number of corrected columns per row.
    pub corrected: Vec<usize>,
}

/// Which Burton-Miller block to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    G,
    H,
}

impl<T: Real> NearField<T> {
    pub fn num_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn bytes(&self) -> usize {
        self.indptr.len() * 8 + self.indices.len() * 8 + (self.g.len() + self.h.len()) * std::mem::size_of::<Complex<T>>()
    }

    pub fn max_row_nnz(&self) -> usize {
        self.indptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    pub fn row(&self, i: usize, block: Block) -> (&[usize], &[Complex<T>]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        let v = match block {
            Block::G => &self.g[r.clone()],
            Block::H => &self.h[r.clone()],
        };
        (&self.indices[r], v)
    }

    pub fn apply(&self, block: Block, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let vals = match block {
            Block::G => &self.g,
            Block::H => &self.h,
        };
        (0..self.num_rows())
            .into_par_iter()
            .map(|i| {
                let mut s = czero();
                for p in self.indptr[i]..self.indptr[i + 1] {
                    s += vals[p] * x[self.indices[p]];
                }
                s
            })
            .collect()
    }

    /// Writes `row col kind` lines, kind `corrected` or `plain`.
    pub fn write_pattern<W: Write>(&self, mut w: W, corrected_cols: &dyn Fn(usize, usize) -> bool) -> std::io::Result<()> {
        writeln!(w, "row col kind")?;
        for i in 0..self.num_rows() {
            for &j in &self.indices[self.indptr[i]..self.indptr[i + 1]] {
                let kind = if corrected_cols(i, j) { "corrected" } else { "plain" };
                writeln!(w, "{i} {j} {kind}")?;
            }
        }
        Ok(())
    }
}

/// Assembles the near-field blocks of `BM_G` and `BM_H`.
///
/// With a tree, columns in the near leaves of a point's leaf are left to
/// this block (the fast summation skips them). Without a tree the block is
/// meant to be added to a plain sum over all `j != i`.
pub fn assemble_near<T: Real>(
    mesh: &Mesh<T>,
    ctx: &WaveContext<T>,
    tree: Option<&Octree<T>>,
    params: &NystromParams,
) -> Result<NearField<T>, NystromError> {
    let points = mesh.quadrature_points();
    let regions = LocalRegions::build(mesh, &points, params.region_factor);
    assemble_near_with(mesh, &points, &regions, ctx, tree, params)
}

pub fn assemble_near_with<T: Real>(
    mesh: &Mesh<T>,
    points: &[QuadPoint<T>],
    regions: &LocalRegions,
    ctx: &WaveContext<T>,
    tree: Option<&Octree<T>>,
    params: &NystromParams,
) -> Result<NearField<T>, NystromError> {
    let solver = MomentSolver::<T>::new(params.max_condition)?;
    let kg = LayeredKernel::from_kind(KernelKind::BmG, ctx);
    let kh = LayeredKernel::from_kind(KernelKind::BmH, ctx);
    let sign = T::c(params.normal_sign);
    let plain = |i: usize, j: usize| -> [Complex<T>; 2] {
        let (x, y) = (&points[i], &points[j]);
        let (nx, ny) = (x.normal * sign, y.normal * sign);
        [
            kg.eval(x.position, y.position, nx, ny) * y.weight,
            kh.eval(x.position, y.position, nx, ny) * y.weight,
        ]
    };
    let rows: Result<Vec<(Vec<(usize, [Complex<T>; 2])>, usize)>, NystromError> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut entries: Vec<(usize, [Complex<T>; 2])> = Vec::new();
            // Columns the fast summation leaves out.
            let mut excluded: Vec<usize> = match tree {
                Some(t) => t.near_field(t.leaf_of[i]).iter().flat_map(|&c| t.points_of(c).iter().copied()).collect(),
                None => vec![i],
            };
            excluded.sort_unstable();
            let is_excluded = |j: usize| excluded.binary_search(&j).is_ok();
            let region = regions.region(i);
            for &e in region {
                let m = element_moments(&[kg, kh], mesh, points, i, e, params)?;
                let wg = solver.solve(&m[0]);
                let wh = solver.solve(&m[1]);
                for n in 0..6 {
                    let j = 6 * e + n;
                    let mut v = [wg[n], wh[n]];
                    if !is_excluded(j) {
                        let p = plain(i, j);
                        v[0] -= p[0];
                        v[1] -= p[1];
                    }
                    entries.push((j, v));
                }
            }
            let corrected = entries.len();
            let mut in_region: Vec<usize> = region.to_vec();
            in_region.sort_unstable();
            for &j in &excluded {
                if j != i && in_region.binary_search(&points[j].owner_element).is_err() {
                    entries.push((j, plain(i, j)));
                }
            }
            entries.sort_unstable_by_key(|e| e.0);
            Ok((entries, corrected))
        })
        .collect();
    let rows = rows?;
    let mut out = NearField {
        indptr: Vec::with_capacity(points.len() + 1),
        indices: Vec::new(),
        g: Vec::new(),
        h: Vec::new(),
        corrected: Vec::with_capacity(points.len()),
    };
    out.indptr.push(0);
    for (entries, corrected) in rows {
        for (j, [g, h]) in entries {
            out.indices.push(j);
            out.g.push(g);
            out.h.push(h);
        }
        out.indptr.push(out.indices.len());
        out.corrected.push(corrected);
    }
    Ok(out)
}
