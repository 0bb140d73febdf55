//! Fast directional algorithm: equivalent surfaces, translation operators
//! and the upward, interaction and downward passes.
//!
//! Every cube carries one coefficient block per wedge. In the raw storage
//! mode a block holds equivalent densities (upward) or check potentials
//! (downward) at the equivalent points. In the reduced modes it holds the
//! same quantities in the truncated singular basis of the level, see
//! [`crate::compress`].

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_complex::Complex;
use num_traits::One;
use rayon::prelude::*;

use crate::geometry::{fibonacci_sphere, rotate, rotation_from_x, Vec3};
use crate::kernels::{LayeredKernel, SourceLayer, TargetLayer};
use crate::linalg::{pivoted_qr, svd, CMatrix};
use crate::octree::{DirectionGrid, Octree, Regime};
use crate::scalar::{czero, Real};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FdaError {
    #[error("cannot invert an all-zero matrix")]
    ZeroMatrix,
    #[error("equivalent point budget exhausted at residual {achieved:e} (target {target:e})")]
    Budget { achieved: f64, target: f64 },
    #[error("missing translation operator: {0}")]
    MissingOperator(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// How translation operators are stored and applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StorageMode {
    Raw,
    Reduced,
    LowRank,
}

impl StorageMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Reduced => "reduced",
            Self::LowRank => "low-rank",
        }
    }
}

impl std::str::FromStr for StorageMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "raw" => Ok(Self::Raw),
            "reduced" => Ok(Self::Reduced),
            "low-rank" | "lowrank" | "low_rank" => Ok(Self::LowRank),
            _ => Err(format!("unknown storage mode `{s}`")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdaParams {
    pub epsilon: f64,
    /// Low frequency points per cube edge; `None` uses [`default_points_per_edge`].
    pub lf_points_per_edge: Option<usize>,
    /// Side of the low frequency equivalent cube in units of the cube width.
    pub lf_equivalent_side: f64,
    pub lf_check_side: f64,
    /// Candidate density of the high frequency selection in points per wavelength.
    pub hf_points_per_wavelength: f64,
    /// Pivot tolerance of the candidate selection relative to `epsilon`.
    pub hf_selection_factor: f64,
    /// Store S2M and L2T matrices per leaf instead of forming them on the fly.
    pub precompute_leaf_operators: bool,
}

impl FdaParams {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            lf_points_per_edge: None,
            lf_equivalent_side: 1.3,
            lf_check_side: 3.0,
            hf_points_per_wavelength: 10.0,
            hf_selection_factor: 0.1,
            precompute_leaf_operators: false,
        }
    }

    pub fn points_per_edge(&self) -> usize {
        self.lf_points_per_edge.unwrap_or_else(|| default_points_per_edge(self.epsilon))
    }
}

/// `1e-2 -> 4`, `1e-4 -> 6`, `1e-6 -> 8`, `1e-8 -> 10`.
pub fn default_points_per_edge(epsilon: f64) -> usize {
    let digits = (-epsilon.log10()).max(1.0);
    let p = 2 + 2 * (digits / 2.0 - 1e-9).ceil() as usize;
    p.max(4)
}

/// Truncated pseudo-inverse `V diag(1/sigma) U^H`.
#[derive(Debug, Clone)]
pub struct TruncatedPinv<T> {
    /// `n x r` right singular vectors.
    pub v: CMatrix<T>,
    /// Retained singular values.
    pub sigma: Vec<T>,
    /// `r x m` adjoint of the left singular vectors.
    pub uh: CMatrix<T>,
    /// All singular values, for diagnostics.
    pub spectrum: Vec<T>,
}

impl<T: Real> TruncatedPinv<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `diag(1/sigma) U^H`, the map from check potentials to reduced coordinates.
    pub fn reduced_outgoing(&self) -> CMatrix<T> {
        let mut m = self.uh.clone();
        let inv: Vec<T> = self.sigma.iter().map(|&s| T::one() / s).collect();
        m.scale_rows(&inv);
        m
    }

    /// The dense pseudo-inverse.
    pub fn dense(&self) -> CMatrix<T> {
        self.v.matmul(&self.reduced_outgoing())
    }
}

/// Relative gap under which neighbouring singular values count as one cluster.
const CLUSTER_TOLERANCE: f64 = 1e-7;

/// Truncates the SVD of `r` at `sigma_i >= epsilon sigma_1`, extended so that
/// clusters of (numerically) equal singular values are kept whole.
pub fn truncated_pinv<T: Real>(r: &CMatrix<T>, epsilon: f64) -> Result<TruncatedPinv<T>, FdaError> {
    let mut s = svd(r);
    let s1 = s.sigma.first().copied().unwrap_or(T::zero());
    if s1 <= T::zero() {
        return Err(FdaError::ZeroMatrix);
    }
    let spectrum = s.sigma.clone();
    let mut rank = s.rank(T::c(epsilon));
    while rank > 0 && rank < spectrum.len() && spectrum[rank] > T::zero() {
        let gap = (spectrum[rank - 1] - spectrum[rank]) / spectrum[rank - 1];
        if gap < T::c(CLUSTER_TOLERANCE) {
            rank += 1;
        } else {
            break;
        }
    }
    s.truncate(rank);
    Ok(TruncatedPinv {
        v: s.v,
        sigma: s.sigma,
        uh: s.u.adjoint(),
        spectrum,
    })
}

/// Integer coordinates `2g - (p - 1)` of the surface nodes of a `p^3` lattice.
pub fn lattice_surface(p: usize) -> Vec<[i32; 3]> {
    assert!(p >= 2);
    let q = p as i32 - 1;
    let mut out = Vec::with_capacity(p * p * p - p.saturating_sub(2).pow(3));
    for i in 0..=q {
        for j in 0..=q {
            for k in 0..=q {
                if [i, j, k].iter().any(|&g| g == 0 || g == q) {
                    out.push([2 * i - q, 2 * j - q, 2 * k - q]);
                }
            }
        }
    }
    out
}

/// A signed axis permutation, `S e_r = sign[r] e_{perm[r]}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CubeSymmetry {
    pub perm: [usize; 3],
    pub sign: [i32; 3],
}

const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

impl CubeSymmetry {
    pub fn from_index(idx: usize) -> Self {
        let perm = PERMS[idx / 8];
        let bits = idx % 8;
        let sign = [0, 1, 2].map(|r| if bits >> r & 1 == 1 { -1 } else { 1 });
        Self { perm, sign }
    }

    pub fn index(&self) -> usize {
        let p = PERMS.iter().position(|q| *q == self.perm).expect("valid permutation");
        let bits: usize = (0..3).map(|r| usize::from(self.sign[r] < 0) << r).sum();
        p * 8 + bits
    }

    pub fn apply(&self, v: [i32; 3]) -> [i32; 3] {
        let mut out = [0; 3];
        for r in 0..3 {
            out[self.perm[r]] = self.sign[r] * v[r];
        }
        out
    }

    /// The canonical representative `o_c` (absolute values, descending) and a
    /// symmetry with `S o_c = o`.
    pub fn canonicalize(o: [i32; 3]) -> ([i32; 3], Self) {
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| o[b].abs().cmp(&o[a].abs()).then(a.cmp(&b)));
        let canon = order.map(|a| o[a].abs());
        let sign = order.map(|a| if o[a] < 0 { -1 } else { 1 });
        (canon, Self { perm: order, sign })
    }

    pub fn apply_inverse(&self, v: [i32; 3]) -> [i32; 3] {
        [0, 1, 2].map(|r| self.sign[r] * v[self.perm[r]])
    }

    pub fn apply_f64(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for r in 0..3 {
            out[self.perm[r]] = self.sign[r] as f64 * v[r];
        }
        out
    }

    /// Composition with the point reflection `-I`.
    pub fn negated(&self) -> Self {
        Self {
            perm: self.perm,
            sign: self.sign.map(|x| -x),
        }
    }

    /// Row-major matrix of the map.
    pub fn matrix<T: Real>(&self) -> [[T; 3]; 3] {
        let mut m = [[T::zero(); 3]; 3];
        for r in 0..3 {
            m[self.perm[r]][r] = T::c(self.sign[r] as f64);
        }
        m
    }

    pub fn is_identity(&self) -> bool {
        self.perm == [0, 1, 2] && self.sign == [1, 1, 1]
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone)]
pub struct SparseOp<T> {
    pub rows: usize,
    pub cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<Complex<T>>,
}

impl<T: Real> SparseOp<T> {
    /// `x'_j = x_{pi(j)}`.
    pub fn gather(pi: &[usize]) -> Self {
        Self {
            rows: pi.len(),
            cols: pi.len(),
            indptr: (0..=pi.len()).collect(),
            indices: pi.to_vec(),
            values: vec![Complex::one(); pi.len()],
        }
    }

    /// Keeps the entries of a dense matrix above `drop` in modulus.
    pub fn from_dense(m: &CMatrix<T>, drop: T) -> Self {
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..m.rows() {
            for (j, v) in m.row(i).iter().enumerate() {
                if v.norm() > drop {
                    indices.push(j);
                    values.push(*v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            rows: m.rows(),
            cols: m.cols(),
            indptr,
            indices,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn bytes(&self) -> usize {
        self.nnz() * (std::mem::size_of::<Complex<T>>() + std::mem::size_of::<usize>())
            + self.indptr.len() * std::mem::size_of::<usize>()
    }

    pub fn apply_into(&self, x: &[Complex<T>], y: &mut [Complex<T>]) {
        for i in 0..self.rows {
            let mut s = czero();
            for p in self.indptr[i]..self.indptr[i + 1] {
                s += self.values[p] * x[self.indices[p]];
            }
            y[i] = s;
        }
    }

    /// `y += self^T x`.
    pub fn apply_transpose_add(&self, x: &[Complex<T>], y: &mut [Complex<T>]) {
        for i in 0..self.rows {
            let xi = x[i];
            for p in self.indptr[i]..self.indptr[i + 1] {
                y[self.indices[p]] += self.values[p] * xi;
            }
        }
    }
}

/// Geometry of the candidate sets of one high frequency level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HfGeometry {
    /// Radius of the ball around the cube center holding every source.
    pub source_radius: f64,
    /// Smallest distance of a target from the cube center.
    pub min_distance: f64,
    /// Half angle of the target cone around the wedge direction.
    pub half_angle: f64,
}

/// Equivalent and check points of one level; for high frequency levels in
/// the canonical direction `e_x`.
#[derive(Debug, Clone)]
pub struct EquivSurface<T> {
    pub width: T,
    pub regime: Regime,
    /// Relative to the cube center.
    pub equivalent: Vec<Vec3<T>>,
    pub check: Vec<Vec3<T>>,
    /// Factors of `R_up^+` with `R_up = G(check, equivalent)`.
    pub pinv: TruncatedPinv<T>,
    /// Integer lattice coordinates of the low frequency points.
    pub lattice: Option<Vec<[i32; 3]>>,
    pub geometry: Option<HfGeometry>,
}

impl<T: Real> EquivSurface<T> {
    pub fn equivalent_at(&self, center: Vec3<T>, rot: Option<&[[T; 3]; 3]>) -> Vec<Vec3<T>> {
        place(&self.equivalent, center, rot)
    }

    pub fn check_at(&self, center: Vec3<T>, rot: Option<&[[T; 3]; 3]>) -> Vec<Vec3<T>> {
        place(&self.check, center, rot)
    }

    /// `R_up = G(check, equivalent)`.
    pub fn r_up(&self, k: T) -> CMatrix<T> {
        LayeredKernel::single(k).block(&self.check, &[], &self.equivalent, &[])
    }

    /// Index permutation `pi` with `S b_j = b_{pi(j)}` for low frequency surfaces.
    pub fn symmetry_permutation(&self, s: &CubeSymmetry) -> Option<Vec<usize>> {
        let lat = self.lattice.as_ref()?;
        let index: HashMap<[i32; 3], usize> = lat.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        lat.iter().map(|c| index.get(&s.apply(*c)).copied()).collect()
    }
}

fn place<T: Real>(pts: &[Vec3<T>], center: Vec3<T>, rot: Option<&[[T; 3]; 3]>) -> Vec<Vec3<T>> {
    pts.iter()
        .map(|&p| match rot {
            Some(r) => center + rotate(r, p),
            None => center + p,
        })
        .collect()
}

/// Orthogonal frame of a wedge: `S R_rep` where `R_rep` rotates `e_x` onto
/// the center of the orbit representative and `S` maps the representative
/// onto the wedge. Wedges `d` and `-d` use `S` and `-S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WedgeFrame {
    pub representative: u32,
    pub symmetry: CubeSymmetry,
}

/// Image of a wedge under a cube symmetry.
pub fn map_wedge(grid: &DirectionGrid, s: &CubeSymmetry, id: u32) -> u32 {
    grid.assign(s.apply_f64(grid.center(id).0))
}

/// Frames of every wedge of a grid.
pub fn wedge_frames(grid: &DirectionGrid) -> Vec<WedgeFrame> {
    let n = grid.count();
    let mut frames: Vec<Option<WedgeFrame>> = vec![None; n];
    for r in 0..n as u32 {
        if frames[r as usize].is_some() {
            continue;
        }
        for idx in 0..48 {
            let s = CubeSymmetry::from_index(idx);
            let d = map_wedge(grid, &s, r);
            if frames[d as usize].is_none() {
                frames[d as usize] = Some(WedgeFrame {
                    representative: r,
                    symmetry: s,
                });
                frames[grid.negate(d) as usize] = Some(WedgeFrame {
                    representative: r,
                    symmetry: s.negated(),
                });
            }
        }
    }
    frames.into_iter().map(|f| f.expect("every wedge lies in an orbit")).collect()
}

/// Orthogonal map taking `e_x` to the center of a wedge.
pub fn wedge_rotation<T: Real>(grid: &DirectionGrid, frame: &WedgeFrame) -> [[T; 3]; 3] {
    let base: [[T; 3]; 3] = rotation_from_x(Vec3::from_f64(grid.center(frame.representative).0));
    let s = frame.symmetry.matrix::<T>();
    let mut m = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|r| s[i][r] * base[r][j]).sum();
        }
    }
    m
}

/// Low frequency surface of a cube of width `w`.
pub fn lf_surface<T: Real>(k: T, w: T, params: &FdaParams) -> Result<EquivSurface<T>, FdaError> {
    let p = params.points_per_edge();
    let lattice = lattice_surface(p);
    let unit = T::one() / T::from_usize_lossy(2 * (p - 1));
    let at = |side: f64| -> Vec<Vec3<T>> {
        let h = w * T::c(side) * unit;
        lattice
            .iter()
            .map(|c| Vec3::new(T::c(c[0] as f64) * h, T::c(c[1] as f64) * h, T::c(c[2] as f64) * h))
            .collect()
    };
    let equivalent = at(params.lf_equivalent_side);
    let check = at(params.lf_check_side);
    let r = LayeredKernel::single(k).block(&check, &[], &equivalent, &[]);
    let pinv = truncated_pinv(&r, params.epsilon)?;
    Ok(EquivSurface {
        width: w,
        regime: Regime::Low,
        equivalent,
        check,
        pinv,
        lattice: Some(lattice),
        geometry: None,
    })
}

/// Candidate sources on the surfaces of two concentric boxes and candidate
/// targets in the cone of half angle `half_angle` around `e_x`.
fn hf_candidates(k: f64, geo: &HfGeometry, per_wavelength: f64) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let lambda = 2.0 * std::f64::consts::PI / k;
    let mut sources = Vec::new();
    for (scale, min_n) in [(1.0, 8usize), (0.6, 5)] {
        let h = geo.source_radius * scale;
        let n = ((2.0 * h * per_wavelength / lambda).ceil() as usize + 1).max(min_n);
        for c in lattice_surface(n) {
            let f = h / (n - 1) as f64;
            sources.push([c[0] as f64 * f, c[1] as f64 * f, c[2] as f64 * f]);
        }
    }
    // Angular bandwidth of a field radiated from inside the source ball.
    let band = k * geo.source_radius + 8.0;
    let full = (per_wavelength * 0.5 * band * band).ceil() as usize;
    let cos_t = geo.half_angle.min(std::f64::consts::PI).cos();
    let dirs: Vec<Vec3<f64>> = fibonacci_sphere::<f64>(full.max(64)).into_iter().filter(|d| d.x() >= cos_t).collect();
    let mut dirs = dirs;
    dirs.push(Vec3::new(1.0, 0.0, 0.0));
    // Radii uniform in 1/r from the inner distance out to 50x.
    let nr = 12;
    let mut targets = Vec::new();
    for j in 0..nr {
        let u = 1.0 - (1.0 - 0.02) * j as f64 / (nr - 1) as f64;
        let r = geo.min_distance / u;
        for d in &dirs {
            targets.push([d.x() * r, d.y() * r, d.z() * r]);
        }
    }
    (sources, targets)
}

/// High frequency surface for the canonical direction `e_x`.
pub fn hf_surface<T: Real>(k: T, w: T, geo: &HfGeometry, params: &FdaParams) -> Result<EquivSurface<T>, FdaError> {
    let kf = k.to_f64_lossy();
    let (src, tgt) = hf_candidates(kf, geo, params.hf_points_per_wavelength);
    let src: Vec<Vec3<T>> = src.into_iter().map(Vec3::from_f64).collect();
    let tgt: Vec<Vec3<T>> = tgt.into_iter().map(Vec3::from_f64).collect();
    let kernel = LayeredKernel::single(k);
    // Row subsample for the column selection.
    let row_cap = 1200usize;
    let stride = tgt.len().div_ceil(row_cap).max(1);
    let rows: Vec<Vec3<T>> = tgt.iter().step_by(stride).copied().collect();
    let a = kernel.block(&rows, &[], &src, &[]);
    let tol = T::c(params.epsilon * params.hf_selection_factor);
    let qr = pivoted_qr(&a, tol, a.rows().min(a.cols()));
    let cols: Vec<usize> = qr.perm[..qr.rank].to_vec();
    let equivalent: Vec<Vec3<T>> = cols.iter().map(|&j| src[j]).collect();
    let b = kernel.block(&equivalent, &[], &tgt, &[]);
    let qr_rows = pivoted_qr(&b, T::c(0.0), equivalent.len());
    let check: Vec<Vec3<T>> = qr_rows.perm[..qr_rows.rank].iter().map(|&i| tgt[i]).collect();
    let r = kernel.block(&check, &[], &equivalent, &[]);
    let pinv = truncated_pinv(&r, params.epsilon)?;
    Ok(EquivSurface {
        width: w,
        regime: Regime::High,
        equivalent,
        check,
        pinv,
        lattice: None,
        geometry: Some(*geo),
    })
}

/// Equivalent surface of width `w` in direction `dir` (`None` for low frequency).
pub fn sample_equiv_points<T: Real>(
    k: T,
    w: T,
    dir: Option<(&DirectionGrid, u32)>,
    geo: Option<&HfGeometry>,
    params: &FdaParams,
) -> Result<EquivSurface<T>, FdaError> {
    match (dir, geo) {
        (None, _) => lf_surface(k, w, params),
        (Some((grid, id)), Some(g)) => {
            let mut s = hf_surface(k, w, g, params)?;
            let frames = wedge_frames(grid);
            let rot = wedge_rotation::<T>(grid, &frames[id as usize]);
            s.equivalent = s.equivalent_at(Vec3::zero(), Some(&rot));
            s.check = s.check_at(Vec3::zero(), Some(&rot));
            Ok(s)
        }
        (Some(_), None) => Err(FdaError::MissingOperator("high frequency geometry".into())),
    }
}

/// Target cones and source balls of every high frequency level that
/// carries wedges, from the coarsest level down.
pub fn hf_geometries<T: Real>(tree: &Octree<T>, params: &FdaParams) -> Vec<Option<HfGeometry>> {
    let n = tree.num_levels();
    let mut out: Vec<Option<HfGeometry>> = vec![None; n];
    let root3 = 3f64.sqrt();
    for l in 0..n {
        let info = &tree.level_info[l];
        let grid = match (info.regime, info.directions) {
            (Regime::High, Some(g)) => g,
            _ => continue,
        };
        if tree.levels[l].iter().all(|&c| tree.directions[c].is_empty()) {
            continue;
        }
        let w = info.width.to_f64_lossy();
        let rho = (0..grid.count() as u32).map(|id| grid.angular_radius(id)).fold(0.0, f64::max);
        let mut radius = root3 * 0.5 * w;
        if l + 1 < n && tree.level_info[l + 1].regime == Regime::Low {
            radius = radius.max(root3 * (0.25 + params.lf_equivalent_side / 4.0) * w);
        }
        let sep = (info.near_radius + 1) as f64 * w;
        let mut half_angle = rho + (radius / sep).min(1.0).asin();
        let mut min_distance = sep - radius;
        if let Some(parent) = l.checked_sub(1).and_then(|p| out[p]) {
            let shift = root3 * 0.5 * w;
            half_angle = half_angle.max(parent.half_angle + rho + (shift / parent.min_distance).min(1.0).asin());
            min_distance = min_distance.min(parent.min_distance - shift);
        }
        out[l] = Some(HfGeometry {
            source_radius: radius,
            min_distance,
            half_angle,
        });
    }
    out
}

/// Key of a cached interaction matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum M2lKey {
    /// Canonical offset (absolute values, descending).
    Low([i32; 3]),
    /// Offset and target wedge, mapped back to the orbit representative.
    High([i32; 3], u32),
}

/// How a cached class matrix maps onto a particular interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum M2lTransform {
    Identity,
    /// Conjugation by the basis action of a cube symmetry.
    Symmetry(u8),
}

#[derive(Debug, Clone)]
pub enum M2lOperator<T> {
    Dense(CMatrix<T>),
    /// `K = U V`.
    Factored { u: CMatrix<T>, v: CMatrix<T> },
}

impl<T: Real> M2lOperator<T> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Self::Dense(k) => k.shape(),
            Self::Factored { u, v } => (u.rows(), v.cols()),
        }
    }

    pub fn bytes(&self) -> usize {
        match self {
            Self::Dense(k) => k.bytes(),
            Self::Factored { u, v } => u.bytes() + v.bytes(),
        }
    }

    pub fn to_dense(&self) -> CMatrix<T> {
        match self {
            Self::Dense(k) => k.clone(),
            Self::Factored { u, v } => u.matmul(v),
        }
    }
}

/// Translation operators of one level.
#[derive(Debug, Clone)]
pub struct LevelOperators<T> {
    pub level: usize,
    pub width: T,
    pub regime: Regime,
    pub surface: Option<Arc<EquivSurface<T>>>,
    /// Length of a coefficient block.
    pub state_dim: usize,
    /// Check potentials to coefficients: `R_up^+` (raw) or `diag(1/sigma) U^H`.
    pub outgoing: CMatrix<T>,
    /// Coefficients to equivalent densities; `None` is the identity.
    pub basis: Option<CMatrix<T>>,
    /// M2M into this level keyed by (child octant, parent wedge).
    pub m2m: HashMap<(u8, u32), CMatrix<T>>,
    pub m2l: Vec<M2lOperator<T>>,
    pub m2l_keys: Vec<M2lKey>,
    pub m2l_index: HashMap<M2lKey, usize>,
    /// Basis action of the cube symmetries, indexed by [`CubeSymmetry::index`].
    pub symmetries: Vec<Option<SparseOp<T>>>,
    /// Frames of the high frequency wedges.
    pub frames: Vec<WedgeFrame>,
}

impl<T: Real> LevelOperators<T> {
    pub fn bytes(&self) -> usize {
        self.outgoing.bytes()
            + self.basis.as_ref().map_or(0, |b| b.bytes())
            + self.m2m.values().map(|m| m.bytes()).sum::<usize>()
            + self.m2l.iter().map(|m| m.bytes()).sum::<usize>()
            + self.symmetries.iter().flatten().map(|s| s.bytes()).sum::<usize>()
    }

    /// Equivalent and check points of a cube in wedge `dir`.
    pub fn points(&self, tree: &Octree<T>, center: Vec3<T>, dir: u32) -> (Vec<Vec3<T>>, Vec<Vec3<T>>) {
        let s = self.surface.as_ref().expect("surface of an active level");
        match (self.regime, tree.level_info[self.level].directions) {
            (Regime::High, Some(g)) => {
                let rot = wedge_rotation::<T>(&g, &self.frames[dir as usize]);
                (s.equivalent_at(center, Some(&rot)), s.check_at(center, Some(&rot)))
            }
            _ => (s.equivalent_at(center, None), s.check_at(center, None)),
        }
    }
}

/// All translation operators of a tree.
#[derive(Debug, Clone)]
pub struct TranslationCache<T> {
    pub mode: StorageMode,
    pub k: T,
    pub epsilon: f64,
    /// Coarsest level holding interactions; coarser levels carry no blocks.
    pub first_active: usize,
    pub levels: Vec<LevelOperators<T>>,
    /// Fingerprint of the tree the cache was built for.
    pub tree_signature: u64,
}

/// Octant of a child relative to its parent, bit `a` set for the upper half of axis `a`.
pub fn octant(child_anchor: [i32; 3], parent_anchor: [i32; 3]) -> u8 {
    (0..3).map(|a| ((child_anchor[a] - 2 * parent_anchor[a]) as u8) << a).sum()
}

/// Key and transform of an interaction entry. High frequency frames are
/// symmetric images of each other, so those classes need no transform.
pub fn m2l_key<T: Real>(
    tree: &Octree<T>,
    level: usize,
    frames: &[WedgeFrame],
    it: &crate::octree::Interaction,
) -> (M2lKey, M2lTransform) {
    match tree.level_info[level].directions {
        Some(_) if tree.level_info[level].regime == Regime::High => {
            let f = &frames[it.dir as usize];
            (M2lKey::High(f.symmetry.apply_inverse(it.offset), f.representative), M2lTransform::Identity)
        }
        _ => {
            let (canon, sym) = CubeSymmetry::canonicalize(it.offset);
            let t = if sym.is_identity() {
                M2lTransform::Identity
            } else {
                M2lTransform::Symmetry(sym.index() as u8)
            };
            (M2lKey::Low(canon), t)
        }
    }
}

/// Deterministic fingerprint of the tree structure and wave number.
pub fn tree_signature<T: Real>(tree: &Octree<T>) -> u64 {
    // FNV-1a over levels, anchors and point ranges.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    eat(tree.k.to_f64_lossy().to_bits());
    eat(tree.root_width.to_f64_lossy().to_bits());
    for c in &tree.cubes {
        eat(c.level as u64);
        for a in c.anchor {
            eat(a as i64 as u64);
        }
        eat((c.end - c.start) as u64);
    }
    h
}

fn first_active_level<T: Real>(tree: &Octree<T>) -> usize {
    (0..tree.num_levels())
        .find(|&l| tree.levels[l].iter().any(|&c| !tree.interactions[c].is_empty()))
        .unwrap_or(tree.num_levels())
}

/// Wedges in which a cube carries blocks.
pub fn cube_wedges<'a, T: Real>(tree: &'a Octree<T>, first_active: usize, c: usize) -> &'a [u32] {
    let cube = &tree.cubes[c];
    if cube.level < first_active {
        &[]
    } else {
        &tree.directions[c]
    }
}

impl<T: Real> TranslationCache<T> {
    /// Builds the raw cache: surfaces, M2M and every occurring M2L class.
    pub fn build(tree: &Octree<T>, params: &FdaParams) -> Result<Self, FdaError> {
        let k = tree.k;
        let first_active = first_active_level(tree);
        let geos = hf_geometries(tree, params);
        let n = tree.num_levels();
        let mut levels = Vec::with_capacity(n);
        for l in 0..n {
            let info = &tree.level_info[l];
            let active = l >= first_active && tree.levels[l].iter().any(|&c| !cube_wedges(tree, first_active, c).is_empty());
            let surface = if !active {
                None
            } else if info.regime == Regime::Low {
                Some(Arc::new(lf_surface(k, info.width, params)?))
            } else {
                let g = geos[l].ok_or_else(|| FdaError::MissingOperator(format!("geometry of level {l}")))?;
                Some(Arc::new(hf_surface(k, info.width, &g, params)?))
            };
            let (state_dim, outgoing) = match &surface {
                Some(s) => (s.equivalent.len(), s.pinv.dense()),
                None => (0, CMatrix::zeros(0, 0)),
            };
            levels.push(LevelOperators {
                level: l,
                width: info.width,
                regime: info.regime,
                surface,
                state_dim,
                outgoing,
                basis: None,
                m2m: HashMap::new(),
                m2l: Vec::new(),
                m2l_keys: Vec::new(),
                m2l_index: HashMap::new(),
                symmetries: vec![None; 48],
                frames: match (info.regime, info.directions) {
                    (Regime::High, Some(g)) if active => wedge_frames(&g),
                    _ => Vec::new(),
                },
            });
        }
        let mut cache = TranslationCache {
            mode: StorageMode::Raw,
            k,
            epsilon: params.epsilon,
            first_active,
            levels,
            tree_signature: tree_signature(tree),
        };
        for l in first_active..n {
            cache.build_m2m(tree, l);
            cache.build_m2l(tree, l);
        }
        Ok(cache)
    }

    pub fn bytes(&self) -> usize {
        self.levels.iter().map(|l| l.bytes()).sum()
    }

    /// Raw M2M matrices into level `l` (as parent) from level `l + 1`.
    fn build_m2m(&mut self, tree: &Octree<T>, l: usize) {
        if l + 1 >= tree.num_levels() || self.levels[l].surface.is_none() || self.levels[l + 1].surface.is_none() {
            return;
        }
        let mut keys: Vec<(u8, u32)> = Vec::new();
        for &p in &tree.levels[l] {
            let cube = &tree.cubes[p];
            for &ch in &cube.children {
                let q = octant(tree.cubes[ch].anchor, cube.anchor);
                for &d in cube_wedges(tree, self.first_active, p) {
                    keys.push((q, d));
                }
            }
        }
        keys.sort_unstable();
        keys.dedup();
        let parent = &self.levels[l];
        let child = &self.levels[l + 1];
        let k = self.k;
        let w_child = child.width;
        let built: Vec<((u8, u32), CMatrix<T>)> = keys
            .par_iter()
            .map(|&(q, d)| {
                let pc = Vec3::zero();
                let (_, check) = parent.points(tree, pc, d);
                let off = octant_offset(q, w_child);
                let cd = child_wedge(tree, l, d);
                let (eq, _) = child.points(tree, off, cd);
                let e = LayeredKernel::single(k).block(&check, &[], &eq, &[]);
                ((q, d), parent.outgoing.matmul(&e))
            })
            .collect();
        self.levels[l].m2m = built.into_iter().collect();
    }

    /// Raw M2L classes of level `l`.
    fn build_m2l(&mut self, tree: &Octree<T>, l: usize) {
        if self.levels[l].surface.is_none() {
            return;
        }
        let mut keys: Vec<M2lKey> = Vec::new();
        let mut syms = vec![false; 48];
        for &b in &tree.levels[l] {
            for it in &tree.interactions[b] {
                let (key, t) = m2l_key(tree, l, &self.levels[l].frames, it);
                keys.push(key);
                if let M2lTransform::Symmetry(s) = t {
                    syms[s as usize] = true;
                }
            }
        }
        keys.sort_unstable();
        keys.dedup();
        let lev = &self.levels[l];
        let k = self.k;
        let w = lev.width;
        let mats: Vec<M2lOperator<T>> = keys
            .par_iter()
            .map(|key| M2lOperator::Dense(raw_m2l(tree, lev, k, w, key)))
            .collect();
        let lev = &mut self.levels[l];
        lev.m2l_index = keys.iter().enumerate().map(|(i, key)| (*key, i)).collect();
        lev.m2l_keys = keys;
        lev.m2l = mats;
        if let Some(s) = lev.surface.clone() {
            for (idx, used) in syms.into_iter().enumerate() {
                if used {
                    let pi = s
                        .symmetry_permutation(&CubeSymmetry::from_index(idx))
                        .expect("low frequency lattice is symmetric");
                    lev.symmetries[idx] = Some(SparseOp::gather(&pi));
                }
            }
        }
    }
}

/// Center of the child in octant `q` relative to the parent center.
pub fn octant_offset<T: Real>(q: u8, w_child: T) -> Vec3<T> {
    let h = w_child * T::c(0.5);
    Vec3([0, 1, 2].map(|a| if q >> a & 1 == 1 { h } else { -h }))
}

/// Wedge of a child block feeding parent wedge `d` of level `l`.
pub fn child_wedge<T: Real>(tree: &Octree<T>, l: usize, d: u32) -> u32 {
    match (tree.level_info[l].directions, tree.level_info[l + 1].regime) {
        (Some(g), Regime::High) => g.coarse(d),
        _ => 0,
    }
}

/// Interaction matrix of a class between the target incoming check points and
/// the source outgoing equivalent points.
pub fn raw_m2l<T: Real>(tree: &Octree<T>, lev: &LevelOperators<T>, k: T, w: T, key: &M2lKey) -> CMatrix<T> {
    let (offset, dir) = match *key {
        M2lKey::Low(o) => (o, 0),
        M2lKey::High(o, d) => (o, d),
    };
    let src_center = Vec3([0, 1, 2].map(|a| T::c(offset[a] as f64) * w));
    let src_dir = match tree.level_info[lev.level].directions {
        Some(g) if lev.regime == Regime::High => g.negate(dir),
        _ => 0,
    };
    let (tgt_pts, _) = lev.points(tree, Vec3::zero(), dir);
    let (src_pts, _) = lev.points(tree, src_center, src_dir);
    LayeredKernel::single(k).block(&tgt_pts, &[], &src_pts, &[])
}

/// Wall time per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub s2m: Duration,
    pub m2m: Duration,
    pub m2l: Duration,
    pub l2l: Duration,
    pub l2t: Duration,
    pub near: Duration,
}

impl PhaseTimes {
    pub fn upward(&self) -> Duration {
        self.s2m + self.m2m
    }

    pub fn downward(&self) -> Duration {
        self.l2l + self.l2t
    }

    pub fn total(&self) -> Duration {
        self.s2m + self.m2m + self.m2l + self.l2l + self.l2t + self.near
    }
}

impl std::ops::AddAssign for PhaseTimes {
    fn add_assign(&mut self, o: Self) {
        self.s2m += o.s2m;
        self.m2m += o.m2m;
        self.m2l += o.m2l;
        self.l2l += o.l2l;
        self.l2t += o.l2t;
        self.near += o.near;
    }
}

/// Stored S2M and L2T matrices of every (leaf, wedge) block.
#[derive(Debug, Clone, Default)]
struct LeafOperators<T> {
    sources: Vec<(SourceLayer<T>, Vec<CMatrix<T>>)>,
    targets: Vec<(TargetLayer<T>, Vec<CMatrix<T>>)>,
}

#[derive(Debug, Clone)]
struct Batch {
    class: usize,
    /// (source block offset, target block offset, symmetry index or 255).
    items: Vec<(usize, usize, u8)>,
}

const NO_SYMMETRY: u8 = u8::MAX;

/// The far-field operator of a point set.
pub struct FdaOperator<T: Real> {
    pub tree: Arc<Octree<T>>,
    pub points: Arc<Vec<Vec3<T>>>,
    pub normals: Arc<Vec<Vec3<T>>>,
    pub cache: Arc<TranslationCache<T>>,
    /// Block offset of each cube's first wedge, `usize::MAX` when absent.
    offsets: Vec<usize>,
    total: usize,
    batches: Vec<Vec<Batch>>,
    leaf_blocks: Vec<(usize, usize)>,
    leaf_ops: Option<LeafOperators<T>>,
}

impl<T: Real> FdaOperator<T> {
    pub fn new(
        tree: Arc<Octree<T>>,
        points: Arc<Vec<Vec3<T>>>,
        normals: Arc<Vec<Vec3<T>>>,
        cache: Arc<TranslationCache<T>>,
    ) -> Result<Self, FdaError> {
        if cache.tree_signature != tree_signature(&tree) {
            return Err(FdaError::MissingOperator("cache was built for a different tree".into()));
        }
        let mut offsets = vec![usize::MAX; tree.cubes.len()];
        let mut total = 0;
        for (c, cube) in tree.cubes.iter().enumerate() {
            let wedges = cube_wedges(&tree, cache.first_active, c);
            if !wedges.is_empty() {
                offsets[c] = total;
                total += wedges.len() * cache.levels[cube.level].state_dim;
            }
        }
        let block = |c: usize, d: u32| -> usize {
            let slot = tree.direction_slot(c, d).expect("wedge present in cube");
            offsets[c] + slot * cache.levels[tree.cubes[c].level].state_dim
        };
        let mut batches = Vec::with_capacity(tree.num_levels());
        for l in 0..tree.num_levels() {
            let mut groups: HashMap<usize, Vec<(usize, usize, u8)>> = HashMap::new();
            if l >= cache.first_active {
                let lev = &cache.levels[l];
                let grid = tree.level_info[l].directions;
                for &b in &tree.levels[l] {
                    for it in &tree.interactions[b] {
                        let (key, t) = m2l_key(&tree, l, &lev.frames, it);
                        let class = *lev
                            .m2l_index
                            .get(&key)
                            .ok_or_else(|| FdaError::MissingOperator(format!("M2L class {key:?}")))?;
                        let (tdir, sdir) = match grid {
                            Some(g) if lev.regime == Regime::High => (it.dir, g.negate(it.dir)),
                            _ => (0, 0),
                        };
                        let sym = match t {
                            M2lTransform::Identity => NO_SYMMETRY,
                            M2lTransform::Symmetry(s) => s,
                        };
                        groups.entry(class).or_default().push((block(it.other, sdir), block(b, tdir), sym));
                    }
                }
            }
            let mut v: Vec<Batch> = groups.into_iter().map(|(class, items)| Batch { class, items }).collect();
            v.sort_by_key(|b| b.class);
            batches.push(v);
        }
        let mut leaf_blocks = Vec::new();
        for c in tree.leaves() {
            for &d in cube_wedges(&tree, cache.first_active, c) {
                leaf_blocks.push((c, d as usize));
            }
        }
        Ok(Self {
            tree,
            points,
            normals,
            cache,
            offsets,
            total,
            batches,
            leaf_blocks,
            leaf_ops: None,
        })
    }

    /// Replaces the cache (same tree and class tables) keeping the plan.
    pub fn with_cache(&self, cache: Arc<TranslationCache<T>>) -> Result<Self, FdaError> {
        Self::new(self.tree.clone(), self.points.clone(), self.normals.clone(), cache)
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Number of coefficient entries per pass.
    pub fn density_len(&self) -> usize {
        self.total
    }

    /// Stores S2M matrices for the given source layers and L2T matrices for
    /// the given target layers.
    pub fn precompute_leaf_operators(&mut self, sources: &[SourceLayer<T>], targets: &[TargetLayer<T>]) {
        let mut ops = LeafOperators::default();
        for &s in sources {
            let mats: Vec<CMatrix<T>> = self.leaf_blocks.par_iter().map(|&(c, d)| self.s2m_matrix(c, d as u32, s)).collect();
            ops.sources.push((s, mats));
        }
        for &t in targets {
            let mats: Vec<CMatrix<T>> = self.leaf_blocks.par_iter().map(|&(c, d)| self.l2t_matrix(c, d as u32, t)).collect();
            ops.targets.push((t, mats));
        }
        self.leaf_ops = Some(ops);
    }

    pub fn leaf_operator_bytes(&self) -> usize {
        self.leaf_ops.as_ref().map_or(0, |o| {
            o.sources.iter().flat_map(|(_, m)| m).map(|m| m.bytes()).sum::<usize>()
                + o.targets.iter().flat_map(|(_, m)| m).map(|m| m.bytes()).sum::<usize>()
        })
    }

    fn level_points(&self, c: usize, d: u32) -> (Vec<Vec3<T>>, Vec<Vec3<T>>) {
        let cube = &self.tree.cubes[c];
        self.cache.levels[cube.level].points(&self.tree, cube.center, d)
    }

    /// `S = O E_up` of one leaf block.
    pub fn s2m_matrix(&self, c: usize, d: u32, layer: SourceLayer<T>) -> CMatrix<T> {
        let (_, check) = self.level_points(c, d);
        let idx = self.tree.points_of(c);
        let y: Vec<Vec3<T>> = idx.iter().map(|&i| self.points[i]).collect();
        let ny: Vec<Vec3<T>> = idx.iter().map(|&i| self.normals[i]).collect();
        let kernel = LayeredKernel {
            k: self.cache.k,
            source: layer,
            target: TargetLayer::Potential,
        };
        let e = kernel.block(&check, &[], &y, &ny);
        self.cache.levels[self.tree.cubes[c].level].outgoing.matmul(&e)
    }

    /// `T = E_dn O^T` of one leaf block.
    pub fn l2t_matrix(&self, c: usize, d: u32, layer: TargetLayer<T>) -> CMatrix<T> {
        let (_, check) = self.level_points(c, d);
        let idx = self.tree.points_of(c);
        let x: Vec<Vec3<T>> = idx.iter().map(|&i| self.points[i]).collect();
        let nx: Vec<Vec3<T>> = idx.iter().map(|&i| self.normals[i]).collect();
        let kernel = LayeredKernel {
            k: self.cache.k,
            source: SourceLayer::Monopole,
            target: layer,
        };
        let e = kernel.block(&x, &nx, &check, &[]);
        e.matmul(&self.cache.levels[self.tree.cubes[c].level].outgoing.transpose())
    }

    /// Far-field potentials at every point (original order).
    pub fn apply(&self, kernel: &LayeredKernel<T>, q: &[Complex<T>]) -> Vec<Complex<T>> {
        self.apply_timed(kernel, q).0
    }

    pub fn apply_timed(&self, kernel: &LayeredKernel<T>, q: &[Complex<T>]) -> (Vec<Complex<T>>, PhaseTimes) {
        assert_eq!(q.len(), self.points.len(), "charge vector length");
        let mut times = PhaseTimes::default();
        let mut out = vec![czero(); q.len()];
        if self.total == 0 {
            return (out, times);
        }
        let tree = &*self.tree;
        let cache = &*self.cache;
        let nlev = tree.num_levels();
        let mut up = vec![czero::<T>(); self.total];
        let mut down = vec![czero::<T>(); self.total];

        // S2M
        let t0 = Instant::now();
        let src_ops = self
            .leaf_ops
            .as_ref()
            .and_then(|o| o.sources.iter().find(|(s, _)| *s == kernel.source).map(|(_, m)| m));
        let blocks: Vec<(usize, Vec<Complex<T>>)> = self
            .leaf_blocks
            .par_iter()
            .enumerate()
            .map(|(bi, &(c, d))| {
                let idx = tree.points_of(c);
                let ql: Vec<Complex<T>> = idx.iter().map(|&i| q[i]).collect();
                let v = match src_ops {
                    Some(m) => m[bi].matvec(&ql),
                    None => self.s2m_on_the_fly(c, d as u32, kernel.source, &ql),
                };
                (self.block_offset(c, d as u32), v)
            })
            .collect();
        for (off, v) in blocks {
            up[off..off + v.len()].copy_from_slice(&v);
        }
        times.s2m = t0.elapsed();

        // M2M, finest parents first.
        let t0 = Instant::now();
        for l in (cache.first_active..nlev.saturating_sub(1)).rev() {
            let lev = &cache.levels[l];
            let sd = lev.state_dim;
            let child_dim = cache.levels[l + 1].state_dim;
            let results: Vec<(usize, Vec<Complex<T>>)> = tree.levels[l]
                .par_iter()
                .filter(|&&p| !tree.cubes[p].is_leaf() && self.offsets[p] != usize::MAX)
                .flat_map_iter(|&p| {
                    let cube = &tree.cubes[p];
                    let up = &up;
                    cube_wedges(tree, cache.first_active, p).iter().map(move |&d| {
                        let mut acc = vec![czero(); sd];
                        let cd = child_wedge(tree, l, d);
                        for &ch in &cube.children {
                            let q = octant(tree.cubes[ch].anchor, cube.anchor);
                            let m = &lev.m2m[&(q, d)];
                            let off = self.block_offset(ch, cd);
                            m.matvec_into(&up[off..off + child_dim], &mut acc, true);
                        }
                        (self.block_offset(p, d), acc)
                    })
                })
                .collect();
            for (off, v) in results {
                up[off..off + sd].copy_from_slice(&v);
            }
        }
        times.m2m = t0.elapsed();

        // M2L
        let t0 = Instant::now();
        for l in cache.first_active..nlev {
            self.m2l_level(l, &up, &mut down);
        }
        times.m2l = t0.elapsed();

        // L2L, coarsest parents first.
        let t0 = Instant::now();
        for l in cache.first_active..nlev.saturating_sub(1) {
            let lev = &cache.levels[l];
            let sd = lev.state_dim;
            let child_dim = cache.levels[l + 1].state_dim;
            let results: Vec<(usize, Vec<Complex<T>>)> = tree.levels[l + 1]
                .par_iter()
                .filter(|&&c| self.offsets[c] != usize::MAX)
                .flat_map_iter(|&c| {
                    let cube = &tree.cubes[c];
                    let p = cube.parent.expect("non-root cube");
                    let pc = &tree.cubes[p];
                    let q = octant(cube.anchor, pc.anchor);
                    let wedges = cube_wedges(tree, cache.first_active, c);
                    let mut acc = vec![czero(); wedges.len() * child_dim];
                    for &d in cube_wedges(tree, cache.first_active, p) {
                        let cd = child_wedge(tree, l, d);
                        let slot = tree.direction_slot(c, cd).expect("nested wedge");
                        let m = &lev.m2m[&(q, d)];
                        let off = self.block_offset(p, d);
                        m.matvec_transpose_into(&down[off..off + sd], &mut acc[slot * child_dim..(slot + 1) * child_dim], true);
                    }
                    std::iter::once((self.offsets[c], acc))
                })
                .collect();
            for (off, v) in results {
                for (a, b) in down[off..off + v.len()].iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        times.l2l = t0.elapsed();

        // L2T
        let t0 = Instant::now();
        let tgt_ops = self
            .leaf_ops
            .as_ref()
            .and_then(|o| o.targets.iter().find(|(t, _)| *t == kernel.target).map(|(_, m)| m));
        let contributions: Vec<(usize, Vec<Complex<T>>)> = self
            .leaf_blocks
            .par_iter()
            .enumerate()
            .map(|(bi, &(c, d))| {
                let off = self.block_offset(c, d as u32);
                let sd = cache.levels[tree.cubes[c].level].state_dim;
                let psi = &down[off..off + sd];
                let v = match tgt_ops {
                    Some(m) => m[bi].matvec(psi),
                    None => self.l2t_on_the_fly(c, d as u32, kernel.target, psi),
                };
                (c, v)
            })
            .collect();
        for (c, v) in contributions {
            for (&i, z) in tree.points_of(c).iter().zip(v) {
                out[i] += z;
            }
        }
        times.l2t = t0.elapsed();
        (out, times)
    }

    fn block_offset(&self, c: usize, d: u32) -> usize {
        let slot = self.tree.direction_slot(c, d).expect("wedge present in cube");
        self.offsets[c] + slot * self.cache.levels[self.tree.cubes[c].level].state_dim
    }

    fn s2m_on_the_fly(&self, c: usize, d: u32, layer: SourceLayer<T>, ql: &[Complex<T>]) -> Vec<Complex<T>> {
        let (_, check) = self.level_points(c, d);
        let idx = self.tree.points_of(c);
        let kernel = LayeredKernel {
            k: self.cache.k,
            source: layer,
            target: TargetLayer::Potential,
        };
        let z = Vec3::zero();
        let pot: Vec<Complex<T>> = check
            .iter()
            .map(|&a| {
                let mut s = czero();
                for (&j, &qj) in idx.iter().zip(ql) {
                    s += kernel.eval(a, self.points[j], z, self.normals[j]) * qj;
                }
                s
            })
            .collect();
        self.cache.levels[self.tree.cubes[c].level].outgoing.matvec(&pot)
    }

    fn l2t_on_the_fly(&self, c: usize, d: u32, layer: TargetLayer<T>, psi: &[Complex<T>]) -> Vec<Complex<T>> {
        let (_, check) = self.level_points(c, d);
        let lev = &self.cache.levels[self.tree.cubes[c].level];
        let mut dens = vec![czero(); check.len()];
        lev.outgoing.matvec_transpose_into(psi, &mut dens, false);
        let kernel = LayeredKernel {
            k: self.cache.k,
            source: SourceLayer::Monopole,
            target: layer,
        };
        let z = Vec3::zero();
        self.tree
            .points_of(c)
            .iter()
            .map(|&i| {
                let mut s = czero();
                for (&a, &da) in check.iter().zip(&dens) {
                    s += kernel.eval(self.points[i], a, self.normals[i], z) * da;
                }
                s
            })
            .collect()
    }

    fn m2l_level(&self, l: usize, up: &[Complex<T>], down: &mut [Complex<T>]) {
        let lev = &self.cache.levels[l];
        let sd = lev.state_dim;
        const CHUNK: usize = 256;
        let mut work: Vec<(usize, usize)> = Vec::new();
        for (bi, b) in self.batches[l].iter().enumerate() {
            let mut s = 0;
            while s < b.items.len() {
                work.push((bi, s));
                s += CHUNK;
            }
        }
        let window = rayon::current_num_threads().max(1) * 2;
        for group in work.chunks(window) {
            let results: Vec<(usize, usize, Vec<Complex<T>>)> = group
                .par_iter()
                .map(|&(bi, start)| {
                    let b = &self.batches[l][bi];
                    let items = &b.items[start..(start + CHUNK).min(b.items.len())];
                    let n = items.len();
                    let mut x = vec![czero(); n * sd];
                    for (r, &(src, _, sym)) in items.iter().enumerate() {
                        let xs = &up[src..src + sd];
                        let row = &mut x[r * sd..(r + 1) * sd];
                        if sym == NO_SYMMETRY {
                            row.copy_from_slice(xs);
                        } else {
                            lev.symmetries[sym as usize].as_ref().expect("symmetry operator").apply_into(xs, row);
                        }
                    }
                    let y = apply_rows(&lev.m2l[b.class], &x, n, false);
                    (bi, start, y)
                })
                .collect();
            for (bi, start, y) in results {
                let b = &self.batches[l][bi];
                let items = &b.items[start..(start + CHUNK).min(b.items.len())];
                for (r, &(_, tgt, sym)) in items.iter().enumerate() {
                    let yr = &y[r * sd..(r + 1) * sd];
                    let dst = &mut down[tgt..tgt + sd];
                    if sym == NO_SYMMETRY {
                        for (a, b) in dst.iter_mut().zip(yr) {
                            *a += *b;
                        }
                    } else {
                        lev.symmetries[sym as usize].as_ref().expect("symmetry operator").apply_transpose_add(yr, dst);
                    }
                }
            }
        }
    }

    /// Direct sum over the near field of every leaf, excluding coincident indices.
    pub fn apply_near_direct(&self, kernel: &LayeredKernel<T>, q: &[Complex<T>]) -> Vec<Complex<T>> {
        let tree = &*self.tree;
        let leaves: Vec<usize> = tree.leaves().collect();
        let parts: Vec<(usize, Vec<Complex<T>>)> = leaves
            .par_iter()
            .map(|&b| {
                let tgt = tree.points_of(b);
                let mut acc = vec![czero(); tgt.len()];
                for &c in tree.near_field(b) {
                    for &j in tree.points_of(c) {
                        let (yj, nj, qj) = (self.points[j], self.normals[j], q[j]);
                        for (a, &i) in acc.iter_mut().zip(tgt) {
                            if i != j {
                                *a += kernel.eval(self.points[i], yj, self.normals[i], nj) * qj;
                            }
                        }
                    }
                }
                (b, acc)
            })
            .collect();
        let mut out = vec![czero(); q.len()];
        for (b, acc) in parts {
            for (&i, z) in tree.points_of(b).iter().zip(acc) {
                out[i] = z;
            }
        }
        out
    }
}

/// `Y = X K^T` on row-stacked inputs (`n` rows), i.e. `y_r = K x_r` per row;
/// with `transpose` the class matrix is applied transposed.
pub fn apply_rows<T: Real>(op: &M2lOperator<T>, x: &[Complex<T>], n: usize, transpose: bool) -> Vec<Complex<T>> {
    match op {
        M2lOperator::Dense(k) => gemm_rows(k, x, n, transpose),
        M2lOperator::Factored { u, v } => {
            if transpose {
                let t = gemm_rows(u, x, n, true);
                gemm_rows(v, &t, n, true)
            } else {
                let t = gemm_rows(v, x, n, false);
                gemm_rows(u, &t, n, false)
            }
        }
    }
}

fn gemm_rows<T: Real>(k: &CMatrix<T>, x: &[Complex<T>], n: usize, transpose: bool) -> Vec<Complex<T>> {
    let (kr, kc) = k.shape();
    let (din, dout) = if transpose { (kr, kc) } else { (kc, kr) };
    assert_eq!(x.len(), n * din);
    let mut y = vec![czero(); n * dout];
    if n == 0 || din == 0 || dout == 0 {
        return y;
    }
    // B = K^T (no transpose) or K (transpose), viewed through strides.
    let (rsb, csb) = if transpose { (kc as isize, 1) } else { (1, kc as isize) };
    unsafe {
        T::cgemm(
            n,
            din,
            dout,
            Complex::one(),
            x.as_ptr(),
            din as isize,
            1,
            k.data().as_ptr(),
            rsb,
            csb,
            czero(),
            y.as_mut_ptr(),
            dout as isize,
            1,
        );
    }
    y
}
