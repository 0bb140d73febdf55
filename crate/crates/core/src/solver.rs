//! Matrix-free Burton-Miller operator, boundary conditions and restarted
//! GMRES.
//!
//! Normals inside the operator point into the scatterer (the reverse of the
//! mesh orientation), so the combined equation reads
//! `c u + D u + alpha H u = S q + alpha M q - alpha c q + u_inc + alpha q_inc`
//! with `q = du/dn` along the same normals and `c = 1/2`.

use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use num_complex::Complex;

use crate::compress::{convert, CompressError};
use crate::fda::{FdaError, FdaOperator, FdaParams, PhaseTimes, StorageMode, TranslationCache};
use crate::geometry::Vec3;
use crate::kernels::{KernelKind, LayeredKernel, SourceLayer, TargetLayer, WaveContext};
use crate::mesh::Mesh;
use crate::nystrom::{assemble_near_with, Block, LocalRegions, NearField, NystromError, NystromParams};
use crate::octree::{leaf_threshold, Octree};
use crate::scalar::{cnorm, czero, Real};

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error(transparent)]
    Nystrom(#[from] NystromError),
    #[error(transparent)]
    Fda(#[from] FdaError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error("boundary data has length {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid boundary condition: {0}")]
    InvalidBoundary(String),
}

/// Boundary data per quadrature point; `q` is the normal derivative along
/// the operator normals.
#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryCondition<T> {
    Dirichlet(Vec<Complex<T>>),
    Neumann(Vec<Complex<T>>),
    /// `a u + b q = g`.
    Robin { a: Complex<T>, b: Complex<T>, g: Vec<Complex<T>> },
}

impl<T: Real> BoundaryCondition<T> {
    pub fn data(&self) -> &[Complex<T>] {
        match self {
            Self::Dirichlet(v) | Self::Neumann(v) => v,
            Self::Robin { g, .. } => g,
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), SolverError> {
        if self.data().len() != n {
            return Err(SolverError::Dimension {
                expected: n,
                got: self.data().len(),
            });
        }
        if let Self::Robin { a, b, .. } = self {
            if a.norm() == T::zero() || b.norm() == T::zero() {
                return Err(SolverError::InvalidBoundary("Robin coefficients must be nonzero".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IncidentWave<T> {
    None,
    /// `e^{ik x.d}` with `|d| = 1`.
    PlaneWave(Vec3<T>),
}

impl<T: Real> IncidentWave<T> {
    pub fn plane_wave(direction: Vec3<T>) -> Self {
        Self::PlaneWave(direction.normalized())
    }

    pub fn u(&self, k: T, x: Vec3<T>) -> Complex<T> {
        match self {
            Self::None => czero(),
            Self::PlaneWave(d) => {
                let (s, c) = (k * x.dot(d)).sin_cos();
                Complex::new(c, s)
            }
        }
    }

    /// Normal derivative along `n`.
    pub fn q(&self, k: T, x: Vec3<T>, n: Vec3<T>) -> Complex<T> {
        match self {
            Self::None => czero(),
            Self::PlaneWave(d) => self.u(k, x) * Complex::new(T::zero(), k * d.dot(&n)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresParams {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl GmresParams {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            restart: 50,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SolveStats {
    pub iterations: usize,
    /// Relative residual estimates, starting with the initial one.
    pub residuals: Vec<f64>,
    pub iteration_times: Vec<Duration>,
    pub converged: bool,
    /// Relative residual recomputed from the returned iterate.
    pub final_residual: f64,
    pub phases: PhaseTimes,
    pub peak_memory: Option<u64>,
}

impl SolveStats {
    pub fn mean_iteration_time(&self) -> Duration {
        if self.iteration_times.is_empty() {
            Duration::ZERO
        } else {
            self.iteration_times.iter().sum::<Duration>() / self.iteration_times.len() as u32
        }
    }

    pub fn report(&self) -> String {
        let mut s = format!(
            "iterations {} converged {} final_residual {:.3e} mean_iteration {:.3}s\n",
            self.iterations,
            self.converged,
            self.final_residual,
            self.mean_iteration_time().as_secs_f64()
        );
        s.push_str("residuals");
        for r in &self.residuals {
            s.push_str(&format!(" {r:.3e}"));
        }
        s.push('\n');
        s
    }
}

/// Peak resident memory of the process in bytes, where the platform reports it.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

pub trait LinearOperator<T: Real>: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[Complex<T>]) -> Vec<Complex<T>>;
}

pub struct IdentityOperator(pub usize);

impl<T: Real> LinearOperator<T> for IdentityOperator {
    fn dim(&self) -> usize {
        self.0
    }

    fn apply(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        x.to_vec()
    }
}

fn dotc<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    a.iter().zip(b).fold(czero(), |s, (x, y)| s + x.conj() * y)
}

/// Restarted GMRES from a zero initial guess, residuals relative to `|b|`.
pub fn gmres_solve<T: Real, A: LinearOperator<T> + ?Sized>(op: &A, b: &[Complex<T>], params: &GmresParams) -> (Vec<Complex<T>>, SolveStats) {
    let n = op.dim();
    assert_eq!(b.len(), n, "right-hand side length");
    let mut stats = SolveStats::default();
    let bnorm = cnorm(b).to_f64_lossy();
    let mut x = vec![czero(); n];
    if bnorm == 0.0 {
        stats.converged = true;
        stats.residuals.push(0.0);
        return (x, stats);
    }
    let mut r = b.to_vec();
    let mut rel = 1.0;
    stats.residuals.push(rel);
    let m = params.restart.max(1);
    while stats.iterations < params.max_iter && rel > params.tol {
        let beta = cnorm(&r);
        let mut v: Vec<Vec<Complex<T>>> = vec![r.iter().map(|z| z.unscale(beta)).collect()];
        let mut h: Vec<Vec<Complex<T>>> = Vec::new();
        let mut cs: Vec<T> = Vec::new();
        let mut sn: Vec<Complex<T>> = Vec::new();
        let mut g = vec![Complex::new(beta, T::zero())];
        let mut j = 0;
        while j < m && stats.iterations < params.max_iter {
            let t0 = Instant::now();
            let mut w = op.apply(&v[j]);
            let mut col = vec![czero(); j + 2];
            for i in 0..=j {
                let hij = dotc(&v[i], &w);
                col[i] = hij;
                for (wk, vk) in w.iter_mut().zip(&v[i]) {
                    *wk -= hij * vk;
                }
            }
            let wn = cnorm(&w);
            col[j + 1] = Complex::new(wn, T::zero());
            for i in 0..j {
                let (a, bb) = (col[i], col[i + 1]);
                col[i] = a.scale(cs[i]) + sn[i] * bb;
                col[i + 1] = -sn[i].conj() * a + bb.scale(cs[i]);
            }
            let (a, bb) = (col[j], col[j + 1]);
            let rr = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            let (c, s) = if rr == T::zero() {
                (T::one(), czero())
            } else if a.norm() == T::zero() {
                (T::zero(), Complex::new(T::one(), T::zero()))
            } else {
                let phase = a.unscale(a.norm());
                (a.norm() / rr, phase * bb.conj().unscale(rr))
            };
            col[j] = a.scale(c) + s * bb;
            col[j + 1] = czero();
            cs.push(c);
            sn.push(s);
            let gj = g[j];
            g[j] = gj.scale(c);
            g.push(-s.conj() * gj);
            h.push(col);
            stats.iterations += 1;
            j += 1;
            rel = g[j].norm().to_f64_lossy() / bnorm;
            stats.residuals.push(rel);
            stats.iteration_times.push(t0.elapsed());
            if rel <= params.tol || wn == T::zero() {
                break;
            }
            v.push(w.iter().map(|z| z.unscale(wn)).collect());
        }
        // Back substitution on the triangular factor.
        let mut y = vec![czero(); j];
        for i in (0..j).rev() {
            let mut s = g[i];
            for k in i + 1..j {
                s -= h[k][i] * y[k];
            }
            y[i] = s / h[i][i];
        }
        for (i, yi) in y.iter().enumerate() {
            for (xk, vk) in x.iter_mut().zip(&v[i]) {
                *xk += *yi * vk;
            }
        }
        let ax = op.apply(&x);
        r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        rel = cnorm(&r).to_f64_lossy() / bnorm;
    }
    stats.final_residual = rel;
    stats.converged = rel <= params.tol;
    stats.peak_memory = peak_memory_bytes();
    (x, stats)
}

#[derive(Debug, Clone)]
pub struct SolverParams {
    pub epsilon: f64,
    pub storage: StorageMode,
    /// Overrides the leaf threshold derived from `epsilon`.
    pub leaf_threshold: Option<usize>,
    /// Coupling constant; `None` means `i / k`, zero gives the plain
    /// conventional equation (diagnostic only).
    pub alpha: Option<Complex<f64>>,
    pub gmres: GmresParams,
    pub nystrom: NystromParams,
    pub fda: FdaParams,
}

impl SolverParams {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            storage: StorageMode::LowRank,
            leaf_threshold: None,
            alpha: None,
            gmres: GmresParams::new(epsilon),
            nystrom: NystromParams {
                near_tolerance: (epsilon * 1e-2).min(1e-6),
                normal_sign: -1.0,
                ..NystromParams::default()
            },
            fda: FdaParams::new(epsilon),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AssemblyStats {
    pub tree: Duration,
    pub cache: Duration,
    pub compression: Duration,
    pub leaf_operators: Duration,
    pub near: Duration,
    pub cache_bytes: usize,
    pub leaf_bytes: usize,
    pub near_bytes: usize,
    pub near_nnz: usize,
    pub tree_summary: String,
}

impl AssemblyStats {
    pub fn total_bytes(&self) -> usize {
        self.cache_bytes + self.leaf_bytes + self.near_bytes
    }
}

/// `H`- and `G`-side operators of the discrete Burton-Miller equation.
pub struct BurtonMillerOperator<T: Real> {
    pub ctx: WaveContext<T>,
    pub free_term: T,
    pub positions: Vec<Vec3<T>>,
    /// Operator normals (into the scatterer).
    pub normals: Vec<Vec3<T>>,
    pub weights: Vec<T>,
    pub near: NearField<T>,
    pub fda: FdaOperator<T>,
    pub assembly: AssemblyStats,
    phases: Mutex<PhaseTimes>,
}

impl<T: Real> BurtonMillerOperator<T> {
    pub fn num_points(&self) -> usize {
        self.positions.len()
    }

    fn far(&self, kind: KernelKind, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let kernel = LayeredKernel::from_kind(kind, &self.ctx);
        let charges: Vec<Complex<T>> = x.iter().zip(&self.weights).map(|(v, &w)| v.scale(w)).collect();
        let (out, t) = self.fda.apply_timed(&kernel, &charges);
        *self.phases.lock().unwrap() += t;
        out
    }

    fn near_apply(&self, block: Block, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let t0 = Instant::now();
        let y = self.near.apply(block, x);
        self.phases.lock().unwrap().near += t0.elapsed();
        y
    }

    /// `(S + alpha M) q`.
    pub fn apply_g(&self, q: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut y = self.far(KernelKind::BmG, q);
        for (a, b) in y.iter_mut().zip(self.near_apply(Block::G, q)) {
            *a += b;
        }
        y
    }

    /// `(c I + D + alpha H) u`.
    pub fn apply_h(&self, u: &[Complex<T>]) -> Vec<Complex<T>> {
        let mut y = self.far(KernelKind::BmH, u);
        for ((a, b), ui) in y.iter_mut().zip(self.near_apply(Block::H, u)).zip(u) {
            *a += b + ui.scale(self.free_term);
        }
        y
    }

    /// Accumulated phase times of all applications so far.
    pub fn phase_times(&self) -> PhaseTimes {
        *self.phases.lock().unwrap()
    }

    pub fn reset_phase_times(&self) {
        *self.phases.lock().unwrap() = PhaseTimes::default();
    }
}

/// Builds the tree, translation cache, leaf operators and near blocks.
pub fn assemble_operator<T: Real>(mesh: &Mesh<T>, k: T, params: &SolverParams) -> Result<BurtonMillerOperator<T>, SolverError> {
    let alpha = params
        .alpha
        .map(|a| Complex::new(T::c(a.re), T::c(a.im)))
        .unwrap_or_else(|| Complex::new(T::zero(), T::one() / k));
    let ctx = WaveContext::with_alpha(k, alpha);
    let sign = T::c(params.nystrom.normal_sign);
    let qp = mesh.quadrature_points();
    let positions: Vec<Vec3<T>> = qp.iter().map(|p| p.position).collect();
    let normals: Vec<Vec3<T>> = qp.iter().map(|p| p.normal * sign).collect();
    let weights: Vec<T> = qp.iter().map(|p| p.weight).collect();
    let mut stats = AssemblyStats::default();

    let t0 = Instant::now();
    let np = params.leaf_threshold.unwrap_or_else(|| leaf_threshold(params.epsilon));
    let tree = Arc::new(Octree::build_with_threshold(&positions, k, np));
    stats.tree = t0.elapsed();
    stats.tree_summary = tree.summary();

    let t0 = Instant::now();
    let raw = TranslationCache::build(&tree, &params.fda)?;
    stats.cache = t0.elapsed();
    let t0 = Instant::now();
    let cache = convert(&raw, params.storage, None)?;
    drop(raw);
    stats.compression = t0.elapsed();
    stats.cache_bytes = cache.bytes();

    let t0 = Instant::now();
    let mut fda = FdaOperator::new(tree.clone(), Arc::new(positions.clone()), Arc::new(normals.clone()), Arc::new(cache))?;
    fda.precompute_leaf_operators(&[SourceLayer::Monopole, SourceLayer::Dipole], &[TargetLayer::BurtonMiller(alpha)]);
    stats.leaf_operators = t0.elapsed();
    stats.leaf_bytes = fda.leaf_operator_bytes();

    let t0 = Instant::now();
    let regions = LocalRegions::build(mesh, &qp, params.nystrom.region_factor);
    let near = assemble_near_with(mesh, &qp, &regions, &ctx, Some(&tree), &params.nystrom)?;
    stats.near = t0.elapsed();
    stats.near_bytes = near.bytes();
    stats.near_nnz = near.nnz();
    log::info!(
        "assembly: tree {:?} cache {:?} compression {:?} leaf {:?} near {:?}",
        stats.tree,
        stats.cache,
        stats.compression,
        stats.leaf_operators,
        stats.near
    );

    Ok(BurtonMillerOperator {
        ctx,
        free_term: T::c(0.5),
        positions,
        normals,
        weights,
        near,
        fda,
        assembly: stats,
        phases: Mutex::new(PhaseTimes::default()),
    })
}

/// The square system for the unknown boundary quantity.
pub struct SystemOperator<'a, T: Real> {
    pub op: &'a BurtonMillerOperator<T>,
    pub bc: &'a BoundaryCondition<T>,
}

impl<T: Real> SystemOperator<'_, T> {
    /// `(S + alpha M - alpha c I) x`.
    fn g_minus_jump(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        let ac = self.op.ctx.alpha.scale(self.op.free_term);
        self.op.apply_g(x).into_iter().zip(x).map(|(y, xi)| y - ac * xi).collect()
    }
}

impl<T: Real> LinearOperator<T> for SystemOperator<'_, T> {
    fn dim(&self) -> usize {
        self.op.num_points()
    }

    fn apply(&self, x: &[Complex<T>]) -> Vec<Complex<T>> {
        match self.bc {
            BoundaryCondition::Neumann(_) => self.op.apply_h(x),
            BoundaryCondition::Dirichlet(_) => self.g_minus_jump(x),
            BoundaryCondition::Robin { a, b, .. } => {
                let ratio = *a / *b;
                let h = self.op.apply_h(x);
                let g = self.g_minus_jump(x);
                h.into_iter().zip(g).map(|(hi, gi)| hi + ratio * gi).collect()
            }
        }
    }
}

/// Right-hand side of the system for the given data and incident field.
pub fn build_rhs<T: Real>(
    op: &BurtonMillerOperator<T>,
    bc: &BoundaryCondition<T>,
    incident: &IncidentWave<T>,
) -> Result<Vec<Complex<T>>, SolverError> {
    bc.validate(op.num_points())?;
    let k = op.ctx.k;
    let alpha = op.ctx.alpha;
    let inc: Vec<Complex<T>> = op
        .positions
        .iter()
        .zip(&op.normals)
        .map(|(&x, &n)| incident.u(k, x) + alpha * incident.q(k, x, n))
        .collect();
    let sys = SystemOperator { op, bc };
    Ok(match bc {
        BoundaryCondition::Neumann(q) => {
            let ac = alpha.scale(op.free_term);
            let gq = op.apply_g(q);
            gq.into_iter().zip(q).zip(&inc).map(|((g, qi), f)| g - ac * qi + f).collect()
        }
        BoundaryCondition::Dirichlet(u) => {
            let hu = op.apply_h(u);
            hu.into_iter().zip(&inc).map(|(h, f)| h - f).collect()
        }
        BoundaryCondition::Robin { b, g, .. } => {
            let gb: Vec<Complex<T>> = g.iter().map(|v| *v / *b).collect();
            let gg = sys.g_minus_jump(&gb);
            gg.into_iter().zip(&inc).map(|(v, f)| v + f).collect()
        }
    })
}

#[derive(Debug, Clone)]
pub struct Solution<T> {
    pub u: Vec<Complex<T>>,
    pub q: Vec<Complex<T>>,
    pub stats: SolveStats,
}

/// Solves for the unknown boundary quantity and completes `(u, q)`.
pub fn solve<T: Real>(
    op: &BurtonMillerOperator<T>,
    bc: &BoundaryCondition<T>,
    incident: &IncidentWave<T>,
    params: &GmresParams,
) -> Result<Solution<T>, SolverError> {
    let b = build_rhs(op, bc, incident)?;
    op.reset_phase_times();
    let sys = SystemOperator { op, bc };
    let (x, mut stats) = gmres_solve(&sys, &b, params);
    stats.phases = op.phase_times();
    let (u, q) = match bc {
        BoundaryCondition::Neumann(q) => (x, q.clone()),
        BoundaryCondition::Dirichlet(u) => (u.clone(), x),
        BoundaryCondition::Robin { a, b, g } => {
            let q = g.iter().zip(&x).map(|(gi, ui)| (*gi - *a * ui) / *b).collect();
            (x, q)
        }
    };
    Ok(Solution { u, q, stats })
}
