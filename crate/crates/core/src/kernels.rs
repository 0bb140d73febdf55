//! Helmholtz fundamental solution `G = e^{ikr} / (4 pi r)` and its normal
//! derivatives, with `r = |x - y|`, `x` the target and `y` the source.
//!
//! Every kernel is described as a source layer (what sits at `y`) combined
//! with a target layer (what is measured at `x`), so the fast summation can
//! treat the two sides independently.

use num_complex::Complex;

use crate::geometry::Vec3;
use crate::linalg::CMatrix;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveContext<T> {
    pub k: T,
    pub alpha: Complex<T>,
}

impl<T: Real> WaveContext<T> {
    /// Context with the default coupling constant `alpha = i / k`.
    pub fn new(k: T) -> Self {
        Self {
            k,
            alpha: Complex::new(T::zero(), T::one() / k),
        }
    }

    pub fn with_alpha(k: T, alpha: Complex<T>) -> Self {
        Self { k, alpha }
    }

    pub fn wavelength(&self) -> T {
        T::c(2.0) * T::PI() / self.k
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `G`
    Single,
    /// `dG/dn_y`
    Double,
    /// `dG/dn_x`
    Adjoint,
    /// `d2G/dn_x dn_y`
    Hyper,
    /// `G + alpha dG/dn_x`
    BmG,
    /// `dG/dn_y + alpha d2G/dn_x dn_y`
    BmH,
}

impl KernelKind {
    pub fn needs_nx(self) -> bool {
        matches!(self, Self::Adjoint | Self::Hyper | Self::BmG | Self::BmH)
    }

    pub fn needs_ny(self) -> bool {
        matches!(self, Self::Double | Self::Hyper | Self::BmH)
    }

    /// Leading singularity order `r^-p` of the kernel at coincidence.
    pub fn singular_order(self) -> u32 {
        match self {
            Self::Single | Self::Double | Self::Adjoint | Self::BmG => 1,
            Self::Hyper | Self::BmH => 3,
        }
    }

    pub fn layers<T: Real>(self, ctx: &WaveContext<T>) -> (SourceLayer<T>, TargetLayer<T>) {
        match self {
            Self::Single => (SourceLayer::Monopole, TargetLayer::Potential),
            Self::Double => (SourceLayer::Dipole, TargetLayer::Potential),
            Self::Adjoint => (SourceLayer::Monopole, TargetLayer::NormalDerivative),
            Self::Hyper => (SourceLayer::Dipole, TargetLayer::NormalDerivative),
            Self::BmG => (SourceLayer::Monopole, TargetLayer::BurtonMiller(ctx.alpha)),
            Self::BmH => (SourceLayer::Dipole, TargetLayer::BurtonMiller(ctx.alpha)),
        }
    }
}

/// Field generated at the source point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceLayer<T> {
    /// `G`
    Monopole,
    /// `dG/dn_y`
    Dipole,
    /// `G + beta dG/dn_y`
    MonopoleDipole(Complex<T>),
}

/// Functional applied at the target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TargetLayer<T> {
    /// `f`
    Potential,
    /// `df/dn_x`
    NormalDerivative,
    /// `f + alpha df/dn_x`
    BurtonMiller(Complex<T>),
}

impl<T: Real> SourceLayer<T> {
    pub fn uses_normal(&self) -> bool {
        !matches!(self, Self::Monopole)
    }
}

impl<T: Real> TargetLayer<T> {
    pub fn uses_normal(&self) -> bool {
        !matches!(self, Self::Potential)
    }
}

/// Complete kernel description `target(source(G))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayeredKernel<T> {
    pub k: T,
    pub source: SourceLayer<T>,
    pub target: TargetLayer<T>,
}

impl<T: Real> LayeredKernel<T> {
    pub fn from_kind(kind: KernelKind, ctx: &WaveContext<T>) -> Self {
        let (source, target) = kind.layers(ctx);
        Self { k: ctx.k, source, target }
    }

    /// The plain single-layer kernel.
    pub fn single(k: T) -> Self {
        Self {
            k,
            source: SourceLayer::Monopole,
            target: TargetLayer::Potential,
        }
    }

    /// Evaluates the kernel; normals that the layers do not use are ignored.
    #[inline]
    pub fn eval(&self, x: Vec3<T>, y: Vec3<T>, nx: Vec3<T>, ny: Vec3<T>) -> Complex<T> {
        let d = x - y;
        let r2 = d.norm_sqr();
        let r = r2.sqrt();
        let inv_r = T::one() / r;
        let kr = self.k * r;
        let (s, c) = kr.sin_cos();
        let four_pi = T::c(4.0) * T::PI();
        // e = e^{ikr} / (4 pi r)
        let e = Complex::new(c, s).scale(inv_r / four_pi);
        let ikr_m1 = Complex::new(-T::one(), kr);
        let need_dy = self.source.uses_normal() && !matches!(self.target, TargetLayer::NormalDerivative);
        let need_dx = !matches!(self.source, SourceLayer::Dipole) && self.target.uses_normal();
        let need_h = self.source.uses_normal() && self.target.uses_normal();
        let a = if self.target.uses_normal() { d.dot(&nx) * inv_r } else { T::zero() };
        let b = if self.source.uses_normal() { d.dot(&ny) * inv_r } else { T::zero() };
        let g = e;
        let dy = if need_dy { -(e * ikr_m1).scale(b * inv_r) } else { Complex::new(T::zero(), T::zero()) };
        let dx = if need_dx { (e * ikr_m1).scale(a * inv_r) } else { Complex::new(T::zero(), T::zero()) };
        let h = if need_h {
            let cc = nx.dot(&ny);
            let poly = Complex::new(kr * kr - T::c(3.0), T::c(3.0) * kr);
            (e.scale(inv_r * inv_r)) * (poly.scale(a * b) - ikr_m1.scale(cc))
        } else {
            Complex::new(T::zero(), T::zero())
        };
        // source layer applied to the potential and to its x-derivative
        let (f, fx) = match self.source {
            SourceLayer::Monopole => (g, dx),
            SourceLayer::Dipole => (dy, h),
            SourceLayer::MonopoleDipole(beta) => (g + beta * dy, dx + beta * h),
        };
        match self.target {
            TargetLayer::Potential => f,
            TargetLayer::NormalDerivative => fx,
            TargetLayer::BurtonMiller(alpha) => f + alpha * fx,
        }
    }

    /// Dense block `K(x_i, y_j)`.
    pub fn block(&self, tx: &[Vec3<T>], tn: &[Vec3<T>], sy: &[Vec3<T>], sn: &[Vec3<T>]) -> CMatrix<T> {
        let z = Vec3::zero();
        let mut m = CMatrix::zeros(tx.len(), sy.len());
        for i in 0..tx.len() {
            let nx = if self.target.uses_normal() { tn[i] } else { z };
            for j in 0..sy.len() {
                let ny = if self.source.uses_normal() { sn[j] } else { z };
                m[(i, j)] = self.eval(tx[i], sy[j], nx, ny);
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("coincident points (r = {r:e}); singular quadrature is required")]
    Coincident { r: f64 },
    #[error("coincident pair at target {target}, source {source_index}")]
    CoincidentPair { target: usize, source_index: usize },
    #[error("kernel {0:?} requires a normal that was not supplied")]
    MissingNormal(KernelKind),
}

/// Evaluates `kind` at one target/source pair.
pub fn eval_kernel<T: Real>(
    kind: KernelKind,
    ctx: &WaveContext<T>,
    x: Vec3<T>,
    y: Vec3<T>,
    nx: Option<Vec3<T>>,
    ny: Option<Vec3<T>>,
) -> Result<Complex<T>, KernelError> {
    if (kind.needs_nx() && nx.is_none()) || (kind.needs_ny() && ny.is_none()) {
        return Err(KernelError::MissingNormal(kind));
    }
    let r = (x - y).norm();
    let scale = x.max_abs().max(y.max_abs()).max(T::one());
    if r < T::c(1e-14) * scale {
        return Err(KernelError::Coincident { r: r.to_f64_lossy() });
    }
    let z = Vec3::zero();
    Ok(LayeredKernel::from_kind(kind, ctx).eval(x, y, nx.unwrap_or(z), ny.unwrap_or(z)))
}

/// Evaluates `kind` on every target/source pair.
pub fn eval_kernel_block<T: Real>(
    kind: KernelKind,
    ctx: &WaveContext<T>,
    targets: &[Vec3<T>],
    target_normals: &[Vec3<T>],
    sources: &[Vec3<T>],
    source_normals: &[Vec3<T>],
) -> Result<CMatrix<T>, KernelError> {
    if (kind.needs_nx() && target_normals.len() != targets.len())
        || (kind.needs_ny() && source_normals.len() != sources.len())
    {
        return Err(KernelError::MissingNormal(kind));
    }
    let z = Vec3::zero();
    let mut m = CMatrix::zeros(targets.len(), sources.len());
    for (i, &x) in targets.iter().enumerate() {
        let nx = if kind.needs_nx() { Some(target_normals[i]) } else { None };
        for (j, &y) in sources.iter().enumerate() {
            let ny = if kind.needs_ny() { Some(source_normals[j]) } else { None };
            m[(i, j)] = eval_kernel(kind, ctx, x, y, nx.or(Some(z)), ny.or(Some(z)))
                .map_err(|_| KernelError::CoincidentPair { target: i, source_index: j })?;
        }
    }
    Ok(m)
}
