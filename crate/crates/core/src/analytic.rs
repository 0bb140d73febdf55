//! Reference solutions and brute-force oracles.

use num_complex::Complex;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geometry::Vec3;
use crate::kernels::LayeredKernel;
use crate::scalar::{czero, Real};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticError {
    #[error("reference vector is zero")]
    ZeroReference,
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("target {target} coincides with source {source_index}")]
    Coincident { target: usize, source_index: usize },
    #[error("spherical Bessel recurrence overflowed at order {0}")]
    Overflow(usize),
}

/// Surface potential `1 / (1 - ik)` of the unit sphere with unit normal
/// velocity (normals pointing into the sphere).
pub fn pulsating_sphere_solution<T: Real>(k: T) -> Complex<T> {
    Complex::new(T::one(), -k).inv()
}

/// Spherical Bessel functions `j_0..j_n(x)` by downward recurrence,
/// normalized with `sum (2m + 1) j_m^2 = 1`.
pub fn spherical_bessel_j(n: usize, x: f64) -> Vec<f64> {
    assert!(x > 0.0);
    let start = n + 20 + (x as usize) + (2.0 * x.cbrt() * 10.0) as usize;
    let mut j = vec![0.0; start + 2];
    j[start + 1] = 0.0;
    j[start] = 1.0;
    for m in (1..=start).rev() {
        j[m - 1] = (2 * m + 1) as f64 / x * j[m] - j[m + 1];
        if j[m - 1].abs() > 1e100 {
            let s = 1e-100;
            for v in j[m - 1..].iter_mut() {
                *v *= s;
            }
        }
    }
    let peak = j.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for v in j.iter_mut() {
        *v /= peak;
    }
    let norm: f64 = j.iter().enumerate().map(|(m, v)| (2 * m + 1) as f64 * v * v).sum::<f64>().sqrt();
    // Fix the sign from j_0 = sin x / x (or j_1 when j_0 is tiny).
    let sign = if (x.sin() / x).abs() > 1e-3 {
        (x.sin() / x).signum() * j[0].signum()
    } else {
        (x.sin() / (x * x) - x.cos() / x).signum() * j[1].signum()
    };
    j.truncate(n + 1);
    j.iter().map(|v| sign * v / norm).collect()
}

/// Spherical Neumann functions `y_0..y_n(x)` by upward recurrence.
pub fn spherical_bessel_y(n: usize, x: f64) -> Result<Vec<f64>, AnalyticError> {
    let mut y = Vec::with_capacity(n + 1);
    y.push(-x.cos() / x);
    if n >= 1 {
        y.push(-x.cos() / (x * x) - x.sin() / x);
    }
    for m in 1..n {
        let v = (2 * m + 1) as f64 / x * y[m] - y[m - 1];
        if !v.is_finite() {
            return Err(AnalyticError::Overflow(m + 1));
        }
        y.push(v);
    }
    Ok(y)
}

/// Derivatives from `f_m' = f_{m-1} - (m + 1) f_m / x`, `f_0' = -f_1`.
fn derivatives<F: Copy + std::ops::Sub<Output = F> + std::ops::Mul<f64, Output = F> + std::ops::Neg<Output = F>>(f: &[F], x: f64) -> Vec<F> {
    (0..f.len() - 1)
        .map(|m| if m == 0 { -f[1] } else { f[m - 1] - f[m] * ((m + 1) as f64 / x) })
        .collect()
}

/// Sound-hard unit sphere under `e^{ikz}`.
#[derive(Debug, Clone)]
pub struct MieSeries {
    pub k: f64,
    pub order: usize,
    /// `-i^m (2m + 1) j_m'(k) / h_m'(k) * h_m(k)`.
    pub coefficients: Vec<Complex<f64>>,
    /// `j_m'(k) - c_m h_m'(k)` with `c_m = j_m'(k) / h_m'(k)`, per mode.
    pub neumann_residual: Vec<f64>,
}

/// Truncation order `k + 10 k^{1/3} + 10`.
pub fn default_mie_order(k: f64) -> usize {
    (k + 10.0 * k.cbrt() + 10.0).ceil() as usize
}

impl MieSeries {
    pub fn new(k: f64, order: Option<usize>) -> Result<Self, AnalyticError> {
        let order = order.unwrap_or_else(|| default_mie_order(k));
        let j = spherical_bessel_j(order + 1, k);
        let y = spherical_bessel_y(order + 1, k)?;
        let h: Vec<Complex<f64>> = j.iter().zip(&y).map(|(&a, &b)| Complex::new(a, b)).collect();
        let dj = derivatives(&j, k);
        let dh = derivatives(&h, k);
        let i = Complex::new(0.0, 1.0);
        let mut coefficients = Vec::with_capacity(order + 1);
        let mut neumann_residual = Vec::with_capacity(order + 1);
        for m in 0..=order {
            let ratio = dj[m] / dh[m];
            neumann_residual.push((Complex::new(dj[m], 0.0) - ratio * dh[m]).norm());
            coefficients.push(-i.powu(m as u32) * (2 * m + 1) as f64 * ratio * h[m]);
        }
        Ok(Self {
            k,
            order,
            coefficients,
            neumann_residual,
        })
    }

    /// Scattered and total field on the surface at polar angle `theta`
    /// from the incidence direction.
    pub fn surface_field(&self, theta: f64) -> (Complex<f64>, Complex<f64>) {
        let x = theta.cos();
        let (mut p0, mut p1) = (1.0, x);
        let mut us = self.coefficients[0] * p0;
        if self.order >= 1 {
            us += self.coefficients[1] * p1;
        }
        for m in 1..self.order {
            let p2 = ((2 * m + 1) as f64 * x * p1 - m as f64 * p0) / (m + 1) as f64;
            us += self.coefficients[m + 1] * p2;
            p0 = p1;
            p1 = p2;
        }
        let inc = Complex::new(0.0, self.k * x).exp();
        (us, inc + us)
    }
}

/// Scattered and total surface field of the sound-hard unit sphere.
pub fn mie_surface_field(k: f64, theta: f64, order: Option<usize>) -> Result<(Complex<f64>, Complex<f64>), AnalyticError> {
    Ok(MieSeries::new(k, order)?.surface_field(theta))
}

/// `p_i = sum_j K(x_i, y_j) q_j` in fixed source order.
pub fn direct_sum<T: Real>(
    kernel: &LayeredKernel<T>,
    sources: &[Vec3<T>],
    source_normals: &[Vec3<T>],
    charges: &[Complex<T>],
    targets: &[Vec3<T>],
    target_normals: &[Vec3<T>],
) -> Result<Vec<Complex<T>>, AnalyticError> {
    if sources.len() != charges.len() {
        return Err(AnalyticError::Length(sources.len(), charges.len()));
    }
    let z = Vec3::zero();
    targets
        .par_iter()
        .enumerate()
        .map(|(t, &x)| {
            let nx = target_normals.get(t).copied().unwrap_or(z);
            let mut s = czero();
            for (j, (&y, &q)) in sources.iter().zip(charges).enumerate() {
                if (x - y).norm_sqr() == T::zero() {
                    return Err(AnalyticError::Coincident { target: t, source_index: j });
                }
                let ny = source_normals.get(j).copied().unwrap_or(z);
                s += kernel.eval(x, y, nx, ny) * q;
            }
            Ok(s)
        })
        .collect()
}

/// `sqrt(sum |a - r|^2 / sum |r|^2)`.
pub fn rel_error<T: Real>(approx: &[Complex<T>], reference: &[Complex<T>]) -> Result<f64, AnalyticError> {
    if approx.len() != reference.len() {
        return Err(AnalyticError::Length(approx.len(), reference.len()));
    }
    let den: f64 = reference.iter().map(|r| r.norm_sqr().to_f64_lossy()).sum();
    if den == 0.0 {
        return Err(AnalyticError::ZeroReference);
    }
    let num: f64 = approx.iter().zip(reference).map(|(a, r)| (*a - *r).norm_sqr().to_f64_lossy()).sum();
    Ok((num / den).sqrt())
}

/// `count` distinct indices below `n` from a seeded generator, sorted.
pub fn random_targets(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, count.min(n)).into_vec();
    v.sort_unstable();
    v
}
