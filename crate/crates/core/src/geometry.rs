//! Small fixed-size 3D vector type.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub, SubAssign};

use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Vec3<T>(pub [T; 3]);

impl<T: Real> Vec3<T> {
    #[inline(always)]
    pub fn new(x: T, y: T, z: T) -> Self {
        Vec3([x, y, z])
    }

    #[inline(always)]
    pub fn zero() -> Self {
        Vec3([T::zero(); 3])
    }

    pub fn from_f64(v: [f64; 3]) -> Self {
        Vec3([T::c(v[0]), T::c(v[1]), T::c(v[2])])
    }

    #[inline(always)]
    pub fn x(&self) -> T {
        self.0[0]
    }
    #[inline(always)]
    pub fn y(&self) -> T {
        self.0[1]
    }
    #[inline(always)]
    pub fn z(&self) -> T {
        self.0[2]
    }

    #[inline(always)]
    pub fn dot(&self, o: &Self) -> T {
        self.0[0] * o.0[0] + self.0[1] * o.0[1] + self.0[2] * o.0[2]
    }

    #[inline(always)]
    pub fn cross(&self, o: &Self) -> Self {
        Vec3([
            self.0[1] * o.0[2] - self.0[2] * o.0[1],
            self.0[2] * o.0[0] - self.0[0] * o.0[2],
            self.0[0] * o.0[1] - self.0[1] * o.0[0],
        ])
    }

    #[inline(always)]
    pub fn norm_sqr(&self) -> T {
        self.dot(self)
    }

    #[inline(always)]
    pub fn norm(&self) -> T {
        self.norm_sqr().sqrt()
    }

    pub fn normalized(&self) -> Self {
        *self * (T::one() / self.norm())
    }

    #[inline(always)]
    pub fn scale(&self, s: T) -> Self {
        Vec3([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    /// Max-norm.
    pub fn max_abs(&self) -> T {
        self.0[0].abs().max(self.0[1].abs()).max(self.0[2].abs())
    }

    pub fn to_f64(&self) -> [f64; 3] {
        [
            self.0[0].to_f64_lossy(),
            self.0[1].to_f64_lossy(),
            self.0[2].to_f64_lossy(),
        ]
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn add(self, o: Self) -> Self {
        Vec3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl<T: Real> AddAssign for Vec3<T> {
    #[inline(always)]
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn sub(self, o: Self) -> Self {
        Vec3([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl<T: Real> SubAssign for Vec3<T> {
    #[inline(always)]
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn neg(self) -> Self {
        Vec3([-self.0[0], -self.0[1], -self.0[2]])
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    #[inline(always)]
    fn mul(self, s: T) -> Self {
        self.scale(s)
    }
}

impl<T> Index<usize> for Vec3<T> {
    type Output = T;
    #[inline(always)]
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// Row-major 3x3 rotation taking `e_x` onto the unit vector `dir`.
pub fn rotation_from_x<T: Real>(dir: Vec3<T>) -> [[T; 3]; 3] {
    let ex = Vec3::new(T::one(), T::zero(), T::zero());
    let c = ex.dot(&dir);
    let axis = ex.cross(&dir);
    let s = axis.norm();
    if s < T::c(1e-14) {
        if c > T::zero() {
            return [
                [T::one(), T::zero(), T::zero()],
                [T::zero(), T::one(), T::zero()],
                [T::zero(), T::zero(), T::one()],
            ];
        }
        // Half turn about e_z.
        return [
            [-T::one(), T::zero(), T::zero()],
            [T::zero(), -T::one(), T::zero()],
            [T::zero(), T::zero(), T::one()],
        ];
    }
    let k = axis * (T::one() / s);
    let one_c = T::one() - c;
    let (kx, ky, kz) = (k.x(), k.y(), k.z());
    [
        [
            c + kx * kx * one_c,
            kx * ky * one_c - kz * s,
            kx * kz * one_c + ky * s,
        ],
        [
            ky * kx * one_c + kz * s,
            c + ky * ky * one_c,
            ky * kz * one_c - kx * s,
        ],
        [
            kz * kx * one_c - ky * s,
            kz * ky * one_c + kx * s,
            c + kz * kz * one_c,
        ],
    ]
}

#[inline(always)]
pub fn rotate<T: Real>(r: &[[T; 3]; 3], v: Vec3<T>) -> Vec3<T> {
    Vec3([
        r[0][0] * v.0[0] + r[0][1] * v.0[1] + r[0][2] * v.0[2],
        r[1][0] * v.0[0] + r[1][1] * v.0[1] + r[1][2] * v.0[2],
        r[2][0] * v.0[0] + r[2][1] * v.0[1] + r[2][2] * v.0[2],
    ])
}

/// Quasi-uniform points on the unit sphere (Fibonacci lattice).
pub fn fibonacci_sphere<T: Real>(n: usize) -> Vec<Vec3<T>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            Vec3::from_f64([r * phi.cos(), r * phi.sin(), z])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_maps_ex_to_dir() {
        for d in [
            [0.0, 1.0, 0.0],
            [-1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.3, -0.4, 0.866],
        ] {
            let dir = Vec3::<f64>::from_f64(d).normalized();
            let r = rotation_from_x(dir);
            let got = rotate(&r, Vec3::new(1.0, 0.0, 0.0));
            assert!((got - dir).norm() < 1e-14);
            // orthogonal
            let a = rotate(&r, Vec3::new(0.0, 1.0, 0.0));
            let b = rotate(&r, Vec3::new(0.0, 0.0, 1.0));
            assert!(a.dot(&b).abs() < 1e-14 && (a.norm() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn fibonacci_points_are_unit() {
        for p in fibonacci_sphere::<f64>(100) {
            assert!((p.norm() - 1.0).abs() < 1e-14);
        }
    }
}
