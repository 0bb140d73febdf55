//! Wideband fast directional boundary element solver for exterior
//! Helmholtz problems on curved quadratic triangle meshes.

pub mod geometry;
pub mod analytic;
pub mod bench;
pub mod compress;
pub mod fda;
pub mod kernels;
pub mod linalg;
pub mod mesh;
pub mod nystrom;
pub mod octree;
pub mod quadrature;
pub mod scalar;
pub mod solver;

pub use num_complex::Complex;
pub use scalar::Real;

pub type C64 = Complex<f64>;
pub type C32 = Complex<f32>;
pub type Vec3d = geometry::Vec3<f64>;
pub type CMatrix64 = linalg::CMatrix<f64>;
