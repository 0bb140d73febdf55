//! Translation operators in truncated singular coordinates, low-rank
//! interaction matrices, and a binary cache format.
//!
//! With `R_up^+ = V diag(1/sigma) U^H` per level, coefficient blocks are
//! stored as `x = V^H phi` (upward) and `psi~ = V^T psi` (downward). The
//! reduced operators are
//! `S~ = diag(1/sigma) U^H E_up`, `M~ = V_p^H M V_c`, `K~ = V^T K V` and
//! `T~ = T conj(V)`, with `L~ = M~^T` as before.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex;
use rayon::prelude::*;

use crate::fda::{
    CubeSymmetry, EquivSurface, HfGeometry, LevelOperators, M2lKey, M2lOperator, SparseOp, StorageMode, TranslationCache,
    TruncatedPinv, WedgeFrame,
};
use crate::geometry::Vec3;
use crate::linalg::{pivoted_qr, svd, CMatrix};
use crate::octree::Regime;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("level {0} has no singular factors")]
    MissingFactors(usize),
    #[error("cache is already in {0} form")]
    AlreadyReduced(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed cache file: {0}")]
    Format(String),
}

/// Entries of a symmetry action below this modulus are dropped.
const SYMMETRY_DROP: f64 = 1e-12;

/// Expresses every operator of a raw cache in the truncated singular bases.
pub fn reduce_cache<T: Real>(raw: &TranslationCache<T>) -> Result<TranslationCache<T>, CompressError> {
    if raw.mode != StorageMode::Raw {
        return Err(CompressError::AlreadyReduced(raw.mode.name()));
    }
    let mut levels: Vec<LevelOperators<T>> = Vec::with_capacity(raw.levels.len());
    for lev in &raw.levels {
        let Some(surface) = &lev.surface else {
            levels.push(lev.clone());
            continue;
        };
        let v = surface.pinv.v.clone();
        let vh = v.adjoint();
        let vt = v.transpose();
        let s = v.cols();
        let m2l: Vec<M2lOperator<T>> = lev
            .m2l
            .par_iter()
            .map(|k| M2lOperator::Dense(vt.matmul(&k.to_dense()).matmul(&v)))
            .collect();
        let symmetries = lev
            .symmetries
            .iter()
            .map(|sym| {
                sym.as_ref().map(|q| {
                    // W = V^H Q V, with Q V formed by gathering rows of V.
                    let qv = CMatrix::from_fn(q.rows, s, |i, j| {
                        let mut z = Complex::new(T::zero(), T::zero());
                        for p in q.indptr[i]..q.indptr[i + 1] {
                            z += q.values[p] * v[(q.indices[p], j)];
                        }
                        z
                    });
                    SparseOp::from_dense(&vh.matmul(&qv), T::c(SYMMETRY_DROP))
                })
            })
            .collect();
        levels.push(LevelOperators {
            level: lev.level,
            width: lev.width,
            regime: lev.regime,
            surface: lev.surface.clone(),
            state_dim: s,
            outgoing: surface.pinv.reduced_outgoing(),
            basis: Some(v),
            m2m: HashMap::new(),
            m2l,
            m2l_keys: lev.m2l_keys.clone(),
            m2l_index: lev.m2l_index.clone(),
            symmetries,
            frames: lev.frames.clone(),
        });
    }
    // M2M into level l uses the bases of l and l + 1.
    for l in 0..raw.levels.len() {
        if raw.levels[l].m2m.is_empty() {
            continue;
        }
        let vp_h = levels[l].basis.as_ref().ok_or(CompressError::MissingFactors(l))?.adjoint();
        let vc = levels.get(l + 1).and_then(|c| c.basis.clone()).ok_or(CompressError::MissingFactors(l + 1))?;
        let m2m: HashMap<(u8, u32), CMatrix<T>> = raw.levels[l]
            .m2m
            .par_iter()
            .map(|(key, m)| (*key, vp_h.matmul(m).matmul(&vc)))
            .collect();
        levels[l].m2m = m2m;
    }
    Ok(TranslationCache {
        mode: StorageMode::Reduced,
        k: raw.k,
        epsilon: raw.epsilon,
        first_active: raw.first_active,
        levels,
        tree_signature: raw.tree_signature,
    })
}

/// Truncated SVD of a reduced interaction matrix; factors are kept iff the
/// rank is below half the dimension.
///
/// A pivoted QR at a tolerance well below `epsilon` first strips the
/// numerically null part, and the SVD runs on the small triangular factor.
pub fn factorize_m2l<T: Real>(k: &CMatrix<T>, epsilon: f64) -> M2lOperator<T> {
    let s = k.rows().min(k.cols());
    let qr = pivoted_qr(k, T::c(epsilon * 1e-3), s);
    if qr.rank == 0 {
        return M2lOperator::Dense(k.clone());
    }
    // K = Q R P^T; undo the pivoting on the columns of R.
    let mut rp = CMatrix::zeros(qr.rank, k.cols());
    for i in 0..qr.rank {
        for (c, &j) in qr.perm.iter().enumerate() {
            rp[(i, j)] = qr.r[(i, c)];
        }
    }
    let mut f = svd(&rp);
    let r = f.rank(T::c(epsilon)).max(1);
    if 2 * r >= s {
        return M2lOperator::Dense(k.clone());
    }
    f.truncate(r);
    let mut u = qr.q.matmul(&f.u);
    u.scale_cols(&f.sigma);
    M2lOperator::Factored { u, v: f.v.adjoint() }
}

/// `K v` for either storage form.
pub fn apply_m2l<T: Real>(op: &M2lOperator<T>, v: &[Complex<T>]) -> Result<Vec<Complex<T>>, CompressError> {
    let (rows, cols) = op.shape();
    if v.len() != cols {
        return Err(CompressError::Dimension {
            expected: cols,
            got: v.len(),
        });
    }
    let _ = rows;
    Ok(match op {
        M2lOperator::Dense(k) => k.matvec(v),
        M2lOperator::Factored { u, v: vf } => u.matvec(&vf.matvec(v)),
    })
}

/// Reduces a raw cache and replaces rank-deficient interaction matrices by
/// factor pairs. `epsilon` defaults to the cache tolerance.
pub fn low_rank_cache<T: Real>(raw: &TranslationCache<T>, epsilon: Option<f64>) -> Result<TranslationCache<T>, CompressError> {
    let mut c = reduce_cache(raw)?;
    let eps = epsilon.unwrap_or(raw.epsilon);
    for lev in &mut c.levels {
        lev.m2l = lev
            .m2l
            .par_iter()
            .map(|op| match op {
                M2lOperator::Dense(k) => factorize_m2l(k, eps),
                other => other.clone(),
            })
            .collect();
    }
    c.mode = StorageMode::LowRank;
    Ok(c)
}

/// Builds the cache of a given mode from a raw cache.
pub fn convert<T: Real>(raw: &TranslationCache<T>, mode: StorageMode, epsilon: Option<f64>) -> Result<TranslationCache<T>, CompressError> {
    match mode {
        StorageMode::Raw => Ok(raw.clone()),
        StorageMode::Reduced => reduce_cache(raw),
        StorageMode::LowRank => low_rank_cache(raw, epsilon),
    }
}

/// Interaction rank statistics of one level.
#[derive(Debug, Clone, PartialEq)]
pub struct RankCensus {
    pub level: usize,
    pub regime: Regime,
    pub dimension: usize,
    pub matrices: usize,
    pub factored: usize,
    /// Counts of `r / s` in tenths, `[0, 0.1), ..., [0.9, 1.0]`.
    pub histogram: [usize; 10],
}

impl RankCensus {
    pub fn line(&self) -> String {
        let h: Vec<String> = self.histogram.iter().map(|c| c.to_string()).collect();
        format!(
            "level={} regime={:?} s={} matrices={} factored={} r/s_histogram=[{}]",
            self.level,
            self.regime,
            self.dimension,
            self.matrices,
            self.factored,
            h.join(",")
        )
    }
}

/// Ranks of every reduced interaction matrix at tolerance `epsilon`.
pub fn rank_census<T: Real>(cache: &TranslationCache<T>, epsilon: f64) -> Vec<RankCensus> {
    cache
        .levels
        .iter()
        .filter(|l| !l.m2l.is_empty())
        .map(|lev| {
            let ranks: Vec<(usize, usize)> = lev
                .m2l
                .par_iter()
                .map(|op| {
                    let s = op.shape().0.min(op.shape().1);
                    let r = match op {
                        M2lOperator::Factored { u, .. } => u.cols(),
                        M2lOperator::Dense(k) => svd(k).rank(T::c(epsilon)),
                    };
                    (r, s)
                })
                .collect();
            let mut histogram = [0; 10];
            let mut factored = 0;
            for &(r, s) in &ranks {
                let bin = ((10 * r) / s.max(1)).min(9);
                histogram[bin] += 1;
                if 2 * r < s {
                    factored += 1;
                }
            }
            RankCensus {
                level: lev.level,
                regime: lev.regime,
                dimension: lev.state_dim,
                matrices: ranks.len(),
                factored,
                histogram,
            }
        })
        .collect()
}

const MAGIC: &[u8; 8] = b"FDBEMTC\0";
const VERSION: u32 = 1;

struct Writer<W: Write> {
    w: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, x: u8) -> std::io::Result<()> {
        self.w.write_all(&[x])
    }
    fn u32(&mut self, x: u32) -> std::io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    fn u64(&mut self, x: u64) -> std::io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    fn i32(&mut self, x: i32) -> std::io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    fn f64(&mut self, x: f64) -> std::io::Result<()> {
        self.w.write_all(&x.to_le_bytes())
    }
    fn real<T: Real>(&mut self, x: T) -> std::io::Result<()> {
        self.f64(x.to_f64_lossy())
    }
    fn reals<T: Real>(&mut self, v: &[T]) -> std::io::Result<()> {
        self.u64(v.len() as u64)?;
        v.iter().try_for_each(|&x| self.real(x))
    }
    fn points<T: Real>(&mut self, v: &[Vec3<T>]) -> std::io::Result<()> {
        self.u64(v.len() as u64)?;
        v.iter().try_for_each(|p| p.0.iter().try_for_each(|&x| self.real(x)))
    }
    fn matrix<T: Real>(&mut self, m: &CMatrix<T>) -> std::io::Result<()> {
        self.u64(m.rows() as u64)?;
        self.u64(m.cols() as u64)?;
        m.data().iter().try_for_each(|z| {
            self.real(z.re)?;
            self.real(z.im)
        })
    }
}

struct Reader<R: Read> {
    r: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CompressError> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, CompressError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32, CompressError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64, CompressError> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn len(&mut self) -> Result<usize, CompressError> {
        let n = self.u64()?;
        if n > (1 << 34) {
            return Err(CompressError::Format(format!("implausible length {n}")));
        }
        Ok(n as usize)
    }
    fn i32(&mut self) -> Result<i32, CompressError> {
        Ok(i32::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64, CompressError> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn real<T: Real>(&mut self) -> Result<T, CompressError> {
        Ok(T::c(self.f64()?))
    }
    fn reals<T: Real>(&mut self) -> Result<Vec<T>, CompressError> {
        let n = self.len()?;
        (0..n).map(|_| self.real()).collect()
    }
    fn points<T: Real>(&mut self) -> Result<Vec<Vec3<T>>, CompressError> {
        let n = self.len()?;
        (0..n).map(|_| Ok(Vec3([self.real()?, self.real()?, self.real()?]))).collect()
    }
    fn matrix<T: Real>(&mut self) -> Result<CMatrix<T>, CompressError> {
        let r = self.len()?;
        let c = self.len()?;
        let data = (0..r * c)
            .map(|_| Ok(Complex::new(self.real()?, self.real()?)))
            .collect::<Result<Vec<_>, CompressError>>()?;
        Ok(CMatrix::from_vec(r, c, data))
    }
}

fn mode_code(m: StorageMode) -> u8 {
    match m {
        StorageMode::Raw => 0,
        StorageMode::Reduced => 1,
        StorageMode::LowRank => 2,
    }
}

/// Writes a cache: versioned header, then per level the surface, the
/// operators with their dimensions, and row-major complex values.
pub fn write_cache<T: Real>(cache: &TranslationCache<T>, path: &Path) -> Result<(), CompressError> {
    let f = std::fs::File::create(path)?;
    let mut w = Writer {
        w: std::io::BufWriter::new(f),
    };
    w.w.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u8(mode_code(cache.mode))?;
    w.real(cache.k)?;
    w.f64(cache.epsilon)?;
    w.u64(cache.tree_signature)?;
    w.u64(cache.first_active as u64)?;
    w.u64(cache.levels.len() as u64)?;
    for lev in &cache.levels {
        w.u64(lev.level as u64)?;
        w.real(lev.width)?;
        w.u8(u8::from(lev.regime == Regime::High))?;
        w.u64(lev.state_dim as u64)?;
        match &lev.surface {
            None => w.u8(0)?,
            Some(s) => {
                w.u8(1)?;
                w.points(&s.equivalent)?;
                w.points(&s.check)?;
                w.matrix(&s.pinv.v)?;
                w.reals(&s.pinv.sigma)?;
                w.matrix(&s.pinv.uh)?;
                w.reals(&s.pinv.spectrum)?;
                match &s.lattice {
                    None => w.u8(0)?,
                    Some(lat) => {
                        w.u8(1)?;
                        w.u64(lat.len() as u64)?;
                        for c in lat {
                            c.iter().try_for_each(|&x| w.i32(x))?;
                        }
                    }
                }
                match &s.geometry {
                    None => w.u8(0)?,
                    Some(g) => {
                        w.u8(1)?;
                        w.f64(g.source_radius)?;
                        w.f64(g.min_distance)?;
                        w.f64(g.half_angle)?;
                    }
                }
            }
        }
        w.matrix(&lev.outgoing)?;
        match &lev.basis {
            None => w.u8(0)?,
            Some(b) => {
                w.u8(1)?;
                w.matrix(b)?;
            }
        }
        let mut keys: Vec<_> = lev.m2m.keys().copied().collect();
        keys.sort_unstable();
        w.u64(keys.len() as u64)?;
        for key in keys {
            w.u8(key.0)?;
            w.u32(key.1)?;
            w.matrix(&lev.m2m[&key])?;
        }
        w.u64(lev.m2l.len() as u64)?;
        for (key, op) in lev.m2l_keys.iter().zip(&lev.m2l) {
            let (tag, o, d) = match *key {
                M2lKey::Low(o) => (0u8, o, 0),
                M2lKey::High(o, d) => (1u8, o, d),
            };
            w.u8(tag)?;
            o.iter().try_for_each(|&x| w.i32(x))?;
            w.u32(d)?;
            match op {
                M2lOperator::Dense(k) => {
                    w.u8(0)?;
                    w.matrix(k)?;
                }
                M2lOperator::Factored { u, v } => {
                    w.u8(1)?;
                    w.matrix(u)?;
                    w.matrix(v)?;
                }
            }
        }
        for sym in &lev.symmetries {
            match sym {
                None => w.u8(0)?,
                Some(sp) => {
                    w.u8(1)?;
                    w.u64(sp.rows as u64)?;
                    w.u64(sp.cols as u64)?;
                    w.u64(sp.nnz() as u64)?;
                    sp.indptr.iter().try_for_each(|&x| w.u64(x as u64))?;
                    sp.indices.iter().try_for_each(|&x| w.u64(x as u64))?;
                    sp.values.iter().try_for_each(|z| {
                        w.real(z.re)?;
                        w.real(z.im)
                    })?;
                }
            }
        }
        w.u64(lev.frames.len() as u64)?;
        for f in &lev.frames {
            w.u32(f.representative)?;
            w.u8(f.symmetry.index() as u8)?;
        }
    }
    w.w.flush()?;
    Ok(())
}

/// Reads a cache written by [`write_cache`].
pub fn read_cache<T: Real>(path: &Path) -> Result<TranslationCache<T>, CompressError> {
    let f = std::fs::File::open(path)?;
    let mut r = Reader {
        r: std::io::BufReader::new(f),
    };
    let magic: [u8; 8] = r.bytes()?;
    if &magic != MAGIC {
        return Err(CompressError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CompressError::Format(format!("unsupported version {version}")));
    }
    let mode = match r.u8()? {
        0 => StorageMode::Raw,
        1 => StorageMode::Reduced,
        2 => StorageMode::LowRank,
        x => return Err(CompressError::Format(format!("mode {x}"))),
    };
    let k = r.real()?;
    let epsilon = r.f64()?;
    let tree_signature = r.u64()?;
    let first_active = r.len()?;
    let nlev = r.len()?;
    let mut levels = Vec::with_capacity(nlev);
    for _ in 0..nlev {
        let level = r.len()?;
        let width: T = r.real()?;
        let regime = if r.u8()? == 1 { Regime::High } else { Regime::Low };
        let state_dim = r.len()?;
        let surface = if r.u8()? == 1 {
            let equivalent = r.points()?;
            let check = r.points()?;
            let v = r.matrix()?;
            let sigma = r.reals()?;
            let uh = r.matrix()?;
            let spectrum = r.reals()?;
            let lattice = if r.u8()? == 1 {
                let n = r.len()?;
                Some((0..n).map(|_| Ok([r.i32()?, r.i32()?, r.i32()?])).collect::<Result<Vec<_>, CompressError>>()?)
            } else {
                None
            };
            let geometry = if r.u8()? == 1 {
                Some(HfGeometry {
                    source_radius: r.f64()?,
                    min_distance: r.f64()?,
                    half_angle: r.f64()?,
                })
            } else {
                None
            };
            Some(Arc::new(EquivSurface {
                width,
                regime,
                equivalent,
                check,
                pinv: TruncatedPinv { v, sigma, uh, spectrum },
                lattice,
                geometry,
            }))
        } else {
            None
        };
        let outgoing = r.matrix()?;
        let basis = if r.u8()? == 1 { Some(r.matrix()?) } else { None };
        let nm = r.len()?;
        let mut m2m = HashMap::with_capacity(nm);
        for _ in 0..nm {
            let q = r.u8()?;
            let d = r.u32()?;
            m2m.insert((q, d), r.matrix()?);
        }
        let nk = r.len()?;
        let mut m2l = Vec::with_capacity(nk);
        let mut m2l_keys = Vec::with_capacity(nk);
        for _ in 0..nk {
            let tag = r.u8()?;
            let o = [r.i32()?, r.i32()?, r.i32()?];
            let d = r.u32()?;
            m2l_keys.push(if tag == 0 { M2lKey::Low(o) } else { M2lKey::High(o, d) });
            m2l.push(if r.u8()? == 0 {
                M2lOperator::Dense(r.matrix()?)
            } else {
                let u = r.matrix()?;
                let v = r.matrix()?;
                M2lOperator::Factored { u, v }
            });
        }
        let mut symmetries = Vec::with_capacity(48);
        for _ in 0..48 {
            symmetries.push(if r.u8()? == 1 {
                let rows = r.len()?;
                let cols = r.len()?;
                let nnz = r.len()?;
                let indptr = (0..=rows).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
                let indices = (0..nnz).map(|_| r.len()).collect::<Result<Vec<_>, _>>()?;
                let values = (0..nnz)
                    .map(|_| Ok(Complex::new(r.real()?, r.real()?)))
                    .collect::<Result<Vec<_>, CompressError>>()?;
                Some(SparseOp {
                    rows,
                    cols,
                    indptr,
                    indices,
                    values,
                })
            } else {
                None
            });
        }
        let nf = r.len()?;
        let frames = (0..nf)
            .map(|_| {
                Ok(WedgeFrame {
                    representative: r.u32()?,
                    symmetry: CubeSymmetry::from_index(r.u8()? as usize % 48),
                })
            })
            .collect::<Result<Vec<_>, CompressError>>()?;
        let m2l_index = m2l_keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
        levels.push(LevelOperators {
            level,
            width,
            regime,
            surface,
            state_dim,
            outgoing,
            basis,
            m2m,
            m2l,
            m2l_keys,
            m2l_index,
            symmetries,
            frames,
        });
    }
    Ok(TranslationCache {
        mode,
        k,
        epsilon,
        first_active,
        levels,
        tree_signature,
    })
}
