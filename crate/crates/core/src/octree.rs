//! Adaptive octree with low/high frequency regimes and directional wedges.
//!
//! Points are reordered so that every cube owns a contiguous range of the
//! permutation `perm`. Near and interaction lists are same-level only: when
//! a cube is split, every non-empty near neighbour at that level is split as
//! well, which keeps leaves adjacent only to leaves.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::geometry::Vec3;
use crate::scalar::Real;

/// Points-per-leaf threshold `max(30, 50 (-log10 eps - 3))`.
pub fn leaf_threshold(epsilon: f64) -> usize {
    assert!(epsilon > 0.0 && epsilon < 1.0, "epsilon must lie in (0, 1)");
    let v = 50.0 * (-epsilon.log10() - 3.0);
    (v.round().max(30.0)) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Regime {
    Low,
    High,
}

/// Directions at the centers of an `m x m` grid on each face of `[-1, 1]^3`.
///
/// Ids are `face * m^2 + i * m + j` with faces ordered `+x, -x, +y, -y, +z, -z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectionGrid {
    pub m: usize,
}

const FACE_AXES: [(usize, usize, usize); 3] = [(0, 1, 2), (1, 0, 2), (2, 0, 1)];

impl DirectionGrid {
    pub fn count(&self) -> usize {
        6 * self.m * self.m
    }

    fn split(&self, id: u32) -> (usize, usize, usize) {
        let id = id as usize;
        let mm = self.m * self.m;
        (id / mm, (id % mm) / self.m, id % self.m)
    }

    fn join(&self, face: usize, i: usize, j: usize) -> u32 {
        (face * self.m * self.m + i * self.m + j) as u32
    }

    /// Unit vector at the center of the grid cell.
    pub fn center(&self, id: u32) -> Vec3<f64> {
        let (face, i, j) = self.split(id);
        let m = self.m as f64;
        let u = -1.0 + (2.0 * i as f64 + 1.0) / m;
        let v = -1.0 + (2.0 * j as f64 + 1.0) / m;
        self.face_point(face, u, v).normalized()
    }

    fn face_point(&self, face: usize, u: f64, v: f64) -> Vec3<f64> {
        let (a, b, c) = FACE_AXES[face / 2];
        let s = if face % 2 == 0 { 1.0 } else { -1.0 };
        let mut p = [0.0; 3];
        p[a] = s;
        p[b] = u;
        p[c] = v;
        Vec3(p)
    }

    /// Largest angle between the cell center and any point of its cell.
    pub fn angular_radius(&self, id: u32) -> f64 {
        let (face, i, j) = self.split(id);
        let m = self.m as f64;
        let c = self.center(id);
        let mut worst: f64 = 0.0;
        for (du, dv) in [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let u = -1.0 + 2.0 * (i as f64 + du) / m;
            let v = -1.0 + 2.0 * (j as f64 + dv) / m;
            let p = self.face_point(face, u, v).normalized();
            worst = worst.max(c.dot(&p).clamp(-1.0, 1.0).acos());
        }
        worst
    }

    /// Direction with the opposite center.
    pub fn negate(&self, id: u32) -> u32 {
        let (face, i, j) = self.split(id);
        self.join(face ^ 1, self.m - 1 - i, self.m - 1 - j)
    }

    /// The containing direction on the half-resolution grid.
    pub fn coarse(&self, id: u32) -> u32 {
        let (face, i, j) = self.split(id);
        DirectionGrid { m: self.m / 2 }.join(face, i / 2, j / 2)
    }

    /// Wedge containing the direction of `v`. Antisymmetric:
    /// `assign(-v) == negate(assign(v))`.
    pub fn assign(&self, v: [f64; 3]) -> u32 {
        let negative = v
            .iter()
            .find(|c| **c != 0.0)
            .map(|c| *c < 0.0)
            .unwrap_or(false);
        if negative {
            self.negate(self.assign_raw([-v[0], -v[1], -v[2]]))
        } else {
            self.assign_raw(v)
        }
    }

    fn assign_raw(&self, v: [f64; 3]) -> u32 {
        let mut a = 0;
        for ax in 1..3 {
            if v[ax].abs() > v[a].abs() {
                a = ax;
            }
        }
        let face = 2 * a + usize::from(v[a] < 0.0);
        let (_, b, c) = FACE_AXES[a];
        let scale = v[a].abs();
        let cell = |x: f64| -> usize {
            let t = ((x / scale + 1.0) * 0.5 * self.m as f64).floor();
            (t.max(0.0) as usize).min(self.m - 1)
        };
        self.join(face, cell(v[b]), cell(v[c]))
    }
}

#[derive(Debug, Clone)]
pub struct LevelInfo<T> {
    pub width: T,
    pub regime: Regime,
    /// Direction grid of high frequency levels.
    pub directions: Option<DirectionGrid>,
    /// Near field radius in units of the width (max-norm of integer offsets).
    pub near_radius: i32,
}

#[derive(Debug, Clone)]
pub struct Cube<T> {
    pub center: Vec3<T>,
    pub width: T,
    pub level: usize,
    /// Integer coordinates of the cube at its level.
    pub anchor: [i32; 3],
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Range into [`Octree::perm`].
    pub start: usize,
    pub end: usize,
}

impl<T> Cube<T> {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// One entry of a cube's interaction list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub other: usize,
    /// Integer offset `anchor(other) - anchor(self)`.
    pub offset: [i32; 3],
    /// Wedge of the direction from `self` towards `other` (0 at low frequency).
    pub dir: u32,
}

#[derive(Debug, Clone)]
pub struct Octree<T> {
    pub k: T,
    pub leaf_threshold: usize,
    pub root_min: Vec3<T>,
    pub root_width: T,
    pub cubes: Vec<Cube<T>>,
    pub levels: Vec<Vec<usize>>,
    pub level_info: Vec<LevelInfo<T>>,
    /// Sorted position -> original point index.
    pub perm: Vec<usize>,
    /// Original point index -> owning leaf.
    pub leaf_of: Vec<usize>,
    pub near: Vec<Vec<usize>>,
    pub interactions: Vec<Vec<Interaction>>,
    /// Sorted wedge ids carried by each cube (`[0]` at low frequency).
    pub directions: Vec<Vec<u32>>,
    lookup: Vec<HashMap<[i32; 3], usize>>,
}

/// Relative tolerance on the regime and near-field thresholds. Bounding
/// cubes of sampled geometry fall slightly short of round sizes, and this
/// keeps a cube of width `0.99999 lambda` on the high frequency side.
pub const REGIME_TOLERANCE: f64 = 0.02;

/// Regime and near-field radius in cube widths of a level of width `w`.
pub fn near_radius<T: Real>(k: T, w: T, wavelength: T) -> (Regime, i32) {
    if w >= wavelength * T::c(1.0 - REGIME_TOLERANCE) {
        let r = (T::one() + k * w / T::PI() + T::c(REGIME_TOLERANCE)).floor();
        (Regime::High, r.to_f64_lossy() as i32)
    } else {
        (Regime::Low, 1)
    }
}

impl<T: Real> Octree<T> {
    /// Builds the tree over `points` with threshold from `epsilon`.
    pub fn build(points: &[Vec3<T>], k: T, epsilon: f64) -> Self {
        Self::build_with_threshold(points, k, leaf_threshold(epsilon))
    }

    pub fn build_with_threshold(points: &[Vec3<T>], k: T, leaf_threshold: usize) -> Self {
        assert!(!points.is_empty(), "octree needs at least one point");
        let mut lo = [T::infinity(); 3];
        let mut hi = [T::neg_infinity(); 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut w = (0..3).map(|a| hi[a] - lo[a]).fold(T::zero(), |x, y| x.max(y));
        if w == T::zero() {
            w = T::one();
        }
        let slack = w * T::c(1e-6);
        let width = w + T::c(2.0) * slack;
        let center = Vec3::new(
            (lo[0] + hi[0]) * T::c(0.5),
            (lo[1] + hi[1]) * T::c(0.5),
            (lo[2] + hi[2]) * T::c(0.5),
        );
        let root_min = center - Vec3::new(width, width, width) * T::c(0.5);
        let wavelength = T::c(2.0) * T::PI() / k;

        let mut tree = Octree {
            k,
            leaf_threshold,
            root_min,
            root_width: width,
            cubes: vec![Cube {
                center,
                width,
                level: 0,
                anchor: [0, 0, 0],
                parent: None,
                children: Vec::new(),
                start: 0,
                end: points.len(),
            }],
            levels: vec![vec![0]],
            level_info: Vec::new(),
            perm: (0..points.len()).collect(),
            leaf_of: Vec::new(),
            near: Vec::new(),
            interactions: Vec::new(),
            directions: Vec::new(),
            lookup: vec![HashMap::from([([0, 0, 0], 0)])],
        };
        let (regime, r) = near_radius(k, width, wavelength);
        tree.level_info.push(LevelInfo {
            width,
            regime,
            directions: None,
            near_radius: r,
        });

        let min_width = width * T::c(1e-9);
        loop {
            let l = tree.levels.len() - 1;
            let info = tree.level_info[l].clone();
            if info.width * T::c(0.5) < min_width {
                break;
            }
            let ids = tree.levels[l].clone();
            let mut split: HashMap<usize, bool> = ids.iter().map(|&c| (c, tree.cubes[c].len() > leaf_threshold)).collect();
            let mut work: Vec<usize> = ids.iter().copied().filter(|c| split[c]).collect();
            while let Some(c) = work.pop() {
                for n in tree.same_level_within(c, info.near_radius) {
                    if !split[&n] {
                        split.insert(n, true);
                        work.push(n);
                    }
                }
            }
            let mut next = Vec::new();
            let cw = info.width * T::c(0.5);
            let mut next_lookup = HashMap::new();
            for &c in &ids {
                if !split[&c] {
                    continue;
                }
                let kids = tree.split_cube(c, points);
                for kid in kids {
                    next_lookup.insert(tree.cubes[kid].anchor, kid);
                    next.push(kid);
                }
            }
            if next.is_empty() {
                break;
            }
            let (regime, r) = near_radius(k, cw, wavelength);
            tree.level_info.push(LevelInfo {
                width: cw,
                regime,
                directions: None,
                near_radius: r,
            });
            tree.levels.push(next);
            tree.lookup.push(next_lookup);
        }

        tree.assign_direction_grids();
        tree.leaf_of = vec![usize::MAX; points.len()];
        for (id, c) in tree.cubes.iter().enumerate() {
            if c.is_leaf() {
                for s in c.start..c.end {
                    tree.leaf_of[tree.perm[s]] = id;
                }
            }
        }
        tree.build_lists();
        tree
    }

    fn split_cube(&mut self, c: usize, points: &[Vec3<T>]) -> Vec<usize> {
        let (start, end, center, width, level, anchor) = {
            let cube = &self.cubes[c];
            (cube.start, cube.end, cube.center, cube.width, cube.level, cube.anchor)
        };
        let octant = |p: &Vec3<T>| -> usize {
            usize::from(p[0] > center[0]) | (usize::from(p[1] > center[1]) << 1) | (usize::from(p[2] > center[2]) << 2)
        };
        let mut buckets: [Vec<usize>; 8] = Default::default();
        for s in start..end {
            let idx = self.perm[s];
            buckets[octant(&points[idx])].push(idx);
        }
        let mut pos = start;
        let mut kids = Vec::new();
        let q = width * T::c(0.25);
        for (o, b) in buckets.iter().enumerate() {
            if b.is_empty() {
                continue;
            }
            let bit = |axis: usize| (o >> axis) & 1;
            let off = |axis: usize| if bit(axis) == 1 { q } else { -q };
            let child = Cube {
                center: center + Vec3::new(off(0), off(1), off(2)),
                width: width * T::c(0.5),
                level: level + 1,
                anchor: [
                    2 * anchor[0] + bit(0) as i32,
                    2 * anchor[1] + bit(1) as i32,
                    2 * anchor[2] + bit(2) as i32,
                ],
                parent: Some(c),
                children: Vec::new(),
                start: pos,
                end: pos + b.len(),
            };
            self.perm[pos..pos + b.len()].copy_from_slice(b);
            pos += b.len();
            kids.push(self.cubes.len());
            self.cubes.push(child);
        }
        self.cubes[c].children = kids.clone();
        kids
    }

    /// Same-level cubes with integer max-norm offset at most `radius`,
    /// including the cube itself.
    fn same_level_within(&self, c: usize, radius: i32) -> Vec<usize> {
        let cube = &self.cubes[c];
        let lvl = cube.level;
        let a = cube.anchor;
        let map = &self.lookup[lvl];
        let span = (2 * radius as i64 + 1).pow(3) as usize;
        let mut out = Vec::new();
        if span <= map.len() {
            for dx in -radius..=radius {
                for dy in -radius..=radius {
                    for dz in -radius..=radius {
                        if let Some(&n) = map.get(&[a[0] + dx, a[1] + dy, a[2] + dz]) {
                            out.push(n);
                        }
                    }
                }
            }
        } else {
            for &n in &self.levels[lvl] {
                let b = self.cubes[n].anchor;
                if (0..3).all(|i| (b[i] - a[i]).abs() <= radius) {
                    out.push(n);
                }
            }
        }
        out.sort_unstable();
        out
    }

    fn assign_direction_grids(&mut self) {
        let finest_hf = self.level_info.iter().rposition(|l| l.regime == Regime::High);
        if let Some(f) = finest_hf {
            let wf = self.level_info[f].width;
            let mf = (self.k * wf / T::PI() - T::c(REGIME_TOLERANCE)).ceil().to_f64_lossy().max(1.0) as usize;
            for l in 0..=f {
                debug_assert_eq!(self.level_info[l].regime, Regime::High);
                self.level_info[l].directions = Some(DirectionGrid { m: mf << (f - l) });
            }
        }
    }

    fn build_lists(&mut self) {
        let n = self.cubes.len();
        self.near = vec![Vec::new(); n];
        self.interactions = vec![Vec::new(); n];
        self.directions = vec![Vec::new(); n];
        for l in 0..self.levels.len() {
            let r = self.level_info[l].near_radius;
            for &c in &self.levels[l].clone() {
                self.near[c] = self.same_level_within(c, r);
            }
        }
        for l in 1..self.levels.len() {
            let grid = self.level_info[l].directions;
            for &c in &self.levels[l].clone() {
                let p = self.cubes[c].parent.expect("non-root cube has a parent");
                let a = self.cubes[c].anchor;
                let mut list = Vec::new();
                for &pn in &self.near[p] {
                    for &b in &self.cubes[pn].children {
                        if self.near[c].binary_search(&b).is_ok() {
                            continue;
                        }
                        let ba = self.cubes[b].anchor;
                        let offset = [ba[0] - a[0], ba[1] - a[1], ba[2] - a[2]];
                        let dir = match grid {
                            Some(g) => g.assign([offset[0] as f64, offset[1] as f64, offset[2] as f64]),
                            None => 0,
                        };
                        list.push(Interaction { other: b, offset, dir });
                    }
                }
                list.sort_by_key(|i| i.other);
                self.interactions[c] = list;
            }
        }
        for l in 0..self.levels.len() {
            let grid = self.level_info[l].directions;
            let parent_grid = if l > 0 { self.level_info[l - 1].directions } else { None };
            for &c in &self.levels[l].clone() {
                let mut dirs: Vec<u32> = match grid {
                    None => vec![0],
                    Some(_) => {
                        let mut d: Vec<u32> = self.interactions[c].iter().map(|i| i.dir).collect();
                        if let (Some(pg), Some(p)) = (parent_grid, self.cubes[c].parent) {
                            d.extend(self.directions[p].iter().map(|&z| pg.coarse(z)));
                        }
                        d
                    }
                };
                dirs.sort_unstable();
                dirs.dedup();
                self.directions[c] = dirs;
            }
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn num_points(&self) -> usize {
        self.perm.len()
    }

    /// Original indices of the points owned by a cube.
    pub fn points_of(&self, c: usize) -> &[usize] {
        let cube = &self.cubes[c];
        &self.perm[cube.start..cube.end]
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.cubes.len()).filter(|&c| self.cubes[c].is_leaf())
    }

    pub fn cube_at(&self, level: usize, anchor: [i32; 3]) -> Option<usize> {
        self.lookup[level].get(&anchor).copied()
    }

    pub fn regime(&self, c: usize) -> Regime {
        self.level_info[self.cubes[c].level].regime
    }

    /// Same-level near field of a cube (includes the cube).
    pub fn near_field(&self, c: usize) -> &[usize] {
        &self.near[c]
    }

    /// Interaction field with wedge assignment.
    pub fn interaction_field(&self, c: usize) -> &[Interaction] {
        &self.interactions[c]
    }

    /// Index of a wedge id inside `directions[c]`.
    pub fn direction_slot(&self, c: usize, dir: u32) -> Option<usize> {
        self.directions[c].binary_search(&dir).ok()
    }

    /// Distance of two cubes by the max-coordinate formula.
    pub fn distance(&self, b: usize, c: usize) -> T {
        cube_distance(&self.cubes[b], &self.cubes[c])
    }

    /// Structured text summary for auditing.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "octree points={} cubes={} levels={} leaf_threshold={} k={}",
            self.num_points(),
            self.cubes.len(),
            self.levels.len(),
            self.leaf_threshold,
            self.k
        );
        for (l, ids) in self.levels.iter().enumerate() {
            let info = &self.level_info[l];
            let leaves = ids.iter().filter(|&&c| self.cubes[c].is_leaf()).count();
            let inter: usize = ids.iter().map(|&c| self.interactions[c].len()).sum();
            let dirs: usize = ids.iter().map(|&c| self.directions[c].len()).sum();
            let _ = writeln!(
                s,
                "level={} width={:.6e} regime={:?} cubes={} leaves={} near_radius={} grid_m={} interactions={} cube_directions={}",
                l,
                info.width.to_f64_lossy(),
                info.regime,
                ids.len(),
                leaves,
                info.near_radius,
                info.directions.map_or(0, |g| g.m),
                inter,
                dirs
            );
        }
        s
    }
}

pub fn cube_distance<T: Real>(b: &Cube<T>, c: &Cube<T>) -> T {
    (0..3)
        .map(|i| (b.center[i] - c.center[i]).abs() - b.width * T::c(0.5) - c.width * T::c(0.5))
        .fold(T::neg_infinity(), |x, y| x.max(y))
}
