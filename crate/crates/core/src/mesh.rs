//! Curved 6-node triangle meshes, their geometry and the Nyström point cloud.
//!
//! Node order inside an element is corners 1-2-3 followed by the mid-edge
//! nodes of edges 12, 23 and 31. Intrinsic coordinates `(xi1, xi2)` map to
//! barycentrics `L1 = 1 - xi1 - xi2`, `L2 = xi1`, `L3 = xi2`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::geometry::Vec3;
use crate::quadrature::RULE6;
use crate::scalar::Real;

#[derive(Debug, thiserror::Error)]
pub enum MeshError {
    #[error("cannot read mesh file: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: unsupported element type {ty} (element {element})")]
    UnsupportedElementType { line: usize, element: usize, ty: i64 },
    #[error("element {element}: vertex index {index} is invalid")]
    InvalidVertex { element: usize, index: usize },
    #[error("element {element}: repeated vertex index")]
    RepeatedVertex { element: usize },
    #[error("non-manifold edge ({a}, {b}) shared by {count} elements (first: element {element})")]
    NonManifoldEdge { a: usize, b: usize, count: usize, element: usize },
    #[error("inconsistent orientation across edge ({a}, {b}) at element {element}")]
    InconsistentOrientation { a: usize, b: usize, element: usize },
    #[error("element {element}: degenerate geometry (jacobian {jacobian:e})")]
    DegenerateElement { element: usize, jacobian: f64 },
    #[error("mesh contains no elements")]
    Empty,
}

/// Supported input formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    GmshMsh2,
    GmshMsh4,
}

impl MeshFormat {
    /// Guesses the format from the `$MeshFormat` header.
    pub fn detect(text: &str) -> Option<Self> {
        let mut lines = text.lines().map(str::trim);
        while let Some(l) = lines.next() {
            if l == "$MeshFormat" {
                let v = lines.next()?.split_whitespace().next()?;
                return if v.starts_with('2') {
                    Some(Self::GmshMsh2)
                } else if v.starts_with('4') {
                    Some(Self::GmshMsh4)
                } else {
                    None
                };
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub vertex_ids: [usize; 6],
    pub element_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadPoint<T> {
    pub position: Vec3<T>,
    pub normal: Vec3<T>,
    pub weight: T,
    pub owner_element: usize,
    pub intrinsic: [T; 2],
}

/// Values of the six quadratic shape functions.
#[inline]
pub fn shape_functions<T: Real>(xi1: T, xi2: T) -> [T; 6] {
    let two = T::c(2.0);
    let four = T::c(4.0);
    let l1 = T::one() - xi1 - xi2;
    let l2 = xi1;
    let l3 = xi2;
    [
        l1 * (two * l1 - T::one()),
        l2 * (two * l2 - T::one()),
        l3 * (two * l3 - T::one()),
        four * l1 * l2,
        four * l2 * l3,
        four * l3 * l1,
    ]
}

/// Partial derivatives of the shape functions with respect to `xi1` and `xi2`.
#[inline]
pub fn shape_derivatives<T: Real>(xi1: T, xi2: T) -> ([T; 6], [T; 6]) {
    let four = T::c(4.0);
    let l1 = T::one() - xi1 - xi2;
    let l2 = xi1;
    let l3 = xi2;
    let d1 = [
        -(four * l1 - T::one()),
        four * l2 - T::one(),
        T::zero(),
        four * (l1 - l2),
        four * l3,
        -four * l3,
    ];
    let d2 = [
        -(four * l1 - T::one()),
        T::zero(),
        four * l3 - T::one(),
        -four * l2,
        four * l2,
        four * (l1 - l3),
    ];
    (d1, d2)
}

/// Constant second derivatives `(d11, d12, d22)` of the shape functions.
pub fn shape_second_derivatives<T: Real>() -> ([T; 6], [T; 6], [T; 6]) {
    let f = |a: [f64; 6]| a.map(T::c);
    (
        f([4.0, 4.0, 0.0, -8.0, 0.0, 0.0]),
        f([4.0, 0.0, 0.0, -4.0, 4.0, -4.0]),
        f([4.0, 0.0, 4.0, 0.0, 0.0, -8.0]),
    )
}

/// Geometry of one element: node coordinates plus evaluation helpers.
#[derive(Debug, Clone, Copy)]
pub struct ElementMap<T> {
    pub nodes: [Vec3<T>; 6],
}

/// Point on an element with its first-order geometry.
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint<T> {
    pub position: Vec3<T>,
    pub normal: Vec3<T>,
    pub jacobian: T,
    pub t1: Vec3<T>,
    pub t2: Vec3<T>,
}

impl<T: Real> ElementMap<T> {
    pub fn position(&self, xi1: T, xi2: T) -> Vec3<T> {
        let phi = shape_functions(xi1, xi2);
        let mut p = Vec3::zero();
        for n in 0..6 {
            p += self.nodes[n] * phi[n];
        }
        p
    }

    pub fn tangents(&self, xi1: T, xi2: T) -> (Vec3<T>, Vec3<T>) {
        let (d1, d2) = shape_derivatives(xi1, xi2);
        let mut t1 = Vec3::zero();
        let mut t2 = Vec3::zero();
        for n in 0..6 {
            t1 += self.nodes[n] * d1[n];
            t2 += self.nodes[n] * d2[n];
        }
        (t1, t2)
    }

    /// `(x_11, x_12, x_22)`, constant over the element.
    pub fn second_derivatives(&self) -> (Vec3<T>, Vec3<T>, Vec3<T>) {
        let (a, b, c) = shape_second_derivatives::<T>();
        let mut x11 = Vec3::zero();
        let mut x12 = Vec3::zero();
        let mut x22 = Vec3::zero();
        for n in 0..6 {
            x11 += self.nodes[n] * a[n];
            x12 += self.nodes[n] * b[n];
            x22 += self.nodes[n] * c[n];
        }
        (x11, x12, x22)
    }

    /// Position, unit normal and area Jacobian. The Jacobian is not checked.
    pub fn eval(&self, xi1: T, xi2: T) -> SurfacePoint<T> {
        let (t1, t2) = self.tangents(xi1, xi2);
        let c = t1.cross(&t2);
        let jacobian = c.norm();
        SurfacePoint {
            position: self.position(xi1, xi2),
            normal: c * (T::one() / jacobian),
            jacobian,
            t1,
            t2,
        }
    }

    /// Longest straight corner-to-corner edge.
    pub fn max_corner_edge(&self) -> T {
        let [a, b, c, ..] = self.nodes;
        (b - a).norm().max((c - b).norm()).max((a - c).norm())
    }
}

#[derive(Debug, Clone)]
pub struct Mesh<T> {
    pub vertices: Vec<Vec3<T>>,
    pub elements: Vec<Element>,
    /// Largest bounding-box extent.
    pub characteristic_length: T,
}

impl<T: Real> Mesh<T> {
    /// Validates topology and geometry, orienting normals outward.
    pub fn new(vertices: Vec<Vec3<T>>, elements: Vec<Element>) -> Result<Self, MeshError> {
        if elements.is_empty() {
            return Err(MeshError::Empty);
        }
        for e in &elements {
            for &v in &e.vertex_ids {
                if v >= vertices.len() {
                    return Err(MeshError::InvalidVertex { element: e.element_id, index: v });
                }
            }
            let mut ids = e.vertex_ids;
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(MeshError::RepeatedVertex { element: e.element_id });
            }
        }
        check_manifold(&elements)?;
        let characteristic_length = bounding_extent(&vertices);
        let mut mesh = Mesh {
            vertices,
            elements,
            characteristic_length,
        };
        for (i, _) in mesh.elements.iter().enumerate() {
            let map = mesh.element_map(i);
            let scale = map.max_corner_edge();
            for &(x1, x2, _) in RULE6 {
                let j = map.eval(T::c(x1), T::c(x2)).jacobian;
                if !(j > T::c(1e-14) * scale * scale) {
                    return Err(MeshError::DegenerateElement {
                        element: mesh.elements[i].element_id,
                        jacobian: j.to_f64_lossy(),
                    });
                }
            }
        }
        mesh.orient_outward();
        Ok(mesh)
    }

    fn orient_outward(&mut self) {
        let n = self.vertices.len() as f64;
        let mut c = Vec3::<T>::zero();
        for v in &self.vertices {
            c += *v;
        }
        let centroid = c * T::c(1.0 / n);
        let flux: T = self
            .quadrature_points()
            .iter()
            .map(|q| q.weight * q.normal.dot(&(q.position - centroid)))
            .sum();
        if flux < T::zero() {
            for e in &mut self.elements {
                let v = e.vertex_ids;
                e.vertex_ids = [v[0], v[2], v[1], v[5], v[4], v[3]];
            }
        }
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    /// Number of Nyström unknowns, six per element.
    pub fn num_points(&self) -> usize {
        6 * self.elements.len()
    }

    pub fn element_map(&self, e: usize) -> ElementMap<T> {
        let ids = self.elements[e].vertex_ids;
        ElementMap {
            nodes: ids.map(|i| self.vertices[i]),
        }
    }

    /// Position, unit normal and Jacobian at an intrinsic point.
    pub fn element_geometry(&self, e: usize, xi: [T; 2]) -> Result<(Vec3<T>, Vec3<T>, T), MeshError> {
        let map = self.element_map(e);
        let s = map.max_corner_edge();
        let p = map.eval(xi[0], xi[1]);
        if !(p.jacobian >= T::c(1e-14) * s * s) {
            return Err(MeshError::DegenerateElement {
                element: self.elements[e].element_id,
                jacobian: p.jacobian.to_f64_lossy(),
            });
        }
        Ok((p.position, p.normal, p.jacobian))
    }

    /// The Nyström point cloud: six points per element in element order.
    pub fn quadrature_points(&self) -> Vec<QuadPoint<T>> {
        let mut out = Vec::with_capacity(self.num_points());
        for e in 0..self.elements.len() {
            let map = self.element_map(e);
            for &(x1, x2, w) in RULE6 {
                let (x1, x2) = (T::c(x1), T::c(x2));
                let p = map.eval(x1, x2);
                out.push(QuadPoint {
                    position: p.position,
                    normal: p.normal,
                    weight: T::c(0.5 * w) * p.jacobian,
                    owner_element: e,
                    intrinsic: [x1, x2],
                });
            }
        }
        out
    }

    /// Sum of quadrature weights.
    pub fn area(&self) -> T {
        self.quadrature_points().iter().map(|q| q.weight).sum()
    }

    /// Largest corner edge length over all elements.
    pub fn max_edge(&self) -> T {
        (0..self.elements.len())
            .map(|e| self.element_map(e).max_corner_edge())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// Writes the mesh as Gmsh MSH 2.2 ASCII.
    pub fn write_msh2(&self, path: &Path) -> Result<(), MeshError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_msh2_string().as_bytes())?;
        Ok(())
    }

    pub fn to_msh2_string(&self) -> String {
        let mut s = String::new();
        s.push_str("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n");
        let _ = writeln!(s, "{}", self.vertices.len());
        for (i, v) in self.vertices.iter().enumerate() {
            let p = v.to_f64();
            let _ = writeln!(s, "{} {:.17e} {:.17e} {:.17e}", i + 1, p[0], p[1], p[2]);
        }
        s.push_str("$EndNodes\n$Elements\n");
        let _ = writeln!(s, "{}", self.elements.len());
        for (i, e) in self.elements.iter().enumerate() {
            let _ = write!(s, "{} 9 2 1 1", i + 1);
            for v in e.vertex_ids {
                let _ = write!(s, " {}", v + 1);
            }
            s.push('\n');
        }
        s.push_str("$EndElements\n");
        s
    }
}

fn bounding_extent<T: Real>(v: &[Vec3<T>]) -> T {
    let mut lo = [T::infinity(); 3];
    let mut hi = [T::neg_infinity(); 3];
    for p in v {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (0..3).map(|a| hi[a] - lo[a]).fold(T::zero(), |x, y| x.max(y))
}

fn check_manifold(elements: &[Element]) -> Result<(), MeshError> {
    // undirected edge -> (count, directed forward count, first element)
    let mut edges: HashMap<(usize, usize), (usize, usize, usize)> = HashMap::new();
    for e in elements {
        let c = &e.vertex_ids;
        for (a, b) in [(c[0], c[1]), (c[1], c[2]), (c[2], c[0])] {
            let key = (a.min(b), a.max(b));
            let entry = edges.entry(key).or_insert((0, 0, e.element_id));
            entry.0 += 1;
            if a < b {
                entry.1 += 1;
            }
        }
    }
    let mut bad: Vec<_> = edges.iter().filter(|(_, v)| v.0 != 2 || v.1 != 1).collect();
    bad.sort_by_key(|(k, _)| **k);
    if let Some((&(a, b), &(count, _, element))) = bad.first() {
        if count != 2 {
            return Err(MeshError::NonManifoldEdge { a, b, count, element });
        }
        return Err(MeshError::InconsistentOrientation { a, b, element });
    }
    Ok(())
}

/// Reads a mesh file in the given format.
pub fn parse_mesh<T: Real>(path: &Path, format: MeshFormat) -> Result<Mesh<T>, MeshError> {
    let text = std::fs::read_to_string(path)?;
    parse_mesh_str(&text, format)
}

/// Reads a mesh file, detecting the format from its header.
pub fn read_mesh<T: Real>(path: &Path) -> Result<Mesh<T>, MeshError> {
    let text = std::fs::read_to_string(path)?;
    let format = MeshFormat::detect(&text).ok_or(MeshError::Parse {
        line: 1,
        msg: "missing or unsupported $MeshFormat header".into(),
    })?;
    parse_mesh_str(&text, format)
}

pub fn parse_mesh_str<T: Real>(text: &str, format: MeshFormat) -> Result<Mesh<T>, MeshError> {
    let mut lines = Lines::new(text);
    let mut nodes: Vec<(usize, Vec3<T>)> = Vec::new();
    let mut raw_elements: Vec<(usize, [usize; 6])> = Vec::new();
    while let Some((ln, l)) = lines.next() {
        match l {
            "$MeshFormat" => {
                let (ln, hdr) = lines.expect("format line")?;
                let mut it = hdr.split_whitespace();
                let _version = it.next();
                if it.next() != Some("0") {
                    return Err(MeshError::Parse {
                        line: ln,
                        msg: "binary MSH files are not supported".into(),
                    });
                }
            }
            "$Nodes" => match format {
                MeshFormat::GmshMsh2 => read_nodes_v2(&mut lines, &mut nodes)?,
                MeshFormat::GmshMsh4 => read_nodes_v4(&mut lines, &mut nodes)?,
            },
            "$Elements" => match format {
                MeshFormat::GmshMsh2 => read_elements_v2(&mut lines, &mut raw_elements)?,
                MeshFormat::GmshMsh4 => read_elements_v4(&mut lines, &mut raw_elements)?,
            },
            s if s.starts_with('$') && !s.starts_with("$End") => {
                // Skip unknown sections.
                let end = format!("$End{}", &s[1..]);
                loop {
                    match lines.next() {
                        Some((_, l)) if l == end => break,
                        Some(_) => {}
                        None => {
                            return Err(MeshError::Parse {
                                line: ln,
                                msg: format!("unterminated section {s}"),
                            })
                        }
                    }
                }
            }
            _ => {}
        }
    }
    let mut index = HashMap::with_capacity(nodes.len());
    let mut vertices = Vec::with_capacity(nodes.len());
    for (tag, p) in nodes {
        index.insert(tag, vertices.len());
        vertices.push(p);
    }
    let mut elements = Vec::with_capacity(raw_elements.len());
    for (k, (tag, ids)) in raw_elements.into_iter().enumerate() {
        let mut v = [0usize; 6];
        for (slot, id) in v.iter_mut().zip(ids) {
            *slot = *index.get(&id).ok_or(MeshError::InvalidVertex { element: tag, index: id })?;
        }
        let _ = k;
        elements.push(Element {
            vertex_ids: v,
            element_id: tag,
        });
    }
    Mesh::new(vertices, elements)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate(),
        }
    }

    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            let t = l.trim();
            if !t.is_empty() {
                return Some((i + 1, t));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str), MeshError> {
        self.next().ok_or(MeshError::Parse {
            line: 0,
            msg: format!("unexpected end of file while reading {what}"),
        })
    }
}

fn parse_num<N: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<N, MeshError> {
    tok.and_then(|t| t.parse().ok()).ok_or_else(|| MeshError::Parse {
        line,
        msg: format!("expected {what}"),
    })
}

fn parse_point<T: Real>(it: &mut std::str::SplitWhitespace, line: usize) -> Result<Vec3<T>, MeshError> {
    let x: f64 = parse_num(it.next(), line, "x coordinate")?;
    let y: f64 = parse_num(it.next(), line, "y coordinate")?;
    let z: f64 = parse_num(it.next(), line, "z coordinate")?;
    Ok(Vec3::from_f64([x, y, z]))
}

fn read_nodes_v2<T: Real>(lines: &mut Lines, nodes: &mut Vec<(usize, Vec3<T>)>) -> Result<(), MeshError> {
    let (ln, l) = lines.expect("node count")?;
    let n: usize = parse_num(Some(l), ln, "node count")?;
    for _ in 0..n {
        let (ln, l) = lines.expect("node")?;
        let mut it = l.split_whitespace();
        let tag: usize = parse_num(it.next(), ln, "node tag")?;
        nodes.push((tag, parse_point(&mut it, ln)?));
    }
    end_section(lines, "$EndNodes")
}

fn read_nodes_v4<T: Real>(lines: &mut Lines, nodes: &mut Vec<(usize, Vec3<T>)>) -> Result<(), MeshError> {
    let (ln, l) = lines.expect("node header")?;
    let mut it = l.split_whitespace();
    let blocks: usize = parse_num(it.next(), ln, "entity block count")?;
    for _ in 0..blocks {
        let (ln, l) = lines.expect("node block header")?;
        let h: Vec<&str> = l.split_whitespace().collect();
        if h.len() < 4 {
            return Err(MeshError::Parse {
                line: ln,
                msg: "malformed node block header".into(),
            });
        }
        let parametric: usize = parse_num(Some(h[2]), ln, "parametric flag")?;
        let count: usize = parse_num(Some(h[3]), ln, "node count")?;
        let mut tags = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, l) = lines.expect("node tag")?;
            tags.push(parse_num::<usize>(Some(l), ln, "node tag")?);
        }
        for tag in tags {
            let (ln, l) = lines.expect("node coordinates")?;
            let mut it = l.split_whitespace();
            let p = parse_point(&mut it, ln)?;
            let _ = parametric;
            nodes.push((tag, p));
        }
    }
    end_section(lines, "$EndNodes")
}

// 0D and 1D entities that Gmsh writes alongside surface elements.
fn is_ignorable(ty: i64) -> bool {
    matches!(ty, 1 | 8 | 15)
}

fn read_elements_v2(lines: &mut Lines, out: &mut Vec<(usize, [usize; 6])>) -> Result<(), MeshError> {
    let (ln, l) = lines.expect("element count")?;
    let n: usize = parse_num(Some(l), ln, "element count")?;
    for _ in 0..n {
        let (ln, l) = lines.expect("element")?;
        let tok: Vec<&str> = l.split_whitespace().collect();
        let tag: usize = parse_num(tok.first().copied(), ln, "element tag")?;
        let ty: i64 = parse_num(tok.get(1).copied(), ln, "element type")?;
        let ntags: usize = parse_num(tok.get(2).copied(), ln, "tag count")?;
        if is_ignorable(ty) {
            continue;
        }
        if ty != 9 {
            return Err(MeshError::UnsupportedElementType { line: ln, element: tag, ty });
        }
        let ids = &tok[(3 + ntags).min(tok.len())..];
        out.push((tag, six_ids(ids, ln)?));
    }
    end_section(lines, "$EndElements")
}

fn read_elements_v4(lines: &mut Lines, out: &mut Vec<(usize, [usize; 6])>) -> Result<(), MeshError> {
    let (ln, l) = lines.expect("element header")?;
    let blocks: usize = parse_num(l.split_whitespace().next(), ln, "entity block count")?;
    for _ in 0..blocks {
        let (ln, l) = lines.expect("element block header")?;
        let h: Vec<&str> = l.split_whitespace().collect();
        let ty: i64 = parse_num(h.get(2).copied(), ln, "element type")?;
        let count: usize = parse_num(h.get(3).copied(), ln, "element count")?;
        for _ in 0..count {
            let (ln, l) = lines.expect("element")?;
            let tok: Vec<&str> = l.split_whitespace().collect();
            let tag: usize = parse_num(tok.first().copied(), ln, "element tag")?;
            if is_ignorable(ty) {
                continue;
            }
            if ty != 9 {
                return Err(MeshError::UnsupportedElementType { line: ln, element: tag, ty });
            }
            out.push((tag, six_ids(&tok[1..], ln)?));
        }
    }
    end_section(lines, "$EndElements")
}

fn six_ids(tok: &[&str], line: usize) -> Result<[usize; 6], MeshError> {
    if tok.len() != 6 {
        return Err(MeshError::Parse {
            line,
            msg: format!("expected 6 node ids, found {}", tok.len()),
        });
    }
    let mut ids = [0usize; 6];
    for (slot, t) in ids.iter_mut().zip(tok) {
        *slot = parse_num(Some(t), line, "node id")?;
    }
    Ok(ids)
}

fn end_section(lines: &mut Lines, end: &str) -> Result<(), MeshError> {
    let (ln, l) = lines.expect(end)?;
    if l != end {
        return Err(MeshError::Parse {
            line: ln,
            msg: format!("expected {end}, found {l:?}"),
        });
    }
    Ok(())
}

/// Curved quadratic sphere mesh: an icosahedron whose faces are split into
/// `n^2` sub-triangles with every node projected onto the sphere.
/// Produces `20 n^2` elements.
pub fn icosphere<T: Real>(n: usize, radius: f64) -> Mesh<T> {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let v = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let f = [
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    subdivided_sphere(&v, &f, n, radius)
}

/// Octahedron-based sphere mesh with `8 n^2` elements.
pub fn octasphere<T: Real>(n: usize, radius: f64) -> Mesh<T> {
    let v = [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let f = [
        [0, 2, 4],
        [2, 1, 4],
        [1, 3, 4],
        [3, 0, 4],
        [2, 0, 5],
        [1, 2, 5],
        [3, 1, 5],
        [0, 3, 5],
    ];
    subdivided_sphere(&v, &f, n, radius)
}

fn subdivided_sphere<T: Real>(v: &[[f64; 3]], faces: &[[usize; 3]], n: usize, radius: f64) -> Mesh<T> {
    assert!(n >= 1);
    let proj = |p: [f64; 3]| {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        [radius * p[0] / r, radius * p[1] / r, radius * p[2] / r]
    };
    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut lookup: HashMap<[i64; 3], usize> = HashMap::new();
    let mut node = |p: [f64; 3]| -> usize {
        let q = proj(p);
        let key = q.map(|c| (c / radius * 1e9).round() as i64);
        *lookup.entry(key).or_insert_with(|| {
            vertices.push(q);
            vertices.len() - 1
        })
    };
    let mut elements = Vec::new();
    let m = 2 * n;
    for face in faces {
        let mut a = v[face[0]];
        let mut b = v[face[1]];
        let mut c = v[face[2]];
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let nrm = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        if nrm[0] * a[0] + nrm[1] * a[1] + nrm[2] * a[2] < 0.0 {
            std::mem::swap(&mut b, &mut c);
        }
        let _ = &mut a;
        let grid = |i: usize, j: usize| -> [f64; 3] {
            let s = i as f64 / m as f64;
            let t = j as f64 / m as f64;
            [
                a[0] + (b[0] - a[0]) * s + (c[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * s + (c[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * s + (c[2] - a[2]) * t,
            ]
        };
        let mut g = |i: usize, j: usize| node(grid(i, j));
        for i in 0..n {
            for j in 0..(n - i) {
                let (i2, j2) = (2 * i, 2 * j);
                let up = [
                    g(i2, j2),
                    g(i2 + 2, j2),
                    g(i2, j2 + 2),
                    g(i2 + 1, j2),
                    g(i2 + 1, j2 + 1),
                    g(i2, j2 + 1),
                ];
                elements.push(up);
                if i + j + 1 < n {
                    let down = [
                        g(i2 + 2, j2),
                        g(i2 + 2, j2 + 2),
                        g(i2, j2 + 2),
                        g(i2 + 2, j2 + 1),
                        g(i2 + 1, j2 + 2),
                        g(i2 + 1, j2 + 1),
                    ];
                    elements.push(down);
                }
            }
        }
    }
    let vertices = vertices.into_iter().map(Vec3::from_f64).collect();
    let elements = elements
        .into_iter()
        .enumerate()
        .map(|(i, ids)| Element {
            vertex_ids: ids,
            element_id: i + 1,
        })
        .collect();
    Mesh::new(vertices, elements).expect("generated sphere mesh is valid")
}

/// Smallest icosphere subdivision with element edges at most about `lambda / per_lambda`
/// for a sphere of the given radius.
pub fn icosphere_subdivisions(k: f64, radius: f64, per_lambda: f64) -> usize {
    // Icosahedron edge on the unit sphere is about 1.0515.
    let lambda = 2.0 * std::f64::consts::PI / k;
    let h = lambda / per_lambda;
    ((1.0515 * radius / h - 1e-9).ceil() as usize).max(1)
}
