//! Tetrahedral volume meshes with oriented boundary triangulations.
//!
//! Meshes are built from a structured hexahedral grid split into six
//! tetrahedra per cell (Kuhn pattern around the main cell diagonal), which
//! keeps neighbouring cells conforming and the output deterministic.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub type Point3 = [f64; 3];

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("invalid extent {0:?}: every dimension must be positive")]
    NonPositiveExtent([f64; 3]),
    #[error("invalid edge length {0}")]
    InvalidEdgeLength(f64),
    #[error("degenerate extent: dimension {axis} ({extent} mm) is smaller than the edge length {edge_len} mm")]
    DegenerateExtent { axis: usize, extent: f64, edge_len: f64 },
    #[error("cap height {cap_height} mm and footprint radius {radius} mm do not define a spherical cap")]
    InvalidCap { cap_height: f64, radius: f64 },
    #[error("phantom spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: malformed header: {msg}")]
    MalformedHeader { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: index out of range: {index} >= {count}")]
    IndexOutOfRange { line: usize, index: usize, count: usize },
    #[error("no elements")]
    NoElements,
    #[error("element {element} has non-positive volume {volume:e}")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("non-manifold boundary: {0}")]
    NonManifoldBoundary(String),
    #[error("io: {0}")]
    Io(String),
}

/// Tetrahedral mesh with outward-oriented boundary faces. Coordinates in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct TetMesh {
    nodes: Vec<Point3>,
    elements: Vec<[usize; 4]>,
    boundary_faces: Vec<[usize; 3]>,
    node_is_boundary: Vec<bool>,
}

fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Signed volume of the tetrahedron (p0, p1, p2, p3).
pub fn signed_volume(p: [Point3; 4]) -> f64 {
    let e1 = sub(p[1], p[0]);
    let e2 = sub(p[2], p[0]);
    let e3 = sub(p[3], p[0]);
    dot(e1, cross(e2, e3)) / 6.0
}

/// Local face `k` is the face opposite local vertex `k`.
const FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

impl TetMesh {
    /// Builds a mesh from nodes and elements. Elements with negative volume are
    /// reordered; the boundary is extracted and oriented outward.
    pub fn new(nodes: Vec<Point3>, mut elements: Vec<[usize; 4]>) -> Result<Self, MeshError> {
        if elements.is_empty() {
            return Err(MeshError::NoElements);
        }
        let n = nodes.len();
        for (e, el) in elements.iter_mut().enumerate() {
            for &i in el.iter() {
                if i >= n {
                    return Err(MeshError::IndexOutOfRange { line: 0, index: i, count: n });
                }
            }
            let v = signed_volume(el.map(|i| nodes[i]));
            if v == 0.0 || !v.is_finite() {
                return Err(MeshError::DegenerateElement { element: e, volume: v });
            }
            if v < 0.0 {
                el.swap(2, 3);
            }
        }
        let boundary_faces = extract_boundary(&nodes, &elements)?;
        let mesh = Self::assemble_parts(nodes, elements, boundary_faces);
        mesh.check_manifold()?;
        Ok(mesh)
    }

    fn assemble_parts(nodes: Vec<Point3>, elements: Vec<[usize; 4]>, boundary_faces: Vec<[usize; 3]>) -> Self {
        let mut node_is_boundary = vec![false; nodes.len()];
        for f in &boundary_faces {
            for &i in f {
                node_is_boundary[i] = true;
            }
        }
        Self { nodes, elements, boundary_faces, node_is_boundary }
    }

    /// Test-only escape hatch for exercising downstream validation.
    #[doc(hidden)]
    pub fn from_raw_unchecked(nodes: Vec<Point3>, elements: Vec<[usize; 4]>, boundary_faces: Vec<[usize; 3]>) -> Self {
        Self::assemble_parts(nodes, elements, boundary_faces)
    }

    pub fn nodes(&self) -> &[Point3] {
        &self.nodes
    }

    pub fn elements(&self) -> &[[usize; 4]] {
        &self.elements
    }

    pub fn boundary_faces(&self) -> &[[usize; 3]] {
        &self.boundary_faces
    }

    pub fn node_is_boundary(&self) -> &[bool] {
        &self.node_is_boundary
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_points(&self, e: usize) -> [Point3; 4] {
        self.elements[e].map(|i| self.nodes[i])
    }

    pub fn element_volume(&self, e: usize) -> f64 {
        signed_volume(self.element_points(e))
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.elements.len()).map(|e| self.element_volume(e)).sum()
    }

    /// Unnormalised outward normal (length = 2 × area) of boundary face `f`.
    pub fn face_normal(&self, f: usize) -> Point3 {
        let [a, b, c] = self.boundary_faces[f].map(|i| self.nodes[i]);
        cross(sub(b, a), sub(c, a))
    }

    pub fn face_area(&self, f: usize) -> f64 {
        let n = self.face_normal(f);
        0.5 * dot(n, n).sqrt()
    }

    pub fn bounding_box(&self) -> (Point3, Point3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.nodes {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Every boundary edge must be shared by exactly two boundary faces.
    pub fn check_manifold(&self) -> Result<(), MeshError> {
        let mut edges: HashMap<(usize, usize), usize> = HashMap::new();
        for f in &self.boundary_faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        let mut bad: Vec<_> = edges.into_iter().filter(|&(_, c)| c != 2).collect();
        if bad.is_empty() {
            return Ok(());
        }
        bad.sort_unstable();
        let ((a, b), c) = bad[0];
        Err(MeshError::NonManifoldBoundary(format!(
            "edge ({a}, {b}) is shared by {c} boundary faces ({} offending edges)",
            bad.len()
        )))
    }

    /// Writes the mesh in the `tetmesh v1` text format.
    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(64 * (self.nodes.len() + self.elements.len()));
        s.push_str("tetmesh v1\n");
        let _ = writeln!(s, "nodes {}", self.nodes.len());
        for p in &self.nodes {
            let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
        }
        let _ = writeln!(s, "elements {}", self.elements.len());
        for e in &self.elements {
            let _ = writeln!(s, "{} {} {} {}", e[0], e[1], e[2], e[3]);
        }
        let _ = writeln!(s, "boundary {}", self.boundary_faces.len());
        for f in &self.boundary_faces {
            let _ = writeln!(s, "{} {} {}", f[0], f[1], f[2]);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, MeshError> {
        parse_mesh(text)
    }

    pub fn save(&self, path: &Path) -> Result<(), MeshError> {
        fs::write(path, self.to_text()).map_err(|e| MeshError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, MeshError> {
        let text = fs::read_to_string(path).map_err(|e| MeshError::Io(format!("{}: {e}", path.display())))?;
        parse_mesh(&text)
    }
}

fn extract_boundary(nodes: &[Point3], elements: &[[usize; 4]]) -> Result<Vec<[usize; 3]>, MeshError> {
    // key -> (count, element, local face)
    let mut seen: HashMap<[usize; 3], (u32, usize, usize)> = HashMap::with_capacity(elements.len() * 2);
    let mut order: Vec<[usize; 3]> = Vec::new();
    for (e, el) in elements.iter().enumerate() {
        for (k, lf) in FACES.iter().enumerate() {
            let key = sorted3(lf.map(|l| el[l]));
            let entry = seen.entry(key).or_insert_with(|| {
                order.push(key);
                (0, e, k)
            });
            entry.0 += 1;
        }
    }
    let mut faces = Vec::new();
    for key in order {
        let (count, e, k) = seen[&key];
        match count {
            1 => {
                let el = elements[e];
                let mut f = FACES[k].map(|l| el[l]);
                orient_outward(nodes, &mut f, el[k]);
                faces.push(f);
            }
            2 => {}
            c => {
                return Err(MeshError::NonManifoldBoundary(format!(
                    "face {key:?} is shared by {c} elements"
                )))
            }
        }
    }
    Ok(faces)
}

fn orient_outward(nodes: &[Point3], f: &mut [usize; 3], opposite: usize) {
    let [a, b, c] = f.map(|i| nodes[i]);
    let n = cross(sub(b, a), sub(c, a));
    if dot(n, sub(nodes[opposite], a)) > 0.0 {
        f.swap(1, 2);
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self) -> Option<(usize, &'a str)> {
        self.inner.next().map(|(i, l)| (i + 1, l))
    }
}

fn parse_count(lines: &mut Lines<'_>, keyword: &str) -> Result<(usize, usize), MeshError> {
    let (ln, line) = lines
        .next_line()
        .ok_or_else(|| MeshError::Parse { line: 0, msg: format!("missing `{keyword}` section") })?;
    let mut it = line.split_whitespace();
    if it.next() != Some(keyword) {
        return Err(MeshError::MalformedHeader { line: ln, msg: format!("expected `{keyword} <count>`") });
    }
    let count = it
        .next()
        .and_then(|t| t.parse::<usize>().ok())
        .ok_or_else(|| MeshError::MalformedHeader { line: ln, msg: format!("bad `{keyword}` count") })?;
    if it.next().is_some() {
        return Err(MeshError::MalformedHeader { line: ln, msg: "trailing tokens".into() });
    }
    Ok((ln, count))
}

fn parse_row<T: std::str::FromStr, const K: usize>(lines: &mut Lines<'_>, what: &str) -> Result<(usize, [T; K]), MeshError>
where
    T: Copy + Default,
{
    let (ln, line) = lines
        .next_line()
        .ok_or_else(|| MeshError::Parse { line: 0, msg: format!("unexpected end of file in {what} section") })?;
    let mut out = [T::default(); K];
    let mut it = line.split_whitespace();
    for slot in out.iter_mut() {
        let tok = it
            .next()
            .ok_or_else(|| MeshError::Parse { line: ln, msg: format!("expected {K} values per {what} row") })?;
        *slot = tok
            .parse()
            .map_err(|_| MeshError::Parse { line: ln, msg: format!("cannot parse `{tok}`") })?;
    }
    if it.next().is_some() {
        return Err(MeshError::Parse { line: ln, msg: format!("expected {K} values per {what} row") });
    }
    Ok((ln, out))
}

fn parse_mesh(text: &str) -> Result<TetMesh, MeshError> {
    let mut lines = Lines { inner: text.lines().enumerate() };
    match lines.next_line() {
        Some((_, l)) if l.trim() == "tetmesh v1" => {}
        _ => return Err(MeshError::MalformedHeader { line: 1, msg: "expected `tetmesh v1`".into() }),
    }
    let (_, n) = parse_count(&mut lines, "nodes")?;
    let mut nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, p) = parse_row::<f64, 3>(&mut lines, "node")?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(MeshError::Parse { line: ln, msg: "non-finite coordinate".into() });
        }
        nodes.push(p);
    }
    let (_, ne) = parse_count(&mut lines, "elements")?;
    if ne == 0 {
        return Err(MeshError::NoElements);
    }
    let mut elements = Vec::with_capacity(ne);
    let mut element_lines = Vec::with_capacity(ne);
    for _ in 0..ne {
        let (ln, el) = parse_row::<usize, 4>(&mut lines, "element")?;
        if let Some(&bad) = el.iter().find(|&&i| i >= n) {
            return Err(MeshError::IndexOutOfRange { line: ln, index: bad, count: n });
        }
        let v = signed_volume(el.map(|i| nodes[i]));
        if !(v > 0.0) {
            return Err(MeshError::Parse { line: ln, msg: format!("element has non-positive volume {v:e}") });
        }
        elements.push(el);
        element_lines.push(ln);
    }
    let (_, nb) = parse_count(&mut lines, "boundary")?;
    let mut faces = Vec::with_capacity(nb);
    let mut face_lines = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (ln, f) = parse_row::<usize, 3>(&mut lines, "boundary")?;
        if let Some(&bad) = f.iter().find(|&&i| i >= n) {
            return Err(MeshError::IndexOutOfRange { line: ln, index: bad, count: n });
        }
        faces.push(f);
        face_lines.push(ln);
    }
    if let Some((ln, l)) = lines.next_line() {
        if !l.trim().is_empty() {
            return Err(MeshError::Parse { line: ln, msg: "trailing content after boundary section".into() });
        }
    }

    // The listed boundary must be exactly the set of faces owned by one element,
    // each oriented away from that element.
    let extracted = extract_boundary(&nodes, &elements)?;
    let mut owner: HashMap<[usize; 3], [usize; 3]> = extracted.iter().map(|f| (sorted3(*f), *f)).collect();
    for (f, &ln) in faces.iter().zip(&face_lines) {
        let key = sorted3(*f);
        let Some(oriented) = owner.remove(&key) else {
            return Err(MeshError::NonManifoldBoundary(format!(
                "line {ln}: face {f:?} is not a boundary face of exactly one element (or is listed twice)"
            )));
        };
        if !same_orientation(*f, oriented) {
            return Err(MeshError::NonManifoldBoundary(format!("line {ln}: face {f:?} is not oriented outward")));
        }
    }
    if let Some((_, f)) = owner.into_iter().min() {
        return Err(MeshError::NonManifoldBoundary(format!("boundary face {f:?} missing from boundary section")));
    }
    let mesh = TetMesh::assemble_parts(nodes, elements, faces);
    mesh.check_manifold()?;
    Ok(mesh)
}

fn same_orientation(a: [usize; 3], b: [usize; 3]) -> bool {
    (0..3).any(|r| a == [b[r], b[(r + 1) % 3], b[(r + 2) % 3]])
}

fn axis_counts(extent: [f64; 3], edge_len: f64) -> Result<[usize; 3], MeshError> {
    if extent.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
        return Err(MeshError::NonPositiveExtent(extent));
    }
    if !(edge_len > 0.0) || !edge_len.is_finite() {
        return Err(MeshError::InvalidEdgeLength(edge_len));
    }
    let mut counts = [0; 3];
    for k in 0..3 {
        if extent[k] < edge_len {
            return Err(MeshError::DegenerateExtent { axis: k, extent: extent[k], edge_len });
        }
        counts[k] = (extent[k] / edge_len - 1e-9).ceil() as usize + 1;
    }
    Ok(counts)
}

/// Structured box grid: node (i, j, k) has index `i + nx * (j + ny * k)`.
fn box_grid(extent: [f64; 3], counts: [usize; 3]) -> (Vec<Point3>, Vec<[usize; 4]>) {
    let [nx, ny, nz] = counts;
    let h = [0, 1, 2].map(|k| extent[k] / (counts[k] - 1) as f64);
    let mut nodes = Vec::with_capacity(nx * ny * nz);
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                nodes.push([i as f64 * h[0], j as f64 * h[1], k as f64 * h[2]]);
            }
        }
    }
    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);
    // Kuhn split: each tet walks from corner (0,0,0) to (1,1,1) along one axis permutation.
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut elements = Vec::with_capacity(6 * (nx - 1) * (ny - 1) * (nz - 1));
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut tet = [idx(c[0], c[1], c[2]); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        tet[step + 1] = idx(c[0], c[1], c[2]);
                    }
                    elements.push(tet);
                }
            }
        }
    }
    (nodes, elements)
}

/// Slab `[0, ex] × [0, ey] × [0, ez]` meshed with edge length at most `edge_len`.
pub fn generate_slab_mesh(extent: [f64; 3], edge_len: f64) -> Result<TetMesh, MeshError> {
    let counts = axis_counts(extent, edge_len)?;
    let (nodes, elements) = box_grid(extent, counts);
    TetMesh::new(nodes, elements)
}

/// Spherical cap resting on the `[0, bx] × [0, by]` footprint: rim radius is half
/// the shorter footprint side and the apex sits above the footprint centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapProfile {
    pub center: [f64; 2],
    pub rim_radius: f64,
    pub height: f64,
    pub sphere_radius: f64,
}

impl CapProfile {
    pub fn new(footprint: [f64; 2], height: f64) -> Result<Self, MeshError> {
        let rim_radius = 0.5 * footprint[0].min(footprint[1]);
        if !(height > 0.0) || !(rim_radius > 0.0) || height > rim_radius {
            // Taller than a hemisphere: the cap no longer projects onto its rim disk.
            return Err(MeshError::InvalidCap { cap_height: height, radius: rim_radius });
        }
        let sphere_radius = (rim_radius * rim_radius + height * height) / (2.0 * height);
        Ok(Self { center: [0.5 * footprint[0], 0.5 * footprint[1]], rim_radius, height, sphere_radius })
    }

    /// Cap thickness above the base at horizontal position (x, y).
    pub fn height_at(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        let rho2 = dx * dx + dy * dy;
        if rho2 >= self.rim_radius * self.rim_radius {
            return 0.0;
        }
        let r = self.sphere_radius;
        ((r * r - rho2).sqrt() - (r - self.height)).max(0.0)
    }

    /// Analytic cap volume πh²(3R − h)/3.
    pub fn volume(&self) -> f64 {
        std::f64::consts::PI * self.height * self.height * (3.0 * self.sphere_radius - self.height) / 3.0
    }
}

/// Slab base with a spherical-cap bulge on its top surface. Each vertical node
/// column is stretched so the top node follows the cap profile.
pub fn generate_cap_mesh(base: [f64; 3], cap_height: f64, edge_len: f64) -> Result<TetMesh, MeshError> {
    if !(base[2] > 0.0) {
        return Err(MeshError::NonPositiveExtent(base));
    }
    let cap = CapProfile::new([base[0], base[1]], cap_height)?;
    let total = base[2] + cap_height;
    let counts = axis_counts([base[0], base[1], total], edge_len)?;
    let (mut nodes, elements) = box_grid([base[0], base[1], total], counts);
    for p in nodes.iter_mut() {
        let column = base[2] + cap.height_at(p[0], p[1]);
        p[2] *= column / total;
    }
    TetMesh::new(nodes, elements)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomShape {
    Slab,
    SlabWithCap,
}

/// Geometry + resolution of a simulation domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomSpec {
    pub shape: PhantomShape,
    /// Slab extent, or cap base extent.
    pub dimensions: [f64; 3],
    pub cap_height: f64,
    pub edge_len: f64,
}

impl PhantomSpec {
    pub fn slab(dimensions: [f64; 3], edge_len: f64) -> Self {
        Self { shape: PhantomShape::Slab, dimensions, cap_height: 0.0, edge_len }
    }

    pub fn cap(base: [f64; 3], cap_height: f64, edge_len: f64) -> Self {
        Self { shape: PhantomShape::SlabWithCap, dimensions: base, cap_height, edge_len }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.dimensions.iter().any(|&d| !(d > 0.0)) {
            return Err(MeshError::NonPositiveExtent(self.dimensions));
        }
        let thickness = match self.shape {
            PhantomShape::Slab => self.dimensions[2],
            PhantomShape::SlabWithCap => self.dimensions[2] + self.cap_height,
        };
        let thinnest = self.dimensions[0].min(self.dimensions[1]).min(thickness);
        let counts = (thinnest / self.edge_len - 1e-9).ceil() + 1.0;
        if !(self.edge_len > 0.0) || counts < 5.0 {
            return Err(MeshError::InvalidSpec(format!(
                "edge length {} mm gives fewer than 5 nodes across the thinnest axis ({thinnest} mm)",
                self.edge_len
            )));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<TetMesh, MeshError> {
        self.validate()?;
        match self.shape {
            PhantomShape::Slab => generate_slab_mesh(self.dimensions, self.edge_len),
            PhantomShape::SlabWithCap => generate_cap_mesh(self.dimensions, self.cap_height, self.edge_len),
        }
    }
}

/// Point location over the elements of a mesh via a uniform bucket grid.
pub struct ElementLocator<'a> {
    mesh: &'a TetMesh,
    lo: Point3,
    cell: Point3,
    dims: [usize; 3],
    buckets: Vec<Vec<usize>>,
}

impl<'a> ElementLocator<'a> {
    pub fn new(mesh: &'a TetMesh) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let target = (mesh.num_elements() as f64 / 4.0).cbrt().max(1.0);
        let span = [0, 1, 2].map(|k| (hi[k] - lo[k]).max(1e-12));
        let longest = span.iter().cloned().fold(0.0, f64::max);
        let dims = span.map(|s| ((s / longest * target).ceil() as usize).max(1));
        let cell = [0, 1, 2].map(|k| span[k] / dims[k] as f64);
        let mut buckets = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut loc = Self { mesh, lo, cell, dims, buckets: Vec::new() };
        for e in 0..mesh.num_elements() {
            let pts = mesh.element_points(e);
            let mut a = [usize::MAX; 3];
            let mut b = [0; 3];
            for p in pts {
                let c = loc.cell_of(p);
                for k in 0..3 {
                    a[k] = a[k].min(c[k]);
                    b[k] = b[k].max(c[k]);
                }
            }
            for k in a[2]..=b[2] {
                for j in a[1]..=b[1] {
                    for i in a[0]..=b[0] {
                        buckets[i + dims[0] * (j + dims[1] * k)].push(e);
                    }
                }
            }
        }
        loc.buckets = buckets;
        loc
    }

    fn cell_of(&self, p: Point3) -> [usize; 3] {
        [0, 1, 2].map(|k| {
            let t = ((p[k] - self.lo[k]) / self.cell[k]).floor();
            (t.max(0.0) as usize).min(self.dims[k] - 1)
        })
    }

    /// Element containing `p` (within a small tolerance) and its barycentric coordinates.
    pub fn locate(&self, p: Point3) -> Option<(usize, [f64; 4])> {
        let c = self.cell_of(p);
        let bucket = &self.buckets[c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])];
        let mut best: Option<(usize, [f64; 4], f64)> = None;
        for &e in bucket {
            let bary = barycentric(self.mesh.element_points(e), p);
            let worst = bary.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= 0.0 {
                return Some((e, bary));
            }
            if best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((e, bary, worst));
            }
        }
        match best {
            Some((e, bary, worst)) if worst > -1e-9 => Some((e, bary)),
            _ => None,
        }
    }

    /// P1 interpolation of a nodal field; `None` outside the mesh.
    pub fn interpolate(&self, field: &[f64], p: Point3) -> Option<f64> {
        self.locate(p).map(|(e, w)| {
            let el = self.mesh.elements[e];
            (0..4).map(|k| w[k] * field[el[k]]).sum()
        })
    }
}

pub fn barycentric(t: [Point3; 4], p: Point3) -> [f64; 4] {
    let v = signed_volume(t);
    let l1 = signed_volume([t[0], p, t[2], t[3]]) / v;
    let l2 = signed_volume([t[0], t[1], p, t[3]]) / v;
    let l3 = signed_volume([t[0], t[1], t[2], p]) / v;
    [1.0 - l1 - l2 - l3, l1, l2, l3]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(pts: &[Point3]) -> Point3 {
        let n = pts.len() as f64;
        let mut c = [0.0; 3];
        for p in pts {
            for k in 0..3 {
                c[k] += p[k] / n;
            }
        }
        c
    }

    fn check_invariants(m: &TetMesh) {
        for e in 0..m.num_elements() {
            assert!(m.element_volume(e) > 0.0, "element {e}");
        }
        // each boundary face: outward w.r.t. its owning element
        let mut owner: HashMap<[usize; 3], usize> = HashMap::new();
        let mut count: HashMap<[usize; 3], usize> = HashMap::new();
        for (e, el) in m.elements().iter().enumerate() {
            for lf in FACES {
                let key = sorted3(lf.map(|l| el[l]));
                owner.insert(key, e);
                *count.entry(key).or_default() += 1;
            }
        }
        for (f, face) in m.boundary_faces().iter().enumerate() {
            let key = sorted3(*face);
            assert_eq!(count[&key], 1);
            let e = owner[&key];
            let ce = centroid(&m.element_points(e));
            let cf = centroid(&face.map(|i| m.nodes()[i]));
            assert!(dot(m.face_normal(f), sub(cf, ce)) > 0.0);
        }
        let mut flags = vec![false; m.num_nodes()];
        for f in m.boundary_faces() {
            for &i in f {
                flags[i] = true;
            }
        }
        assert_eq!(flags, m.node_is_boundary());
        m.check_manifold().unwrap();
    }

    #[test]
    fn small_slab_counts() {
        let m = generate_slab_mesh([10.0, 10.0, 10.0], 5.0).unwrap();
        assert_eq!(m.num_nodes(), 27);
        assert_eq!(m.num_elements(), 48);
        // 6 faces × 4 quads × 2 triangles
        assert_eq!(m.boundary_faces().len(), 48);
        check_invariants(&m);
        // only the centre node is interior
        assert_eq!(m.node_is_boundary().iter().filter(|b| !**b).count(), 1);
        // every outward face direction is represented
        let mut dirs = std::collections::BTreeSet::new();
        for f in 0..m.boundary_faces().len() {
            let n = m.face_normal(f);
            let axis = (0..3).max_by(|&a, &b| n[a].abs().total_cmp(&n[b].abs())).unwrap();
            dirs.insert((axis, n[axis] > 0.0));
        }
        assert_eq!(dirs.len(), 6);
    }

    #[test]
    fn two_layer_slab_is_all_boundary() {
        let m = generate_slab_mesh([10.0, 10.0, 5.0], 5.0).unwrap();
        assert!(m.node_is_boundary().iter().all(|&b| b));
        check_invariants(&m);
    }

    #[test]
    fn desk_slab_volume_and_counts() {
        let m = generate_slab_mesh([55.0, 55.0, 15.0], 2.5).unwrap();
        assert_eq!(m.num_nodes(), 23 * 23 * 7);
        let v = m.total_volume();
        assert!((v - 55.0 * 55.0 * 15.0).abs() / (55.0 * 55.0 * 15.0) < 1e-9);
        check_invariants(&m);
    }

    #[test]
    fn degenerate_extent_rejected() {
        let err = generate_slab_mesh([10.0, 10.0, 2.0], 5.0).unwrap_err();
        assert!(matches!(err, MeshError::DegenerateExtent { axis: 2, .. }));
        assert!(err.to_string().contains("smaller than the edge length"));
        assert!(generate_slab_mesh([0.0, 1.0, 1.0], 0.5).is_err());
        assert!(generate_slab_mesh([1.0, 1.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn cap_mesh_height_and_volume() {
        let m = generate_cap_mesh([50.0, 50.0, 4.0], 5.0, 2.5).unwrap();
        let (_, hi) = m.bounding_box();
        assert!((hi[2] - 9.0).abs() < 1e-12);
        check_invariants(&m);
        let cap = CapProfile::new([50.0, 50.0], 5.0).unwrap();
        // numerical quadrature of the profile on a fine midpoint grid
        let n = 2000;
        let h = 50.0 / n as f64;
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += cap.height_at((i as f64 + 0.5) * h, (j as f64 + 0.5) * h) * h * h;
            }
        }
        assert!((q - cap.volume()).abs() / cap.volume() < 1e-3);
        let exact = 50.0 * 50.0 * 4.0 + q;
        assert!((m.total_volume() - exact).abs() / exact < 1e-3);
    }

    #[test]
    fn cap_limit_matches_slab() {
        let slab = generate_slab_mesh([50.0, 50.0, 4.0], 2.5).unwrap();
        let cap = generate_cap_mesh([50.0, 50.0, 4.0], 1e-10, 2.5).unwrap();
        assert_eq!(slab.elements(), cap.elements());
        assert_eq!(slab.boundary_faces(), cap.boundary_faces());
        for (a, b) in slab.nodes().iter().zip(cap.nodes()) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cap_taller_than_hemisphere_rejected() {
        assert!(matches!(
            generate_cap_mesh([10.0, 10.0, 4.0], 6.0, 1.0),
            Err(MeshError::InvalidCap { .. })
        ));
    }

    #[test]
    fn phantom_spec_requires_five_nodes() {
        assert!(PhantomSpec::slab([55.0, 55.0, 15.0], 2.5).build().is_ok());
        assert!(PhantomSpec::slab([10.0, 10.0, 10.0], 5.0).build().is_err());
        assert!(PhantomSpec::cap([50.0, 50.0, 4.0], 5.0, 2.5).build().is_ok());
    }

    #[test]
    fn text_round_trip_is_byte_identical() {
        let m = generate_cap_mesh([20.0, 20.0, 4.0], 3.0, 2.0).unwrap();
        let text = m.to_text();
        let back = TetMesh::from_text(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn load_diagnostics() {
        let m = generate_slab_mesh([10.0, 10.0, 10.0], 5.0).unwrap();
        let text = m.to_text();

        let bad_header = text.replacen("tetmesh v1", "tetmesh v2", 1);
        assert!(matches!(TetMesh::from_text(&bad_header), Err(MeshError::MalformedHeader { line: 1, .. })));

        // element referencing index == node count
        let lines: Vec<&str> = text.lines().collect();
        let el_line = lines.iter().position(|l| l.starts_with("elements")).unwrap() + 1;
        let mut edited: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        edited[el_line] = "0 1 3 27".into();
        let err = TetMesh::from_text(&(edited.join("\n") + "\n")).unwrap_err();
        assert_eq!(err, MeshError::IndexOutOfRange { line: el_line + 1, index: 27, count: 27 });
        assert!(err.to_string().contains("index out of range"));

        let empty = "tetmesh v1\nnodes 1\n0 0 0\nelements 0\nboundary 0\n";
        assert_eq!(TetMesh::from_text(empty).unwrap_err(), MeshError::NoElements);
        assert_eq!(MeshError::NoElements.to_string(), "no elements");

        // dropping one boundary face leaves an open surface
        let b_line = lines.iter().position(|l| l.starts_with("boundary")).unwrap();
        let mut dropped: Vec<String> = lines.iter().map(|s| s.to_string()).collect();
        dropped[b_line] = format!("boundary {}", m.boundary_faces().len() - 1);
        dropped.remove(b_line + 1);
        assert!(matches!(
            TetMesh::from_text(&(dropped.join("\n") + "\n")),
            Err(MeshError::NonManifoldBoundary(_))
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_cap_mesh([30.0, 20.0, 4.0], 4.0, 1.5).unwrap();
        let b = generate_cap_mesh([30.0, 20.0, 4.0], 4.0, 1.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn locator_interpolates_linear_fields_exactly() {
        let m = generate_cap_mesh([20.0, 20.0, 4.0], 3.0, 2.0).unwrap();
        let f: Vec<f64> = m.nodes().iter().map(|p| 1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2]).collect();
        let loc = ElementLocator::new(&m);
        for p in [[1.0, 1.0, 1.0], [10.0, 10.0, 6.5], [19.9, 0.1, 0.1], [10.0, 3.3, 2.2]] {
            let v = loc.interpolate(&f, p).unwrap();
            assert!((v - (1.0 + 2.0 * p[0] - p[1] + 0.5 * p[2])).abs() < 1e-10);
        }
        assert!(loc.interpolate(&f, [10.0, 10.0, 7.5]).is_none());
        assert!(loc.interpolate(&f, [1.0, 1.0, 4.5]).is_none());
        assert!(loc.interpolate(&f, [25.0, 10.0, 1.0]).is_none());
    }
}
