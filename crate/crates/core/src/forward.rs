//! Excitation/emission solves, source and detector layouts, and the cached
//! forward operator used inside reconstruction loops.
//!
//! Measurement matrices are `n_src × n_det`; flattening is source-major.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, ArrayView1, Axis, ShapeBuilder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sprs::FillInReduction;
use sprs_ldl::{Ldl, LdlNumeric};
use thiserror::Error;

use crate::kv::{KvConfig, KvError};
use crate::mesh::{Point3, TetMesh};
use crate::sparse::SparseSym;

#[derive(Debug, Error, PartialEq)]
pub enum ForwardError {
    #[error("system matrix is not positive definite (pivot {pivot}); optical parameters are invalid")]
    NotPositiveDefinite { pivot: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("photon fields were computed with a different factorization")]
    StaleFactorization,
    #[error("position ({x}, {y}) lies outside the mesh footprint")]
    OutsideFootprint { x: f64, y: f64 },
    #[error("detector at ({x}, {y}) has no boundary node within 3 sigma")]
    EmptyFootprint { x: f64, y: f64 },
    #[error("layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Config(#[from] KvError),
}

static NEXT_FACTORIZATION_ID: AtomicU64 = AtomicU64::new(1);

/// Sparse LDLᵀ factorization of an SPD system matrix (fill-reducing ordering).
/// Every (re)factorization gets a fresh id so stale photon fields can be detected.
pub struct Factorization {
    ldl: LdlNumeric<f64, usize>,
    n: usize,
    id: u64,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.n).field("id", &self.id).finish()
    }
}

fn check_pivots(d: &[f64]) -> Result<(), ForwardError> {
    match d.iter().position(|&v| !(v > 0.0) || !v.is_finite()) {
        Some(pivot) => Err(ForwardError::NotPositiveDefinite { pivot }),
        None => Ok(()),
    }
}

impl Factorization {
    pub fn new(s: &SparseSym) -> Result<Self, ForwardError> {
        let mat = s.to_sprs();
        let ldl = Ldl::new()
            .fill_in_reduction(FillInReduction::ReverseCuthillMcKee)
            .check_symmetry(sprs::SymmetryCheck::DontCheckSymmetry)
            .numeric(mat.view())
            .map_err(|_| ForwardError::NotPositiveDefinite { pivot: 0 })?;
        check_pivots(ldl.d())?;
        Ok(Self { ldl, n: s.dim(), id: NEXT_FACTORIZATION_ID.fetch_add(1, Ordering::Relaxed) })
    }

    /// Numeric refactorization reusing the symbolic analysis (same pattern).
    pub fn refactor(&mut self, s: &SparseSym) -> Result<(), ForwardError> {
        if s.dim() != self.n {
            return Err(ForwardError::DimensionMismatch(format!("refactor {} vs {}", s.dim(), self.n)));
        }
        let mat = s.to_sprs();
        self.ldl
            .update(mat.view())
            .map_err(|_| ForwardError::NotPositiveDefinite { pivot: 0 })?;
        self.id = NEXT_FACTORIZATION_ID.fetch_add(1, Ordering::Relaxed);
        check_pivots(self.ldl.d())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "rhs length");
        self.ldl.solve(b)
    }

    /// Solves for every column of `b` (N × k), in column order.
    pub fn solve_columns(&self, b: &Array2<f64>) -> Array2<f64> {
        assert_eq!(b.nrows(), self.n, "rhs rows");
        let k = b.ncols();
        let mut out = Vec::with_capacity(self.n * k);
        for col in b.axis_iter(Axis(1)) {
            out.extend(self.solve(&col.to_vec()));
        }
        Array2::from_shape_vec((self.n, k).f(), out).expect("shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Top,
    Bottom,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Top => "top",
            Side::Bottom => "bottom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "top" => Some(Side::Top),
            "bottom" => Some(Side::Bottom),
            _ => None,
        }
    }

    /// +1 for the top (outward +z) surface.
    fn sign(self) -> f64 {
        match self {
            Side::Top => 1.0,
            Side::Bottom => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceModel {
    /// Unit load at the interior node nearest to one transport mean free path
    /// (1/μs′) below the illuminated surface.
    Buried,
    /// Unit load at the surface node nearest to the scan position.
    Surface,
}

impl SourceModel {
    pub fn name(self) -> &'static str {
        match self {
            SourceModel::Buried => "buried",
            SourceModel::Surface => "surface",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "buried" => Some(SourceModel::Buried),
            "surface" => Some(SourceModel::Surface),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutOptions {
    pub source_side: Side,
    pub detector_side: Side,
    pub source_model: SourceModel,
    /// μs′ used for the source burial depth.
    pub mu_s_prime: f64,
    /// Gaussian detector footprint σ (mm); 0 selects the nearest node.
    pub detector_sigma: f64,
}

impl Default for LayoutOptions {
    fn default() -> Self {
        Self {
            source_side: Side::Bottom,
            detector_side: Side::Top,
            source_model: SourceModel::Buried,
            mu_s_prime: 1.0,
            detector_sigma: 1.0,
        }
    }
}

/// Sparse columns: `(node, weight)` pairs.
pub type SparseColumn = Vec<(usize, f64)>;

/// Source matrix Qx (N × n_src) and detector projection P (N × n_det).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceDetectorLayout {
    n: usize,
    sources: Vec<SparseColumn>,
    detectors: Vec<SparseColumn>,
}

impl SourceDetectorLayout {
    /// Validates the column invariants.
    pub fn new(n: usize, sources: Vec<SparseColumn>, detectors: Vec<SparseColumn>, boundary: &[bool]) -> Result<Self, ForwardError> {
        for (s, col) in sources.iter().enumerate() {
            if col.is_empty() || col.iter().any(|&(i, w)| i >= n || !(w >= 0.0)) || col.iter().all(|&(_, w)| w == 0.0) {
                return Err(ForwardError::Layout(format!("source column {s} must be non-negative and non-zero")));
            }
        }
        for (d, col) in detectors.iter().enumerate() {
            if col.iter().any(|&(i, w)| i >= n || !(w >= 0.0) || !boundary[i]) {
                return Err(ForwardError::Layout(format!("detector column {d} must be non-negative on boundary nodes")));
            }
            let sum: f64 = col.iter().map(|&(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(ForwardError::Layout(format!("detector column {d} sums to {sum}")));
            }
        }
        Ok(Self { n, sources, detectors })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn num_detectors(&self) -> usize {
        self.detectors.len()
    }

    pub fn source_column(&self, s: usize) -> &SparseColumn {
        &self.sources[s]
    }

    pub fn detector_column(&self, d: usize) -> &SparseColumn {
        &self.detectors[d]
    }

    /// Dense Qx (N × n_src).
    pub fn source_matrix(&self) -> Array2<f64> {
        dense_columns(self.n, &self.sources)
    }

    /// Dense P (N × n_det).
    pub fn detector_matrix(&self) -> Array2<f64> {
        dense_columns(self.n, &self.detectors)
    }
}

fn dense_columns(n: usize, cols: &[SparseColumn]) -> Array2<f64> {
    let mut m = Array2::zeros((n, cols.len()).f());
    for (j, col) in cols.iter().enumerate() {
        for &(i, w) in col {
            m[[i, j]] += w;
        }
    }
    m
}

/// Boundary nodes lying on faces whose outward normal points towards `side`.
pub fn surface_nodes(mesh: &TetMesh, side: Side) -> Vec<usize> {
    let mut flag = vec![false; mesh.num_nodes()];
    for (f, face) in mesh.boundary_faces().iter().enumerate() {
        let n = mesh.face_normal(f);
        let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
        if side.sign() * n[2] / len > 1e-6 {
            for &i in face {
                flag[i] = true;
            }
        }
    }
    (0..flag.len()).filter(|&i| flag[i]).collect()
}

fn horizontal_dist2(p: Point3, x: f64, y: f64) -> f64 {
    (p[0] - x).powi(2) + (p[1] - y).powi(2)
}

fn nearest(mesh: &TetMesh, candidates: impl Iterator<Item = usize>, target: Point3) -> Option<usize> {
    let d2 = |i: usize| {
        let p = mesh.nodes()[i];
        (p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2) + (p[2] - target[2]).powi(2)
    };
    candidates.min_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)))
}

/// Candidate closest to (x, y) in the horizontal plane; ties go to the lower index.
fn nearest_horizontal(mesh: &TetMesh, candidates: &[usize], x: f64, y: f64) -> usize {
    let d2 = |i: usize| horizontal_dist2(mesh.nodes()[i], x, y);
    candidates
        .iter()
        .copied()
        .min_by(|&a, &b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)))
        .expect("non-empty candidate set")
}

fn check_footprint(mesh: &TetMesh, x: f64, y: f64) -> Result<(), ForwardError> {
    let (lo, hi) = mesh.bounding_box();
    let tol = 1e-9 * (hi[0] - lo[0]).max(hi[1] - lo[1]);
    if x < lo[0] - tol || x > hi[0] + tol || y < lo[1] - tol || y > hi[1] + tol || !x.is_finite() || !y.is_finite() {
        return Err(ForwardError::OutsideFootprint { x, y });
    }
    Ok(())
}

/// Builds Qx and P from 2D scan and detector positions.
pub fn build_layout(
    mesh: &TetMesh,
    source_positions: &[[f64; 2]],
    detector_positions: &[[f64; 2]],
    opts: &LayoutOptions,
) -> Result<SourceDetectorLayout, ForwardError> {
    if !(opts.mu_s_prime > 0.0) || !(opts.detector_sigma >= 0.0) {
        return Err(ForwardError::Layout("mu_s_prime must be positive and sigma non-negative".into()));
    }
    let src_surface = surface_nodes(mesh, opts.source_side);
    let det_surface = surface_nodes(mesh, opts.detector_side);
    if src_surface.is_empty() || det_surface.is_empty() {
        return Err(ForwardError::Layout("mesh has no surface on the requested side".into()));
    }
    let boundary = mesh.node_is_boundary();
    let mut sources = Vec::with_capacity(source_positions.len());
    for &[x, y] in source_positions {
        check_footprint(mesh, x, y)?;
        let entry = nearest_horizontal(mesh, &src_surface, x, y);
        let node = match opts.source_model {
            SourceModel::Surface => entry,
            SourceModel::Buried => {
                let z = mesh.nodes()[entry][2] - opts.source_side.sign() / opts.mu_s_prime;
                let target = [x, y, z];
                nearest(mesh, (0..mesh.num_nodes()).filter(|&i| !boundary[i]), target)
                    .or_else(|| nearest(mesh, 0..mesh.num_nodes(), target))
                    .expect("mesh has nodes")
            }
        };
        sources.push(vec![(node, 1.0)]);
    }
    let sigma = opts.detector_sigma;
    let mut detectors = Vec::with_capacity(detector_positions.len());
    for &[x, y] in detector_positions {
        check_footprint(mesh, x, y)?;
        let col: SparseColumn = if sigma == 0.0 {
            let i = nearest_horizontal(mesh, &det_surface, x, y);
            vec![(i, 1.0)]
        } else {
            let r2 = (3.0 * sigma).powi(2);
            let mut col: SparseColumn = det_surface
                .iter()
                .filter_map(|&i| {
                    let d2 = horizontal_dist2(mesh.nodes()[i], x, y);
                    (d2 <= r2).then(|| (i, (-d2 / (2.0 * sigma * sigma)).exp()))
                })
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = col.iter().map(|&(_, w)| w).sum();
            if col.is_empty() || !(total > 0.0) {
                return Err(ForwardError::EmptyFootprint { x, y });
            }
            col.iter_mut().for_each(|e| e.1 /= total);
            col
        };
        detectors.push(col);
    }
    SourceDetectorLayout::new(mesh.num_nodes(), sources, detectors, boundary)
}

/// Regular scan grid of `nx × ny` points spanning `[x0, x1] × [y0, y1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanGrid {
    pub nx: usize,
    pub ny: usize,
    pub x: [f64; 2],
    pub y: [f64; 2],
}

impl ScanGrid {
    pub fn positions(&self) -> Vec<[f64; 2]> {
        let at = |r: [f64; 2], n: usize, i: usize| if n == 1 { 0.5 * (r[0] + r[1]) } else { r[0] + (r[1] - r[0]) * i as f64 / (n - 1) as f64 };
        let mut out = Vec::with_capacity(self.nx * self.ny);
        for j in 0..self.ny {
            for i in 0..self.nx {
                out.push([at(self.x, self.nx, i), at(self.y, self.ny, j)]);
            }
        }
        out
    }

    fn to_value(self) -> String {
        format!("{} {} {} {} {} {}", self.nx, self.ny, self.x[0], self.x[1], self.y[0], self.y[1])
    }

    fn from_cfg(cfg: &KvConfig, key: &str) -> Result<Self, ForwardError> {
        let v: Vec<f64> = cfg.get_list(key)?.ok_or_else(|| KvError::Missing(key.into()))?;
        if v.len() != 6 || v[0] < 1.0 || v[1] < 1.0 || v[0].fract() != 0.0 || v[1].fract() != 0.0 {
            return Err(ForwardError::Layout(format!("`{key}` must be `nx ny x0 x1 y0 y1`")));
        }
        Ok(Self { nx: v[0] as usize, ny: v[1] as usize, x: [v[2], v[3]], y: [v[4], v[5]] })
    }
}

/// Declarative layout description stored as a key-value file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayoutSpec {
    pub sources: ScanGrid,
    pub detectors: ScanGrid,
    pub options: LayoutOptions,
}

const LAYOUT_KEYS: [&str; 7] =
    ["source_grid", "detector_grid", "source_side", "detector_side", "source_model", "source_depth_mu_s", "detector_sigma"];

impl LayoutSpec {
    pub fn build(&self, mesh: &TetMesh) -> Result<SourceDetectorLayout, ForwardError> {
        build_layout(mesh, &self.sources.positions(), &self.detectors.positions(), &self.options)
    }

    pub fn to_text(&self) -> String {
        let mut c = KvConfig::new();
        c.set("source_grid", self.sources.to_value());
        c.set("detector_grid", self.detectors.to_value());
        c.set("source_side", self.options.source_side.name());
        c.set("detector_side", self.options.detector_side.name());
        c.set("source_model", self.options.source_model.name());
        c.set("source_depth_mu_s", self.options.mu_s_prime);
        c.set("detector_sigma", self.options.detector_sigma);
        format!("# layout v1\n{}", c.to_text())
    }

    pub fn from_text(text: &str) -> Result<Self, ForwardError> {
        let cfg = KvConfig::parse(text)?;
        cfg.check_keys(&LAYOUT_KEYS)?;
        let d = LayoutOptions::default();
        let side = |key: &str, default: Side| -> Result<Side, ForwardError> {
            match cfg.get_str(key) {
                None => Ok(default),
                Some(s) => Side::parse(s).ok_or_else(|| ForwardError::Layout(format!("`{key}`: expected top|bottom"))),
            }
        };
        let source_model = match cfg.get_str("source_model") {
            None => d.source_model,
            Some(s) => SourceModel::parse(s).ok_or_else(|| ForwardError::Layout("`source_model`: expected buried|surface".into()))?,
        };
        Ok(Self {
            sources: ScanGrid::from_cfg(&cfg, "source_grid")?,
            detectors: ScanGrid::from_cfg(&cfg, "detector_grid")?,
            options: LayoutOptions {
                source_side: side("source_side", d.source_side)?,
                detector_side: side("detector_side", d.detector_side)?,
                source_model,
                mu_s_prime: cfg.get_or("source_depth_mu_s", d.mu_s_prime)?,
                detector_sigma: cfg.get_or("detector_sigma", d.detector_sigma)?,
            },
        })
    }
}

/// Photon densities per node (rows) and source (columns).
#[derive(Debug, Clone)]
pub struct PhotonFields {
    pub phi_x: Array2<f64>,
    pub phi_m: Array2<f64>,
    factorization_id: u64,
}

impl PhotonFields {
    pub fn factorization_id(&self) -> u64 {
        self.factorization_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Simulated,
    Loaded,
}

/// Detector readings, `n_src × n_det`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementStack {
    pub m: Array2<f64>,
    pub provenance: Provenance,
}

impl MeasurementStack {
    pub fn new(m: Array2<f64>, provenance: Provenance) -> Self {
        Self { m, provenance }
    }

    pub fn num_sources(&self) -> usize {
        self.m.nrows()
    }

    pub fn num_detectors(&self) -> usize {
        self.m.ncols()
    }

    /// Source-major flattening.
    pub fn flatten(&self) -> Vec<f64> {
        self.m.iter().copied().collect()
    }

    pub fn to_text(&self) -> String {
        use std::fmt::Write as _;
        let mut s = format!("measurements v1 {} {}\n", self.m.nrows(), self.m.ncols());
        for row in self.m.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, ForwardError> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
        let bad = |msg: String| ForwardError::DimensionMismatch(msg);
        if header.len() != 4 || header[0] != "measurements" || header[1] != "v1" {
            return Err(bad("line 1: expected `measurements v1 n_src n_det`".into()));
        }
        let parse_dim = |t: &str| t.parse::<usize>().map_err(|_| bad(format!("line 1: bad dimension `{t}`")));
        let (ns, nd) = (parse_dim(header[2])?, parse_dim(header[3])?);
        let mut data = Vec::with_capacity(ns * nd);
        for s in 0..ns {
            let line = lines.next().ok_or_else(|| bad(format!("line {}: missing row", s + 2)))?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| bad(format!("line {}: cannot parse row", s + 2)))?;
            if row.len() != nd || row.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("line {}: expected {nd} finite values", s + 2)));
            }
            data.extend(row);
        }
        if lines.any(|l| !l.trim().is_empty()) {
            return Err(bad("trailing content after measurement rows".into()));
        }
        Ok(Self::new(Array2::from_shape_vec((ns, nd), data).expect("shape"), Provenance::Loaded))
    }
}

fn check_field(layout: &SourceDetectorLayout, fact: &Factorization, c: &[f64]) -> Result<(), ForwardError> {
    if c.len() != layout.num_nodes() || fact.dim() != layout.num_nodes() {
        return Err(ForwardError::DimensionMismatch(format!(
            "field length {}, layout nodes {}, system size {}",
            c.len(),
            layout.num_nodes(),
            fact.dim()
        )));
    }
    Ok(())
}

/// Φx = S⁻¹Qx, Qm = C ⊙ Φx, Φm = S⁻¹Qm, M̂ = (PᵀΦm)ᵀ.
pub fn forward_model(
    fact: &Factorization,
    layout: &SourceDetectorLayout,
    c: &[f64],
) -> Result<(PhotonFields, MeasurementStack), ForwardError> {
    check_field(layout, fact, c)?;
    let phi_x = fact.solve_columns(&layout.source_matrix());
    forward_from_excitation(fact, layout, phi_x, c)
}

/// Forward pass reusing a previously solved excitation field.
pub fn forward_from_excitation(
    fact: &Factorization,
    layout: &SourceDetectorLayout,
    phi_x: Array2<f64>,
    c: &[f64],
) -> Result<(PhotonFields, MeasurementStack), ForwardError> {
    check_field(layout, fact, c)?;
    let cv = ArrayView1::from(c);
    let q_m = &phi_x * &cv.insert_axis(Axis(1));
    let phi_m = fact.solve_columns(&q_m);
    let m = project(layout, &phi_m);
    Ok((
        PhotonFields { phi_x, phi_m, factorization_id: fact.id() },
        MeasurementStack::new(m, Provenance::Simulated),
    ))
}

/// (PᵀΦ)ᵀ using the sparse detector columns.
fn project(layout: &SourceDetectorLayout, phi: &Array2<f64>) -> Array2<f64> {
    let ns = phi.ncols();
    let mut m = Array2::zeros((ns, layout.num_detectors()));
    for (d, col) in layout.detectors.iter().enumerate() {
        for s in 0..ns {
            m[[s, d]] = col.iter().map(|&(i, w)| w * phi[[i, s]]).sum();
        }
    }
    m
}

/// Multiplicative Gaussian noise: M·(1 + level·g), g ~ N(0, 1), seeded.
pub fn add_noise(m: &MeasurementStack, level: f64, seed: u64) -> MeasurementStack {
    if level == 0.0 {
        return m.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = m.m.mapv(|v| {
        let g: f64 = StandardNormal.sample(&mut rng);
        v * (1.0 + level * g)
    });
    MeasurementStack::new(noisy, m.provenance)
}

/// Factorization plus the μ-dependent quantities that stay fixed between
/// optical-parameter updates: Φx = S⁻¹Qx and the detector adjoints
/// W = S⁻¹P. With them M̂ = (Φx ⊙ C)ᵀ W needs no solves.
pub struct ForwardOperator {
    fact: Factorization,
    phi_x: Array2<f64>,
    w: Array2<f64>,
}

impl ForwardOperator {
    pub fn new(s: &SparseSym, layout: &SourceDetectorLayout) -> Result<Self, ForwardError> {
        let fact = Factorization::new(s)?;
        Self::from_factorization(fact, layout)
    }

    pub fn from_factorization(fact: Factorization, layout: &SourceDetectorLayout) -> Result<Self, ForwardError> {
        if fact.dim() != layout.num_nodes() {
            return Err(ForwardError::DimensionMismatch("layout vs system size".into()));
        }
        let phi_x = fact.solve_columns(&layout.source_matrix());
        let w = fact.solve_columns(&layout.detector_matrix());
        Ok(Self { fact, phi_x, w })
    }

    /// Refactorizes for a new system matrix and refreshes Φx and W.
    pub fn update(&mut self, s: &SparseSym, layout: &SourceDetectorLayout) -> Result<(), ForwardError> {
        self.fact.refactor(s)?;
        self.phi_x = self.fact.solve_columns(&layout.source_matrix());
        self.w = self.fact.solve_columns(&layout.detector_matrix());
        Ok(())
    }

    pub fn factorization(&self) -> &Factorization {
        &self.fact
    }

    pub fn phi_x(&self) -> &Array2<f64> {
        &self.phi_x
    }

    /// Detector adjoint fields S⁻¹P (N × n_det).
    pub fn detector_adjoints(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn measure(&self, c: &[f64]) -> Array2<f64> {
        assert_eq!(c.len(), self.phi_x.nrows());
        let cv = ArrayView1::from(c).insert_axis(Axis(1));
        let weighted = &self.phi_x * &cv;
        weighted.t().dot(&self.w)
    }

    /// ∂⟨R, M̂⟩/∂C = Σₛ Φx,ₛ ⊙ (W Rₛ).
    pub fn field_gradient(&self, r: &Array2<f64>) -> Array1<f64> {
        let lam = self.w.dot(&r.t());
        (&lam * &self.phi_x).sum_axis(Axis(1))
    }

    /// Full photon fields (solves Φm) for gradient computations.
    pub fn fields(&self, layout: &SourceDetectorLayout, c: &[f64]) -> Result<(PhotonFields, MeasurementStack), ForwardError> {
        forward_from_excitation(&self.fact, layout, self.phi_x.clone(), c)
    }
}
