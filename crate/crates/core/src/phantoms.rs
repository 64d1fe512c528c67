//! Digital phantoms: ground-truth fluorescence fields and simulated
//! measurement bundles.
//!
//! Geometry constants not fixed by the imaging setup (S path, peanut lobes,
//! inner-sphere size and level) are chosen here and written to every scene
//! manifest.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::export::{field_from_text, field_to_text, ExportError};
use crate::fem::{assemble, FemError, OpticalParams};
use crate::forward::{
    add_noise, forward_model, Factorization, ForwardError, LayoutOptions, LayoutSpec, MeasurementStack, ScanGrid,
    SourceDetectorLayout,
};
use crate::kv::{KvConfig, KvError};
use crate::mesh::{MeshError, PhantomShape, PhantomSpec, Point3, TetMesh};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("unknown preset `{name}`; valid presets: {valid}", valid = ScenePreset::names().join(", "))]
    UnknownPreset { name: String },
    #[error("target region `{0}` covers no interior node at this resolution")]
    EmptyTarget(String),
    #[error("target region `{0}` leaves the phantom volume")]
    TargetOutside(String),
    #[error("scene bundle: {0}")]
    Bundle(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePreset {
    SShape,
    Case1Sphere,
    Case2CapSphere,
    Case3Peanut,
    Case4PeanutPlusSphere,
}

/// A fluorescent region with a uniform level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Sphere { center: Point3, radius: f64, level: f64 },
    /// Letter "S" made of two 270° arcs of radius `arc_radius` stacked along y
    /// around `center`, swept by an in-plane tube of `tube_radius` and
    /// extruded `half_thickness` above and below `center[2]`.
    SPath { center: Point3, arc_radius: f64, tube_radius: f64, half_thickness: f64, level: f64 },
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Distance from `p` to the arc of radius `r` about `c` spanning angles
/// `[t0, t0 + sweep]` (counter-clockwise, radians).
fn arc_distance(p: [f64; 2], c: [f64; 2], r: f64, t0: f64, sweep: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let ang = (p[1] - c[1]).atan2(p[0] - c[0]);
    let rel = (ang - t0).rem_euclid(tau);
    if rel <= sweep {
        return (dist2(p, c).sqrt() - r).abs();
    }
    let end = |t: f64| [c[0] + r * t.cos(), c[1] + r * t.sin()];
    dist2(p, end(t0)).min(dist2(p, end(t0 + sweep))).sqrt()
}

impl Region {
    pub fn name(&self) -> &'static str {
        match self {
            Region::Sphere { .. } => "sphere",
            Region::SPath { .. } => "s_path",
        }
    }

    pub fn level(&self) -> f64 {
        match *self {
            Region::Sphere { level, .. } | Region::SPath { level, .. } => level,
        }
    }

    pub fn contains(&self, p: Point3) -> bool {
        match *self {
            Region::Sphere { center, radius, .. } => {
                (0..3).map(|k| (p[k] - center[k]).powi(2)).sum::<f64>() <= radius * radius * (1.0 + 1e-12)
            }
            Region::SPath { center, arc_radius: r, tube_radius, half_thickness, .. } => {
                if (p[2] - center[2]).abs() > half_thickness + 1e-12 {
                    return false;
                }
                let q = [p[0], p[1]];
                let pi = std::f64::consts::PI;
                // upper bowl: from the right side over the top to the waist
                let upper = arc_distance(q, [center[0], center[1] + r], r, 0.0, 1.5 * pi);
                // lower bowl: from the waist round the right side to the left end
                let lower = arc_distance(q, [center[0], center[1] - r], r, pi, 1.5 * pi);
                upper.min(lower) <= tube_radius + 1e-12
            }
        }
    }

    /// Axis-aligned bounds of the region.
    pub fn bounds(&self) -> (Point3, Point3) {
        match *self {
            Region::Sphere { center, radius, .. } => (center.map(|c| c - radius), center.map(|c| c + radius)),
            Region::SPath { center, arc_radius: r, tube_radius: t, half_thickness: h, .. } => (
                [center[0] - r - t, center[1] - 2.0 * r - t, center[2] - h],
                [center[0] + r + t, center[1] + 2.0 * r + t, center[2] + h],
            ),
        }
    }

    fn has_extent(&self) -> bool {
        match *self {
            Region::Sphere { radius, .. } => radius > 0.0,
            Region::SPath { tube_radius, .. } => tube_radius > 0.0,
        }
    }
}

/// Phantom domain, fluorescent regions and true optical properties.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDefinition {
    pub phantom: PhantomSpec,
    pub regions: Vec<Region>,
    pub truth: OpticalParams,
}

pub const DEFAULT_EDGE_LEN: f64 = 2.5;

const SLAB: [f64; 3] = [55.0, 55.0, 15.0];
const CAP_BASE: [f64; 3] = [50.0, 50.0, 4.0];
const CAP_HEIGHT: f64 = 5.0;
const PEANUT_RADIUS: f64 = 3.0;
const PEANUT_SEPARATION: f64 = 4.0;
const INNER_LEVEL: f64 = 2.0;

impl ScenePreset {
    pub const ALL: [ScenePreset; 5] = [
        ScenePreset::SShape,
        ScenePreset::Case1Sphere,
        ScenePreset::Case2CapSphere,
        ScenePreset::Case3Peanut,
        ScenePreset::Case4PeanutPlusSphere,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenePreset::SShape => "s_shape",
            ScenePreset::Case1Sphere => "case1",
            ScenePreset::Case2CapSphere => "case2",
            ScenePreset::Case3Peanut => "case3",
            ScenePreset::Case4PeanutPlusSphere => "case4",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|p| p.name()).collect()
    }

    pub fn parse(s: &str) -> Result<Self, SceneError> {
        let p = match s {
            "s_shape" | "s-shape" => ScenePreset::SShape,
            "case1" | "case1_sphere" => ScenePreset::Case1Sphere,
            "case2" | "case2_cap_sphere" => ScenePreset::Case2CapSphere,
            "case3" | "case3_peanut" => ScenePreset::Case3Peanut,
            "case4" | "case4_peanut_plus_sphere" => ScenePreset::Case4PeanutPlusSphere,
            _ => return Err(SceneError::UnknownPreset { name: s.to_string() }),
        };
        Ok(p)
    }

    pub fn definition(self, edge_len: f64) -> SceneDefinition {
        let mid = [SLAB[0] / 2.0, SLAB[1] / 2.0, SLAB[2] / 2.0];
        let slab = PhantomSpec::slab(SLAB, edge_len);
        let peanut = |level: f64| {
            let h = PEANUT_SEPARATION / 2.0;
            [
                Region::Sphere { center: [mid[0] - h, mid[1], mid[2]], radius: PEANUT_RADIUS, level },
                Region::Sphere { center: [mid[0] + h, mid[1], mid[2]], radius: PEANUT_RADIUS, level },
            ]
        };
        let (phantom, regions) = match self {
            ScenePreset::SShape => (
                slab,
                vec![Region::SPath { center: mid, arc_radius: 5.0, tube_radius: 2.0, half_thickness: 1.0, level: 1.0 }],
            ),
            ScenePreset::Case1Sphere => (slab, vec![Region::Sphere { center: mid, radius: 1.5, level: 1.0 }]),
            ScenePreset::Case2CapSphere => (
                PhantomSpec::cap(CAP_BASE, CAP_HEIGHT, edge_len),
                vec![Region::Sphere { center: [CAP_BASE[0] / 2.0, CAP_BASE[1] / 2.0, 4.5], radius: 1.0, level: 1.0 }],
            ),
            ScenePreset::Case3Peanut => (slab, peanut(1.0).to_vec()),
            ScenePreset::Case4PeanutPlusSphere => {
                let mut r = peanut(1.0).to_vec();
                r.push(Region::Sphere { center: mid, radius: 1.5, level: INNER_LEVEL });
                (slab, r)
            }
        };
        SceneDefinition { phantom, regions, truth: OpticalParams::new(0.1, 1.0).expect("valid") }
    }

    /// Bottom-surface scan grid and top-surface detector grid.
    pub fn layout(self, source_grid: usize, detector_grid: usize) -> LayoutSpec {
        let (lo, hi, dlo, dhi) = match self {
            ScenePreset::Case2CapSphere => (10.0, 40.0, 5.0, 45.0),
            _ => (10.0, 45.0, 5.0, 50.0),
        };
        LayoutSpec {
            sources: ScanGrid { nx: source_grid, ny: source_grid, x: [lo, hi], y: [lo, hi] },
            detectors: ScanGrid { nx: detector_grid, ny: detector_grid, x: [dlo, dhi], y: [dlo, dhi] },
            options: LayoutOptions::default(),
        }
    }
}

/// Nodal truth: the largest level among regions containing each node.
/// Regions must lie inside the phantom and touch no boundary node.
pub fn ground_truth_field(def: &SceneDefinition, mesh: &TetMesh) -> Result<Vec<f64>, SceneError> {
    let (lo, hi) = mesh.bounding_box();
    let mut c = vec![0.0; mesh.num_nodes()];
    for region in &def.regions {
        if !region.has_extent() {
            continue;
        }
        let (rlo, rhi) = region.bounds();
        if (0..3).any(|k| rlo[k] <= lo[k] || rhi[k] >= hi[k]) {
            return Err(SceneError::TargetOutside(region.name().into()));
        }
        let mut hit = false;
        for (i, &p) in mesh.nodes().iter().enumerate() {
            if region.contains(p) {
                if mesh.node_is_boundary()[i] {
                    return Err(SceneError::TargetOutside(region.name().into()));
                }
                c[i] = f64::max(c[i], region.level());
                hit = true;
            }
        }
        if !hit {
            return Err(SceneError::EmptyTarget(region.name().into()));
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneOptions {
    pub edge_len: f64,
    pub noise: f64,
    pub seed: u64,
    pub source_grid: usize,
    pub detector_grid: usize,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self { edge_len: DEFAULT_EDGE_LEN, noise: 0.0, seed: 0, source_grid: 8, detector_grid: 16 }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub preset: ScenePreset,
    pub options: SceneOptions,
    pub definition: SceneDefinition,
    pub mesh: TetMesh,
    pub layout_spec: LayoutSpec,
    pub layout: SourceDetectorLayout,
    pub truth: Vec<f64>,
    pub measurements: MeasurementStack,
}

/// Meshes the preset, assembles at the true optical properties, runs the
/// forward model on the truth field and adds seeded multiplicative noise.
pub fn simulate_scene(preset: ScenePreset, options: &SceneOptions) -> Result<Scene, SceneError> {
    let definition = preset.definition(options.edge_len);
    let mesh = definition.phantom.build()?;
    let truth = ground_truth_field(&definition, &mesh)?;
    let layout_spec = preset.layout(options.source_grid, options.detector_grid);
    let layout = layout_spec.build(&mesh)?;
    let sys = assemble(&mesh, definition.truth.zeta)?;
    let fact = Factorization::new(&sys.compose(&definition.truth))?;
    let (_, clean) = forward_model(&fact, &layout, &truth)?;
    let measurements = add_noise(&clean, options.noise, options.seed);
    Ok(Scene { preset, options: *options, definition, mesh, layout_spec, layout, truth, measurements })
}

pub const MESH_FILE: &str = "mesh.tetmesh";
pub const MEASUREMENT_FILE: &str = "measurements.txt";
pub const TRUTH_FILE: &str = "truth.field";
pub const LAYOUT_FILE: &str = "layout.cfg";
pub const MANIFEST_FILE: &str = "manifest.cfg";

impl Scene {
    pub fn manifest(&self) -> KvConfig {
        let mut m = KvConfig::new();
        let d = &self.definition;
        m.set("preset", self.preset.name());
        m.set("edge_len", self.options.edge_len);
        m.set("noise", self.options.noise);
        m.set("seed", self.options.seed);
        m.set("source_grid", self.options.source_grid);
        m.set("detector_grid", self.options.detector_grid);
        m.set("true_mu_a", d.truth.mu_a);
        m.set("true_mu_s_prime", d.truth.mu_s_prime);
        m.set("zeta", d.truth.zeta);
        m.set("c", d.truth.c);
        m.set(
            "phantom",
            match d.phantom.shape {
                PhantomShape::Slab => "slab",
                PhantomShape::SlabWithCap => "slab_with_cap",
            },
        );
        m.set("dimensions_mm", format!("{} {} {}", d.phantom.dimensions[0], d.phantom.dimensions[1], d.phantom.dimensions[2]));
        m.set("cap_height_mm", d.phantom.cap_height);
        let regions: Vec<String> = d
            .regions
            .iter()
            .map(|r| match *r {
                Region::Sphere { center, radius, level } => {
                    format!("sphere({} {} {}; r={radius}; level={level})", center[0], center[1], center[2])
                }
                Region::SPath { center, arc_radius, tube_radius, half_thickness, level } => format!(
                    "s_path({} {} {}; arc={arc_radius}; tube={tube_radius}; half_thickness={half_thickness}; level={level})",
                    center[0], center[1], center[2]
                ),
            })
            .collect();
        m.set("regions", regions.join(" | "));
        m.set("nodes", self.mesh.num_nodes());
        m
    }

    pub fn write_bundle(&self, dir: &Path) -> Result<(), SceneError> {
        fs::create_dir_all(dir).map_err(|e| SceneError::Bundle(format!("{}: {e}", dir.display())))?;
        let write = |name: &str, text: String| {
            fs::write(dir.join(name), text).map_err(|e| SceneError::Bundle(format!("{}: {e}", dir.join(name).display())))
        };
        self.mesh.save(&dir.join(MESH_FILE))?;
        write(MEASUREMENT_FILE, self.measurements.to_text())?;
        write(TRUTH_FILE, field_to_text(&self.truth))?;
        write(LAYOUT_FILE, self.layout_spec.to_text())?;
        write(MANIFEST_FILE, format!("# scene v1\n{}", self.manifest().to_text()))
    }
}

/// Scene as read back from disk.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub manifest: KvConfig,
    pub mesh: TetMesh,
    pub layout_spec: LayoutSpec,
    pub layout: SourceDetectorLayout,
    pub measurements: MeasurementStack,
    pub truth: Option<Vec<f64>>,
}

impl SceneBundle {
    pub fn true_params(&self) -> Result<OpticalParams, SceneError> {
        let mut p = OpticalParams::new(self.manifest.require("true_mu_a")?, self.manifest.require("true_mu_s_prime")?)?;
        p.zeta = self.manifest.get_or("zeta", p.zeta)?;
        p.c = self.manifest.get_or("c", p.c)?;
        Ok(p)
    }

    pub fn preset(&self) -> Option<&str> {
        self.manifest.get_str("preset")
    }
}

fn read(dir: &Path, name: &str) -> Result<String, SceneError> {
    let p = dir.join(name);
    fs::read_to_string(&p).map_err(|e| SceneError::Bundle(format!("{}: {e}", p.display())))
}

/// Loads a bundle; the ground-truth file is optional.
pub fn read_bundle(dir: &Path) -> Result<SceneBundle, SceneError> {
    let manifest = KvConfig::parse(&read(dir, MANIFEST_FILE)?)?;
    let mesh = TetMesh::load(&dir.join(MESH_FILE))?;
    let layout_spec = LayoutSpec::from_text(&read(dir, LAYOUT_FILE)?)?;
    let layout = layout_spec.build(&mesh)?;
    let measurements = MeasurementStack::from_text(&read(dir, MEASUREMENT_FILE)?)?;
    if measurements.m.dim() != (layout.num_sources(), layout.num_detectors()) {
        return Err(SceneError::Bundle("measurement shape does not match the layout".into()));
    }
    let truth = if dir.join(TRUTH_FILE).exists() {
        let t = field_from_text(&read(dir, TRUTH_FILE)?)?;
        if t.len() != mesh.num_nodes() {
            return Err(SceneError::Bundle("ground-truth field length does not match the mesh".into()));
        }
        Some(t)
    } else {
        None
    };
    Ok(SceneBundle { manifest, mesh, layout_spec, layout, measurements, truth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::loss_and_residual;
    use crate::mesh::generate_slab_mesh;

    #[test]
    fn case1_single_center_node_at_desk_scale() {
        let def = ScenePreset::Case1Sphere.definition(2.5);
        let mesh = def.phantom.build().unwrap();
        let c = ground_truth_field(&def, &mesh).unwrap();
        let on: Vec<usize> = (0..c.len()).filter(|&i| c[i] > 0.0).collect();
        assert_eq!(on.len(), 1);
        assert_eq!(mesh.nodes()[on[0]], [27.5, 27.5, 7.5]);
        for (i, p) in mesh.nodes().iter().enumerate() {
            let d = ((p[0] - 27.5).powi(2) + (p[1] - 27.5).powi(2) + (p[2] - 7.5).powi(2)).sqrt();
            assert_eq!(c[i] == 1.0, d <= 1.5);
        }
    }

    #[test]
    fn sphere_support_volume_by_node_counting() {
        // fine lattice: node count × cell volume approximates the ball volume
        let h = 0.25;
        let mesh = generate_slab_mesh([10.0, 10.0, 10.0], h).unwrap();
        let def = SceneDefinition {
            phantom: PhantomSpec::slab([10.0; 3], h),
            regions: vec![Region::Sphere { center: [5.0, 5.0, 5.0], radius: 1.5, level: 1.0 }],
            truth: OpticalParams::default(),
        };
        let c = ground_truth_field(&def, &mesh).unwrap();
        let vol = c.iter().filter(|&&v| v > 0.0).count() as f64 * h * h * h;
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 1.5f64.powi(3);
        // one cell layer over the sphere surface
        assert!((vol - exact).abs() < 4.0 * std::f64::consts::PI * 1.5 * 1.5 * h, "{vol} vs {exact}");
    }

    #[test]
    fn zero_radius_gives_zero_field() {
        let mut def = ScenePreset::Case1Sphere.definition(2.5);
        def.regions = vec![Region::Sphere { center: [27.5, 27.5, 7.5], radius: 0.0, level: 1.0 }];
        let mesh = def.phantom.build().unwrap();
        assert!(ground_truth_field(&def, &mesh).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn targets_outside_rejected() {
        let mut def = ScenePreset::Case1Sphere.definition(2.5);
        def.regions = vec![Region::Sphere { center: [27.5, 27.5, 14.0], radius: 1.5, level: 1.0 }];
        let mesh = def.phantom.build().unwrap();
        assert!(matches!(ground_truth_field(&def, &mesh), Err(SceneError::TargetOutside(_))));
        def.regions = vec![Region::Sphere { center: [26.0, 26.0, 6.0], radius: 0.5, level: 1.0 }];
        assert!(matches!(ground_truth_field(&def, &mesh), Err(SceneError::EmptyTarget(_))));
    }

    #[test]
    fn s_path_geometry() {
        let r = Region::SPath { center: [0.0, 0.0, 0.0], arc_radius: 5.0, tube_radius: 0.5, half_thickness: 1.0, level: 1.0 };
        // on the curve: top, waist, right of lower bowl, both ends
        for p in [[0.0, 10.0], [0.0, 0.0], [5.0, -5.0], [5.0, 5.0], [-5.0, -5.0], [-5.0, 5.0]] {
            assert!(r.contains([p[0], p[1], 0.0]), "{p:?}");
        }
        // the two open gaps of the letter
        assert!(!r.contains([4.0, 1.5, 0.0]));
        assert!(!r.contains([-4.0, -1.5, 0.0]));
        assert!(!r.contains([0.0, 10.0, 1.5]));
    }

    #[test]
    fn all_presets_build_at_desk_scale() {
        for p in ScenePreset::ALL {
            let def = p.definition(2.5);
            let mesh = def.phantom.build().unwrap();
            let c = ground_truth_field(&def, &mesh).unwrap();
            assert!(c.iter().all(|&v| v >= 0.0) && c.iter().any(|&v| v > 0.0), "{}", p.name());
        }
        let def = ScenePreset::Case4PeanutPlusSphere.definition(2.5);
        let mesh = def.phantom.build().unwrap();
        let c = ground_truth_field(&def, &mesh).unwrap();
        assert_eq!(c.iter().filter(|&&v| v == 2.0).count(), 1);
        assert!(c.iter().filter(|&&v| v == 1.0).count() > 5);
        assert!(matches!(ScenePreset::parse("case9"), Err(SceneError::UnknownPreset { .. })));
    }

    #[test]
    fn noiseless_truth_has_zero_loss_and_seeds_differ() {
        let opts = SceneOptions { source_grid: 3, detector_grid: 4, ..Default::default() };
        let scene = simulate_scene(ScenePreset::Case1Sphere, &opts).unwrap();
        let fact = Factorization::new(&assemble(&scene.mesh, 1.0).unwrap().compose(&scene.definition.truth)).unwrap();
        let (_, m) = forward_model(&fact, &scene.layout, &scene.truth).unwrap();
        let (loss, _) = loss_and_residual(&m.m, &scene.measurements.m).unwrap();
        assert!(loss <= 1e-24 * scene.measurements.m.iter().map(|v| v * v).sum::<f64>());

        let a = simulate_scene(ScenePreset::Case1Sphere, &SceneOptions { noise: 0.05, seed: 1, ..opts }).unwrap();
        let b = simulate_scene(ScenePreset::Case1Sphere, &SceneOptions { noise: 0.05, seed: 2, ..opts }).unwrap();
        assert_ne!(a.measurements, b.measurements);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn bundle_round_trip() {
        let opts = SceneOptions { source_grid: 2, detector_grid: 3, noise: 0.05, seed: 4, ..Default::default() };
        let scene = simulate_scene(ScenePreset::Case2CapSphere, &opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        scene.write_bundle(dir.path()).unwrap();
        let back = read_bundle(dir.path()).unwrap();
        assert_eq!(back.mesh, scene.mesh);
        assert_eq!(back.layout, scene.layout);
        assert_eq!(back.measurements.m, scene.measurements.m);
        assert_eq!(back.truth.as_deref(), Some(scene.truth.as_slice()));
        assert_eq!(back.true_params().unwrap(), scene.definition.truth);
        fs::remove_file(dir.path().join(TRUTH_FILE)).unwrap();
        assert!(read_bundle(dir.path()).unwrap().truth.is_none());
    }
}
