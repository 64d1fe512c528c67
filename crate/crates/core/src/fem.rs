//! P1 finite-element assembly of the diffusion operator.
//!
//! The system matrix is kept as three optical-parameter-free components
//! (absorption/mass `Sa`, diffusion/stiffness `Sd`, Robin boundary `Sb`) so
//! that `S(μa, μs′) = c · (μa·Sa + κ·Sd + Sb)` with `κ = 1/(3(μa + μs′))`
//! can be recomposed cheaply whenever the optical coefficients change.

use thiserror::Error;

use crate::mesh::{cross, dot, Point3, TetMesh};
use crate::sparse::SparseSym;

#[derive(Debug, Error, PartialEq)]
pub enum FemError {
    #[error("element {element} has non-positive volume {volume:e}")]
    DegenerateElement { element: usize, volume: f64 },
    #[error("invalid optical parameters: {0}")]
    InvalidParams(String),
}

/// Homogeneous optical coefficients (1/mm) plus the boundary mismatch factor
/// ζ and the global light-speed scale c.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpticalParams {
    pub mu_a: f64,
    pub mu_s_prime: f64,
    pub zeta: f64,
    pub c: f64,
}

impl Default for OpticalParams {
    fn default() -> Self {
        Self { mu_a: 0.1, mu_s_prime: 1.0, zeta: 1.0, c: 1.0 }
    }
}

impl OpticalParams {
    pub fn new(mu_a: f64, mu_s_prime: f64) -> Result<Self, FemError> {
        let p = Self { mu_a, mu_s_prime, ..Self::default() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), FemError> {
        for (name, v) in [("mu_a", self.mu_a), ("mu_s_prime", self.mu_s_prime), ("zeta", self.zeta), ("c", self.c)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(FemError::InvalidParams(format!("{name} = {v} must be positive and finite")));
            }
        }
        Ok(())
    }

    /// Diffusion coefficient κ = 1 / (3(μa + μs′)).
    pub fn kappa(&self) -> f64 {
        1.0 / (3.0 * (self.mu_a + self.mu_s_prime))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpticalCoefficient {
    MuA,
    MuSPrime,
}

/// The three assembled components, all on one sparsity pattern. `Sb`
/// already contains the 1/(2ζ) Robin factor for the ζ it was assembled with.
#[derive(Debug, Clone)]
pub struct SystemMatrices {
    pub sa: SparseSym,
    pub sd: SparseSym,
    pub sb: SparseSym,
    pub zeta: f64,
}

/// Local mass block ∫ψᵢψⱼ for a tetrahedron of volume `v`.
pub fn local_mass(v: f64) -> [[f64; 4]; 4] {
    let mut m = [[v / 20.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = v / 10.0;
    }
    m
}

/// Gradients of the four barycentric basis functions and the element volume.
pub fn basis_gradients(p: [Point3; 4]) -> ([Point3; 4], f64) {
    let e = [1, 2, 3].map(|k| [p[k][0] - p[0][0], p[k][1] - p[0][1], p[k][2] - p[0][2]]);
    let det = dot(e[0], cross(e[1], e[2]));
    let g1 = cross(e[1], e[2]).map(|v| v / det);
    let g2 = cross(e[2], e[0]).map(|v| v / det);
    let g3 = cross(e[0], e[1]).map(|v| v / det);
    let g0 = [0, 1, 2].map(|k| -(g1[k] + g2[k] + g3[k]));
    ([g0, g1, g2, g3], det / 6.0)
}

/// Local stiffness block ∫∇ψᵢ·∇ψⱼ.
pub fn local_stiffness(p: [Point3; 4]) -> [[f64; 4]; 4] {
    let (g, v) = basis_gradients(p);
    let mut k = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            k[i][j] = v * dot(g[i], g[j]);
        }
    }
    k
}

/// Local Robin block (1/(2ζ))∫ψᵢψⱼ dΓ on a triangle of area `area`.
pub fn local_boundary(area: f64, zeta: f64) -> [[f64; 3]; 3] {
    let w = 1.0 / (2.0 * zeta);
    let mut b = [[w * area / 12.0; 3]; 3];
    for (i, row) in b.iter_mut().enumerate() {
        row[i] = w * area / 6.0;
    }
    b
}

fn mesh_pattern(mesh: &TetMesh) -> SparseSym {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); mesh.num_nodes()];
    for el in mesh.elements() {
        for &i in el {
            rows[i].extend_from_slice(el);
        }
    }
    SparseSym::from_pattern(rows)
}

/// Assembles `Sa`, `Sd`, `Sb` with exact P1 integration.
pub fn assemble(mesh: &TetMesh, zeta: f64) -> Result<SystemMatrices, FemError> {
    if !(zeta > 0.0) || !zeta.is_finite() {
        return Err(FemError::InvalidParams(format!("zeta = {zeta} must be positive and finite")));
    }
    let pattern = mesh_pattern(mesh);
    let mut sa = pattern.clone();
    let mut sd = pattern.clone();
    let mut sb = pattern;
    for (e, el) in mesh.elements().iter().enumerate() {
        let pts = mesh.element_points(e);
        let (grads, v) = basis_gradients(pts);
        if !(v > 0.0) {
            return Err(FemError::DegenerateElement { element: e, volume: v });
        }
        let m = local_mass(v);
        for i in 0..4 {
            for j in 0..4 {
                sa.add_at(el[i], el[j], m[i][j]);
                sd.add_at(el[i], el[j], v * dot(grads[i], grads[j]));
            }
        }
    }
    for (f, face) in mesh.boundary_faces().iter().enumerate() {
        let b = local_boundary(mesh.face_area(f), zeta);
        for i in 0..3 {
            for j in 0..3 {
                sb.add_at(face[i], face[j], b[i][j]);
            }
        }
    }
    Ok(SystemMatrices { sa, sd, sb, zeta })
}

impl SystemMatrices {
    pub fn dim(&self) -> usize {
        self.sa.dim()
    }

    /// S = c·(μa·Sa + κ·Sd + Sb).
    pub fn compose(&self, p: &OpticalParams) -> SparseSym {
        let c = p.c;
        SparseSym::linear_combination(&[(c * p.mu_a, &self.sa), (c * p.kappa(), &self.sd), (c, &self.sb)])
    }

    /// ∂S/∂μa = c·[Sa − Sd/(3(μa+μs′)²)] and ∂S/∂μs′ = −c·Sd/(3(μa+μs′)²).
    pub fn d_s_d_mu(&self, p: &OpticalParams, which: OpticalCoefficient) -> SparseSym {
        let (sa_w, sd_w) = self.d_s_d_mu_weights(p, which);
        SparseSym::linear_combination(&[(sa_w, &self.sa), (sd_w, &self.sd)])
    }

    /// Coefficients (on Sa, on Sd) of ∂S/∂μ.
    pub fn d_s_d_mu_weights(&self, p: &OpticalParams, which: OpticalCoefficient) -> (f64, f64) {
        let s = p.mu_a + p.mu_s_prime;
        let dk = -1.0 / (3.0 * s * s);
        match which {
            OpticalCoefficient::MuA => (p.c, p.c * dk),
            OpticalCoefficient::MuSPrime => (0.0, p.c * dk),
        }
    }
}
