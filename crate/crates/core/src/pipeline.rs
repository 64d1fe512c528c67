//! One entry point for the four reconstruction methods, plus the desk-scale
//! settings used by the command line and the acceptance runs.

use ndarray::Array2;
use thiserror::Error;

use crate::baselines::{flatten, operator_norm_sq, solve_l1fista, solve_l2cg, BaselineError, JacobianModel, LinearOperator, SolveReport, DEFAULT_DENSE_CAP};
use crate::export::{domain_mask, nodal_to_grid};
use crate::fem::{assemble, FemError, OpticalParams};
use crate::forward::{ForwardError, ForwardOperator, SourceDetectorLayout};
use crate::inr::{NetworkShape, NeuralField};
use crate::kv::{KvConfig, KvError};
use crate::mesh::TetMesh;
use crate::metrics::{dice, DiceResult, MetricsError, ThresholdPolicy};
use crate::recon::{reconstruct, ReconConfig, ReconError, ReconMode, ReconTrace, VolumeGrid};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Recon(#[from] ReconError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Config(#[from] KvError),
    #[error("invalid baseline config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    MuNeuFmt,
    NeuFmt,
    L2Cg,
    L1Fista,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::MuNeuFmt, Method::NeuFmt, Method::L2Cg, Method::L1Fista];

    pub fn name(self) -> &'static str {
        match self {
            Method::MuNeuFmt => "mu-neufmt",
            Method::NeuFmt => "neufmt",
            Method::L2Cg => "l2cg",
            Method::L1Fista => "l1fista",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s.trim().to_ascii_lowercase())
    }

    pub fn is_neural(self) -> bool {
        matches!(self, Method::MuNeuFmt | Method::NeuFmt)
    }
}

/// Baseline regularization is given relative to the problem so the same
/// numbers work across meshes and measurement units: α = `alpha_rel`·‖J‖²
/// and λ = `lambda_rel`·λmax with λmax = 2‖Jᵀm‖∞ (the smallest λ whose
/// solution is zero).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaselineConfig {
    pub alpha_rel: f64,
    pub lambda_rel: f64,
    pub cg_iterations: usize,
    pub cg_tol: f64,
    pub fista_iterations: usize,
    pub dense_cap_bytes: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { alpha_rel: 1e-7, lambda_rel: 1e-2, cg_iterations: 3000, cg_tol: 1e-6, fista_iterations: 3000, dense_cap_bytes: DEFAULT_DENSE_CAP }
    }
}

pub const BASELINE_KEYS: [&str; 5] = ["alpha_rel", "lambda_rel", "cg_iterations", "cg_tol", "fista_iterations"];

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.alpha_rel > 0.0 && self.alpha_rel.is_finite()) {
            return Err(PipelineError::InvalidConfig("alpha_rel must be positive".into()));
        }
        if !(self.lambda_rel >= 0.0 && self.lambda_rel.is_finite()) {
            return Err(PipelineError::InvalidConfig("lambda_rel must be non-negative".into()));
        }
        if !(self.cg_tol > 0.0) {
            return Err(PipelineError::InvalidConfig("cg_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("alpha_rel", format!("{:e}", self.alpha_rel));
        c.set("lambda_rel", format!("{:e}", self.lambda_rel));
        c.set("cg_iterations", self.cg_iterations);
        c.set("cg_tol", format!("{:e}", self.cg_tol));
        c.set("fista_iterations", self.fista_iterations);
        c
    }

    /// Reads the baseline keys present in `kv`; other keys are left to the caller.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), PipelineError> {
        self.alpha_rel = kv.get_or("alpha_rel", self.alpha_rel)?;
        self.lambda_rel = kv.get_or("lambda_rel", self.lambda_rel)?;
        self.cg_iterations = kv.get_or("cg_iterations", self.cg_iterations)?;
        self.cg_tol = kv.get_or("cg_tol", self.cg_tol)?;
        self.fista_iterations = kv.get_or("fista_iterations", self.fista_iterations)?;
        self.validate()
    }
}

pub const DESK_BANDS: usize = 4;

/// Reduced-width network and step sizes for single-core runs on the 2.5 mm
/// desk meshes. Measurements are normalized by their peak, which puts the
/// optical gradients on a different scale from the defaults; the μ step sizes
/// keep the default 100:1 ratio. Four encoding bands is the most the 2.5 mm
/// slab resolves; finer bands alias between nodes.
pub fn desk_config() -> ReconConfig {
    ReconConfig {
        network: NetworkShape::compact(),
        bands: DESK_BANDS,
        lr_theta: 1e-3,
        lr_mu_a: 1e-4,
        lr_mu_s: 1e-2,
        initial_level: Some(1e-3),
        ..ReconConfig::default()
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    /// Nodal concentration.
    pub c: Vec<f64>,
    pub params: OpticalParams,
    pub trace: Option<ReconTrace>,
    pub field: Option<NeuralField>,
    pub solve: Option<SolveReport>,
}

/// Runs `method` on one measurement stack. Neural methods take their optical
/// starting point and all settings from `recon`; the baselines assume
/// `recon.initial` is correct and never change it.
pub fn run_method(
    mesh: &TetMesh,
    layout: &SourceDetectorLayout,
    m: &Array2<f64>,
    method: Method,
    recon: &ReconConfig,
    base: &BaselineConfig,
) -> Result<MethodResult, PipelineError> {
    let system = assemble(mesh, recon.initial.zeta)?;
    match method {
        Method::MuNeuFmt | Method::NeuFmt => {
            let mut cfg = recon.clone();
            cfg.mode = if method == Method::MuNeuFmt { ReconMode::MuNeuFmt } else { ReconMode::NeuFmt };
            let out = reconstruct(mesh, &system, layout, m, &cfg)?;
            Ok(MethodResult {
                method,
                c: out.trace.final_c.clone(),
                params: out.trace.final_params,
                trace: Some(out.trace),
                field: Some(out.field),
                solve: None,
            })
        }
        Method::L2Cg | Method::L1Fista => {
            base.validate()?;
            recon.initial.validate()?;
            let op = ForwardOperator::new(&system.compose(&recon.initial), layout)?;
            let j = JacobianModel::new(&op, base.dense_cap_bytes);
            let y = flatten(m);
            let report = if method == Method::L2Cg {
                let alpha = base.alpha_rel * operator_norm_sq(&j, 50)?;
                solve_l2cg(&j, &y, alpha, base.cg_iterations, base.cg_tol)?
            } else {
                let lambda_max = 2.0 * j.apply_t(&y).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                solve_l1fista(&j, &y, base.lambda_rel * lambda_max, base.fista_iterations)?
            };
            Ok(MethodResult { method, c: report.c.clone(), params: recon.initial, trace: None, field: None, solve: Some(report) })
        }
    }
}

/// Grid used for Dice scoring: spacing of half the nominal mesh edge over the
/// mesh bounding box.
pub fn metrics_grid(mesh: &TetMesh, edge_len: f64) -> VolumeGrid {
    VolumeGrid::covering(mesh, 0.5 * edge_len)
}

/// Dice between two nodal fields after P1 interpolation onto `grid`,
/// restricted to points inside the mesh.
pub fn grid_dice(mesh: &TetMesh, recon: &[f64], truth: &[f64], grid: &VolumeGrid, policy: ThresholdPolicy) -> Result<DiceResult, MetricsError> {
    if recon.len() != mesh.num_nodes() || truth.len() != mesh.num_nodes() {
        return Err(MetricsError::GridMismatch(recon.len(), truth.len()));
    }
    let a = nodal_to_grid(mesh, recon, grid);
    let b = nodal_to_grid(mesh, truth, grid);
    let mask = domain_mask(mesh, grid);
    dice(&a, &b, policy, Some(&mask))
}
