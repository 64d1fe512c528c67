//! Self-supervised reconstruction: the neural field is fitted to the
//! measurements through the differentiable forward model while μa and μs′
//! are refined by alternating gradient steps.

use std::fmt::Write as _;

use ndarray::Array2;
use thiserror::Error;

use crate::adjoint::{loss_and_residual, optical_gradient};
use crate::fem::{OpticalCoefficient, OpticalParams, SystemMatrices};
use crate::forward::{ForwardError, ForwardOperator, SourceDetectorLayout};
use crate::inr::{adam_step, AdamState, EncodingConfig, InrError, NetworkShape, NeuralField};
use crate::kv::{KvConfig, KvError};
use crate::mesh::{Point3, TetMesh};

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("invalid reconstruction config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFinite { iteration: usize, trace: Box<ReconTrace> },
    #[error("system matrix lost positive definiteness at iteration {iteration} ({params:?})")]
    Factorization { iteration: usize, params: OpticalParams, trace: Box<ReconTrace> },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Network(#[from] InrError),
    #[error(transparent)]
    Config(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    /// Field only; optical coefficients stay at their initial values.
    NeuFmt,
    /// Field plus alternating μa / μs′ refinement.
    MuNeuFmt,
}

impl ReconMode {
    pub fn name(self) -> &'static str {
        match self {
            ReconMode::NeuFmt => "neufmt",
            ReconMode::MuNeuFmt => "mu-neufmt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "neufmt" => Some(ReconMode::NeuFmt),
            "mu-neufmt" | "mu_neufmt" => Some(ReconMode::MuNeuFmt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconConfig {
    pub mode: ReconMode,
    pub adapt_mu_a: bool,
    pub adapt_mu_s: bool,
    pub iterations: usize,
    pub period: usize,
    pub lr_theta: f64,
    pub lr_mu_a: f64,
    pub lr_mu_s: f64,
    /// Overall factor applied to `lr_theta` by the last iteration.
    pub lr_decay: f64,
    pub lambda_reg: f64,
    pub initial: OpticalParams,
    /// Clamp bounds for μ as multiples of the initial value.
    pub clamp: [f64; 2],
    pub seed: u64,
    pub bands: usize,
    pub network: NetworkShape,
    /// Measurements and predictions are divided by this before the loss;
    /// `None` uses the largest measured magnitude.
    pub measurement_scale: Option<f64>,
    /// Starting value of the constant initial field; `None` keeps
    /// `softplus(0) · output_scale`.
    pub initial_level: Option<f64>,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            mode: ReconMode::MuNeuFmt,
            adapt_mu_a: true,
            adapt_mu_s: true,
            iterations: 2000,
            period: 50,
            lr_theta: 1e-4,
            lr_mu_a: 1e-5,
            lr_mu_s: 1e-3,
            lr_decay: 0.1,
            lambda_reg: 1e-6,
            initial: OpticalParams::default(),
            clamp: [0.2, 5.0],
            seed: 0,
            bands: 6,
            network: NetworkShape::full(),
            measurement_scale: None,
            initial_level: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 25] = [
    "mode",
    "adapt_mu_a",
    "adapt_mu_s",
    "iterations",
    "period",
    "lr_theta",
    "lr_mu_a",
    "lr_mu_s",
    "lr_decay",
    "lambda_reg",
    "mu_a",
    "mu_s_prime",
    "zeta",
    "c",
    "clamp_lo",
    "clamp_hi",
    "seed",
    "bands",
    "hidden_layers",
    "hidden_width",
    "skip_layer",
    "head_width",
    "output_scale",
    "measurement_scale",
    "initial_level",
];

impl ReconConfig {
    pub fn validate(&self) -> Result<(), ReconError> {
        let bad = |m: &str| Err(ReconError::InvalidConfig(m.to_string()));
        if self.iterations == 0 || self.period == 0 {
            return bad("iterations and period must be at least 1");
        }
        if ![self.lr_theta, self.lr_mu_a, self.lr_mu_s].iter().all(|&v| v > 0.0 && v.is_finite()) {
            return bad("learning rates must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]");
        }
        if !(self.lambda_reg >= 0.0) {
            return bad("lambda_reg must be non-negative");
        }
        if !(self.clamp[0] > 0.0 && self.clamp[0] < self.clamp[1] && self.clamp[1].is_finite()) {
            return bad("clamp bounds must satisfy 0 < lo < hi");
        }
        if self.measurement_scale.is_some_and(|s| !(s > 0.0)) {
            return bad("measurement_scale must be positive");
        }
        if self.initial_level.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
            return bad("initial_level must be positive");
        }
        self.initial.validate().map_err(|e| ReconError::InvalidConfig(e.to_string()))?;
        self.network.validate()?;
        Ok(())
    }

    pub fn adapts(&self, which: OpticalCoefficient) -> bool {
        self.mode == ReconMode::MuNeuFmt
            && match which {
                OpticalCoefficient::MuA => self.adapt_mu_a,
                OpticalCoefficient::MuSPrime => self.adapt_mu_s,
            }
    }

    /// Coefficient scheduled at iteration `i` (1-based), if any: every
    /// `period`-th iteration, μa when ⌊i/T⌋ is even and μs′ when odd.
    pub fn scheduled(&self, i: usize) -> Option<OpticalCoefficient> {
        if i % self.period != 0 {
            return None;
        }
        let which = if (i / self.period) % 2 == 0 { OpticalCoefficient::MuA } else { OpticalCoefficient::MuSPrime };
        self.adapts(which).then_some(which)
    }

    pub fn lr_theta_at(&self, i: usize) -> f64 {
        self.lr_theta * self.lr_decay.powf((i - 1) as f64 / self.iterations as f64)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("mode", self.mode.name());
        c.set("adapt_mu_a", self.adapt_mu_a);
        c.set("adapt_mu_s", self.adapt_mu_s);
        c.set("iterations", self.iterations);
        c.set("period", self.period);
        c.set("lr_theta", format!("{:e}", self.lr_theta));
        c.set("lr_mu_a", format!("{:e}", self.lr_mu_a));
        c.set("lr_mu_s", format!("{:e}", self.lr_mu_s));
        c.set("lr_decay", self.lr_decay);
        c.set("lambda_reg", format!("{:e}", self.lambda_reg));
        c.set("mu_a", self.initial.mu_a);
        c.set("mu_s_prime", self.initial.mu_s_prime);
        c.set("zeta", self.initial.zeta);
        c.set("c", self.initial.c);
        c.set("clamp_lo", self.clamp[0]);
        c.set("clamp_hi", self.clamp[1]);
        c.set("seed", self.seed);
        c.set("bands", self.bands);
        c.set("hidden_layers", self.network.hidden_layers);
        c.set("hidden_width", self.network.hidden_width);
        c.set("skip_layer", self.network.skip_layer.unwrap_or(0));
        c.set("head_width", self.network.head_width);
        c.set("output_scale", self.network.output_scale);
        c.set("measurement_scale", self.measurement_scale.map_or("auto".to_string(), |s| format!("{s:e}")));
        c.set("initial_level", self.initial_level.map_or("auto".to_string(), |v| format!("{v:e}")));
        c
    }

    /// Overrides fields present in `kv`; unknown keys are rejected.
    pub fn apply_kv(&mut self, kv: &KvConfig) -> Result<(), ReconError> {
        kv.check_keys(&CONFIG_KEYS)?;
        if let Some(m) = kv.get_str("mode") {
            self.mode = ReconMode::parse(m).ok_or_else(|| ReconError::InvalidConfig(format!("unknown mode `{m}`")))?;
        }
        self.adapt_mu_a = kv.get_or("adapt_mu_a", self.adapt_mu_a)?;
        self.adapt_mu_s = kv.get_or("adapt_mu_s", self.adapt_mu_s)?;
        self.iterations = kv.get_or("iterations", self.iterations)?;
        self.period = kv.get_or("period", self.period)?;
        self.lr_theta = kv.get_or("lr_theta", self.lr_theta)?;
        self.lr_mu_a = kv.get_or("lr_mu_a", self.lr_mu_a)?;
        self.lr_mu_s = kv.get_or("lr_mu_s", self.lr_mu_s)?;
        self.lr_decay = kv.get_or("lr_decay", self.lr_decay)?;
        self.lambda_reg = kv.get_or("lambda_reg", self.lambda_reg)?;
        self.initial.mu_a = kv.get_or("mu_a", self.initial.mu_a)?;
        self.initial.mu_s_prime = kv.get_or("mu_s_prime", self.initial.mu_s_prime)?;
        self.initial.zeta = kv.get_or("zeta", self.initial.zeta)?;
        self.initial.c = kv.get_or("c", self.initial.c)?;
        self.clamp[0] = kv.get_or("clamp_lo", self.clamp[0])?;
        self.clamp[1] = kv.get_or("clamp_hi", self.clamp[1])?;
        self.seed = kv.get_or("seed", self.seed)?;
        self.bands = kv.get_or("bands", self.bands)?;
        self.network.hidden_layers = kv.get_or("hidden_layers", self.network.hidden_layers)?;
        self.network.hidden_width = kv.get_or("hidden_width", self.network.hidden_width)?;
        if let Some(k) = kv.get::<usize>("skip_layer")? {
            self.network.skip_layer = (k != 0).then_some(k);
        }
        self.network.head_width = kv.get_or("head_width", self.network.head_width)?;
        self.network.output_scale = kv.get_or("output_scale", self.network.output_scale)?;
        match kv.get_str("measurement_scale") {
            None => {}
            Some("auto") => self.measurement_scale = None,
            Some(_) => self.measurement_scale = Some(kv.require("measurement_scale")?),
        }
        match kv.get_str("initial_level") {
            None => {}
            Some("auto") => self.initial_level = None,
            Some(_) => self.initial_level = Some(kv.require("initial_level")?),
        }
        self.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    /// Data fidelity plus L1 penalty.
    pub loss: f64,
    pub data_loss: f64,
    pub mu_a: f64,
    pub mu_s: f64,
    pub lr_theta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconTrace {
    pub records: Vec<TraceRecord>,
    pub final_c: Vec<f64>,
    pub final_params: OpticalParams,
}

impl ReconTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,mu_a,mu_s,lr_theta\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{:e},{:e},{:e},{:e}", r.iter, r.loss, r.mu_a, r.mu_s, r.lr_theta);
        }
        s
    }

    pub fn mu_a_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mu_a).collect()
    }

    pub fn mu_s_history(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.mu_s).collect()
    }
}

/// Trained network together with its trace.
#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub trace: ReconTrace,
    pub field: NeuralField,
}

/// Runs the alternating optimization against measurements `m_real`
/// (`n_src × n_det`) on the mesh and system matrices given.
pub fn reconstruct(
    mesh: &TetMesh,
    system: &SystemMatrices,
    layout: &SourceDetectorLayout,
    m_real: &Array2<f64>,
    cfg: &ReconConfig,
) -> Result<ReconOutput, ReconError> {
    cfg.validate()?;
    if m_real.dim() != (layout.num_sources(), layout.num_detectors()) || layout.num_nodes() != mesh.num_nodes() {
        return Err(ForwardError::DimensionMismatch("measurements, layout and mesh disagree".into()).into());
    }
    let scale = match cfg.measurement_scale {
        Some(s) => s,
        None => {
            let s = m_real.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if s > 0.0 { s } else { 1.0 }
        }
    };
    let target = m_real / scale;
    let mut params = cfg.initial;
    let lo = [cfg.clamp[0] * params.mu_a, cfg.clamp[0] * params.mu_s_prime];
    let hi = [cfg.clamp[1] * params.mu_a, cfg.clamp[1] * params.mu_s_prime];
    let mut op = ForwardOperator::new(&system.compose(&params), layout)?;

    let encoding = EncodingConfig::from_mesh(mesh, cfg.bands)?;
    let mut field = NeuralField::new(encoding, cfg.network, cfg.seed)?;
    if let Some(level) = cfg.initial_level {
        field.set_initial_level(level)?;
    }
    let x = encoding.encode_batch(mesh.nodes());
    let mut adam = AdamState::new(field.num_params());
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut c = vec![0.0; mesh.num_nodes()];

    let partial = |records: &Vec<TraceRecord>, c: &[f64], params: OpticalParams| {
        Box::new(ReconTrace { records: records.clone(), final_c: c.to_vec(), final_params: params })
    };

    for i in 1..=cfg.iterations {
        let (values, tape) = field.forward_encoded(&x);
        c.copy_from_slice(values.as_slice().expect("contiguous"));
        let predicted = op.measure(&c) / scale;
        let (data_loss, residual) = loss_and_residual(&predicted, &target)?;
        let l1: f64 = c.iter().map(|v| v.abs()).sum();
        let loss = data_loss + cfg.lambda_reg * l1;
        if !loss.is_finite() {
            return Err(ReconError::NonFinite { iteration: i, trace: partial(&records, &c, params) });
        }
        // gradients are with respect to unscaled predictions
        let residual = residual / scale;
        let mut d_c = op.field_gradient(&residual);
        if cfg.lambda_reg > 0.0 {
            for (g, &v) in d_c.iter_mut().zip(&c) {
                *g += cfg.lambda_reg * if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
            }
        }
        let grads = field.backward(&tape, d_c.as_slice().expect("contiguous"))?;
        let lr = cfg.lr_theta_at(i);
        adam_step(field.params_mut(), &grads, &mut adam, lr);

        if let Some(which) = cfg.scheduled(i) {
            let g = optical_gradient(&op, system, &params, &c, &residual, which)?;
            let (k, step) = match which {
                OpticalCoefficient::MuA => (0, cfg.lr_mu_a),
                OpticalCoefficient::MuSPrime => (1, cfg.lr_mu_s),
            };
            let old = params;
            let mut attempt = step;
            loop {
                let mut next = old;
                let slot = if k == 0 { &mut next.mu_a } else { &mut next.mu_s_prime };
                *slot = (*slot - attempt * g).clamp(lo[k], hi[k]);
                match op.update(&system.compose(&next), layout) {
                    Ok(()) => {
                        params = next;
                        break;
                    }
                    Err(ForwardError::NotPositiveDefinite { .. }) if attempt == step => attempt *= 0.5,
                    Err(_) => {
                        return Err(ReconError::Factorization { iteration: i, params: next, trace: partial(&records, &c, old) })
                    }
                }
            }
        }
        records.push(TraceRecord { iter: i, loss, data_loss, mu_a: params.mu_a, mu_s: params.mu_s_prime, lr_theta: lr });
    }
    let final_c = field.evaluate(mesh.nodes());
    Ok(ReconOutput { trace: ReconTrace { records, final_c, final_params: params }, field })
}

/// Regular sampling lattice: `dims` points per axis starting at `origin`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeGrid {
    pub origin: Point3,
    pub spacing: Point3,
    pub dims: [usize; 3],
}

impl VolumeGrid {
    /// Lattice over the mesh bounding box with spacing close to `step`.
    pub fn covering(mesh: &TetMesh, step: f64) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let mut dims = [0; 3];
        let mut spacing = [0.0; 3];
        for k in 0..3 {
            let extent = hi[k] - lo[k];
            let cells = (extent / step).round().max(1.0) as usize;
            dims[k] = cells + 1;
            spacing[k] = extent / cells as f64;
        }
        Self { origin: lo, spacing, dims }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// x fastest, then y, then z.
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn point(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + i as f64 * self.spacing[0],
            self.origin[1] + j as f64 * self.spacing[1],
            self.origin[2] + k as f64 * self.spacing[2],
        ]
    }

    pub fn points(&self) -> Vec<Point3> {
        let mut out = Vec::with_capacity(self.len());
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    out.push(self.point(i, j, k));
                }
            }
        }
        out
    }
}

/// Evaluates the network at every lattice point.
pub fn sample_field_on_grid(field: &NeuralField, grid: &VolumeGrid) -> Vec<f64> {
    let pts = grid.points();
    let mut out = Vec::with_capacity(pts.len());
    for chunk in pts.chunks(4096) {
        out.extend(field.evaluate(chunk));
    }
    out
}
