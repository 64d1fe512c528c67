use neufmt_core::baselines::BaselineError;
use neufmt_core::fem::FemError;
use neufmt_core::forward::ForwardError;
use neufmt_core::kv::KvError;
use neufmt_core::mesh::MeshError;
use neufmt_core::phantoms::SceneError;
use neufmt_core::pipeline::PipelineError;
use neufmt_core::recon::ReconError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERICAL: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: USAGE, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { code: DATA, msg: msg.into() }
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self { code: NUMERICAL, msg: msg.into() }
    }
}

fn forward(e: ForwardError) -> CliError {
    match e {
        ForwardError::NotPositiveDefinite { .. } => CliError::numerical(e.to_string()),
        ForwardError::Config(_) => CliError::usage(e.to_string()),
        _ => CliError::data(e.to_string()),
    }
}

fn mesh(e: MeshError) -> CliError {
    match e {
        MeshError::NonPositiveExtent(_)
        | MeshError::InvalidEdgeLength(_)
        | MeshError::DegenerateExtent { .. }
        | MeshError::InvalidCap { .. }
        | MeshError::InvalidSpec(_) => CliError::usage(e.to_string()),
        _ => CliError::data(e.to_string()),
    }
}

fn fem(e: FemError) -> CliError {
    match e {
        FemError::InvalidParams(_) => CliError::usage(e.to_string()),
        FemError::DegenerateElement { .. } => CliError::data(e.to_string()),
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::UnknownPreset { .. } | SceneError::EmptyTarget(_) | SceneError::TargetOutside(_) => CliError::usage(e.to_string()),
            SceneError::Mesh(m) => mesh(m),
            SceneError::Fem(f) => fem(f),
            SceneError::Forward(f) => forward(f),
            SceneError::Bundle(_) | SceneError::Export(_) | SceneError::Config(_) => CliError::data(e.to_string()),
        }
    }
}

impl From<KvError> for CliError {
    fn from(e: KvError) -> Self {
        CliError::data(e.to_string())
    }
}

pub fn recon(e: ReconError) -> CliError {
    match e {
        ReconError::InvalidConfig(_) | ReconError::Config(_) | ReconError::Network(_) => CliError::usage(e.to_string()),
        ReconError::NonFinite { .. } | ReconError::Factorization { .. } => CliError::numerical(e.to_string()),
        ReconError::Forward(f) => forward(f),
    }
}

pub fn pipeline(e: PipelineError) -> CliError {
    match e {
        PipelineError::Recon(r) => recon(r),
        PipelineError::Baseline(b) => match b {
            BaselineError::InvalidParameter(_) => CliError::usage(b.to_string()),
            BaselineError::Lipschitz => CliError::numerical(b.to_string()),
            BaselineError::DimensionMismatch(_) => CliError::data(b.to_string()),
        },
        PipelineError::Forward(f) => forward(f),
        PipelineError::Fem(f) => fem(f),
        PipelineError::Config(_) | PipelineError::InvalidConfig(_) => CliError::usage(e.to_string()),
    }
}
