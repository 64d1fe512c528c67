//! Fluorescence molecular tomography with a diffusion-approximation FEM
//! forward model and an implicit neural fluorescence field.

pub mod adjoint;
pub mod baselines;
pub mod export;
pub mod fem;
pub mod forward;
pub mod inr;
pub mod kv;
pub mod mesh;
pub mod metrics;
pub mod phantoms;
pub mod pipeline;
pub mod recon;
pub mod sparse;
