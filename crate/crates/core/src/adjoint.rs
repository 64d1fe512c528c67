//! Squared-error loss and adjoint gradients with respect to the nodal
//! fluorescence field and the two optical coefficients.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::fem::{OpticalCoefficient, OpticalParams, SystemMatrices};
use crate::forward::{Factorization, ForwardError, ForwardOperator, MeasurementStack, PhotonFields, SourceDetectorLayout};

/// L = Σ (M̂ − M)² and R = ∂L/∂M̂ = 2(M̂ − M).
pub fn loss_and_residual(predicted: &Array2<f64>, measured: &Array2<f64>) -> Result<(f64, Array2<f64>), ForwardError> {
    if predicted.dim() != measured.dim() {
        return Err(ForwardError::DimensionMismatch(format!(
            "predicted {:?} vs measured {:?}",
            predicted.dim(),
            measured.dim()
        )));
    }
    let diff = predicted - measured;
    let loss = diff.iter().map(|v| v * v).sum();
    Ok((loss, diff * 2.0))
}

pub fn stack_loss(predicted: &MeasurementStack, measured: &MeasurementStack) -> Result<(f64, Array2<f64>), ForwardError> {
    loss_and_residual(&predicted.m, &measured.m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_c: Array1<f64>,
    pub d_mu_a: f64,
    pub d_mu_s_prime: f64,
}

impl GradientBundle {
    pub fn d_mu(&self, which: OpticalCoefficient) -> f64 {
        match which {
            OpticalCoefficient::MuA => self.d_mu_a,
            OpticalCoefficient::MuSPrime => self.d_mu_s_prime,
        }
    }
}

/// Adjoint gradients of ⟨R, M̂⟩ (R fixed) for fields produced with `fact`.
///
/// λm = S⁻¹(P Rₛ), λx = S⁻¹(λm ⊙ C);
/// ∂/∂C = Σₛ λm ⊙ Φx, ∂/∂μ = −Σₛ [λmᵀ S′ Φm + λxᵀ S′ Φx].
pub fn gradients(
    fact: &Factorization,
    system: &SystemMatrices,
    params: &OpticalParams,
    layout: &SourceDetectorLayout,
    fields: &PhotonFields,
    c: &[f64],
    residual: &Array2<f64>,
) -> Result<GradientBundle, ForwardError> {
    if fields.factorization_id() != fact.id() {
        return Err(ForwardError::StaleFactorization);
    }
    let n = layout.num_nodes();
    let ns = layout.num_sources();
    if residual.dim() != (ns, layout.num_detectors()) || c.len() != n || fields.phi_x.dim() != (n, ns) {
        return Err(ForwardError::DimensionMismatch("residual, field or photon densities".into()));
    }
    let lam_m = fact.solve_columns(&layout.detector_matrix().dot(&residual.t()));
    let d_c = (&lam_m * &fields.phi_x).sum_axis(Axis(1));
    let cv = ArrayView1::from(c).insert_axis(Axis(1));
    let lam_x = fact.solve_columns(&(&lam_m * &cv));

    let d_mu = |which| {
        let ds = system.d_s_d_mu(params, which);
        let mut g = 0.0;
        for s in 0..ns {
            let col = |a: &Array2<f64>| a.column(s).to_vec();
            g -= ds.bilinear(&col(&lam_m), &col(&fields.phi_m));
            g -= ds.bilinear(&col(&lam_x), &col(&fields.phi_x));
        }
        g
    };
    Ok(GradientBundle {
        d_c,
        d_mu_a: d_mu(OpticalCoefficient::MuA),
        d_mu_s_prime: d_mu(OpticalCoefficient::MuSPrime),
    })
}

/// ∂⟨R, M̂⟩/∂μ using the cached excitation fields and detector adjoints of
/// `op`: λm = W Rᵀ needs no solve, Φm and λx take one solve per source.
pub fn optical_gradient(
    op: &ForwardOperator,
    system: &SystemMatrices,
    params: &OpticalParams,
    c: &[f64],
    residual: &Array2<f64>,
    which: OpticalCoefficient,
) -> Result<f64, ForwardError> {
    let phi_x = op.phi_x();
    let (n, ns) = phi_x.dim();
    if c.len() != n || residual.dim() != (ns, op.detector_adjoints().ncols()) {
        return Err(ForwardError::DimensionMismatch("residual or field".into()));
    }
    let fact = op.factorization();
    let cv = ArrayView1::from(c).insert_axis(Axis(1));
    let lam_m = op.detector_adjoints().dot(&residual.t());
    let phi_m = fact.solve_columns(&(phi_x * &cv));
    let lam_x = fact.solve_columns(&(&lam_m * &cv));
    let ds = system.d_s_d_mu(params, which);
    let mut g = 0.0;
    for s in 0..ns {
        let col = |a: &Array2<f64>| a.column(s).to_vec();
        g -= ds.bilinear(&col(&lam_m), &col(&phi_m));
        g -= ds.bilinear(&col(&lam_x), &col(phi_x));
    }
    Ok(g)
}
