//! Linearized reconstructions on M̂ = J·C: Tikhonov-regularized conjugate
//! gradients and non-negative L1 FISTA.
//!
//! Rows of J are ordered source-major: row `s · n_det + d`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::forward::ForwardOperator;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("power iteration did not produce a positive Lipschitz estimate")]
    Lipschitz,
}

/// Linear operator C ↦ M̂ (flattened) and its transpose.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_t(&self, y: &[f64]) -> Vec<f64>;
}

/// Dense row-major matrix as an operator (tests and small problems).
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator(pub Array2<f64>);

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.0.nrows()
    }

    fn cols(&self) -> usize {
        self.0.ncols()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.0.dot(&ArrayView1::from(x)).to_vec()
    }

    fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        self.0.t().dot(&ArrayView1::from(y)).to_vec()
    }
}

/// Sensitivity matrix J[s·n_det + d, n] = (S⁻¹P_d)[n] · Φx[n, s], held either
/// densely or implicitly through the two factor matrices.
#[derive(Debug, Clone)]
pub struct JacobianModel {
    phi_x: Array2<f64>,
    w: Array2<f64>,
    dense: Option<Array2<f64>>,
}

/// Default memory cap for the dense Jacobian (bytes).
pub const DEFAULT_DENSE_CAP: usize = 256 << 20;

impl JacobianModel {
    /// Builds from the cached excitation fields and detector adjoints; the
    /// dense matrix is formed only if it fits in `dense_cap_bytes`.
    pub fn new(op: &ForwardOperator, dense_cap_bytes: usize) -> Self {
        let phi_x = op.phi_x().clone();
        let w = op.detector_adjoints().clone();
        let (n, ns) = phi_x.dim();
        let nd = w.ncols();
        let bytes = ns * nd * n * std::mem::size_of::<f64>();
        let dense = (bytes <= dense_cap_bytes).then(|| {
            let mut j = Array2::zeros((ns * nd, n));
            for s in 0..ns {
                for d in 0..nd {
                    let mut row = j.row_mut(s * nd + d);
                    for i in 0..n {
                        row[i] = w[[i, d]] * phi_x[[i, s]];
                    }
                }
            }
            j
        });
        Self { phi_x, w, dense }
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }

    pub fn dense(&self) -> Option<&Array2<f64>> {
        self.dense.as_ref()
    }

    pub fn num_sources(&self) -> usize {
        self.phi_x.ncols()
    }

    pub fn num_detectors(&self) -> usize {
        self.w.ncols()
    }

    /// Column `n` of J (response to a unit field at node `n`).
    pub fn column(&self, n: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.cols()];
        e[n] = 1.0;
        self.apply(&e)
    }
}

impl LinearOperator for JacobianModel {
    fn rows(&self) -> usize {
        self.phi_x.ncols() * self.w.ncols()
    }

    fn cols(&self) -> usize {
        self.phi_x.nrows()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols());
        if let Some(j) = &self.dense {
            return j.dot(&ArrayView1::from(x)).to_vec();
        }
        let weighted = &self.phi_x * &ArrayView1::from(x).insert_axis(Axis(1));
        let m = weighted.t().dot(&self.w);
        m.iter().copied().collect()
    }

    fn apply_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows());
        if let Some(j) = &self.dense {
            return j.t().dot(&ArrayView1::from(y)).to_vec();
        }
        let r = ArrayView2::from_shape((self.num_sources(), self.num_detectors()), y).expect("shape");
        let lam = self.w.dot(&r.t());
        (&lam * &self.phi_x).sum_axis(Axis(1)).to_vec()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Largest eigenvalue of JᵀJ by power iteration from a fixed start vector.
pub fn operator_norm_sq(j: &dyn LinearOperator, iters: usize) -> Result<f64, BaselineError> {
    let n = j.cols();
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * ((i * 7919) % 101) as f64).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut est = 0.0;
    for _ in 0..iters.max(1) {
        let w = j.apply_t(&j.apply(&v));
        let nw = norm(&w);
        if !(nw > 0.0) || !nw.is_finite() {
            return Err(BaselineError::Lipschitz);
        }
        est = nw;
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Ok(est)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub c: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per-iteration residual (CG: ‖(JᵀJ+αI)c − Jᵀm‖; FISTA: objective).
    pub history: Vec<f64>,
}

/// Conjugate gradients on (JᵀJ + αI)c = Jᵀm from c = 0. Stops when the
/// normal-equation residual falls below `tol` relative to ‖Jᵀm‖ and returns
/// the iterate with the smallest residual.
pub fn solve_l2cg(j: &dyn LinearOperator, m: &[f64], alpha: f64, iters: usize, tol: f64) -> Result<SolveReport, BaselineError> {
    if m.len() != j.rows() {
        return Err(BaselineError::DimensionMismatch(format!("{} measurements for {} rows", m.len(), j.rows())));
    }
    if !(alpha > 0.0) {
        return Err(BaselineError::InvalidParameter("alpha must be positive".into()));
    }
    let n = j.cols();
    let b = j.apply_t(m);
    let bnorm = norm(&b);
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(SolveReport { c: x, iterations: 0, converged: true, history: vec![0.0] });
    }
    let normal = |v: &[f64]| -> Vec<f64> {
        let mut out = j.apply_t(&j.apply(v));
        out.iter_mut().zip(v).for_each(|(o, vi)| *o += alpha * vi);
        out
    };
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut history = vec![rr.sqrt()];
    let mut best = (rr.sqrt(), x.clone());
    let mut k = 0;
    while k < iters && rr.sqrt() > tol * bnorm {
        let ap = normal(&p);
        let step = rr / dot(&p, &ap);
        x.iter_mut().zip(&p).for_each(|(xi, pi)| *xi += step * pi);
        r.iter_mut().zip(&ap).for_each(|(ri, a)| *ri -= step * a);
        let rr_new = dot(&r, &r);
        p = r.iter().zip(&p).map(|(ri, pi)| ri + (rr_new / rr) * pi).collect();
        rr = rr_new;
        k += 1;
        history.push(rr.sqrt());
        if rr.sqrt() < best.0 {
            best = (rr.sqrt(), x.clone());
        }
    }
    Ok(SolveReport { c: best.1, iterations: k, converged: rr.sqrt() <= tol * bnorm, history })
}

/// Soft threshold followed by projection onto c ≥ 0.
pub fn prox_nonneg_l1(v: f64, threshold: f64) -> f64 {
    (v - threshold).max(0.0)
}

/// FISTA for min ‖Jc − m‖² + λ‖c‖₁ subject to c ≥ 0, step 1/L with
/// L = 2‖JᵀJ‖ from power iteration.
pub fn solve_l1fista(j: &dyn LinearOperator, m: &[f64], lambda: f64, iters: usize) -> Result<SolveReport, BaselineError> {
    if m.len() != j.rows() {
        return Err(BaselineError::DimensionMismatch(format!("{} measurements for {} rows", m.len(), j.rows())));
    }
    if !(lambda >= 0.0) {
        return Err(BaselineError::InvalidParameter("lambda must be non-negative".into()));
    }
    let lip = 2.0 * operator_norm_sq(j, 50)? * 1.01;
    let n = j.cols();
    let objective = |c: &[f64]| {
        let r: Vec<f64> = j.apply(c).iter().zip(m).map(|(a, b)| a - b).collect();
        dot(&r, &r) + lambda * c.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut x = vec![0.0; n];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut history = vec![objective(&x)];
    for _ in 0..iters {
        let r: Vec<f64> = j.apply(&y).iter().zip(m).map(|(a, b)| a - b).collect();
        let g = j.apply_t(&r);
        let x_new: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| prox_nonneg_l1(yi - 2.0 * gi / lip, lambda / lip)).collect();
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = x_new.iter().zip(&x).map(|(a, b)| a + (t - 1.0) / t_new * (a - b)).collect();
        x = x_new;
        t = t_new;
        history.push(objective(&x));
    }
    Ok(SolveReport { c: x, iterations: iters, converged: true, history })
}

/// Flattens an `n_src × n_det` stack source-major.
pub fn flatten(m: &Array2<f64>) -> Vec<f64> {
    m.as_standard_layout().iter().copied().collect()
}

pub fn to_array(v: Vec<f64>) -> Array1<f64> {
    Array1::from(v)
}
