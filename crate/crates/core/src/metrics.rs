//! Reconstruction quality measures on grid-sampled fields.

use std::fmt::Write as _;

use thiserror::Error;

use crate::mesh::Point3;
use crate::recon::VolumeGrid;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("fields have {0} and {1} samples")]
    GridMismatch(usize, usize),
    #[error("segment end point {0:?} lies outside the sampling grid")]
    OutsideGrid(Point3),
    #[error("empty input")]
    Empty,
}

/// How each field is binarized before computing overlap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdPolicy {
    /// Fraction of the field's own maximum (0.5 = half max).
    RelativeToMax(f64),
    Fixed(f64),
    Otsu,
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::RelativeToMax(0.5)
    }
}

impl ThresholdPolicy {
    pub fn name(&self) -> String {
        match self {
            ThresholdPolicy::RelativeToMax(f) => format!("relative_max:{f}"),
            ThresholdPolicy::Fixed(v) => format!("fixed:{v}"),
            ThresholdPolicy::Otsu => "otsu".into(),
        }
    }

    /// Threshold for `values`; `None` means the binarized set is empty.
    pub fn threshold(&self, values: &[f64]) -> Option<f64> {
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        match *self {
            ThresholdPolicy::RelativeToMax(f) => (max > 0.0).then_some(f * max),
            ThresholdPolicy::Fixed(v) => Some(v),
            ThresholdPolicy::Otsu => (max > 0.0).then(|| otsu(values)),
        }
    }
}

/// Otsu threshold over a 256-bin histogram between min and max.
fn otsu(values: &[f64]) -> f64 {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return hi;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_k) = (0.0, 0.0, -1.0, 0);
    for (k, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (sum0 / w0 - (sum_all - sum0) / w1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    lo + (best_k + 1) as f64 * width
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiceResult {
    pub dice: f64,
    pub policy: ThresholdPolicy,
    pub threshold_a: Option<f64>,
    pub threshold_b: Option<f64>,
    pub count_a: usize,
    pub count_b: usize,
    pub intersection: usize,
}

fn binarize(values: &[f64], t: Option<f64>, mask: Option<&[bool]>) -> Vec<bool> {
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| t.is_some_and(|t| v >= t) && mask.is_none_or(|m| m[i]))
        .collect()
}

/// Dice overlap 2|A∩B|/(|A|+|B|) of the binarized fields; two empty sets
/// score 1 and exactly one empty set scores 0. `mask` restricts the samples
/// considered (e.g. to the phantom domain).
pub fn dice(a: &[f64], b: &[f64], policy: ThresholdPolicy, mask: Option<&[bool]>) -> Result<DiceResult, MetricsError> {
    if a.len() != b.len() || mask.is_some_and(|m| m.len() != a.len()) {
        return Err(MetricsError::GridMismatch(a.len(), b.len()));
    }
    let restrict = |v: &[f64]| -> Vec<f64> {
        match mask {
            Some(m) => v.iter().zip(m).filter(|(_, &k)| k).map(|(&x, _)| x).collect(),
            None => v.to_vec(),
        }
    };
    let ta = policy.threshold(&restrict(a));
    let tb = policy.threshold(&restrict(b));
    let sa = binarize(a, ta, mask);
    let sb = binarize(b, tb, mask);
    let count_a = sa.iter().filter(|&&x| x).count();
    let count_b = sb.iter().filter(|&&x| x).count();
    let intersection = sa.iter().zip(&sb).filter(|(&x, &y)| x && y).count();
    let dice = match (count_a, count_b) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * intersection as f64 / (count_a + count_b) as f64,
    };
    Ok(DiceResult { dice, policy, threshold_a: ta, threshold_b: tb, count_a, count_b, intersection })
}

/// Trilinear interpolation of grid samples at `p`, or `None` outside the grid.
pub fn sample_trilinear(values: &[f64], grid: &VolumeGrid, p: Point3) -> Option<f64> {
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for k in 0..3 {
        let t = (p[k] - grid.origin[k]) / grid.spacing[k];
        let n = grid.dims[k];
        if !(t >= -1e-9 && t <= (n - 1) as f64 + 1e-9) {
            return None;
        }
        let t = t.clamp(0.0, (n - 1) as f64);
        let i = (t.floor() as usize).min(n.saturating_sub(2));
        base[k] = i;
        frac[k] = if n == 1 { 0.0 } else { t - i as f64 };
    }
    let mut v = 0.0;
    for corner in 0..8 {
        let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
        let mut w = 1.0;
        let mut idx = [0; 3];
        for k in 0..3 {
            let step = off[k].min(grid.dims[k] - 1);
            w *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
            idx[k] = base[k] + step;
        }
        if w != 0.0 {
            v += w * values[grid.index(idx[0], idx[1], idx[2])];
        }
    }
    Some(v)
}

/// `n` equally spaced samples from `start` to `end` (inclusive).
pub fn line_profile(values: &[f64], grid: &VolumeGrid, start: Point3, end: Point3, n: usize) -> Result<Vec<f64>, MetricsError> {
    if values.len() != grid.len() {
        return Err(MetricsError::GridMismatch(values.len(), grid.len()));
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    for p in [start, end] {
        sample_trilinear(values, grid, p).ok_or(MetricsError::OutsideGrid(p))?;
    }
    Ok((0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            let p = std::array::from_fn(|k| start[k] + t * (end[k] - start[k]));
            sample_trilinear(values, grid, p).expect("segment inside grid")
        })
        .collect())
}

/// Width of the region where a profile sampled at `step` spacing exceeds half
/// its maximum, using linear interpolation at the two crossings.
pub fn full_width_half_max(profile: &[f64], step: f64) -> Option<f64> {
    let (imax, &max) = profile.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
    if !(max > 0.0) {
        return None;
    }
    let half = 0.5 * max;
    let mut left = 0.0;
    let mut i = imax;
    while i > 0 && profile[i - 1] >= half {
        i -= 1;
    }
    if i > 0 {
        left = (i - 1) as f64 + (half - profile[i - 1]) / (profile[i] - profile[i - 1]);
    }
    let mut j = imax;
    while j + 1 < profile.len() && profile[j + 1] >= half {
        j += 1;
    }
    let right = if j + 1 < profile.len() {
        j as f64 + (profile[j] - half) / (profile[j] - profile[j + 1])
    } else {
        (profile.len() - 1) as f64
    };
    Some((right - left) * step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MuError {
    /// |μ̂ − μ*| / μ* · 100 per iteration.
    pub per_iteration: Vec<f64>,
    /// Mean over the last 10 % of iterations (at least one).
    pub final_window: f64,
}

pub fn mu_error(history: &[f64], truth: f64) -> Result<MuError, MetricsError> {
    if history.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_iteration: Vec<f64> = history.iter().map(|&m| (m - truth).abs() / truth * 100.0).collect();
    let w = (history.len() / 10).max(1);
    let tail = &per_iteration[per_iteration.len() - w..];
    let final_window = tail.iter().sum::<f64>() / w as f64;
    Ok(MuError { per_iteration, final_window })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub case: String,
    pub method: String,
    pub dice: f64,
    pub final_mu_a_err_pct: f64,
    pub final_mu_s_err_pct: f64,
}

pub fn report_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("case,method,dice,final_mu_a_err_pct,final_mu_s_err_pct\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6}", r.case, r.method, r.dice, r.final_mu_a_err_pct, r.final_mu_s_err_pct);
    }
    s
}
