//! Coordinate network for the fluorescence field: sinusoidal positional
//! encoding, a ReLU multilayer perceptron with one skip connection from the
//! encoding, and a softplus output. Forward and backward passes are written
//! out by hand over a flat parameter vector.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::{Point3, TetMesh};

#[derive(Debug, Error, PartialEq)]
pub enum InrError {
    #[error("invalid network configuration: {0}")]
    InvalidConfig(String),
    #[error("tape holds {tape} samples but {grad} output gradients were given")]
    BatchMismatch { tape: usize, grad: usize },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

/// Sinusoidal encoding of coordinates normalized to [−1, 1] per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncodingConfig {
    pub bands: usize,
    pub lo: Point3,
    pub hi: Point3,
}

impl EncodingConfig {
    pub fn new(bands: usize, lo: Point3, hi: Point3) -> Result<Self, InrError> {
        if bands == 0 || bands > 30 {
            return Err(InrError::InvalidConfig(format!("frequency bands must be in 1..=30, got {bands}")));
        }
        if (0..3).any(|k| !(hi[k] > lo[k]) || !lo[k].is_finite() || !hi[k].is_finite()) {
            return Err(InrError::InvalidConfig(format!("degenerate normalization box {lo:?}..{hi:?}")));
        }
        Ok(Self { bands, lo, hi })
    }

    /// Cube around the mesh bounding box, so every band has the same
    /// physical wavelength on all three axes.
    pub fn from_mesh(mesh: &TetMesh, bands: usize) -> Result<Self, InrError> {
        let (lo, hi) = mesh.bounding_box();
        let half = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max) / 2.0;
        let mid: Point3 = std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]));
        Self::new(bands, mid.map(|m| m - half), mid.map(|m| m + half))
    }

    /// Largest band count whose finest wavelength (box side / 2^(L−1)) still
    /// spans two mesh edges.
    pub fn nyquist_bands(mesh: &TetMesh, edge_len: f64) -> usize {
        let (lo, hi) = mesh.bounding_box();
        let side = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let ratio = side / (2.0 * edge_len);
        if ratio < 1.0 { 1 } else { 1 + ratio.log2().floor() as usize }
    }

    pub fn dim(&self) -> usize {
        6 * self.bands
    }

    pub fn normalize(&self, p: Point3) -> Point3 {
        let n = std::array::from_fn(|k| 2.0 * (p[k] - self.lo[k]) / (self.hi[k] - self.lo[k]) - 1.0);
        debug_assert!(n.iter().all(|v: &f64| v.abs() <= 1.0 + 1e-9), "coordinate {p:?} outside the encoding box");
        n
    }

    /// γ applied to already-normalized components, laid out (γ(x), γ(y), γ(z)).
    pub fn encode_normalized(&self, p: Point3, out: &mut [f64]) {
        let l = self.bands;
        for (k, &v) in p.iter().enumerate() {
            for b in 0..l {
                let arg = (1u64 << b) as f64 * std::f64::consts::PI * v;
                out[k * 2 * l + 2 * b] = arg.sin();
                out[k * 2 * l + 2 * b + 1] = arg.cos();
            }
        }
    }

    pub fn encode(&self, p: Point3) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.encode_normalized(self.normalize(p), &mut out);
        out
    }

    pub fn encode_batch(&self, coords: &[Point3]) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((coords.len(), d));
        for (row, &p) in out.rows_mut().into_iter().zip(coords) {
            let mut buf = vec![0.0; d];
            self.encode_normalized(self.normalize(p), &mut buf);
            row.into_slice().expect("row-major").copy_from_slice(&buf);
        }
        out
    }
}

/// Layer widths of the coordinate network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkShape {
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// 1-based hidden layer whose input is `[previous activation, encoding]`.
    pub skip_layer: Option<usize>,
    /// Width of the ReLU layer before the scalar head; 0 removes it.
    pub head_width: usize,
    /// Softplus output multiplier.
    pub output_scale: f64,
}

impl NetworkShape {
    /// 8 × 512 hidden, skip into layer 4, 128-unit layer, scalar head.
    pub fn full() -> Self {
        Self { hidden_layers: 8, hidden_width: 512, skip_layer: Some(4), head_width: 128, output_scale: 1.0 }
    }

    /// Same topology at reduced width for single-core runs.
    pub fn compact() -> Self {
        Self { hidden_layers: 8, hidden_width: 64, skip_layer: Some(4), head_width: 32, output_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<(), InrError> {
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(InrError::InvalidConfig("at least one hidden layer of positive width is required".into()));
        }
        if let Some(k) = self.skip_layer {
            if k < 2 || k > self.hidden_layers {
                return Err(InrError::InvalidConfig(format!("skip layer {k} must be in 2..={}", self.hidden_layers)));
            }
        }
        if !(self.output_scale > 0.0) {
            return Err(InrError::InvalidConfig("output scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Layer {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
    relu: bool,
    skip: bool,
}

fn plan_layers(d: usize, shape: &NetworkShape) -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut off = 0;
    let mut push = |fan_in: usize, fan_out: usize, relu: bool, skip: bool| {
        layers.push(Layer { w: off, b: off + fan_in * fan_out, fan_in, fan_out, relu, skip });
        off += fan_in * fan_out + fan_out;
    };
    let h = shape.hidden_width;
    for k in 1..=shape.hidden_layers {
        let skip = shape.skip_layer == Some(k);
        let fan_in = if k == 1 { d } else if skip { h + d } else { h };
        push(fan_in, h, true, skip);
    }
    let mut last = h;
    if shape.head_width > 0 {
        push(h, shape.head_width, true, false);
        last = shape.head_width;
    }
    push(last, 1, false, false);
    (layers, off)
}

/// Record of one forward pass: the input and pre-activation of every layer.
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralField {
    encoding: EncodingConfig,
    shape: NetworkShape,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

impl NeuralField {
    /// He-uniform weights, zero biases and a zero output layer, so the
    /// initial field is the constant `softplus(0) · output_scale`.
    pub fn new(encoding: EncodingConfig, shape: NetworkShape, seed: u64) -> Result<Self, InrError> {
        shape.validate()?;
        let (layers, count) = plan_layers(encoding.dim(), &shape);
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = layers.len() - 1;
        for layer in &layers[..last] {
            let bound = (6.0 / layer.fan_in as f64).sqrt();
            for w in &mut params[layer.w..layer.b] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self { encoding, shape, layers, params })
    }

    /// Sets the output bias so the (still constant) field starts at `level`.
    pub fn set_initial_level(&mut self, level: f64) -> Result<(), InrError> {
        let t = level / self.shape.output_scale;
        if !(t > 0.0 && t.is_finite()) {
            return Err(InrError::InvalidConfig(format!("initial level {level} must be positive")));
        }
        // softplus^-1(t) = ln(e^t - 1), written to stay finite for tiny and large t
        let bias = if t > 30.0 { t } else { t.exp_m1().ln() };
        let out = self.layers.last().expect("output layer");
        self.params[out.b] = bias;
        Ok(())
    }

    pub fn encoding(&self) -> &EncodingConfig {
        &self.encoding
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Input widths of every layer, in order.
    pub fn layer_inputs(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.fan_in).collect()
    }

    /// Flat offsets `(weights, biases)` of layer `k`; weights are stored
    /// row-major as `fan_in × fan_out`.
    pub fn layer_offsets(&self, k: usize) -> (usize, usize) {
        (self.layers[k].w, self.layers[k].b)
    }

    fn weights(&self, l: &Layer) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((l.fan_in, l.fan_out), &self.params[l.w..l.b]).expect("layer shape")
    }

    /// Evaluates the field on already-encoded inputs (batch × 6L).
    pub fn forward_encoded(&self, x: &Array2<f64>) -> (Array1<f64>, Tape) {
        assert_eq!(x.ncols(), self.encoding.dim(), "encoded width");
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let input = if l.skip { concatenate![Axis(1), h, x.view()] } else { h };
            let bias = ndarray::ArrayView1::from(&self.params[l.b..l.b + l.fan_out]);
            let z = input.dot(&self.weights(l)) + &bias;
            h = if l.relu { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            inputs.push(input);
            pre.push(z);
        }
        let scale = self.shape.output_scale;
        let values = h.column(0).mapv(|z| scale * softplus(z));
        (values, Tape { inputs, pre })
    }

    pub fn forward(&self, coords: &[Point3]) -> (Array1<f64>, Tape) {
        self.forward_encoded(&self.encoding.encode_batch(coords))
    }

    pub fn evaluate(&self, coords: &[Point3]) -> Vec<f64> {
        self.forward(coords).0.to_vec()
    }

    /// Gradient of Σᵢ gᵢ·valueᵢ with respect to every parameter.
    pub fn backward(&self, tape: &Tape, d_values: &[f64]) -> Result<Vec<f64>, InrError> {
        let n = tape.batch_size();
        if d_values.len() != n || tape.inputs.len() != self.layers.len() {
            return Err(InrError::BatchMismatch { tape: n, grad: d_values.len() });
        }
        let mut grads = vec![0.0; self.params.len()];
        let scale = self.shape.output_scale;
        let z_out = tape.pre.last().expect("output layer");
        let mut g = Array2::from_shape_fn((n, 1), |(i, _)| d_values[i] * scale * sigmoid(z_out[[i, 0]]));
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let input = &tape.inputs[k];
            let dw = input.t().dot(&g);
            grads[l.w..l.b].copy_from_slice(dw.as_standard_layout().as_slice().expect("contiguous"));
            for (dst, v) in grads[l.b..l.b + l.fan_out].iter_mut().zip(g.sum_axis(Axis(0))) {
                *dst = v;
            }
            if k == 0 {
                break;
            }
            let mut d_in = g.dot(&self.weights(l).t());
            if l.skip {
                let width = self.layers[k - 1].fan_out;
                d_in = d_in.slice(s![.., ..width]).to_owned();
            }
            let prev = &tape.pre[k - 1];
            d_in.zip_mut_with(prev, |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            g = d_in;
        }
        Ok(grads)
    }

    pub fn to_text(&self) -> String {
        let e = &self.encoding;
        let sh = &self.shape;
        let mut s = String::from("neural-field v1\n");
        let _ = writeln!(s, "bands {}", e.bands);
        let _ = writeln!(s, "box {:e} {:e} {:e} {:e} {:e} {:e}", e.lo[0], e.lo[1], e.lo[2], e.hi[0], e.hi[1], e.hi[2]);
        let _ = writeln!(
            s,
            "shape {} {} {} {} {:e}",
            sh.hidden_layers,
            sh.hidden_width,
            sh.skip_layer.unwrap_or(0),
            sh.head_width,
            sh.output_scale
        );
        let _ = writeln!(s, "params {}", self.params.len());
        for p in &self.params {
            let _ = writeln!(s, "{p:e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, InrError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| -> Result<(usize, Vec<String>), InrError> {
            let (ln, l) = lines.next().ok_or_else(|| InrError::Parse { line: 0, msg: format!("missing {what}") })?;
            Ok((ln, l.split_whitespace().map(str::to_string).collect()))
        };
        let (ln, head) = next("header")?;
        if head != ["neural-field", "v1"] {
            return Err(InrError::Parse { line: ln, msg: "expected `neural-field v1`".into() });
        }
        fn nums<T: std::str::FromStr>(ln: usize, toks: &[String], key: &str, n: usize) -> Result<Vec<T>, InrError> {
            if toks.len() != n + 1 || toks[0] != key {
                return Err(InrError::Parse { line: ln, msg: format!("expected `{key}` with {n} values") });
            }
            toks[1..]
                .iter()
                .map(|t| t.parse().map_err(|_| InrError::Parse { line: ln, msg: format!("cannot parse `{t}`") }))
                .collect()
        }
        let (ln, t) = next("bands")?;
        let bands = nums::<usize>(ln, &t, "bands", 1)?[0];
        let (ln, t) = next("box")?;
        let b = nums::<f64>(ln, &t, "box", 6)?;
        let (ln, t) = next("shape")?;
        let sh = nums::<f64>(ln, &t, "shape", 5)?;
        let shape = NetworkShape {
            hidden_layers: sh[0] as usize,
            hidden_width: sh[1] as usize,
            skip_layer: (sh[2] != 0.0).then_some(sh[2] as usize),
            head_width: sh[3] as usize,
            output_scale: sh[4],
        };
        let encoding = EncodingConfig::new(bands, [b[0], b[1], b[2]], [b[3], b[4], b[5]])?;
        let mut field = Self::new(encoding, shape, 0)?;
        let (ln, t) = next("params")?;
        let count = nums::<usize>(ln, &t, "params", 1)?[0];
        if count != field.params.len() {
            return Err(InrError::Parse { line: ln, msg: format!("expected {} parameters, found {count}", field.params.len()) });
        }
        for p in field.params.iter_mut() {
            let (ln, t) = next("parameter")?;
            *p = nums::<f64>(ln, &[String::from("p")].into_iter().chain(t).collect::<Vec<_>>(), "p", 1)?[0];
        }
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<(), InrError> {
        fs::write(path, self.to_text()).map_err(|e| InrError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, InrError> {
        let text = fs::read_to_string(path).map_err(|e| InrError::Io(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-14 }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    #[test]
    fn mesh_box_is_a_cube_and_bands_follow_the_edge() {
        let mesh = crate::mesh::generate_slab_mesh([40.0, 20.0, 10.0], 2.5).unwrap();
        let e = EncodingConfig::from_mesh(&mesh, 3).unwrap();
        assert_eq!(e.lo, [0.0, -10.0, -15.0]);
        assert_eq!(e.hi, [40.0, 30.0, 25.0]);
        // 40 / (2 · 2.5) = 8 → finest band 40 / 2^3 = 5 mm
        assert_eq!(EncodingConfig::nyquist_bands(&mesh, 2.5), 4);
        assert_eq!(EncodingConfig::nyquist_bands(&mesh, 2.6), 3);
        assert_eq!(EncodingConfig::nyquist_bands(&mesh, 30.0), 1);
    }

    fn unit_box(bands: usize) -> EncodingConfig {
        EncodingConfig::new(bands, [-1.0; 3], [1.0; 3]).unwrap()
    }

    fn small_shape() -> NetworkShape {
        NetworkShape { hidden_layers: 4, hidden_width: 6, skip_layer: Some(3), head_width: 5, output_scale: 1.3 }
    }

    fn randomized(seed: u64) -> NeuralField {
        let mut f = NeuralField::new(EncodingConfig::new(2, [0.0; 3], [10.0, 8.0, 4.0]).unwrap(), small_shape(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in f.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        f
    }

    fn coords() -> Vec<Point3> {
        vec![[1.0, 2.0, 0.5], [9.0, 7.5, 3.5], [5.0, 4.0, 2.0], [0.2, 6.1, 1.7], [8.8, 0.3, 3.9]]
    }

    #[test]
    fn encoding_values() {
        let e = unit_box(2);
        let g = e.encode([0.0, 0.0, 0.0]);
        assert_eq!(&g[..4], &[0.0, 1.0, 0.0, 1.0]);
        let g = e.encode([0.5, 0.0, 0.0]);
        let want = [1.0, 0.0, 0.0, -1.0];
        assert!(g[..4].iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        for l in [1, 4, 10] {
            assert_eq!(unit_box(l).encode([0.1, 0.2, 0.3]).len(), 6 * l);
        }
        let boxed = EncodingConfig::new(1, [0.0; 3], [10.0, 20.0, 4.0]).unwrap();
        assert_eq!(boxed.normalize([5.0, 20.0, 0.0]), [0.0, 1.0, -1.0]);
        assert!(EncodingConfig::new(0, [0.0; 3], [1.0; 3]).is_err());
        assert!(EncodingConfig::new(2, [0.0; 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn layer_widths() {
        let f = NeuralField::new(unit_box(6), NetworkShape::full(), 1).unwrap();
        let w = f.layer_inputs();
        assert_eq!(w, vec![36, 512, 512, 512 + 36, 512, 512, 512, 512, 512, 128]);
        assert_eq!(f.num_params(), 36 * 512 + 512 + 6 * (512 * 512 + 512) + (548 * 512 + 512) + 512 * 128 + 128 + 129);
    }

    #[test]
    fn zero_output_layer_gives_constant_field() {
        let f = NeuralField::new(unit_box(3), NetworkShape { output_scale: 2.0, ..NetworkShape::compact() }, 5).unwrap();
        let v = f.evaluate(&[[0.1, 0.2, 0.3], [-0.9, 0.9, 0.0]]);
        assert!(v.iter().all(|&x| (x - 2.0 * std::f64::consts::LN_2).abs() < 1e-15));
    }

    #[test]
    fn duplicated_coordinates_duplicate_outputs() {
        let f = randomized(3);
        let v = f.evaluate(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn skip_path_is_live() {
        let mut f = randomized(4);
        let before = f.evaluate(&coords());
        let (w, _) = f.layer_offsets(2);
        // last input row of the skip layer belongs to the encoding block
        let fan_out = small_shape().hidden_width;
        let row = f.layer_inputs()[2] - 1;
        f.params_mut()[w + row * fan_out] += 0.5;
        let after = f.evaluate(&coords());
        assert!(before.iter().zip(&after).any(|(a, b)| a != b));
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let f = randomized(6);
        let (_, tape) = f.forward(&coords());
        assert!(f.backward(&tape, &[0.0; 5]).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(f.backward(&tape, &[0.0; 4]), Err(InrError::BatchMismatch { tape: 5, grad: 4 }));
    }

    fn weighted_output(f: &NeuralField, w: &[f64]) -> f64 {
        f.evaluate(&coords()).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let f = randomized(7);
        let w = [0.3, -1.2, 0.7, 2.0, -0.4];
        let (_, tape) = f.forward(&coords());
        let g = f.backward(&tape, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 20 {
            let i = rng.random_range(0..f.num_params());
            let h = 1e-6;
            let mut fp = f.clone();
            fp.params_mut()[i] += h;
            let mut fm = f.clone();
            fm.params_mut()[i] -= h;
            let fd = (weighted_output(&fp, &w) - weighted_output(&fm, &w)) / (2.0 * h);
            if fd.abs() < 1e-6 {
                // dead ReLU unit: both sides must agree on zero
                assert!(g[i].abs() < 1e-8, "param {i}: fd {fd}, analytic {}", g[i]);
                continue;
            }
            assert!(((fd - g[i]) / fd).abs() < 1e-4, "param {i}: fd {fd}, analytic {}", g[i]);
            checked += 1;
        }
    }

    #[test]
    fn gradient_is_additive_over_batch_splits() {
        let f = randomized(8);
        let c = coords();
        let w = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (_, tape) = f.forward(&c);
        let full = f.backward(&tape, &w).unwrap();
        let (_, ta) = f.forward(&c[..2]);
        let (_, tb) = f.forward(&c[2..]);
        let a = f.backward(&ta, &w[..2]).unwrap();
        let b = f.backward(&tb, &w[2..]).unwrap();
        for i in 0..full.len() {
            assert!((full[i] - a[i] - b[i]).abs() <= 1e-12 * full[i].abs().max(1.0));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let f = randomized(9);
        let back = NeuralField::from_text(&f.to_text()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.evaluate(&coords()), f.evaluate(&coords()));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("field.ckpt");
        f.save(&p).unwrap();
        assert_eq!(NeuralField::load(&p).unwrap(), f);
        let broken = f.to_text().replacen("params", "parms", 1);
        assert!(matches!(NeuralField::from_text(&broken), Err(InrError::Parse { line: 5, .. })));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[1.0, 1.0], &mut st, 0.01);
        assert!((p[0] - (1.0 - 0.01 / (1.0 + 1e-14))).abs() < 1e-15);
        let mut q = vec![3.0, 4.0];
        let mut st = AdamState::new(2);
        for _ in 0..10 {
            adam_step(&mut q, &[0.0, 0.0], &mut st, 0.1);
        }
        assert_eq!(q, vec![3.0, 4.0]);
    }

    #[test]
    fn adam_matches_scalar_reference() {
        // textbook scalar recursion with explicit power accumulators
        let mut p = vec![0.5, -1.5, 2.0];
        let mut st = AdamState::new(3);
        let mut r = [0.5f64, -1.5, 2.0];
        let (mut m, mut v) = ([0.0f64; 3], [0.0f64; 3]);
        let (mut b1t, mut b2t) = (1.0f64, 1.0f64);
        for k in 0..100 {
            let g: Vec<f64> = (0..3).map(|i| ((k * 3 + i) as f64 * 0.37).sin() + 0.1 * p[i]).collect();
            adam_step(&mut p, &g, &mut st, 1e-2);
            b1t *= 0.9;
            b2t *= 0.999;
            for i in 0..3 {
                let gi = ((k * 3 + i) as f64 * 0.37).sin() + 0.1 * r[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                r[i] -= 1e-2 * (m[i] / (1.0 - b1t)) / ((v[i] / (1.0 - b2t)).sqrt() + 1e-14);
            }
        }
        for i in 0..3 {
            assert!(((p[i] - r[i]) / r[i]).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn output_is_non_negative(seed in 0u64..1000, x in 0.0f64..10.0, y in 0.0f64..8.0, z in 0.0f64..4.0) {
            let mut f = randomized(seed);
            for p in f.params_mut() {
                *p *= 3.0;
            }
            prop_assert!(f.evaluate(&[[x, y, z]])[0] >= 0.0);
        }

        #[test]
        fn directional_derivative_matches(seed in 0u64..1000) {
            let f = randomized(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let mut u: Vec<f64> = (0..f.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            u.iter_mut().for_each(|v| *v /= norm);
            let w = [1.0, -0.5, 0.25, 2.0, 0.1];
            let (_, tape) = f.forward(&coords());
            let g = f.backward(&tape, &w).unwrap();
            let analytic: f64 = g.iter().zip(&u).map(|(a, b)| a * b).sum();
            let h = 1e-5;
            let shift = |sgn: f64| {
                let mut ff = f.clone();
                ff.params_mut().iter_mut().zip(&u).for_each(|(p, d)| *p += sgn * h * d);
                weighted_output(&ff, &w)
            };
            let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
            prop_assert!((fd - analytic).abs() <= 1e-4 * fd.abs().max(1e-3), "fd {} analytic {}", fd, analytic);
        }
    }
}
