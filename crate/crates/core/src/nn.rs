//! Minimal multilayer perceptron over a flat parameter vector.
//!
//! # Parameter layout
//!
//! Parameters are stored layer by layer. For a layer mapping `fan_in` inputs
//! to `fan_out` outputs the block is
//!
//! ```text
//! [ W (fan_out x fan_in, row-major: W[o * fan_in + i]) | b (fan_out) ]
//! ```
//!
//! so the first layer starts at index 0 and the output layer occupies the
//! tail of the vector. Knowledge entries and the global/local partition are
//! expressed as indices into this layout, which therefore never changes.
//!
//! Hidden layers use the shape's activation; the output layer is a softmax.
//! Losses are mean cross-entropies over the batch with the log argument
//! clamped at [`LOG_CLAMP`].

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Offsets of one dense layer inside a [`ParamVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpan {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_start: usize,
    pub bias_start: usize,
}

impl LayerSpan {
    pub fn end(&self) -> usize {
        self.bias_start + self.fan_out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

impl MlpShape {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let shape = MlpShape { layer_sizes, activation };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least an input and an output size, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::config(format!("layer sizes must be >= 1, got {:?}", self.layer_sizes)));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated shape")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn spans(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let span =
                    LayerSpan { fan_in: w[0], fan_out: w[1], weight_start: offset, bias_start: offset + w[0] * w[1] };
                offset = span.end();
                span
            })
            .collect()
    }

    /// Index range of the output layer (weights and bias).
    pub fn head_range(&self) -> std::ops::Range<usize> {
        let last = *self.spans().last().expect("validated shape");
        last.weight_start..last.end()
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init_params(&self, rng: &mut StreamRng) -> ParamVector {
        let mut values = vec![0.0; self.param_count()];
        for span in self.spans() {
            let limit = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
            for w in &mut values[span.weight_start..span.bias_start] {
                *w = rng.random_range(-limit..limit);
            }
        }
        ParamVector(values)
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector(vec![0.0; self.param_count()])
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::dim(format!(
                "parameter vector has {} entries, shape {:?} needs {}",
                params.len(),
                self.layer_sizes,
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::dim(format!(
                "inputs have {} columns, model expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }
}

/// Flat, ordered view of all model weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(self, other)
    }

    pub fn norm_sq(&self) -> f64 {
        dot(self, self)
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// `self -= step * direction`
    pub fn descend(&mut self, step: f64, direction: &[f64]) {
        for (p, d) in self.iter_mut().zip(direction) {
            *p -= step * d;
        }
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        ParamVector(v)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!("matrix data has {} values, expected {rows}x{cols}", data.len())));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dim("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: idx.len(), cols: self.cols, data }
    }
}

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!("{} input rows but {} labels", inputs.rows(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::dim("empty batch"));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch { inputs: self.inputs.select_rows(idx), labels: idx.iter().map(|&i| self.labels[i]).collect() }
    }

    /// Concatenation of two batches with the same input width.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        if self.inputs.cols() != other.inputs.cols() {
            return Err(Error::dim("cannot concatenate batches of different widths"));
        }
        let mut data = self.inputs.as_slice().to_vec();
        data.extend_from_slice(other.inputs.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Batch::new(Matrix::new(labels.len(), self.inputs.cols(), data)?, labels)
    }

    fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&y| y >= classes) {
            Some(y) => Err(Error::dim(format!("label {y} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }
}

/// Row-wise probability distributions over classes (softmax outputs or soft targets).
#[derive(Debug, Clone, PartialEq)]
pub struct LogitTargets {
    pub probabilities: Matrix,
}

impl LogitTargets {
    pub fn one_hot(labels: &[usize], classes: usize) -> Self {
        let mut m = Matrix::zeros(labels.len(), classes);
        for (i, &y) in labels.iter().enumerate() {
            m.row_mut(i)[y] = 1.0;
        }
        LogitTargets { probabilities: m }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.probabilities.row(i)
    }

    pub fn rows(&self) -> usize {
        self.probabilities.rows()
    }
}

/// Per-layer pre-activations and activations retained for backprop.
struct Trace {
    /// `pre[l]` is the pre-activation of layer `l` (n x fan_out).
    pre: Vec<Matrix>,
    /// `post[0]` is the input; `post[l + 1]` is layer `l`'s output.
    post: Vec<Matrix>,
}

fn forward_trace(shape: &MlpShape, params: &[f64], inputs: &Matrix) -> Trace {
    let spans = shape.spans();
    let n = inputs.rows();
    let mut pre = Vec::with_capacity(spans.len());
    let mut post = Vec::with_capacity(spans.len() + 1);
    post.push(inputs.clone());
    for (l, span) in spans.iter().enumerate() {
        let w = &params[span.weight_start..span.bias_start];
        let b = &params[span.bias_start..span.end()];
        let input = &post[l];
        let mut z = Matrix::zeros(n, span.fan_out);
        for r in 0..n {
            let x = input.row(r);
            let zr = z.row_mut(r);
            for (o, zo) in zr.iter_mut().enumerate() {
                *zo = b[o] + dot(&w[o * span.fan_in..(o + 1) * span.fan_in], x);
            }
        }
        let is_output = l + 1 == spans.len();
        let mut a = z.clone();
        if is_output {
            for r in 0..n {
                softmax_in_place(a.row_mut(r));
            }
        } else {
            let act = shape.activation();
            a.data.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax class probabilities for each input row.
pub fn forward(shape: &MlpShape, params: &ParamVector, inputs: &Matrix) -> Result<LogitTargets> {
    shape.check_params(params)?;
    shape.check_inputs(inputs)?;
    let mut trace = forward_trace(shape, params, inputs);
    Ok(LogitTargets { probabilities: trace.post.pop().expect("at least one layer") })
}

/// Mean negative log-likelihood of the true labels.
pub fn loss_hard(shape: &MlpShape, params: &ParamVector, batch: &Batch) -> Result<f64> {
    batch.check_labels(shape.num_classes())?;
    let probs = forward(shape, params, &batch.inputs)?;
    let total: f64 = batch.labels.iter().enumerate().map(|(i, &y)| -probs.row(i)[y].max(LOG_CLAMP).ln()).sum();
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy `-sum q log p` against soft targets `q`.
pub fn loss_soft(shape: &MlpShape, params: &ParamVector, inputs: &Matrix, targets: &LogitTargets) -> Result<f64> {
    check_targets(shape, inputs, targets)?;
    let probs = forward(shape, params, inputs)?;
    let mut total = 0.0;
    for i in 0..inputs.rows() {
        total -= targets.row(i).iter().zip(probs.row(i)).map(|(q, p)| q * p.max(LOG_CLAMP).ln()).sum::<f64>();
    }
    Ok(total / inputs.rows() as f64)
}

fn check_targets(shape: &MlpShape, inputs: &Matrix, targets: &LogitTargets) -> Result<()> {
    if targets.rows() != inputs.rows() || targets.probabilities.cols() != shape.num_classes() {
        return Err(Error::dim(format!(
            "targets are {}x{}, expected {}x{}",
            targets.rows(),
            targets.probabilities.cols(),
            inputs.rows(),
            shape.num_classes()
        )));
    }
    if inputs.rows() == 0 {
        return Err(Error::dim("empty batch"));
    }
    Ok(())
}

/// Backprop gradient of [`loss_hard`].
///
/// Computed as the soft-target gradient against one-hot targets, so both
/// entry points share a single code path and agree bitwise.
pub fn grad_hard(shape: &MlpShape, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    batch.check_labels(shape.num_classes())?;
    let targets = LogitTargets::one_hot(&batch.labels, shape.num_classes());
    grad_soft(shape, params, &batch.inputs, &targets)
}

/// Backprop gradient of [`loss_soft`] with the targets held constant.
pub fn grad_soft(
    shape: &MlpShape,
    params: &ParamVector,
    inputs: &Matrix,
    targets: &LogitTargets,
) -> Result<ParamVector> {
    shape.check_params(params)?;
    shape.check_inputs(inputs)?;
    check_targets(shape, inputs, targets)?;

    let spans = shape.spans();
    let n = inputs.rows();
    let scale = 1.0 / n as f64;
    let trace = forward_trace(shape, params, inputs);
    let mut grad = vec![0.0; params.len()];

    // Output residual (p - q) / n.
    let out = trace.post.last().expect("output layer");
    let mut delta = Matrix::zeros(n, shape.num_classes());
    for r in 0..n {
        for (c, d) in delta.row_mut(r).iter_mut().enumerate() {
            *d = (out.row(r)[c] - targets.row(r)[c]) * scale;
        }
    }

    for l in (0..spans.len()).rev() {
        let span = spans[l];
        let input = &trace.post[l];
        let (gw, rest) = grad[span.weight_start..span.end()].split_at_mut(span.fan_in * span.fan_out);
        for r in 0..n {
            let x = input.row(r);
            for (o, &d) in delta.row(r).iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                rest[o] += d;
                for (g, xi) in gw[o * span.fan_in..(o + 1) * span.fan_in].iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate to the previous layer's pre-activation.
        let w = &params[span.weight_start..span.bias_start];
        let act = shape.activation();
        let z_prev = &trace.pre[l - 1];
        let mut prev = Matrix::zeros(n, span.fan_in);
        for r in 0..n {
            let pr = prev.row_mut(r);
            for (o, &d) in delta.row(r).iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in pr.iter_mut().zip(&w[o * span.fan_in..(o + 1) * span.fan_in]) {
                    *p += d * wi;
                }
            }
            let z = z_prev.row(r);
            let a = input.row(r);
            for (i, p) in pr.iter_mut().enumerate() {
                *p *= act.derivative(z[i], a[i]);
            }
        }
        delta = prev;
    }
    Ok(ParamVector(grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy.
pub fn accuracy(shape: &MlpShape, params: &ParamVector, batch: &Batch) -> Result<f64> {
    let probs = forward(shape, params, &batch.inputs)?;
    let correct = batch.labels.iter().enumerate().filter(|(i, &y)| argmax(probs.row(*i)) == y).count();
    Ok(correct as f64 / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, StreamKey};

    fn shape(sizes: &[usize]) -> MlpShape {
        MlpShape::new(sizes.to_vec(), Activation::Relu).unwrap()
    }

    #[test]
    fn param_counts() {
        assert_eq!(shape(&[2, 3, 2]).param_count(), 17);
        assert_eq!(shape(&[4, 4]).param_count(), 20);
        // 10*20+20 + 20*20+20 + 20*5+5
        assert_eq!(shape(&[10, 20, 20, 5]).param_count(), 220 + 420 + 105);
        assert_eq!(shape(&[10, 20, 20, 5]).param_count(), 745);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(MlpShape::new(vec![3], Activation::Relu).is_err());
        assert!(MlpShape::new(vec![3, 0, 2], Activation::Relu).is_err());
    }

    #[test]
    fn spans_tile_the_vector() {
        let s = shape(&[3, 4, 2]);
        let spans = s.spans();
        assert_eq!(spans[0].weight_start, 0);
        assert_eq!(spans[0].bias_start, 12);
        assert_eq!(spans[1].weight_start, 16);
        assert_eq!(spans[1].end(), s.param_count());
        assert_eq!(s.head_range(), 16..26);
    }

    #[test]
    fn zero_params_give_uniform_rows() {
        let s = shape(&[3, 5, 4]);
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, 9.0]]).unwrap();
        let p = forward(&s, &s.zeros(), &x).unwrap();
        for r in 0..2 {
            for &v in p.row(r) {
                assert!((v - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn large_logit_wins() {
        let s = shape(&[2, 3]);
        let mut params = s.zeros();
        // bias of class 2
        params[6 + 2] = 50.0;
        let x = Matrix::from_rows(&[vec![0.3, 0.1]]).unwrap();
        let p = forward(&s, &params, &x).unwrap();
        assert_eq!(argmax(p.row(0)), 2);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = shape(&[3, 2]);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(forward(&s, &s.zeros(), &x), Err(Error::Dimension(_))));
        let bad = ParamVector::zeros(3);
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        assert!(forward(&s, &bad, &x).is_err());
    }

    #[test]
    fn uniform_loss_is_log_classes() {
        let s = shape(&[2, 4]);
        let batch = Batch::new(Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap(), vec![0, 3]).unwrap();
        let loss = loss_hard(&s, &s.zeros(), &batch).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_model_has_zero_loss() {
        let s = shape(&[1, 2]);
        // W = 0, bias pushes class 1 to probability 1 within double precision.
        let params = ParamVector(vec![0.0, 0.0, -400.0, 400.0]);
        let batch = Batch::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![1]).unwrap();
        assert_eq!(loss_hard(&s, &params, &batch).unwrap(), 0.0);
        assert!(grad_hard(&s, &params, &batch).unwrap().norm_sq().sqrt() < 1e-8);
        // The clamp keeps confident mistakes finite.
        let wrong = Batch::new(Matrix::from_rows(&[vec![1.0]]).unwrap(), vec![0]).unwrap();
        let l = loss_hard(&s, &params, &wrong).unwrap();
        assert!((l - (-LOG_CLAMP.ln())).abs() < 1e-9);
    }

    #[test]
    fn one_hot_soft_loss_and_gradient_match_hard() {
        let s = MlpShape::new(vec![3, 4, 3], Activation::Tanh).unwrap();
        let mut rng = StreamKey::new(11, Purpose::Init).rng();
        let params = s.init_params(&mut rng);
        let batch = Batch::new(
            Matrix::from_rows(&[vec![0.1, -0.4, 0.9], vec![1.2, 0.3, -0.7], vec![-0.5, 0.5, 0.2]]).unwrap(),
            vec![2, 0, 1],
        )
        .unwrap();
        let q = LogitTargets::one_hot(&batch.labels, 3);
        let lh = loss_hard(&s, &params, &batch).unwrap();
        let ls = loss_soft(&s, &params, &batch.inputs, &q).unwrap();
        assert!((lh - ls).abs() < 1e-15);
        let gh = grad_hard(&s, &params, &batch).unwrap();
        let gs = grad_soft(&s, &params, &batch.inputs, &q).unwrap();
        assert_eq!(gh, gs);
    }

    #[test]
    fn own_outputs_as_targets_give_zero_gradient() {
        let s = shape(&[4, 6, 3]);
        let mut rng = StreamKey::new(3, Purpose::Init).rng();
        let params = s.init_params(&mut rng);
        let x = Matrix::from_rows(&[vec![0.2, 0.1, -1.0, 0.4], vec![-0.3, 0.8, 0.0, 1.5]]).unwrap();
        let q = forward(&s, &params, &x).unwrap();
        let g = grad_soft(&s, &params, &x, &q).unwrap();
        assert!(g.norm_sq().sqrt() <= 1e-10);
        // CE(q, q) = H(q)
        let h: f64 = (0..2).map(|r| -q.row(r).iter().map(|p| p * p.ln()).sum::<f64>()).sum::<f64>() / 2.0;
        assert!((loss_soft(&s, &params, &x, &q).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let s = shape(&[2, 5, 3]);
        let mut rng = StreamKey::new(5, Purpose::Init).rng();
        let params = s.init_params(&mut rng);
        let batch = Batch::new(Matrix::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap(), vec![1, 2]).unwrap();
        let doubled = batch.concat(&batch).unwrap();
        let a = grad_hard(&s, &params, &batch).unwrap();
        let b = grad_hard(&s, &params, &doubled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
    }

    #[test]
    fn zero_model_accuracy_is_class_zero_fraction() {
        let s = shape(&[1, 4]);
        let rows: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let batch = Batch::new(Matrix::from_rows(&rows).unwrap(), vec![0, 1, 2, 3, 0, 1, 2, 0]).unwrap();
        assert_eq!(accuracy(&s, &s.zeros(), &batch).unwrap(), 3.0 / 8.0);
    }

    #[test]
    fn init_respects_glorot_limits() {
        let s = shape(&[16, 32, 4]);
        let mut rng = StreamKey::new(1, Purpose::Init).rng();
        let p = s.init_params(&mut rng);
        for span in s.spans() {
            let limit = (6.0 / (span.fan_in + span.fan_out) as f64).sqrt();
            assert!(p[span.weight_start..span.bias_start].iter().all(|w| w.abs() <= limit));
            assert!(p[span.bias_start..span.end()].iter().all(|&b| b == 0.0));
        }
    }
}
