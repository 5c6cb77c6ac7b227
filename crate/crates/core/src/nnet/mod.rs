//! Fixed-structure dense networks in 64-bit arithmetic.
//!
//! A [`DenseNet`] stores every parameter in one flat buffer (per layer:
//! row-major `outputs x inputs` weights followed by `outputs` biases).
//! Gradients and optimizer directions reuse the same type, so parameter
//! algebra is plain slice arithmetic. Reverse mode ([`DenseNet::vjp`])
//! gives full-batch gradients; forward mode ([`DenseNet::jvp`]) gives
//! per-sample directional derivatives without materializing per-sample
//! gradients.

mod checkpoint;
mod eval;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub(crate) use eval::accuracy_from_predictions;
pub use eval::{argmax_rows, per_class_accuracy, predict, AccuracyVector};
pub use loss::{focal_loss, log_softmax_rows, softmax_rows, weighted_ce_loss, Loss};
pub use optim::{OptimizerKind, OptimizerState};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Guard for normalizing zero-norm vectors in the cosine head.
pub const NORM_EPS: f64 = 1e-12;

/// Initial bias of hidden ReLU layers. Keeps narrow nets fed with
/// non-negative inputs from starting with every unit inactive.
pub const HIDDEN_BIAS_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    /// Replaces the affine map: `scale * <x/|x|, w_c/|w_c|>` per output row.
    /// The layer's bias is stored but unused.
    Cosine { scale: f64 },
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Identity | Activation::Cosine { .. } => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Sigmoid => z.mapv_inplace(sigmoid),
        }
    }

    /// Multiplies `d` in place by the activation derivative, given the
    /// post-activation values `out`.
    fn chain(self, out: &Array2<f64>, d: &mut Array2<f64>) {
        match self {
            Activation::Identity | Activation::Cosine { .. } => {}
            Activation::Relu => d.zip_mut_with(out, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Sigmoid => d.zip_mut_with(out, |g, &s| *g *= s * (1.0 - s)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
}

impl LayerShape {
    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    shapes: Vec<LayerShape>,
    activations: Vec<Activation>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values of a forward pass, kept for [`DenseNet::vjp`].
#[derive(Debug, Clone)]
pub struct Trace {
    /// `layer_inputs[k]` feeds layer `k`.
    layer_inputs: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.outputs.last().expect("network has at least one layer")
    }

    /// Activations entering the final layer.
    pub fn features(&self) -> &Array2<f64> {
        self.layer_inputs.last().expect("network has at least one layer")
    }
}

impl DenseNet {
    /// All-zero network with layer widths `widths` (input first).
    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::invalid(format!(
                "{} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        if widths.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let shapes: Vec<LayerShape> = widths
            .windows(2)
            .map(|w| LayerShape {
                inputs: w[0],
                outputs: w[1],
            })
            .collect();
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for s in &shapes {
            offsets.push(total);
            total += s.len();
        }
        Ok(DenseNet {
            shapes,
            activations: activations.to_vec(),
            offsets,
            params: vec![0.0; total],
        })
    }

    /// ReLU hidden layers and the given output activation, weights drawn
    /// uniformly from `±1/sqrt(fan_in)`. Hidden biases start at
    /// [`HIDDEN_BIAS_INIT`], the output bias at zero.
    pub fn init(widths: &[usize], output: Activation, rng: &mut Rng) -> Result<Self> {
        let mut acts = vec![Activation::Relu; widths.len().saturating_sub(2)];
        acts.push(output);
        let mut net = Self::zeros(widths, &acts)?;
        for k in 0..net.num_layers() {
            net.reinit_layer(k, rng);
        }
        Ok(net)
    }

    /// Fresh fan-in uniform weights and the initial bias for layer `k`.
    pub fn reinit_layer(&mut self, k: usize, rng: &mut Rng) {
        let bound = 1.0 / (self.shapes[k].inputs as f64).sqrt();
        self.weights_mut(k)
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-bound..bound));
        let bias = if k + 1 < self.num_layers() { HIDDEN_BIAS_INIT } else { 0.0 };
        self.bias_mut(k).fill(bias);
    }

    pub fn from_layers(layers: Vec<(Array2<f64>, Array1<f64>, Activation)>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("network needs at least one layer"))?;
        let mut widths = vec![first.0.ncols()];
        let mut acts = Vec::new();
        for (k, (w, b, act)) in layers.iter().enumerate() {
            if w.ncols() != *widths.last().unwrap() || b.len() != w.nrows() {
                return Err(Error::shape(format!("layer {k} does not chain")));
            }
            widths.push(w.nrows());
            acts.push(*act);
        }
        let mut net = Self::zeros(&widths, &acts)?;
        for (k, (w, b, _)) in layers.into_iter().enumerate() {
            net.weights_mut(k).assign(&w);
            net.bias_mut(k).assign(&b);
        }
        Ok(net)
    }

    pub fn zeros_like(&self) -> Self {
        DenseNet {
            params: vec![0.0; self.params.len()],
            ..self.clone()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes.last().unwrap().outputs
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn set_activation(&mut self, k: usize, act: Activation) {
        self.activations[k] = act;
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Parameter range of layer `k` in the flat buffer.
    pub fn layer_range(&self, k: usize) -> std::ops::Range<usize> {
        self.offsets[k]..self.offsets[k] + self.shapes[k].len()
    }

    pub fn weights(&self, k: usize) -> ArrayView2<'_, f64> {
        let s = self.shapes[k];
        let start = self.offsets[k];
        ArrayView2::from_shape((s.outputs, s.inputs), &self.params[start..start + s.outputs * s.inputs])
            .expect("layout")
    }

    pub fn bias(&self, k: usize) -> ArrayView1<'_, f64> {
        let s = self.shapes[k];
        let start = self.offsets[k] + s.outputs * s.inputs;
        ArrayView1::from(&self.params[start..start + s.outputs])
    }

    pub fn weights_mut(&mut self, k: usize) -> ArrayViewMut2<'_, f64> {
        let s = self.shapes[k];
        let start = self.offsets[k];
        ArrayViewMut2::from_shape(
            (s.outputs, s.inputs),
            &mut self.params[start..start + s.outputs * s.inputs],
        )
        .expect("layout")
    }

    pub fn bias_mut(&mut self, k: usize) -> ArrayViewMut1<'_, f64> {
        let s = self.shapes[k];
        let start = self.offsets[k] + s.outputs * s.inputs;
        ArrayViewMut1::from(&mut self.params[start..start + s.outputs])
    }

    pub fn same_shape(&self, other: &DenseNet) -> bool {
        self.shapes == other.shapes
    }

    fn check_same_shape(&self, other: &DenseNet) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape("parameter layouts differ"))
        }
    }

    /// Inner product of the flat parameter vectors.
    pub fn dot(&self, other: &DenseNet) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(self.params.iter().zip(&other.params).map(|(a, b)| a * b).sum())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DenseNet) -> Result<()> {
        self.check_same_shape(other)?;
        self.params
            .iter_mut()
            .zip(&other.params)
            .for_each(|(p, g)| *p += alpha * g);
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.params.iter_mut().for_each(|p| *p *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.params.iter().map(|p| p * p).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    fn check_input(&self, inputs: &ArrayView2<'_, f64>) -> Result<()> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(format!(
                "input width {} but network expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn layer_forward(&self, k: usize, a: &ArrayView2<'_, f64>) -> Array2<f64> {
        let w = self.weights(k);
        let act = self.activations[k];
        let mut z = match act {
            Activation::Cosine { scale } => {
                let a_hat = normalize_rows(a);
                let w_hat = normalize_rows(&w);
                let mut z = a_hat.dot(&w_hat.t());
                z *= scale;
                z
            }
            _ => a.dot(&w.t()) + self.bias(k),
        };
        act.apply(&mut z);
        z
    }

    /// Outputs for a batch of rows.
    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        let mut a = self.layer_forward(0, &inputs);
        for k in 1..self.num_layers() {
            a = self.layer_forward(k, &a.view());
        }
        Ok(a)
    }

    /// Forward pass retaining the activations needed by [`DenseNet::vjp`].
    pub fn forward_trace(&self, inputs: ArrayView2<'_, f64>) -> Result<Trace> {
        self.check_input(&inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut outputs: Vec<Array2<f64>> = Vec::with_capacity(self.num_layers());
        layer_inputs.push(inputs.to_owned());
        for k in 0..self.num_layers() {
            let out = self.layer_forward(k, &layer_inputs[k].view());
            if k + 1 < self.num_layers() {
                layer_inputs.push(out.clone());
            }
            outputs.push(out);
        }
        Ok(Trace {
            layer_inputs,
            outputs,
        })
    }

    /// Forward pass up to (excluding) the final layer.
    pub fn features(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&inputs)?;
        let mut a = inputs.to_owned();
        for k in 0..self.num_layers() - 1 {
            a = self.layer_forward(k, &a.view());
        }
        Ok(a)
    }

    /// Reverse mode: parameter gradient of `<output, cotangent>` summed over
    /// the batch.
    pub fn vjp(&self, trace: &Trace, cotangent: ArrayView2<'_, f64>) -> Result<DenseNet> {
        if cotangent.dim() != trace.output().dim() {
            return Err(Error::shape(format!(
                "cotangent {:?} vs output {:?}",
                cotangent.dim(),
                trace.output().dim()
            )));
        }
        let mut grad = self.zeros_like();
        let mut d = cotangent.to_owned();
        for k in (0..self.num_layers()).rev() {
            let act = self.activations[k];
            act.chain(&trace.outputs[k], &mut d);
            let a = &trace.layer_inputs[k];
            let w = self.weights(k);
            let d_in = match act {
                Activation::Cosine { scale } => {
                    let a_hat = normalize_rows(&a.view());
                    let w_hat = normalize_rows(&w);
                    let d_a_hat = d.dot(&w_hat) * scale;
                    let d_w_hat = d.t().dot(&a_hat) * scale;
                    grad.weights_mut(k)
                        .assign(&normalize_rows_tangent(&w, &d_w_hat.view()));
                    normalize_rows_tangent(&a.view(), &d_a_hat.view())
                }
                _ => {
                    grad.weights_mut(k).assign(&d.t().dot(a));
                    grad.bias_mut(k).assign(&d.sum_axis(Axis(0)));
                    d.dot(&w)
                }
            };
            d = d_in;
        }
        Ok(grad)
    }

    /// Forward mode: outputs and their directional derivative along the
    /// parameter direction `tangent`, row by row.
    pub fn jvp(
        &self,
        inputs: ArrayView2<'_, f64>,
        tangent: &DenseNet,
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(&inputs)?;
        self.check_same_shape(tangent)?;
        let mut a = inputs.to_owned();
        let mut da = Array2::<f64>::zeros(a.dim());
        for k in 0..self.num_layers() {
            let w = self.weights(k);
            let dw = tangent.weights(k);
            let act = self.activations[k];
            let (mut z, mut dz) = match act {
                Activation::Cosine { scale } => {
                    let a_hat = normalize_rows(&a.view());
                    let w_hat = normalize_rows(&w);
                    let da_hat = normalize_rows_tangent(&a.view(), &da.view());
                    let dw_hat = normalize_rows_tangent(&w, &dw);
                    let z = a_hat.dot(&w_hat.t()) * scale;
                    let dz = (da_hat.dot(&w_hat.t()) + a_hat.dot(&dw_hat.t())) * scale;
                    (z, dz)
                }
                _ => {
                    let z = a.dot(&w.t()) + self.bias(k);
                    let dz = da.dot(&w.t()) + a.dot(&dw.t()) + tangent.bias(k);
                    (z, dz)
                }
            };
            act.apply(&mut z);
            act.chain(&z, &mut dz);
            a = z;
            da = dz;
        }
        Ok((a, da))
    }
}

/// Rows scaled to unit norm, with norms below [`NORM_EPS`] replaced by it.
pub fn normalize_rows(x: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(NORM_EPS);
        row.mapv_inplace(|v| v / n);
    }
    out
}

/// Derivative of [`normalize_rows`] at `x` applied to `dx` (the map is
/// self-adjoint per row, so it also serves reverse mode).
fn normalize_rows_tangent(x: &ArrayView2<'_, f64>, dx: &ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = dx.to_owned();
    for (row, mut d) in x.rows().into_iter().zip(out.rows_mut()) {
        let n = row.dot(&row).sqrt();
        if n < NORM_EPS {
            d.mapv_inplace(|v| v / NORM_EPS);
        } else {
            let proj = row.dot(&d) / (n * n);
            d.zip_mut_with(&row, |g, &v| *g = (*g - proj * v) / n);
        }
    }
    out
}

/// Mean weighted loss and its exact parameter gradient.
pub fn loss_and_grad(
    net: &DenseNet,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: &[f64],
    loss: Loss,
) -> Result<(f64, DenseNet)> {
    let trace = net.forward_trace(inputs)?;
    let (mean, _, dlogits) = loss.evaluate(trace.output().view(), labels, weights)?;
    Ok((mean, net.vjp(&trace, dlogits.view())?))
}

/// Gradient of the weighted mean cross-entropy.
pub fn backward(
    net: &DenseNet,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    weights: &[f64],
) -> Result<DenseNet> {
    loss_and_grad(net, inputs, labels, weights, Loss::CrossEntropy).map(|(_, g)| g)
}

/// `<grad CE(x_i, y_i), direction>` for every row `i`, unweighted.
pub fn per_sample_grad_dots(
    net: &DenseNet,
    inputs: ArrayView2<'_, f64>,
    labels: &[usize],
    direction: &DenseNet,
) -> Result<Vec<f64>> {
    if labels.len() != inputs.nrows() {
        return Err(Error::shape(format!(
            "{} labels for {} rows",
            labels.len(),
            inputs.nrows()
        )));
    }
    let (logits, dlogits) = net.jvp(inputs, direction)?;
    let probs = softmax_rows(logits.view());
    let classes = logits.ncols();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= classes {
                return Err(Error::LabelOutOfRange { label: y, classes });
            }
            // dCE/dz_k = p_k - [k == y]
            let p = probs.row(i);
            let dz = dlogits.row(i);
            Ok(p.dot(&dz) - dz[y])
        })
        .collect()
}

/// Single-sample form of [`per_sample_grad_dots`].
pub fn per_sample_grad_dot(
    net: &DenseNet,
    sample: ArrayView1<'_, f64>,
    label: usize,
    direction: &DenseNet,
) -> Result<f64> {
    let x = sample.insert_axis(Axis(0));
    Ok(per_sample_grad_dots(net, x, &[label], direction)?[0])
}

/// Logits of a cosine classifier head: `scale * <x/|x|, w_c/|w_c|>`.
pub fn cosine_head_forward(
    weights: ArrayView2<'_, f64>,
    inputs: ArrayView2<'_, f64>,
    scale: f64,
) -> Result<Array2<f64>> {
    if !(scale > 0.0) {
        return Err(Error::invalid(format!("cosine scale must be > 0, got {scale}")));
    }
    if weights.ncols() != inputs.ncols() {
        return Err(Error::shape("feature width differs from class weight width"));
    }
    Ok(normalize_rows(&inputs).dot(&normalize_rows(&weights).t()) * scale)
}
