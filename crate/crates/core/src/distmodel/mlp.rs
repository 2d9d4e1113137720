//! Fully-connected classifier over neighborhood features: hidden blocks of
//! linear, batch normalization and ReLU, then a linear layer onto the
//! distribution coreset classes.
//!
//! Arithmetic is `f64` throughout; trained parameters are rounded to `f32`
//! precision so a checkpoint written as PNIT reloads to the identical model.

use std::fs;
use std::path::Path;

use matrixmultiply::dgemm;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, shape, Error, Result};
use crate::tensorio::{read_tensor_strict, write_tensor, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// `C = A * B (+ C)` for logical `A: m x k`, `B: k x n`, row-major storage,
/// either operand optionally stored transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths checked above match the strides for every index.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim x in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != in_dim * out_dim || bias.len() != out_dim {
            return Err(shape(format!(
                "linear {in_dim}->{out_dim} given {} weights and {} biases",
                weight.len(),
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = |n| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..bound)).collect() };
        let weight = draw(in_dim * out_dim);
        let bias = draw(out_dim);
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            out.extend_from_slice(&self.bias);
        }
        gemm(rows, self.in_dim, self.out_dim, x, false, &self.weight, true, &mut out, true);
        out
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    fn backward(&self, x: &[f64], d_out: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut d_w = vec![0.0; self.out_dim * self.in_dim];
        gemm(self.out_dim, rows, self.in_dim, d_out, true, x, false, &mut d_w, false);
        let mut d_b = vec![0.0; self.out_dim];
        for row in d_out.chunks_exact(self.out_dim) {
            for (a, g) in d_b.iter_mut().zip(row) {
                *a += g;
            }
        }
        let mut d_x = vec![0.0; rows * self.in_dim];
        gemm(rows, self.out_dim, self.in_dim, d_out, false, &self.weight, false, &mut d_x, false);
        (d_w, d_b, d_x)
    }
}

/// Per-feature batch normalization with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpShape {
    /// Total number of linear layers, the output layer included.
    pub layers: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub sched_gamma: f64,
    pub sched_step: usize,
    pub seed: u64,
}

impl MlpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.sched_step == 0 {
            return Err(invalid("epochs, batch size (>= 2) and scheduler step must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.sched_gamma > 0.0) {
            return Err(invalid("learning rate and scheduler gamma must be positive"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` under step decay.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.sched_gamma.powi((epoch / self.sched_step) as i32)
    }
}

/// Training samples for the classifier, assembled on demand.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn dim(&self) -> usize;
    fn fill(&self, index: usize, out: &mut [f64]);
    fn label(&self, index: usize) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Samples held as a dense row-major matrix.
pub struct DenseSamples<'a> {
    pub inputs: &'a [f64],
    pub dim: usize,
    pub labels: &'a [usize],
}

impl SampleSource for DenseSamples<'_> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn fill(&self, index: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.inputs[index * self.dim..(index + 1) * self.dim]);
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborhoodMlp {
    pub hidden: Vec<HiddenLayer>,
    pub output: Linear,
    pub temperature: f64,
}

struct HiddenCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    pre_relu: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
}

/// Stable softmax of `logits / temperature`.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl NeighborhoodMlp {
    pub fn from_layers(hidden: Vec<HiddenLayer>, output: Linear, temperature: f64) -> Result<Self> {
        let mut width = hidden.first().map_or(output.in_dim, |h| h.linear.in_dim);
        for h in &hidden {
            if h.linear.in_dim != width || h.norm.dim() != h.linear.out_dim {
                return Err(shape("hidden layer widths do not chain"));
            }
            width = h.linear.out_dim;
        }
        if output.in_dim != width {
            return Err(shape("output layer width does not match last hidden layer"));
        }
        if !(temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        Ok(Self {
            hidden,
            output,
            temperature,
        })
    }

    /// PyTorch-style uniform initialization.
    pub fn init(input_dim: usize, classes: usize, shape: MlpShape, temperature: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(input_dim, classes, shape, temperature, &mut rng)
    }

    fn init_with(
        input_dim: usize,
        classes: usize,
        shape: MlpShape,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || shape.layers == 0 || shape.width == 0 {
            return Err(invalid("mlp dimensions must be positive"));
        }
        let mut hidden = Vec::with_capacity(shape.layers - 1);
        let mut width = input_dim;
        for _ in 1..shape.layers {
            hidden.push(HiddenLayer {
                linear: Linear::init(width, shape.width, rng),
                norm: BatchNorm::identity(shape.width),
            });
            width = shape.width;
        }
        let output = Linear::init(width, classes, rng);
        Self::from_layers(hidden, output, temperature)
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.first().map_or(self.output.in_dim, |h| h.linear.in_dim)
    }

    pub fn classes(&self) -> usize {
        self.output.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Trainable parameters in canonical order: per hidden layer weight, bias,
    /// gamma, beta; then output weight, bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(4 * self.hidden.len() + 2);
        for h in &self.hidden {
            out.push(&h.linear.weight);
            out.push(&h.linear.bias);
            out.push(&h.norm.gamma);
            out.push(&h.norm.beta);
        }
        out.push(&self.output.weight);
        out.push(&self.output.bias);
        out
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(4 * self.hidden.len() + 2);
        for h in &mut self.hidden {
            out.push(&mut h.linear.weight);
            out.push(&mut h.linear.bias);
            out.push(&mut h.norm.gamma);
            out.push(&mut h.norm.beta);
        }
        out.push(&mut self.output.weight);
        out.push(&mut self.output.bias);
        out
    }

    pub fn params_flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(shape("flat parameter vector has the wrong length"));
        }
        let mut pos = 0;
        for s in self.param_slices_mut() {
            s.copy_from_slice(&flat[pos..pos + s.len()]);
            pos += s.len();
        }
        Ok(())
    }

    fn check_batch(&self, x: &[f64], rows: usize) -> Result<()> {
        if x.len() != rows * self.input_dim() {
            return Err(shape(format!(
                "mlp expects inputs of width {}, got {} values for {rows} rows",
                self.input_dim(),
                x.len()
            )));
        }
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        Ok(())
    }

    /// Inference logits, normalization from running statistics.
    pub fn logits(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        self.check_batch(x, rows)?;
        let mut act = x.to_vec();
        for h in &self.hidden {
            let mut z = h.linear.forward(&act, rows);
            let n = &h.norm;
            let scale: Vec<f64> = n
                .gamma
                .iter()
                .zip(&n.running_var)
                .map(|(g, v)| g / (v + BN_EPS).sqrt())
                .collect();
            for row in z.chunks_exact_mut(n.dim()) {
                for j in 0..row.len() {
                    row[j] = ((row[j] - n.running_mean[j]) * scale[j] + n.beta[j]).max(0.0);
                }
            }
            act = z;
        }
        Ok(self.output.forward(&act, rows))
    }

    /// Class probabilities for `rows` inputs at the model's temperature.
    pub fn predict_proba(&self, x: &[f64], rows: usize) -> Result<Vec<f64>> {
        let logits = self.logits(x, rows)?;
        Ok(logits
            .chunks_exact(self.classes())
            .flat_map(|z| softmax_with_temperature(z, self.temperature))
            .collect())
    }

    /// Training-mode forward pass (batch statistics) returning the mean
    /// cross-entropy, per-layer caches and logits.
    fn forward_train(&self, x: &[f64], labels: &[usize]) -> (f64, Vec<HiddenCache>, Vec<f64>, Vec<f64>) {
        let rows = labels.len();
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut act = x.to_vec();
        for h in &self.hidden {
            let z = h.linear.forward(&act, rows);
            let dim = h.norm.dim();
            let mut mean = vec![0.0; dim];
            for row in z.chunks_exact(dim) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= rows as f64);
            let mut var = vec![0.0; dim];
            for row in z.chunks_exact(dim) {
                for j in 0..dim {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= rows as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut xhat = z;
            let mut pre_relu = vec![0.0; rows * dim];
            for (xr, pr) in xhat.chunks_exact_mut(dim).zip(pre_relu.chunks_exact_mut(dim)) {
                for j in 0..dim {
                    xr[j] = (xr[j] - mean[j]) * inv_std[j];
                    pr[j] = h.norm.gamma[j] * xr[j] + h.norm.beta[j];
                }
            }
            let next: Vec<f64> = pre_relu.iter().map(|v| v.max(0.0)).collect();
            caches.push(HiddenCache {
                input: std::mem::replace(&mut act, next),
                xhat,
                inv_std,
                pre_relu,
                mean,
                var,
            });
        }
        let logits = self.output.forward(&act, rows);
        let classes = self.classes();
        let mut loss = 0.0;
        let mut d_logits = vec![0.0; rows * classes];
        for (r, (z, d)) in logits.chunks_exact(classes).zip(d_logits.chunks_exact_mut(classes)).enumerate() {
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - z[labels[r]];
            for j in 0..classes {
                d[j] = (z[j] - lse).exp() / rows as f64;
            }
            d[labels[r]] -= 1.0 / rows as f64;
        }
        caches.push(HiddenCache {
            input: act,
            xhat: Vec::new(),
            inv_std: Vec::new(),
            pre_relu: Vec::new(),
            mean: Vec::new(),
            var: Vec::new(),
        });
        (loss / rows as f64, caches, logits, d_logits)
    }

    fn backward(&self, caches: &[HiddenCache], d_logits: Vec<f64>, rows: usize) -> Vec<Vec<f64>> {
        let last = caches.last().expect("output cache");
        let (d_w, d_b, mut d_act) = self.output.backward(&last.input, &d_logits, rows);
        let mut grads: Vec<Vec<f64>> = vec![d_b, d_w];
        for (h, cache) in self.hidden.iter().zip(caches).rev() {
            let dim = h.norm.dim();
            let mut d_gamma = vec![0.0; dim];
            let mut d_beta = vec![0.0; dim];
            // Through ReLU, then the affine part of the normalization.
            let mut d_xhat = d_act;
            for ((dr, pr), xr) in d_xhat
                .chunks_exact_mut(dim)
                .zip(cache.pre_relu.chunks_exact(dim))
                .zip(cache.xhat.chunks_exact(dim))
            {
                for j in 0..dim {
                    let g = if pr[j] > 0.0 { dr[j] } else { 0.0 };
                    d_gamma[j] += g * xr[j];
                    d_beta[j] += g;
                    dr[j] = g * h.norm.gamma[j];
                }
            }
            let mut sum_d = vec![0.0; dim];
            let mut sum_dx = vec![0.0; dim];
            for (dr, xr) in d_xhat.chunks_exact(dim).zip(cache.xhat.chunks_exact(dim)) {
                for j in 0..dim {
                    sum_d[j] += dr[j];
                    sum_dx[j] += dr[j] * xr[j];
                }
            }
            let b = rows as f64;
            let mut d_z = d_xhat;
            for (dr, xr) in d_z.chunks_exact_mut(dim).zip(cache.xhat.chunks_exact(dim)) {
                for j in 0..dim {
                    dr[j] = cache.inv_std[j] / b * (b * dr[j] - sum_d[j] - xr[j] * sum_dx[j]);
                }
            }
            let (d_w, d_b, d_in) = h.linear.backward(&cache.input, &d_z, rows);
            grads.extend([d_beta, d_gamma, d_b, d_w]);
            d_act = d_in;
        }
        grads.reverse();
        grads
    }

    /// Mean cross-entropy of a batch in training mode (batch statistics,
    /// temperature 1).
    pub fn batch_loss(&self, x: &[f64], labels: &[usize]) -> Result<f64> {
        self.check_training_batch(x, labels)?;
        Ok(self.forward_train(x, labels).0)
    }

    /// Training-mode loss and its gradient, flattened in
    /// [`param_slices`](Self::param_slices) order.
    pub fn batch_loss_and_grad(&self, x: &[f64], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check_training_batch(x, labels)?;
        let (loss, caches, _, d_logits) = self.forward_train(x, labels);
        let grads = self.backward(&caches, d_logits, labels.len());
        Ok((loss, grads.concat()))
    }

    fn check_training_batch(&self, x: &[f64], labels: &[usize]) -> Result<()> {
        if labels.len() < 2 && !self.hidden.is_empty() {
            return Err(invalid("batch normalization needs at least two samples"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.classes()) {
            return Err(invalid(format!("label {l} outside {} classes", self.classes())));
        }
        self.check_batch(x, labels.len())
    }

    fn round_to_f32(&mut self) {
        for s in self.param_slices_mut() {
            s.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        for h in &mut self.hidden {
            for v in h.norm.running_mean.iter_mut().chain(&mut h.norm.running_var) {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Mini-batch Adam with step learning-rate decay on softmax
    /// cross-entropy. Samples are reshuffled every epoch; a trailing batch
    /// of one sample is skipped.
    pub fn train(
        samples: &dyn SampleSource,
        classes: usize,
        shape: MlpShape,
        temperature: f64,
        cfg: &MlpTrainConfig,
    ) -> Result<(Self, TrainReport)> {
        cfg.validate()?;
        let n = samples.len();
        if n < 2 {
            return Err(Error::EmptyTrainingSet);
        }
        let dim = samples.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Self::init_with(dim, classes, shape, temperature, &mut rng)?;
        let mut m: Vec<Vec<f64>> = model.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        let mut v = m.clone();
        let mut order: Vec<usize> = (0..n).collect();
        let mut x = Vec::new();
        let mut labels = Vec::new();
        let mut steps = 0usize;
        let mut epoch_loss = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut seen = 0usize;
            for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if chunk.len() < 2 {
                    continue;
                }
                x.resize(chunk.len() * dim, 0.0);
                labels.clear();
                for (r, &i) in chunk.iter().enumerate() {
                    samples.fill(i, &mut x[r * dim..(r + 1) * dim]);
                    let l = samples.label(i);
                    if l >= classes {
                        return Err(invalid(format!("label {l} outside {classes} classes")));
                    }
                    labels.push(l);
                }
                let (loss, caches, _, d_logits) = model.forward_train(&x, &labels);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, batch, loss });
                }
                let grads = model.backward(&caches, d_logits, labels.len());
                for (h, c) in model.hidden.iter_mut().zip(&caches) {
                    let unbias = chunk.len() as f64 / (chunk.len() - 1) as f64;
                    for j in 0..h.norm.dim() {
                        h.norm.running_mean[j] =
                            (1.0 - BN_MOMENTUM) * h.norm.running_mean[j] + BN_MOMENTUM * c.mean[j];
                        h.norm.running_var[j] =
                            (1.0 - BN_MOMENTUM) * h.norm.running_var[j] + BN_MOMENTUM * c.var[j] * unbias;
                    }
                }
                steps += 1;
                let bc1 = 1.0 - ADAM_BETA1.powi(steps as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(steps as i32);
                for (((p, g), m), v) in model.param_slices_mut().into_iter().zip(&grads).zip(&mut m).zip(&mut v) {
                    for i in 0..p.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                    }
                }
                total += loss * chunk.len() as f64;
                seen += chunk.len();
            }
            epoch_loss.push(if seen > 0 { total / seen as f64 } else { f64::NAN });
        }
        if steps == 0 {
            return Err(Error::EmptyTrainingSet);
        }
        model.round_to_f32();
        Ok((model, TrainReport { epoch_loss, steps }))
    }

    /// Writes `mlp.header` plus one PNIT file per parameter tensor.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let widths: Vec<String> = self.hidden.iter().map(|h| h.linear.out_dim.to_string()).collect();
        let header = format!(
            "layers = {}\ninput_dim = {}\nhidden_widths = {}\nclasses = {}\ntemperature = {:?}\n",
            self.hidden.len() + 1,
            self.input_dim(),
            widths.join(","),
            self.classes(),
            self.temperature
        );
        let path = dir.join("mlp.header");
        fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
        let put = |name: String, dims: Vec<usize>, vals: &[f64]| {
            let t = Tensor::new(dims, vals.iter().map(|&v| v as f32).collect())?;
            write_tensor(dir.join(name), &t)
        };
        for (i, h) in self.hidden.iter().enumerate() {
            let l = &h.linear;
            put(format!("mlp_{i}_weight.pnit"), vec![l.out_dim, l.in_dim], &l.weight)?;
            put(format!("mlp_{i}_bias.pnit"), vec![l.out_dim], &l.bias)?;
            put(format!("mlp_{i}_gamma.pnit"), vec![l.out_dim], &h.norm.gamma)?;
            put(format!("mlp_{i}_beta.pnit"), vec![l.out_dim], &h.norm.beta)?;
            put(format!("mlp_{i}_mean.pnit"), vec![l.out_dim], &h.norm.running_mean)?;
            put(format!("mlp_{i}_var.pnit"), vec![l.out_dim], &h.norm.running_var)?;
        }
        let o = &self.output;
        put("mlp_out_weight.pnit".into(), vec![o.out_dim, o.in_dim], &o.weight)?;
        put("mlp_out_bias.pnit".into(), vec![o.out_dim], &o.bias)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("mlp.header");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let field = |key: &str| -> Result<&str> {
            text.lines()
                .filter_map(|l| l.split_once('='))
                .find(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim())
                .ok_or_else(|| Error::CorruptHeader(format!("mlp.header lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::CorruptHeader(format!("mlp.header `{key}` is not an integer")))
        };
        let layers = num("layers")?;
        let temperature: f64 = field("temperature")?
            .parse()
            .map_err(|_| Error::CorruptHeader("mlp.header temperature".into()))?;
        let get = |name: String, dims: &[usize]| -> Result<Vec<f64>> {
            let t = read_tensor_strict(dir.join(&name))?;
            if t.dims() != dims {
                return Err(shape(format!("{name} has dims {:?}, expected {dims:?}", t.dims())));
            }
            Ok(t.data().iter().map(|&v| v as f64).collect())
        };
        let mut hidden = Vec::new();
        let mut width = num("input_dim")?;
        let widths: Vec<usize> = field("hidden_widths")?
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::CorruptHeader("mlp.header hidden_widths".into()))?;
        if widths.len() + 1 != layers {
            return Err(Error::CorruptHeader("mlp.header layer count disagrees with widths".into()));
        }
        for (i, &w) in widths.iter().enumerate() {
            hidden.push(HiddenLayer {
                linear: Linear::new(
                    width,
                    w,
                    get(format!("mlp_{i}_weight.pnit"), &[w, width])?,
                    get(format!("mlp_{i}_bias.pnit"), &[w])?,
                )?,
                norm: BatchNorm {
                    gamma: get(format!("mlp_{i}_gamma.pnit"), &[w])?,
                    beta: get(format!("mlp_{i}_beta.pnit"), &[w])?,
                    running_mean: get(format!("mlp_{i}_mean.pnit"), &[w])?,
                    running_var: get(format!("mlp_{i}_var.pnit"), &[w])?,
                },
            });
            width = w;
        }
        let classes = num("classes")?;
        let output = Linear::new(
            width,
            classes,
            get("mlp_out_weight.pnit".into(), &[classes, width])?,
            get("mlp_out_bias.pnit".into(), &[classes])?,
        )?;
        Self::from_layers(hidden, output, temperature)
    }
}

/// Probability vector for a single input at the given temperature.
pub fn mlp_forward(mlp: &NeighborhoodMlp, input: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let logits = mlp.logits(input, 1)?;
    Ok(softmax_with_temperature(&logits, temperature))
}
