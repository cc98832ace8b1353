//! Convolution, batch normalization, ReLU, max-pooling and the sigmoid dense
//! head, each with an explicit backward pass.

use crate::error::{Error, Result};
use crate::nn::tensor::{axpy, dot, Mat, Tensor};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(x - min) / (max - min)`; a constant series maps to all zeros.
pub fn minmax_scale(x: &[f64]) -> Vec<f64> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; x.len()];
    }
    x.iter().map(|v| (v - lo) / range).collect()
}

/// Single-input-channel 1D convolution, valid padding, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dParams {
    /// `filters x kernel_len`.
    pub kernels: Mat,
    pub biases: Vec<f64>,
}

impl Conv1dParams {
    pub fn new(kernels: Mat, biases: Vec<f64>) -> Result<Self> {
        if kernels.cols == 0 {
            return Err(Error::Shape("kernel length must be >= 1".into()));
        }
        if biases.len() != kernels.rows {
            return Err(Error::Shape(format!(
                "{} filters but {} biases",
                kernels.rows,
                biases.len()
            )));
        }
        Ok(Self { kernels, biases })
    }

    pub fn filters(&self) -> usize {
        self.kernels.rows
    }

    pub fn kernel_len(&self) -> usize {
        self.kernels.cols
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        input_len + 1 - self.kernel_len()
    }

    /// Writes `out[p * filters + f] = b_f + sum_k w_fk x_{p+k}`.
    pub(crate) fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let (f_n, k_n) = (self.filters(), self.kernel_len());
        let len = self.output_len(x.len());
        for p in 0..len {
            let window = &x[p..p + k_n];
            let row = &mut out[p * f_n..(p + 1) * f_n];
            for (f, o) in row.iter_mut().enumerate() {
                *o = self.biases[f] + dot(self.kernels.row(f), window);
            }
        }
    }

    /// Accumulates weight and bias gradients given `dout` laid out like the
    /// forward output.
    pub(crate) fn backward_accumulate(
        &self,
        x: &[f64],
        dout: &[f64],
        d_kernels: &mut [f64],
        d_biases: &mut [f64],
    ) {
        let (f_n, k_n) = (self.filters(), self.kernel_len());
        let len = self.output_len(x.len());
        for p in 0..len {
            let window = &x[p..p + k_n];
            let g = &dout[p * f_n..(p + 1) * f_n];
            for (f, gf) in g.iter().enumerate() {
                if *gf == 0.0 {
                    continue;
                }
                d_biases[f] += gf;
                axpy(*gf, window, &mut d_kernels[f * k_n..(f + 1) * k_n]);
            }
        }
    }
}

/// Forward convolution of a length-`N` series (shape `[N]` or `[N, 1]`),
/// returning shape `[N - K + 1, filters]`.
pub fn conv1d_forward(x: &Tensor, p: &Conv1dParams) -> Result<Tensor> {
    let (n, ch) = x.as_matrix();
    if ch != 1 {
        return Err(Error::Shape(format!(
            "expected one input channel, got {ch}"
        )));
    }
    if n < p.kernel_len() {
        return Err(Error::Shape(format!(
            "input length {n} shorter than kernel {}",
            p.kernel_len()
        )));
    }
    let len = p.output_len(n);
    let mut out = vec![0.0; len * p.filters()];
    p.forward_into(x.data(), &mut out);
    Tensor::new(vec![len, p.filters()], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept by the running statistics at each update.
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps,
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub(crate) fn update_running(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = m * self.running_mean[c] + (1.0 - m) * mean[c];
            self.running_var[c] = m * self.running_var[c] + (1.0 - m) * var[c];
        }
    }
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BatchNormCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

/// Per-channel mean and biased variance over rows drawn from several row-major
/// `rows x channels` blocks.
pub(crate) fn batch_moments(blocks: &[&[f64]], channels: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let count: usize = blocks.iter().map(|b| b.len() / channels).sum();
    let mut mean = vec![0.0; channels];
    for b in blocks {
        for row in b.chunks_exact(channels) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; channels];
    for b in blocks {
        for row in b.chunks_exact(channels) {
            for c in 0..channels {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (mean, var, count)
}

impl BatchNormCache {
    pub fn new(mean: Vec<f64>, var: Vec<f64>, count: usize, eps: f64) -> Self {
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Self {
            mean,
            var,
            inv_std,
            count,
        }
    }
}

/// Normalizes a `rows x channels` mini-batch per channel.
///
/// Training mode uses the batch statistics and folds them into the running
/// averages; inference mode uses the running averages only.
pub fn batchnorm_forward(x: &Tensor, p: &mut BatchNormParams, training: bool) -> Result<Tensor> {
    let (rows, ch) = x.as_matrix();
    if ch != p.channels() {
        return Err(Error::Shape(format!(
            "batch norm has {} channels, input has {ch}",
            p.channels()
        )));
    }
    let mut out = x.data().to_vec();
    if training {
        if rows < 2 {
            return Err(Error::BatchTooSmall(rows));
        }
        let (mean, var, count) = batch_moments(&[x.data()], ch);
        let cache = BatchNormCache::new(mean, var, count, p.eps);
        normalize_rows(&mut out, &cache.mean, &cache.inv_std, &p.gamma, &p.beta);
        p.update_running(&cache.mean, &cache.var);
    } else {
        let inv: Vec<f64> = p
            .running_var
            .iter()
            .map(|v| 1.0 / (v + p.eps).sqrt())
            .collect();
        normalize_rows(&mut out, &p.running_mean, &inv, &p.gamma, &p.beta);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) fn normalize_rows(
    data: &mut [f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) {
    let ch = mean.len();
    for row in data.chunks_exact_mut(ch) {
        for c in 0..ch {
            row[c] = gamma[c] * (row[c] - mean[c]) * inv_std[c] + beta[c];
        }
    }
}

/// Sums `dy` and `dy * xhat` per channel across blocks; these are the
/// gamma/beta gradients and the two reductions the input gradient needs.
pub(crate) fn batchnorm_reductions(
    x_blocks: &[&[f64]],
    dy_blocks: &[&[f64]],
    cache: &BatchNormCache,
) -> (Vec<f64>, Vec<f64>) {
    let ch = cache.mean.len();
    let mut sum_dy = vec![0.0; ch];
    let mut sum_dy_xhat = vec![0.0; ch];
    for (xb, db) in x_blocks.iter().zip(dy_blocks) {
        for (xr, dr) in xb.chunks_exact(ch).zip(db.chunks_exact(ch)) {
            for c in 0..ch {
                let xhat = (xr[c] - cache.mean[c]) * cache.inv_std[c];
                sum_dy[c] += dr[c];
                sum_dy_xhat[c] += dr[c] * xhat;
            }
        }
    }
    (sum_dy, sum_dy_xhat)
}

/// Input gradient of training-mode batch norm, in place over `dy`.
pub(crate) fn batchnorm_input_grad(
    x: &[f64],
    dy: &mut [f64],
    cache: &BatchNormCache,
    gamma: &[f64],
    sum_dy: &[f64],
    sum_dy_xhat: &[f64],
) {
    let ch = cache.mean.len();
    let m = cache.count as f64;
    for (xr, dr) in x.chunks_exact(ch).zip(dy.chunks_exact_mut(ch)) {
        for c in 0..ch {
            let xhat = (xr[c] - cache.mean[c]) * cache.inv_std[c];
            dr[c] =
                gamma[c] * cache.inv_std[c] / m * (m * dr[c] - sum_dy[c] - xhat * sum_dy_xhat[c]);
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Max over non-overlapping windows along the leading (time) axis of a
/// `len x channels` tensor. A trailing remainder shorter than `window` is
/// dropped.
pub fn maxpool1d(x: &Tensor, window: usize) -> Result<Tensor> {
    if window < 1 {
        return Err(Error::Shape("pool window must be >= 1".into()));
    }
    let (len, ch) = x.as_matrix();
    let out_len = len / window;
    let mut out = vec![0.0; out_len * ch];
    let mut arg = vec![0usize; out_len * ch];
    maxpool_into(x.data(), ch, window, &mut out, &mut arg);
    let shape = if x.shape().len() <= 1 {
        vec![out_len]
    } else {
        vec![out_len, ch]
    };
    Tensor::new(shape, out)
}

/// Pooling on raw row-major data; `arg` receives the flat source index of
/// each maximum (first one wins on ties).
pub(crate) fn maxpool_into(
    x: &[f64],
    ch: usize,
    window: usize,
    out: &mut [f64],
    arg: &mut [usize],
) {
    let out_len = out.len() / ch;
    for q in 0..out_len {
        for c in 0..ch {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for w in 0..window {
                let i = (q * window + w) * ch + c;
                if x[i] > best {
                    best = x[i];
                    best_i = i;
                }
            }
            out[q * ch + c] = best;
            arg[q * ch + c] = best_i;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `outputs x inputs`.
    pub w: Mat,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn outputs(&self) -> usize {
        self.w.rows
    }

    pub fn inputs(&self) -> usize {
        self.w.cols
    }
}

/// `sigmoid(w x + b)`.
pub fn dense_forward(x: &[f64], p: &DenseParams) -> Result<Vec<f64>> {
    if x.len() != p.inputs() || p.b.len() != p.outputs() {
        return Err(Error::Shape(format!(
            "dense {}x{} with {} biases cannot take {} inputs",
            p.outputs(),
            p.inputs(),
            p.b.len(),
            x.len()
        )));
    }
    let mut out = vec![0.0; p.outputs()];
    p.w.matvec_bias(x, &p.b, &mut out);
    out.iter_mut().for_each(|a| *a = sigmoid(*a));
    Ok(out)
}

/// Mean squared error over every entry of a batch (`entries per sample x
/// batch size` terms).
pub fn mse_loss(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            got: pred.len(),
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.len() != t.len() {
            return Err(Error::LengthMismatch {
                expected: t.len(),
                got: p.len(),
            });
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(total / count as f64)
}
