//! The decoder network: conv1d -> batch norm -> ReLU -> max-pool -> Bi-LSTM
//! -> dense + sigmoid, with a hand-written reverse-mode pass over a batch.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{
    batch_moments, batchnorm_input_grad, batchnorm_reductions, maxpool_into, minmax_scale,
    normalize_rows, sigmoid, BatchNormCache, BatchNormParams, Conv1dParams, DenseParams,
};
use crate::nn::lstm::{backward_sequence, run_sequence, LstmParams, LstmTrace};
use crate::nn::tensor::{axpy, Mat};

/// Layer sizes and batch-norm constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_len: usize,
    pub filters: usize,
    pub kernel_len: usize,
    pub pool: usize,
    /// Hidden units per LSTM direction.
    pub hidden: usize,
    pub outputs: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_len: 1000,
            filters: 32,
            kernel_len: 16,
            pool: 4,
            hidden: 32,
            outputs: 4,
            bn_eps: 1e-3,
            bn_momentum: 0.99,
        }
    }
}

impl Architecture {
    pub fn conv_len(&self) -> usize {
        self.input_len + 1 - self.kernel_len
    }

    pub fn seq_len(&self) -> usize {
        self.conv_len() / self.pool
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_len,
            self.filters,
            self.kernel_len,
            self.pool,
            self.hidden,
            self.outputs,
        ];
        if positive.contains(&0) {
            return Err(Error::Shape(format!(
                "all layer sizes must be >= 1: {self:?}"
            )));
        }
        if self.input_len < self.kernel_len {
            return Err(Error::Shape(format!(
                "input length {} shorter than kernel {}",
                self.input_len, self.kernel_len
            )));
        }
        if self.seq_len() == 0 {
            return Err(Error::Shape(format!(
                "pool window {} exceeds conv output length {}",
                self.pool,
                self.conv_len()
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::Shape(
                "bn_eps must be > 0 and bn_momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Every layer's parameters. Gradients use the same type; their batch-norm
/// running statistics are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub conv: Conv1dParams,
    pub bn: BatchNormParams,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub dense: DenseParams,
}

pub const TENSOR_NAMES: [&str; 22] = [
    "conv.kernels",
    "conv.biases",
    "bn.gamma",
    "bn.beta",
    "lstm_fwd.w_f",
    "lstm_fwd.w_i",
    "lstm_fwd.w_c",
    "lstm_fwd.w_o",
    "lstm_fwd.b_f",
    "lstm_fwd.b_i",
    "lstm_fwd.b_c",
    "lstm_fwd.b_o",
    "lstm_bwd.w_f",
    "lstm_bwd.w_i",
    "lstm_bwd.w_c",
    "lstm_bwd.w_o",
    "lstm_bwd.b_f",
    "lstm_bwd.b_i",
    "lstm_bwd.b_c",
    "lstm_bwd.b_o",
    "dense.w",
    "dense.b",
];

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            conv: Conv1dParams {
                kernels: Mat::zeros(arch.filters, arch.kernel_len),
                biases: vec![0.0; arch.filters],
            },
            bn: BatchNormParams::new(arch.filters, arch.bn_eps, arch.bn_momentum),
            fwd: LstmParams::zeros(arch.filters, arch.hidden),
            bwd: LstmParams::zeros(arch.filters, arch.hidden),
            dense: DenseParams {
                w: Mat::zeros(arch.outputs, 2 * arch.hidden),
                b: vec![0.0; arch.outputs],
            },
        }
    }

    /// Gradient accumulator: all trainable tensors zeroed.
    pub fn zeroed_like(&self) -> Self {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    /// Glorot-uniform weights, zero biases, forget-gate biases at 1.
    pub fn glorot<R: Rng>(arch: &Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        let mut fill = |data: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            data.iter_mut()
                .for_each(|v| *v = rng.random_range(-limit..limit));
        };
        fill(
            &mut p.conv.kernels.data,
            arch.kernel_len,
            arch.kernel_len * arch.filters,
        );
        for lstm in [&mut p.fwd, &mut p.bwd] {
            let fan_in = lstm.hidden + lstm.input;
            for w in [&mut lstm.w_f, &mut lstm.w_i, &mut lstm.w_c, &mut lstm.w_o] {
                fill(&mut w.data, fan_in, lstm.hidden);
            }
            lstm.b_f.iter_mut().for_each(|b| *b = 1.0);
        }
        fill(&mut p.dense.w.data, 2 * arch.hidden, arch.outputs);
        p
    }

    /// Trainable tensors in checkpoint order (see [`TENSOR_NAMES`]).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            &self.conv.kernels.data,
            &self.conv.biases,
            &self.bn.gamma,
            &self.bn.beta,
        ];
        v.extend(self.fwd.tensors());
        v.extend(self.bwd.tensors());
        v.push(&self.dense.w.data);
        v.push(&self.dense.b);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            &mut self.conv.kernels.data,
            &mut self.conv.biases,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ];
        v.extend(self.fwd.tensors_mut());
        v.extend(self.bwd.tensors_mut());
        v.push(&mut self.dense.w.data);
        v.push(&mut self.dense.b);
        v
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, b, a);
        }
    }
}

/// Per-sample activations retained for the backward pass.
struct SampleTrace {
    conv: Vec<f64>,
    /// Batch-norm output before ReLU.
    normed: Vec<f64>,
    pool_arg: Vec<usize>,
    fwd: LstmTrace,
    bwd: LstmTrace,
    features: Vec<f64>,
    output: Vec<f64>,
}

/// Cached batch forward pass.
pub struct ForwardPass {
    samples: Vec<SampleTrace>,
    bn: Option<BatchNormCache>,
}

impl ForwardPass {
    pub fn outputs(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.output.clone()).collect()
    }

    /// Batch mean and variance used in training mode.
    pub fn batch_stats(&self) -> Option<(&[f64], &[f64])> {
        self.bn
            .as_ref()
            .map(|c| (c.mean.as_slice(), c.var.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub params: Params,
}

impl Network {
    pub fn new(arch: Architecture, params: Params) -> Result<Self> {
        arch.validate()?;
        let expect = Params::zeros(&arch);
        for (i, (a, b)) in params.tensors().iter().zip(expect.tensors()).enumerate() {
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "{} has {} values, architecture needs {}",
                    TENSOR_NAMES[i],
                    a.len(),
                    b.len()
                )));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let params = Params::glorot(&arch, rng);
        Ok(Self { arch, params })
    }

    fn check_inputs(&self, inputs: &[&[f64]]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for x in inputs {
            if x.len() != self.arch.input_len {
                return Err(Error::LengthMismatch {
                    expected: self.arch.input_len,
                    got: x.len(),
                });
            }
        }
        Ok(())
    }

    /// Runs the batch forward. Training mode normalizes with batch statistics
    /// (pooled over samples and positions); inference uses running averages.
    /// Running averages are not touched here.
    pub fn forward(&self, inputs: &[&[f64]], training: bool) -> Result<ForwardPass> {
        self.check_inputs(inputs)?;
        let a = &self.arch;
        let p = &self.params;
        let (l, ch) = (a.conv_len(), a.filters);
        let conv: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|x| {
                let mut out = vec![0.0; l * ch];
                p.conv.forward_into(x, &mut out);
                out
            })
            .collect();

        let (bn_cache, mean, inv_std) = if training {
            let blocks: Vec<&[f64]> = conv.iter().map(Vec::as_slice).collect();
            let (mean, var, count) = batch_moments(&blocks, ch);
            if count < 2 {
                return Err(Error::BatchTooSmall(count));
            }
            let cache = BatchNormCache::new(mean, var, count, p.bn.eps);
            let (m, s) = (cache.mean.clone(), cache.inv_std.clone());
            (Some(cache), m, s)
        } else {
            let inv =
                p.bn.running_var
                    .iter()
                    .map(|v| 1.0 / (v + p.bn.eps).sqrt())
                    .collect();
            (None, p.bn.running_mean.clone(), inv)
        };

        let samples = conv
            .into_par_iter()
            .map(|c| self.finish_sample(c, &mean, &inv_std))
            .collect();
        Ok(ForwardPass {
            samples,
            bn: bn_cache,
        })
    }

    fn finish_sample(&self, conv: Vec<f64>, mean: &[f64], inv_std: &[f64]) -> SampleTrace {
        let a = &self.arch;
        let p = &self.params;
        let (ch, t, hd) = (a.filters, a.seq_len(), a.hidden);
        let mut normed = conv.clone();
        normalize_rows(&mut normed, mean, inv_std, &p.bn.gamma, &p.bn.beta);
        let act: Vec<f64> = normed.iter().map(|v| v.max(0.0)).collect();
        let mut pooled = vec![0.0; t * ch];
        let mut pool_arg = vec![0usize; t * ch];
        maxpool_into(&act, ch, a.pool, &mut pooled, &mut pool_arg);
        let fwd = run_sequence(&p.fwd, &pooled, false);
        let bwd = run_sequence(&p.bwd, &pooled, true);
        let mut features = Vec::with_capacity(2 * hd);
        features.extend_from_slice(fwd.h_at(t - 1, hd));
        features.extend_from_slice(bwd.h_at(t - 1, hd));
        let mut output = vec![0.0; a.outputs];
        p.dense.w.matvec_bias(&features, &p.dense.b, &mut output);
        output.iter_mut().for_each(|v| *v = sigmoid(*v));
        SampleTrace {
            conv,
            normed,
            pool_arg,
            fwd,
            bwd,
            features,
            output,
        }
    }

    /// Sets the batch-norm inference statistics to the exact mean and biased
    /// variance of the conv outputs over `inputs`.
    pub fn calibrate_bn(&mut self, inputs: &[&[f64]]) -> Result<()> {
        self.check_inputs(inputs)?;
        let (l, ch) = (self.arch.conv_len(), self.arch.filters);
        let conv = &self.params.conv;
        // Per-sample sums, reduced in order; two passes for a stable variance.
        let sums: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|x| {
                let mut out = vec![0.0; l * ch];
                conv.forward_into(x, &mut out);
                let mut s = vec![0.0; ch];
                for row in out.chunks_exact(ch) {
                    axpy(1.0, row, &mut s);
                }
                s
            })
            .collect();
        let count = (inputs.len() * l) as f64;
        let mut mean = vec![0.0; ch];
        for s in &sums {
            axpy(1.0 / count, s, &mut mean);
        }
        let sq: Vec<Vec<f64>> = inputs
            .par_iter()
            .map(|x| {
                let mut out = vec![0.0; l * ch];
                conv.forward_into(x, &mut out);
                let mut s = vec![0.0; ch];
                for row in out.chunks_exact(ch) {
                    for c in 0..ch {
                        let d = row[c] - mean[c];
                        s[c] += d * d;
                    }
                }
                s
            })
            .collect();
        let mut var = vec![0.0; ch];
        for s in &sq {
            axpy(1.0 / count, s, &mut var);
        }
        self.params.bn.running_mean = mean;
        self.params.bn.running_var = var;
        Ok(())
    }

    /// Inference-mode outputs for a batch.
    pub fn predict_batch(&self, inputs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward(inputs, false)?.outputs())
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[input])?.remove(0))
    }

    /// Reverse pass given `dL/d(output)` per sample.
    pub fn backward(
        &self,
        inputs: &[&[f64]],
        pass: &ForwardPass,
        d_out: &[Vec<f64>],
    ) -> Result<Params> {
        let cache = pass
            .bn
            .as_ref()
            .ok_or_else(|| Error::Shape("backward needs a training-mode forward pass".into()))?;
        if d_out.len() != pass.samples.len() || inputs.len() != pass.samples.len() {
            return Err(Error::LengthMismatch {
                expected: pass.samples.len(),
                got: d_out.len(),
            });
        }
        let a = &self.arch;
        let p = &self.params;
        let (ch, t, hd, l) = (a.filters, a.seq_len(), a.hidden, a.conv_len());

        // Dense, Bi-LSTM, pool and ReLU per sample: gradient w.r.t. BN output.
        let upper: Vec<(Params, Vec<f64>)> = pass
            .samples
            .par_iter()
            .zip(d_out.par_iter())
            .map(|(s, dy)| {
                let mut g = p.zeroed_like();
                let mut d_feat = vec![0.0; 2 * hd];
                for (k, (y, d)) in s.output.iter().zip(dy).enumerate() {
                    let da = d * y * (1.0 - y);
                    g.dense.b[k] += da;
                    axpy(da, &s.features, g.dense.w.row_mut(k));
                    axpy(da, p.dense.w.row(k), &mut d_feat);
                }
                let mut d_pooled = vec![0.0; t * ch];
                let mut dh = vec![0.0; t * hd];
                dh[(t - 1) * hd..].copy_from_slice(&d_feat[..hd]);
                backward_sequence(&p.fwd, &s.fwd, &dh, &mut g.fwd, &mut d_pooled);
                dh[(t - 1) * hd..].copy_from_slice(&d_feat[hd..]);
                backward_sequence(&p.bwd, &s.bwd, &dh, &mut g.bwd, &mut d_pooled);
                let mut d_normed = vec![0.0; l * ch];
                for (q, src) in s.pool_arg.iter().enumerate() {
                    if s.normed[*src] > 0.0 {
                        d_normed[*src] += d_pooled[q];
                    }
                }
                (g, d_normed)
            })
            .collect();

        let x_blocks: Vec<&[f64]> = pass.samples.iter().map(|s| s.conv.as_slice()).collect();
        let d_blocks: Vec<&[f64]> = upper.iter().map(|(_, d)| d.as_slice()).collect();
        let (sum_dy, sum_dy_xhat) = batchnorm_reductions(&x_blocks, &d_blocks, cache);

        let lower: Vec<Params> = upper
            .into_par_iter()
            .zip(pass.samples.par_iter())
            .zip(inputs.par_iter())
            .map(|(((mut g, mut d), s), x)| {
                batchnorm_input_grad(&s.conv, &mut d, cache, &p.bn.gamma, &sum_dy, &sum_dy_xhat);
                p.conv
                    .backward_accumulate(x, &d, &mut g.conv.kernels.data, &mut g.conv.biases);
                g
            })
            .collect();

        // Serial reduction in sample order keeps results independent of the
        // thread count.
        let mut total = p.zeroed_like();
        for g in &lower {
            total.add_assign(g);
        }
        total.bn.gamma.copy_from_slice(&sum_dy_xhat);
        total.bn.beta.copy_from_slice(&sum_dy);
        Ok(total)
    }

    /// Training-mode batch MSE and its gradient.
    pub fn loss_and_grad(
        &self,
        inputs: &[&[f64]],
        targets: &[&[f64]],
    ) -> Result<(f64, Params, ForwardPass)> {
        let pass = self.forward(inputs, true)?;
        let (loss, d_out) = mse_with_grad(&pass, targets)?;
        let grads = self.backward(inputs, &pass, &d_out)?;
        Ok((loss, grads, pass))
    }

    /// Training-mode batch MSE without gradients.
    pub fn batch_loss(&self, inputs: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
        let pass = self.forward(inputs, true)?;
        Ok(mse_with_grad(&pass, targets)?.0)
    }

    /// Min-max scales a raw series and returns inference outputs.
    pub fn scores(&self, raw: &[f64]) -> Result<Vec<f64>> {
        self.predict(&minmax_scale(raw))
    }
}

fn mse_with_grad(pass: &ForwardPass, targets: &[&[f64]]) -> Result<(f64, Vec<Vec<f64>>)> {
    if targets.len() != pass.samples.len() {
        return Err(Error::LengthMismatch {
            expected: pass.samples.len(),
            got: targets.len(),
        });
    }
    let m = pass.samples.first().map_or(0, |s| s.output.len());
    let denom = (m * targets.len()) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(targets.len());
    for (s, t) in pass.samples.iter().zip(targets) {
        if t.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                got: t.len(),
            });
        }
        let g: Vec<f64> = s
            .output
            .iter()
            .zip(t.iter())
            .map(|(y, y_true)| {
                loss += (y - y_true) * (y - y_true);
                2.0 * (y - y_true) / denom
            })
            .collect();
        grads.push(g);
    }
    Ok((loss / denom, grads))
}
