//! One-dimensional convolutional network over FFT bins.
//!
//! Input is `channels × bins` (EEG channels as depth). Each conv block is
//! `conv(valid, stride 1) → batch norm → sigmoid → max-pool(2)`; the head is
//! `flatten → dense(l) → sigmoid → dense(4) → softmax`. Training is plain
//! mini-batch SGD with momentum on the mean cross-entropy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use super::{Example, ModelError};
use crate::par;

pub const FILTERS: usize = 50;
pub const KERNEL: usize = 4;
pub const POOL: usize = 2;
pub const CLASSES: usize = 4;
pub const DENSE_GRID: [usize; 6] = [100, 200, 400, 800, 1600, 3200];
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub in_channels: usize,
    pub in_len: usize,
    pub n_convs: usize,
    pub filters: usize,
    pub kernel: usize,
    pub dense_len: usize,
}

impl CnnSpec {
    /// Grid architecture: 50 filters, kernel 4.
    pub fn grid(n_convs: usize, dense_len: usize, input_shape: (usize, usize)) -> Result<Self, ModelError> {
        Self::custom(input_shape, n_convs, FILTERS, KERNEL, dense_len)
    }

    pub fn custom(
        (in_channels, in_len): (usize, usize),
        n_convs: usize,
        filters: usize,
        kernel: usize,
        dense_len: usize,
    ) -> Result<Self, ModelError> {
        if !(1..=4).contains(&n_convs) {
            return Err(ModelError::InvalidHyperparameter(format!(
                "n_convs {n_convs} outside 1..=4"
            )));
        }
        if in_channels == 0 || filters == 0 || kernel == 0 || dense_len == 0 {
            return Err(ModelError::InvalidHyperparameter("zero-sized layer".into()));
        }
        let spec = Self {
            in_channels,
            in_len,
            n_convs,
            filters,
            kernel,
            dense_len,
        };
        spec.block_lengths()?;
        Ok(spec)
    }

    /// `(conv input length, conv output length, pooled length)` per block.
    pub fn block_lengths(&self) -> Result<Vec<(usize, usize, usize)>, ModelError> {
        let mut len = self.in_len;
        let mut out = Vec::with_capacity(self.n_convs);
        for _ in 0..self.n_convs {
            if len < self.kernel {
                return Err(ModelError::ShapeUnderflow {
                    len,
                    kernel: self.kernel,
                });
            }
            let conv = len - self.kernel + 1;
            let pooled = conv / POOL;
            if pooled == 0 {
                return Err(ModelError::ShapeUnderflow {
                    len: conv,
                    kernel: POOL,
                });
            }
            out.push((len, conv, pooled));
            len = pooled;
        }
        Ok(out)
    }

    pub fn flatten_len(&self) -> usize {
        let last = self.block_lengths().expect("validated").last().unwrap().2;
        last * self.filters
    }

    pub fn input_size(&self) -> usize {
        self.in_channels * self.in_len
    }

    pub fn block_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.filters
        }
    }

    pub fn parameter_count(&self) -> usize {
        let conv: usize = (0..self.n_convs)
            .map(|i| self.filters * self.block_in_channels(i) * self.kernel + 3 * self.filters)
            .sum();
        conv + self.flatten_len() * self.dense_len
            + self.dense_len
            + self.dense_len * CLASSES
            + CLASSES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvParams {
    /// `[filters][in_channels][kernel]`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `[out][in]`
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub inputs: usize,
    pub frozen: bool,
}

impl DenseParams {
    pub fn outputs(&self) -> usize {
        self.b.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CnnParams {
    pub convs: Vec<ConvParams>,
    pub hidden: DenseParams,
    pub output: DenseParams,
}

fn glorot(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.random_range(-limit..limit)).collect()
}

/// Builds the grid architecture and its seeded initial parameters.
pub fn cnn_build(
    n_convs: usize,
    dense_len: usize,
    input_shape: (usize, usize),
    seed: u64,
) -> Result<(CnnSpec, CnnParams), ModelError> {
    let spec = CnnSpec::grid(n_convs, dense_len, input_shape)?;
    let params = CnnParams::init(&spec, seed);
    Ok((spec, params))
}

impl CnnParams {
    pub fn init(spec: &CnnSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = spec.filters;
        let k = spec.kernel;
        let convs = (0..spec.n_convs)
            .map(|i| {
                let cin = spec.block_in_channels(i);
                ConvParams {
                    w: glorot(&mut rng, f * cin * k, cin * k, f * k),
                    b: vec![0.0; f],
                    gamma: vec![1.0; f],
                    beta: vec![0.0; f],
                    running_mean: vec![0.0; f],
                    running_var: vec![1.0; f],
                    frozen: false,
                }
            })
            .collect();
        let flat = spec.flatten_len();
        let l = spec.dense_len;
        Self {
            convs,
            hidden: DenseParams {
                w: glorot(&mut rng, l * flat, flat, l),
                b: vec![0.0; l],
                inputs: flat,
                frozen: false,
            },
            output: DenseParams {
                w: glorot(&mut rng, CLASSES * l, l, CLASSES),
                b: vec![0.0; CLASSES],
                inputs: l,
                frozen: false,
            },
        }
    }

    /// Trainable tensors in a fixed order: per conv `w, b, gamma, beta`,
    /// then hidden `w, b`, output `w, b`. The flag is the layer's frozen bit.
    pub fn trainable(&self) -> Vec<(&[f64], bool)> {
        let mut v: Vec<(&[f64], bool)> = Vec::new();
        for c in &self.convs {
            for t in [&c.w, &c.b, &c.gamma, &c.beta] {
                v.push((t, c.frozen));
            }
        }
        for d in [&self.hidden, &self.output] {
            v.push((&d.w, d.frozen));
            v.push((&d.b, d.frozen));
        }
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<(&mut Vec<f64>, bool)> {
        let mut v: Vec<(&mut Vec<f64>, bool)> = Vec::new();
        for c in &mut self.convs {
            let fr = c.frozen;
            v.push((&mut c.w, fr));
            v.push((&mut c.b, fr));
            v.push((&mut c.gamma, fr));
            v.push((&mut c.beta, fr));
        }
        for d in [&mut self.hidden, &mut self.output] {
            let fr = d.frozen;
            v.push((&mut d.w, fr));
            v.push((&mut d.b, fr));
        }
        v
    }

    /// Little-endian bytes of every parameter (trainable and running
    /// statistics) in frozen layers.
    pub fn frozen_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for c in self.convs.iter().filter(|c| c.frozen) {
            for t in [&c.w, &c.b, &c.gamma, &c.beta, &c.running_mean, &c.running_var] {
                put(t);
            }
        }
        for d in [&self.hidden, &self.output].into_iter().filter(|d| d.frozen) {
            put(&d.w);
            put(&d.b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|(t, _)| t.iter().all(|v| v.is_finite()))
    }

    pub fn check_shapes(&self, spec: &CnnSpec) -> Result<(), ModelError> {
        let other = CnnParams::init(spec, 0);
        let ok = self.convs.len() == other.convs.len()
            && self
                .trainable()
                .iter()
                .zip(other.trainable())
                .all(|(a, b)| a.0.len() == b.0.len())
            && self
                .convs
                .iter()
                .all(|c| c.running_mean.len() == spec.filters && c.running_var.len() == spec.filters);
        if ok {
            Ok(())
        } else {
            Err(ModelError::ShapeMismatch("parameters do not match spec".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in unfrozen batch-norm layers.
    Train,
    /// Running statistics everywhere.
    Infer,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct BlockCache {
    input: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
    act: Vec<f64>,
    argmax: Vec<u32>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

struct ForwardCache {
    blocks: Vec<BlockCache>,
    flat: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn conv_forward(
    input: &[f64],
    batch: usize,
    cin: usize,
    lin: usize,
    p: &ConvParams,
    filters: usize,
    kernel: usize,
) -> Vec<f64> {
    let lout = lin - kernel + 1;
    let mut out = vec![0.0; batch * filters * lout];
    par::for_each_chunk_mut(&mut out, filters * lout, |b, o| {
        let x = &input[b * cin * lin..(b + 1) * cin * lin];
        for f in 0..filters {
            let row = &mut o[f * lout..(f + 1) * lout];
            row.iter_mut().for_each(|v| *v = p.b[f]);
            for c in 0..cin {
                let xc = &x[c * lin..(c + 1) * lin];
                for k in 0..kernel {
                    let w = p.w[(f * cin + c) * kernel + k];
                    for (r, xv) in row.iter_mut().zip(&xc[k..k + lout]) {
                        *r += w * xv;
                    }
                }
            }
        }
    });
    out
}

fn dense_forward(x: &[f64], batch: usize, p: &DenseParams) -> Vec<f64> {
    let (nin, nout) = (p.inputs, p.outputs());
    let mut out = vec![0.0; batch * nout];
    par::for_each_chunk_mut(&mut out, nout, |b, o| {
        let xb = &x[b * nin..(b + 1) * nin];
        for (j, v) in o.iter_mut().enumerate() {
            let w = &p.w[j * nin..(j + 1) * nin];
            *v = p.b[j] + w.iter().zip(xb).map(|(a, c)| a * c).sum::<f64>();
        }
    });
    out
}

fn forward_cached(
    spec: &CnnSpec,
    params: &CnnParams,
    batch_input: &[f64],
    batch: usize,
    mode: Mode,
) -> ForwardCache {
    let lens = spec.block_lengths().expect("validated spec");
    let f = spec.filters;
    let mut blocks = Vec::with_capacity(spec.n_convs);
    let mut current = batch_input.to_vec();
    for (i, (p, &(lin, lc, lp))) in params.convs.iter().zip(&lens).enumerate() {
        let cin = spec.block_in_channels(i);
        let z = conv_forward(&current, batch, cin, lin, p, f, spec.kernel);

        let batch_stats = mode == Mode::Train && !p.frozen;
        let n = (batch * lc) as f64;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for b in 0..batch {
                for fi in 0..f {
                    let row = &z[(b * f + fi) * lc..(b * f + fi + 1) * lc];
                    mean[fi] += row.iter().sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            for b in 0..batch {
                for fi in 0..f {
                    let row = &z[(b * f + fi) * lc..(b * f + fi + 1) * lc];
                    var[fi] += row.iter().map(|v| (v - mean[fi]) * (v - mean[fi])).sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= n);
            (mean, var)
        } else {
            (p.running_mean.clone(), p.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let mut xhat = z;
        let mut act = vec![0.0; xhat.len()];
        let mut pooled = vec![0.0; batch * f * lp];
        let mut argmax = vec![0u32; batch * f * lp];
        for b in 0..batch {
            for fi in 0..f {
                let base = (b * f + fi) * lc;
                for j in 0..lc {
                    let xh = (xhat[base + j] - mean[fi]) * inv_std[fi];
                    xhat[base + j] = xh;
                    act[base + j] = sigmoid(p.gamma[fi] * xh + p.beta[fi]);
                }
                let pbase = (b * f + fi) * lp;
                for j in 0..lp {
                    let (a0, a1) = (act[base + 2 * j], act[base + 2 * j + 1]);
                    let (v, idx) = if a1 > a0 { (a1, 2 * j + 1) } else { (a0, 2 * j) };
                    pooled[pbase + j] = v;
                    argmax[pbase + j] = idx as u32;
                }
            }
        }
        blocks.push(BlockCache {
            input: std::mem::replace(&mut current, pooled),
            xhat,
            inv_std,
            batch_stats,
            act,
            argmax,
            batch_mean: mean,
            batch_var: var,
        });
    }
    let flat = current;
    let mut hidden = dense_forward(&flat, batch, &params.hidden);
    hidden.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut probs = dense_forward(&hidden, batch, &params.output);
    for row in probs.chunks_exact_mut(CLASSES) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    ForwardCache {
        blocks,
        flat,
        hidden,
        probs,
    }
}

fn check_batch(spec: &CnnSpec, params: &CnnParams, input: &[f64]) -> Result<usize, ModelError> {
    let size = spec.input_size();
    if input.is_empty() || input.len() % size != 0 {
        return Err(ModelError::ShapeMismatch(format!(
            "batch of {} values is not a multiple of {}",
            input.len(),
            size
        )));
    }
    params.check_shapes(spec)?;
    Ok(input.len() / size)
}

/// Class probabilities, one `[f64; 4]` per batch row. `batch` is
/// `B × channels × bins`, row-major.
pub fn cnn_forward(
    spec: &CnnSpec,
    params: &CnnParams,
    batch: &[f64],
    mode: Mode,
) -> Result<Vec<[f64; CLASSES]>, ModelError> {
    let b = check_batch(spec, params, batch)?;
    let cache = forward_cached(spec, params, batch, b, mode);
    Ok(cache
        .probs
        .chunks_exact(CLASSES)
        .map(|r| [r[0], r[1], r[2], r[3]])
        .collect())
}

/// Gradients aligned with [`CnnParams::trainable`]; frozen tensors and
/// anything below the lowest trainable layer are left at zero.
#[derive(Debug, Clone)]
pub struct Gradients(pub Vec<Vec<f64>>);

fn backward(
    spec: &CnnSpec,
    params: &CnnParams,
    cache: &ForwardCache,
    labels: &[usize],
    batch: usize,
) -> Gradients {
    let mut grads: Vec<Vec<f64>> = params.trainable().iter().map(|(t, _)| vec![0.0; t.len()]).collect();
    let nconv = spec.n_convs;
    let lowest_trainable = params
        .convs
        .iter()
        .position(|c| !c.frozen)
        .unwrap_or(nconv);
    let need_below_dense = lowest_trainable < nconv;

    // Output layer: softmax + cross-entropy, averaged over the batch.
    let mut dz = cache.probs.clone();
    for (b, &y) in labels.iter().enumerate() {
        dz[b * CLASSES + y] -= 1.0;
    }
    dz.iter_mut().for_each(|v| *v /= batch as f64);

    let gi = 4 * nconv;
    let dh = dense_backward(
        &params.output,
        &cache.hidden,
        &dz,
        batch,
        &mut grads,
        gi + 2,
        !params.hidden.frozen || need_below_dense,
    );
    let Some(mut dh) = dh else {
        return Gradients(grads);
    };
    for (d, h) in dh.iter_mut().zip(&cache.hidden) {
        *d *= h * (1.0 - h);
    }
    let dflat = dense_backward(&params.hidden, &cache.flat, &dh, batch, &mut grads, gi, need_below_dense);
    let Some(mut upstream) = dflat else {
        return Gradients(grads);
    };

    let lens = spec.block_lengths().expect("validated");
    let f = spec.filters;
    for i in (lowest_trainable..nconv).rev() {
        let p = &params.convs[i];
        let bc = &cache.blocks[i];
        let (lin, lc, lp) = lens[i];
        let cin = spec.block_in_channels(i);

        // Max-pool routing and sigmoid derivative.
        let mut dy = vec![0.0; batch * f * lc];
        for row in 0..batch * f {
            for j in 0..lp {
                let src = bc.argmax[row * lp + j] as usize;
                let a = bc.act[row * lc + src];
                dy[row * lc + src] = upstream[row * lp + j] * a * (1.0 - a);
            }
        }

        // Batch norm.
        let n = (batch * lc) as f64;
        let mut dgamma = vec![0.0; f];
        let mut dbeta = vec![0.0; f];
        let mut sum_dxhat = vec![0.0; f];
        let mut sum_dxhat_xhat = vec![0.0; f];
        for b in 0..batch {
            for fi in 0..f {
                let base = (b * f + fi) * lc;
                for j in 0..lc {
                    let g = dy[base + j];
                    let xh = bc.xhat[base + j];
                    dgamma[fi] += g * xh;
                    dbeta[fi] += g;
                    let dxh = g * p.gamma[fi];
                    sum_dxhat[fi] += dxh;
                    sum_dxhat_xhat[fi] += dxh * xh;
                }
            }
        }
        let mut dconv = dy;
        for b in 0..batch {
            for fi in 0..f {
                let base = (b * f + fi) * lc;
                for j in 0..lc {
                    let dxh = dconv[base + j] * p.gamma[fi];
                    dconv[base + j] = if bc.batch_stats {
                        bc.inv_std[fi] / n
                            * (n * dxh - sum_dxhat[fi] - bc.xhat[base + j] * sum_dxhat_xhat[fi])
                    } else {
                        dxh * bc.inv_std[fi]
                    };
                }
            }
        }

        let k = spec.kernel;
        let input = &bc.input;
        if !p.frozen {
            // dW[f][c][k] = Σ_b Σ_j dconv[b][f][j] · x[b][c][j+k]
            let mut dw = vec![0.0; f * cin * k];
            par::for_each_chunk_mut(&mut dw, cin * k, |fi, out| {
                for b in 0..batch {
                    let d = &dconv[(b * f + fi) * lc..(b * f + fi + 1) * lc];
                    for c in 0..cin {
                        let x = &input[(b * cin + c) * lin..(b * cin + c + 1) * lin];
                        for kk in 0..k {
                            out[c * k + kk] += d.iter().zip(&x[kk..kk + lc]).map(|(a, v)| a * v).sum::<f64>();
                        }
                    }
                }
            });
            let db: Vec<f64> = (0..f)
                .map(|fi| {
                    (0..batch)
                        .map(|b| dconv[(b * f + fi) * lc..(b * f + fi + 1) * lc].iter().sum::<f64>())
                        .sum()
                })
                .collect();
            grads[4 * i] = dw;
            grads[4 * i + 1] = db;
            grads[4 * i + 2] = dgamma;
            grads[4 * i + 3] = dbeta;
        }

        if i > lowest_trainable {
            // Gradient w.r.t. this block's input, then through the previous pool.
            let mut dx = vec![0.0; batch * cin * lin];
            par::for_each_chunk_mut(&mut dx, cin * lin, |b, out| {
                for fi in 0..f {
                    let d = &dconv[(b * f + fi) * lc..(b * f + fi + 1) * lc];
                    for c in 0..cin {
                        let o = &mut out[c * lin..(c + 1) * lin];
                        for kk in 0..k {
                            let w = p.w[(fi * cin + c) * k + kk];
                            for (ov, dv) in o[kk..kk + lc].iter_mut().zip(d) {
                                *ov += w * dv;
                            }
                        }
                    }
                }
            });
            upstream = dx;
        }
    }
    Gradients(grads)
}

/// Accumulates weight/bias gradients for a dense layer (if trainable) and
/// returns the input gradient when `want_input`.
fn dense_backward(
    p: &DenseParams,
    x: &[f64],
    dz: &[f64],
    batch: usize,
    grads: &mut [Vec<f64>],
    gi: usize,
    want_input: bool,
) -> Option<Vec<f64>> {
    let (nin, nout) = (p.inputs, p.outputs());
    if !p.frozen {
        let mut dw = vec![0.0; nout * nin];
        par::for_each_chunk_mut(&mut dw, nin, |j, row| {
            for b in 0..batch {
                let g = dz[b * nout + j];
                for (r, xv) in row.iter_mut().zip(&x[b * nin..(b + 1) * nin]) {
                    *r += g * xv;
                }
            }
        });
        let db: Vec<f64> = (0..nout)
            .map(|j| (0..batch).map(|b| dz[b * nout + j]).sum())
            .collect();
        grads[gi] = dw;
        grads[gi + 1] = db;
    }
    if !want_input {
        return None;
    }
    let mut dx = vec![0.0; batch * nin];
    par::for_each_chunk_mut(&mut dx, nin, |b, out| {
        for j in 0..nout {
            let g = dz[b * nout + j];
            for (o, w) in out.iter_mut().zip(&p.w[j * nin..(j + 1) * nin]) {
                *o += g * w;
            }
        }
    });
    Some(dx)
}

/// Mean cross-entropy of a train-mode forward pass and its gradients.
pub fn loss_and_gradients(
    spec: &CnnSpec,
    params: &CnnParams,
    batch: &[f64],
    labels: &[usize],
) -> Result<(f64, Gradients), ModelError> {
    let b = check_batch(spec, params, batch)?;
    if labels.len() != b || labels.iter().any(|&y| y >= CLASSES) {
        return Err(ModelError::ShapeMismatch("labels do not match batch".into()));
    }
    let cache = forward_cached(spec, params, batch, b, Mode::Train);
    let loss = cross_entropy(&cache.probs, labels);
    Ok((loss, backward(spec, params, &cache, labels, b)))
}

fn cross_entropy(probs: &[f64], labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -(probs[b * CLASSES + y].max(1e-300)).ln())
        .sum::<f64>()
        / labels.len() as f64
}

/// Mean train-mode loss, for finite-difference checks.
pub fn loss(spec: &CnnSpec, params: &CnnParams, batch: &[f64], labels: &[usize]) -> Result<f64, ModelError> {
    let b = check_batch(spec, params, batch)?;
    let cache = forward_cached(spec, params, batch, b, Mode::Train);
    Ok(cross_entropy(&cache.probs, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once an epoch's running training accuracy reaches this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            early_stop_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidHyperparameter(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::InvalidHyperparameter(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::InvalidHyperparameter(
                "epochs and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    /// Accuracy of train-mode predictions accumulated over the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub wall_seconds: f64,
}

fn assemble(spec: &CnnSpec, data: &[Example], idx: &[usize]) -> Result<(Vec<f64>, Vec<usize>), ModelError> {
    let size = spec.input_size();
    let mut x = Vec::with_capacity(idx.len() * size);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        if data[i].x.len() != size {
            return Err(ModelError::ShapeMismatch(format!(
                "example of {} values, network expects {}",
                data[i].x.len(),
                size
            )));
        }
        x.extend_from_slice(&data[i].x);
        y.push(data[i].label.index());
    }
    Ok((x, y))
}

/// Trains every unfrozen layer. Frozen batch-norm layers keep their running
/// statistics and normalize with them.
pub fn cnn_train(
    spec: &CnnSpec,
    params: &CnnParams,
    train: &[Example],
    cfg: &TrainConfig,
) -> Result<(CnnParams, TrainHistory), ModelError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    params.check_shapes(spec)?;
    let start = Instant::now();
    let mut params = params.clone();
    let mut velocity: Vec<Vec<f64>> = params.trainable().iter().map(|(t, _)| vec![0.0; t.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            let (x, y) = assemble(spec, train, idx)?;
            let b = idx.len();
            let cache = forward_cached(spec, &params, &x, b, Mode::Train);
            let loss = cross_entropy(&cache.probs, &y);
            if !loss.is_finite() {
                return Err(ModelError::DivergenceDetected);
            }
            loss_sum += loss * b as f64;
            correct += cache
                .probs
                .chunks_exact(CLASSES)
                .zip(&y)
                .filter(|(p, &t)| argmax(p) == t)
                .count();
            let grads = backward(spec, &params, &cache, &y, b);

            for ((tensor, frozen), (g, v)) in params
                .trainable_mut()
                .into_iter()
                .zip(grads.0.iter().zip(velocity.iter_mut()))
            {
                if frozen {
                    continue;
                }
                for ((p, gv), vv) in tensor.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vv = cfg.momentum * *vv - cfg.learning_rate * gv;
                    *p += *vv;
                }
            }
            for (conv, bc) in params.convs.iter_mut().zip(&cache.blocks) {
                if conv.frozen || !bc.batch_stats {
                    continue;
                }
                for fi in 0..conv.running_mean.len() {
                    conv.running_mean[fi] =
                        BN_MOMENTUM * conv.running_mean[fi] + (1.0 - BN_MOMENTUM) * bc.batch_mean[fi];
                    conv.running_var[fi] =
                        BN_MOMENTUM * conv.running_var[fi] + (1.0 - BN_MOMENTUM) * bc.batch_var[fi];
                }
            }
        }
        if !params.is_finite() {
            return Err(ModelError::DivergenceDetected);
        }
        let stats = EpochStats {
            loss: loss_sum / train.len() as f64,
            accuracy: correct as f64 / train.len() as f64,
        };
        log::debug!("epoch {}: loss {:.4} acc {:.3}", history.epochs.len(), stats.loss, stats.accuracy);
        let acc = stats.accuracy;
        history.epochs.push(stats);
        if cfg.early_stop_accuracy.is_some_and(|target| acc >= target) {
            break;
        }
    }
    history.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, history))
}

/// Freezes every conv/batch-norm block and retrains the two dense layers.
pub fn cnn_transfer(
    spec: &CnnSpec,
    params: &CnnParams,
    new_data: &[Example],
    cfg: &TrainConfig,
) -> Result<(CnnParams, TrainHistory), ModelError> {
    let mut p = params.clone();
    p.convs.iter_mut().for_each(|c| c.frozen = true);
    p.hidden.frozen = false;
    p.output.frozen = false;
    cnn_train(spec, &p, new_data, cfg)
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode probabilities for many examples, in fixed-size chunks.
pub fn predict_proba_batch(
    spec: &CnnSpec,
    params: &CnnParams,
    xs: &[&[f64]],
) -> Result<Vec<[f64; CLASSES]>, ModelError> {
    let mut out = Vec::with_capacity(xs.len());
    for chunk in xs.chunks(64) {
        let flat: Vec<f64> = chunk.iter().flat_map(|x| x.iter().copied()).collect();
        out.extend(cnn_forward(spec, params, &flat, Mode::Infer)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ClassLabel;

    #[test]
    fn shape_chains() {
        let s = CnnSpec::grid(1, 100, (8, 128)).unwrap();
        assert_eq!(s.block_lengths().unwrap(), vec![(128, 125, 62)]);
        assert_eq!(s.flatten_len(), 3100);
        let s = CnnSpec::grid(4, 100, (8, 128)).unwrap();
        let pooled: Vec<usize> = s.block_lengths().unwrap().iter().map(|b| b.2).collect();
        assert_eq!(pooled, vec![62, 29, 13, 5]);
        assert_eq!(s.flatten_len(), 250);
        assert!(matches!(
            CnnSpec::grid(0, 100, (8, 128)),
            Err(ModelError::InvalidHyperparameter(_))
        ));
        assert!(matches!(
            CnnSpec::grid(4, 100, (8, 16)),
            Err(ModelError::ShapeUnderflow { .. })
        ));
    }

    #[test]
    fn parameter_count_matches_init() {
        let (spec, p) = cnn_build(2, 200, (8, 128), 1).unwrap();
        let n: usize = p.trainable().iter().map(|(t, _)| t.len()).sum();
        assert_eq!(n, spec.parameter_count());
        // conv1: 50·8·4 + 3·50; conv2: 50·50·4 + 3·50; 1450 → 200 → 4
        let flat = 50 * 29;
        assert_eq!(n, 1750 + 10150 + flat * 200 + 200 + 200 * 4 + 4);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let (spec, a) = cnn_build(1, 100, (8, 128), 5).unwrap();
        let (_, b) = cnn_build(1, 100, (8, 128), 5).unwrap();
        let (_, c) = cnn_build(1, 100, (8, 128), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let lim = (6.0f64 / (8.0 * 4.0 + 50.0 * 4.0)).sqrt();
        assert!(a.convs[0].w.iter().all(|w| w.abs() <= lim));
        assert!(a.convs[0].b.iter().all(|&v| v == 0.0));
        assert_eq!(a.hidden.inputs, spec.flatten_len());
    }

    #[test]
    fn softmax_rows() {
        let (spec, p) = cnn_build(2, 100, (8, 64), 2).unwrap();
        let x: Vec<f64> = (0..3 * 8 * 64).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        for mode in [Mode::Train, Mode::Infer] {
            let probs = cnn_forward(&spec, &p, &x, mode).unwrap();
            assert_eq!(probs.len(), 3);
            for r in probs {
                assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        assert!(matches!(
            cnn_forward(&spec, &p, &x[1..], Mode::Infer),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let (spec, p) = cnn_build(1, 20, (2, 16), 3).unwrap();
        let data: Vec<Example> = (0..8)
            .map(|i| Example {
                x: (0..32).map(|j| ((i * j) % 5) as f64).collect(),
                label: ClassLabel::from_index(i % 4).unwrap(),
                t: 0.0,
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (after, _) = cnn_train(&spec, &p, &data, &cfg).unwrap();
        for ((a, _), (b, _)) in after.trainable().iter().zip(p.trainable()) {
            let ab: Vec<u64> = a.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (spec, p) = cnn_build(1, 16, (2, 16), 3).unwrap();
        let data: Vec<Example> = (0..12)
            .map(|i| Example {
                x: (0..32).map(|j| ((i + j) % 7) as f64 * 0.1).collect(),
                label: ClassLabel::from_index(i % 4).unwrap(),
                t: 0.0,
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 4,
            batch_size: 5,
            seed: 11,
            ..Default::default()
        };
        let a = cnn_train(&spec, &p, &data, &cfg).unwrap().0;
        let b = cnn_train(&spec, &p, &data, &cfg).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn rejects_bad_config() {
        let (spec, p) = cnn_build(1, 16, (2, 16), 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cnn_train(&spec, &p, &[], &cfg).is_err());
        assert!(matches!(
            cnn_train(&spec, &p, &[], &TrainConfig::default()),
            Err(ModelError::EmptyDataset)
        ));
        let cfg = TrainConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            cnn_train(&spec, &p, &[], &cfg),
            Err(ModelError::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let (spec, mut p) = cnn_build(1, 16, (2, 16), 3).unwrap();
        p.output.b[0] = f64::NAN;
        let data: Vec<Example> = (0..4)
            .map(|i| Example {
                x: (0..32).map(|j| ((i + j) % 3) as f64).collect(),
                label: ClassLabel::from_index(i).unwrap(),
                t: 0.0,
            })
            .collect();
        assert!(matches!(
            cnn_train(&spec, &p, &data, &TrainConfig::default()),
            Err(ModelError::DivergenceDetected)
        ));
    }

    /// Central finite differences over every trainable entry; returns the
    /// largest relative error against the analytic gradient.
    fn max_rel_error(spec: &CnnSpec, params: &CnnParams, x: &[f64], y: &[usize]) -> f64 {
        let (_, grads) = loss_and_gradients(spec, params, x, y).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let n_tensors = params.trainable().len();
        for t in 0..n_tensors {
            if params.trainable()[t].1 {
                continue;
            }
            for j in 0..params.trainable()[t].0.len() {
                let mut plus = params.clone();
                plus.trainable_mut()[t].0[j] += h;
                let mut minus = params.clone();
                minus.trainable_mut()[t].0[j] -= h;
                let num = (loss(spec, &plus, x, y).unwrap() - loss(spec, &minus, x, y).unwrap()) / (2.0 * h);
                let ana = grads.0[t][j];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        worst
    }

    fn randomized(spec: &CnnSpec, seed: u64) -> CnnParams {
        let mut p = CnnParams::init(spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (t, _) in p.trainable_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        p
    }

    #[test]
    fn gradient_check_single_block() {
        let spec = CnnSpec::custom((2, 16), 1, 3, 4, 8).unwrap();
        let p = randomized(&spec, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..4 * 32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = max_rel_error(&spec, &p, &x, &[0, 1, 2, 3]);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gradient_check_two_blocks() {
        let spec = CnnSpec::custom((2, 20), 2, 3, 3, 6).unwrap();
        let p = randomized(&spec, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x: Vec<f64> = (0..3 * 40).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = max_rel_error(&spec, &p, &x, &[3, 1, 1]);
        assert!(err < 1e-4, "max relative error {err}");

        // A frozen upper block normalizes with running statistics; gradients
        // still flow through it to the trainable block below.
        let mut q = p.clone();
        q.convs[1].frozen = true;
        q.convs[1].running_mean = vec![0.1, -0.2, 0.05];
        q.convs[1].running_var = vec![0.5, 1.5, 0.8];
        let (_, g) = loss_and_gradients(&spec, &q, &x, &[3, 1, 1]).unwrap();
        assert!(g.0[4..8].iter().all(|t| t.iter().all(|&v| v == 0.0)));
        let err = max_rel_error(&spec, &q, &x, &[3, 1, 1]);
        assert!(err < 1e-4, "max relative error with frozen block {err}");
    }

    #[test]
    fn transfer_freezes_feature_blocks() {
        let (spec, p) = cnn_build(1, 12, (2, 16), 4).unwrap();
        let mk = |shift: usize| -> Vec<Example> {
            (0..16)
                .map(|i| Example {
                    x: (0..32).map(|j| (((i + j + shift) % 5) as f64) * 0.3).collect(),
                    label: ClassLabel::from_index(i % 4).unwrap(),
                    t: 0.0,
                })
                .collect()
        };
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 3,
            batch_size: 4,
            ..Default::default()
        };
        let (trained, _) = cnn_train(&spec, &p, &mk(0), &cfg).unwrap();
        let (moved, _) = cnn_transfer(&spec, &trained, &mk(2), &cfg).unwrap();
        let mut frozen_ref = trained.clone();
        frozen_ref.convs.iter_mut().for_each(|c| c.frozen = true);
        assert_eq!(moved.frozen_bytes(), frozen_ref.frozen_bytes());
        assert!(!moved.frozen_bytes().is_empty());
        assert_ne!(moved.hidden.w, trained.hidden.w);
        assert_ne!(moved.output.b, trained.output.b);
    }
}
