//! Minimal deterministic differentiable-classifier engine: softmax
//! regression, one-hidden-layer MLP, and a micro CNN, trained with
//! mini-batch SGD + momentum over balanced per-epoch resamples. All math in
//! f64; same (spec, data, config, seed) gives bit-identical parameters.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{balanced_epoch_sample, LabeledDataset, PoisonedDataset};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Softmax,
    Mlp { hidden: usize },
    CnnMicro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub input_shape: (usize, usize, usize),
    pub num_labels: usize,
}

const CONV1_FILTERS: usize = 8;
const CONV2_FILTERS: usize = 16;
const KERNEL: usize = 3;

/// Spatial and parameter-layout bookkeeping for the micro CNN:
/// conv(8,3x3,same) -> ReLU -> 2x2 maxpool -> conv(16,3x3,same) -> ReLU ->
/// 2x2 maxpool -> flatten -> linear -> softmax.
#[derive(Debug, Clone, Copy)]
struct CnnDims {
    h: usize,
    w: usize,
    c: usize,
    h1: usize,
    w1: usize,
    feat: usize,
}

impl CnnDims {
    fn of(shape: (usize, usize, usize)) -> CnnDims {
        let (h, w, c) = shape;
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        CnnDims {
            h,
            w,
            c,
            h1,
            w1,
            feat: CONV2_FILTERS * h2 * w2,
        }
    }
}

/// (weight_len, bias_len, fan_in, fan_out) per layer, in parameter order.
fn layer_shapes(spec: &ModelSpec) -> Vec<(usize, usize, usize, usize)> {
    let (h, w, c) = spec.input_shape;
    let d = h * w * c;
    let l = spec.num_labels;
    match spec.arch {
        Arch::Softmax => vec![(l * d, l, d, l)],
        Arch::Mlp { hidden } => vec![
            (hidden * d, hidden, d, hidden),
            (l * hidden, l, hidden, l),
        ],
        Arch::CnnMicro => {
            let dims = CnnDims::of(spec.input_shape);
            let k2 = KERNEL * KERNEL;
            vec![
                (CONV1_FILTERS * c * k2, CONV1_FILTERS, c * k2, CONV1_FILTERS * k2),
                (
                    CONV2_FILTERS * CONV1_FILTERS * k2,
                    CONV2_FILTERS,
                    CONV1_FILTERS * k2,
                    CONV2_FILTERS * k2,
                ),
                (l * dims.feat, l, dims.feat, l),
            ]
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_labels < 2 {
            return Err(Error::InvalidParameter("num_labels must be >= 2".into()));
        }
        if let Arch::Mlp { hidden } = self.arch {
            if hidden < 1 {
                return Err(Error::InvalidParameter("mlp hidden must be >= 1".into()));
            }
        }
        if self.arch == Arch::CnnMicro {
            let (h, w, _) = self.input_shape;
            if h / 4 == 0 || w / 4 == 0 {
                return Err(Error::InvalidParameter(
                    "cnn-micro needs input at least 4x4".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        layer_shapes(self).iter().map(|(w, b, _, _)| w + b).sum()
    }

    /// Parameter range of the final linear layer (weights + bias).
    pub fn last_layer_range(&self) -> Range<usize> {
        let shapes = layer_shapes(self);
        let total: usize = shapes.iter().map(|(w, b, _, _)| w + b).sum();
        let (w, b, _, _) = shapes.last().expect("at least one layer");
        (total - w - b)..total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub frozen_prefix: bool,
}

impl Model {
    pub fn trainable_range(&self) -> Range<usize> {
        if self.frozen_prefix {
            self.spec.last_layer_range()
        } else {
            0..self.params.len()
        }
    }
}

/// Glorot-uniform weights (U[-a, a], a = sqrt(6/(fan_in+fan_out))), zero
/// biases, layer by layer in parameter order.
pub fn init_model(spec: &ModelSpec, stream: &Stream) -> Result<Model> {
    spec.validate()?;
    let mut params = Vec::with_capacity(spec.param_count());
    let mut rng = stream.derive("init", 0).rng();
    for (wlen, blen, fan_in, fan_out) in layer_shapes(spec) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..wlen {
            params.push(rng.gen_range(-a..=a));
        }
        params.extend(std::iter::repeat(0.0).take(blen));
    }
    Ok(Model {
        spec: *spec,
        params,
        frozen_prefix: false,
    })
}

// --- Forward / backward ------------------------------------------------------

fn normalize(img: &Image) -> Vec<f64> {
    img.pixels().iter().map(|&p| f64::from(p) / 255.0).collect()
}

/// Interleaved HWC u8 -> planar CHW f64 in [0,1].
fn to_planar(img: &Image) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = vec![0.0; h * w * c];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = f64::from(img.get(y, x, ch)) / 255.0;
            }
        }
    }
    out
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// y = W x + b with W row-major [rows][cols].
fn linear(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out.push(acc);
    }
    out
}

/// Same-padding 3x3 convolution over planar input [in_c][h][w].
fn conv_forward(
    input: &[f64],
    w: &[f64],
    b: &[f64],
    in_c: usize,
    out_c: usize,
    h: usize,
    wd: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_c * h * wd];
    for oc in 0..out_c {
        let plane = &mut out[oc * h * wd..(oc + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b[oc]);
        for ic in 0..in_c {
            let in_plane = &input[ic * h * wd..(ic + 1) * h * wd];
            let kbase = (oc * in_c + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let kw = w[kbase + ky * KERNEL + kx];
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (wd as isize - dx).min(wd as isize) as usize;
                    for y in y_lo..y_hi {
                        let iy = (y as isize + dy) as usize;
                        let row = &mut plane[y * wd..(y + 1) * wd];
                        for x in x_lo..x_hi {
                            let ix = (x as isize + dx) as usize;
                            row[x] += kw * in_plane[iy * wd + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of a same-padding 3x3 convolution. `d_input` may be None for
/// the first layer.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    w: &[f64],
    d_out: &[f64],
    d_w: &mut [f64],
    d_b: &mut [f64],
    mut d_input: Option<&mut [f64]>,
    in_c: usize,
    out_c: usize,
    h: usize,
    wd: usize,
) {
    for oc in 0..out_c {
        let d_plane = &d_out[oc * h * wd..(oc + 1) * h * wd];
        d_b[oc] += d_plane.iter().sum::<f64>();
        for ic in 0..in_c {
            let in_plane = &input[ic * h * wd..(ic + 1) * h * wd];
            let kbase = (oc * in_c + ic) * KERNEL * KERNEL;
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let dy = ky as isize - 1;
                    let dx = kx as isize - 1;
                    let y_lo = (-dy).max(0) as usize;
                    let y_hi = (h as isize - dy).min(h as isize) as usize;
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (wd as isize - dx).min(wd as isize) as usize;
                    let kw = w[kbase + ky * KERNEL + kx];
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let iy = (y as isize + dy) as usize;
                        for x in x_lo..x_hi {
                            let ix = (x as isize + dx) as usize;
                            let g = d_plane[y * wd + x];
                            acc += g * in_plane[iy * wd + ix];
                            if let Some(di) = d_input.as_deref_mut() {
                                di[(ic * h + iy) * wd + ix] += g * kw;
                            }
                        }
                    }
                    d_w[kbase + ky * KERNEL + kx] += acc;
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over planar channels; records argmax offsets.
fn maxpool_forward(
    input: &[f64],
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ph, pw) = (h / 2, w / 2);
    let mut out = vec![0.0; channels * ph * pw];
    let mut arg = vec![0usize; channels * ph * pw];
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for py in 0..ph {
            for px in 0..pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let idx = (py * 2 + dy) * w + px * 2 + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[(c * ph + py) * pw + px] = best;
                arg[(c * ph + py) * pw + px] = c * h * w + best_idx;
            }
        }
    }
    (out, arg)
}

fn maxpool_backward(d_out: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; input_len];
    for (g, &idx) in d_out.iter().zip(arg) {
        d_in[idx] += g;
    }
    d_in
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Logits for one image; the common path of forward and backward.
fn logits_with_cache(model: &Model, img: &Image) -> Result<(Vec<f64>, Cache)> {
    if img.shape() != model.spec.input_shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", model.spec.input_shape),
            got: format!("{:?}", img.shape()),
        });
    }
    let spec = &model.spec;
    let l = spec.num_labels;
    match spec.arch {
        Arch::Softmax => {
            let x = normalize(img);
            let d = x.len();
            let logits = linear(&model.params[..l * d], &model.params[l * d..], &x, l, d);
            Ok((logits, Cache::Softmax { x }))
        }
        Arch::Mlp { hidden } => {
            let x = normalize(img);
            let d = x.len();
            let (w1, rest) = model.params.split_at(hidden * d);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(l * hidden);
            let mut hid = linear(w1, b1, &x, hidden, d);
            relu_inplace(&mut hid);
            let logits = linear(w2, b2, &hid, l, hidden);
            Ok((logits, Cache::Mlp { x, hid }))
        }
        Arch::CnnMicro => {
            let dims = CnnDims::of(spec.input_shape);
            let input = to_planar(img);
            let shapes = layer_shapes(spec);
            let (w1len, b1len, _, _) = shapes[0];
            let (w2len, b2len, _, _) = shapes[1];
            let o1 = 0;
            let o2 = o1 + w1len + b1len;
            let o3 = o2 + w2len + b2len;
            let p = &model.params;

            let mut a1 = conv_forward(
                &input,
                &p[o1..o1 + w1len],
                &p[o1 + w1len..o2],
                dims.c,
                CONV1_FILTERS,
                dims.h,
                dims.w,
            );
            let z1 = a1.clone();
            relu_inplace(&mut a1);
            let (p1, arg1) = maxpool_forward(&a1, CONV1_FILTERS, dims.h, dims.w);

            let mut a2 = conv_forward(
                &p1,
                &p[o2..o2 + w2len],
                &p[o2 + w2len..o3],
                CONV1_FILTERS,
                CONV2_FILTERS,
                dims.h1,
                dims.w1,
            );
            let z2 = a2.clone();
            relu_inplace(&mut a2);
            let (feat, arg2) = maxpool_forward(&a2, CONV2_FILTERS, dims.h1, dims.w1);

            let logits = linear(&p[o3..o3 + l * dims.feat], &p[o3 + l * dims.feat..], &feat, l, dims.feat);
            Ok((
                logits,
                Cache::Cnn {
                    input,
                    z1,
                    p1,
                    arg1,
                    z2,
                    feat,
                    arg2,
                },
            ))
        }
    }
}

enum Cache {
    Softmax {
        x: Vec<f64>,
    },
    Mlp {
        x: Vec<f64>,
        hid: Vec<f64>,
    },
    Cnn {
        input: Vec<f64>,
        z1: Vec<f64>,
        p1: Vec<f64>,
        arg1: Vec<usize>,
        z2: Vec<f64>,
        feat: Vec<f64>,
        arg2: Vec<usize>,
    },
}

/// Probability vector over labels for one image.
pub fn forward(model: &Model, img: &Image) -> Result<Vec<f64>> {
    let (logits, _) = logits_with_cache(model, img)?;
    Ok(softmax(&logits))
}

/// Accumulates one sample's parameter gradient into `grad` (full parameter
/// length) and returns the sample's cross-entropy loss.
fn accumulate_sample_grad(
    model: &Model,
    img: &Image,
    label: usize,
    grad: &mut [f64],
) -> Result<(f64, bool)> {
    let (logits, cache) = logits_with_cache(model, img)?;
    let probs = softmax(&logits);
    let loss = -probs[label].max(1e-300).ln();
    let correct = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
        .map(|(i, _)| i)
        == Some(label);
    let l = model.spec.num_labels;
    let mut dz: Vec<f64> = probs;
    dz[label] -= 1.0;

    match cache {
        Cache::Softmax { x } => {
            let d = x.len();
            for r in 0..l {
                let g = dz[r];
                let row = &mut grad[r * d..(r + 1) * d];
                for (gi, xi) in row.iter_mut().zip(&x) {
                    *gi += g * xi;
                }
                grad[l * d + r] += g;
            }
        }
        Cache::Mlp { x, hid } => {
            let hidden = hid.len();
            let d = x.len();
            let o2 = hidden * d + hidden;
            // last layer
            for r in 0..l {
                let g = dz[r];
                let row = &mut grad[o2 + r * hidden..o2 + (r + 1) * hidden];
                for (gi, hi) in row.iter_mut().zip(&hid) {
                    *gi += g * hi;
                }
                grad[o2 + l * hidden + r] += g;
            }
            if !model.frozen_prefix {
                let w2 = &model.params[o2..o2 + l * hidden];
                let mut dh = vec![0.0; hidden];
                for r in 0..l {
                    let g = dz[r];
                    for (dhi, w) in dh.iter_mut().zip(&w2[r * hidden..(r + 1) * hidden]) {
                        *dhi += g * w;
                    }
                }
                for (dhi, hi) in dh.iter_mut().zip(&hid) {
                    if *hi <= 0.0 {
                        *dhi = 0.0;
                    }
                }
                for r in 0..hidden {
                    let g = dh[r];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut grad[r * d..(r + 1) * d];
                    for (gi, xi) in row.iter_mut().zip(&x) {
                        *gi += g * xi;
                    }
                    grad[hidden * d + r] += g;
                }
            }
        }
        Cache::Cnn {
            input,
            z1,
            p1,
            arg1,
            z2,
            feat,
            arg2,
        } => {
            let dims = CnnDims::of(model.spec.input_shape);
            let shapes = layer_shapes(&model.spec);
            let (w1len, b1len, _, _) = shapes[0];
            let (w2len, b2len, _, _) = shapes[1];
            let o2 = w1len + b1len;
            let o3 = o2 + w2len + b2len;
            // fc layer
            for r in 0..l {
                let g = dz[r];
                let row = &mut grad[o3 + r * dims.feat..o3 + (r + 1) * dims.feat];
                for (gi, fi) in row.iter_mut().zip(&feat) {
                    *gi += g * fi;
                }
                grad[o3 + l * dims.feat + r] += g;
            }
            if !model.frozen_prefix {
                let wfc = &model.params[o3..o3 + l * dims.feat];
                let mut dfeat = vec![0.0; dims.feat];
                for r in 0..l {
                    let g = dz[r];
                    for (di, w) in dfeat.iter_mut().zip(&wfc[r * dims.feat..(r + 1) * dims.feat]) {
                        *di += g * w;
                    }
                }
                let mut da2 = maxpool_backward(&dfeat, &arg2, CONV2_FILTERS * dims.h1 * dims.w1);
                for (d, z) in da2.iter_mut().zip(&z2) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
                let mut dp1 = vec![0.0; CONV1_FILTERS * dims.h1 * dims.w1];
                {
                    let (dw2, db2) = grad[o2..o3].split_at_mut(w2len);
                    conv_backward(
                        &p1,
                        &model.params[o2..o2 + w2len],
                        &da2,
                        dw2,
                        db2,
                        Some(&mut dp1),
                        CONV1_FILTERS,
                        CONV2_FILTERS,
                        dims.h1,
                        dims.w1,
                    );
                }
                let mut da1 = maxpool_backward(&dp1, &arg1, CONV1_FILTERS * dims.h * dims.w);
                for (d, z) in da1.iter_mut().zip(&z1) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
                let (dw1, db1) = grad[..o2].split_at_mut(w1len);
                conv_backward(
                    &input,
                    &model.params[..w1len],
                    &da1,
                    dw1,
                    db1,
                    None,
                    dims.c,
                    CONV1_FILTERS,
                    dims.h,
                    dims.w,
                );
            }
        }
    }
    Ok((loss, correct))
}

/// Mean loss, trainable-slice gradient, and argmax-correct count.
fn batch_grad(model: &Model, batch: &[(&Image, usize)]) -> Result<(f64, Vec<f64>, usize)> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let mut full = vec![0.0; model.params.len()];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for &(img, label) in batch {
        let (l, c) = accumulate_sample_grad(model, img, label, &mut full)?;
        loss += l;
        correct += c as usize;
    }
    let scale = 1.0 / batch.len() as f64;
    loss *= scale;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {loss}")));
    }
    let range = model.trainable_range();
    let grad = full[range].iter().map(|g| g * scale).collect();
    Ok((loss, grad, correct))
}

/// Mean cross-entropy loss and gradient over the trainable parameter slice.
pub fn loss_and_grad(model: &Model, batch: &[(&Image, usize)]) -> Result<(f64, Vec<f64>)> {
    let (loss, grad, _) = batch_grad(model, batch)?;
    Ok((loss, grad))
}

fn loss_only(model: &Model, batch: &[(&Image, usize)]) -> Result<f64> {
    let mut loss = 0.0;
    for &(img, label) in batch {
        let (logits, _) = logits_with_cache(model, img)?;
        let probs = softmax(&logits);
        loss += -probs[label].max(1e-300).ln();
    }
    Ok(loss / batch.len() as f64)
}

/// Central finite-difference check of the analytic gradient on at least 200
/// randomly chosen trainable coordinates. Returns the max relative error
/// |analytic − numeric| / max(1e-12, |analytic| + |numeric|).
pub fn grad_check(model: &Model, batch: &[(&Image, usize)], epsilon: f64) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} must be > 0")));
    }
    let (_, grad) = loss_and_grad(model, batch)?;
    let range = model.trainable_range();
    let n = range.len();
    let picks = 200.min(n);
    let mut rng = Stream::new(0x6ecc_a11e).derive("grad-check", n as u64).rng();
    let coords = rand::seq::index::sample(&mut rng, n, picks);
    let mut perturbed = model.clone();
    let mut max_rel = 0.0f64;
    for local in coords {
        let idx = range.start + local;
        let orig = perturbed.params[idx];
        perturbed.params[idx] = orig + epsilon;
        let plus = loss_only(&perturbed, batch)?;
        perturbed.params[idx] = orig - epsilon;
        let minus = loss_only(&perturbed, batch)?;
        perturbed.params[idx] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let analytic = grad[local];
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

// --- Training -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SelectOn {
    Final,
    BestTest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub per_label: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub lr_decay: f64,
    pub seed: u64,
    pub select_on: SelectOn,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            per_label: 90,
            batch: 32,
            lr: 0.05,
            momentum: 0.9,
            lr_decay: 0.98,
            seed: 0,
            select_on: SelectOn::BestTest,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::InvalidParameter("lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidParameter("momentum must be in [0,1)".into()));
        }
        if self.batch == 0 || self.per_label == 0 {
            return Err(Error::InvalidParameter("batch and per_label must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub selected_epoch: Option<usize>,
}

/// Training data: either a pristine labeled set or a poisoned union. The
/// poisons participate in balanced resampling as ordinary members of the
/// target label.
pub enum TrainData<'a> {
    Pristine(&'a LabeledDataset),
    Poisoned(&'a PoisonedDataset),
}

impl<'a> TrainData<'a> {
    fn entries(&self) -> Vec<(&'a Image, usize)> {
        match self {
            TrainData::Pristine(ds) => ds.entries(),
            TrainData::Poisoned(ds) => ds.entries(),
        }
    }

    fn label_count(&self) -> usize {
        match self {
            TrainData::Pristine(ds) => ds.label_count(),
            TrainData::Poisoned(ds) => ds.label_count(),
        }
    }
}

impl<'a> From<&'a LabeledDataset> for TrainData<'a> {
    fn from(ds: &'a LabeledDataset) -> Self {
        TrainData::Pristine(ds)
    }
}

impl<'a> From<&'a PoisonedDataset> for TrainData<'a> {
    fn from(ds: &'a PoisonedDataset) -> Self {
        TrainData::Poisoned(ds)
    }
}

fn argmax_accuracy(model: &Model, entries: &[(&Image, usize)]) -> Result<f64> {
    if entries.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for &(img, label) in entries {
        let probs = forward(model, img)?;
        let arg = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
            .map(|(i, _)| i)
            .expect("non-empty probs");
        if arg == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / entries.len() as f64)
}

/// Mini-batch SGD with momentum over balanced epoch resamples. Returns the
/// checkpoint selected by `cfg.select_on` and the per-epoch history.
pub fn train(
    model: &Model,
    data: TrainData<'_>,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    cfg.validate()?;
    let stream = Stream::new(cfg.seed);
    let entries = data.entries();
    let label_count = data.label_count();
    if label_count != model.spec.num_labels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", model.spec.num_labels),
            got: format!("{label_count}"),
        });
    }

    let mut current = model.clone();
    let range = current.trainable_range();
    let mut velocity = vec![0.0f64; range.len()];
    let mut history = TrainHistory {
        epochs: Vec::with_capacity(cfg.epochs),
        selected_epoch: None,
    };
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    let test_entries = test.entries();

    for epoch in 0..cfg.epochs {
        let mut rng = stream.derive("epoch", epoch as u64).rng();
        let epoch_sample = balanced_epoch_sample(&entries, label_count, cfg.per_label, &mut rng);
        let lr = cfg.lr * cfg.lr_decay.powi(epoch as i32);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for batch in epoch_sample.chunks(cfg.batch) {
            let (loss, grad, c) = batch_grad(&current, batch).map_err(|e| match e {
                Error::Numerical(msg) => Error::Training {
                    epoch,
                    message: msg,
                },
                other => other,
            })?;
            loss_sum += loss;
            batches += 1;
            correct += c;
            let slice = &mut current.params[range.clone()];
            for ((v, g), p) in velocity.iter_mut().zip(&grad).zip(slice.iter_mut()) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
        }

        // running accuracy: tallied batch by batch at pre-update parameters
        let train_accuracy = correct as f64 / epoch_sample.len() as f64;
        let test_accuracy = argmax_accuracy(&current, &test_entries)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_accuracy,
            test_accuracy,
        });
        let improved = best
            .as_ref()
            .map_or(true, |(acc, _, _)| test_accuracy > *acc);
        if improved {
            best = Some((test_accuracy, current.params.clone(), epoch));
        }
    }

    match cfg.select_on {
        SelectOn::Final => {
            history.selected_epoch = cfg.epochs.checked_sub(1);
        }
        SelectOn::BestTest => {
            if let Some((_, params, epoch)) = best {
                current.params = params;
                history.selected_epoch = Some(epoch);
            }
        }
    }
    Ok((current, history))
}

/// Freezes everything before the final linear layer, reinitializes that
/// layer, and trains it on the (poisoned) data.
pub fn finetune_last_layer(
    feature_model: &Model,
    data: TrainData<'_>,
    test: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<(Model, TrainHistory)> {
    if feature_model.spec.arch == Arch::Softmax {
        return Err(Error::Mode(
            "softmax has no feature prefix to freeze".into(),
        ));
    }
    let mut model = feature_model.clone();
    model.frozen_prefix = true;
    let range = model.spec.last_layer_range();
    let shapes = layer_shapes(&model.spec);
    let (wlen, _, fan_in, fan_out) = *shapes.last().expect("layers non-empty");
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = Stream::new(cfg.seed).derive("finetune-init", 0).rng();
    for (i, idx) in range.clone().enumerate() {
        model.params[idx] = if i < wlen { rng.gen_range(-a..=a) } else { 0.0 };
    }
    train(&model, data, test, cfg)
}

// --- Prediction -----------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Label(usize),
    NotSure,
}

/// Argmax label if its probability strictly exceeds the threshold,
/// otherwise NOT-SURE. Also returns the top probability.
pub fn predict(model: &Model, img: &Image, threshold: f64) -> Result<(Verdict, f64)> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidParameter(format!(
            "threshold {threshold} outside [0,1]"
        )));
    }
    let probs = forward(model, img)?;
    let (arg, &top) = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
        .expect("non-empty probs");
    let verdict = if top > threshold {
        Verdict::Label(arg)
    } else {
        Verdict::NotSure
    };
    Ok((verdict, top))
}

// --- Checkpoint and history IO ----------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"BFM1";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
    frozen_prefix: bool,
}

/// Binary checkpoint: magic "BFM1", u32 LE JSON header length, the JSON
/// header, then the little-endian f64 parameter vector.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        spec: model.spec,
        frozen_prefix: model.frozen_prefix,
    })?;
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(CKPT_MAGIC).map_err(|e| Error::io(path, e))?;
    f.write_all(&(header.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&header).map_err(|e| Error::io(path, e))?;
    for p in &model.params {
        f.write_all(&p.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..4] != CKPT_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "missing BFM1 magic".into(),
        });
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: "truncated header".into(),
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    let body = &bytes[8 + hlen..];
    let expected = header.spec.param_count();
    if body.len() != expected * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("expected {} parameter bytes, found {}", expected * 8, body.len()),
        });
    }
    let params = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Model {
        spec: header.spec,
        params,
        frozen_prefix: header.frozen_prefix,
    })
}

/// Per-epoch history as JSON lines.
pub fn write_history(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for rec in &history.epochs {
        serde_json::to_writer(&mut f, rec)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synth_generate;

    fn spec(arch: Arch) -> ModelSpec {
        ModelSpec {
            arch,
            input_shape: (8, 8, 3),
            num_labels: 4,
        }
    }

    fn batch_of(ds: &LabeledDataset, n: usize) -> Vec<(&Image, usize)> {
        ds.entries().into_iter().take(n).collect()
    }

    #[test]
    fn init_deterministic_and_counts() {
        let s = Stream::new(30);
        let sp = ModelSpec {
            arch: Arch::Softmax,
            input_shape: (32, 32, 3),
            num_labels: 10,
        };
        assert_eq!(sp.param_count(), 3072 * 10 + 10);
        let a = init_model(&sp, &s).unwrap();
        let b = init_model(&sp, &s).unwrap();
        assert_eq!(a.params, b.params);
        // biases (last 10 entries) zero at init
        assert!(a.params[3072 * 10..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn softmax_outputs_normalized_and_shift_invariant() {
        let s = Stream::new(31);
        let ds = synth_generate(4, 2, (8, 8, 3), &s).unwrap();
        let img = &ds.samples()[0].image;
        let model = init_model(&spec(Arch::CnnMicro), &s).unwrap();
        let probs = forward(&model, img).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(probs.iter().all(|&p| p >= 0.0));

        // all-zero softmax weights -> uniform distribution
        let mut zero = init_model(&spec(Arch::Softmax), &s).unwrap();
        zero.params.iter_mut().for_each(|p| *p = 0.0);
        let probs = forward(&zero, img).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));

        // shift invariance of the softmax itself
        let logits = vec![0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = logits.iter().map(|z| z + 7.5).collect();
        for (a, b) in softmax(&logits).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_logit_gradient_is_p_minus_onehot() {
        let s = Stream::new(32);
        let ds = synth_generate(4, 2, (8, 8, 3), &s).unwrap();
        let img = &ds.samples()[0].image;
        let label = ds.samples()[0].label;
        let model = init_model(&spec(Arch::Softmax), &s).unwrap();
        let probs = forward(&model, img).unwrap();
        let (_, grad) = loss_and_grad(&model, &[(img, label)]).unwrap();
        // bias gradient equals the logit gradient p - one_hot(y)
        let d = 8 * 8 * 3;
        for r in 0..4 {
            let expected = probs[r] - if r == label { 1.0 } else { 0.0 };
            assert!((grad[4 * d + r] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_batch_same_loss_and_grad() {
        let s = Stream::new(33);
        let ds = synth_generate(4, 2, (8, 8, 3), &s).unwrap();
        let model = init_model(&spec(Arch::Mlp { hidden: 6 }), &s).unwrap();
        let single = batch_of(&ds, 2);
        let mut doubled = single.clone();
        doubled.extend(single.iter().copied());
        let (l1, g1) = loss_and_grad(&model, &single).unwrap();
        let (l2, g2) = loss_and_grad(&model, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_all_archs() {
        let s = Stream::new(34);
        let ds = synth_generate(4, 3, (8, 8, 3), &s).unwrap();
        let batch = batch_of(&ds, 4);
        for (arch, tol) in [
            (Arch::Softmax, 1e-6),
            (Arch::Mlp { hidden: 10 }, 1e-5),
            (Arch::CnnMicro, 1e-4),
        ] {
            let model = init_model(&spec(arch), &s).unwrap();
            let err = grad_check(&model, &batch, 1e-5).unwrap();
            assert!(err < tol, "{arch:?}: max rel error {err}");
        }
        let model = init_model(&spec(Arch::Softmax), &s).unwrap();
        assert!(grad_check(&model, &batch, 0.0).is_err());
    }

    #[test]
    fn frozen_prefix_grad_covers_last_layer_only() {
        let s = Stream::new(35);
        let ds = synth_generate(4, 2, (8, 8, 3), &s).unwrap();
        let mut model = init_model(&spec(Arch::CnnMicro), &s).unwrap();
        model.frozen_prefix = true;
        let (_, grad) = loss_and_grad(&model, &batch_of(&ds, 2)).unwrap();
        assert_eq!(grad.len(), model.spec.last_layer_range().len());
    }

    #[test]
    fn train_zero_epochs_and_determinism() {
        let s = Stream::new(36);
        let ds = synth_generate(4, 10, (8, 8, 3), &s).unwrap();
        let test = synth_generate(4, 2, (8, 8, 3), &s.derive("test", 0)).unwrap();
        let model = init_model(&spec(Arch::Softmax), &s).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            per_label: 8,
            ..TrainConfig::default()
        };
        let (out, hist) = train(&model, (&ds).into(), &test, &cfg).unwrap();
        assert_eq!(out.params, model.params);
        assert!(hist.epochs.is_empty());

        let cfg = TrainConfig {
            epochs: 3,
            per_label: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let (a, ha) = train(&model, (&ds).into(), &test, &cfg).unwrap();
        let (b, hb) = train(&model, (&ds).into(), &test, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ha, hb);
    }

    #[test]
    fn linearly_separable_toy_set_reaches_full_train_accuracy() {
        // two labels: bright vs dark images
        let mut samples = Vec::new();
        let s = Stream::new(37);
        let mut rng = s.rng();
        for i in 0..40 {
            let base: u8 = if i % 2 == 0 { 40 } else { 210 };
            let pixels: Vec<u8> = (0..8 * 8 * 3)
                .map(|_| base.saturating_add(rng.gen_range(0..30)))
                .collect();
            samples.push((Image::new(8, 8, 3, pixels).unwrap(), i % 2));
        }
        let ds = LabeledDataset::new(samples, 2).unwrap();
        let model = init_model(
            &ModelSpec {
                arch: Arch::Softmax,
                input_shape: (8, 8, 3),
                num_labels: 2,
            },
            &s,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            per_label: 20,
            seed: 1,
            select_on: SelectOn::Final,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, (&ds).into(), &ds, &cfg).unwrap();
        assert_eq!(argmax_accuracy(&trained, &ds.entries()).unwrap(), 1.0);
    }

    #[test]
    fn finetune_freezes_prefix() {
        let s = Stream::new(38);
        let ds = synth_generate(4, 8, (8, 8, 3), &s).unwrap();
        let test = synth_generate(4, 2, (8, 8, 3), &s.derive("test", 0)).unwrap();
        let model = init_model(&spec(Arch::CnnMicro), &s).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            per_label: 6,
            seed: 3,
            ..TrainConfig::default()
        };
        let (tuned, _) = finetune_last_layer(&model, (&ds).into(), &test, &cfg).unwrap();
        let prefix = model.spec.last_layer_range().start;
        assert_eq!(&tuned.params[..prefix], &model.params[..prefix]);
        assert!(tuned.frozen_prefix);

        let sm = init_model(&spec(Arch::Softmax), &s).unwrap();
        assert!(matches!(
            finetune_last_layer(&sm, (&ds).into(), &test, &cfg),
            Err(Error::Mode(_))
        ));
    }

    #[test]
    fn predict_threshold_semantics() {
        let s = Stream::new(39);
        let ds = synth_generate(4, 2, (8, 8, 3), &s).unwrap();
        let img = &ds.samples()[0].image;
        // uniform model: top prob 0.25 < 0.85 -> NOT-SURE
        let mut zero = init_model(&spec(Arch::Softmax), &s).unwrap();
        zero.params.iter_mut().for_each(|p| *p = 0.0);
        let (verdict, top) = predict(&zero, img, 0.85).unwrap();
        assert_eq!(verdict, Verdict::NotSure);
        assert!((top - 0.25).abs() < 1e-12);
        // threshold 0 -> always argmax
        let (verdict, _) = predict(&zero, img, 0.0).unwrap();
        assert!(matches!(verdict, Verdict::Label(_)));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let s = Stream::new(40);
        let model = init_model(&spec(Arch::Mlp { hidden: 5 }), &s).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bfm1");
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"BFM1");
    }
}
