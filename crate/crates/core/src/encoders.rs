//! Toy encoder stack. Each modality has a position-wise backbone stand-in,
//! a spatial attention gate and a Gaussian latent head; on top sit the shared
//! category classifier, the local (spatial) and global domain classifiers and
//! the two cross-modal codecs.
//!
//! Forward passes return traces that the matching `*_backward` functions
//! consume, so every gradient here is written out by hand.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Modality, SampleRecord};
use crate::error::{Error, Result};
use crate::rng::{self, TAG_INIT, TAG_NOISE};
use crate::tensor::{
    dense_backward, dense_forward, leaky_relu, leaky_relu_grad, sigmoid, Tensor,
};

pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;
/// Domain classifier outputs are clipped to `[EPS_P, 1 - EPS_P]`.
pub const EPS_P: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub grid: usize,
    pub channels: usize,
    pub hidden: usize,
    pub latent: usize,
    pub codec: usize,
    pub semantic: usize,
    pub semantic_hidden: usize,
    /// Width of the graph convolution before pairwise pooling; must be even.
    pub gcn_hidden: usize,
    pub num_seen: usize,
}

impl Default for DimensionSpec {
    fn default() -> Self {
        Self {
            grid: 7,
            channels: 8,
            hidden: 64,
            latent: 32,
            codec: 16,
            semantic: 16,
            semantic_hidden: 32,
            gcn_hidden: 32,
            num_seen: 6,
        }
    }
}

impl DimensionSpec {
    pub fn map_len(&self) -> usize {
        self.grid * self.grid * self.channels
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.grid,
            self.channels,
            self.hidden,
            self.latent,
            self.codec,
            self.semantic,
            self.semantic_hidden,
            self.gcn_hidden,
            self.num_seen,
        ];
        if all.contains(&0) {
            return Err(Error::InvalidArgument("dimensions must be positive".into()));
        }
        if !self.gcn_hidden.is_multiple_of(2) {
            return Err(Error::InvalidArgument("gcn_hidden must be even".into()));
        }
        Ok(())
    }

    /// Every trainable tensor with its shape. Weights are `[fan_in, fan_out]`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        fn dense(out: &mut Vec<(String, Vec<usize>)>, name: &str, fan_in: usize, fan_out: usize) {
            out.push((format!("{name}.w"), vec![fan_in, fan_out]));
            out.push((format!("{name}.b"), vec![fan_out]));
        }
        let mut out = Vec::new();
        for m in ["img", "skt"] {
            dense(&mut out, &format!("{m}.backbone"), self.channels, self.channels);
            dense(&mut out, &format!("{m}.att"), self.channels, 1);
            dense(&mut out, &format!("{m}.head.hidden"), self.map_len(), self.hidden);
            dense(&mut out, &format!("{m}.head.mean"), self.hidden, self.latent);
            dense(&mut out, &format!("{m}.head.logvar"), self.hidden, self.latent);
        }
        dense(&mut out, "cls", self.latent, self.num_seen);
        dense(&mut out, "local_disc", self.cells(), 1);
        dense(&mut out, "global_disc", self.latent, 1);
        for c in ["codec_p", "codec_a"] {
            dense(&mut out, &format!("{c}.enc.mean"), self.map_len(), self.codec);
            dense(&mut out, &format!("{c}.enc.logvar"), self.map_len(), self.codec);
            dense(&mut out, &format!("{c}.dec"), self.codec, self.latent);
        }
        let (s, h) = (self.semantic, self.semantic_hidden);
        dense(&mut out, "sem.g1.0", s, h);
        dense(&mut out, "sem.g1.1", h, h);
        dense(&mut out, "sem.g1.2", h, h);
        // graph convolution has no bias
        out.push(("sem.g2.w".into(), vec![s, self.gcn_hidden]));
        dense(&mut out, "sem.g3.0", h + self.gcn_hidden / 2, h);
        dense(&mut out, "sem.g3.1", h, h);
        dense(&mut out, "sem.g3.2", h, self.latent);
        out
    }
}

pub fn modality_prefix(m: Modality) -> &'static str {
    match m {
        Modality::Image => "img",
        Modality::Sketch => "skt",
    }
}

/// Named trainable tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(dims: &DimensionSpec, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = rng::stream(seed, &[TAG_INIT]);
        let mut tensors = BTreeMap::new();
        let mut shapes = dims.parameter_shapes();
        shapes.sort();
        for (name, shape) in shapes {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".w") {
                let fan_in = shape[0];
                let fan_out = shape.get(1).copied().unwrap_or(1);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in &mut t.data {
                    *v = rng.random_range(-a..a);
                }
            }
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape)))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        match self.tensors.get(name) {
            Some(t) => &t.data,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut [f64] {
        match self.tensors.get_mut(name) {
            Some(t) => &mut t.data,
            None => panic!("unknown parameter `{name}`"),
        }
    }

    /// Weight and bias buffers of the dense layer `prefix`.
    pub fn dense_mut(&mut self, prefix: &str) -> (&mut [f64], &mut [f64]) {
        let (wn, bn) = (format!("{prefix}.w"), format!("{prefix}.b"));
        let mut w = None;
        let mut b = None;
        for (k, t) in self.tensors.iter_mut() {
            if *k == wn {
                w = Some(t.data.as_mut_slice());
            } else if *k == bn {
                b = Some(t.data.as_mut_slice());
            }
        }
        match (w, b) {
            (Some(w), Some(b)) => (w, b),
            _ => panic!("unknown dense layer `{prefix}`"),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn check_shapes(&self, dims: &DimensionSpec) -> Result<()> {
        let expected = dims.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape == shape => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "`{name}` has shape {:?}, expected {shape:?}",
                        t.shape
                    )))
                }
                None => return Err(Error::Shape(format!("missing tensor `{name}`"))),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid: usize,
    pub channels: usize,
    /// Channel-fastest, `grid * grid * channels` values.
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianLatent {
    pub mean: Vec<f64>,
    /// Already clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Vec<f64>,
    pub sample: Vec<f64>,
    pub noise: Vec<f64>,
}

impl GaussianLatent {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Distribution without a draw; used where only (mean, log_var) matter.
    pub fn from_moments(mean: Vec<f64>, log_var: Vec<f64>) -> Self {
        let noise = vec![0.0; mean.len()];
        Self {
            sample: mean.clone(),
            mean,
            log_var,
            noise,
        }
    }
}

pub fn standard_normal_noise(noise_seed: u64, n: usize) -> Vec<f64> {
    let mut rng = rng::stream(noise_seed, &[TAG_NOISE]);
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

// ---------------------------------------------------------------------------
// Backbone and attention

fn check_map(dims_grid: usize, dims_channels: usize, len: usize) -> Result<()> {
    if len != dims_grid * dims_grid * dims_channels {
        return Err(Error::Shape(format!(
            "feature map has {len} values, expected {dims_grid}x{dims_grid}x{dims_channels}"
        )));
    }
    Ok(())
}

/// Position-wise `tanh(x W + b)` over the channel vector of every cell.
pub fn backbone_forward(
    params: &ModelParams,
    dims: &DimensionSpec,
    sample: &SampleRecord,
) -> Result<FeatureMap> {
    check_map(dims.grid, dims.channels, sample.feature_map.len())?;
    let p = modality_prefix(sample.modality);
    Ok(FeatureMap {
        grid: dims.grid,
        channels: dims.channels,
        data: backbone_raw(params, p, dims.channels, &sample.feature_map),
    })
}

fn backbone_raw(params: &ModelParams, prefix: &str, c: usize, input: &[f64]) -> Vec<f64> {
    let w = params.get(&format!("{prefix}.backbone.w"));
    let b = params.get(&format!("{prefix}.backbone.b"));
    let mut out = vec![0.0; input.len()];
    for (x, y) in input.chunks(c).zip(out.chunks_mut(c)) {
        dense_forward(x, w, b, y);
        for v in y.iter_mut() {
            *v = v.tanh();
        }
    }
    out
}

/// Spatial gate: one logistic value per cell, broadcast over channels.
pub fn attention_apply(
    params: &ModelParams,
    modality: Modality,
    map: &FeatureMap,
) -> Result<FeatureMap> {
    check_map(map.grid, map.channels, map.data.len())?;
    let (out, _) = attention_raw(params, modality_prefix(modality), map.channels, &map.data);
    Ok(FeatureMap {
        grid: map.grid,
        channels: map.channels,
        data: out,
    })
}

fn attention_raw(params: &ModelParams, prefix: &str, c: usize, input: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let w = params.get(&format!("{prefix}.att.w"));
    let b = params.get(&format!("{prefix}.att.b"));
    let mut gate = Vec::with_capacity(input.len() / c);
    let mut out = vec![0.0; input.len()];
    for (x, y) in input.chunks(c).zip(out.chunks_mut(c)) {
        let mut s = [0.0];
        dense_forward(x, w, b, &mut s);
        let g = sigmoid(s[0]);
        gate.push(g);
        for (yo, xi) in y.iter_mut().zip(x) {
            *yo = xi * g;
        }
    }
    (out, gate)
}

/// Mean over channels of every cell.
pub fn spatial_average_pool(map: &FeatureMap) -> Vec<f64> {
    pool_raw(&map.data, map.channels)
}

fn pool_raw(data: &[f64], c: usize) -> Vec<f64> {
    data.chunks(c)
        .map(|cell| cell.iter().sum::<f64>() / c as f64)
        .collect()
}

// ---------------------------------------------------------------------------
// Gaussian heads

#[derive(Debug, Clone)]
struct HeadTrace {
    lv_raw: Vec<f64>,
    latent: GaussianLatent,
}

fn gaussian_head(params: &ModelParams, prefix: &str, x: &[f64], noise: &[f64]) -> HeadTrace {
    let mw = params.get(&format!("{prefix}.mean.w"));
    let mb = params.get(&format!("{prefix}.mean.b"));
    let vw = params.get(&format!("{prefix}.logvar.w"));
    let vb = params.get(&format!("{prefix}.logvar.b"));
    let mut mean = vec![0.0; mb.len()];
    let mut lv_raw = vec![0.0; vb.len()];
    dense_forward(x, mw, mb, &mut mean);
    dense_forward(x, vw, vb, &mut lv_raw);
    let log_var: Vec<f64> = lv_raw
        .iter()
        .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
        .collect();
    let sample = mean
        .iter()
        .zip(&log_var)
        .zip(noise)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    HeadTrace {
        lv_raw,
        latent: GaussianLatent {
            mean,
            log_var,
            sample,
            noise: noise.to_vec(),
        },
    }
}

/// Upstream gradients reaching a Gaussian head.
#[derive(Debug, Clone, Default)]
pub struct LatentGrad {
    pub sample: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            sample: vec![0.0; n],
            mean: vec![0.0; n],
            log_var: vec![0.0; n],
        }
    }
}

fn gaussian_head_backward(
    params: &ModelParams,
    prefix: &str,
    x: &[f64],
    trace: &HeadTrace,
    up: &LatentGrad,
    grads: &mut ModelParams,
    dx: &mut [f64],
) {
    let lat = &trace.latent;
    let n = lat.dim();
    let mut d_mean = vec![0.0; n];
    let mut d_lv = vec![0.0; n];
    for i in 0..n {
        d_mean[i] = up.mean[i] + up.sample[i];
        let dlv = up.log_var[i] + up.sample[i] * lat.noise[i] * 0.5 * (0.5 * lat.log_var[i]).exp();
        let raw = trace.lv_raw[i];
        d_lv[i] = if raw > LOG_VAR_MIN && raw < LOG_VAR_MAX {
            dlv
        } else {
            0.0
        };
    }
    {
        let (dw, db) = grads.dense_mut(&format!("{prefix}.mean"));
        dense_backward(x, params.get(&format!("{prefix}.mean.w")), &d_mean, dw, db, Some(&mut *dx));
    }
    let (dw, db) = grads.dense_mut(&format!("{prefix}.logvar"));
    dense_backward(x, params.get(&format!("{prefix}.logvar.w")), &d_lv, dw, db, Some(dx));
}

// ---------------------------------------------------------------------------
// Full modality branch

/// Everything a branch forward pass produces.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub modality: Modality,
    pub backbone: Vec<f64>,
    pub gate: Vec<f64>,
    pub attended: Vec<f64>,
    pub pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    head: HeadTrace,
}

impl BranchTrace {
    pub fn latent(&self) -> &GaussianLatent {
        &self.head.latent
    }

    pub fn attended_map(&self, dims: &DimensionSpec) -> FeatureMap {
        FeatureMap {
            grid: dims.grid,
            channels: dims.channels,
            data: self.attended.clone(),
        }
    }
}

/// Gradients flowing into a branch from the losses.
#[derive(Debug, Clone)]
pub struct BranchGrad {
    pub latent: LatentGrad,
    pub attended: Vec<f64>,
    pub pooled: Vec<f64>,
}

impl BranchGrad {
    pub fn zeros(dims: &DimensionSpec) -> Self {
        Self {
            latent: LatentGrad::zeros(dims.latent),
            attended: vec![0.0; dims.map_len()],
            pooled: vec![0.0; dims.cells()],
        }
    }
}

pub fn branch_forward(
    params: &ModelParams,
    dims: &DimensionSpec,
    modality: Modality,
    input: &[f64],
    noise: &[f64],
) -> BranchTrace {
    let p = modality_prefix(modality);
    let c = dims.channels;
    let backbone = backbone_raw(params, p, c, input);
    let (attended, gate) = attention_raw(params, p, c, &backbone);
    let pooled = pool_raw(&attended, c);
    let mut hidden_pre = vec![0.0; dims.hidden];
    dense_forward(
        &attended,
        params.get(&format!("{p}.head.hidden.w")),
        params.get(&format!("{p}.head.hidden.b")),
        &mut hidden_pre,
    );
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| leaky_relu(v)).collect();
    let head = gaussian_head(params, &format!("{p}.head"), &hidden, noise);
    BranchTrace {
        modality,
        backbone,
        gate,
        attended,
        pooled,
        hidden_pre,
        hidden,
        head,
    }
}

pub fn branch_backward(
    params: &ModelParams,
    dims: &DimensionSpec,
    input: &[f64],
    trace: &BranchTrace,
    up: &BranchGrad,
    grads: &mut ModelParams,
) {
    let p = modality_prefix(trace.modality);
    let c = dims.channels;

    let mut d_hidden = vec![0.0; dims.hidden];
    gaussian_head_backward(
        params,
        &format!("{p}.head"),
        &trace.hidden,
        &trace.head,
        &up.latent,
        grads,
        &mut d_hidden,
    );
    let d_pre: Vec<f64> = d_hidden
        .iter()
        .zip(&trace.hidden_pre)
        .map(|(d, &x)| d * leaky_relu_grad(x))
        .collect();

    let mut d_att = up.attended.clone();
    {
        let (dw, db) = grads.dense_mut(&format!("{p}.head.hidden"));
        dense_backward(
            &trace.attended,
            params.get(&format!("{p}.head.hidden.w")),
            &d_pre,
            dw,
            db,
            Some(&mut d_att),
        );
    }
    for (cell, &dp) in d_att.chunks_mut(c).zip(&up.pooled) {
        for v in cell {
            *v += dp / c as f64;
        }
    }

    // attended = backbone * gate
    let att_w = params.get(&format!("{p}.att.w"));
    let mut d_backbone = vec![0.0; trace.backbone.len()];
    {
        let (dw, db) = grads.dense_mut(&format!("{p}.att"));
        for (cell, ((x, dy), dx)) in trace
            .backbone
            .chunks(c)
            .zip(d_att.chunks(c))
            .zip(d_backbone.chunks_mut(c))
            .enumerate()
        {
            let g = trace.gate[cell];
            let d_gate: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
            let ds = [d_gate * g * (1.0 - g)];
            for ((dxi, dyi), _) in dx.iter_mut().zip(dy).zip(x) {
                *dxi = dyi * g;
            }
            dense_backward(x, att_w, &ds, dw, db, Some(dx));
        }
    }

    // backbone = tanh(input W + b)
    let bb_w = params.get(&format!("{p}.backbone.w"));
    let (dw, db) = grads.dense_mut(&format!("{p}.backbone"));
    let mut dpre = vec![0.0; c];
    for ((x, y), dy) in input.chunks(c).zip(trace.backbone.chunks(c)).zip(d_backbone.chunks(c)) {
        for i in 0..c {
            dpre[i] = dy[i] * (1.0 - y[i] * y[i]);
        }
        dense_backward(x, bb_w, &dpre, dw, db, None);
    }
}

/// Full latent pipeline for one attended map: hidden layer, mean and
/// log-variance heads, reparameterized draw from `noise_seed`.
pub fn latent_head(
    params: &ModelParams,
    dims: &DimensionSpec,
    modality: Modality,
    attended: &FeatureMap,
    noise_seed: u64,
) -> Result<GaussianLatent> {
    check_map(dims.grid, dims.channels, attended.data.len())?;
    let p = modality_prefix(modality);
    let mut pre = vec![0.0; dims.hidden];
    dense_forward(
        &attended.data,
        params.get(&format!("{p}.head.hidden.w")),
        params.get(&format!("{p}.head.hidden.b")),
        &mut pre,
    );
    let hidden: Vec<f64> = pre.iter().map(|&v| leaky_relu(v)).collect();
    let noise = standard_normal_noise(noise_seed, dims.latent);
    Ok(gaussian_head(params, &format!("{p}.head"), &hidden, &noise).latent)
}

// ---------------------------------------------------------------------------
// Classifiers

/// Category logits over the seen classes.
pub fn classify(params: &ModelParams, z: &[f64]) -> Vec<f64> {
    let b = params.get("cls.b");
    let mut out = vec![0.0; b.len()];
    dense_forward(z, params.get("cls.w"), b, &mut out);
    out
}

pub fn classify_backward(params: &ModelParams, z: &[f64], d_logits: &[f64], grads: &mut ModelParams, dz: &mut [f64]) {
    let (dw, db) = grads.dense_mut("cls");
    dense_backward(z, params.get("cls.w"), d_logits, dw, db, Some(dz));
}

/// Logistic output of a one-unit dense layer, clipped; also returns the
/// derivative of the clipped output w.r.t. the logit.
fn binary_classify(params: &ModelParams, prefix: &str, x: &[f64]) -> (f64, f64) {
    let mut s = [0.0];
    dense_forward(
        x,
        params.get(&format!("{prefix}.w")),
        params.get(&format!("{prefix}.b")),
        &mut s,
    );
    let p = sigmoid(s[0]);
    if p < EPS_P {
        (EPS_P, 0.0)
    } else if p > 1.0 - EPS_P {
        (1.0 - EPS_P, 0.0)
    } else {
        (p, p * (1.0 - p))
    }
}

fn binary_classify_backward(
    params: &ModelParams,
    prefix: &str,
    x: &[f64],
    d_out: f64,
    slope: f64,
    grads: &mut ModelParams,
    dx: Option<&mut [f64]>,
) {
    let ds = [d_out * slope];
    let (dw, db) = grads.dense_mut(prefix);
    dense_backward(x, params.get(&format!("{prefix}.w")), &ds, dw, db, dx);
}

/// Local adversarial classifier `l` on the channel-pooled grid.
pub fn local_domain_classify(params: &ModelParams, pooled: &[f64]) -> f64 {
    binary_classify(params, "local_disc", pooled).0
}

/// Optional global domain classifier `f` on latent samples.
pub fn global_domain_classify(params: &ModelParams, z: &[f64]) -> f64 {
    binary_classify(params, "global_disc", z).0
}

pub(crate) fn local_disc_with_slope(params: &ModelParams, pooled: &[f64]) -> (f64, f64) {
    binary_classify(params, "local_disc", pooled)
}

pub(crate) fn global_disc_with_slope(params: &ModelParams, z: &[f64]) -> (f64, f64) {
    binary_classify(params, "global_disc", z)
}

pub(crate) fn local_disc_backward(
    params: &ModelParams,
    pooled: &[f64],
    d_out: f64,
    slope: f64,
    grads: &mut ModelParams,
    d_pooled: &mut [f64],
) {
    binary_classify_backward(params, "local_disc", pooled, d_out, slope, grads, Some(d_pooled));
}

pub(crate) fn global_disc_backward(
    params: &ModelParams,
    z: &[f64],
    d_out: f64,
    slope: f64,
    grads: &mut ModelParams,
    dz: &mut [f64],
) {
    binary_classify_backward(params, "global_disc", z, d_out, slope, grads, Some(dz));
}

// ---------------------------------------------------------------------------
// Cross-modal codecs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Codec {
    /// Image-side codec: attended image map to the sketch latent.
    VP,
    /// Sketch-side codec: attended sketch map to the image latent.
    VAlpha,
}

impl Codec {
    pub fn prefix(self) -> &'static str {
        match self {
            Codec::VP => "codec_p",
            Codec::VAlpha => "codec_a",
        }
    }
}

#[derive(Debug, Clone)]
pub struct CodecTrace {
    head: HeadTrace,
    pub reconstruction: Vec<f64>,
}

impl CodecTrace {
    pub fn encoding(&self) -> &GaussianLatent {
        &self.head.latent
    }
}

pub fn codec_trace(params: &ModelParams, which: Codec, attended: &[f64], noise: &[f64]) -> CodecTrace {
    let p = which.prefix();
    let head = gaussian_head(params, &format!("{p}.enc"), attended, noise);
    let b = params.get(&format!("{p}.dec.b"));
    let mut reconstruction = vec![0.0; b.len()];
    dense_forward(&head.latent.sample, params.get(&format!("{p}.dec.w")), b, &mut reconstruction);
    CodecTrace {
        head,
        reconstruction,
    }
}

/// Accumulates codec parameter gradients and the gradient w.r.t. the
/// attended input map.
#[allow(clippy::too_many_arguments)]
pub fn codec_backward(
    params: &ModelParams,
    which: Codec,
    attended: &[f64],
    trace: &CodecTrace,
    d_recon: &[f64],
    d_enc: &LatentGrad,
    grads: &mut ModelParams,
    d_attended: &mut [f64],
) {
    let p = which.prefix();
    let mut up = d_enc.clone();
    {
        let (dw, db) = grads.dense_mut(&format!("{p}.dec"));
        dense_backward(
            &trace.head.latent.sample,
            params.get(&format!("{p}.dec.w")),
            d_recon,
            dw,
            db,
            Some(&mut up.sample),
        );
    }
    gaussian_head_backward(params, &format!("{p}.enc"), attended, &trace.head, &up, grads, d_attended);
}

pub fn codec_forward(
    params: &ModelParams,
    dims: &DimensionSpec,
    which: Codec,
    attended: &FeatureMap,
    noise_seed: u64,
) -> Result<(Vec<f64>, GaussianLatent)> {
    check_map(dims.grid, dims.channels, attended.data.len())?;
    let noise = standard_normal_noise(noise_seed, dims.codec);
    let t = codec_trace(params, which, &attended.data, &noise);
    Ok((t.reconstruction, t.head.latent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorSpec};

    fn setup() -> (ModelParams, DimensionSpec, SampleRecord) {
        let dims = DimensionSpec::default();
        let params = ModelParams::init(&dims, 3).unwrap();
        let b = generate_synthetic_dataset(&GeneratorSpec::default()).unwrap();
        (params, dims, b.images[5].clone())
    }

    /// Central-difference check of `probe(params)` against an analytic
    /// gradient on a spread of coordinates of `names`.
    fn fd_check(
        params: &ModelParams,
        grads: &ModelParams,
        names: &[&str],
        probe: &dyn Fn(&ModelParams) -> f64,
    ) {
        let h = 1e-5;
        for name in names {
            let n = params.get(name).len();
            let stride = (n / 7).max(1);
            for idx in (0..n).step_by(stride) {
                let mut plus = params.clone();
                plus.get_mut(name)[idx] += h;
                let mut minus = params.clone();
                minus.get_mut(name)[idx] -= h;
                let numeric = (probe(&plus) - probe(&minus)) / (2.0 * h);
                let analytic = grads.get(name)[idx];
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-4,
                    "{name}[{idx}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }

    fn probe_weights(n: usize, seed: u64) -> Vec<f64> {
        standard_normal_noise(seed, n)
    }

    #[test]
    fn parameter_names_are_unique_and_shaped() {
        let dims = DimensionSpec::default();
        let p = ModelParams::init(&dims, 0).unwrap();
        assert_eq!(p.tensors.len(), dims.parameter_shapes().len());
        p.check_shapes(&dims).unwrap();
        assert!(p.is_finite());
        assert_eq!(p, ModelParams::init(&dims, 0).unwrap());
        let a = (6.0f64 / (392.0 + 64.0)).sqrt();
        assert!(p.get("img.head.hidden.w").iter().all(|v| v.abs() <= a));
        assert!(p.get("img.head.hidden.b").iter().all(|v| *v == 0.0));
    }

    #[test]
    fn backbone_zero_input_zero_bias_is_zero() {
        let (params, dims, mut s) = setup();
        s.feature_map.iter_mut().for_each(|v| *v = 0.0);
        let out = backbone_forward(&params, &dims, &s).unwrap();
        assert!(out.data.iter().all(|v| *v == 0.0));
        assert_eq!(out.data.len(), 7 * 7 * 8);
        s.feature_map.pop();
        assert!(matches!(backbone_forward(&params, &dims, &s), Err(Error::Shape(_))));
    }

    #[test]
    fn attention_gate_saturation_and_contraction() {
        let (mut params, dims, s) = setup();
        let map = backbone_forward(&params, &dims, &s).unwrap();
        let out = attention_apply(&params, Modality::Image, &map).unwrap();
        for (o, i) in out.data.iter().zip(&map.data) {
            assert!(o.abs() <= i.abs());
        }
        let inf_in = map.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let inf_out = out.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(inf_out <= inf_in);

        params.get_mut("img.att.w").iter_mut().for_each(|v| *v = 0.0);
        params.get_mut("img.att.b")[0] = 50.0;
        let open = attention_apply(&params, Modality::Image, &map).unwrap();
        for (o, i) in open.data.iter().zip(&map.data) {
            assert!((o - i).abs() < 1e-12);
        }
        params.get_mut("img.att.b")[0] = -50.0;
        let closed = attention_apply(&params, Modality::Image, &map).unwrap();
        assert!(closed.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pooling_hand_values() {
        let c = FeatureMap {
            grid: 2,
            channels: 2,
            data: vec![3.0; 8],
        };
        assert_eq!(spatial_average_pool(&c), vec![3.0; 4]);
        let sym = FeatureMap {
            grid: 2,
            channels: 2,
            data: vec![1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0],
        };
        assert_eq!(spatial_average_pool(&sym), vec![0.0; 4]);
        let known = FeatureMap {
            grid: 2,
            channels: 2,
            data: vec![1.0, 2.0, 3.0, 5.0, -2.0, 0.0, 0.5, 0.25],
        };
        assert_eq!(spatial_average_pool(&known), vec![1.5, 4.0, -1.0, 0.375]);
    }

    #[test]
    fn latent_head_clamp_and_determinism() {
        let (mut params, dims, s) = setup();
        let att = attention_apply(&params, Modality::Image, &backbone_forward(&params, &dims, &s).unwrap()).unwrap();
        let a = latent_head(&params, &dims, Modality::Image, &att, 9).unwrap();
        let b = latent_head(&params, &dims, Modality::Image, &att, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 32);
        params.get_mut("img.head.logvar.b").iter_mut().for_each(|v| *v = -1e6);
        let c = latent_head(&params, &dims, Modality::Image, &att, 9).unwrap();
        assert!(c.log_var.iter().all(|v| *v == LOG_VAR_MIN));
        for (s, m) in c.sample.iter().zip(&c.mean) {
            assert!((s - m).abs() < 0.1);
        }
    }

    #[test]
    fn classifier_contracts() {
        let (mut params, _, _) = setup();
        params.get_mut("cls.w").iter_mut().for_each(|v| *v = 0.0);
        let z: Vec<f64> = (0..32).map(|i| i as f64).collect();
        assert_eq!(classify(&params, &z), vec![0.0; 6]);
        // one-hot rows: logit j reads coordinate j
        let w = params.get_mut("cls.w");
        for j in 0..6 {
            w[j * 6 + j] = 1.0;
        }
        assert_eq!(classify(&params, &z), vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn local_classifier_range() {
        let (mut params, _, _) = setup();
        let pooled = vec![0.3; 49];
        let v = local_domain_classify(&params, &pooled);
        assert!(v > 0.0 && v < 1.0);
        params.get_mut("local_disc.w").iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(local_domain_classify(&params, &pooled), 0.5);
        params.get_mut("local_disc.b")[0] = 1e3;
        assert_eq!(local_domain_classify(&params, &pooled), 1.0 - EPS_P);
    }

    #[test]
    fn codec_contracts() {
        let (mut params, dims, s) = setup();
        let att = attention_apply(&params, Modality::Image, &backbone_forward(&params, &dims, &s).unwrap()).unwrap();
        let a = codec_forward(&params, &dims, Codec::VP, &att, 4).unwrap();
        assert_eq!(a, codec_forward(&params, &dims, Codec::VP, &att, 4).unwrap());
        assert_eq!(a.0.len(), 32);
        assert_eq!(a.1.dim(), 16);
        params.get_mut("codec_p.dec.w").iter_mut().for_each(|v| *v = 0.0);
        let z = codec_forward(&params, &dims, Codec::VP, &att, 4).unwrap();
        assert!(z.0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let (params, dims, s) = setup();
        let noise = standard_normal_noise(1, dims.latent);
        let w_sample = probe_weights(dims.latent, 2);
        let w_mean = probe_weights(dims.latent, 3);
        let w_lv = probe_weights(dims.latent, 4);
        let w_att = probe_weights(dims.map_len(), 5);
        let w_pool = probe_weights(dims.cells(), 6);
        let probe = |p: &ModelParams| {
            let t = branch_forward(p, &dims, Modality::Image, &s.feature_map, &noise);
            crate::tensor::dot(&t.latent().sample, &w_sample)
                + crate::tensor::dot(&t.latent().mean, &w_mean)
                + crate::tensor::dot(&t.latent().log_var, &w_lv)
                + crate::tensor::dot(&t.attended, &w_att)
                + crate::tensor::dot(&t.pooled, &w_pool)
        };
        let trace = branch_forward(&params, &dims, Modality::Image, &s.feature_map, &noise);
        let up = BranchGrad {
            latent: LatentGrad {
                sample: w_sample.clone(),
                mean: w_mean.clone(),
                log_var: w_lv.clone(),
            },
            attended: w_att.clone(),
            pooled: w_pool.clone(),
        };
        let mut grads = params.zeros_like();
        branch_backward(&params, &dims, &s.feature_map, &trace, &up, &mut grads);
        fd_check(
            &params,
            &grads,
            &[
                "img.backbone.w",
                "img.backbone.b",
                "img.att.w",
                "img.att.b",
                "img.head.hidden.w",
                "img.head.hidden.b",
                "img.head.mean.w",
                "img.head.logvar.w",
                "img.head.logvar.b",
            ],
            &probe,
        );
    }

    #[test]
    fn reparameterized_sample_gradient_through_mean_head() {
        let (params, dims, s) = setup();
        let noise = standard_normal_noise(8, dims.latent);
        let trace = branch_forward(&params, &dims, Modality::Image, &s.feature_map, &noise);
        let mut up = BranchGrad::zeros(&dims);
        up.latent.sample[3] = 1.0;
        let mut grads = params.zeros_like();
        branch_backward(&params, &dims, &s.feature_map, &trace, &up, &mut grads);
        // d sample_3 / d mean.b_3 is exactly one
        assert_eq!(grads.get("img.head.mean.b")[3], 1.0);
        let probe = |p: &ModelParams| {
            branch_forward(p, &dims, Modality::Image, &s.feature_map, &noise).latent().sample[3]
        };
        fd_check(&params, &grads, &["img.head.mean.w", "img.head.mean.b"], &probe);
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (params, dims, s) = setup();
        let trace = branch_forward(&params, &dims, Modality::Image, &s.feature_map, &vec![0.0; 32]);
        let z = trace.latent().mean.clone();
        let pooled = trace.pooled.clone();
        let w = probe_weights(6, 10);

        let mut grads = params.zeros_like();
        let mut dz = vec![0.0; 32];
        classify_backward(&params, &z, &w, &mut grads, &mut dz);
        let probe = |p: &ModelParams| crate::tensor::dot(&classify(p, &z), &w);
        fd_check(&params, &grads, &["cls.w", "cls.b"], &probe);

        let mut grads = params.zeros_like();
        let (_, slope) = local_disc_with_slope(&params, &pooled);
        let mut dp = vec![0.0; 49];
        local_disc_backward(&params, &pooled, 1.0, slope, &mut grads, &mut dp);
        let probe = |p: &ModelParams| local_domain_classify(p, &pooled);
        fd_check(&params, &grads, &["local_disc.w", "local_disc.b"], &probe);

        let mut grads = params.zeros_like();
        let (_, slope) = global_disc_with_slope(&params, &z);
        global_disc_backward(&params, &z, 1.0, slope, &mut grads, &mut dz);
        let probe = |p: &ModelParams| global_domain_classify(p, &z);
        fd_check(&params, &grads, &["global_disc.w", "global_disc.b"], &probe);
    }

    #[test]
    fn codec_gradients_match_finite_differences() {
        let (params, dims, s) = setup();
        let trace = branch_forward(&params, &dims, Modality::Image, &s.feature_map, &vec![0.0; 32]);
        let att = trace.attended.clone();
        let noise = standard_normal_noise(12, dims.codec);
        let w_rec = probe_weights(dims.latent, 13);
        let w_mean = probe_weights(dims.codec, 14);
        let w_lv = probe_weights(dims.codec, 15);
        let probe = |p: &ModelParams| {
            let t = codec_trace(p, Codec::VAlpha, &att, &noise);
            crate::tensor::dot(&t.reconstruction, &w_rec)
                + crate::tensor::dot(&t.encoding().mean, &w_mean)
                + crate::tensor::dot(&t.encoding().log_var, &w_lv)
        };
        let t = codec_trace(&params, Codec::VAlpha, &att, &noise);
        let mut grads = params.zeros_like();
        let mut d_att = vec![0.0; att.len()];
        let d_enc = LatentGrad {
            sample: vec![0.0; 16],
            mean: w_mean.clone(),
            log_var: w_lv.clone(),
        };
        codec_backward(&params, Codec::VAlpha, &att, &t, &w_rec, &d_enc, &mut grads, &mut d_att);
        fd_check(
            &params,
            &grads,
            &[
                "codec_a.enc.mean.w",
                "codec_a.enc.mean.b",
                "codec_a.enc.logvar.w",
                "codec_a.dec.w",
                "codec_a.dec.b",
            ],
            &probe,
        );
    }
}
