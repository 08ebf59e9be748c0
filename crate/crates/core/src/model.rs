//! Encoder, projection head and downstream classifier.
//!
//! The encoder is three conv/batch-norm/relu/maxpool blocks followed by two
//! per-frame linear layers and a temporal max+mean pool, producing one
//! embedding per clip. The projection head (pretraining only) is two wide
//! linear layers whose output is batch-normalized to zero mean and unit
//! variance. Downstream tasks replace the projector with a single linear
//! layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Array, BnRunning, Graph, Mode, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Network widths. Defaults give the full-size architecture; tests shrink
/// them for speed. `n_mels` must be divisible by 8 (three 2x pools).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub channels: usize,
    pub fc_dim: usize,
    pub proj_dim: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 64,
            channels: 64,
            fc_dim: 2048,
            proj_dim: 8192,
            dropout: 0.3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.n_mels % 8 != 0 {
            return Err(Error::Config(format!(
                "n_mels must be a positive multiple of 8, got {}",
                self.n_mels
            )));
        }
        if self.channels == 0 || self.fc_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Feature width after the conv stack: channels * (n_mels / 8).
    pub fn sequence_feat(&self) -> usize {
        self.channels * (self.n_mels / 8)
    }
}

/// How a parameter participates in optimization: only `Weight` parameters
/// get LARS trust-ratio adaptation and weight decay; biases and batch-norm
/// parameters train at the bias learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Array,
    pub bias: Array,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnLayer {
    pub scale: Array,
    pub shift: Array,
    pub running: BnRunning,
}

impl BnLayer {
    fn new(channels: usize) -> Self {
        BnLayer {
            scale: Array::full(&[channels], 1.0),
            shift: Array::zeros(&[channels]),
            running: BnRunning::new(channels),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: Array,
    pub bias: Array,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Array::from_vec(shape, data).unwrap()
}

fn conv_layer(cout: usize, cin: usize, rng: &mut ChaCha8Rng) -> ConvLayer {
    ConvLayer {
        weight: he_normal(&[cout, cin, 3, 3], cin * 9, rng),
        bias: Array::zeros(&[cout]),
    }
}

fn linear_layer(dout: usize, din: usize, rng: &mut ChaCha8Rng) -> LinearLayer {
    LinearLayer {
        weight: he_normal(&[dout, din], din, rng),
        bias: Array::zeros(&[dout]),
    }
}

/// Encoder parameters: three conv blocks plus the two per-frame linears.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1: ConvLayer,
    pub bn1: BnLayer,
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
    pub conv3: ConvLayer,
    pub bn3: BnLayer,
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

impl EncoderParams {
    /// Fresh random encoder from a bare seed, for random-init baselines.
    pub fn seeded(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(cfg, &mut rng)
    }

    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(EncoderParams {
            conv1: conv_layer(c, 1, rng),
            bn1: BnLayer::new(c),
            conv2: conv_layer(c, c, rng),
            bn2: BnLayer::new(c),
            conv3: conv_layer(c, c, rng),
            bn3: BnLayer::new(c),
            fc1: linear_layer(cfg.fc_dim, cfg.sequence_feat(), rng),
            fc2: linear_layer(cfg.fc_dim, cfg.fc_dim, rng),
        })
    }

    /// Trainable parameters in canonical order.
    pub fn named(&self) -> Vec<(&'static str, &Array, ParamKind)> {
        vec![
            ("enc.conv1.weight", &self.conv1.weight, ParamKind::Weight),
            ("enc.conv1.bias", &self.conv1.bias, ParamKind::Bias),
            ("enc.bn1.scale", &self.bn1.scale, ParamKind::Bias),
            ("enc.bn1.shift", &self.bn1.shift, ParamKind::Bias),
            ("enc.conv2.weight", &self.conv2.weight, ParamKind::Weight),
            ("enc.conv2.bias", &self.conv2.bias, ParamKind::Bias),
            ("enc.bn2.scale", &self.bn2.scale, ParamKind::Bias),
            ("enc.bn2.shift", &self.bn2.shift, ParamKind::Bias),
            ("enc.conv3.weight", &self.conv3.weight, ParamKind::Weight),
            ("enc.conv3.bias", &self.conv3.bias, ParamKind::Bias),
            ("enc.bn3.scale", &self.bn3.scale, ParamKind::Bias),
            ("enc.bn3.shift", &self.bn3.shift, ParamKind::Bias),
            ("enc.fc1.weight", &self.fc1.weight, ParamKind::Weight),
            ("enc.fc1.bias", &self.fc1.bias, ParamKind::Bias),
            ("enc.fc2.weight", &self.fc2.weight, ParamKind::Weight),
            ("enc.fc2.bias", &self.fc2.bias, ParamKind::Bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Array, ParamKind)> {
        vec![
            ("enc.conv1.weight", &mut self.conv1.weight, ParamKind::Weight),
            ("enc.conv1.bias", &mut self.conv1.bias, ParamKind::Bias),
            ("enc.bn1.scale", &mut self.bn1.scale, ParamKind::Bias),
            ("enc.bn1.shift", &mut self.bn1.shift, ParamKind::Bias),
            ("enc.conv2.weight", &mut self.conv2.weight, ParamKind::Weight),
            ("enc.conv2.bias", &mut self.conv2.bias, ParamKind::Bias),
            ("enc.bn2.scale", &mut self.bn2.scale, ParamKind::Bias),
            ("enc.bn2.shift", &mut self.bn2.shift, ParamKind::Bias),
            ("enc.conv3.weight", &mut self.conv3.weight, ParamKind::Weight),
            ("enc.conv3.bias", &mut self.conv3.bias, ParamKind::Bias),
            ("enc.bn3.scale", &mut self.bn3.scale, ParamKind::Bias),
            ("enc.bn3.shift", &mut self.bn3.shift, ParamKind::Bias),
            ("enc.fc1.weight", &mut self.fc1.weight, ParamKind::Weight),
            ("enc.fc1.bias", &mut self.fc1.bias, ParamKind::Bias),
            ("enc.fc2.weight", &mut self.fc2.weight, ParamKind::Weight),
            ("enc.fc2.bias", &mut self.fc2.bias, ParamKind::Bias),
        ]
    }

    /// Running batch-norm statistics in canonical order (not trainable).
    pub fn running_stats(&self) -> Vec<(&'static str, &BnRunning)> {
        vec![
            ("enc.bn1", &self.bn1.running),
            ("enc.bn2", &self.bn2.running),
            ("enc.bn3", &self.bn3.running),
        ]
    }

    pub fn running_stats_mut(&mut self) -> Vec<(&'static str, &mut BnRunning)> {
        vec![
            ("enc.bn1", &mut self.bn1.running),
            ("enc.bn2", &mut self.bn2.running),
            ("enc.bn3", &mut self.bn3.running),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, a, _)| a.numel()).sum()
    }
}

/// Projection head: dropout, linear to proj_dim, batch norm + relu, linear
/// to proj_dim, then a final batch norm without learnable affine so the
/// pretraining embeddings are zero mean, unit variance over the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorParams {
    pub fc1: LinearLayer,
    pub bn1: BnLayer,
    pub fc2: LinearLayer,
    pub bn2_running: BnRunning,
}

impl ProjectorParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(ProjectorParams {
            fc1: linear_layer(cfg.proj_dim, cfg.fc_dim, rng),
            bn1: BnLayer::new(cfg.proj_dim),
            fc2: linear_layer(cfg.proj_dim, cfg.proj_dim, rng),
            bn2_running: BnRunning::new(cfg.proj_dim),
        })
    }

    pub fn named(&self) -> Vec<(&'static str, &Array, ParamKind)> {
        vec![
            ("proj.fc1.weight", &self.fc1.weight, ParamKind::Weight),
            ("proj.fc1.bias", &self.fc1.bias, ParamKind::Bias),
            ("proj.bn1.scale", &self.bn1.scale, ParamKind::Bias),
            ("proj.bn1.shift", &self.bn1.shift, ParamKind::Bias),
            ("proj.fc2.weight", &self.fc2.weight, ParamKind::Weight),
            ("proj.fc2.bias", &self.fc2.bias, ParamKind::Bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Array, ParamKind)> {
        vec![
            ("proj.fc1.weight", &mut self.fc1.weight, ParamKind::Weight),
            ("proj.fc1.bias", &mut self.fc1.bias, ParamKind::Bias),
            ("proj.bn1.scale", &mut self.bn1.scale, ParamKind::Bias),
            ("proj.bn1.shift", &mut self.bn1.shift, ParamKind::Bias),
            ("proj.fc2.weight", &mut self.fc2.weight, ParamKind::Weight),
            ("proj.fc2.bias", &mut self.fc2.bias, ParamKind::Bias),
        ]
    }

    pub fn running_stats(&self) -> Vec<(&'static str, &BnRunning)> {
        vec![("proj.bn1", &self.bn1.running), ("proj.bn2", &self.bn2_running)]
    }

    pub fn running_stats_mut(&mut self) -> Vec<(&'static str, &mut BnRunning)> {
        vec![
            ("proj.bn1", &mut self.bn1.running),
            ("proj.bn2", &mut self.bn2_running),
        ]
    }
}

/// Single linear layer mapping embeddings to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub linear: LinearLayer,
}

impl ClassifierHead {
    /// Zero-initialized head: an untrained head predicts class 0 everywhere,
    /// giving exactly chance accuracy on balanced splits.
    pub fn zeros(num_classes: usize, embed_dim: usize) -> Self {
        ClassifierHead {
            linear: LinearLayer {
                weight: Array::zeros(&[num_classes, embed_dim]),
                bias: Array::zeros(&[num_classes]),
            },
        }
    }

    pub fn num_classes(&self) -> usize {
        self.linear.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.linear.weight.shape()[1]
    }

    pub fn named(&self) -> Vec<(&'static str, &Array, ParamKind)> {
        vec![
            ("head.weight", &self.linear.weight, ParamKind::Weight),
            ("head.bias", &self.linear.bias, ParamKind::Bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Array, ParamKind)> {
        vec![
            ("head.weight", &mut self.linear.weight, ParamKind::Weight),
            ("head.bias", &mut self.linear.bias, ParamKind::Bias),
        ]
    }
}

// ── graph bindings ──────────────────────────────────────────────────

/// Encoder parameters registered as graph leaves for one training step.
/// Both augmented views share one binding so gradients accumulate.
pub struct EncoderBind {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub bn1: (Tensor, Tensor),
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub bn2: (Tensor, Tensor),
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub bn3: (Tensor, Tensor),
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl EncoderBind {
    /// Tensors in the same order as [`EncoderParams::named`].
    pub fn named(&self) -> Vec<Tensor> {
        vec![
            self.conv1_w,
            self.conv1_b,
            self.bn1.0,
            self.bn1.1,
            self.conv2_w,
            self.conv2_b,
            self.bn2.0,
            self.bn2.1,
            self.conv3_w,
            self.conv3_b,
            self.bn3.0,
            self.bn3.1,
            self.fc1_w,
            self.fc1_b,
            self.fc2_w,
            self.fc2_b,
        ]
    }
}

pub fn bind_encoder(g: &mut Graph, params: &EncoderParams, trainable: bool) -> Result<EncoderBind> {
    Ok(EncoderBind {
        conv1_w: g.leaf(params.conv1.weight.clone(), trainable)?,
        conv1_b: g.leaf(params.conv1.bias.clone(), trainable)?,
        bn1: (
            g.leaf(params.bn1.scale.clone(), trainable)?,
            g.leaf(params.bn1.shift.clone(), trainable)?,
        ),
        conv2_w: g.leaf(params.conv2.weight.clone(), trainable)?,
        conv2_b: g.leaf(params.conv2.bias.clone(), trainable)?,
        bn2: (
            g.leaf(params.bn2.scale.clone(), trainable)?,
            g.leaf(params.bn2.shift.clone(), trainable)?,
        ),
        conv3_w: g.leaf(params.conv3.weight.clone(), trainable)?,
        conv3_b: g.leaf(params.conv3.bias.clone(), trainable)?,
        bn3: (
            g.leaf(params.bn3.scale.clone(), trainable)?,
            g.leaf(params.bn3.shift.clone(), trainable)?,
        ),
        fc1_w: g.leaf(params.fc1.weight.clone(), trainable)?,
        fc1_b: g.leaf(params.fc1.bias.clone(), trainable)?,
        fc2_w: g.leaf(params.fc2.weight.clone(), trainable)?,
        fc2_b: g.leaf(params.fc2.bias.clone(), trainable)?,
    })
}

pub struct ProjectorBind {
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub bn1: (Tensor, Tensor),
    pub fc2_w: Tensor,
    pub fc2_b: Tensor,
}

impl ProjectorBind {
    pub fn named(&self) -> Vec<Tensor> {
        vec![
            self.fc1_w, self.fc1_b, self.bn1.0, self.bn1.1, self.fc2_w, self.fc2_b,
        ]
    }
}

pub fn bind_projector(
    g: &mut Graph,
    params: &ProjectorParams,
    trainable: bool,
) -> Result<ProjectorBind> {
    Ok(ProjectorBind {
        fc1_w: g.leaf(params.fc1.weight.clone(), trainable)?,
        fc1_b: g.leaf(params.fc1.bias.clone(), trainable)?,
        bn1: (
            g.leaf(params.bn1.scale.clone(), trainable)?,
            g.leaf(params.bn1.shift.clone(), trainable)?,
        ),
        fc2_w: g.leaf(params.fc2.weight.clone(), trainable)?,
        fc2_b: g.leaf(params.fc2.bias.clone(), trainable)?,
    })
}

pub struct HeadBind {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadBind {
    pub fn named(&self) -> Vec<Tensor> {
        vec![self.weight, self.bias]
    }
}

pub fn bind_head(g: &mut Graph, head: &ClassifierHead, trainable: bool) -> Result<HeadBind> {
    Ok(HeadBind {
        weight: g.leaf(head.linear.weight.clone(), trainable)?,
        bias: g.leaf(head.linear.bias.clone(), trainable)?,
    })
}

/// Output shape of every layer in forward order, for conformance checks.
pub type ShapeTrace = Vec<(&'static str, Vec<usize>)>;

/// Encoder forward pass: input `[b, 1, n_mels, t]` with t divisible by 8,
/// output `[b, fc_dim]`. Batch-norm running statistics update in train mode.
#[allow(clippy::too_many_arguments)]
pub fn encoder_forward(
    g: &mut Graph,
    bind: &EncoderBind,
    params: &mut EncoderParams,
    cfg: &ModelConfig,
    x: Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, ShapeTrace)> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != 1 || xs[2] != cfg.n_mels || xs[3] % 8 != 0 || xs[3] == 0 {
        return Err(Error::ShapeMismatch {
            context: "encoder_forward",
            expected: format!("[b, 1, {}, t] with t a positive multiple of 8", cfg.n_mels),
            actual: format!("{xs:?}"),
        });
    }
    let mut trace: ShapeTrace = Vec::with_capacity(20);
    let push = |g: &Graph, name: &'static str, t: Tensor, trace: &mut ShapeTrace| {
        trace.push((name, g.shape(t).to_vec()));
    };

    let c1 = g.conv2d(x, bind.conv1_w, bind.conv1_b)?;
    push(g, "conv2d_1", c1, &mut trace);
    let b1 = g.batchnorm2d(c1, Some(bind.bn1), &mut params.bn1.running, mode, BN_EPS, BN_MOMENTUM)?;
    push(g, "batchnorm2d_2", b1, &mut trace);
    let r1 = g.relu(b1)?;
    push(g, "relu_3", r1, &mut trace);
    let p1 = g.maxpool2d(r1)?;
    push(g, "maxpool2d_4", p1, &mut trace);

    let c2 = g.conv2d(p1, bind.conv2_w, bind.conv2_b)?;
    push(g, "conv2d_5", c2, &mut trace);
    let b2 = g.batchnorm2d(c2, Some(bind.bn2), &mut params.bn2.running, mode, BN_EPS, BN_MOMENTUM)?;
    push(g, "batchnorm2d_6", b2, &mut trace);
    let r2 = g.relu(b2)?;
    push(g, "relu_7", r2, &mut trace);
    let p2 = g.maxpool2d(r2)?;
    push(g, "maxpool2d_8", p2, &mut trace);

    let c3 = g.conv2d(p2, bind.conv3_w, bind.conv3_b)?;
    push(g, "conv2d_9", c3, &mut trace);
    let b3 = g.batchnorm2d(c3, Some(bind.bn3), &mut params.bn3.running, mode, BN_EPS, BN_MOMENTUM)?;
    push(g, "batchnorm2d_10", b3, &mut trace);
    let r3 = g.relu(b3)?;
    push(g, "relu_11", r3, &mut trace);
    let p3 = g.maxpool2d(r3)?;
    push(g, "maxpool2d_12", p3, &mut trace);

    let seq = g.to_sequence(p3)?;
    push(g, "reshape_13", seq, &mut trace);
    let f1 = g.linear(seq, bind.fc1_w, bind.fc1_b)?;
    push(g, "linear_14", f1, &mut trace);
    let r4 = g.relu(f1)?;
    push(g, "relu_15", r4, &mut trace);
    let d1 = g.dropout(r4, cfg.dropout, mode, rng)?;
    push(g, "dropout_16", d1, &mut trace);
    let f2 = g.linear(d1, bind.fc2_w, bind.fc2_b)?;
    push(g, "linear_17", f2, &mut trace);
    let r5 = g.relu(f2)?;
    push(g, "relu_18", r5, &mut trace);
    let pooled = g.temporal_pool(r5)?;
    push(g, "max_plus_mean_19", pooled, &mut trace);
    Ok((pooled, trace))
}

/// Projection head forward: `[b, fc_dim] -> [b, proj_dim]`. Training mode
/// requires b >= 2 for the batch-norm layers.
pub fn projector_forward(
    g: &mut Graph,
    bind: &ProjectorBind,
    params: &mut ProjectorParams,
    cfg: &ModelConfig,
    h: Tensor,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let hs = g.shape(h).to_vec();
    if hs.len() != 2 || hs[1] != cfg.fc_dim {
        return Err(Error::ShapeMismatch {
            context: "projector_forward",
            expected: format!("[b, {}]", cfg.fc_dim),
            actual: format!("{hs:?}"),
        });
    }
    let d = g.dropout(h, cfg.dropout, mode, rng)?;
    let f1 = g.linear(d, bind.fc1_w, bind.fc1_b)?;
    let b1 = g.batchnorm1d(f1, Some(bind.bn1), &mut params.bn1.running, mode, BN_EPS, BN_MOMENTUM)?;
    let r1 = g.relu(b1)?;
    let f2 = g.linear(r1, bind.fc2_w, bind.fc2_b)?;
    g.batchnorm1d(f2, None, &mut params.bn2_running, mode, BN_EPS, BN_MOMENTUM)
}

/// Class logits from embeddings.
pub fn classify(g: &mut Graph, h: Tensor, head: &HeadBind) -> Result<Tensor> {
    g.linear(h, head.weight, head.bias)
}
