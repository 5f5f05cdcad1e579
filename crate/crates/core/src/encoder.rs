//! Small ConvNet encoder `f: image -> z` and the two-layer projection head
//! `g: z -> h` used during contrastive pretraining.
//!
//! Each stage is `blocks` 3x3 conv+ReLU layers, the first with stride 2.
//! Parameters live in one [`ParamSet`] under stable names:
//!
//! ```text
//! encoder.stage{s}.conv{b}.weight   [width_s, c_prev, 3, 3]
//! encoder.stage{s}.conv{b}.bias     [width_s]
//! head.fc1.weight                   [head_hidden, feature_dim]
//! head.fc1.bias / head.fc2.weight / head.fc2.bias
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ENCODER_PREFIX: &str = "encoder.";
pub const HEAD_PREFIX: &str = "head.";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    /// `|z|`; equals the last stage width since `z` is a global average pool.
    pub feature_dim: usize,
    pub head_hidden: usize,
    /// `|h|`, strictly smaller than `|z|`.
    pub head_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 64, 128],
            blocks_per_stage: 1,
            in_channels: 3,
            feature_dim: 128,
            head_hidden: 128,
            head_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Derives `feature_dim` from the last width.
    pub fn new(widths: Vec<usize>, blocks_per_stage: usize, head_hidden: usize, head_dim: usize) -> Result<Self> {
        let feature_dim = widths.last().copied().unwrap_or(0);
        let cfg = EncoderConfig { widths, blocks_per_stage, in_channels: 3, feature_dim, head_hidden, head_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("encoder widths must be non-empty and positive, got {:?}", self.widths)));
        }
        if self.blocks_per_stage == 0 || self.in_channels == 0 || self.head_hidden == 0 || self.head_dim == 0 {
            return Err(Error::Config("encoder block count and all dims must be positive".into()));
        }
        if self.feature_dim != *self.widths.last().unwrap() {
            return Err(Error::Config(format!(
                "feature dim {} must equal the last stage width {}",
                self.feature_dim,
                self.widths.last().unwrap()
            )));
        }
        if self.head_dim >= self.feature_dim {
            return Err(Error::Config(format!(
                "head dim {} must be smaller than feature dim {}",
                self.head_dim, self.feature_dim
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    /// Overall downsampling factor, `2^stages`.
    pub fn total_stride(&self) -> usize {
        1 << self.widths.len()
    }

    pub fn canonical(&self) -> String {
        let widths: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        format!(
            "encoder.widths={};encoder.blocks={};encoder.in={};encoder.zdim={};head.hidden={};head.dim={}",
            widths.join(","),
            self.blocks_per_stage,
            self.in_channels,
            self.feature_dim,
            self.head_hidden,
            self.head_dim
        )
    }

    /// SHA-256 of the canonical description; written into checkpoints.
    pub fn digest(&self) -> [u8; 32] {
        digest_of(&self.canonical())
    }

    /// Reconstructs the config from parameter shapes (encoder and head).
    pub fn infer<T: Scalar>(params: &ParamSet<T>) -> Result<Self> {
        let mut widths = Vec::new();
        let mut in_channels = None;
        let mut blocks = 0;
        while let Some(k) = params.get(&conv_weight(widths.len(), 0)) {
            if widths.is_empty() {
                in_channels = Some(k.shape()[1]);
            }
            let mut b = 1;
            while params.contains_key(&conv_weight(widths.len(), b)) {
                b += 1;
            }
            if blocks != 0 && b != blocks {
                return Err(Error::Config("stages have differing block counts".into()));
            }
            blocks = b;
            widths.push(k.shape()[0]);
        }
        let in_channels = in_channels.ok_or_else(|| Error::Config("no encoder parameters found".into()))?;
        let fc1 = params.get("head.fc1.weight").ok_or_else(|| Error::Config("missing head.fc1.weight".into()))?;
        let fc2 = params.get("head.fc2.weight").ok_or_else(|| Error::Config("missing head.fc2.weight".into()))?;
        let cfg = EncoderConfig {
            feature_dim: *widths.last().unwrap(),
            widths,
            blocks_per_stage: blocks,
            in_channels,
            head_hidden: fc1.shape()[0],
            head_dim: fc2.shape()[0],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn digest_of(s: &str) -> [u8; 32] {
    let d = Sha256::digest(s.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&d);
    out
}

pub fn conv_weight(stage: usize, block: usize) -> String {
    format!("encoder.stage{stage}.conv{block}.weight")
}

pub fn conv_bias(stage: usize, block: usize) -> String {
    format!("encoder.stage{stage}.conv{block}.bias")
}

/// Gaussian sampler for He-normal initialization, `std = sqrt(2 / fan_in)`.
pub(crate) struct HeInit {
    rng: ChaCha8Rng,
}

impl HeInit {
    pub(crate) fn new(seed: u64) -> Self {
        HeInit { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub(crate) fn tensor<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(normal.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape")
    }
}

/// Conv stages only (no head), drawing from `init` in stage order.
pub(crate) fn init_conv_stages<T: Scalar>(config: &EncoderConfig, init: &mut HeInit, params: &mut ParamSet<T>) {
    let mut c_prev = config.in_channels;
    for (s, &width) in config.widths.iter().enumerate() {
        for b in 0..config.blocks_per_stage {
            let fan_in = c_prev * 9;
            params.insert(conv_weight(s, b), init.tensor(&[width, c_prev, 3, 3], fan_in));
            params.insert(conv_bias(s, b), Tensor::zeros([width]));
            c_prev = width;
        }
    }
}

/// Spatial feature map after the last stage, `[width_last, h', w']`.
pub fn encode_features<T: Scalar>(
    params: &ParamSet<T>,
    config: &EncoderConfig,
    g: &mut Graph<T>,
    image: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let s = g.shape(image).to_vec();
    if s.len() != 3 || s[0] != config.in_channels {
        return Err(Error::dim(format!("encoder expects [{}, h, w] input, got {s:?}", config.in_channels)));
    }
    let min = config.total_stride();
    if s[1] < min || s[2] < min {
        return Err(Error::dim(format!(
            "input {}x{} too small for {} stride-2 stages (need >= {min})",
            s[1],
            s[2],
            config.stages()
        )));
    }
    let mut x = image;
    for s in 0..config.stages() {
        for b in 0..config.blocks_per_stage {
            let stride = if b == 0 { 2 } else { 1 };
            let w = get(params, &conv_weight(s, b))?;
            let bias = get(params, &conv_bias(s, b))?;
            let w = g.leaf(&conv_weight(s, b), w, trainable);
            let bias = g.leaf(&conv_bias(s, b), bias, trainable);
            let y = g.conv2d(x, w, Some(bias), stride, 1)?;
            x = g.relu(y);
        }
    }
    Ok(x)
}

/// `z`: global average pool of the last feature map.
pub fn encode_with<T: Scalar>(
    params: &ParamSet<T>,
    config: &EncoderConfig,
    g: &mut Graph<T>,
    image: NodeId,
    trainable: bool,
) -> Result<NodeId> {
    let f = encode_features(params, config, g, image, trainable)?;
    g.global_avg_pool(f)
}

/// `h = normalize(W2 relu(W1 z + b1) + b2)`.
pub fn project_with<T: Scalar>(params: &ParamSet<T>, g: &mut Graph<T>, z: NodeId, trainable: bool) -> Result<NodeId> {
    let leaf = |g: &mut Graph<T>, name: &str| -> Result<NodeId> { Ok(g.leaf(name, get(params, name)?, trainable)) };
    let w1 = leaf(g, "head.fc1.weight")?;
    let b1 = leaf(g, "head.fc1.bias")?;
    let w2 = leaf(g, "head.fc2.weight")?;
    let b2 = leaf(g, "head.fc2.bias")?;
    let a = g.linear(w1, z, Some(b1))?;
    let a = g.relu(a);
    let o = g.linear(w2, a, Some(b2))?;
    g.l2_normalize(o)
}

pub(crate) fn get<'a, T>(params: &'a ParamSet<T>, name: &str) -> Result<&'a Tensor<T>> {
    params.get(name).ok_or_else(|| Error::Pairing(format!("missing parameter `{name}`")))
}

/// Encoder together with its projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    config: EncoderConfig,
    params: ParamSet<T>,
}

/// He-normal weights, zero biases; identical seeds give identical encoders.
pub fn build_encoder<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<Encoder<T>> {
    config.validate()?;
    let mut init = HeInit::new(seed);
    let mut params = ParamSet::new();
    init_conv_stages(config, &mut init, &mut params);
    params.insert("head.fc1.weight".into(), init.tensor(&[config.head_hidden, config.feature_dim], config.feature_dim));
    params.insert("head.fc1.bias".into(), Tensor::zeros([config.head_hidden]));
    params.insert("head.fc2.weight".into(), init.tensor(&[config.head_dim, config.head_hidden], config.head_hidden));
    params.insert("head.fc2.bias".into(), Tensor::zeros([config.head_dim]));
    Ok(Encoder { config: config.clone(), params })
}

impl<T: Scalar> Encoder<T> {
    /// Wraps an existing parameter set after checking it against `config`.
    pub fn from_params(config: EncoderConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let reference = build_encoder::<T>(&config, 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Pairing(format!(
                "expected {} encoder/head parameters, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in &reference.params {
            let p = get(&params, name)?;
            if p.shape() != t.shape() {
                return Err(Error::dim(format!("parameter `{name}` is {:?}, config needs {:?}", p.shape(), t.shape())));
            }
            p.ensure_finite(name)?;
        }
        Ok(Encoder { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    /// Records `z` for `image` (`[3,h,w]`) on `g`.
    pub fn encode(&self, g: &mut Graph<T>, image: NodeId, trainable: bool) -> Result<NodeId> {
        encode_with(&self.params, &self.config, g, image, trainable)
    }

    /// Records the unit-norm projection `h` of `z` on `g`.
    pub fn project(&self, g: &mut Graph<T>, z: NodeId, trainable: bool) -> Result<NodeId> {
        if g.shape(z) != [self.config.feature_dim] {
            return Err(Error::dim(format!("head expects |z| = {}, got {:?}", self.config.feature_dim, g.shape(z))));
        }
        project_with(&self.params, g, z, trainable)
    }

    /// Forward-only `z` for a single image.
    pub fn features(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let z = self.encode(&mut g, x, false)?;
        Ok(g.value(z).clone())
    }

    /// Forward-only `h` for a single image.
    pub fn embed(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let z = self.encode(&mut g, x, false)?;
        let h = self.project(&mut g, z, false)?;
        Ok(g.value(h).clone())
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}
