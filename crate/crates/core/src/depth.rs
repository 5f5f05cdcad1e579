//! Depth network: the encoder's conv stages followed by a decoder of
//! `upsample 2x -> conv 3x3 -> ReLU` stages and a 1-channel softplus output
//! at half the input resolution.
//!
//! ```text
//! encoder.stage{s}.conv{b}.weight / .bias    (shared with the pretraining encoder)
//! decoder.stage{i}.conv.weight / .bias       [widths[i], c_prev, 3, 3]
//! decoder.out.weight / .bias                 [1, c_last, 3, 3]
//! ```

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{GradMap, Graph, NodeId, ParamSet};
use crate::contrast::reduce_grads;
use crate::data::checkpoint::{hex, load_checkpoint, load_checkpoint_expecting, save_checkpoint};
use crate::data::{subset_indices, DepthSample};
use crate::encoder::{digest_of, encode_features, get, init_conv_stages, EncoderConfig, HeInit, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::gradfield::ColorImage;
use crate::metrics::{accumulate_pair, aggregate, DepthView, EvalProtocol, MetricAccumulator, MetricReport};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tensor::{Scalar, Tensor};

pub const DECODER_PREFIX: &str = "decoder.";
const OUT_WEIGHT: &str = "decoder.out.weight";
const OUT_BIAS: &str = "decoder.out.bias";

/// Salt so decoder initialization differs from the encoder's stream.
const DECODER_SEED_SALT: u64 = 0xdec0_de00_d00d_0001;

fn stage_weight(i: usize) -> String {
    format!("decoder.stage{i}.conv.weight")
}

fn stage_bias(i: usize) -> String {
    format!("decoder.stage{i}.conv.bias")
}

/// Channel widths of the upsampling stages; one fewer stage than the
/// encoder so the output lands at half the input resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub widths: Vec<usize>,
}

impl DecoderConfig {
    /// Encoder widths in reverse, minus the deepest one.
    pub fn mirror(encoder: &EncoderConfig) -> Self {
        let n = encoder.widths.len();
        DecoderConfig { widths: encoder.widths[..n.saturating_sub(1)].iter().rev().copied().collect() }
    }

    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.widths.len() + 1 != encoder.stages() {
            return Err(Error::Config(format!(
                "decoder needs {} stages for a {}-stage encoder, got {}",
                encoder.stages() - 1,
                encoder.stages(),
                self.widths.len()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("decoder widths must be positive".into()));
        }
        Ok(())
    }
}

/// Inverse of `softplus`, for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthNet<T> {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    params: ParamSet<T>,
}

impl<T: Scalar> DepthNet<T> {
    /// He-initialized encoder and decoder. The decoder draws from a stream
    /// derived from `seed`, so it is identical across encoder init modes.
    pub fn random(encoder: &EncoderConfig, decoder: &DecoderConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut params = ParamSet::new();
        init_conv_stages(encoder, &mut HeInit::new(seed), &mut params);
        Self::with_encoder_params(encoder, decoder, params, seed)
    }

    /// Uses the `encoder.*` entries of `params` (a head, if present, is
    /// dropped) and a freshly initialized decoder.
    pub fn with_encoder_params(
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        params: ParamSet<T>,
        seed: u64,
    ) -> Result<Self> {
        encoder.validate()?;
        decoder.validate(encoder)?;
        let mut reference = ParamSet::<T>::new();
        init_conv_stages(encoder, &mut HeInit::new(0), &mut reference);
        let mut kept = ParamSet::new();
        for (name, t) in params.into_iter().filter(|(n, _)| n.starts_with(ENCODER_PREFIX)) {
            let want =
                reference.get(&name).ok_or_else(|| Error::Pairing(format!("unexpected encoder parameter `{name}`")))?;
            if want.shape() != t.shape() {
                return Err(Error::dim(format!("`{name}` is {:?}, config needs {:?}", t.shape(), want.shape())));
            }
            kept.insert(name, t);
        }
        if kept.len() != reference.len() {
            return Err(Error::Pairing(format!("expected {} encoder parameters, got {}", reference.len(), kept.len())));
        }
        let mut init = HeInit::new(seed ^ DECODER_SEED_SALT);
        let mut c_prev = encoder.feature_dim;
        for (i, &w) in decoder.widths.iter().enumerate() {
            kept.insert(stage_weight(i), init.tensor(&[w, c_prev, 3, 3], c_prev * 9));
            kept.insert(stage_bias(i), Tensor::zeros([w]));
            c_prev = w;
        }
        kept.insert(OUT_WEIGHT.into(), init.tensor(&[1, c_prev, 3, 3], c_prev * 9));
        kept.insert(OUT_BIAS.into(), Tensor::zeros([1]));
        Ok(DepthNet { encoder: encoder.clone(), decoder: decoder.clone(), params: kept })
    }

    /// Reconstructs a network from a full parameter set, inferring both
    /// configs from parameter shapes.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let (encoder, decoder) = infer_configs(&params)?;
        let net = Self::with_encoder_params(&encoder, &decoder, params.clone(), 0)?;
        for (name, t) in &net.params {
            let p = get(&params, name)?;
            if p.shape() != t.shape() {
                return Err(Error::dim(format!("`{name}` is {:?}, expected {:?}", p.shape(), t.shape())));
            }
            p.ensure_finite(name)?;
        }
        if params.len() != net.params.len() {
            return Err(Error::Pairing("depth checkpoint has unexpected extra parameters".into()));
        }
        Ok(DepthNet { params, ..net })
    }

    pub fn encoder_config(&self) -> &EncoderConfig {
        &self.encoder
    }

    pub fn decoder_config(&self) -> &DecoderConfig {
        &self.decoder
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Identifies the architecture; head dims play no part.
    pub fn digest(&self) -> [u8; 32] {
        architecture_digest(&self.encoder, &self.decoder)
    }

    /// Sets the output bias so an all-zero pre-activation predicts `depth`.
    pub fn set_output_bias(&mut self, depth: f64) -> Result<()> {
        if !(depth > 0.0 && depth.is_finite()) {
            return Err(Error::Input(format!("output bias depth must be positive, got {depth}")));
        }
        self.params.insert(OUT_BIAS.into(), Tensor::full([1], T::of(inverse_softplus(depth))));
        Ok(())
    }

    /// Records the prediction `[1, h/2, w/2]` for `image` (`[3, h, w]`).
    pub fn forward(&self, g: &mut Graph<T>, image: NodeId, trainable: bool) -> Result<NodeId> {
        let s = g.shape(image).to_vec();
        let stride = self.encoder.total_stride();
        if s.len() != 3 || !s[1].is_multiple_of(stride) || !s[2].is_multiple_of(stride) {
            return Err(Error::dim(format!("input {s:?} must be [3, h, w] with h and w divisible by {stride}")));
        }
        let mut x = encode_features(&self.params, &self.encoder, g, image, trainable)?;
        let conv = |g: &mut Graph<T>, x: NodeId, w: &str, b: &str| -> Result<NodeId> {
            let wn = g.leaf(w, get(&self.params, w)?, trainable);
            let bn = g.leaf(b, get(&self.params, b)?, trainable);
            g.conv2d(x, wn, Some(bn), 1, 1)
        };
        for i in 0..self.decoder.widths.len() {
            let up = g.upsample2x(x)?;
            let y = conv(g, up, &stage_weight(i), &stage_bias(i))?;
            x = g.relu(y);
        }
        let out = conv(g, x, OUT_WEIGHT, OUT_BIAS)?;
        Ok(g.softplus(out))
    }

    pub fn cast<U: Scalar>(&self) -> DepthNet<U> {
        DepthNet {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.params, &self.digest(), path)
    }
}

impl DepthNet<f32> {
    /// Loads a depth checkpoint and checks its digest against the
    /// architecture its parameters describe.
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(path)?;
        let net = DepthNet::from_params(ck.params)?;
        if net.digest() != ck.digest {
            return Err(Error::DigestMismatch { expected: hex(&net.digest()), found: hex(&ck.digest) });
        }
        Ok(net)
    }

    /// Encoder from a pretraining checkpoint written for `encoder`, decoder
    /// freshly initialized from `seed`.
    pub fn from_pretrained(path: &Path, encoder: &EncoderConfig, decoder: &DecoderConfig, seed: u64) -> Result<Self> {
        let ck = load_checkpoint_expecting(path, &encoder.digest())?;
        DepthNet::with_encoder_params(encoder, decoder, ck.params, seed)
    }
}

pub fn architecture_digest(encoder: &EncoderConfig, decoder: &DecoderConfig) -> [u8; 32] {
    let widths = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    digest_of(&format!(
        "depthnet;encoder.widths={};encoder.blocks={};encoder.in={};decoder.widths={}",
        widths(&encoder.widths),
        encoder.blocks_per_stage,
        encoder.in_channels,
        widths(&decoder.widths)
    ))
}

fn infer_configs<T: Scalar>(params: &ParamSet<T>) -> Result<(EncoderConfig, DecoderConfig)> {
    use crate::encoder::conv_weight;
    let mut widths = Vec::new();
    let mut blocks = 0;
    let mut in_channels = 0;
    while let Some(k) = params.get(&conv_weight(widths.len(), 0)) {
        if widths.is_empty() {
            in_channels = k.shape()[1];
        }
        let b = (1..).find(|&b| !params.contains_key(&conv_weight(widths.len(), b))).unwrap();
        if blocks != 0 && b != blocks {
            return Err(Error::Config("encoder stages have differing block counts".into()));
        }
        blocks = b;
        widths.push(k.shape()[0]);
    }
    if widths.is_empty() {
        return Err(Error::Config("no encoder parameters found".into()));
    }
    let mut dec = Vec::new();
    while let Some(k) = params.get(&stage_weight(dec.len())) {
        dec.push(k.shape()[0]);
    }
    let feature_dim = *widths.last().unwrap();
    // Head dims are irrelevant to the depth network; any valid pair will do.
    let encoder = EncoderConfig {
        widths,
        blocks_per_stage: blocks,
        in_channels,
        feature_dim,
        head_hidden: feature_dim,
        head_dim: feature_dim.saturating_sub(1).max(1),
    };
    Ok((encoder, DecoderConfig { widths: dec }))
}

/// Positive half-resolution depth map in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    /// Millimeters, rounded and saturated to the 16-bit range.
    pub fn to_millimeters(&self) -> Vec<u16> {
        self.data.iter().map(|d| (d * 1000.0).round().clamp(0.0, f64::from(u16::MAX)) as u16).collect()
    }
}

pub fn predict_depth<T: Scalar>(net: &DepthNet<T>, rgb: &ColorImage) -> Result<DepthMap> {
    let mut g = Graph::new();
    let x = g.constant(rgb.to_tensor());
    let y = net.forward(&mut g, x, false)?;
    let s = g.shape(y).to_vec();
    Ok(DepthMap { height: s[1], width: s[2], data: g.value(y).to_f64_vec() })
}

/// Masked mean absolute error, `sum(mask |pred - y|) / sum(mask)`.
pub fn depth_loss(pred: &[f64], target: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::dim(format!(
            "depth loss got {} predictions, {} targets, {} mask entries",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::new([pred.len()], pred.to_vec())?);
    let y = g.constant(Tensor::new([target.len()], target.to_vec())?);
    let l = g.masked_l1(p, y, mask)?;
    Ok(g.value(l).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps to run instead of `epochs`; the last epoch may be
    /// partial.
    pub max_steps: Option<usize>,
    /// Share of the training set that is labeled, in `(0, 1]`.
    pub fraction: f64,
    /// Drives subset sampling, decoder initialization and batch order.
    pub seed: u64,
    /// Start the output bias at the mean training depth.
    pub init_output_bias: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            optimizer: OptimizerConfig::adam_default(),
            batch_size: 4,
            epochs: 10,
            max_steps: None,
            fraction: 1.0,
            seed: 0,
            init_output_bias: true,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("label fraction must lie in (0,1], got {}", self.fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("fine-tuning batch size must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("fine-tuning step budget must be positive".into()));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome<T> {
    pub net: DepthNet<T>,
    pub epoch_losses: Vec<f64>,
    /// Indices into the training set that were used.
    pub subset: Vec<usize>,
}

fn sample_grads<T: Scalar>(net: &DepthNet<T>, s: &DepthSample, weight: T) -> Result<(f64, GradMap<T>)> {
    let mut g = Graph::new();
    let x = g.constant(s.rgb.to_tensor());
    let pred = net.forward(&mut g, x, true)?;
    if g.shape(pred)[1..] != [s.height, s.width] {
        return Err(Error::dim(format!(
            "prediction {:?} does not match the {}x{} depth map",
            g.shape(pred),
            s.height,
            s.width
        )));
    }
    let y = g.constant(Tensor::from_f64([1, s.height, s.width], &s.depth)?);
    let loss = g.masked_l1(pred, y, &s.mask)?;
    let value = g.value(loss).item().f64();
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled)?))
}

/// Adam on the masked L1 loss over a seeded `fraction` of `train`; both
/// encoder and decoder are updated. Writes `epoch,loss` rows to `log`.
pub fn finetune<T: Scalar>(
    mut net: DepthNet<T>,
    train: &[DepthSample],
    config: &FinetuneConfig,
    log: &mut dyn Write,
) -> Result<FinetuneOutcome<T>> {
    config.validate()?;
    if config.fraction * (train.len() as f64) < 1.0 {
        return Err(Error::Input(format!(
            "fraction {} of {} samples is less than one sample",
            config.fraction,
            train.len()
        )));
    }
    let subset = subset_indices(train.len(), config.fraction, config.seed)?;
    if config.init_output_bias {
        let (sum, n) = subset
            .iter()
            .flat_map(|&i| train[i].depth.iter().zip(&train[i].mask))
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (&d, _)| (s + d, n + 1));
        if n == 0 {
            return Err(Error::DegenerateSample("no valid depth pixel in the training subset".into()));
        }
        net.set_output_bias(sum / n as f64)?;
    }
    let mut optimizer = OptimizerState::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xf1e7_0000_0000_0001);
    let log_err = |e: std::io::Error| Error::io("<finetune log>", e);
    writeln!(log, "epoch,loss").map_err(log_err)?;

    let mut order = subset.clone();
    let per_epoch = subset.len().div_ceil(config.batch_size);
    let (epochs, mut steps_left) = match config.max_steps {
        Some(n) => (n.div_ceil(per_epoch), n),
        None => (config.epochs, usize::MAX),
    };
    let mut epoch_losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size).take(steps_left) {
            let weight = T::of(1.0 / chunk.len() as f64);
            let frozen = &net;
            let parts: Vec<(f64, GradMap<T>)> =
                chunk.par_iter().map(|&i| sample_grads(frozen, &train[i], weight)).collect::<Result<_>>()?;
            total += parts.iter().map(|(l, _)| l).sum::<f64>() / chunk.len() as f64;
            batches += 1;
            let grads = reduce_grads(parts.into_iter().map(|(_, g)| g).collect())?;
            optimizer.step(&mut net.params, &grads)?;
        }
        steps_left -= batches;
        let mean = total / batches as f64;
        if !mean.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at epoch {}", epoch + 1)));
        }
        epoch_losses.push(mean);
        writeln!(log, "{},{}", epoch + 1, mean).map_err(log_err)?;
    }
    Ok(FinetuneOutcome { net, epoch_losses, subset })
}

/// Per-sample accumulators, in sample order.
pub fn accumulate_set<T: Scalar>(
    net: &DepthNet<T>,
    samples: &[DepthSample],
    protocol: &EvalProtocol,
) -> Result<Vec<MetricAccumulator>> {
    samples
        .par_iter()
        .map(|s| {
            let pred = predict_depth(net, &s.rgb)?;
            accumulate_pair(
                DepthView::new(pred.height, pred.width, &pred.data)?,
                DepthView::new(s.height, s.width, &s.depth)?,
                Some(&s.mask),
                protocol,
            )
        })
        .collect()
}

pub fn evaluate<T: Scalar>(
    net: &DepthNet<T>,
    samples: &[DepthSample],
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    aggregate(&accumulate_set(net, samples, protocol)?, protocol.aggregation)
}
