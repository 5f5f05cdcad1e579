//! Momentum contrastive pretraining with RGB queries and gradient-field keys.
//!
//! One step: compute the gradient field of every image, embed the fields
//! with the key encoder (no gradient), embed the RGB images with the query
//! encoder, score each query against its own key (positive) and every key in
//! the queue (negatives) with InfoNCE, update the query side by SGD, pull the
//! key side towards it by exponential moving average, and finally enqueue
//! the new keys.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{GradMap, Graph, NodeId};
use crate::encoder::{build_encoder, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::gradfield::{gradient_field, CannyParams, ColorImage};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::tensor::{Scalar, Tensor};

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Clone, Debug)]
pub struct KeyQueue<T> {
    capacity: usize,
    dim: usize,
    keys: VecDeque<Vec<T>>,
}

impl<T: Scalar> KeyQueue<T> {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Config("queue capacity and key dim must be positive".into()));
        }
        Ok(KeyQueue { capacity, dim, keys: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Appends `key`, evicting the oldest entry once at capacity.
    pub fn push(&mut self, key: &[T]) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::dim(format!("queue holds {}-d keys, got {}", self.dim, key.len())));
        }
        let norm = key.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::Contract(format!("queued keys must be unit norm, got norm {norm}")));
        }
        if self.keys.len() == self.capacity {
            self.keys.pop_front();
        }
        self.keys.push_back(key.to_vec());
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.keys.iter().map(|k| k.as_slice())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastConfig {
    pub tau: f64,
    /// Key-encoder EMA coefficient.
    pub momentum: f64,
    pub batch_size: usize,
    pub queue_size: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Stop after this many steps, regardless of `epochs`.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Random horizontal flips, applied before the gradient field is computed.
    pub flip: bool,
    pub canny: CannyParams,
    pub encoder: EncoderConfig,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            tau: 0.07,
            momentum: 0.999,
            batch_size: 64,
            queue_size: 16384,
            optimizer: OptimizerConfig::sgd_default(),
            epochs: 1,
            max_steps: None,
            seed: 0,
            flip: false,
            canny: CannyParams::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0,1], got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.queue_size < self.batch_size {
            return Err(Error::Config(format!(
                "queue size {} must be at least the batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        self.optimizer.validate()?;
        self.canny.validate()?;
        self.encoder.validate()
    }
}

/// Query side (gradient-trained) and key side (EMA of the query side).
#[derive(Clone, Debug)]
pub struct EncoderPair<T> {
    pub query: Encoder<T>,
    pub key: Encoder<T>,
}

/// Both sides start as identical copies.
pub fn init_pair<T: Scalar>(config: &EncoderConfig, seed: u64) -> Result<EncoderPair<T>> {
    let query = build_encoder(config, seed)?;
    let key = query.clone();
    Ok(EncoderPair { query, key })
}

impl<T: Scalar> EncoderPair<T> {
    /// `theta_key <- m * theta_key + (1 - m) * theta_query`.
    pub fn momentum_update(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::Config(format!("momentum must lie in [0,1], got {m}")));
        }
        let q = self.query.params();
        let k = self.key.params();
        if q.len() != k.len() || q.keys().zip(k.keys()).any(|(a, b)| a != b) {
            return Err(Error::Pairing("query and key encoders have different parameter names".into()));
        }
        for (name, qt) in q {
            if k[name].shape() != qt.shape() {
                return Err(Error::Pairing(format!("parameter `{name}` differs in shape between sides")));
            }
        }
        let (m, one_minus) = (T::of(m), T::of(1.0 - m));
        let q = self.query.params().clone();
        for (name, kt) in self.key.params_mut() {
            for (kv, &qv) in kt.data_mut().iter_mut().zip(q[name].data()) {
                *kv = m * *kv + one_minus * qv;
            }
        }
        Ok(())
    }

    /// Largest elementwise difference between the two sides.
    pub fn max_param_diff(&self) -> f64 {
        self.query.params().iter().map(|(n, t)| t.max_abs_diff(&self.key.params()[n])).fold(0.0, f64::max)
    }
}

/// InfoNCE for one query: softmax cross-entropy whose logit 0 is
/// `h_q . k_pos / tau` and whose remaining logits are `h_q . k_i / tau` over
/// the queue. Only `h_q` carries gradient.
pub fn info_nce<T: Scalar>(
    g: &mut Graph<T>,
    h_q: NodeId,
    k_pos: &[T],
    queue: &KeyQueue<T>,
    tau: f64,
) -> Result<NodeId> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let d = g.shape(h_q).to_vec();
    if d != [k_pos.len()] || (!queue.is_empty() && queue.dim() != k_pos.len()) {
        return Err(Error::dim(format!("query {d:?}, positive key {}-d, queue {}-d", k_pos.len(), queue.dim())));
    }
    let rows = 1 + queue.len();
    let mut keys = Vec::with_capacity(rows * k_pos.len());
    keys.extend_from_slice(k_pos);
    for k in queue.iter() {
        keys.extend_from_slice(k);
    }
    let keys = g.constant(Tensor::new([rows, k_pos.len()], keys)?);
    let logits = g.linear(keys, h_q, None)?;
    let logits = g.scale(logits, T::of(1.0 / tau));
    g.softmax_cross_entropy(logits, 0)
}

/// Key embedding of one gradient field; forward only.
fn key_embedding<T: Scalar>(key: &Encoder<T>, field: &Tensor<T>) -> Result<Vec<T>> {
    Ok(key.embed(field)?.into_data())
}

/// Loss and query-side gradients for one image, scaled by `weight`.
fn query_grads<T: Scalar>(
    query: &Encoder<T>,
    image: &Tensor<T>,
    k_pos: &[T],
    queue: &KeyQueue<T>,
    tau: f64,
    weight: T,
) -> Result<(f64, GradMap<T>)> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let z = query.encode(&mut g, x, true)?;
    let h = query.project(&mut g, z, true)?;
    let loss = info_nce(&mut g, h, k_pos, queue, tau)?;
    let value = g.value(loss).item().f64();
    let scaled = g.scale(loss, weight);
    Ok((value, g.backward(scaled)?))
}

/// Sums per-sample gradient maps in index order.
pub(crate) fn reduce_grads<T: Scalar>(parts: Vec<GradMap<T>>) -> Result<GradMap<T>> {
    let mut iter = parts.into_iter();
    let mut total = iter.next().unwrap_or_default();
    for part in iter {
        for (name, t) in part {
            match total.get_mut(&name) {
                Some(acc) => acc.axpy(T::one(), &t)?,
                None => {
                    total.insert(name, t);
                }
            }
        }
    }
    Ok(total)
}

#[derive(Clone, Debug)]
pub struct StepReport<T> {
    /// Mean InfoNCE over the batch.
    pub loss: f64,
    /// Gradient applied to the query side.
    pub grads: GradMap<T>,
    /// New keys, in batch order, as they were enqueued.
    pub keys: Vec<Vec<T>>,
}

/// One momentum-contrast update on `batch`.
pub fn pretrain_step<T: Scalar>(
    pair: &mut EncoderPair<T>,
    queue: &mut KeyQueue<T>,
    optimizer: &mut OptimizerState<T>,
    batch: &[ColorImage],
    config: &ContrastConfig,
) -> Result<StepReport<T>> {
    if batch.is_empty() {
        return Err(Error::Input("pretrain_step needs at least one image".into()));
    }
    if !(config.tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {}", config.tau)));
    }
    let channels = config.encoder.in_channels;
    let prepared: Vec<(Tensor<T>, Tensor<T>)> = batch
        .par_iter()
        .map(|img| {
            let field = gradient_field(img, &config.canny)?;
            Ok((img.to_tensor::<T>(), field.to_tensor::<T>(channels)))
        })
        .collect::<Result<_>>()?;

    let keys: Vec<Vec<T>> =
        prepared.par_iter().map(|(_, field)| key_embedding(&pair.key, field)).collect::<Result<_>>()?;

    let weight = T::of(1.0 / batch.len() as f64);
    let query = &pair.query;
    let frozen_queue = &*queue;
    let parts: Vec<(f64, GradMap<T>)> = prepared
        .par_iter()
        .zip(keys.par_iter())
        .map(|((image, _), k)| query_grads(query, image, k, frozen_queue, config.tau, weight))
        .collect::<Result<_>>()?;

    let loss = parts.iter().map(|(l, _)| l).sum::<f64>() / batch.len() as f64;
    let grads = reduce_grads(parts.into_iter().map(|(_, g)| g).collect())?;
    optimizer.step(pair.query.params_mut(), &grads)?;
    pair.momentum_update(config.momentum)?;
    for k in &keys {
        queue.push(k)?;
    }
    Ok(StepReport { loss, grads, keys })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome<T> {
    pub pair: EncoderPair<T>,
    pub losses: Vec<f64>,
}

/// Runs shuffled epochs of [`pretrain_step`] and writes `step,loss` rows to
/// `log`. The returned query encoder is the feature extractor to keep.
pub fn pretrain<T: Scalar>(
    images: &[ColorImage],
    config: &ContrastConfig,
    log: &mut dyn Write,
) -> Result<PretrainOutcome<T>> {
    if images.is_empty() {
        return Err(Error::Input("pretraining dataset is empty".into()));
    }
    config.validate()?;
    let mut pair = init_pair::<T>(&config.encoder, config.seed)?;
    let mut queue = KeyQueue::new(config.queue_size, config.encoder.head_dim)?;
    let mut optimizer = OptimizerState::new(config.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_c0de);
    let log_err = |e: std::io::Error| Error::io("<loss log>", e);
    writeln!(log, "step,loss").map_err(log_err)?;

    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let budget = config.max_steps.unwrap_or(usize::MAX);
    'outer: for epoch in 0.. {
        if config.max_steps.is_none() && epoch >= config.epochs {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            if losses.len() >= budget {
                break 'outer;
            }
            let batch: Vec<ColorImage> =
                chunk
                    .iter()
                    .map(|&i| {
                        if config.flip && rng.random_bool(0.5) {
                            images[i].flip_horizontal()
                        } else {
                            images[i].clone()
                        }
                    })
                    .collect();
            let report = pretrain_step(&mut pair, &mut queue, &mut optimizer, &batch, config)?;
            losses.push(report.loss);
            writeln!(log, "{},{}", losses.len(), report.loss).map_err(log_err)?;
        }
    }
    Ok(PretrainOutcome { pair, losses })
}
