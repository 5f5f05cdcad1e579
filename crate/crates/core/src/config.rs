//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Blank lines and text after `#` are ignored. Unknown keys are errors.
//! Later assignments (including command-line overrides) win.

use std::fmt::Write as _;

use crate::contrast::ContrastConfig;
use crate::depth::{DecoderConfig, FinetuneConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::optim::{OptimizerConfig, OptimizerKind};

/// Splits config text into `(key, value)` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// Every tunable of the pipeline, with documented defaults.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub pretrain: ContrastConfig,
    pub finetune: FinetuneConfig,
    pub decoder: Option<DecoderConfig>,
    /// Seed for synthetic data, pretraining and fine-tuning alike unless
    /// overridden per stage.
    pub seed: u64,
}

fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|s| num(key, s.trim())).collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "tau",
        "momentum",
        "queue_size",
        "batch_size",
        "lr",
        "sgd_momentum",
        "weight_decay",
        "epochs",
        "steps",
        "flip",
        "canny.low",
        "canny.high",
        "canny.sigma",
        "canny.kernel",
        "encoder.widths",
        "encoder.blocks",
        "encoder.zdim",
        "head.hidden",
        "head.dim",
        "decoder.widths",
        "finetune.lr",
        "finetune.batch_size",
        "finetune.epochs",
        "finetune.steps",
        "finetune.weight_decay",
        "finetune.init_output_bias",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_pairs(text)?)?;
        Ok(cfg)
    }

    /// Applies assignments in order, then validates the result.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut zdim = None;
        for (k, v) in pairs {
            let (k, v) = (k.as_str(), v.as_str());
            let p = &mut self.pretrain;
            match k {
                "seed" => {
                    self.seed = num(k, v)?;
                    p.seed = self.seed;
                    self.finetune.seed = self.seed;
                }
                "tau" => p.tau = num(k, v)?,
                "momentum" => p.momentum = num(k, v)?,
                "queue_size" => p.queue_size = num(k, v)?,
                "batch_size" => p.batch_size = num(k, v)?,
                "lr" => p.optimizer.lr = num(k, v)?,
                "sgd_momentum" => p.optimizer.kind = OptimizerKind::Sgd { momentum: num(k, v)? },
                "weight_decay" => p.optimizer.weight_decay = num(k, v)?,
                "epochs" => p.epochs = num(k, v)?,
                "steps" => p.max_steps = if v == "none" { None } else { Some(num(k, v)?) },
                "flip" => p.flip = flag(k, v)?,
                "canny.low" => p.canny.low = num(k, v)?,
                "canny.high" => p.canny.high = num(k, v)?,
                "canny.sigma" => p.canny.sigma = num(k, v)?,
                "canny.kernel" => p.canny.kernel_size = num(k, v)?,
                "encoder.widths" => {
                    p.encoder.widths = list(k, v)?;
                    p.encoder.feature_dim = p.encoder.widths.last().copied().unwrap_or(0);
                }
                "encoder.blocks" => p.encoder.blocks_per_stage = num(k, v)?,
                "encoder.zdim" => zdim = Some(num::<usize>(k, v)?),
                "head.hidden" => p.encoder.head_hidden = num(k, v)?,
                "head.dim" => p.encoder.head_dim = num(k, v)?,
                "decoder.widths" => self.decoder = Some(DecoderConfig { widths: list(k, v)? }),
                "finetune.lr" => self.finetune.optimizer.lr = num(k, v)?,
                "finetune.batch_size" => self.finetune.batch_size = num(k, v)?,
                "finetune.epochs" => self.finetune.epochs = num(k, v)?,
                "finetune.steps" => self.finetune.max_steps = if v == "none" { None } else { Some(num(k, v)?) },
                "finetune.weight_decay" => self.finetune.optimizer.weight_decay = num(k, v)?,
                "finetune.init_output_bias" => self.finetune.init_output_bias = flag(k, v)?,
                other => {
                    return Err(Error::Config(format!(
                        "unknown config key `{other}`; known keys: {}",
                        Self::KEYS.join(", ")
                    )))
                }
            }
        }
        if let Some(z) = zdim {
            if z != self.pretrain.encoder.feature_dim {
                return Err(Error::Config(format!(
                    "encoder.zdim = {z} must equal the last encoder width {}",
                    self.pretrain.encoder.feature_dim
                )));
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.finetune.validate()?;
        self.decoder_config().validate(&self.pretrain.encoder)
    }

    pub fn encoder(&self) -> &EncoderConfig {
        &self.pretrain.encoder
    }

    /// The configured decoder, or the default mirror of the encoder.
    pub fn decoder_config(&self) -> DecoderConfig {
        self.decoder.clone().unwrap_or_else(|| DecoderConfig::mirror(&self.pretrain.encoder))
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let p = &self.pretrain;
        let sgd_momentum = match p.optimizer.kind {
            OptimizerKind::Sgd { momentum } => momentum,
            OptimizerKind::Adam { .. } => f64::NAN,
        };
        let f: &OptimizerConfig = &self.finetune.optimizer;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        put("seed", self.seed.to_string());
        put("tau", p.tau.to_string());
        put("momentum", p.momentum.to_string());
        put("queue_size", p.queue_size.to_string());
        put("batch_size", p.batch_size.to_string());
        put("lr", p.optimizer.lr.to_string());
        put("sgd_momentum", sgd_momentum.to_string());
        put("weight_decay", p.optimizer.weight_decay.to_string());
        put("epochs", p.epochs.to_string());
        put("steps", p.max_steps.map_or("none".into(), |n| n.to_string()));
        put("flip", p.flip.to_string());
        put("canny.low", p.canny.low.to_string());
        put("canny.high", p.canny.high.to_string());
        put("canny.sigma", p.canny.sigma.to_string());
        put("canny.kernel", p.canny.kernel_size.to_string());
        put("encoder.widths", join(&p.encoder.widths));
        put("encoder.blocks", p.encoder.blocks_per_stage.to_string());
        put("encoder.zdim", p.encoder.feature_dim.to_string());
        put("head.hidden", p.encoder.head_hidden.to_string());
        put("head.dim", p.encoder.head_dim.to_string());
        put("decoder.widths", join(&self.decoder_config().widths));
        put("finetune.lr", f.lr.to_string());
        put("finetune.batch_size", self.finetune.batch_size.to_string());
        put("finetune.epochs", self.finetune.epochs.to_string());
        put("finetune.steps", self.finetune.max_steps.map_or("none".into(), |n| n.to_string()));
        put("finetune.weight_decay", f.weight_decay.to_string());
        put("finetune.init_output_bias", self.finetune.init_output_bias.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let c = RunConfig::parse(
            "# pretraining\ntau = 0.2  # warmer\nlr=0.03\nlr = 0.05\nencoder.widths = 8, 16\nhead.dim = 4\n",
        )
        .unwrap();
        assert_eq!(c.pretrain.tau, 0.2);
        assert_eq!(c.pretrain.optimizer.lr, 0.05);
        assert_eq!(c.pretrain.encoder.widths, vec![8, 16]);
        assert_eq!(c.pretrain.encoder.feature_dim, 16);
        assert_eq!(c.decoder_config().widths, vec![8]);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(matches!(RunConfig::parse("bogus = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("tau").is_err());
        assert!(RunConfig::parse("tau = abc").is_err());
        assert!(RunConfig::parse("tau = 0").is_err());
        assert!(RunConfig::parse("encoder.zdim = 64").is_err());
        assert!(RunConfig::parse("encoder.zdim = 128").is_ok());
    }

    #[test]
    fn resolved_roundtrips() {
        let c = RunConfig::parse("seed = 9\nsteps = 5\nflip = true\nfinetune.epochs = 3\n").unwrap();
        let again = RunConfig::parse(&c.resolved()).unwrap();
        assert_eq!(again, RunConfig { decoder: Some(c.decoder_config()), ..c });
    }
}
