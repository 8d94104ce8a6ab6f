//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Every key has a default; a config file and then command-line overrides
//! replace values. Unknown keys are rejected wherever they come from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use pace_core::augment::JitterParams;
use pace_core::corpus::CorpusSpec;
use pace_core::evalsuite::{LayerTag, ProbeConfig, ProbeMode};
use pace_core::losses::{LossWeights, SimilarityMode};
use pace_core::pacer::{PaceConfig, PaceMode};
use pace_core::par::Exec;
use pace_core::tensornet::{BlockConfig, ConvKind, InputShape, ModelConfig, PoolKind, ProjectionHead};
use pace_core::trainer::{ContrastiveMode, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: {msg}")]
    Syntax { origin: String, line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {msg}")]
    Value { key: String, msg: String },
}

type Result<T> = std::result::Result<T, ConfigError>;

const DEFAULTS: &[(&str, &str)] = &[
    ("run.seed", "0"),
    ("run.workers", "0"),
    ("corpus.dir", ""),
    ("corpus.num_videos", "200"),
    ("corpus.frames", "64"),
    ("corpus.height", "40"),
    ("corpus.width", "40"),
    ("corpus.channels", "3"),
    ("corpus.base_speed", "1"),
    ("corpus.max_pace", "4"),
    ("corpus.shape_classes", "3"),
    ("corpus.shape_size", "12"),
    ("corpus.noise", "0.05"),
    ("corpus.distractors", "0"),
    ("pace.mode", "relative"),
    ("pace.max", "4"),
    ("pace.step", "1"),
    ("model.kind", "conv3d"),
    ("model.channels", "8,16,32"),
    ("model.pools", "spatial,full,full"),
    ("model.embed_dim", "64"),
    ("model.projection", "none"),
    ("model.hidden", "64"),
    ("train.clip_len", "16"),
    ("train.crop", "32"),
    ("train.batch_videos", "16"),
    ("train.contrastive", "none"),
    ("train.lambda_cls", "1"),
    ("train.lambda_ctr", "0.1"),
    ("train.similarity", "normalized"),
    ("train.lr", "0.001"),
    ("train.lr_decay_every", "6"),
    ("train.lr_decay_factor", "10"),
    ("train.momentum", "0.9"),
    ("train.weight_decay", "0"),
    ("train.epochs", "18"),
    ("train.epoch_size", "auto"),
    ("train.jitter", "true"),
    ("train.jitter_per_frame", "true"),
    ("train.flip_probability", "0.5"),
    ("train.val_clips_per_video", "4"),
    ("eval.checkpoint", ""),
    ("eval.mode", "linear"),
    ("eval.layer", "p_last"),
    ("eval.per_clip", "false"),
    ("eval.epochs", "10"),
    ("eval.lr", "0.01"),
    ("eval.batch_videos", "16"),
    ("eval.linear_steps", "500"),
    ("eval.linear_lr", "0.5"),
    ("eval.linear_l2", "0.001"),
    ("eval.video", "0"),
    ("eval.block", "last"),
    ("gradcheck.frames", "4"),
    ("gradcheck.size", "8"),
    ("gradcheck.batch", "4"),
    ("gradcheck.eps", "0.0001"),
    ("gradcheck.per_tensor", "200"),
    ("gradcheck.threshold", "0.0001"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    origin: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let key = key.trim();
            if !self.values.contains_key(key) {
                return Err(ConfigError::Syntax {
                    origin: origin.to_string(),
                    line: i + 1,
                    msg: format!("unknown config key `{key}`"),
                });
            }
            self.set(key, value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::Value {
            key: assignment.to_string(),
            msg: "override must look like key=value".into(),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    /// Every key in sorted order, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e: T::Err| ConfigError::Value {
            key: key.to_string(),
            msg: format!("cannot parse `{raw}`: {e}"),
        })
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "yes" | "1" => Ok(true),
            "false" | "no" | "0" => Ok(false),
            other => Err(ConfigError::Value {
                key: key.to_string(),
                msg: format!("`{other}` is not a boolean"),
            }),
        }
    }

    fn value_error(key: &str, e: impl std::fmt::Display) -> ConfigError {
        ConfigError::Value {
            key: key.to_string(),
            msg: e.to_string(),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.parse("run.seed")
    }

    pub fn workers(&self) -> Result<usize> {
        self.parse("run.workers")
    }

    pub fn corpus_dir(&self) -> Option<PathBuf> {
        let d = self.get("corpus.dir");
        (!d.is_empty()).then(|| PathBuf::from(d))
    }

    pub fn checkpoint(&self) -> Option<PathBuf> {
        let d = self.get("eval.checkpoint");
        (!d.is_empty()).then(|| PathBuf::from(d))
    }

    pub fn corpus_spec(&self) -> Result<CorpusSpec> {
        Ok(CorpusSpec {
            num_videos: self.parse("corpus.num_videos")?,
            frames: self.parse("corpus.frames")?,
            height: self.parse("corpus.height")?,
            width: self.parse("corpus.width")?,
            channels: self.parse("corpus.channels")?,
            base_speed: self.parse("corpus.base_speed")?,
            max_pace: self.parse("corpus.max_pace")?,
            shape_classes: self.parse("corpus.shape_classes")?,
            shape_size: self.parse("corpus.shape_size")?,
            background_noise_amplitude: self.parse("corpus.noise")?,
            distractors: self.parse("corpus.distractors")?,
            seed: self.seed()?,
        })
    }

    pub fn pace_config(&self) -> Result<PaceConfig> {
        let mode = match self.get("pace.mode") {
            "relative" => PaceMode::Relative {
                max: self.parse("pace.max")?,
            },
            "absolute" => PaceMode::Absolute,
            "slow_only" => PaceMode::SlowOnly,
            "stepped" => PaceMode::Stepped {
                step: self.parse("pace.step")?,
            },
            other => {
                return Err(Self::value_error(
                    "pace.mode",
                    format!("`{other}` is not one of relative, absolute, slow_only, stepped"),
                ))
            }
        };
        PaceConfig::new(mode).map_err(|e| Self::value_error("pace.mode", e))
    }

    fn crop(&self) -> Result<(usize, usize)> {
        let raw = self.get("train.crop");
        let parse = |s: &str| {
            s.trim()
                .parse::<usize>()
                .map_err(|e| Self::value_error("train.crop", format!("cannot parse `{raw}`: {e}")))
        };
        match raw.split_once('x') {
            Some((h, w)) => Ok((parse(h)?, parse(w)?)),
            None => {
                let s = parse(raw)?;
                Ok((s, s))
            }
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// The network for clips of this config's clip length and crop.
    pub fn model_config(&self, channels: usize, num_classes: usize) -> Result<ModelConfig> {
        let (h, w) = self.crop()?;
        let input = InputShape {
            channels,
            frames: self.parse("train.clip_len")?,
            height: h,
            width: w,
        };
        self.model_config_for(input, num_classes)
    }

    pub fn model_config_for(&self, input: InputShape, num_classes: usize) -> Result<ModelConfig> {
        let kind = match self.get("model.kind") {
            "conv3d" => ConvKind::Conv3d,
            "conv2plus1d" => ConvKind::Conv2Plus1d,
            other => return Err(Self::value_error("model.kind", format!("`{other}` is not conv3d or conv2plus1d"))),
        };
        let channels = self.list("model.channels");
        let pools = self.list("model.pools");
        if channels.is_empty() || channels.len() != pools.len() {
            return Err(Self::value_error(
                "model.pools",
                format!("{} pools for {} channel entries", pools.len(), channels.len()),
            ));
        }
        let mut blocks = Vec::with_capacity(channels.len());
        for (c, p) in channels.iter().zip(&pools) {
            let out: usize = c
                .parse()
                .map_err(|e| Self::value_error("model.channels", format!("`{c}`: {e}")))?;
            let pool = match p.as_str() {
                "none" => PoolKind::None,
                "spatial" => PoolKind::Spatial,
                "full" => PoolKind::Full,
                other => {
                    return Err(Self::value_error(
                        "model.pools",
                        format!("`{other}` is not none, spatial or full"),
                    ))
                }
            };
            blocks.push(match kind {
                ConvKind::Conv3d => BlockConfig::conv3d(out, pool),
                ConvKind::Conv2Plus1d => BlockConfig::conv2plus1d(out, pool),
            });
        }
        let projection_head = match self.get("model.projection") {
            "none" => ProjectionHead::None,
            "mlp" => ProjectionHead::Mlp {
                hidden: self.parse("model.hidden")?,
            },
            other => return Err(Self::value_error("model.projection", format!("`{other}` is not none or mlp"))),
        };
        let config = ModelConfig {
            input,
            blocks,
            embed_dim: self.parse("model.embed_dim")?,
            num_classes,
            projection_head,
        };
        config.layout().map_err(|e| Self::value_error("model.channels", e))?;
        Ok(config)
    }

    pub fn contrastive(&self) -> Result<ContrastiveMode> {
        self.get("train.contrastive")
            .parse()
            .map_err(|e| Self::value_error("train.contrastive", e))
    }

    pub fn similarity(&self) -> Result<SimilarityMode> {
        match self.get("train.similarity") {
            "normalized" => Ok(SimilarityMode::Normalized),
            "raw_dot" => Ok(SimilarityMode::RawDot),
            other => Err(Self::value_error("train.similarity", format!("`{other}` is not normalized or raw_dot"))),
        }
    }

    pub fn weights(&self) -> Result<LossWeights> {
        let w = LossWeights {
            cls: self.parse("train.lambda_cls")?,
            ctr: self.parse("train.lambda_ctr")?,
        };
        w.validate().map_err(|e| Self::value_error("train.lambda_ctr", e))?;
        Ok(w)
    }

    fn jitter(&self, enabled_key: &str) -> Result<Option<JitterParams>> {
        if !self.flag(enabled_key)? {
            return Ok(None);
        }
        Ok(Some(JitterParams {
            per_frame: self.flag("train.jitter_per_frame")?,
            ..JitterParams::default()
        }))
    }

    pub fn train_config(&self, channels: usize, exec: Exec) -> Result<TrainConfig> {
        let pace = self.pace_config()?;
        let model = self.model_config(channels, pace.num_classes())?;
        let epoch_size = match self.get("train.epoch_size") {
            "auto" => None,
            _ => Some(self.parse("train.epoch_size")?),
        };
        let config = TrainConfig {
            clip_len: self.parse("train.clip_len")?,
            crop: self.crop()?,
            batch_videos: self.parse("train.batch_videos")?,
            contrastive: self.contrastive()?,
            weights: self.weights()?,
            similarity: self.similarity()?,
            lr: self.parse("train.lr")?,
            lr_decay_every: self.parse("train.lr_decay_every")?,
            lr_decay_factor: self.parse("train.lr_decay_factor")?,
            momentum: self.parse("train.momentum")?,
            weight_decay: self.parse("train.weight_decay")?,
            epochs: self.parse("train.epochs")?,
            epoch_size,
            jitter: self.jitter("train.jitter")?,
            flip_probability: self.parse("train.flip_probability")?,
            val_clips_per_video: self.parse("train.val_clips_per_video")?,
            model,
            seed: self.seed()?,
            exec,
            pace,
        };
        config.validate().map_err(|e| match e {
            pace_core::Error::Config { field, msg } => ConfigError::Value { key: field, msg },
            other => Self::value_error("train", other),
        })?;
        Ok(config)
    }

    pub fn probe_config(&self, exec: Exec) -> Result<ProbeConfig> {
        let mode: ProbeMode = self.get("eval.mode").parse().map_err(|e| Self::value_error("eval.mode", e))?;
        let layer: LayerTag = self.get("eval.layer").parse().map_err(|e| Self::value_error("eval.layer", e))?;
        Ok(ProbeConfig {
            mode,
            layer,
            linear_steps: self.parse("eval.linear_steps")?,
            linear_lr: self.parse("eval.linear_lr")?,
            linear_l2: self.parse("eval.linear_l2")?,
            epochs: self.parse("eval.epochs")?,
            batch_videos: self.parse("eval.batch_videos")?,
            lr: self.parse("eval.lr")?,
            momentum: self.parse("train.momentum")?,
            flip_probability: self.parse("train.flip_probability")?,
            jitter: self.jitter("train.jitter")?,
            seed: self.seed()?,
            exec,
        })
    }

    pub fn layer(&self) -> Result<LayerTag> {
        self.get("eval.layer").parse().map_err(|e| Self::value_error("eval.layer", e))
    }

    pub fn per_clip(&self) -> Result<bool> {
        self.flag("eval.per_clip")
    }

    pub fn eval_video(&self) -> Result<usize> {
        self.parse("eval.video")
    }

    /// `None` selects the last block.
    pub fn eval_block(&self) -> Result<Option<usize>> {
        match self.get("eval.block") {
            "last" => Ok(None),
            _ => Ok(Some(self.parse("eval.block")?)),
        }
    }

    pub fn gradcheck_input(&self, channels: usize) -> Result<InputShape> {
        let size = self.parse("gradcheck.size")?;
        Ok(InputShape {
            channels,
            frames: self.parse("gradcheck.frames")?,
            height: size,
            width: size,
        })
    }

    pub fn gradcheck_batch(&self) -> Result<usize> {
        self.parse("gradcheck.batch")
    }

    pub fn gradcheck_eps(&self) -> Result<f64> {
        self.parse("gradcheck.eps")
    }

    pub fn gradcheck_per_tensor(&self) -> Result<usize> {
        self.parse("gradcheck.per_tensor")
    }

    pub fn gradcheck_threshold(&self) -> Result<f64> {
        self.parse("gradcheck.threshold")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override_precedence() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\ntrain.lr = 0.05  # trailing\n\ncorpus.num_videos=12\n", "f.cfg")
            .unwrap();
        assert_eq!(c.get("train.lr"), "0.05");
        assert_eq!(c.get("corpus.num_videos"), "12");
        c.apply_override("train.lr=0.2").unwrap();
        assert_eq!(c.get("train.lr"), "0.2");
        assert_eq!(c.get("train.epochs"), "18");
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_errors() {
        let mut c = RunConfig::default();
        let err = c.apply_text("train.lr = 1\ntrain.lrr = 2\n", "x.cfg").unwrap_err();
        assert_eq!(err.to_string(), "x.cfg:2: unknown config key `train.lrr`");
        let err = c.apply_text("just words\n", "x.cfg").unwrap_err();
        assert!(matches!(err, ConfigError::Syntax { line: 1, .. }));
        assert!(matches!(c.apply_override("nope=1"), Err(ConfigError::UnknownKey(_))));
    }

    #[test]
    fn defaults_build_every_component() {
        let c = RunConfig::default();
        assert_eq!(c.corpus_spec().unwrap(), CorpusSpec::default());
        let t = c.train_config(3, Exec::Sequential).unwrap();
        assert_eq!(t.model, ModelConfig::tiny(t.model.input, 4));
        assert_eq!(t.epochs, 18);
        assert_eq!(t.crop, (32, 32));
        assert!(c.probe_config(Exec::Sequential).is_ok());
    }

    #[test]
    fn render_round_trips() {
        let mut c = RunConfig::default();
        c.set("train.contrastive", "same_context").unwrap();
        let mut d = RunConfig::default();
        d.apply_text(&c.render(), "rendered").unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn typed_errors_name_the_key() {
        let mut c = RunConfig::default();
        c.set("train.lr", "fast").unwrap();
        let err = c.train_config(3, Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("train.lr"), "{err}");
        let mut c = RunConfig::default();
        c.set("train.batch_videos", "1").unwrap();
        let err = c.train_config(3, Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("train.batch_videos"), "{err}");
    }
}
