use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{InferenceMode, DEFAULT_ATTENTION_CHANNELS};
use crate::augment::{AugmentKind, AugmentPlan};
use crate::encoders::EncoderDims;
use crate::error::{config_err, Error, Result};
use crate::prompt::ClassPosition;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Emd,
    Mmd,
    Js,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Emd => "emd",
            LossKind::Mmd => "mmd",
            LossKind::Js => "js",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "emd" => Ok(LossKind::Emd),
            "mmd" => Ok(LossKind::Mmd),
            "js" => Ok(LossKind::Js),
            other => config_err(format!("unknown alignment loss `{other}`")),
        }
    }
}

/// Where calibration targets come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSource {
    /// Trainable vision-language prototypes.
    #[default]
    Vlp,
    /// Language prototypes (means of prompt features), held constant.
    Lp,
}

impl fmt::Display for PrototypeSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrototypeSource::Vlp => "vlp",
            PrototypeSource::Lp => "lp",
        })
    }
}

impl FromStr for PrototypeSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "vlp" => Ok(PrototypeSource::Vlp),
            "lp" => Ok(PrototypeSource::Lp),
            other => config_err(format!("unknown prototype source `{other}`")),
        }
    }
}

/// Order in which augmentation kinds are added when only a group count is
/// given: the default four, then the rest of the pool.
pub const AUGMENT_RANKING: [AugmentKind; 7] = [
    AugmentKind::Flip,
    AugmentKind::GaussianBlur,
    AugmentKind::RandomGray,
    AugmentKind::RandomCropResize,
    AugmentKind::Rotate,
    AugmentKind::Resize,
    AugmentKind::ColorJitter,
];

pub fn ranked_plan(groups: usize) -> Result<AugmentPlan> {
    if groups == 0 || groups > AUGMENT_RANKING.len() {
        return config_err(format!("group count must be 1 to 7, got {groups}"));
    }
    AugmentPlan::from_kinds(&AUGMENT_RANKING[..groups])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub sigma: f64,
    pub tau: f64,
    pub lr_main: f64,
    pub lr_emd: f64,
    pub epochs: usize,
    pub image_batch: usize,
    pub prompt_batch: usize,
    /// Prompts per group `L`.
    pub prompts_per_group: usize,
    /// Context vectors per prompt `M`.
    pub context_len: usize,
    /// Shared feature width `D`.
    pub feature_dim: usize,
    /// Token width `E`.
    pub embed_dim: usize,
    pub seed: u64,
    /// Seed of the frozen encoders, shared by every run of an experiment.
    pub encoder_seed: u64,
    /// 0 attacks the input image; `b` attacks the output of block `b`.
    pub sa_position: usize,
    pub inference_mode: InferenceMode,
    pub loss_kind: LossKind,
    pub prototype_source: PrototypeSource,
    /// Attention adapters and the attack.
    pub sa: bool,
    /// Prototype bank, alignment loss and calibration.
    pub cmda: bool,
    /// When false every group sees the un-augmented image.
    pub use_augment: bool,
    pub plan: AugmentPlan,
    pub class_position: ClassPosition,
    pub attention_channels: usize,
    /// Language stats per prompt group instead of pooled over the collection.
    pub per_group_language_stats: bool,
    pub image_size: usize,
    pub channels: usize,
    pub blocks: usize,
    pub hidden: usize,
    /// Centered encoder activations; see [`EncoderDims::centered`].
    pub centered_activation: bool,
    /// Validation accuracy is measured every this many epochs (and at the
    /// last); 0 disables it.
    pub val_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            sigma: 0.7,
            tau: 0.01,
            lr_main: 0.001,
            lr_emd: 0.01,
            epochs: 50,
            image_batch: 20,
            prompt_batch: 4,
            prompts_per_group: 8,
            context_len: 16,
            feature_dim: 64,
            embed_dim: 32,
            seed: 0,
            encoder_seed: 7,
            sa_position: 0,
            inference_mode: InferenceMode::Modulate,
            loss_kind: LossKind::Emd,
            prototype_source: PrototypeSource::Vlp,
            sa: true,
            cmda: true,
            use_augment: true,
            plan: crate::augment::default_plan(),
            class_position: ClassPosition::End,
            attention_channels: DEFAULT_ATTENTION_CHANNELS,
            per_group_language_stats: false,
            image_size: 32,
            channels: 3,
            blocks: 2,
            hidden: 16,
            centered_activation: true,
            val_interval: 10,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`].
pub const TRAIN_KEYS: &[&str] = &[
    "alpha",
    "sigma",
    "tau",
    "lr_main",
    "lr_emd",
    "epochs",
    "image_batch",
    "prompt_batch",
    "prompts_per_group",
    "context_len",
    "feature_dim",
    "embed_dim",
    "seed",
    "encoder_seed",
    "sa_position",
    "inference_mode",
    "loss_kind",
    "prototype_source",
    "sa",
    "cmda",
    "use_augment",
    "groups",
    "plan",
    "class_position",
    "attention_channels",
    "per_group_language_stats",
    "image_size",
    "channels",
    "blocks",
    "hidden",
    "centered_activation",
    "val_interval",
];

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("invalid value `{value}` for `{key}`")))
}

impl TrainConfig {
    pub fn groups(&self) -> usize {
        self.plan.len()
    }

    pub fn encoder_dims(&self, classes: usize) -> EncoderDims {
        EncoderDims {
            height: self.image_size,
            width: self.image_size,
            channels: self.channels,
            embed: self.embed_dim,
            feature: self.feature_dim,
            blocks: self.blocks,
            hidden: self.hidden,
            context_len: self.context_len,
            classes,
            centered: self.centered_activation,
        }
    }

    /// Whether calibration and the prototype bank are active.
    pub fn uses_bank(&self) -> bool {
        self.cmda && self.prototype_source == PrototypeSource::Vlp
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "alpha" => self.alpha = parse_value(key, v)?,
            "sigma" => self.sigma = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "lr_main" => self.lr_main = parse_value(key, v)?,
            "lr_emd" => self.lr_emd = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "image_batch" => self.image_batch = parse_value(key, v)?,
            "prompt_batch" => self.prompt_batch = parse_value(key, v)?,
            "prompts_per_group" => self.prompts_per_group = parse_value(key, v)?,
            "context_len" => self.context_len = parse_value(key, v)?,
            "feature_dim" => self.feature_dim = parse_value(key, v)?,
            "embed_dim" => self.embed_dim = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "encoder_seed" => self.encoder_seed = parse_value(key, v)?,
            "sa_position" => self.sa_position = parse_value(key, v)?,
            "inference_mode" => self.inference_mode = v.parse()?,
            "loss_kind" => self.loss_kind = v.parse()?,
            "prototype_source" => self.prototype_source = v.parse()?,
            "sa" => self.sa = parse_value(key, v)?,
            "cmda" => self.cmda = parse_value(key, v)?,
            "use_augment" => self.use_augment = parse_value(key, v)?,
            "groups" => self.plan = ranked_plan(parse_value(key, v)?)?,
            "plan" => {
                let kinds = v
                    .split(',')
                    .map(str::parse)
                    .collect::<Result<Vec<AugmentKind>>>()?;
                self.plan = AugmentPlan::from_kinds(&kinds)?;
            }
            "class_position" => self.class_position = v.parse()?,
            "attention_channels" => self.attention_channels = parse_value(key, v)?,
            "per_group_language_stats" => self.per_group_language_stats = parse_value(key, v)?,
            "image_size" => self.image_size = parse_value(key, v)?,
            "channels" => self.channels = parse_value(key, v)?,
            "blocks" => self.blocks = parse_value(key, v)?,
            "hidden" => self.hidden = parse_value(key, v)?,
            "centered_activation" => self.centered_activation = parse_value(key, v)?,
            "val_interval" => self.val_interval = parse_value(key, v)?,
            other => return config_err(format!("unknown training key `{other}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return config_err(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return config_err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.sigma >= 0.0) {
            return config_err(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.epochs < 2 {
            return config_err("at least two epochs are required (the first is warmup)");
        }
        if self.image_batch == 0 {
            return config_err("image batch must be positive");
        }
        if self.prompt_batch == 0 || self.prompt_batch > self.prompts_per_group {
            return config_err(format!(
                "prompt batch {} must lie in 1..={}",
                self.prompt_batch, self.prompts_per_group
            ));
        }
        if !(self.lr_main >= 0.0 && self.lr_emd >= 0.0) {
            return config_err("learning rates must be non-negative");
        }
        if self.sa_position > self.blocks {
            return config_err(format!(
                "attack position {} exceeds the {} encoder blocks",
                self.sa_position, self.blocks
            ));
        }
        if self.attention_channels == 0 {
            return config_err("attention channels must be positive");
        }
        self.encoder_dims(2).validate()
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse(format!(
                "line {}: expected `key = value`",
                i + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl FromStr for TrainConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    /// Key-value text that parses back to `self`.
    pub fn to_kv(&self) -> String {
        let kinds: Vec<_> = self.plan.kinds().iter().map(|k| k.name()).collect();
        let fields: Vec<(&str, String)> = vec![
            ("alpha", self.alpha.to_string()),
            ("sigma", self.sigma.to_string()),
            ("tau", self.tau.to_string()),
            ("lr_main", self.lr_main.to_string()),
            ("lr_emd", self.lr_emd.to_string()),
            ("epochs", self.epochs.to_string()),
            ("image_batch", self.image_batch.to_string()),
            ("prompt_batch", self.prompt_batch.to_string()),
            ("prompts_per_group", self.prompts_per_group.to_string()),
            ("context_len", self.context_len.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("seed", self.seed.to_string()),
            ("encoder_seed", self.encoder_seed.to_string()),
            ("sa_position", self.sa_position.to_string()),
            ("inference_mode", self.inference_mode.to_string()),
            ("loss_kind", self.loss_kind.to_string()),
            ("prototype_source", self.prototype_source.to_string()),
            ("sa", self.sa.to_string()),
            ("cmda", self.cmda.to_string()),
            ("use_augment", self.use_augment.to_string()),
            ("plan", kinds.join(",")),
            ("class_position", self.class_position.to_string()),
            ("attention_channels", self.attention_channels.to_string()),
            (
                "per_group_language_stats",
                self.per_group_language_stats.to_string(),
            ),
            ("image_size", self.image_size.to_string()),
            ("channels", self.channels.to_string()),
            ("blocks", self.blocks.to_string()),
            ("hidden", self.hidden.to_string()),
            ("centered_activation", self.centered_activation.to_string()),
            ("val_interval", self.val_interval.to_string()),
        ];
        fields
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}
