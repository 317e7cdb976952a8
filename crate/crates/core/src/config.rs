//! Flat `key = value` configuration shared by every stage of the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which cross-space interaction the generator stack uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// p⁺ queries, z⁺ keys/values.
    Full,
    /// No interaction: w = z⁺.
    NoTransformer,
    /// z⁺ queries, p⁺ keys/values.
    SwappedQkv,
    /// Per-row perceptron over concatenated z⁺ and p⁺ rows.
    MlpInteraction,
    /// One latent draw feeds both spaces.
    SingleSpace,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoTransformer => "no_transformer",
            Variant::SwappedQkv => "swapped_qkv",
            Variant::MlpInteraction => "mlp_interaction",
            Variant::SingleSpace => "single_space",
        }
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "full" => Variant::Full,
            "no_transformer" => Variant::NoTransformer,
            "swapped_qkv" => Variant::SwappedQkv,
            "mlp_interaction" => Variant::MlpInteraction,
            "single_space" => Variant::SingleSpace,
            other => return Err(format!("unknown variant `{other}`")),
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Channel count per feature-map resolution, e.g. `4:64,8:64,16:32,32:32`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelSchedule(pub BTreeMap<usize, usize>);

impl ChannelSchedule {
    pub fn channels(&self, res: usize) -> Option<usize> {
        self.0.get(&res).copied()
    }
}

impl FromStr for ChannelSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut map = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (r, c) = part
                .split_once(':')
                .ok_or_else(|| format!("expected `res:channels`, got `{part}`"))?;
            let r: usize = r.trim().parse().map_err(|_| format!("bad resolution `{r}`"))?;
            let c: usize = c.trim().parse().map_err(|_| format!("bad channel count `{c}`"))?;
            map.insert(r, c);
        }
        Ok(Self(map))
    }
}

impl fmt::Display for ChannelSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|(r, c)| format!("{r}:{c}")).collect();
        f.write_str(&parts.join(","))
    }
}

/// Architecture, loss weights and run settings.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Sub-vectors per latent code.
    pub n: usize,
    /// Width of every sub-vector.
    pub d: usize,
    pub heads: usize,
    /// Transformer depth.
    pub layers: usize,
    pub resolution: usize,
    pub channel_schedule: ChannelSchedule,
    /// Demodulation stabilizer.
    pub eps: f64,
    pub lambda_adv: f64,
    pub lambda_dis: f64,
    pub lambda_d_regu: f64,
    pub lambda_path_regu: f64,
    pub variant: Variant,
    pub mapper_layers: usize,
    pub mapper_lr_mul: f64,
    pub layer_norm: bool,
    pub minibatch_std: bool,

    pub seed: u64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub r1_interval: u64,
    pub path_interval: u64,
    pub path_decay: f64,
    pub path_batch_shrink: usize,
    /// Exponential moving average of generator weights; 0 disables it.
    pub ema_beta: f64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
    pub fid_samples: usize,

    pub extractor_steps: u64,
    pub extractor_batch: usize,

    pub inv_batch_size: usize,
    pub inv_steps: u64,
    pub inv_lr: f64,
    pub inv_weight_l2: f64,
    pub inv_weight_lpips: f64,
    pub inv_weight_id: f64,
    pub inv_real_fraction: f64,

    pub svm_c: f64,
    pub svm_quantile: f64,
    pub edit_samples: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale defaults (32 px, four 64-wide sub-vectors).
    pub fn desk() -> Self {
        Self {
            n: 4,
            d: 64,
            heads: 4,
            layers: 2,
            resolution: 32,
            channel_schedule: "4:64,8:64,16:32,32:32".parse().unwrap(),
            eps: 1e-8,
            lambda_adv: 1.0,
            lambda_dis: 1.0,
            lambda_d_regu: 10.0,
            lambda_path_regu: 2.0,
            variant: Variant::Full,
            mapper_layers: 2,
            mapper_lr_mul: 0.01,
            layer_norm: false,
            minibatch_std: false,
            seed: 0,
            batch_size: 16,
            steps: 20_000,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
            r1_interval: 16,
            path_interval: 8,
            path_decay: 0.01,
            path_batch_shrink: 2,
            ema_beta: 0.0,
            checkpoint_interval: 2_000,
            log_interval: 500,
            fid_samples: 1_000,
            extractor_steps: 3_000,
            extractor_batch: 32,
            inv_batch_size: 8,
            inv_steps: 20_000,
            inv_lr: 1e-3,
            inv_weight_l2: 1.0,
            inv_weight_lpips: 0.8,
            inv_weight_id: 0.1,
            inv_real_fraction: 0.5,
            svm_c: 1.0,
            svm_quantile: 0.25,
            edit_samples: 20_000,
        }
    }

    /// Full-size architecture: n=16, d=512, 8 heads, 8 layers, 256 px.
    pub fn paper_scale() -> Self {
        Self {
            n: 16,
            d: 512,
            heads: 8,
            layers: 8,
            resolution: 256,
            channel_schedule: "4:512,8:512,16:512,32:512,64:256,128:128,256:64".parse().unwrap(),
            steps: 800_000,
            mapper_layers: 8,
            ..Self::desk()
        }
    }

    /// Per-head width.
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Channels of the reshaped initial feature map.
    pub fn input_channels(&self) -> usize {
        self.n * self.d / 16
    }

    /// Effective transformer depth for the configured variant.
    pub fn interaction_layers(&self) -> usize {
        match self.variant {
            Variant::NoTransformer | Variant::MlpInteraction => 0,
            _ => self.layers,
        }
    }

    pub fn channels(&self, res: usize) -> usize {
        self.channel_schedule.channels(res).expect("validated schedule")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::Validation { key: key.into(), msg });
        if self.n == 0 {
            return bad("n", "must be positive".into());
        }
        if self.d == 0 {
            return bad("d", "must be positive".into());
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(
                "heads",
                format!("d not divisible by heads ({} % {})", self.d, self.heads),
            );
        }
        if !(self.n * self.d).is_multiple_of(16) {
            return bad("n", format!("n*d = {} is not divisible by 16", self.n * self.d));
        }
        if self.resolution < 8 || !self.resolution.is_power_of_two() {
            return bad("resolution", format!("{} is not a power of two >= 8", self.resolution));
        }
        let mut r = 4;
        while r <= self.resolution {
            if self.channel_schedule.channels(r).unwrap_or(0) == 0 {
                return bad("channel_schedule", format!("missing channel count for resolution {r}"));
            }
            r *= 2;
        }
        if self.eps <= 0.0 {
            return bad("eps", "must be > 0".into());
        }
        if self.mapper_layers == 0 {
            return bad("mapper_layers", "must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1".into());
        }
        if self.r1_interval == 0 {
            return bad("r1_interval", "must be >= 1".into());
        }
        if self.path_interval == 0 {
            return bad("path_interval", "must be >= 1".into());
        }
        if self.path_batch_shrink == 0 {
            return bad("path_batch_shrink", "must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta", "must lie in [0, 1)".into());
        }
        if !(0.0..0.5).contains(&self.svm_quantile) || self.svm_quantile == 0.0 {
            return bad("svm_quantile", "must lie in (0, 0.5)".into());
        }
        if !(0.0..=1.0).contains(&self.inv_real_fraction) {
            return bad("inv_real_fraction", "must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// Parses config text; keys not mentioned keep their desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{}`", raw.trim()),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<V: FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| Error::Validation {
                key: key.into(),
                msg: format!("cannot parse `{value}`"),
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::Validation {
                    key: key.into(),
                    msg: format!("expected a boolean, got `{value}`"),
                }),
            }
        }
        match key {
            "n" => self.n = p(key, value)?,
            "d" => self.d = p(key, value)?,
            "heads" => self.heads = p(key, value)?,
            "layers" | "layers_L" => self.layers = p(key, value)?,
            "resolution" => self.resolution = p(key, value)?,
            "channel_schedule" => {
                self.channel_schedule = value
                    .parse()
                    .map_err(|msg| Error::Validation { key: key.into(), msg })?
            }
            "eps" => self.eps = p(key, value)?,
            "lambda_adv" => self.lambda_adv = p(key, value)?,
            "lambda_dis" => self.lambda_dis = p(key, value)?,
            "lambda_d_regu" => self.lambda_d_regu = p(key, value)?,
            "lambda_path_regu" => self.lambda_path_regu = p(key, value)?,
            "variant" => {
                self.variant = value
                    .parse()
                    .map_err(|msg| Error::Validation { key: key.into(), msg })?
            }
            "mapper_layers" => self.mapper_layers = p(key, value)?,
            "mapper_lr_mul" => self.mapper_lr_mul = p(key, value)?,
            "layer_norm" => self.layer_norm = flag(key, value)?,
            "minibatch_std" => self.minibatch_std = flag(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "lr" => self.lr = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "adam_eps" => self.adam_eps = p(key, value)?,
            "r1_interval" => self.r1_interval = p(key, value)?,
            "path_interval" => self.path_interval = p(key, value)?,
            "path_decay" => self.path_decay = p(key, value)?,
            "path_batch_shrink" => self.path_batch_shrink = p(key, value)?,
            "ema_beta" => self.ema_beta = p(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = p(key, value)?,
            "log_interval" => self.log_interval = p(key, value)?,
            "fid_samples" => self.fid_samples = p(key, value)?,
            "extractor_steps" => self.extractor_steps = p(key, value)?,
            "extractor_batch" => self.extractor_batch = p(key, value)?,
            "inv_batch_size" => self.inv_batch_size = p(key, value)?,
            "inv_steps" => self.inv_steps = p(key, value)?,
            "inv_lr" => self.inv_lr = p(key, value)?,
            "inv_weight_l2" => self.inv_weight_l2 = p(key, value)?,
            "inv_weight_lpips" => self.inv_weight_lpips = p(key, value)?,
            "inv_weight_id" => self.inv_weight_id = p(key, value)?,
            "inv_real_fraction" => self.inv_real_fraction = p(key, value)?,
            "svm_c" => self.svm_c = p(key, value)?,
            "svm_quantile" => self.svm_quantile = p(key, value)?,
            "edit_samples" => self.edit_samples = p(key, value)?,
            other => {
                return Err(Error::Validation {
                    key: other.into(),
                    msg: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let entries: Vec<(&str, String)> = vec![
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("heads", self.heads.to_string()),
            ("layers", self.layers.to_string()),
            ("resolution", self.resolution.to_string()),
            ("channel_schedule", self.channel_schedule.to_string()),
            ("eps", fmt_f64(self.eps)),
            ("lambda_adv", fmt_f64(self.lambda_adv)),
            ("lambda_dis", fmt_f64(self.lambda_dis)),
            ("lambda_d_regu", fmt_f64(self.lambda_d_regu)),
            ("lambda_path_regu", fmt_f64(self.lambda_path_regu)),
            ("variant", self.variant.to_string()),
            ("mapper_layers", self.mapper_layers.to_string()),
            ("mapper_lr_mul", fmt_f64(self.mapper_lr_mul)),
            ("layer_norm", self.layer_norm.to_string()),
            ("minibatch_std", self.minibatch_std.to_string()),
            ("seed", self.seed.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", fmt_f64(self.lr)),
            ("beta1", fmt_f64(self.beta1)),
            ("beta2", fmt_f64(self.beta2)),
            ("adam_eps", fmt_f64(self.adam_eps)),
            ("r1_interval", self.r1_interval.to_string()),
            ("path_interval", self.path_interval.to_string()),
            ("path_decay", fmt_f64(self.path_decay)),
            ("path_batch_shrink", self.path_batch_shrink.to_string()),
            ("ema_beta", fmt_f64(self.ema_beta)),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("log_interval", self.log_interval.to_string()),
            ("fid_samples", self.fid_samples.to_string()),
            ("extractor_steps", self.extractor_steps.to_string()),
            ("extractor_batch", self.extractor_batch.to_string()),
            ("inv_batch_size", self.inv_batch_size.to_string()),
            ("inv_steps", self.inv_steps.to_string()),
            ("inv_lr", fmt_f64(self.inv_lr)),
            ("inv_weight_l2", fmt_f64(self.inv_weight_l2)),
            ("inv_weight_lpips", fmt_f64(self.inv_weight_lpips)),
            ("inv_weight_id", fmt_f64(self.inv_weight_id)),
            ("inv_real_fraction", fmt_f64(self.inv_real_fraction)),
            ("svm_c", fmt_f64(self.svm_c)),
            ("svm_quantile", fmt_f64(self.svm_quantile)),
            ("edit_samples", self.edit_samples.to_string()),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path.as_ref())?;
    ModelConfig::parse(&text)
}
