use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::engine::OptimizerConfig;
use crate::error::{Error, Result};
use crate::models::{PretrainConfig, LORA_RANK};
use crate::synfoc::{AlphaRule, Normalizer, PASTE_RATIO_RANGE, TAU};

/// Training recipe: the synergistic method, the two standalone baselines and
/// the ensemble-ratio ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Synfoc,
    StandaloneConv,
    StandaloneFound,
    Constant,
    Cps,
    Linear,
    SelfOnly,
    MutualOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 8] = [
        Strategy::Synfoc,
        Strategy::StandaloneConv,
        Strategy::StandaloneFound,
        Strategy::Constant,
        Strategy::Cps,
        Strategy::Linear,
        Strategy::SelfOnly,
        Strategy::MutualOnly,
    ];

    pub fn uses_conv(self) -> bool {
        self != Strategy::StandaloneFound
    }

    pub fn uses_found(self) -> bool {
        self != Strategy::StandaloneConv
    }

    pub fn is_standalone(self) -> bool {
        matches!(self, Strategy::StandaloneConv | Strategy::StandaloneFound)
    }

    /// Ensemble rule of the two-model strategies.
    pub fn alpha_rule(self, smc: bool) -> Option<AlphaRule> {
        Some(match self {
            Strategy::Synfoc if smc => AlphaRule::Smc,
            Strategy::Synfoc | Strategy::Constant => AlphaRule::Constant,
            Strategy::Cps => AlphaRule::Cps,
            Strategy::Linear => AlphaRule::Linear,
            Strategy::SelfOnly => AlphaRule::SelfOnly,
            Strategy::MutualOnly => AlphaRule::MutualOnly,
            Strategy::StandaloneConv | Strategy::StandaloneFound => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Synfoc => "synfoc",
            Strategy::StandaloneConv => "standalone-conv",
            Strategy::StandaloneFound => "standalone-found",
            Strategy::Constant => "constant",
            Strategy::Cps => "cps",
            Strategy::Linear => "linear",
            Strategy::SelfOnly => "self-only",
            Strategy::MutualOnly => "mutual-only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Every knob of one training run. Serialized as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Dataset directory; when absent the default split is generated from
    /// `data_seed`.
    pub data: Option<PathBuf>,
    pub data_seed: u64,
    pub seed: u64,
    pub strategy: Strategy,
    pub t_max: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub tau: f64,
    pub ema_decay: f64,
    pub conv_optimizer: OptimizerConfig,
    pub found_optimizer: OptimizerConfig,
    pub lora_rank: usize,
    /// Poly decay `lr·(1 − t/t_max)^0.9` of both learning rates; off keeps
    /// them constant.
    pub lr_decay: bool,
    pub cdcr: bool,
    pub smc: bool,
    /// Give the pasted labeled rectangle weight 1 in the pseudo-label weights.
    pub compose_weight_map: bool,
    pub s_norm: Normalizer,
    /// Evaluate every this many iterations (0: only at the end).
    pub eval_interval: usize,
    pub precision: Precision,
    pub foundation_ckpt: Option<PathBuf>,
    pub paste_ratio: (f64, f64),
    pub pretrain: PretrainConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            data_seed: 2024,
            seed: 1,
            strategy: Strategy::Synfoc,
            t_max: 2000,
            labeled_batch: 4,
            unlabeled_batch: 4,
            tau: TAU,
            ema_decay: crate::models::EMA_DECAY,
            conv_optimizer: OptimizerConfig::sgd_default(),
            found_optimizer: OptimizerConfig::adamw_default(),
            lora_rank: LORA_RANK,
            lr_decay: false,
            cdcr: true,
            smc: true,
            compose_weight_map: true,
            s_norm: Normalizer::AllChannels,
            eval_interval: 0,
            precision: Precision::F32,
            foundation_ckpt: None,
            paste_ratio: PASTE_RATIO_RANGE,
            pretrain: PretrainConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {value:?}"))),
    }
}

fn set_opt_field(opt: &mut OptimizerConfig, field: &str, key: &str, value: &str) -> Result<()> {
    let v: f64 = parse(key, value)?;
    let slot = match (opt, field) {
        (OptimizerConfig::SgdMomentum { lr, .. }, "lr") | (OptimizerConfig::Adamw { lr, .. }, "lr") => lr,
        (OptimizerConfig::SgdMomentum { momentum, .. }, "momentum") => momentum,
        (OptimizerConfig::SgdMomentum { weight_decay, .. }, "weight_decay")
        | (OptimizerConfig::Adamw { weight_decay, .. }, "weight_decay") => weight_decay,
        (OptimizerConfig::Adamw { beta1, .. }, "beta1") => beta1,
        (OptimizerConfig::Adamw { beta2, .. }, "beta2") => beta2,
        (OptimizerConfig::Adamw { eps, .. }, "eps") => eps,
        _ => return Err(Error::Config(format!("unknown key {key:?}"))),
    };
    *slot = v;
    Ok(())
}

fn opt_fields(prefix: &str, opt: &OptimizerConfig, out: &mut Vec<(String, String)>) {
    let mut push = |k: &str, v: f64| out.push((format!("{prefix}_{k}"), v.to_string()));
    match *opt {
        OptimizerConfig::SgdMomentum { lr, momentum, weight_decay } => {
            push("lr", lr);
            push("momentum", momentum);
            push("weight_decay", weight_decay);
        }
        OptimizerConfig::Adamw { lr, beta1, beta2, eps, weight_decay } => {
            push("lr", lr);
            push("beta1", beta1);
            push("beta2", beta2);
            push("eps", eps);
            push("weight_decay", weight_decay);
        }
    }
}

impl TrainConfig {
    /// Apply one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data" => self.data = (!value.is_empty()).then(|| PathBuf::from(value)),
            "data_seed" => self.data_seed = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "strategy" => self.strategy = value.parse()?,
            "t_max" => self.t_max = parse(key, value)?,
            "labeled_batch" => self.labeled_batch = parse(key, value)?,
            "unlabeled_batch" => self.unlabeled_batch = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "ema_decay" => self.ema_decay = parse(key, value)?,
            "lora_rank" => self.lora_rank = parse(key, value)?,
            "lr_decay" => self.lr_decay = parse_bool(key, value)?,
            "cdcr" => self.cdcr = parse_bool(key, value)?,
            "smc" => self.smc = parse_bool(key, value)?,
            "compose_weight_map" => self.compose_weight_map = parse_bool(key, value)?,
            "s_norm" => {
                self.s_norm = match value {
                    "all-channels" => Normalizer::AllChannels,
                    "foreground" => Normalizer::Foreground,
                    _ => return Err(Error::Config(format!("s_norm: unknown {value:?}"))),
                }
            }
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Error::Config(format!("precision: unknown {value:?}"))),
                }
            }
            "foundation_ckpt" => self.foundation_ckpt = (!value.is_empty()).then(|| PathBuf::from(value)),
            "paste_min" => self.paste_ratio.0 = parse(key, value)?,
            "paste_max" => self.paste_ratio.1 = parse(key, value)?,
            "pretrain_epochs" => self.pretrain.epochs = parse(key, value)?,
            "pretrain_batch" => self.pretrain.batch_size = parse(key, value)?,
            "pretrain_seed" => self.pretrain.seed = parse(key, value)?,
            "pretrain_lr" => {
                let lr = parse(key, value)?;
                self.pretrain.optimizer = self.pretrain.optimizer.with_lr(lr);
            }
            _ => {
                if let Some(field) = key.strip_prefix("conv_") {
                    set_opt_field(&mut self.conv_optimizer, field, key, value)?;
                } else if let Some(field) = key.strip_prefix("found_") {
                    set_opt_field(&mut self.found_optimizer, field, key, value)?;
                } else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be positive".into()));
        }
        if self.labeled_batch == 0 || self.unlabeled_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        let (lo, hi) = self.paste_ratio;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("paste ratio {lo}..{hi} not inside (0, 1)")));
        }
        Ok(())
    }

    /// Ordered `(key, value)` pairs that [`TrainConfig::parse_text`] reads back.
    pub fn entries(&self) -> Vec<(String, String)> {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        let mut out = vec![
            ("data".to_string(), path(&self.data)),
            ("data_seed".into(), self.data_seed.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("strategy".into(), self.strategy.to_string()),
            ("t_max".into(), self.t_max.to_string()),
            ("labeled_batch".into(), self.labeled_batch.to_string()),
            ("unlabeled_batch".into(), self.unlabeled_batch.to_string()),
            ("tau".into(), self.tau.to_string()),
            ("ema_decay".into(), self.ema_decay.to_string()),
        ];
        opt_fields("conv", &self.conv_optimizer, &mut out);
        opt_fields("found", &self.found_optimizer, &mut out);
        out.extend([
            ("lora_rank".to_string(), self.lora_rank.to_string()),
            ("lr_decay".into(), on(self.lr_decay)),
            ("cdcr".into(), on(self.cdcr)),
            ("smc".into(), on(self.smc)),
            ("compose_weight_map".into(), on(self.compose_weight_map)),
            (
                "s_norm".into(),
                match self.s_norm {
                    Normalizer::AllChannels => "all-channels",
                    Normalizer::Foreground => "foreground",
                }
                .into(),
            ),
            ("eval_interval".into(), self.eval_interval.to_string()),
            (
                "precision".into(),
                match self.precision {
                    Precision::F32 => "f32",
                    Precision::F64 => "f64",
                }
                .into(),
            ),
            ("foundation_ckpt".into(), path(&self.foundation_ckpt)),
            ("paste_min".into(), self.paste_ratio.0.to_string()),
            ("paste_max".into(), self.paste_ratio.1.to_string()),
            ("pretrain_epochs".into(), self.pretrain.epochs.to_string()),
            ("pretrain_batch".into(), self.pretrain.batch_size.to_string()),
            ("pretrain_seed".into(), self.pretrain.seed.to_string()),
            ("pretrain_lr".into(), self.pretrain.optimizer.lr().to_string()),
        ]);
        out
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Settings that depart from the literal method description.
    /// Learning-rate multiplier at iteration `t`.
    pub fn lr_factor(&self, t: usize) -> f64 {
        if self.lr_decay {
            (1.0 - t as f64 / self.t_max as f64).max(0.0).powf(0.9)
        } else {
            1.0
        }
    }

    pub fn deviation_flags(&self) -> BTreeMap<&'static str, String> {
        let mut flags = BTreeMap::new();
        if self.compose_weight_map {
            flags.insert("weight_map", "pasted region weighted 1".to_string());
        }
        flags.insert(
            "s_norm",
            match self.s_norm {
                Normalizer::AllChannels => "N*(C+1)*H*W".to_string(),
                Normalizer::Foreground => "N*C*H*W".to_string(),
            },
        );
        flags.insert("mse_sign", "positive".to_string());
        if self.lr_decay {
            flags.insert("lr_schedule", "poly 0.9".to_string());
        }
        flags.insert("region_masks", "student predictions on the composed view".to_string());
        if self.strategy == Strategy::Cps {
            flags.insert("cps_alpha", "0".to_string());
        }
        flags
    }
}
