use std::fmt;
use std::str::FromStr;

use crate::error::{FpedError, Result};
use crate::losses::LossWeights;
use crate::router::{KlReduction, KlSchedule};

/// Architecture variant trained by the harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationMode {
    /// Prior-guided routing into the seven network experts.
    Moe,
    /// Same model with every non-V feature zeroed.
    OnlyV,
    /// Fixed atlas partition, every network weighted 1/7, no learned router.
    Uniform,
    /// Fixed atlas partition; expert outputs mixed by learned attention.
    Attention,
    /// Self-attention encoder of matched size instead of the expert bank.
    Transformer,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] =
        [Self::Moe, Self::OnlyV, Self::Uniform, Self::Attention, Self::Transformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Moe => "moe",
            Self::OnlyV => "onlyv",
            Self::Uniform => "uniform",
            Self::Attention => "attention",
            Self::Transformer => "transformer",
        }
    }

    /// Whether the mode uses the prior-guided router.
    pub fn routed(self) -> bool {
        matches!(self, Self::Moe | Self::OnlyV)
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AblationMode {
    type Err = FpedError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| FpedError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KlMode {
    /// Ramp / plateau / decay over the epoch budget.
    Schedule,
    /// `kl_w_max` at every epoch.
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorTarget {
    Image,
    Text,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub data: String,
    pub out_dir: String,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Learning-rate multiplier for router parameters.
    pub router_lr_scale: f64,
    /// Decoupled weight decay on the encoder (not routers or prior).
    pub weight_decay: f64,
    pub mode: AblationMode,
    pub kl_mode: KlMode,
    pub kl_w_max: f64,
    pub kl_w_min: f64,
    pub kl_ramp: f64,
    pub kl_plateau: f64,
    pub kl_decay: f64,
    pub kl_reduction: KlReduction,
    pub capacity_factor: f64,
    pub position_bias: bool,
    pub modality_routers: bool,
    pub weights: LossWeights,
    pub tau: f64,
    pub bidirectional: bool,
    pub lambda_prior: f64,
    pub prior_target: PriorTarget,
    pub feature_len: usize,
    pub tokens: usize,
    pub width: usize,
    pub l1_hidden: usize,
    pub l2_experts: usize,
    pub l2_hidden: usize,
    pub l2_top: usize,
    pub prior_steps: usize,
    pub prior_hidden: usize,
    pub prior_temb: usize,
    pub divergence_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: "data.fped".into(),
            out_dir: "run".into(),
            seed: 0,
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            router_lr_scale: 10.0,
            weight_decay: 0.0,
            mode: AblationMode::Moe,
            kl_mode: KlMode::Schedule,
            kl_w_max: 10.0,
            kl_w_min: 0.1,
            kl_ramp: 0.2,
            kl_plateau: 0.5,
            kl_decay: 0.3,
            kl_reduction: KlReduction::Mean,
            capacity_factor: 1.0,
            position_bias: true,
            modality_routers: true,
            weights: LossWeights::default(),
            tau: crate::losses::DEFAULT_TAU,
            bidirectional: true,
            lambda_prior: 1.0,
            prior_target: PriorTarget::Image,
            feature_len: crate::FEATURE_LEN,
            tokens: 8,
            width: 32,
            l1_hidden: 32,
            l2_experts: 14,
            l2_hidden: 64,
            l2_top: 2,
            prior_steps: 100,
            prior_hidden: 128,
            prior_temb: 32,
            divergence_limit: 1e6,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| FpedError::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(FpedError::Config(format!("bad value {v:?} for {key}; expected true or false"))),
    }
}

impl TrainConfig {
    /// Epoch-based KL schedule implied by the fractions and the budget.
    pub fn kl_schedule(&self) -> KlSchedule {
        match self.kl_mode {
            KlMode::Constant => KlSchedule::constant(self.kl_w_max),
            KlMode::Schedule => {
                let e = self.epochs as f64;
                KlSchedule {
                    ramp: self.kl_ramp * e,
                    plateau: self.kl_plateau * e,
                    decay: self.kl_decay * e,
                    w_max: self.kl_w_max,
                    w_min: self.kl_w_min,
                }
            }
        }
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data" => self.data = v.to_string(),
            "out_dir" => self.out_dir = v.to_string(),
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "router_lr_scale" => self.router_lr_scale = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "kl_mode" => {
                self.kl_mode = match v {
                    "schedule" => KlMode::Schedule,
                    "constant" => KlMode::Constant,
                    _ => return Err(FpedError::Config(format!("bad kl_mode {v:?}"))),
                }
            }
            "kl_w_max" => self.kl_w_max = parse(key, v)?,
            "kl_w_min" => self.kl_w_min = parse(key, v)?,
            "kl_ramp" => self.kl_ramp = parse(key, v)?,
            "kl_plateau" => self.kl_plateau = parse(key, v)?,
            "kl_decay" => self.kl_decay = parse(key, v)?,
            "kl_reduction" => {
                self.kl_reduction = match v {
                    "mean" => KlReduction::Mean,
                    "sum" => KlReduction::Sum,
                    _ => return Err(FpedError::Config(format!("bad kl_reduction {v:?}"))),
                }
            }
            "capacity_factor" => self.capacity_factor = parse(key, v)?,
            "position_bias" => self.position_bias = parse_bool(key, v)?,
            "modality_routers" => self.modality_routers = parse_bool(key, v)?,
            "w_kl" => self.weights.kl = parse(key, v)?,
            "w_cos" => self.weights.cos = parse(key, v)?,
            "w_mse" => self.weights.mse = parse(key, v)?,
            "w_softclip" => self.weights.softclip = parse(key, v)?,
            "w_dp" => self.weights.dp = parse(key, v)?,
            "w_prior_clip" => self.weights.prior_clip = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "bidirectional" => self.bidirectional = parse_bool(key, v)?,
            "lambda_prior" => self.lambda_prior = parse(key, v)?,
            "prior_target" => {
                self.prior_target = match v {
                    "image" => PriorTarget::Image,
                    "text" => PriorTarget::Text,
                    _ => return Err(FpedError::Config(format!("bad prior_target {v:?}"))),
                }
            }
            "feature_len" => self.feature_len = parse(key, v)?,
            "tokens" => self.tokens = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "l1_hidden" => self.l1_hidden = parse(key, v)?,
            "l2_experts" => self.l2_experts = parse(key, v)?,
            "l2_hidden" => self.l2_hidden = parse(key, v)?,
            "l2_top" => self.l2_top = parse(key, v)?,
            "prior_steps" => self.prior_steps = parse(key, v)?,
            "prior_hidden" => self.prior_hidden = parse(key, v)?,
            "prior_temb" => self.prior_temb = parse(key, v)?,
            "divergence_limit" => self.divergence_limit = parse(key, v)?,
            _ => return Err(FpedError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| FpedError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(FpedError::Config(format!("line {}: duplicate key {k:?}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| FpedError::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FpedError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and nonnegative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        if !(self.router_lr_scale >= 0.0 && self.router_lr_scale.is_finite()) || !(self.weight_decay >= 0.0) {
            return bad("router_lr_scale and weight_decay must be finite and nonnegative");
        }
        if !(self.capacity_factor > 0.0 && self.capacity_factor <= 2.0) {
            return bad("capacity_factor must lie in (0, 2]");
        }
        if self.tau <= 0.0 {
            return bad("tau must be positive");
        }
        if self.feature_len < crate::NUM_NETWORKS {
            return bad("feature_len must be at least 7");
        }
        if self.l2_top == 0 || self.l2_top > self.l2_experts {
            return bad("l2_top must lie in 1..=l2_experts");
        }
        if [self.tokens, self.width, self.l1_hidden, self.l2_hidden, self.prior_hidden, self.prior_temb].contains(&0) {
            return bad("layer sizes must be positive");
        }
        if self.prior_steps < 2 {
            return bad("prior_steps must be at least 2");
        }
        let fr = [self.kl_ramp, self.kl_plateau, self.kl_decay];
        if fr.iter().any(|f| *f < 0.0) || self.kl_w_max < 0.0 || self.kl_w_min < 0.0 {
            return bad("KL schedule values must be nonnegative");
        }
        if !(self.divergence_limit > 0.0) {
            return bad("divergence_limit must be positive");
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize())` reproduces the config.
    pub fn serialize(&self) -> String {
        let b = |v: bool| if v { "true" } else { "false" };
        let w = &self.weights;
        let pairs: Vec<(&str, String)> = vec![
            ("data", self.data.clone()),
            ("out_dir", self.out_dir.clone()),
            ("seed", self.seed.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("adam_eps", format!("{:?}", self.adam_eps)),
            ("router_lr_scale", format!("{:?}", self.router_lr_scale)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("mode", self.mode.to_string()),
            ("kl_mode", match self.kl_mode {
                KlMode::Schedule => "schedule",
                KlMode::Constant => "constant",
            }
            .into()),
            ("kl_w_max", format!("{:?}", self.kl_w_max)),
            ("kl_w_min", format!("{:?}", self.kl_w_min)),
            ("kl_ramp", format!("{:?}", self.kl_ramp)),
            ("kl_plateau", format!("{:?}", self.kl_plateau)),
            ("kl_decay", format!("{:?}", self.kl_decay)),
            ("kl_reduction", match self.kl_reduction {
                KlReduction::Mean => "mean",
                KlReduction::Sum => "sum",
            }
            .into()),
            ("capacity_factor", format!("{:?}", self.capacity_factor)),
            ("position_bias", b(self.position_bias).into()),
            ("modality_routers", b(self.modality_routers).into()),
            ("w_kl", format!("{:?}", w.kl)),
            ("w_cos", format!("{:?}", w.cos)),
            ("w_mse", format!("{:?}", w.mse)),
            ("w_softclip", format!("{:?}", w.softclip)),
            ("w_dp", format!("{:?}", w.dp)),
            ("w_prior_clip", format!("{:?}", w.prior_clip)),
            ("tau", format!("{:?}", self.tau)),
            ("bidirectional", b(self.bidirectional).into()),
            ("lambda_prior", format!("{:?}", self.lambda_prior)),
            ("prior_target", match self.prior_target {
                PriorTarget::Image => "image",
                PriorTarget::Text => "text",
            }
            .into()),
            ("feature_len", self.feature_len.to_string()),
            ("tokens", self.tokens.to_string()),
            ("width", self.width.to_string()),
            ("l1_hidden", self.l1_hidden.to_string()),
            ("l2_experts", self.l2_experts.to_string()),
            ("l2_hidden", self.l2_hidden.to_string()),
            ("l2_top", self.l2_top.to_string()),
            ("prior_steps", self.prior_steps.to_string()),
            ("prior_hidden", self.prior_hidden.to_string()),
            ("prior_temb", self.prior_temb.to_string()),
            ("divergence_limit", format!("{:?}", self.divergence_limit)),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_round_trips() {
        let mut c = TrainConfig { seed: 17, lr: 3e-4, mode: AblationMode::Attention, ..Default::default() };
        c.weights.dp = 0.25;
        c.kl_mode = KlMode::Constant;
        assert_eq!(TrainConfig::parse(&c.serialize()).unwrap(), c);
    }

    #[test]
    fn comments_and_defaults() {
        let c = TrainConfig::parse("# run\nepochs = 3  # short\n\nmode = uniform\n").unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.mode, AblationMode::Uniform);
        assert_eq!(c.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrainConfig::parse("epochs = 3\nepochs = 4").is_err());
        assert!(TrainConfig::parse("no_such_key = 1").is_err());
        assert!(TrainConfig::parse("epochs").is_err());
        assert!(TrainConfig::parse("epochs = many").is_err());
        assert!(TrainConfig::parse("capacity_factor = 3").is_err());
        assert!(TrainConfig::parse("mode = dense").is_err());
    }

    #[test]
    fn schedule_uses_epoch_fractions() {
        let c = TrainConfig { epochs: 100, ..Default::default() };
        let s = c.kl_schedule();
        assert_eq!((s.ramp, s.plateau, s.decay), (20.0, 50.0, 30.0));
    }
}
