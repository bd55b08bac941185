//! Experiment configuration in flat `key = value` text.
//!
//! Lines starting with `#` are comments. Unknown keys and malformed values
//! are rejected with the offending line number.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::data::{Protocol, SplitCounts, TypePartition};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Objective, Placement};
use crate::moe::{LossWeights, SueOptions};
use crate::params::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    Fixed(f64),
    /// EER threshold of the dev split.
    DevEer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub placement: Placement,
    pub sue: SueOptions,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    /// Total epochs; the first `warmup_epochs` train the plain model.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub protocol: Protocol,
    pub seed: u64,
    pub prompt_bank: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub counts: SplitCounts,
    pub partition: TypePartition,
    pub objective: Objective,
    pub symmetric: bool,
    pub threshold: ThresholdMode,
    pub freeze_gates: bool,
    pub freeze_routed: bool,
    /// Start routed experts as zero maps so conversion is output-preserving.
    pub zero_routed_init: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            placement: Placement {
                vision: (0..6).collect(),
                text: vec![],
            },
            sue: SueOptions::default(),
            weights: LossWeights::default(),
            // the full-scale setting uses lr 1e-6 on a pretrained backbone;
            // from scratch, lr 1e-3 or batches of 32 collapse both towers onto
            // one embedding within the first epoch
            adam: AdamConfig {
                lr: 3e-4,
                ..AdamConfig::default()
            },
            epochs: 8,
            warmup_epochs: 3,
            batch_size: 16,
            protocol: Protocol::P1,
            seed: 0,
            prompt_bank: None,
            out_dir: PathBuf::from("runs"),
            counts: SplitCounts::default(),
            partition: TypePartition::default(),
            objective: Objective::Contrastive,
            symmetric: false,
            threshold: ThresholdMode::Fixed(0.5),
            freeze_gates: false,
            freeze_routed: false,
            zero_routed_init: false,
        }
    }
}

/// Parses `"0-2,5"` into `[0, 1, 2, 5]`; `""` and `"none"` are empty.
pub fn parse_ranges(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(vec![]);
    }
    let mut out = BTreeSet::new();
    for part in s.split(',') {
        let part = part.trim();
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (parse_num::<usize>(a)?, parse_num::<usize>(b)?),
            None => {
                let v = parse_num::<usize>(part)?;
                (v, v)
            }
        };
        if lo > hi {
            return Err(Error::Config(format!("descending range `{part}`")));
        }
        out.extend(lo..=hi);
    }
    Ok(out.into_iter().collect())
}

/// Inverse of [`parse_ranges`], collapsing runs.
pub fn format_ranges(v: &[usize]) -> String {
    if v.is_empty() {
        return "none".into();
    }
    let mut parts = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[j] + 1 {
            j += 1;
        }
        parts.push(if i == j {
            v[i].to_string()
        } else {
            format!("{}-{}", v[i], v[j])
        });
        i = j + 1;
    }
    parts.join(",")
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{}` as {}", s.trim(), std::any::type_name::<T>())))
}

fn parse_bool(s: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Config(format!("expected true or false, got `{other}`"))),
    }
}

fn parse_types(s: &str) -> Result<BTreeSet<u8>> {
    Ok(parse_ranges(s)?.into_iter().map(|t| t as u8).collect())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key; used by the parser and by command-line overrides.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = parse_num(v)?,
            "channels" => m.channels = parse_num(v)?,
            "patch" => m.patch = parse_num(v)?,
            "dim" => m.dim = parse_num(v)?,
            "heads" => m.heads = parse_num(v)?,
            "depth" => m.depth = parse_num(v)?,
            "ffn_hidden" => m.ffn_hidden = parse_num(v)?,
            "embed_dim" => m.embed_dim = parse_num(v)?,
            "text_dim" => m.text_dim = parse_num(v)?,
            "text_heads" => m.text_heads = parse_num(v)?,
            "text_depth" => m.text_depth = parse_num(v)?,
            "max_len" => m.max_len = parse_num(v)?,
            "vision_sue" => self.placement.vision = parse_ranges(v)?,
            "text_sue" => self.placement.text = parse_ranges(v)?,
            "shared_expert" => self.sue.shared = parse_bool(v)?,
            "n_experts" => self.sue.n_experts = parse_num(v)?,
            "top_k" => self.sue.k = parse_num(v)?,
            "renormalize" => self.sue.renormalize = parse_bool(v)?,
            "alpha" => self.weights.alpha = parse_num(v)?,
            "beta" => self.weights.beta = parse_num(v)?,
            "gamma" => self.weights.gamma = parse_num(v)?,
            "lr" => self.adam.lr = parse_num(v)?,
            "adam_beta1" => self.adam.beta1 = parse_num(v)?,
            "adam_beta2" => self.adam.beta2 = parse_num(v)?,
            "adam_eps" => self.adam.eps = parse_num(v)?,
            "epochs" => self.epochs = parse_num(v)?,
            "warmup_epochs" => self.warmup_epochs = parse_num(v)?,
            "batch_size" => self.batch_size = parse_num(v)?,
            "protocol" => self.protocol = v.parse()?,
            "seed" => self.seed = parse_num(v)?,
            "prompt_bank" => self.prompt_bank = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "train_count" => self.counts.train = parse_num(v)?,
            "dev_count" => self.counts.dev = parse_num(v)?,
            "test_count" => self.counts.test = parse_num(v)?,
            "bonafide_fraction" => self.counts.bonafide_fraction = parse_num(v)?,
            "held_out_physical" => self.partition.held_out_physical = parse_types(v)?,
            "held_out_digital" => self.partition.held_out_digital = parse_types(v)?,
            "objective" => {
                self.objective = match v {
                    "contrastive" => Objective::Contrastive,
                    "classifier" => Objective::Classifier,
                    other => return Err(Error::Config(format!("unknown objective `{other}`"))),
                }
            }
            "symmetric" => self.symmetric = parse_bool(v)?,
            "threshold" => {
                self.threshold = if v == "dev-eer" {
                    ThresholdMode::DevEer
                } else {
                    ThresholdMode::Fixed(parse_num(v)?)
                }
            }
            "freeze_gates" => self.freeze_gates = parse_bool(v)?,
            "freeze_routed" => self.freeze_routed = parse_bool(v)?,
            "zero_routed_init" => self.zero_routed_init = parse_bool(v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("image_size", m.image_size),
            ("channels", m.channels),
            ("patch", m.patch),
            ("dim", m.dim),
            ("heads", m.heads),
            ("ffn_hidden", m.ffn_hidden),
            ("embed_dim", m.embed_dim),
            ("text_dim", m.text_dim),
            ("text_heads", m.text_heads),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if m.max_len < 3 {
            return Err(Error::Config("max_len must leave room for BOS, EOS and one character".into()));
        }
        for (tower, idx, depth) in [
            ("vision", &self.placement.vision, m.depth),
            ("text", &self.placement.text, m.text_depth),
        ] {
            if let Some(&i) = idx.iter().find(|&&i| i >= depth) {
                return Err(Error::Config(format!("{tower} SUE layer {i} out of range (depth {depth})")));
            }
        }
        if self.sue.k == 0 || self.sue.k > self.sue.n_experts {
            return Err(Error::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.sue.n_experts, self.sue.k
            )));
        }
        self.weights.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1) and eps > 0".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if let ThresholdMode::Fixed(t) = self.threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold {t} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Serializes every key; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let types = |s: &BTreeSet<u8>| format_ranges(&s.iter().map(|&t| usize::from(t)).collect::<Vec<_>>());
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("patch", m.patch.to_string());
        kv("dim", m.dim.to_string());
        kv("heads", m.heads.to_string());
        kv("depth", m.depth.to_string());
        kv("ffn_hidden", m.ffn_hidden.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("text_dim", m.text_dim.to_string());
        kv("text_heads", m.text_heads.to_string());
        kv("text_depth", m.text_depth.to_string());
        kv("max_len", m.max_len.to_string());
        kv("vision_sue", format_ranges(&self.placement.vision));
        kv("text_sue", format_ranges(&self.placement.text));
        kv("shared_expert", self.sue.shared.to_string());
        kv("n_experts", self.sue.n_experts.to_string());
        kv("top_k", self.sue.k.to_string());
        kv("renormalize", self.sue.renormalize.to_string());
        kv("alpha", format!("{:?}", self.weights.alpha));
        kv("beta", format!("{:?}", self.weights.beta));
        kv("gamma", format!("{:?}", self.weights.gamma));
        kv("lr", format!("{:?}", self.adam.lr));
        kv("adam_beta1", format!("{:?}", self.adam.beta1));
        kv("adam_beta2", format!("{:?}", self.adam.beta2));
        kv("adam_eps", format!("{:?}", self.adam.eps));
        kv("epochs", self.epochs.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("protocol", self.protocol.to_string());
        kv("seed", self.seed.to_string());
        kv(
            "prompt_bank",
            self.prompt_bank.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv("out_dir", self.out_dir.display().to_string());
        kv("train_count", self.counts.train.to_string());
        kv("dev_count", self.counts.dev.to_string());
        kv("test_count", self.counts.test.to_string());
        kv("bonafide_fraction", format!("{:?}", self.counts.bonafide_fraction));
        kv("held_out_physical", types(&self.partition.held_out_physical));
        kv("held_out_digital", types(&self.partition.held_out_digital));
        kv(
            "objective",
            match self.objective {
                Objective::Contrastive => "contrastive",
                Objective::Classifier => "classifier",
            }
            .into(),
        );
        kv("symmetric", self.symmetric.to_string());
        kv(
            "threshold",
            match self.threshold {
                ThresholdMode::Fixed(t) => format!("{t:?}"),
                ThresholdMode::DevEer => "dev-eer".into(),
            },
        );
        kv("freeze_gates", self.freeze_gates.to_string());
        kv("freeze_routed", self.freeze_routed.to_string());
        kv("zero_routed_init", self.zero_routed_init.to_string());
        out
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
