//! Training configuration: a JSON document with every section optional.
//!
//! Unknown keys are rejected. Missing keys take their defaults; the
//! canonical dump spells every key out, with the classification margin
//! resolved for the selected head.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewMode};
use crate::data::IdentitySpec;
use crate::error::{Error, Result};
use crate::losses::{ContrastiveConfig, ContrastiveKind, HeadKind};
use crate::margin::MarginConfig;
use crate::pairing::{Protocol, ScmMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the `tanh` trunk layers.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    /// Images per mini-batch (N).
    pub batch_size: usize,
    /// Distinct identities per mini-batch (P); images per identity is N / P.
    pub identities_per_batch: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is divided by 10.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            batch_size: 64,
            identities_per_batch: 16,
            epochs: 30,
            lr: 0.03,
            milestones: vec![10, 18, 25],
            momentum: 0.9,
            weight_decay: 5e-4,
            eval_every: 0,
        }
    }
}

impl TrainSettings {
    /// Full-scale schedule: batch 512, 24 epochs, milestones at 8, 14, 20.
    pub fn full_scale() -> Self {
        TrainSettings {
            batch_size: 512,
            identities_per_batch: 128,
            epochs: 24,
            milestones: vec![8, 14, 20],
            lr: 0.1,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PairingConfig {
    pub protocol: Protocol,
    pub scm: ScmMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub head: HeadKind,
    /// Classification margin; defaults per head (0, 0.35, 0.5).
    pub m: Option<f64>,
    pub s: f64,
    pub lambda: f64,
    /// Temperature of the NT-Xent and SupCon alternatives.
    pub tau: f64,
    pub contrastive: ContrastiveKind,
    pub classification: bool,
    /// Continue the arc-margin logit linearly past `theta = pi - m`.
    pub arc_extension: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            head: HeadKind::Arcface,
            m: None,
            s: 64.0,
            lambda: 0.05,
            tau: 0.1,
            contrastive: ContrastiveKind::Coreface,
            classification: true,
            arc_extension: true,
        }
    }
}

impl LossConfig {
    pub fn margin(&self) -> f64 {
        self.m.unwrap_or_else(|| self.head.default_margin())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: IdentitySpec,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub augment: AugmentConfig,
    pub pairing: PairingConfig,
    pub loss: LossConfig,
    pub margin: MarginConfig,
}

fn check(ok: bool, key: &str, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::validation(key, msg))
    }
}

impl TrainConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            kind: self.loss.contrastive,
            scale: self.loss.s,
            tau: self.loss.tau,
            lambda: self.loss.lambda,
            classification: self.loss.classification,
            scm: self.pairing.scm,
            protocol: self.pairing.protocol,
        }
    }

    /// Seed for the dropout masks.
    pub fn augment_seed(&self) -> u64 {
        self.augment.seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(|e| match e {
            Error::InvalidSpec(m) => Error::validation("data", m),
            other => other,
        })?;

        check(!self.model.hidden.is_empty(), "model.hidden", "at least one trunk layer is required")?;
        check(self.model.hidden.iter().all(|&w| w > 0), "model.hidden", "widths must be positive")?;
        check(self.model.embed_dim > 0, "model.embed_dim", "must be positive")?;

        let t = &self.train;
        check(t.batch_size >= 2, "train.batch_size", "must be at least 2")?;
        check(
            t.identities_per_batch >= 2 && t.identities_per_batch <= t.batch_size,
            "train.identities_per_batch",
            "must lie in [2, batch_size]",
        )?;
        check(t.lr > 0.0 && t.lr.is_finite(), "train.lr", "must be positive")?;
        check(
            t.milestones.windows(2).all(|w| w[0] < w[1]),
            "train.milestones",
            "must be strictly increasing",
        )?;
        check((0.0..1.0).contains(&t.momentum), "train.momentum", "must lie in [0, 1)")?;
        check(
            t.weight_decay >= 0.0 && t.weight_decay.is_finite(),
            "train.weight_decay",
            "must be non-negative",
        )?;

        let a = &self.augment;
        check((0.0..1.0).contains(&a.p1), "augment.p1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&a.p2), "augment.p2", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&a.input_mask), "augment.input_mask", "must lie in [0, 1)")?;
        check(
            a.input_noise >= 0.0 && a.input_noise.is_finite(),
            "augment.input_noise",
            "must be non-negative",
        )?;

        let l = &self.loss;
        check(l.s > 0.0 && l.s.is_finite(), "loss.s", "must be positive")?;
        let m = l.margin();
        check(m.is_finite() && m >= 0.0, "loss.m", "must be non-negative")?;
        if l.head == HeadKind::Arcface {
            check(m < std::f64::consts::FRAC_PI_2, "loss.m", "arcface margin must be below pi/2")?;
        }
        check(l.lambda >= 0.0 && l.lambda.is_finite(), "loss.lambda", "must be non-negative")?;
        check(l.tau > 0.0 && l.tau.is_finite(), "loss.tau", "must be positive")?;
        check(
            l.classification || l.contrastive != ContrastiveKind::None,
            "loss.classification",
            "at least one loss term must be enabled",
        )?;
        check(
            a.mode != ViewMode::None || l.contrastive == ContrastiveKind::None,
            "loss.contrastive",
            "a contrastive term needs two views (augment.mode must not be none)",
        )?;
        check(
            l.classification || l.lambda > 0.0,
            "loss.lambda",
            "must be positive when classification is disabled",
        )?;

        check((0.0..=1.0).contains(&self.margin.alpha), "margin.alpha", "must lie in [0, 1]")?;
        Ok(())
    }

    /// Parse and validate a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: TrainConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            match inner.classify() {
                serde_json::error::Category::Data => {
                    let key = if path == "." { String::new() } else { path };
                    Error::Validation {
                        key,
                        message: strip_position(&inner.to_string()),
                    }
                }
                _ => Error::Parse {
                    line: inner.line(),
                    column: inner.column(),
                    message: strip_position(&inner.to_string()),
                },
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Fully spelled-out configuration with resolved defaults.
    pub fn canonical(&self) -> TrainConfig {
        let mut c = self.clone();
        c.loss.m = Some(self.loss.margin());
        c
    }

    pub fn dump(&self) -> String {
        serde_json::to_string_pretty(&self.canonical()).expect("config serializes")
    }
}

fn strip_position(msg: &str) -> String {
    match msg.rfind(" at line ") {
        Some(i) => msg[..i].to_string(),
        None => msg.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        let c = TrainConfig::from_json("{}").unwrap();
        assert_eq!(c.loss.s, 64.0);
        assert_eq!(c.loss.lambda, 0.05);
        assert_eq!(c.margin.alpha, 0.99);
        assert_eq!(c.pairing.protocol, Protocol::S_N);
        assert_eq!(c.pairing.scm, ScmMode::Exclude);
        assert_eq!(c.loss.margin(), 0.5);
        assert_eq!(c.train.momentum, 0.9);
        assert_eq!(c.train.weight_decay, 5e-4);
        assert_eq!(c.train.lr, 0.03);
        assert_eq!((c.augment.p1, c.augment.p2), (0.2, 0.5));
        assert!(c.loss.arc_extension);
    }

    #[test]
    fn negative_scale_names_key() {
        match TrainConfig::from_json(r#"{"loss": {"s": -1}}"#) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "loss.s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        match TrainConfig::from_json(r#"{"loss": {"bogus": 1}}"#) {
            Err(Error::Validation { key, message }) => {
                assert_eq!(key, "loss.bogus");
                assert!(message.contains("unknown field"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_names_key() {
        match TrainConfig::from_json(r#"{"pairing": {"protocol": "x_n"}}"#) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "pairing.protocol"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn syntax_error_has_position() {
        match TrainConfig::from_json("{\n  \"seed\": 1,\n  oops\n}") {
            Err(Error::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert!(column >= 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn canonical_round_trip() {
        let c = TrainConfig::from_json(r#"{"loss": {"head": "cosface"}, "pairing": {"protocol": "d_2n"}}"#).unwrap();
        let dumped = c.dump();
        let again = TrainConfig::from_json(&dumped).unwrap();
        assert_eq!(again.dump(), dumped);
        assert_eq!(again.loss.m, Some(0.35));
        assert_eq!(again.pairing.protocol, Protocol::D_2N);
    }

    #[test]
    fn contrastive_without_views_rejected() {
        match TrainConfig::from_json(r#"{"augment": {"mode": "none"}}"#) {
            Err(Error::Validation { key, .. }) => assert_eq!(key, "loss.contrastive"),
            other => panic!("{other:?}"),
        }
    }
}
