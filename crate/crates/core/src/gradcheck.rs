//! Central finite-difference verification of analytic gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::augment::{AugmentConfig, AugmentMasks};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{
    classification_batch, coreface_loss, joint_loss, ntxent_loss, supcon_loss, ClassifierHead, ContrastiveConfig,
    ContrastiveKind, HeadKind, LossResult,
};
use crate::margin::MarginState;
use crate::numerics::{normalize_rows, EmbeddingBatch, Mat};
use crate::pairing::{build_plan, Protocol, ScmMode};
use crate::trainer::{forward_backward, Model, Views};

pub const EPSILON: f64 = 1e-5;
/// Gradient magnitude below which coordinates are compared on an absolute
/// scale, relative to `max(1, |loss|)`. Central differences carry roundoff
/// of order `1e-16 * |loss| / EPSILON`, so this keeps that noise near 1e-5.
pub const GRAD_FLOOR: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-4;
pub const PIPELINE_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckTarget {
    Softmax,
    Cosface,
    Arcface,
    Ntxent,
    Supcon,
    Coreface,
    Joint,
    Pipeline,
}

impl CheckTarget {
    pub const ALL: [CheckTarget; 8] = [
        CheckTarget::Softmax,
        CheckTarget::Cosface,
        CheckTarget::Arcface,
        CheckTarget::Ntxent,
        CheckTarget::Supcon,
        CheckTarget::Coreface,
        CheckTarget::Joint,
        CheckTarget::Pipeline,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CheckTarget::Softmax => "softmax",
            CheckTarget::Cosface => "cosface",
            CheckTarget::Arcface => "arcface",
            CheckTarget::Ntxent => "ntxent",
            CheckTarget::Supcon => "supcon",
            CheckTarget::Coreface => "coreface",
            CheckTarget::Joint => "joint",
            CheckTarget::Pipeline => "pipeline",
        }
    }

    pub fn tolerance(&self) -> f64 {
        if *self == CheckTarget::Pipeline {
            PIPELINE_TOLERANCE
        } else {
            LOSS_TOLERANCE
        }
    }
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckTarget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CheckTarget::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::validation("loss", format!("unknown gradient check target {s:?}")))
    }
}

/// Instance sizes: images `n`, embedding dim `d`, classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckSize {
    pub n: usize,
    pub d: usize,
    pub classes: usize,
}

impl Default for CheckSize {
    fn default() -> Self {
        CheckSize { n: 4, d: 8, classes: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub target: CheckTarget,
    pub trials: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

fn floor_for(loss: f64) -> f64 {
    GRAD_FLOOR * loss.abs().max(1.0)
}

/// Central difference of `f` at every coordinate of `x`.
pub fn numeric_gradient(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + EPSILON;
            let plus = f(x);
            x[i] = orig - EPSILON;
            let minus = f(x);
            x[i] = orig;
            (plus - minus) / (2.0 * EPSILON)
        })
        .collect()
}

fn max_error(analytic: &[f64], numeric: &[f64], loss: f64) -> f64 {
    let floor = floor_for(loss);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n, floor))
        .fold(0.0, f64::max)
}

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut m = random_mat(rows, cols, rng);
    normalize_rows(&mut m).expect("random rows are nonzero");
    m
}

/// Labels with at least two classes and some repeats.
fn random_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut l: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    if l.iter().all(|&x| x == l[0]) {
        l[0] = (l[0] + 1) % classes;
    }
    l
}

fn check_embedding_loss(
    emb: &Mat,
    analytic: &LossResult,
    f: impl Fn(&Mat) -> Result<f64>,
) -> Result<(usize, f64)> {
    let mut x = emb.as_slice().to_vec();
    let mut failure = None;
    let numeric = numeric_gradient(&mut x, |v| {
        let m = Mat::from_vec(emb.rows(), emb.cols(), v.to_vec()).expect("finite");
        f(&m).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((x.len(), max_error(analytic.grad_embeddings.as_slice(), &numeric, analytic.value)))
}

fn check_weights(
    head: &ClassifierHead,
    analytic: &LossResult,
    f: impl Fn(&ClassifierHead) -> Result<f64>,
) -> Result<(usize, f64)> {
    let grad = analytic.grad_weights.as_ref().expect("head gradient");
    let mut w = head.weight.as_slice().to_vec();
    let mut failure = None;
    let numeric = numeric_gradient(&mut w, |v| {
        let mut h = head.clone();
        h.weight = Mat::from_vec(head.weight.rows(), head.weight.cols(), v.to_vec()).expect("finite");
        f(&h).unwrap_or_else(|e| {
            failure.get_or_insert(e);
            f64::NAN
        })
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((w.len(), max_error(grad.as_slice(), &numeric, analytic.value)))
}

fn random_head(kind: HeadKind, d: usize, classes: usize, rng: &mut ChaCha8Rng) -> Result<ClassifierHead> {
    ClassifierHead::new(random_mat(d, classes, rng), 64.0, kind.default_margin(), kind)
}

/// One random instance; returns (coordinates checked, max relative error).
fn trial(target: CheckTarget, size: CheckSize, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let CheckSize { n, d, classes } = size;
    match target {
        CheckTarget::Softmax | CheckTarget::Cosface | CheckTarget::Arcface => {
            let kind = match target {
                CheckTarget::Softmax => HeadKind::Softmax,
                CheckTarget::Cosface => HeadKind::Cosface,
                _ => HeadKind::Arcface,
            };
            let head = random_head(kind, d, classes, rng)?;
            let rows = unit_rows(n, d, rng);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let w = 1.0 / n as f64;
            let r = classification_batch(&rows, &labels, &head, w)?;
            let (c1, e1) = check_embedding_loss(&rows, &r, |m| Ok(classification_batch(m, &labels, &head, w)?.value))?;
            let (c2, e2) = check_weights(&head, &r, |h| Ok(classification_batch(&rows, &labels, h, w)?.value))?;
            Ok((c1 + c2, e1.max(e2)))
        }
        CheckTarget::Ntxent | CheckTarget::Supcon | CheckTarget::Coreface => {
            let labels = random_labels(n, classes.max(2), rng);
            let emb = unit_rows(2 * n, d, rng);
            let batch = EmbeddingBatch::paired(emb.clone(), &labels)?;
            let tau = rng.random_range(0.1..1.0);
            let m_c = rng.random_range(-0.2..0.5);
            let protocol = Protocol::ALL[rng.random_range(0..4)];
            let scm = [ScmMode::Off, ScmMode::Zero, ScmMode::Exclude][rng.random_range(0..3)];
            let plan = build_plan(n, &labels, protocol, scm)?;
            let eval = |m: &Mat| -> Result<LossResult> {
                let b = EmbeddingBatch::paired(m.clone(), &labels)?;
                match target {
                    CheckTarget::Ntxent => ntxent_loss(&b, tau),
                    CheckTarget::Supcon => supcon_loss(&b, tau),
                    _ => coreface_loss(&b, &plan, m_c, 64.0),
                }
            };
            let r = eval(&batch.embeddings)?;
            check_embedding_loss(&emb, &r, |m| Ok(eval(m)?.value))
        }
        CheckTarget::Joint => {
            let labels = random_labels(n, classes.max(2), rng);
            let emb = unit_rows(2 * n, d, rng);
            let head = random_head(HeadKind::Arcface, d, classes.max(2), rng)?;
            let cfg = ContrastiveConfig {
                kind: [ContrastiveKind::Ntxent, ContrastiveKind::Supcon, ContrastiveKind::Coreface][rng.random_range(0..3)],
                lambda: rng.random_range(0.05..1.0),
                ..Default::default()
            };
            let plan = build_plan(n, &labels, cfg.protocol, cfg.scm)?;
            let m_c = rng.random_range(0.0..0.3);
            let eval = |m: &Mat, h: &ClassifierHead| -> Result<LossResult> {
                let b = EmbeddingBatch::paired(m.clone(), &labels)?;
                Ok(joint_loss(&b, h, &plan, m_c, &cfg)?.result)
            };
            let r = eval(&emb, &head)?;
            let (c1, e1) = check_embedding_loss(&emb, &r, |m| Ok(eval(m, &head)?.value))?;
            let (c2, e2) = check_weights(&head, &r, |h| Ok(eval(&emb, h)?.value))?;
            Ok((c1 + c2, e1.max(e2)))
        }
        CheckTarget::Pipeline => pipeline_trial(size, rng),
    }
}

fn pipeline_trial(size: CheckSize, rng: &mut ChaCha8Rng) -> Result<(usize, f64)> {
    let CheckSize { n, d, classes } = size;
    let classes = classes.max(2);
    let mut cfg = TrainConfig::default();
    cfg.seed = rng.random();
    cfg.model.hidden = vec![10, 10];
    cfg.model.embed_dim = d;
    cfg.loss.lambda = rng.random_range(0.05..1.0);
    cfg.pairing.protocol = Protocol::ALL[rng.random_range(0..4)];
    let input_dim = 6;
    let mut model = Model::new(&cfg, input_dim, classes)?;
    let x = random_mat(n, input_dim, rng);
    let labels = random_labels(n, classes, rng);
    let aug = AugmentConfig {
        p1: 0.2,
        p2: 0.5,
        ..Default::default()
    };
    let views = Views::Feature(AugmentMasks::sample(&aug, n, 10, rng)?);
    // alpha 0 keeps the margin fixed, so it carries no parameter dependence
    let margin = MarginState {
        m_c: rng.random_range(0.0..0.3),
        ..MarginState::new(0.0)
    };
    let con = cfg.contrastive();
    let out = forward_backward(&model, &x, &labels, &views, &margin, &con)?;
    let analytic: Vec<Vec<f64>> = out.grads.slices().iter().map(|s| s.to_vec()).collect();

    let floor = floor_for(out.total);
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = model.params_mut()[t][i];
            let mut eval = |v: f64| -> Result<f64> {
                model.params_mut()[t][i] = v;
                Ok(forward_backward(&model, &x, &labels, &views, &margin, &con)?.total)
            };
            let plus = eval(orig + EPSILON)?;
            let minus = eval(orig - EPSILON)?;
            model.params_mut()[t][i] = orig;
            let numeric = (plus - minus) / (2.0 * EPSILON);
            worst = worst.max(relative_error(grad[i], numeric, floor));
            coords += 1;
        }
    }
    Ok((coords, worst))
}

/// Run `trials` random instances of one target.
pub fn run(target: CheckTarget, size: CheckSize, trials: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut coordinates = 0;
    for _ in 0..trials {
        let (c, e) = trial(target, size, &mut rng)?;
        worst = worst.max(e);
        coordinates += c;
    }
    Ok(CheckReport {
        target,
        trials,
        coordinates,
        max_rel_error: worst,
        tolerance: target.tolerance(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_target_passes_small() {
        for t in CheckTarget::ALL {
            let r = run(t, CheckSize { n: 3, d: 4, classes: 3 }, 2, 11).unwrap();
            assert!(r.passed(), "{t}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut x = vec![1.0, 2.0];
        let num = numeric_gradient(&mut x, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!(max_error(&[2.0, 3.0], &num, 1.0) < 1e-8);
        assert!(max_error(&[2.2, 3.0], &num, 1.0) > 0.05);
    }
}
