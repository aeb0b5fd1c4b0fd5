//! Loss functions with analytic gradients.
//!
//! All contrastive losses take an [`EmbeddingBatch`] whose rows are already
//! unit-normalized, so the similarity of two rows is their inner product.
//! Gradients are returned w.r.t. those rows; the normalization layer is
//! differentiated separately by the trainer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, log_softmax_ce, softmax, EmbeddingBatch, Mat, NORM_FLOOR};
use crate::pairing::{PairPlan, Protocol, ScmMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `s * cos(theta_j)` for every class.
    Softmax,
    /// `s * (cos(theta_y) - m)` on the target class.
    Cosface,
    /// `s * cos(theta_y + m)` on the target class.
    #[default]
    Arcface,
}

impl HeadKind {
    pub fn default_margin(&self) -> f64 {
        match self {
            HeadKind::Softmax => 0.0,
            HeadKind::Cosface => 0.35,
            HeadKind::Arcface => 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Cosface => "cosface",
            HeadKind::Arcface => "arcface",
        }
    }
}

impl FromStr for HeadKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "cosface" => Ok(HeadKind::Cosface),
            "arcface" => Ok(HeadKind::Arcface),
            other => Err(format!("unknown head {other:?}")),
        }
    }
}

/// Which contrastive term joins the classification loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    None,
    Ntxent,
    Supcon,
    #[default]
    Coreface,
}

impl fmt::Display for ContrastiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContrastiveKind::None => "none",
            ContrastiveKind::Ntxent => "ntxent",
            ContrastiveKind::Supcon => "supcon",
            ContrastiveKind::Coreface => "coreface",
        })
    }
}

/// Normalized-weight classifier.
///
/// `weight` is d x n (embedding dim by class count); its columns are
/// re-normalized before every logit computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Mat,
    pub scale: f64,
    pub margin: f64,
    pub kind: HeadKind,
    /// Arc-margin only: past `theta = pi - m` continue as
    /// `cos(theta) - (1 - cos(m))`, which meets `cos(theta + m) = -1` at the
    /// edge and keeps decreasing where the plain form turns back upward.
    pub arc_extension: bool,
}

impl ClassifierHead {
    pub fn new(weight: Mat, scale: f64, margin: f64, kind: HeadKind) -> Result<Self> {
        if !(scale > 0.0) {
            return Err(Error::validation("loss.s", "scale must be positive"));
        }
        if kind == HeadKind::Arcface && !(0.0..std::f64::consts::FRAC_PI_2).contains(&margin) {
            return Err(Error::validation("loss.m", "arcface margin must lie in [0, pi/2)"));
        }
        Ok(ClassifierHead {
            weight,
            scale,
            margin,
            kind,
            arc_extension: false,
        })
    }

    pub fn with_arc_extension(mut self, on: bool) -> Self {
        self.arc_extension = on;
        self
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }

    /// Unit-norm class vectors, one row per class.
    pub fn normalized(&self) -> Result<NormalizedHead> {
        let (d, n) = (self.dim(), self.classes());
        let mut unit = Mat::zeros(n, d);
        let mut norms = Vec::with_capacity(n);
        for j in 0..n {
            let col = self.weight.column(j);
            let nrm = dot(&col, &col).sqrt();
            if !(nrm > NORM_FLOOR) {
                return Err(Error::ZeroNorm { index: j, norm: nrm });
            }
            for (u, c) in unit.row_mut(j).iter_mut().zip(&col) {
                *u = c / nrm;
            }
            norms.push(nrm);
        }
        Ok(NormalizedHead { unit, norms })
    }

    /// Cosines between `h` and every class vector.
    pub fn cosines(&self, h: &[f64]) -> Result<Vec<f64>> {
        let nh = self.normalized()?;
        Ok((0..self.classes()).map(|j| dot(h, nh.unit.row(j))).collect())
    }
}

#[derive(Debug, Clone)]
pub struct NormalizedHead {
    /// n x d.
    pub unit: Mat,
    pub norms: Vec<f64>,
}

impl NormalizedHead {
    /// Map the gradient w.r.t. unit class rows (n x d) back to the raw
    /// d x n weight.
    fn backward(&self, grad_unit: &Mat) -> Mat {
        let (n, d) = (self.unit.rows(), self.unit.cols());
        let mut out = Mat::zeros(d, n);
        for j in 0..n {
            let u = self.unit.row(j);
            let g = grad_unit.row(j);
            let proj = dot(u, g);
            for k in 0..d {
                out.set(k, j, (g[k] - u[k] * proj) / self.norms[j]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_embeddings: Mat,
    pub grad_weights: Option<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub kind: ContrastiveKind,
    pub scale: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Whether the classification term participates.
    pub classification: bool,
    pub scm: ScmMode,
    pub protocol: Protocol,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            kind: ContrastiveKind::Coreface,
            scale: 64.0,
            tau: 0.1,
            lambda: 0.05,
            classification: true,
            scm: ScmMode::Exclude,
            protocol: Protocol::S_N,
        }
    }
}

/// Target-class logit and its derivative w.r.t. the target cosine.
fn target_logit(head: &ClassifierHead, cos_y: f64) -> Result<(f64, f64)> {
    let (s, m) = (head.scale, head.margin);
    match head.kind {
        HeadKind::Softmax => Ok((s * cos_y, s)),
        HeadKind::Cosface => Ok((s * (cos_y - m), s)),
        HeadKind::Arcface => {
            let c = cos_y.clamp(-1.0, 1.0);
            let theta = c.acos();
            if !theta.is_finite() {
                return Err(Error::NumericalDomain(format!("acos({cos_y})")));
            }
            if head.arc_extension && theta + m > std::f64::consts::PI {
                return Ok((s * (c - 1.0 + m.cos()), if c != cos_y { 0.0 } else { s }));
            }
            let sin_theta = theta.sin();
            // d/dc cos(acos(c) + m) = sin(theta + m) / sin(theta); zero where clamped
            let slope = if c != cos_y || sin_theta <= NORM_FLOOR {
                0.0
            } else {
                s * (theta + m).sin() / sin_theta
            };
            Ok((s * (theta + m).cos(), slope))
        }
    }
}

/// Logits of `h` under the head (target-class margin applied).
pub fn head_logits(h: &[f64], y: usize, head: &ClassifierHead) -> Result<Vec<f64>> {
    let nh = head.normalized()?;
    let mut logits: Vec<f64> = (0..head.classes()).map(|j| head.scale * dot(h, nh.unit.row(j))).collect();
    if y >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: y,
            len: logits.len(),
        });
    }
    let (zy, _) = target_logit(head, dot(h, nh.unit.row(y)))?;
    logits[y] = zy;
    Ok(logits)
}

/// Accumulate one row's classification loss scaled by `weight`.
fn classify_row(
    h: &[f64],
    y: usize,
    head: &ClassifierHead,
    nh: &NormalizedHead,
    weight: f64,
    grad_h: &mut [f64],
    grad_unit: &mut Mat,
) -> Result<f64> {
    let n = head.classes();
    if y >= n {
        return Err(Error::IndexOutOfRange { index: y, len: n });
    }
    let s = head.scale;
    let cos: Vec<f64> = (0..n).map(|j| dot(h, nh.unit.row(j))).collect();
    let mut logits: Vec<f64> = cos.iter().map(|c| s * c).collect();
    let (zy, slope_y) = target_logit(head, cos[y])?;
    logits[y] = zy;
    let value = log_softmax_ce(&logits, y)?;
    let p = softmax(&logits);
    for j in 0..n {
        let dz = p[j] - if j == y { 1.0 } else { 0.0 };
        let dcos = weight * dz * if j == y { slope_y } else { s };
        if dcos == 0.0 {
            continue;
        }
        let w = nh.unit.row(j);
        for k in 0..h.len() {
            grad_h[k] += dcos * w[k];
        }
        for (g, hk) in grad_unit.row_mut(j).iter_mut().zip(h) {
            *g += dcos * hk;
        }
    }
    Ok(value)
}

/// Classification loss of a single unit-norm embedding.
pub fn classification_loss(h: &[f64], y: usize, head: &ClassifierHead) -> Result<LossResult> {
    let rows = Mat::from_vec(1, h.len(), h.to_vec())?;
    classification_batch(&rows, &[y], head, 1.0)
}

/// Sum over rows of `row_weight * L_cla(row)`.
pub fn classification_batch(
    rows: &Mat,
    labels: &[usize],
    head: &ClassifierHead,
    row_weight: f64,
) -> Result<LossResult> {
    if rows.cols() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            actual: rows.cols(),
        });
    }
    if labels.len() != rows.rows() {
        return Err(Error::DimensionMismatch {
            expected: rows.rows(),
            actual: labels.len(),
        });
    }
    let nh = head.normalized()?;
    let mut grad = Mat::zeros(rows.rows(), rows.cols());
    let mut grad_unit = Mat::zeros(head.classes(), head.dim());
    let mut value = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        value += row_weight * classify_row(rows.row(r), y, head, &nh, row_weight, grad.row_mut(r), &mut grad_unit)?;
    }
    Ok(LossResult {
        value,
        grad_embeddings: grad,
        grad_weights: Some(nh.backward(&grad_unit)),
    })
}

/// One softmax term of a contrastive anchor.
struct Term {
    /// Row compared with the anchor; `None` for a constant zero-similarity term.
    row: Option<usize>,
    logit: f64,
    /// d logit / d similarity.
    slope: f64,
    /// Target probability mass.
    target: f64,
}

/// Loss of one anchor, `lse(logits) - sum(target * logit)`, accumulating
/// `weight * dL/dh` into `grad`.
fn anchor_term(batch: &EmbeddingBatch, anchor: usize, terms: &[Term], weight: f64, grad: Option<&mut Mat>) -> f64 {
    let logits: Vec<f64> = terms.iter().map(|t| t.logit).collect();
    // targets sum to one, so this equals lse(logits) - sum(target * logit)
    let mut value = 0.0;
    for (k, t) in terms.iter().enumerate() {
        if t.target != 0.0 {
            value += t.target * log_softmax_ce(&logits, k).expect("index in range");
        }
    }
    if let Some(grad) = grad {
        let q = softmax(&logits);
        let ha = batch.row(anchor).to_vec();
        for (t, qk) in terms.iter().zip(q) {
            let Some(j) = t.row else { continue };
            let dsim = weight * (qk - t.target) * t.slope;
            if dsim == 0.0 {
                continue;
            }
            let hj = batch.row(j).to_vec();
            for (g, x) in grad.row_mut(anchor).iter_mut().zip(&hj) {
                *g += dsim * x;
            }
            for (g, x) in grad.row_mut(j).iter_mut().zip(&ha) {
                *g += dsim * x;
            }
        }
    }
    value
}

fn check_paired(batch: &EmbeddingBatch) -> Result<usize> {
    if !batch.len().is_multiple_of(2) {
        return Err(Error::DimensionMismatch {
            expected: batch.len() + 1,
            actual: batch.len(),
        });
    }
    let n = batch.num_images();
    if n < 2 {
        return Err(Error::TooFewImages(n));
    }
    Ok(n)
}

fn sim(batch: &EmbeddingBatch, a: usize, b: usize) -> f64 {
    dot(batch.row(a), batch.row(b))
}

/// NT-Xent over all 2N anchors with temperature `tau`.
pub fn ntxent_loss(batch: &EmbeddingBatch, tau: f64) -> Result<LossResult> {
    let n = check_paired(batch)?;
    let rows = 2 * n;
    let weight = 1.0 / rows as f64;
    let mut grad = Mat::zeros(rows, batch.dim());
    let mut value = 0.0;
    for a in 0..rows {
        let pos = (a + n) % rows;
        let terms: Vec<Term> = (0..rows)
            .filter(|&j| j != a)
            .map(|j| Term {
                row: Some(j),
                logit: sim(batch, a, j) / tau,
                slope: 1.0 / tau,
                target: if j == pos { 1.0 } else { 0.0 },
            })
            .collect();
        value += anchor_term(batch, a, &terms, weight, Some(&mut grad));
    }
    Ok(LossResult {
        value: value * weight,
        grad_embeddings: grad,
        grad_weights: None,
    })
}

/// Supervised contrastive loss: every same-label view is a positive and the
/// anchor's loss is the mean negative log-probability over its positives.
pub fn supcon_loss(batch: &EmbeddingBatch, tau: f64) -> Result<LossResult> {
    let n = check_paired(batch)?;
    let rows = 2 * n;
    let weight = 1.0 / rows as f64;
    let mut grad = Mat::zeros(rows, batch.dim());
    let mut value = 0.0;
    for a in 0..rows {
        let positives = (0..rows)
            .filter(|&j| j != a && batch.labels[j] == batch.labels[a])
            .count();
        if positives == 0 {
            return Err(Error::DegenerateClass { anchor: a });
        }
        let share = 1.0 / positives as f64;
        let terms: Vec<Term> = (0..rows)
            .filter(|&j| j != a)
            .map(|j| Term {
                row: Some(j),
                logit: sim(batch, a, j) / tau,
                slope: 1.0 / tau,
                target: if batch.labels[j] == batch.labels[a] { share } else { 0.0 },
            })
            .collect();
        value += anchor_term(batch, a, &terms, weight, Some(&mut grad));
    }
    Ok(LossResult {
        value: value * weight,
        grad_embeddings: grad,
        grad_weights: None,
    })
}

fn coreface_terms(batch: &EmbeddingBatch, plan: &PairPlan, anchor: usize, m_c: f64, s: f64) -> Vec<Term> {
    let a = &plan.anchors[anchor];
    let mut terms = Vec::with_capacity(1 + a.negatives.len() + a.masked.len());
    terms.push(Term {
        row: Some(a.positive),
        logit: s * (sim(batch, a.anchor, a.positive) - m_c),
        slope: s,
        target: 1.0,
    });
    for &j in &a.negatives {
        terms.push(Term {
            row: Some(j),
            logit: s * sim(batch, a.anchor, j),
            slope: s,
            target: 0.0,
        });
    }
    if plan.scm == ScmMode::Zero {
        for _ in &a.masked {
            terms.push(Term {
                row: None,
                logit: 0.0,
                slope: 0.0,
                target: 0.0,
            });
        }
    }
    terms
}

fn check_plan(batch: &EmbeddingBatch, plan: &PairPlan) -> Result<()> {
    if batch.len() != plan.rows() {
        return Err(Error::DimensionMismatch {
            expected: plan.rows(),
            actual: batch.len(),
        });
    }
    Ok(())
}

/// Per-anchor adaptive-margin contrastive losses, in plan order.
pub fn coreface_anchor_losses(batch: &EmbeddingBatch, plan: &PairPlan, m_c: f64, s: f64) -> Result<Vec<f64>> {
    check_plan(batch, plan)?;
    Ok((0..plan.anchors.len())
        .map(|k| {
            let terms = coreface_terms(batch, plan, k, m_c, s);
            anchor_term(batch, plan.anchors[k].anchor, &terms, 0.0, None)
        })
        .collect())
}

/// Adaptive-margin contrastive loss over the anchors of `plan`.
///
/// `m_c` is treated as a constant: no gradient flows into it.
pub fn coreface_loss(batch: &EmbeddingBatch, plan: &PairPlan, m_c: f64, s: f64) -> Result<LossResult> {
    check_plan(batch, plan)?;
    if let Some(a) = plan.anchors.iter().find(|a| a.negatives.is_empty() && a.masked.is_empty()) {
        return Err(Error::EmptyPool { anchor: a.anchor });
    }
    let weight = 1.0 / plan.anchors.len() as f64;
    let mut grad = Mat::zeros(batch.len(), batch.dim());
    let mut value = 0.0;
    for k in 0..plan.anchors.len() {
        let terms = coreface_terms(batch, plan, k, m_c, s);
        value += anchor_term(batch, plan.anchors[k].anchor, &terms, weight, Some(&mut grad));
    }
    Ok(LossResult {
        value: value * weight,
        grad_embeddings: grad,
        grad_weights: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointLoss {
    pub result: LossResult,
    /// Two-view classification average.
    pub classification: f64,
    /// Unweighted contrastive term.
    pub contrastive: f64,
}

/// Contrastive term selected by `cfg.kind`.
pub fn contrastive_loss(
    batch: &EmbeddingBatch,
    plan: &PairPlan,
    m_c: f64,
    cfg: &ContrastiveConfig,
) -> Result<Option<LossResult>> {
    Ok(match cfg.kind {
        ContrastiveKind::None => None,
        ContrastiveKind::Ntxent => Some(ntxent_loss(batch, cfg.tau)?),
        ContrastiveKind::Supcon => Some(supcon_loss(batch, cfg.tau)?),
        ContrastiveKind::Coreface => Some(coreface_loss(batch, plan, m_c, cfg.scale)?),
    })
}

/// Mean over images of the two-view classification average, plus
/// `lambda` times the contrastive term.
pub fn joint_loss(
    batch: &EmbeddingBatch,
    head: &ClassifierHead,
    plan: &PairPlan,
    m_c: f64,
    cfg: &ContrastiveConfig,
) -> Result<JointLoss> {
    let n = check_paired(batch)?;
    let (mut result, classification) = if cfg.classification {
        let r = classification_batch(&batch.embeddings, &batch.labels, head, 0.5 / n as f64)?;
        let v = r.value;
        (r, v)
    } else {
        let zero = LossResult {
            value: 0.0,
            grad_embeddings: Mat::zeros(batch.len(), batch.dim()),
            grad_weights: Some(Mat::zeros(head.dim(), head.classes())),
        };
        (zero, 0.0)
    };
    let mut contrastive = 0.0;
    if let Some(con) = contrastive_loss(batch, plan, m_c, cfg)? {
        contrastive = con.value;
        if cfg.lambda != 0.0 {
            result.value += cfg.lambda * con.value;
            for (g, c) in result
                .grad_embeddings
                .as_mut_slice()
                .iter_mut()
                .zip(con.grad_embeddings.as_slice())
            {
                *g += cfg.lambda * c;
            }
        }
    }
    Ok(JointLoss {
        result,
        classification,
        contrastive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::build_plan;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Mat {
        let mut m = Mat::from_vec(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        crate::numerics::normalize_rows(&mut m).unwrap();
        m
    }

    fn head(kind: HeadKind, d: usize, n: usize, rng: &mut ChaCha8Rng) -> ClassifierHead {
        let w = Mat::from_vec(d, n, (0..d * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        ClassifierHead::new(w, 64.0, kind.default_margin(), kind).unwrap()
    }

    #[test]
    fn cosface_positive_logit() {
        // class 0 weight at 60 degrees from h
        let w = Mat::from_rows(&[vec![0.5, 1.0], vec![0.75f64.sqrt(), 0.0]]).unwrap();
        let head = ClassifierHead::new(w, 64.0, 0.35, HeadKind::Cosface).unwrap();
        let z = head_logits(&[1.0, 0.0], 0, &head).unwrap();
        assert!((z[0] - 9.6).abs() < 1e-12, "{}", z[0]);
    }

    #[test]
    fn arcface_positive_logit() {
        let w = Mat::from_rows(&[vec![0.5, 1.0], vec![0.75f64.sqrt(), 0.0]]).unwrap();
        let head = ClassifierHead::new(w, 64.0, 0.5, HeadKind::Arcface).unwrap();
        let z = head_logits(&[1.0, 0.0], 0, &head).unwrap();
        // angle-sum identity: cos(a + b) = cos a cos b - sin a sin b
        let expect = 64.0 * (0.5 * 0.5f64.cos() - 0.75f64.sqrt() * 0.5f64.sin());
        assert!((z[0] - expect).abs() < 1e-12);
        assert!((z[0] - 1.510_12).abs() < 1e-4, "{}", z[0]);
    }

    #[test]
    fn arc_extension_continuous_and_monotone() {
        let m = 0.5;
        let w = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let plain = ClassifierHead::new(w, 1.0, m, HeadKind::Arcface).unwrap();
        let ext = plain.clone().with_arc_extension(true);
        let at = |head: &ClassifierHead, theta: f64| head_logits(&[theta.cos(), theta.sin()], 0, head).unwrap()[0];
        let edge = std::f64::consts::PI - m;
        // both agree up to the edge, and the extension meets it continuously
        assert!((at(&plain, 1.0) - at(&ext, 1.0)).abs() < 1e-15);
        assert!((at(&ext, edge + 1e-9) - at(&plain, edge - 1e-9)).abs() < 1e-6);
        // plain arc-margin turns upward past the edge; the extension keeps falling
        assert!(at(&plain, 3.0) > at(&plain, edge));
        assert!(at(&ext, 3.0) < at(&ext, edge));
    }

    #[test]
    fn equal_class_weights_give_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = Mat::from_rows(&[vec![0.3, 0.3], vec![0.4, 0.4], vec![0.1, 0.1]]).unwrap();
        let head = ClassifierHead::new(w, 64.0, 0.0, HeadKind::Softmax).unwrap();
        for _ in 0..5 {
            let h = unit_rows(1, 3, &mut rng);
            let r = classification_loss(h.row(0), 1, &head).unwrap();
            assert!((r.value - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn arcface_margin_validated() {
        let w = Mat::zeros(2, 2);
        assert!(ClassifierHead::new(w.clone(), 64.0, 1.6, HeadKind::Arcface).is_err());
        assert!(ClassifierHead::new(w, -1.0, 0.3, HeadKind::Cosface).is_err());
    }

    #[test]
    fn label_out_of_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = head(HeadKind::Softmax, 3, 2, &mut rng);
        assert!(matches!(
            classification_loss(&[1.0, 0.0, 0.0], 2, &h),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn ntxent_orthogonal_fixture() {
        let rows = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = EmbeddingBatch::paired(rows, &[0, 1]).unwrap();
        let r = ntxent_loss(&batch, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.value - -(e / (e + 2.0)).ln()).abs() < 1e-14);
        assert!((r.value - 0.551_444_714).abs() < 1e-8);
    }

    #[test]
    fn ntxent_identical_features() {
        let rows = Mat::from_rows(&vec![vec![0.6, 0.8]; 6]).unwrap();
        let batch = EmbeddingBatch::paired(rows, &[0, 1, 2]).unwrap();
        let r = ntxent_loss(&batch, 0.3).unwrap();
        assert!((r.value - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_distinct_labels_is_ntxent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = EmbeddingBatch::paired(unit_rows(8, 5, &mut rng), &[0, 1, 2, 3]).unwrap();
        let a = ntxent_loss(&batch, 0.2).unwrap();
        let b = supcon_loss(&batch, 0.2).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.grad_embeddings, b.grad_embeddings);
    }

    #[test]
    fn supcon_collapsed_views() {
        let rows = Mat::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let batch = EmbeddingBatch::paired(rows, &[7, 7]).unwrap();
        let r = supcon_loss(&batch, 0.5).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_needs_positive() {
        let rows = Mat::from_rows(&vec![vec![1.0, 0.0]; 4]).unwrap();
        let batch = EmbeddingBatch::new(rows, vec![0, 1, 2, 3]).unwrap();
        assert!(matches!(supcon_loss(&batch, 0.5), Err(Error::DegenerateClass { anchor: 0 })));
    }

    #[test]
    fn coreface_single_negative_fixture() {
        let rows = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = EmbeddingBatch::paired(rows, &[0, 1]).unwrap();
        let plan = build_plan(2, &[0, 1], Protocol::S_N, ScmMode::Exclude).unwrap();
        let r = coreface_loss(&batch, &plan, 0.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.value - -(e / (e + 1.0)).ln()).abs() < 1e-14);
        assert!((r.value - 0.313_261_687_5).abs() < 1e-9);
    }

    #[test]
    fn coreface_margin_balances_hardest_negative() {
        // one negative per anchor; m_C = sim_pos - sim_neg equalizes the two exponentials
        let t = 0.4f64;
        let rows = Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.9, 0.19f64.sqrt()],
            vec![t.sin(), t.cos()],
        ])
        .unwrap();
        let batch = EmbeddingBatch::paired(rows, &[0, 1]).unwrap();
        let plan = build_plan(2, &[0, 1], Protocol::S_N, ScmMode::Exclude).unwrap();
        let pos = dot(batch.row(0), batch.row(2));
        let neg = dot(batch.row(0), batch.row(3));
        let losses = coreface_anchor_losses(&batch, &plan, pos - neg, 64.0).unwrap();
        assert!((losses[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn coreface_monotone_in_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let batch = EmbeddingBatch::paired(unit_rows(10, 6, &mut rng), &[0, 1, 2, 0, 1]).unwrap();
        for protocol in Protocol::ALL {
            let plan = build_plan(5, &[0, 1, 2, 0, 1], protocol, ScmMode::Exclude).unwrap();
            let mut prev = f64::NEG_INFINITY;
            for k in 0..20 {
                let v = coreface_loss(&batch, &plan, -1.0 + 0.1 * k as f64, 4.0).unwrap().value;
                assert!(v > prev);
                prev = v;
            }
        }
    }

    #[test]
    fn coreface_exclude_ignores_masked_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = [0, 0, 1, 2];
        let batch = EmbeddingBatch::paired(unit_rows(8, 4, &mut rng), &labels).unwrap();
        let plan = build_plan(4, &labels, Protocol::S_N, ScmMode::Exclude).unwrap();
        let before = coreface_anchor_losses(&batch, &plan, 0.2, 64.0).unwrap();
        let mut perturbed = batch.clone();
        perturbed.embeddings.row_mut(5)[0] += 0.3; // masked for anchor 0
        let after = coreface_anchor_losses(&perturbed, &plan, 0.2, 64.0).unwrap();
        assert_eq!(before[0].to_bits(), after[0].to_bits());
        assert_ne!(before[1].to_bits(), after[1].to_bits()); // row 5 is anchor 1's positive
    }

    #[test]
    fn zero_mode_adds_unit_terms() {
        let rows = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let batch = EmbeddingBatch::paired(rows, &[3, 3]).unwrap();
        let plan = build_plan(2, &[3, 3], Protocol::S_N, ScmMode::Zero).unwrap();
        let r = coreface_loss(&batch, &plan, 0.0, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((r.value - -(e / (e + 1.0)).ln()).abs() < 1e-14);
    }

    #[test]
    fn joint_without_lambda_is_two_view_classification() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [0, 1, 2, 3];
        let batch = EmbeddingBatch::paired(unit_rows(8, 6, &mut rng), &labels).unwrap();
        let h = head(HeadKind::Arcface, 6, 5, &mut rng);
        let plan = build_plan(4, &labels, Protocol::S_N, ScmMode::Exclude).unwrap();
        let cfg = ContrastiveConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let j = joint_loss(&batch, &h, &plan, 0.1, &cfg).unwrap();
        let c = classification_batch(&batch.embeddings, &batch.labels, &h, 0.125).unwrap();
        assert_eq!(j.result, c);
        assert!(j.contrastive > 0.0);
    }
}
