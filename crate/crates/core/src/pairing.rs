//! Pair-coupling protocols, the supervised contrastive mask, and the
//! repeated-signal diagnostics.
//!
//! Feature rows follow the two-view layout: rows `0..N` come from the first
//! dropout channel, rows `N..2N` from the second, and row `i` is paired with
//! row `N + i`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, EmbeddingBatch};

/// Which channels provide anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Way {
    /// Only first-channel features anchor a comparison.
    Single,
    /// Features from both channels anchor comparisons.
    Double,
}

/// Which features an anchor is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pool {
    /// The N features of the opposite channel.
    N,
    /// All 2N features.
    TwoN,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Protocol {
    pub way: Way,
    pub pool: Pool,
}

impl Protocol {
    pub const S_N: Protocol = Protocol { way: Way::Single, pool: Pool::N };
    pub const S_2N: Protocol = Protocol { way: Way::Single, pool: Pool::TwoN };
    pub const D_N: Protocol = Protocol { way: Way::Double, pool: Pool::N };
    pub const D_2N: Protocol = Protocol { way: Way::Double, pool: Pool::TwoN };

    pub const ALL: [Protocol; 4] = [Self::D_2N, Self::D_N, Self::S_2N, Self::S_N];

    pub fn name(&self) -> &'static str {
        match (self.way, self.pool) {
            (Way::Single, Pool::N) => "s_n",
            (Way::Single, Pool::TwoN) => "s_2n",
            (Way::Double, Pool::N) => "d_n",
            (Way::Double, Pool::TwoN) => "d_2n",
        }
    }
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::S_N
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "s_n" => Ok(Protocol::S_N),
            "s_2n" => Ok(Protocol::S_2N),
            "d_n" => Ok(Protocol::D_N),
            "d_2n" => Ok(Protocol::D_2N),
            other => Err(format!("unknown protocol {other:?} (expected s_n, s_2n, d_n or d_2n)")),
        }
    }
}

impl TryFrom<String> for Protocol {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.name().to_string()
    }
}

/// Supervised contrastive mask mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScmMode {
    /// Same-class features stay in the negative pool.
    Off,
    /// Same-class features keep a term in the denominator with their
    /// similarity forced to zero (contributes `e^0 = 1`).
    Zero,
    /// Same-class features are dropped from the denominator.
    #[default]
    Exclude,
}

impl ScmMode {
    pub fn name(&self) -> &'static str {
        match self {
            ScmMode::Off => "off",
            ScmMode::Zero => "zero",
            ScmMode::Exclude => "exclude",
        }
    }
}

impl FromStr for ScmMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "off" => Ok(ScmMode::Off),
            "zero" => Ok(ScmMode::Zero),
            "exclude" => Ok(ScmMode::Exclude),
            other => Err(format!("unknown scm mode {other:?} (expected off, zero or exclude)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorPlan {
    pub anchor: usize,
    pub positive: usize,
    /// Live negatives, ascending row order.
    pub negatives: Vec<usize>,
    /// Same-class candidates removed by the mask, ascending row order.
    pub masked: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPlan {
    pub images: usize,
    pub protocol: Protocol,
    pub scm: ScmMode,
    pub anchors: Vec<AnchorPlan>,
}

impl PairPlan {
    pub fn rows(&self) -> usize {
        2 * self.images
    }

    /// Plan entry for anchor row `row`, if that row anchors a comparison.
    pub fn anchor(&self, row: usize) -> Option<&AnchorPlan> {
        self.anchors.iter().find(|a| a.anchor == row)
    }

    /// Ordered (anchor, negative) comparisons.
    pub fn comparisons(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.anchors
            .iter()
            .flat_map(|a| a.negatives.iter().map(move |&j| (a.anchor, j)))
    }
}

pub fn build_plan(images: usize, labels: &[usize], protocol: Protocol, scm: ScmMode) -> Result<PairPlan> {
    if images < 2 {
        return Err(Error::TooFewImages(images));
    }
    if labels.len() != images {
        return Err(Error::DimensionMismatch {
            expected: images,
            actual: labels.len(),
        });
    }
    let rows = 2 * images;
    let anchor_rows = match protocol.way {
        Way::Single => 0..images,
        Way::Double => 0..rows,
    };
    let label = |row: usize| labels[row % images];

    let mut anchors = Vec::with_capacity(anchor_rows.len());
    for a in anchor_rows {
        let image = a % images;
        let positive = (a + images) % rows;
        let candidates: Vec<usize> = match protocol.pool {
            Pool::N => {
                let offset = if a < images { images } else { 0 };
                (0..images).filter(|&j| j != image).map(|j| offset + j).collect()
            }
            Pool::TwoN => (0..rows).filter(|&j| j != a && j != positive).collect(),
        };
        let (negatives, masked) = match scm {
            ScmMode::Off => (candidates, Vec::new()),
            ScmMode::Zero | ScmMode::Exclude => candidates.into_iter().partition(|&j| label(j) != label(a)),
        };
        let empty = match scm {
            ScmMode::Zero => negatives.is_empty() && masked.is_empty(),
            _ => negatives.is_empty(),
        };
        if empty {
            return Err(Error::EmptyPool { anchor: a });
        }
        anchors.push(AnchorPlan {
            anchor: a,
            positive,
            negatives,
            masked,
        });
    }
    Ok(PairPlan {
        images,
        protocol,
        scm,
        anchors,
    })
}

/// Multiplicity of every unordered feature pair among the plan's
/// (anchor, negative) comparisons.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DuplicationCensus {
    pub counts: BTreeMap<(usize, usize), usize>,
}

impl DuplicationCensus {
    /// Largest multiplicity (the duplication factor).
    pub fn factor(&self) -> usize {
        self.counts.values().copied().max().unwrap_or(0)
    }

    /// The multiplicity when every pair shares it.
    pub fn uniform_factor(&self) -> Option<usize> {
        let mut it = self.counts.values();
        let first = *it.next()?;
        it.all(|&c| c == first).then_some(first)
    }

    /// Total ordered comparisons between the features of two images.
    pub fn image_pair_total(&self, images: usize, a: usize, b: usize) -> usize {
        let fa = [a, images + a];
        let fb = [b, images + b];
        let mut total = 0;
        for &u in &fa {
            for &v in &fb {
                total += self.counts.get(&(u.min(v), u.max(v))).copied().unwrap_or(0);
            }
        }
        total
    }
}

pub fn duplication_census(plan: &PairPlan) -> DuplicationCensus {
    let mut counts = BTreeMap::new();
    for (u, v) in plan.comparisons() {
        *counts.entry((u.min(v), u.max(v))).or_insert(0) += 1;
    }
    DuplicationCensus { counts }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeySelection {
    pub anchor: usize,
    pub key_negative: usize,
    pub similarity: f64,
    pub mirrored: bool,
}

impl KeySelection {
    /// Channel pair label such as `s1->s2`.
    pub fn channel_pair(&self, images: usize) -> String {
        let ch = |r: usize| if r < images { 1 } else { 2 };
        format!("s{}->s{}", ch(self.anchor), ch(self.key_negative))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrsReport {
    pub images: usize,
    pub selections: Vec<KeySelection>,
    /// Number of anchors whose key negative selects them back (always even).
    pub mirrored_count: usize,
    pub duplication_factor: usize,
}

impl SrsReport {
    pub fn key_negative_of(&self, anchor: usize) -> Option<usize> {
        self.selections
            .iter()
            .find(|s| s.anchor == anchor)
            .map(|s| s.key_negative)
    }
}

/// Locate each anchor's most similar negative and count mirrored selections.
pub fn srs_scatter(batch: &EmbeddingBatch, plan: &PairPlan) -> Result<SrsReport> {
    if batch.len() != plan.rows() {
        return Err(Error::DimensionMismatch {
            expected: plan.rows(),
            actual: batch.len(),
        });
    }
    let mut key = vec![None; plan.rows()];
    let mut selections = Vec::with_capacity(plan.anchors.len());
    for a in &plan.anchors {
        let mut best: Option<(usize, f64)> = None;
        for &j in &a.negatives {
            let s = cosine_sim(batch.row(a.anchor), batch.row(j))?;
            // strict comparison over ascending rows keeps the lowest index on ties
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        let (j, s) = best.ok_or(Error::EmptyPool { anchor: a.anchor })?;
        key[a.anchor] = Some(j);
        selections.push(KeySelection {
            anchor: a.anchor,
            key_negative: j,
            similarity: s,
            mirrored: false,
        });
    }
    let mut mirrored_count = 0;
    for sel in &mut selections {
        if key[sel.key_negative] == Some(sel.anchor) {
            sel.mirrored = true;
            mirrored_count += 1;
        }
    }
    Ok(SrsReport {
        images: plan.images,
        selections,
        mirrored_count,
        duplication_factor: duplication_census(plan).factor(),
    })
}
