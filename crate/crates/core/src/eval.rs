//! Open-set evaluation: verification pairs, k-fold accuracy, TAR@FAR,
//! rank-1 identification and angle histograms.

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::{cosine_sim, EmbeddingBatch};
use crate::trainer::Encoder;

/// Unit-norm embedding of every sample, one clean forward pass each.
pub fn embed_eval(encoder: &Encoder, ds: &Dataset) -> Result<EmbeddingBatch> {
    let e = encoder.embed(&ds.inputs)?;
    EmbeddingBatch::new(e, ds.labels.iter().map(|&l| l as usize).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub pairs: Vec<Pair>,
    pub folds: usize,
}

impl PairList {
    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.same).count()
    }

    pub fn negatives(&self) -> usize {
        self.pairs.len() - self.positives()
    }

    pub fn similarities(&self, batch: &EmbeddingBatch) -> Result<Vec<f64>> {
        self.pairs
            .iter()
            .map(|p| {
                for i in [p.a, p.b] {
                    if i >= batch.len() {
                        return Err(Error::IndexOutOfRange {
                            index: i,
                            len: batch.len(),
                        });
                    }
                }
                cosine_sim(batch.row(p.a), batch.row(p.b))
            })
            .collect()
    }

    fn split(&self, sims: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (p, &s) in self.pairs.iter().zip(sims) {
            if p.same {
                pos.push(s)
            } else {
                neg.push(s)
            }
        }
        (pos, neg)
    }
}

/// Pair sampling: `None` counts mean exhaustive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSpec {
    pub per_identity_pos: Option<usize>,
    /// Negatives as a multiple of the positive count.
    pub neg_multiple: Option<usize>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for PairSpec {
    fn default() -> Self {
        PairSpec {
            per_identity_pos: None,
            neg_multiple: None,
            folds: 10,
            seed: 0,
        }
    }
}

impl PairSpec {
    /// Every positive pair and an equal number of sampled negatives.
    pub fn balanced() -> Self {
        PairSpec {
            neg_multiple: Some(1),
            ..PairSpec::default()
        }
    }
}

impl FromStr for PairSpec {
    type Err = Error;

    /// `exhaustive`, `balanced`, or comma-separated `pos=K,neg=M,folds=F,seed=S`.
    fn from_str(s: &str) -> Result<Self> {
        let mut spec = PairSpec::default();
        match s.trim() {
            "exhaustive" => return Ok(spec),
            "balanced" => return Ok(PairSpec::balanced()),
            _ => {}
        }
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::validation("pairs", format!("expected key=value, got {part:?}")))?;
            let num = |v: &str| {
                v.parse::<u64>()
                    .map_err(|_| Error::validation(format!("pairs.{k}"), format!("not an integer: {v:?}")))
            };
            match k {
                "pos" => spec.per_identity_pos = Some(num(v)? as usize),
                "neg" => spec.neg_multiple = Some(num(v)? as usize),
                "folds" => spec.folds = num(v)? as usize,
                "seed" => spec.seed = num(v)?,
                other => return Err(Error::validation(format!("pairs.{other}"), "unknown key")),
            }
        }
        Ok(spec)
    }
}

/// Positive pairs within identities and negative pairs across them,
/// each assigned to folds round-robin after a seeded shuffle.
pub fn build_pairs(labels: &[u32], spec: &PairSpec) -> Result<PairList> {
    if spec.folds < 2 {
        return Err(Error::InvalidSpec("at least 2 folds are required".into()));
    }
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::InvalidSpec("pairs need at least 2 identities".into()));
    }
    if let Some((id, g)) = groups.iter().find(|(_, g)| g.len() < 2) {
        return Err(Error::InvalidSpec(format!("identity {id} has {} sample(s)", g.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut pos = Vec::new();
    for g in groups.values() {
        let all: Vec<(usize, usize)> = (0..g.len())
            .flat_map(|i| (i + 1..g.len()).map(move |j| (i, j)))
            .map(|(i, j)| (g[i], g[j]))
            .collect();
        match spec.per_identity_pos {
            Some(k) if k < all.len() => {
                pos.extend(sample_indices(&mut rng, all.len(), k).into_iter().map(|i| all[i]))
            }
            _ => pos.extend(all),
        }
    }

    let n = labels.len();
    let total_neg: usize = {
        let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        let sum: usize = sizes.iter().sum();
        (sum * sum - sizes.iter().map(|s| s * s).sum::<usize>()) / 2
    };
    let want = spec.neg_multiple.map(|m| m.saturating_mul(pos.len()));
    let mut neg: Vec<(usize, usize)> = match want {
        Some(w) if w < total_neg => {
            let mut seen = HashSet::with_capacity(w);
            let mut out = Vec::with_capacity(w);
            while out.len() < w {
                let pick = sample_indices(&mut rng, n, 2);
                let (a, b) = (pick.index(0).min(pick.index(1)), pick.index(0).max(pick.index(1)));
                if labels[a] != labels[b] && seen.insert((a, b)) {
                    out.push((a, b));
                }
            }
            out
        }
        _ => (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| labels[a] != labels[b])
            .collect(),
    };

    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(pos.len() + neg.len());
    for (k, &(a, b)) in pos.iter().enumerate() {
        pairs.push(Pair {
            a,
            b,
            same: true,
            fold: k % spec.folds,
        });
    }
    for (k, &(a, b)) in neg.iter().enumerate() {
        pairs.push(Pair {
            a,
            b,
            same: false,
            fold: k % spec.folds,
        });
    }
    Ok(PairList {
        pairs,
        folds: spec.folds,
    })
}

/// Candidate thresholds lie between consecutive distinct similarities of
/// the whole list (plus both extremes); a pair is accepted as genuine when
/// its similarity exceeds the threshold. Returns rank cut `k`: accept iff
/// the similarity is among the distinct values with index `>= k`.
fn best_cut(distinct: &[f64], items: &[(usize, bool)]) -> usize {
    // counts per distinct value
    let mut pos = vec![0i64; distinct.len()];
    let mut neg = vec![0i64; distinct.len()];
    for &(r, same) in items {
        if same {
            pos[r] += 1
        } else {
            neg[r] += 1
        }
    }
    let mut correct: i64 = pos.iter().sum();
    let (mut best, mut best_k) = (correct, 0);
    for k in 1..=distinct.len() {
        correct += neg[k - 1] - pos[k - 1];
        if correct > best {
            best = correct;
            best_k = k;
        }
    }
    best_k
}

/// Threshold value of a rank cut: midpoint between neighbours, or a
/// point outside the range at the extremes.
fn cut_value(distinct: &[f64], k: usize) -> f64 {
    match k {
        0 => distinct[0] - 1.0,
        k if k == distinct.len() => distinct[k - 1] + 1.0,
        k => distinct[k - 1] + (distinct[k] - distinct[k - 1]) / 2.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub threshold: f64,
    pub accuracy: f64,
}

/// Per-fold thresholds chosen on the other folds, applied to the held-out
/// fold. Ties between thresholds go to the lowest.
pub fn verification_folds(sims: &[f64], pairs: &PairList) -> Result<Vec<FoldResult>> {
    if sims.len() != pairs.pairs.len() {
        return Err(Error::DimensionMismatch {
            expected: pairs.pairs.len(),
            actual: sims.len(),
        });
    }
    if pairs.folds < 2 {
        return Err(Error::InvalidSpec("at least 2 folds are required".into()));
    }
    if sims.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite { context: "similarities" });
    }
    let mut distinct: Vec<f64> = sims.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let rank = |s: f64| distinct.binary_search_by(|v| v.total_cmp(&s)).expect("present");
    let ranked: Vec<(usize, bool, usize)> = pairs
        .pairs
        .iter()
        .zip(sims)
        .map(|(p, &s)| (rank(s), p.same, p.fold))
        .collect();

    let mut out = Vec::with_capacity(pairs.folds);
    for f in 0..pairs.folds {
        let held: Vec<(usize, bool)> = ranked.iter().filter(|r| r.2 == f).map(|r| (r.0, r.1)).collect();
        let npos = held.iter().filter(|r| r.1).count();
        if npos == 0 || npos == held.len() {
            return Err(Error::DegenerateFold { fold: f });
        }
        let train: Vec<(usize, bool)> = ranked.iter().filter(|r| r.2 != f).map(|r| (r.0, r.1)).collect();
        let k = best_cut(&distinct, &train);
        let correct = held.iter().filter(|&&(r, same)| (r >= k) == same).count();
        out.push(FoldResult {
            fold: f,
            threshold: cut_value(&distinct, k),
            accuracy: correct as f64 / held.len() as f64,
        });
    }
    Ok(out)
}

/// Mean held-out accuracy over folds.
pub fn verification_accuracy(sims: &[f64], pairs: &PairList) -> Result<f64> {
    let folds = verification_folds(sims, pairs)?;
    Ok(folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    pub threshold: f64,
    pub tar: f64,
}

/// Threshold is the `(floor(far * #neg) + 1)`-th highest negative
/// similarity; positives strictly above it are accepted.
pub fn tar_at_far(pos: &[f64], neg: &[f64], far: f64) -> Result<TarAtFar> {
    if !(far > 0.0 && far < 1.0) {
        return Err(Error::InvalidProbability(far));
    }
    if pos.is_empty() {
        return Err(Error::InvalidSpec("no positive pairs".into()));
    }
    let allowed = (far * neg.len() as f64).floor() as usize;
    if allowed < 1 {
        return Err(Error::InsufficientNegatives {
            far,
            required: (1.0 / far).ceil() as usize,
            available: neg.len(),
        });
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let threshold = sorted[allowed.min(sorted.len() - 1)];
    let tar = pos.iter().filter(|&&s| s > threshold).count() as f64 / pos.len() as f64;
    Ok(TarAtFar { far, threshold, tar })
}

/// Fraction of probes whose most similar gallery entry has their label.
/// Ties go to the lowest gallery index.
pub fn rank1(gallery: &EmbeddingBatch, probe: &EmbeddingBatch) -> Result<f64> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if probe.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in 0..probe.len() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for g in 0..gallery.len() {
            let s = cosine_sim(probe.row(p), gallery.row(g))?;
            if s > best.1 {
                best = (g, s);
            }
        }
        if gallery.labels[best.0] == probe.labels[p] {
            hits += 1;
        }
    }
    Ok(hits as f64 / probe.len() as f64)
}

/// First sample of each identity forms the gallery; the rest are probes.
pub fn gallery_probe_split(batch: &EmbeddingBatch) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
    let mut seen = HashSet::new();
    let (mut g, mut p) = (Vec::new(), Vec::new());
    for (i, &l) in batch.labels.iter().enumerate() {
        if seen.insert(l) {
            g.push(i)
        } else {
            p.push(i)
        }
    }
    let pick = |idx: &[usize]| {
        EmbeddingBatch::new(
            batch.embeddings.select_rows(idx),
            idx.iter().map(|&i| batch.labels[i]).collect(),
        )
    };
    Ok((pick(&g)?, pick(&p)?))
}

/// Histogram of `acos(sim)` in degrees over `bins` equal bins on [0, 180].
pub fn angle_histogram(sims: &[f64], bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::InvalidSpec("at least 2 histogram bins are required".into()));
    }
    let mut h = vec![0usize; bins];
    for &s in sims {
        let deg = s.clamp(-1.0, 1.0).acos().to_degrees();
        let b = ((deg / 180.0 * bins as f64).floor() as usize).min(bins - 1);
        h[b] += 1;
    }
    Ok(h)
}

pub fn angle_histograms(sims: &[f64], pairs: &PairList, bins: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let (pos, neg) = pairs.split(sims);
    Ok((angle_histogram(&pos, bins)?, angle_histogram(&neg, bins)?))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub const DEFAULT_FARS: [f64; 3] = [1e-1, 1e-2, 1e-3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub folds: Vec<FoldResult>,
    /// FAR target (as printed) to TAR; infeasible targets are omitted.
    pub tar_at_far: BTreeMap<String, f64>,
    pub rank1: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub gap: f64,
    pub positives: usize,
    pub negatives: usize,
    pub angle_hist_pos: Vec<usize>,
    pub angle_hist_neg: Vec<usize>,
}

/// Full evaluation of an embedding batch on a pair list.
pub fn evaluate_batch(batch: &EmbeddingBatch, pairs: &PairList, fars: &[f64], bins: usize) -> Result<Metrics> {
    let sims = pairs.similarities(batch)?;
    let folds = verification_folds(&sims, pairs)?;
    let accuracy = folds.iter().map(|f| f.accuracy).sum::<f64>() / folds.len() as f64;
    let (pos, neg) = pairs.split(&sims);
    let mut tars = BTreeMap::new();
    for &far in fars {
        match tar_at_far(&pos, &neg, far) {
            Ok(t) => {
                tars.insert(format!("{far:e}"), t.tar);
            }
            Err(Error::InsufficientNegatives { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    let (g, p) = gallery_probe_split(batch)?;
    let (hp, hn) = (angle_histogram(&pos, bins)?, angle_histogram(&neg, bins)?);
    let (mp, mn) = (mean(&pos), mean(&neg));
    Ok(Metrics {
        accuracy,
        folds,
        tar_at_far: tars,
        rank1: rank1(&g, &p)?,
        mean_pos_sim: mp,
        mean_neg_sim: mn,
        gap: mp - mn,
        positives: pos.len(),
        negatives: neg.len(),
        angle_hist_pos: hp,
        angle_hist_neg: hn,
    })
}

pub fn evaluate(encoder: &Encoder, ds: &Dataset, spec: &PairSpec) -> Result<Metrics> {
    let batch = embed_eval(encoder, ds)?;
    let pairs = build_pairs(&ds.labels, spec)?;
    evaluate_batch(&batch, &pairs, &DEFAULT_FARS, 90)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verification {
    pub accuracy: f64,
    pub gap: f64,
}

/// Balanced-pair accuracy and similarity gap.
pub fn quick_verification(encoder: &Encoder, ds: &Dataset) -> Result<Verification> {
    let batch = embed_eval(encoder, ds)?;
    let pairs = build_pairs(&ds.labels, &PairSpec::balanced())?;
    let sims = pairs.similarities(&batch)?;
    let (pos, neg) = pairs.split(&sims);
    Ok(Verification {
        accuracy: verification_accuracy(&sims, &pairs)?,
        gap: mean(&pos) - mean(&neg),
    })
}

/// Verification on raw inputs (cosine between input vectors).
pub fn raw_input_verification(ds: &Dataset, spec: &PairSpec) -> Result<Verification> {
    let batch = EmbeddingBatch::new(ds.inputs.clone(), ds.labels.iter().map(|&l| l as usize).collect())?;
    let pairs = build_pairs(&ds.labels, spec)?;
    let sims = pairs.similarities(&batch)?;
    let (pos, neg) = pairs.split(&sims);
    Ok(Verification {
        accuracy: verification_accuracy(&sims, &pairs)?,
        gap: mean(&pos) - mean(&neg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;

    fn list(same: &[bool], folds: usize) -> PairList {
        let mut pc = 0;
        let mut nc = 0;
        PairList {
            pairs: same
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    let c = if s { &mut pc } else { &mut nc };
                    let fold = *c % folds;
                    *c += 1;
                    Pair { a: i, b: i, same: s, fold }
                })
                .collect(),
            folds,
        }
    }

    #[test]
    fn exhaustive_counting() {
        let pl = build_pairs(&[0, 0, 1, 1], &PairSpec { folds: 2, ..Default::default() }).unwrap();
        assert_eq!(pl.positives(), 2);
        assert_eq!(pl.negatives(), 4);
    }

    #[test]
    fn pairs_are_unique_and_deterministic() {
        let labels: Vec<u32> = (0..60).map(|i| i / 6).collect();
        let spec = PairSpec {
            per_identity_pos: Some(5),
            neg_multiple: Some(3),
            folds: 10,
            seed: 4,
        };
        let a = build_pairs(&labels, &spec).unwrap();
        assert_eq!(a, build_pairs(&labels, &spec).unwrap());
        let set: HashSet<(usize, usize)> = a.pairs.iter().map(|p| (p.a.min(p.b), p.a.max(p.b))).collect();
        assert_eq!(set.len(), a.pairs.len());
        assert_eq!(a.positives(), 50);
        assert_eq!(a.negatives(), 150);
        for p in &a.pairs {
            assert_eq!(p.same, labels[p.a] == labels[p.b]);
        }
    }

    #[test]
    fn perfectly_separated() {
        let same = [true, true, true, true, false, false, false, false];
        let sims = [0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1];
        assert_eq!(verification_accuracy(&sims, &list(&same, 2)).unwrap(), 1.0);
        let t = tar_at_far(&sims[..4], &sims[4..], 0.5).unwrap();
        assert_eq!(t.tar, 1.0);
    }

    #[test]
    fn degenerate_fold() {
        let pl = PairList {
            pairs: vec![
                Pair { a: 0, b: 1, same: true, fold: 0 },
                Pair { a: 0, b: 2, same: false, fold: 0 },
                Pair { a: 1, b: 2, same: true, fold: 1 },
            ],
            folds: 2,
        };
        assert!(matches!(verification_accuracy(&[0.5, 0.1, 0.4], &pl), Err(Error::DegenerateFold { fold: 1 })));
    }

    #[test]
    fn insufficient_negatives() {
        let neg = vec![0.0; 1000];
        assert!(matches!(
            tar_at_far(&[1.0], &neg, 1e-6),
            Err(Error::InsufficientNegatives { required: 1_000_000, available: 1000, .. })
        ));
    }

    #[test]
    fn rank1_identity_and_ties() {
        let m = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let g = EmbeddingBatch::new(m.clone(), vec![0, 1, 2]).unwrap();
        // probe equal to rows 0 and 2: tie resolves to index 0
        let p = EmbeddingBatch::new(Mat::from_rows(&[vec![2.0, 0.0]]).unwrap(), vec![0]).unwrap();
        assert_eq!(rank1(&g, &p).unwrap(), 1.0);
        let p2 = EmbeddingBatch::new(Mat::from_rows(&[vec![2.0, 0.0]]).unwrap(), vec![2]).unwrap();
        assert_eq!(rank1(&g, &p2).unwrap(), 0.0);
        let empty = EmbeddingBatch::new(Mat::zeros(0, 2), vec![]).unwrap();
        assert!(matches!(rank1(&empty, &p), Err(Error::EmptyGallery)));
    }

    #[test]
    fn histogram_spikes() {
        let h = angle_histogram(&[1.0; 5], 90).unwrap();
        assert_eq!(h[0], 5);
        let h = angle_histogram(&[0.0; 7], 90).unwrap();
        assert_eq!(h[45], 7);
        let h = angle_histogram(&[-1.0, 0.3, 0.99], 4).unwrap();
        assert_eq!(h.iter().sum::<usize>(), 3);
        assert_eq!(h[3], 1);
    }

    #[test]
    fn pair_spec_parsing() {
        let s: PairSpec = "pos=5,neg=2,folds=4,seed=9".parse().unwrap();
        assert_eq!(s.per_identity_pos, Some(5));
        assert_eq!(s.neg_multiple, Some(2));
        assert_eq!(s.folds, 4);
        assert_eq!(s.seed, 9);
        assert_eq!("exhaustive".parse::<PairSpec>().unwrap(), PairSpec::default());
        assert!("bogus=1".parse::<PairSpec>().is_err());
    }
}
