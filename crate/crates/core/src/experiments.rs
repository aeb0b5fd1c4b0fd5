//! Named ablation grids, the multi-seed experiment runner and the SRS
//! diagnosis of a trained encoder.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{AugmentConfig, AugmentMasks, ViewMode};
use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate, PairSpec};
use crate::losses::ContrastiveKind;
use crate::numerics::EmbeddingBatch;
use crate::pairing::{build_plan, srs_scatter, Protocol, ScmMode, SrsReport};
use crate::trainer::{train, Encoder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Grid {
    /// Method comparison: classification only, contrastive only, input
    /// augmentation and feature augmentation, each contrastive loss.
    Table5,
    /// Pair-coupling protocol by mask mode, plus plain and two-view baselines.
    Table6,
    Dropout,
    Lambda,
}

impl FromStr for Grid {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table5" => Ok(Grid::Table5),
            "table6" => Ok(Grid::Table6),
            "dropout" => Ok(Grid::Dropout),
            "lambda" => Ok(Grid::Lambda),
            other => Err(Error::validation(
                "grid",
                format!("unknown grid {other:?} (expected table5, table6, dropout or lambda)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentMatrix {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

const CONTRASTIVE: [ContrastiveKind; 3] = [ContrastiveKind::Ntxent, ContrastiveKind::Supcon, ContrastiveKind::Coreface];

/// Classification only, single clean view.
pub fn classification_only(base: &TrainConfig) -> TrainConfig {
    let mut c = base.clone();
    c.augment.mode = ViewMode::None;
    c.loss.contrastive = ContrastiveKind::None;
    c.loss.classification = true;
    c
}

fn with(base: &TrainConfig, f: impl FnOnce(&mut TrainConfig)) -> TrainConfig {
    let mut c = base.clone();
    f(&mut c);
    c
}

pub fn grid_variants(grid: Grid, base: &TrainConfig) -> Vec<Variant> {
    let v = |name: String, config: TrainConfig| Variant { name, config };
    let mut out = Vec::new();
    match grid {
        Grid::Table5 => {
            out.push(v("classification_only".into(), classification_only(base)));
            for (group, mode, classification) in [
                ("contrastive_only", ViewMode::Feature, false),
                ("data_aug", ViewMode::Input, true),
                ("feature_aug", ViewMode::Feature, true),
            ] {
                for kind in CONTRASTIVE {
                    out.push(v(
                        format!("{group}_{kind}"),
                        with(base, |c| {
                            c.augment.mode = mode;
                            c.loss.classification = classification;
                            c.loss.contrastive = kind;
                            c.loss.lambda = 1.0;
                        }),
                    ));
                }
            }
        }
        Grid::Table6 => {
            out.push(v("original".into(), classification_only(base)));
            out.push(v(
                "without_contrastive".into(),
                with(base, |c| {
                    c.augment.mode = ViewMode::Feature;
                    c.loss.contrastive = ContrastiveKind::None;
                }),
            ));
            for scm in [ScmMode::Off, ScmMode::Exclude] {
                for protocol in Protocol::ALL {
                    out.push(v(
                        format!("{protocol}_scm_{}", scm.name()),
                        with(base, |c| {
                            c.augment.mode = ViewMode::Feature;
                            c.loss.contrastive = ContrastiveKind::Coreface;
                            c.pairing.protocol = protocol;
                            c.pairing.scm = scm;
                        }),
                    ));
                }
            }
        }
        Grid::Dropout => {
            for (p1, p2) in [(0.1, 0.9), (0.2, 0.7), (0.2, 0.8), (0.2, 0.9), (0.3, 0.9), (0.4, 0.9), (0.5, 0.9)] {
                out.push(v(
                    format!("p1_{p1}_p2_{p2}"),
                    with(base, |c| {
                        c.augment.p1 = p1;
                        c.augment.p2 = p2;
                    }),
                ));
            }
        }
        Grid::Lambda => {
            for lambda in [0.1, 0.3, 0.5, 0.7, 1.0] {
                out.push(v(format!("lambda_{lambda}"), with(base, |c| c.loss.lambda = lambda)));
            }
        }
    }
    out
}

/// `"3"` means seeds 0, 1, 2; `"4,9"` lists them explicitly.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::validation("seeds", format!("expected a count or a comma-separated list, got {s:?}"));
    if s.contains(',') {
        let seeds: Vec<u64> = s
            .split(',')
            .map(|p| p.trim().parse::<u64>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
            return Err(Error::validation("seeds", "duplicate seed"));
        }
        Ok(seeds)
    } else {
        let n: u64 = s.trim().parse().map_err(|_| bad())?;
        if n == 0 {
            return Err(bad());
        }
        Ok((0..n).collect())
    }
}

impl ExperimentMatrix {
    pub fn new(variants: Vec<Variant>, seeds: Vec<u64>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for v in &variants {
            if !names.insert(&v.name) {
                return Err(Error::validation("grid", format!("duplicate variant {:?}", v.name)));
            }
            if v.config.data != variants[0].config.data {
                return Err(Error::validation("grid", "variants must share one dataset"));
            }
            v.config.validate()?;
        }
        Ok(ExperimentMatrix { variants, seeds })
    }

    pub fn from_grid(grid: Grid, base: &TrainConfig, seeds: Vec<u64>) -> Result<Self> {
        Self::new(grid_variants(grid, base), seeds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub gap: f64,
    pub mean_pos_sim: f64,
    pub mean_neg_sim: f64,
    pub tar_at_far_1e_2: Option<f64>,
    pub rank1: f64,
    pub train_accuracy: f64,
    pub final_m_c: f64,
}

/// Train and evaluate one configuration.
pub fn run_one(name: &str, cfg: &TrainConfig, train_ds: &Dataset, eval_ds: &Dataset) -> Result<RunResult> {
    let out = train(cfg, train_ds, None)?;
    let m = evaluate(&out.model.encoder, eval_ds, &PairSpec::balanced())?;
    Ok(RunResult {
        variant: name.to_string(),
        seed: cfg.seed,
        accuracy: m.accuracy,
        gap: m.gap,
        mean_pos_sim: m.mean_pos_sim,
        mean_neg_sim: m.mean_neg_sim,
        tar_at_far_1e_2: m.tar_at_far.get(&format!("{:e}", 1e-2)).copied(),
        rank1: m.rank1,
        train_accuracy: out.log.epochs.last().map_or(0.0, |e| e.train_accuracy),
        final_m_c: out.margin.m_c,
    })
}

/// Every variant under every seed, in parallel; results in grid order.
pub fn run_matrix(matrix: &ExperimentMatrix, train_ds: &Dataset, eval_ds: &Dataset) -> Result<Vec<RunResult>> {
    let jobs: Vec<(&Variant, u64)> = matrix
        .variants
        .iter()
        .flat_map(|v| matrix.seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.par_iter()
        .map(|(v, seed)| {
            let mut cfg = v.config.clone();
            cfg.seed = *seed;
            run_one(&v.name, &cfg, train_ds, eval_ds)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub rank1_mean: f64,
    pub rank1_std: f64,
    pub seeds: String,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Per-variant mean and sample standard deviation, in first-seen order.
pub fn summarize(results: &[RunResult]) -> Vec<SummaryRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        if !groups.contains_key(r.variant.as_str()) {
            order.push(r.variant.as_str());
        }
        groups.entry(&r.variant).or_default().push(r);
    }
    order
        .into_iter()
        .map(|name| {
            let rs = &groups[name];
            let col = |f: fn(&RunResult) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (am, asd) = mean_std(&col(|r| r.accuracy));
            let (gm, gsd) = mean_std(&col(|r| r.gap));
            let (rm, rsd) = mean_std(&col(|r| r.rank1));
            let mut seeds = String::new();
            for (i, r) in rs.iter().enumerate() {
                let _ = write!(seeds, "{}{}", if i > 0 { ";" } else { "" }, r.seed);
            }
            SummaryRow {
                variant: name.to_string(),
                runs: rs.len(),
                accuracy_mean: am,
                accuracy_std: asd,
                gap_mean: gm,
                gap_std: gsd,
                rank1_mean: rm,
                rank1_std: rsd,
                seeds,
            }
        })
        .collect()
}

/// Key-negative analysis on one batch of distinct identities, one sample
/// each, embedded through freshly drawn dropout channels.
pub fn diagnose(
    encoder: &Encoder,
    ds: &Dataset,
    protocol: Protocol,
    augment: &AugmentConfig,
    images: usize,
    seed: u64,
) -> Result<SrsReport> {
    let groups = ds.indices_by_class();
    let n = images.min(groups.len());
    if n < 2 {
        return Err(Error::DegenerateBatch("diagnosis needs at least 2 identities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = sample_indices(&mut rng, groups.len(), n).into_vec();
    let idx: Vec<usize> = classes
        .iter()
        .map(|&c| groups[c][sample_indices(&mut rng, groups[c].len(), 1).index(0)])
        .collect();
    let inputs = ds.inputs.select_rows(&idx);
    let labels: Vec<usize> = (0..n).collect();
    let masks = AugmentMasks::sample(augment, n, encoder.hidden_dim(), &mut rng)?;
    let emb = encoder.embed_views(&inputs, &masks)?;
    let batch = EmbeddingBatch::paired(emb, &labels)?;
    let plan = build_plan(n, &labels, protocol, ScmMode::Exclude)?;
    srs_scatter(&batch, &plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_unique_names_and_validate() {
        let base = TrainConfig::default();
        for g in [Grid::Table5, Grid::Table6, Grid::Dropout, Grid::Lambda] {
            let m = ExperimentMatrix::from_grid(g, &base, vec![0, 1]).unwrap();
            assert!(!m.variants.is_empty());
        }
        assert_eq!(grid_variants(Grid::Table6, &base).len(), 10);
        assert_eq!(grid_variants(Grid::Table5, &base).len(), 10);
    }

    #[test]
    fn seeds_parse() {
        assert_eq!(parse_seeds("3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("4, 9").unwrap(), vec![4, 9]);
        assert!(parse_seeds("0").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn summary_statistics() {
        let r = |v: &str, seed, acc| RunResult {
            variant: v.into(),
            seed,
            accuracy: acc,
            gap: 0.0,
            mean_pos_sim: 0.0,
            mean_neg_sim: 0.0,
            tar_at_far_1e_2: None,
            rank1: 0.0,
            train_accuracy: 0.0,
            final_m_c: 0.0,
        };
        let s = summarize(&[r("b", 0, 0.5), r("a", 0, 0.7), r("b", 1, 0.7)]);
        assert_eq!(s[0].variant, "b");
        assert!((s[0].accuracy_mean - 0.6).abs() < 1e-12);
        assert!((s[0].accuracy_std - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(s[0].seeds, "0;1");
        assert_eq!(s[1].runs, 1);
    }
}
