use coreface::augment::{apply_channels, sample_masks};
use coreface::data::{self, IdentitySpec};
use coreface::eval::{self, angle_histogram, Pair, PairList};
use coreface::losses::{self, ClassifierHead, HeadKind};
use coreface::margin::{batch_margin, ema_update, MarginState};
use coreface::numerics::{cosine_sim, log_softmax_ce, sim_matrix, EmbeddingBatch, Mat};
use coreface::pairing::{build_plan, srs_scatter, Protocol, ScmMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn vector(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

/// Images, dim, unit two-view rows and image labels with at least two classes.
fn two_view() -> impl Strategy<Value = (usize, usize, Vec<Vec<f64>>, Vec<usize>)> {
    (2usize..=7, 2usize..=8).prop_flat_map(|(n, d)| {
        (
            Just(n),
            Just(d),
            prop::collection::vec(vector(d).prop_map(unit), 2 * n),
            prop::collection::vec(0usize..4, n).prop_filter("two classes", |l| l.iter().any(|&x| x != l[0])),
        )
    })
}

fn batch(rows: &[Vec<f64>], labels: &[usize]) -> EmbeddingBatch {
    EmbeddingBatch::paired(Mat::from_rows(rows).unwrap(), labels).unwrap()
}

fn protocol() -> impl Strategy<Value = Protocol> {
    prop::sample::select(Protocol::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn cosine_is_symmetric_and_scale_invariant(
        (a, b) in (2usize..10).prop_flat_map(|d| (vector(d), vector(d))),
        k in 0.01f64..100.0,
    ) {
        let ab = cosine_sim(&a, &b).unwrap();
        prop_assert_eq!(ab.to_bits(), cosine_sim(&b, &a).unwrap().to_bits());
        let scaled: Vec<f64> = a.iter().map(|x| x * k).collect();
        prop_assert!((cosine_sim(&scaled, &b).unwrap() - ab).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(z in prop::collection::vec(-50.0f64..50.0, 2..12), c in -100.0f64..100.0, t in 0usize..12) {
        let t = t % z.len();
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        prop_assert!((log_softmax_ce(&z, t).unwrap() - log_softmax_ce(&shifted, t).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn similarity_matrix_bounded_with_unit_diagonal((n, _d, rows, labels) in two_view()) {
        let b = batch(&rows, &labels);
        let idx: Vec<usize> = (0..2 * n).collect();
        let s = sim_matrix(&b, &idx, &idx).unwrap();
        for i in 0..2 * n {
            prop_assert!((s.values.get(i, i) - 1.0).abs() < 1e-9);
            for j in 0..2 * n {
                prop_assert!(s.values.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn dropout_masks_rescale_and_repeat(p1 in 0.0f64..0.95, p2 in 0.0f64..0.95, dim in 1usize..40, seed: u64) {
        let a = sample_masks(p1, p2, dim, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_masks(p1, p2, dim, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.0.mask.len(), dim);
        let hidden = Mat::from_vec(2, dim, (0..2 * dim).map(|i| i as f64 + 1.0).collect()).unwrap();
        let views = apply_channels(&hidden, &a).unwrap();
        for (view, ch, p) in [(0, &a.0, p1), (1, &a.1, p2)] {
            prop_assert!((ch.scale() * (1.0 - p) - 1.0).abs() < 1e-15);
            for i in 0..2 {
                for k in 0..dim {
                    let want = if ch.mask[k] { hidden.get(i, k) * ch.scale() } else { 0.0 };
                    // rows i and N + i come from the same source row
                    prop_assert_eq!(views.get(view * 2 + i, k), want);
                }
            }
        }
    }

    #[test]
    fn zero_dropout_gives_identical_views(dim in 1usize..30, seed: u64) {
        let ch = sample_masks(0.0, 0.0, dim, true, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let hidden = Mat::from_vec(3, dim, (0..3 * dim).map(|i| (i as f64).sin() + 2.0).collect()).unwrap();
        let v = apply_channels(&hidden, &ch).unwrap();
        for i in 0..3 {
            prop_assert!((cosine_sim(v.row(i), v.row(3 + i)).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn plan_invariants((n, _d, _rows, labels) in two_view(), p in protocol(), scm in prop::sample::select(vec![ScmMode::Off, ScmMode::Zero, ScmMode::Exclude])) {
        let Ok(plan) = build_plan(n, &labels, p, scm) else { return Ok(()); };
        let single = p == Protocol::S_N || p == Protocol::S_2N;
        prop_assert_eq!(plan.anchors.len(), if single { n } else { 2 * n });
        let ceiling = if p == Protocol::S_N || p == Protocol::D_N { n - 1 } else { 2 * n - 2 };
        for a in &plan.anchors {
            prop_assert_eq!(a.positive, (a.anchor + n) % (2 * n));
            prop_assert!(!a.negatives.contains(&a.anchor) && !a.negatives.contains(&a.positive));
            prop_assert_eq!(a.negatives.len() + a.masked.len(), ceiling);
            if scm != ScmMode::Off {
                prop_assert!(a.negatives.iter().all(|&j| labels[j % n] != labels[a.anchor % n]));
            }
        }
    }

    #[test]
    fn srs_is_deterministic_with_even_mirrors((n, _d, rows, labels) in two_view(), p in protocol()) {
        let b = batch(&rows, &labels);
        let Ok(plan) = build_plan(n, &labels, p, ScmMode::Exclude) else { return Ok(()); };
        let r1 = srs_scatter(&b, &plan).unwrap();
        let r2 = srs_scatter(&b, &plan).unwrap();
        prop_assert_eq!(&r1, &r2);
        prop_assert_eq!(r1.mirrored_count % 2, 0);
        prop_assert!(r1.duplication_factor <= 2);
    }

    #[test]
    fn masked_negatives_do_not_move_exclude_loss((n, d, rows, labels) in two_view(), p in protocol(), seed: u64) {
        let Ok(plan) = build_plan(n, &labels, p, ScmMode::Exclude) else { return Ok(()); };
        let masked: Vec<usize> = plan.anchors.iter().flat_map(|a| a.masked.clone()).collect();
        if masked.is_empty() {
            return Ok(());
        }
        let target = masked[(seed % masked.len() as u64) as usize];
        let mut moved = rows.clone();
        moved[target] = unit((0..d).map(|k| ((k as u64 + seed) as f64).cos()).collect());
        let before = losses::coreface_anchor_losses(&batch(&rows, &labels), &plan, 0.1, 64.0).unwrap();
        let after = losses::coreface_anchor_losses(&batch(&moved, &labels), &plan, 0.1, 64.0).unwrap();
        for (k, a) in plan.anchors.iter().enumerate() {
            let involved = a.anchor == target || a.positive == target || a.negatives.contains(&target);
            if !involved {
                prop_assert_eq!(before[k].to_bits(), after[k].to_bits());
            }
        }
    }

    #[test]
    fn coreface_loss_increases_with_margin((n, _d, rows, labels) in two_view(), m in -1.0f64..1.0, dm in 0.01f64..0.5) {
        let Ok(plan) = build_plan(n, &labels, Protocol::S_N, ScmMode::Exclude) else { return Ok(()); };
        let b = batch(&rows, &labels);
        let lo = losses::coreface_loss(&b, &plan, m, 8.0).unwrap().value;
        let hi = losses::coreface_loss(&b, &plan, m + dm, 8.0).unwrap().value;
        prop_assert!(hi > lo);
    }

    #[test]
    fn plain_softmax_is_nonnegative_and_gradients_finite(
        (h, w, y) in (2usize..8, 2usize..6).prop_flat_map(|(d, c)| (vector(d).prop_map(unit), prop::collection::vec(-1.0f64..1.0, d * c).prop_map(move |v| (d, c, v)), 0..c)),
    ) {
        let (d, c, wv) = w;
        let Ok(wm) = Mat::from_vec(d, c, wv) else { return Ok(()); };
        for kind in [HeadKind::Softmax, HeadKind::Cosface, HeadKind::Arcface] {
            let Ok(head) = ClassifierHead::new(wm.clone(), 30.0, kind.default_margin(), kind) else { return Ok(()); };
            let Ok(r) = losses::classification_loss(&h, y, &head) else { return Ok(()); };
            prop_assert!(r.value.is_finite() && r.grad_embeddings.is_finite());
            prop_assert!(r.grad_weights.as_ref().unwrap().is_finite());
            if kind == HeadKind::Softmax {
                prop_assert!(r.value >= 0.0);
            }
        }
    }

    #[test]
    fn margin_update_stays_between(prev in -2.0f64..2.0, m_k in -2.0f64..2.0, alpha in 0.0f64..=1.0) {
        let s = MarginState { m_c: prev, ..MarginState::new(alpha) };
        let next = ema_update(s, m_k).unwrap().m_c;
        prop_assert!(next >= prev.min(m_k) - 1e-15 && next <= prev.max(m_k) + 1e-15);
        let s1 = MarginState { m_c: prev, ..MarginState::new(1.0) };
        prop_assert_eq!(ema_update(s1, m_k).unwrap().m_c, m_k);
        let s0 = MarginState { m_c: prev, ..MarginState::new(0.0) };
        prop_assert_eq!(ema_update(s0, m_k).unwrap().m_c, prev);
    }

    #[test]
    fn batch_margin_is_bounded((n, _d, rows, labels) in two_view(), p in protocol()) {
        let Ok(plan) = build_plan(n, &labels, p, ScmMode::Exclude) else { return Ok(()); };
        let m = batch_margin(&batch(&rows, &labels), &plan).unwrap();
        prop_assert!((-2.0..=2.0).contains(&m));
    }

    #[test]
    fn verification_depends_only_on_order(
        pairs in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 8..40),
    ) {
        let folds = 2;
        let list = PairList {
            pairs: pairs.iter().enumerate().map(|(i, &(_, same))| Pair { a: 0, b: 0, same, fold: i % folds }).collect(),
            folds,
        };
        let sims: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let Ok(a) = eval::verification_accuracy(&sims, &list) else { return Ok(()); };
        let warped: Vec<f64> = sims.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, eval::verification_accuracy(&warped, &list).unwrap());
    }

    #[test]
    fn tar_is_monotone_in_far(
        pos in prop::collection::vec(-1.0f64..1.0, 1..30),
        neg in prop::collection::vec(-1.0f64..1.0, 10..60),
        f1 in 0.1f64..0.9,
        df in 0.0f64..0.09,
    ) {
        let lo = eval::tar_at_far(&pos, &neg, f1).unwrap().tar;
        let hi = eval::tar_at_far(&pos, &neg, f1 + df).unwrap().tar;
        prop_assert!(hi >= lo);
    }

    #[test]
    fn histograms_conserve_counts(sims in prop::collection::vec(-1.5f64..1.5, 0..100), bins in 2usize..200) {
        prop_assert_eq!(angle_histogram(&sims, bins).unwrap().iter().sum::<usize>(), sims.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_splits_are_reproducible_and_disjoint(seed: u64, k in 4usize..12, m in 2usize..6) {
        let spec = IdentitySpec { num_identities: k, samples_per_identity: m, eval_fraction: 0.3, seed, ..Default::default() };
        let (tr, ev) = data::generate(&spec).unwrap();
        let (tr2, ev2) = data::generate(&spec).unwrap();
        prop_assert_eq!(&tr, &tr2);
        prop_assert_eq!(&ev, &ev2);
        prop_assert!(data::check_disjoint(&tr, &ev).is_ok());
        prop_assert!(ev.samples_per_identity().values().all(|&c| c >= 2));
    }
}
