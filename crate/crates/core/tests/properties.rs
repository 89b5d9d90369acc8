mod common;

use std::collections::{BTreeMap, BTreeSet};

use m2dino::analysis::{group_average, relative_delta, DeltaEntry, DeltaMode};
use m2dino::data::{split_train_val, TaskSpec, TaskType};
use m2dino::heads::{detect_decode, detect_encode, perfect_grid, BoundingBox};
use m2dino::metrics::{self, Direction, Mask};
use m2dino::trainer::{build_plan, sample_batches, Paradigm};
use proptest::prelude::*;

fn spec(id: String, group: String) -> TaskSpec {
    TaskSpec {
        task_id: id,
        task_type: TaskType::Reg,
        group: Some(group),
        num_classes: None,
        original_resolution: [8, 8],
        loss_weight: 1.0,
        paradigms: Paradigm::ALL.to_vec(),
        train: vec![],
        test: vec![],
    }
}

proptest! {
    #[test]
    fn split_is_disjoint_exhaustive_and_deterministic(n in 2usize..300, seed in any::<u64>()) {
        let (train, val) = split_train_val(n, 0.2, seed).unwrap();
        prop_assert_eq!(val.len(), ((n as f64 * 0.2).floor() as usize).max(1));
        let all: BTreeSet<usize> = train.iter().chain(&val).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(all.into_iter().collect::<Vec<_>>(), (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_train_val(n, 0.2, seed).unwrap(), (train, val));
    }

    #[test]
    fn paradigm_cardinality(groups in prop::collection::vec(0usize..5, 1..30)) {
        let reg: Vec<TaskSpec> = groups.iter().enumerate().map(|(i, g)| spec(format!("t{i:02}"), format!("g{g}"))).collect();
        let distinct: BTreeSet<&usize> = groups.iter().collect();
        prop_assert_eq!(build_plan(Paradigm::Ts, &reg).unwrap().units.len(), reg.len());
        let cg = build_plan(Paradigm::Cg, &reg).unwrap();
        prop_assert_eq!(cg.units.len(), distinct.len());
        prop_assert_eq!(cg.units.iter().map(|u| u.tasks.len()).sum::<usize>(), reg.len());
        prop_assert_eq!(build_plan(Paradigm::Au, &reg).unwrap().units.len(), 1);
    }

    #[test]
    fn batches_are_single_task_and_reproducible(
        sizes in prop::collection::vec(1usize..50, 1..5),
        batch in 1usize..9,
        epoch in 0usize..4,
        seed in any::<u64>(),
    ) {
        let sizes: BTreeMap<String, usize> = sizes.iter().enumerate().map(|(i, &n)| (format!("t{i}"), n)).collect();
        let a = sample_batches(&sizes, batch, epoch, seed).unwrap();
        prop_assert_eq!(a.len(), sizes.values().map(|n| n.div_ceil(batch)).sum::<usize>());
        for b in &a {
            let n = sizes[&b.task];
            prop_assert_eq!(b.indices.len(), batch.min(n));
            prop_assert!(b.indices.iter().all(|&i| i < n));
        }
        prop_assert_eq!(a, sample_batches(&sizes, batch, epoch, seed).unwrap());
    }

    #[test]
    fn lower_better_improvement_is_positive(ts in 0.01f64..100.0, frac in 0.01f64..0.99) {
        let other = ts * frac;
        let (p, a) = relative_delta(ts, other, Direction::LowerBetter).unwrap();
        prop_assert!(p > 0.0 && a > 0.0);
    }

    #[test]
    fn delta_identity_and_sign_agreement(ts in 0.001f64..1e3, other in -1e3f64..1e3, higher in any::<bool>()) {
        let dir = if higher { Direction::HigherBetter } else { Direction::LowerBetter };
        prop_assert_eq!(relative_delta(ts, ts, dir).unwrap(), (0.0, 0.0));
        let (p, a) = relative_delta(ts, other, dir).unwrap();
        prop_assert!(p.signum() == a.signum() || a == 0.0);
    }

    #[test]
    fn group_average_permutation_invariant(deltas in prop::collection::vec(-100.0f64..100.0, 1..12), seed in any::<u64>()) {
        let entries: Vec<DeltaEntry> = deltas.iter().enumerate().map(|(i, &d)| DeltaEntry {
            task_id: format!("t{i}"),
            group: "G".into(),
            metric: "DSC".into(),
            ts_value: 1.0,
            other_value: 1.0 + d,
            delta_percent: Some(d),
            delta_absolute: d / 100.0,
            direction: Direction::HigherBetter,
        }).collect();
        let mut shuffled = entries.clone();
        use rand::{seq::SliceRandom, SeedableRng};
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let a = group_average(&entries, DeltaMode::Percent).unwrap();
        let b = group_average(&shuffled, DeltaMode::Percent).unwrap();
        prop_assert_eq!(&a, &b);
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        prop_assert!((a[0].mean - mean).abs() <= 1e-5 * mean.abs().max(1.0));
    }

    #[test]
    fn detection_round_trip(cx in 0.0f64..=1.0, cy in 0.0f64..=1.0, bw in 0.01f64..=1.0, bh in 0.01f64..=1.0) {
        let gt = BoundingBox::new(cx, cy, bw, bh);
        let b = detect_decode(&perfect_grid(&detect_encode(&gt, 7, 7).unwrap()));
        prop_assert!((b.cx - cx).abs() < 1e-6 && (b.cy - cy).abs() < 1e-6);
        prop_assert!((b.bw - bw).abs() < 1e-6 && (b.bh - bh).abs() < 1e-6);
    }

    #[test]
    fn mask_metrics_match_oracles(h in 1usize..10, w in 1usize..10, bits in prop::collection::vec(any::<(bool, bool)>(), 100)) {
        let a: Vec<bool> = bits.iter().take(h * w).map(|p| p.0).collect();
        let b: Vec<bool> = bits.iter().take(h * w).map(|p| p.1).collect();
        let (ma, mb) = (Mask::new(h, w, a.clone()).unwrap(), Mask::new(h, w, b.clone()).unwrap());
        prop_assert_eq!(metrics::dsc(&ma, &mb).unwrap(), common::dsc_oracle(&a, &b));
        prop_assert_eq!(metrics::hausdorff(&ma, &mb).unwrap().distance, common::hausdorff_oracle(&a, &b, h, w));
        prop_assert_eq!(metrics::dsc(&ma, &mb).unwrap(), metrics::dsc(&mb, &ma).unwrap());
    }

    #[test]
    fn auc_matches_pairwise(scores in prop::collection::vec((0u8..20, any::<bool>()), 2..120)) {
        let s: Vec<f64> = scores.iter().map(|p| p.0 as f64 / 19.0).collect();
        let y: Vec<bool> = scores.iter().map(|p| p.1).collect();
        prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
        let auc = metrics::binary_auc(&s, &y).unwrap();
        prop_assert!((auc - common::pairwise_auc(&s, &y)).abs() < 1e-12);
    }

    #[test]
    fn mcc_bounded(pred in prop::collection::vec(0usize..3, 5..60), shift in 0usize..3) {
        let gt: Vec<usize> = pred.iter().enumerate().map(|(i, p)| if i % 3 == 0 { (p + shift) % 3 } else { *p }).collect();
        let (_, mcc) = metrics::f1_and_mcc(&pred, &gt).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&mcc));
    }
}
