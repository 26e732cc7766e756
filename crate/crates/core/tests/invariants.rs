use altermoma::altermoma::{
    assemble_scores, check_rho, global_threshold, keep_top_k, kept_count, normalization_sums,
    scalar_units, ImportanceLedger,
};
use altermoma::checkpoint::{decode, encode};
use altermoma::compact::{compact, mac_report};
use altermoma::oracle::{mask_absorption_seed, random_batches};
use altermoma::rng::derive_seed;
use altermoma::{ArchConfig, FusionModel, ModalityMasks, Partition};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("u{i:04}")).collect()
}

proptest! {
    #[test]
    fn top_k_keeps_exactly_k_and_dominates(scores in prop::collection::vec(-3i32..3, 1..60), k in 0usize..70) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let ids = ids(scores.len());
        let keep = keep_top_k(&ids, &scores, k);
        prop_assert_eq!(keep.iter().filter(|&&b| b).count(), k.min(scores.len()));
        let min_kept = scores.iter().zip(&keep).filter(|p| *p.1).map(|p| *p.0).fold(f64::INFINITY, f64::min);
        let max_dropped = scores.iter().zip(&keep).filter(|p| !*p.1).map(|p| *p.0).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(min_kept >= max_dropped);
        // Among equal scores at the cut, smaller ids survive.
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] == scores[j] && keep[j] && !keep[i] {
                    prop_assert!(ids[j] < ids[i]);
                }
            }
        }
    }

    #[test]
    fn kept_set_ignores_entry_order(scores in prop::collection::vec(-100i32..100, 2..40), rho in 0.0f64..0.99, rot in 0usize..40) {
        let scores: Vec<f64> = scores.into_iter().map(|s| f64::from(s) / 7.0).collect();
        let ids = ids(scores.len());
        let keep = global_threshold(&ids, &scores, rho).unwrap();
        let r = rot % scores.len();
        let (mut ids2, mut s2) = (ids.clone(), scores.clone());
        ids2.rotate_left(r);
        s2.rotate_left(r);
        let keep2 = global_threshold(&ids2, &s2, rho).unwrap();
        let a: Vec<_> = ids.iter().zip(&keep).filter(|p| *p.1).map(|p| p.0.clone()).collect();
        let mut b: Vec<_> = ids2.iter().zip(&keep2).filter(|p| *p.1).map(|p| p.0.clone()).collect();
        b.sort();
        prop_assert_eq!(a, b);
        prop_assert_eq!(keep.iter().filter(|&&x| x).count(), kept_count(scores.len(), rho));
    }

    #[test]
    fn ratios_outside_unit_interval_are_rejected(rho in prop_oneof![-5.0f64..0.0, 1.0f64..5.0]) {
        prop_assume!(!(0.0..1.0).contains(&rho));
        prop_assert!(check_rho(rho).is_err());
    }

    #[test]
    fn normalized_terms_sum_to_one(seed in any::<u64>(), vals in prop::collection::vec(0.0f64..10.0, 3 * 61)) {
        let model = FusionModel::build(&ArchConfig::uniform(2, 2, 2, 1, 2, seed)).unwrap();
        let mut ledger = ImportanceLedger::new("altermoma", false, scalar_units(&model));
        for (i, e) in ledger.entries.iter_mut().enumerate() {
            e.deci = Some(vals[3 * i % vals.len()]);
            match e.partition {
                Partition::Camera => e.reri_mu_l0 = Some(vals[(3 * i + 1) % vals.len()]),
                Partition::Lidar => e.reri_mu_c0 = Some(vals[(3 * i + 1) % vals.len()]),
                Partition::Fusion => {
                    e.reri_mu_l0 = Some(vals[(3 * i + 1) % vals.len()]);
                    e.reri_mu_c0 = Some(vals[(3 * i + 2) % vals.len()]);
                }
            }
        }
        for s in normalization_sums(&ledger).unwrap() {
            if s.denominator != 0.0 {
                prop_assert!((s.normalized_total - 1.0).abs() < 1e-9);
            }
        }
        // With beta = 0 each partition's scores are the contribution shares.
        assemble_scores(&mut ledger, 1.0, 0.0).unwrap();
        for p in Partition::ALL {
            let total: f64 = ledger.entries.iter().filter(|e| e.partition == p).map(|e| e.score.unwrap()).sum();
            let deci: f64 = ledger.entries.iter().filter(|e| e.partition == p).map(|e| e.deci.unwrap()).sum();
            if deci > 0.0 {
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), hidden in 1usize..6, bits in any::<u64>()) {
        let mut model = FusionModel::build(&ArchConfig::uniform(3, 2, hidden, 2, 2, seed)).unwrap();
        for (i, p) in model.params_mut().iter_mut().enumerate() {
            for (j, m) in p.mask.data_mut().iter_mut().enumerate() {
                *m = ((bits >> ((i * 7 + j) % 64)) & 1) as f64;
            }
        }
        let bytes = encode(model.params()).unwrap();
        prop_assert_eq!(decode(&bytes).unwrap(), model.params().to_vec());
        let cut = bytes.len() / 2;
        prop_assert!(decode(&bytes[..cut]).is_err());
    }

    #[test]
    fn compaction_is_exact(seed in any::<u64>(), bits in any::<u64>()) {
        let mut model = FusionModel::build(&ArchConfig::uniform(3, 4, 5, 3, 2, seed)).unwrap();
        for (i, c) in model.channels().into_iter().enumerate() {
            if (bits >> (i % 64)) & 1 == 1 {
                for (p, e) in c.members {
                    model.params_mut()[p].mask.data_mut()[e] = 0.0;
                }
            }
        }
        let c = compact(&model).unwrap();
        let b = &random_batches(model.arch(), 1, 9, seed).unwrap()[0];
        let full = model.predict(&b.x_lidar, &b.x_camera, ModalityMasks::UNMASKED).unwrap();
        prop_assert_eq!(c.predict(&b.x_lidar, &b.x_camera).unwrap(), full);
        let r = mac_report(&model, &c);
        prop_assert_eq!(r.compact, r.from_masks);
        prop_assert!(r.compact <= r.dense);
    }

    #[test]
    fn masks_act_as_zeroed_values(seed in any::<u64>()) {
        prop_assert_eq!(mask_absorption_seed(seed).unwrap(), 0.0);
    }

    #[test]
    fn derived_seeds_depend_on_tag(seed in any::<u64>(), a in 0u64..64, b in 0u64..64) {
        prop_assume!(a != b);
        prop_assert_eq!(derive_seed(seed, a), derive_seed(seed, a));
        prop_assert_ne!(derive_seed(seed, a), derive_seed(seed, b));
    }
}
