use std::collections::{BTreeMap, HashSet};

use ndarray::Array2;
use proptest::prelude::*;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use vhp_core::diagnostics::{
    chi_squared_sf, kmer_profile, kmer_similarity, ln_gamma, needleman_wunsch,
    normalized_alignment_percent, sequence_identity, AlignScoring,
};
use vhp_core::ingest::{filter_hosts, host_counts, make_split, stratum_test_size};
use vhp_core::metrics::{confusion, micro_average_auc, precision_recall_f1};
use vhp_core::nn::gradcheck::{check_all, CheckShape, DEFAULT_STEP};
use vhp_core::preprocess::{class_weights, decode_one_hot, normalize_alphabet, one_hot, resize};
use vhp_core::SequenceRecord;

fn corpus() -> impl Strategy<Value = Vec<SequenceRecord>> {
    prop::collection::vec((0usize..4, 6usize..14), 1..5).prop_map(|classes| {
        let mut records = Vec::new();
        for (c, (host, n)) in classes.iter().enumerate() {
            for i in 0..*n {
                records.push(
                    SequenceRecord::new(format!("r{c}_{i}"), "ACGT", format!("h{host}_{c}"))
                        .unwrap(),
                );
            }
        }
        records
    })
}

fn dna(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::sample::select(b"ACGTN".to_vec()), 1..max)
}

proptest! {
    #[test]
    fn split_partitions_and_stratifies(records in corpus(), seed in any::<u64>(), folds in 2usize..5) {
        let plan = make_split(&records, 0.2, folds, seed).unwrap();
        let all: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let train: HashSet<&str> = plan.train_ids.iter().map(String::as_str).collect();
        let test: HashSet<&str> = plan.test_ids.iter().map(String::as_str).collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), all.len());
        prop_assert_eq!(train.union(&test).copied().collect::<HashSet<_>>(), all);

        let folded: Vec<&str> = plan.folds.iter().flatten().map(String::as_str).collect();
        prop_assert_eq!(folded.len(), train.len());
        prop_assert_eq!(folded.iter().copied().collect::<HashSet<_>>(), train);

        let host_of: BTreeMap<&str, &str> =
            records.iter().map(|r| (r.id.as_str(), r.host.as_str())).collect();
        for (host, n) in host_counts(&records) {
            let in_test = plan.test_ids.iter().filter(|id| host_of[id.as_str()] == host).count();
            prop_assert_eq!(in_test, stratum_test_size(n, 0.2));
            for fold in &plan.folds {
                let k = fold.iter().filter(|id| host_of[id.as_str()] == host).count();
                let share = (n - in_test) as f64 / folds as f64;
                prop_assert!((k as f64 - share).abs() <= 1.0);
            }
        }
        prop_assert_eq!(make_split(&records, 0.2, folds, seed).unwrap(), plan);
    }

    #[test]
    fn host_filter_is_idempotent(records in corpus(), min in 0usize..15) {
        let once = filter_hosts(&records, min);
        prop_assert_eq!(filter_hosts(&once, min), once.clone());
        prop_assert!(host_counts(&once).values().all(|&n| n >= min));
    }

    #[test]
    fn normalization_and_resize_are_idempotent(raw in "[ -~]{1,60}", len in 1usize..90) {
        let clean = normalize_alphabet(&raw).unwrap();
        prop_assert_eq!(normalize_alphabet(clean.as_str()).unwrap(), clean.clone());
        let sized = resize(&clean, len).unwrap();
        prop_assert_eq!(sized.len(), len);
        prop_assert_eq!(resize(&sized, len).unwrap(), sized.clone());
        for (i, &b) in sized.bases().iter().enumerate() {
            prop_assert_eq!(b, clean.bases()[i % clean.len()]);
        }
    }

    #[test]
    fn one_hot_round_trips(seq in dna(80)) {
        let clean = normalize_alphabet(std::str::from_utf8(&seq).unwrap()).unwrap();
        let m = one_hot::<f32>(&clean).unwrap();
        prop_assert!(m.rows().into_iter().all(|r| r.sum() == 1.0));
        prop_assert_eq!(decode_one_hot(m.view()).unwrap(), clean);
    }

    #[test]
    fn class_weights_preserve_total(counts in prop::collection::vec(1usize..10_000, 1..30)) {
        let w = class_weights(&counts).unwrap();
        let total: usize = counts.iter().sum();
        let weighted: f64 = w.as_slice().iter().zip(&counts).map(|(w, &c)| w * c as f64).sum();
        prop_assert!((weighted - total as f64).abs() <= 1e-9 * total as f64);
    }

    #[test]
    fn confusion_identities(pairs in prop::collection::vec((0usize..5, 0usize..5), 1..200)) {
        let (labels, preds): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let cm = confusion(&labels, &preds, 5).unwrap();
        prop_assert_eq!(cm.total(), labels.len() as u64);
        prop_assert_eq!(cm.row_sums().iter().sum::<u64>(), cm.total());
        prop_assert_eq!(cm.col_sums().iter().sum::<u64>(), cm.total());
        let s = precision_recall_f1(&cm);
        for c in 0..5 {
            for v in [s.precision[c], s.recall[c], s.f1[c]] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let lo = s.precision[c].min(s.recall[c]);
            let hi = s.precision[c].max(s.recall[c]);
            prop_assert!(s.f1[c] >= lo - 1e-12 && s.f1[c] <= hi + 1e-12);
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        rows in prop::collection::vec((0usize..3, prop::collection::vec(0u8..6, 3)), 2..40),
        shift in -3.0f64..3.0,
    ) {
        let labels: Vec<usize> = rows.iter().map(|(l, _)| *l).collect();
        let scores = Array2::from_shape_fn((rows.len(), 3), |(i, j)| rows[i].1[j] as f64 / 5.0);
        let base = micro_average_auc(&labels, scores.view()).unwrap();
        let mapped = scores.mapv(|v| (3.0 * v + shift).exp());
        prop_assert_eq!(micro_average_auc(&labels, mapped.view()).unwrap(), base);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn alignment_is_symmetric(a in dna(30), b in dna(30)) {
        let s = AlignScoring::default();
        prop_assert_eq!(needleman_wunsch(&a, &b, &s).unwrap(), needleman_wunsch(&b, &a, &s).unwrap());
        prop_assert_eq!(normalized_alignment_percent(&a, &a, &s).unwrap(), 100.0);
        let id = sequence_identity(&a, &b, &s).unwrap();
        prop_assert!((0.0..=100.0).contains(&id));
        prop_assert_eq!(id == 100.0, a == b);
        let p = normalized_alignment_percent(&a, &b, &s).unwrap();
        prop_assert!(p <= 100.0);
    }

    #[test]
    fn kmer_similarity_is_symmetric_and_scale_free(a in dna(60), b in dna(60), scale in 1u64..50) {
        prop_assume!(a.len() >= 4 && b.len() >= 4);
        let p = kmer_profile(&a, 4).unwrap();
        let q = kmer_profile(&b, 4).unwrap();
        prop_assume!(p.total > 0 && q.total > 0);
        prop_assert_eq!(p.counts.iter().sum::<u64>(), p.total);
        let pq = kmer_similarity(&p, &q).unwrap();
        prop_assert!((pq - kmer_similarity(&q, &p).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=100.0).contains(&pq));
        let mut scaled = p.clone();
        scaled.counts.iter_mut().for_each(|c| *c *= scale);
        scaled.total *= scale;
        prop_assert!((kmer_similarity(&scaled, &q).unwrap() - pq).abs() < 1e-9);
    }

    #[test]
    fn chi_squared_tail_decreases(df in 1usize..12, x in 0.0f64..300.0, dx in 0.01f64..20.0) {
        let p = chi_squared_sf(x, df).unwrap();
        let q = chi_squared_sf(x + dx, df).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!(q <= p);
        prop_assert_eq!(chi_squared_sf(0.0, df).unwrap(), 1.0);
    }
}

proptest! {
    #[test]
    fn chi_squared_tail_matches_statrs(df in 1usize..30, x in 0.01f64..80.0) {
        let ours = chi_squared_sf(x, df).unwrap();
        let theirs = ChiSquared::new(df as f64).unwrap().sf(x);
        prop_assume!(theirs > 1e-12);
        prop_assert!((ours - theirs).abs() <= 1e-9 * theirs.max(1e-3), "{} vs {}", ours, theirs);
    }

    #[test]
    fn ln_gamma_matches_statrs(x in 0.05f64..200.0) {
        let theirs = statrs::function::gamma::ln_gamma(x);
        prop_assert!((ln_gamma(x) - theirs).abs() <= 1e-10 * theirs.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradients_match_finite_differences(
        batch in 2usize..=4,
        len in 1usize..=12,
        input_dim in 1usize..=5,
        hidden in 1usize..=8,
        classes in 2usize..=5,
        seed in any::<u64>(),
    ) {
        let shape = CheckShape { batch, len, input_dim, hidden, classes };
        for r in check_all(shape, seed, DEFAULT_STEP).unwrap() {
            prop_assert!(r.max_relative_error < 1e-4, "{:?} at {:?}", r, shape);
        }
    }
}
