use proptest::prelude::*;
use tractgraph_core::features::{minmax_normalize, NormStats};
use tractgraph_core::{Cohort, Split, SubjectFeatures};

/// (fa, streamline count) per cluster; count 0 marks an absent cluster.
fn arb_subject(c: usize) -> impl Strategy<Value = Vec<(f64, u64)>> {
    prop::collection::vec((0.05f64..0.95, prop_oneof![1 => Just(0u64), 4 => 1u64..500]), c)
        .prop_filter("at least one present cluster", |v| v.iter().any(|&(_, n)| n > 0))
}

fn subject(i: usize, raw: &[(f64, u64)]) -> SubjectFeatures {
    let fa: Vec<Option<f64>> = raw.iter().map(|&(f, n)| (n > 0).then_some(f)).collect();
    let nos: Vec<u64> = raw.iter().map(|&(_, n)| n).collect();
    SubjectFeatures::from_measurements(format!("s{i}"), i % 2, &fa, &nos).unwrap()
}

fn arb_cohort() -> impl Strategy<Value = Cohort> {
    (2usize..12).prop_flat_map(|c| {
        prop::collection::vec(arb_subject(c), 4..16).prop_map(|rows| {
            let subjects: Vec<_> = rows.iter().enumerate().map(|(i, r)| subject(i, r)).collect();
            let split = (0..subjects.len()).map(|i| if i % 4 == 3 { Split::Test } else { Split::Train }).collect();
            Cohort::new(subjects, split).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pos_sums_to_one_and_absent_clusters_are_zero(raw in (1usize..40).prop_flat_map(arb_subject)) {
        let s = subject(0, &raw);
        let total: f64 = s.pos.iter().zip(&s.present).filter(|(_, &p)| p).map(|(v, _)| v).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        for (c, &(fa, n)) in raw.iter().enumerate() {
            prop_assert_eq!(s.present[c], n > 0);
            if n == 0 {
                prop_assert_eq!((s.fa[c], s.pos[c]), (0.0, 0.0));
            } else {
                prop_assert_eq!(s.fa[c], fa);
                prop_assert!(s.pos[c] > 0.0);
            }
        }
    }

    #[test]
    fn normalized_training_features_lie_in_unit_interval(cohort in arb_cohort()) {
        let (norm, _) = minmax_normalize(&cohort).unwrap();
        for i in norm.indices(Split::Train) {
            let s = &norm.subjects[i];
            prop_assert!(s.fa.iter().chain(&s.pos).all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&s.present, &cohort.subjects[i].present);
        }
    }

    #[test]
    fn statistics_ignore_test_subjects(cohort in arb_cohort(), scale in 2.0f64..50.0) {
        let before = NormStats::fit(&cohort).unwrap();
        let mut shifted = cohort.clone();
        for i in cohort.indices(Split::Test) {
            shifted.subjects[i].fa.iter_mut().for_each(|v| *v *= scale);
        }
        prop_assert_eq!(NormStats::fit(&shifted).unwrap(), before);
    }
}
