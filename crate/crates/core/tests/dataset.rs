use proptest::prelude::*;
use warca::dataset::{
    build_pair_index, load_features, make_splits, parse_csv, synth_gaussian, write_features, FeatureFormat,
    LabeledDataset,
};
use warca::eval::{run_protocol, Euclidean, ProtocolConfig};

fn dataset_strategy() -> impl Strategy<Value = LabeledDataset> {
    (1usize..6, 1usize..12).prop_flat_map(|(d, n)| {
        (
            prop::collection::vec(-1e3f64..1e3, n * d),
            prop::collection::vec(1u32..5, n),
        )
            .prop_map(move |(f, l)| LabeledDataset::new(f, l, d).unwrap())
    })
}

proptest! {
    #[test]
    fn csv_round_trip_is_exact(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_features(&ds, &path, FeatureFormat::Csv).unwrap();
        let back = load_features(&path, FeatureFormat::Csv, false, false).unwrap();
        prop_assert_eq!(back, ds);
    }

    #[test]
    fn binary_round_trip_keeps_single_precision(ds in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        write_features(&ds, &path, FeatureFormat::Binary).unwrap();
        let back = load_features(&path, FeatureFormat::Binary, false, false).unwrap();
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.d(), ds.d());
        for (a, b) in back.features().iter().zip(ds.features()) {
            prop_assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn pair_index_is_consistent(ds in dataset_strategy()) {
        let all: Vec<usize> = (0..ds.n()).collect();
        if let Ok(pairs) = build_pair_index(&ds, &all) {
            for &(i, j) in &pairs.same_pairs {
                prop_assert_ne!(i, j);
                prop_assert_eq!(ds.label(i), ds.label(j));
                prop_assert!(pairs.same_pairs.contains(&(j, i)));
                for &k in pairs.negatives_for(i) {
                    prop_assert_ne!(ds.label(k), ds.label(i));
                }
                let want = all.iter().filter(|&&k| ds.label(k) != ds.label(i)).count();
                prop_assert_eq!(pairs.negatives_for(i).len(), want);
            }
        }
    }

    #[test]
    fn l1_normalized_rows_sum_to_one(ds in dataset_strategy()) {
        let mut ds = LabeledDataset::new(
            ds.features().iter().map(|v| v.abs()).collect(),
            ds.labels().to_vec(),
            ds.d(),
        ).unwrap();
        ds.l1_normalize();
        for i in 0..ds.n() {
            let s: f64 = ds.row(i).iter().sum();
            prop_assert!(s == 0.0 || (s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn splits_partition_identities(q in 3u32..12, p in 1usize..3, seed in 0u64..100) {
        let ds = synth_gaussian(q as usize, 2, 2, 0, 0.0, seed).unwrap();
        let plan = make_splits(&ds, p, 3, seed).unwrap();
        for s in &plan.splits {
            prop_assert_eq!(s.train.len() + s.test.len(), ds.n());
            let mut ids: Vec<u32> = s.test.iter().map(|&i| ds.label(i)).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), p);
            for &t in &s.train {
                prop_assert!(!ids.contains(&ds.label(t)));
            }
        }
    }
}

#[test]
fn malformed_csv_reports_the_line() {
    let err = parse_csv("1,0.5,0.5\n2,0.1\n", false).unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
}

#[test]
fn nuisance_dimensions_degrade_euclidean_retrieval() {
    let pc = ProtocolConfig {
        p_test: 25,
        n_splits: 2,
        n_trials: 10,
        seed: 4,
    };
    let rank1 = |ds: &LabeledDataset| {
        run_protocol(ds, &pc, |_, _| Ok(Box::new(Euclidean)))
            .unwrap()
            .report
            .rank1
            .mean
    };
    let clean = rank1(&synth_gaussian(50, 8, 20, 100, 0.0, 3).unwrap());
    let noisy = rank1(&synth_gaussian(50, 8, 20, 100, 5.0, 3).unwrap());
    assert!(clean > noisy + 0.2, "clean {clean} noisy {noisy}");
}
