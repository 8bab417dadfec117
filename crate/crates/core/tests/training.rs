use warca::dataset::{build_pair_index, synth_gaussian};
use warca::eval::condition_number;
use warca::kernel::{train_kernel, KernelSpec};
use warca::linear::{init_model, objective, train, train_from, Regularizer, TrainConfig};
use warca::Error;

fn small_config() -> TrainConfig {
    TrainConfig {
        eta: 0.01,
        batch_size: 64,
        iterations: 300,
        d_out: 8,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn training_lowers_the_exact_loss() {
    let ds = synth_gaussian(10, 6, 8, 8, 1.0, 1).unwrap();
    let all: Vec<usize> = (0..ds.n()).collect();
    let pairs = build_pair_index(&ds, &all).unwrap();
    let cfg = small_config();
    let init = init_model(ds.d(), cfg.d_out, 17).unwrap();
    let (_, before) = objective(&init, &ds, &pairs, &cfg.loss, cfg.regularizer);
    let out = train_from(&ds, &all, &cfg, init, &mut |_, _, _| {}).unwrap();
    let (_, after) = objective(&out.model, &ds, &pairs, &cfg.loss, cfg.regularizer);
    assert!(after < 0.5 * before, "before {before} after {after}");
}

#[test]
fn strong_aon_keeps_the_projection_well_conditioned() {
    let ds = synth_gaussian(10, 6, 8, 8, 1.0, 1).unwrap();
    let all: Vec<usize> = (0..ds.n()).collect();
    let mut cfg = small_config();
    cfg.loss.lambda = 1.0;
    let out = train(&ds, &all, &cfg).unwrap();
    assert!(condition_number(&out.model).unwrap() <= 10.0);
}

#[test]
fn training_is_reproducible_and_thread_count_independent() {
    let ds = synth_gaussian(12, 5, 6, 6, 1.0, 2).unwrap();
    let all: Vec<usize> = (0..ds.n()).collect();
    let mut cfg = small_config();
    cfg.iterations = 50;
    cfg.regularizer = Regularizer::Frobenius;
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&ds, &all, &cfg).unwrap().model)
    };
    let a = run(1);
    assert_eq!(a, run(4));
    assert_eq!(a, run(1));

    let spec = KernelSpec::rbf(1.0);
    let kernel_run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train_kernel(&ds, &all, &spec, &cfg).unwrap().model)
    };
    assert_eq!(kernel_run(1).a(), kernel_run(4).a());
}

#[test]
fn separated_classes_stop_early() {
    // tight, far-apart clusters: no triplet violates the margin
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3u32 {
        for s in 0..4 {
            features.extend([100.0 * c as f64 + 0.01 * s as f64, 0.01 * s as f64]);
            labels.push(c + 1);
        }
    }
    let ds = warca::LabeledDataset::new(features, labels, 2).unwrap();
    let all: Vec<usize> = (0..ds.n()).collect();
    let mut cfg = small_config();
    cfg.d_out = 2;
    cfg.loss.lambda = 0.0;
    let out = train(&ds, &all, &cfg).unwrap();
    assert!(out.converged_early);
    assert!(out.iterations_run < cfg.iterations);
}

#[test]
fn kernel_training_respects_the_sample_cap() {
    let ds = synth_gaussian(4, 5, 3, 0, 0.0, 1).unwrap();
    let all: Vec<usize> = (0..ds.n()).collect();
    let cfg = TrainConfig {
        kernel_cap: 10,
        d_out: 2,
        ..small_config()
    };
    let err = train_kernel(&ds, &all, &KernelSpec::linear(), &cfg).unwrap_err();
    assert!(matches!(err, Error::Resource(_)));
}
