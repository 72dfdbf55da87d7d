//! End-to-end pipeline integration: dataset export/load round trips,
//! checkpoint persistence through evaluation, continued training, and
//! property tests over the data-pipeline invariants.

use proptest::prelude::*;

use precise_core::checkpoint::{self, CheckpointMeta, Loaded};
use precise_core::data::{
    batches, gen_synthetic, stratified_indices, stratified_subset, LabeledDataset, SubsetSpec,
};
use precise_core::metrics::evaluate;
use precise_core::model::Architecture;
use precise_core::runner::{run_one_seed, ArchSpec};
use precise_core::tape::Tape;
use precise_core::train::{train, TrainConfig};
use precise_core::ProtoMode;

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 8,
        num_seeds: 1,
        ..TrainConfig::default()
    }
}

fn tiny_spec() -> ArchSpec {
    ArchSpec {
        hidden: vec![12],
        latent_dim: 6,
        classifier_bias: true,
    }
}

#[test]
fn export_then_load_round_trips_to_quantization() {
    let ds = gen_synthetic(&[8, 5], 8, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = ds.export(dir.path()).unwrap();
    let loaded = LabeledDataset::load_manifest(dir.path(), &manifest).unwrap();
    assert_eq!(loaded.class_counts, ds.class_counts);
    assert_eq!((loaded.width, loaded.height), (ds.width, ds.height));
    for (a, b) in ds.samples.iter().zip(&loaded.samples) {
        assert_eq!(a.label, b.label);
        for (&x, &y) in a.pixels.iter().zip(&b.pixels) {
            let quantized = (x.clamp(0.0, 1.0) * 255.0 + 0.5).floor() / 255.0;
            assert!((quantized - y).abs() < 1e-12);
        }
    }
}

#[test]
fn large_imbalanced_manifest_counts() {
    // 1349 + 3883 rows; rows may share image files
    let dir = tempfile::tempdir().unwrap();
    precise_core::pgm::write_pgm(&dir.path().join("normal.pgm"), 4, 4, &[40u8; 16]).unwrap();
    precise_core::pgm::write_pgm(&dir.path().join("pneu.pgm"), 4, 4, &[200u8; 16]).unwrap();
    let mut manifest = String::from("path,label\n");
    for _ in 0..1349 {
        manifest.push_str("normal.pgm,0\n");
    }
    for _ in 0..3883 {
        manifest.push_str("pneu.pgm,1\n");
    }
    let mpath = dir.path().join("manifest.csv");
    std::fs::write(&mpath, manifest).unwrap();
    let ds = LabeledDataset::load_manifest(dir.path(), &mpath).unwrap();
    assert_eq!(ds.class_counts, vec![1349, 3883]);
    assert_eq!(ds.len(), 5232);
}

#[test]
fn manifest_with_absent_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mpath = dir.path().join("manifest.csv");
    std::fs::write(&mpath, "path,label\nghost_image.pgm,0\n").unwrap();
    let err = LabeledDataset::load_manifest(dir.path(), &mpath).unwrap_err();
    assert!(err.to_string().contains("ghost_image.pgm"));
}

#[test]
fn checkpoint_reload_reproduces_evaluation_exactly() {
    let train_ds = gen_synthetic(&[20, 8], 8, 4).unwrap();
    let test_ds = gen_synthetic(&[10, 4], 8, 104).unwrap();
    let cfg = quick_cfg();
    let out = run_one_seed::<f32>(&train_ds, &test_ds, &cfg, &tiny_spec(), 5).unwrap();
    let meta = CheckpointMeta {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        mode: ProtoMode::Reserved,
        train_seed: 5,
        norm: out.stats,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&path, &out.model, &meta).unwrap();
    match checkpoint::load(&path).unwrap() {
        Loaded::F32(model, loaded_meta) => {
            let metrics =
                evaluate(&model, &test_ds, loaded_meta.norm.as_ref(), cfg.batch_size).unwrap();
            assert_eq!(metrics.accuracy.to_bits(), out.metrics.accuracy.to_bits());
            assert_eq!(metrics.macro_f1.to_bits(), out.metrics.macro_f1.to_bits());
            assert_eq!(metrics.confusion, out.metrics.confusion);
        }
        Loaded::F64(..) => panic!("expected f32 checkpoint"),
    }
}

#[test]
fn continued_training_resumes_from_the_given_model() {
    let ds = gen_synthetic(&[14, 6], 8, 6).unwrap();
    let arch = Architecture {
        width: 8,
        height: 8,
        hidden: vec![12],
        latent_dim: 6,
        per_class_prototypes: 2,
        num_classes: 2,
        classifier_bias: true,
    };
    let cfg = quick_cfg();
    let first = train::<f64>(&ds, None, &cfg, &arch, 1, None).unwrap();
    let resumed = train::<f64>(&ds, None, &cfg, &arch, 1, Some(first.model.clone())).unwrap();
    // resuming from a trained model is not a re-init
    assert_ne!(
        resumed.model.params[0].values, first.model.params[0].values,
        "continued training should keep optimizing"
    );
    let zero_more = train::<f64>(
        &ds,
        None,
        &TrainConfig { epochs: 0, ..cfg },
        &arch,
        1,
        Some(first.model.clone()),
    )
    .unwrap();
    for (a, b) in zero_more.model.params.iter().zip(&first.model.params) {
        assert_eq!(a.values, b.values);
    }
}

#[test]
fn unreserved_training_biases_prototypes_toward_the_majority() {
    // 95:5 imbalance: with the dataset-level (unreserved) loss, nothing
    // guarantees the minority a prototype, so across seeds the majority
    // cluster ends up at least as close to the bank as the minority.
    let ds = gen_synthetic(&[95, 5], 8, 30).unwrap();
    let spec = ArchSpec {
        hidden: vec![16],
        latent_dim: 8,
        classifier_bias: true,
    };
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        lambda2: 0.02,
        mode: ProtoMode::Unreserved,
        num_seeds: 1,
        ..TrainConfig::default()
    };
    let mut majority_gap = 0.0;
    for seed in 0..3u64 {
        let out = run_one_seed::<f32>(&ds, &ds, &cfg, &spec, seed).unwrap();
        let model = &out.model;
        let latent = model.arch.latent_dim;
        let protos: Vec<f64> = model
            .prototypes()
            .values
            .iter()
            .map(|&v| v as f64)
            .collect();
        let nearest_mean = |class: usize| -> f64 {
            let members = ds.class_indices(class);
            let mut total = 0.0;
            for &i in &members {
                let x = ds.sample_pixels::<f32>(i, out.stats.as_ref());
                let z: Vec<f64> = model
                    .encode_values(&x, 1)
                    .unwrap()
                    .iter()
                    .map(|&v| v as f64)
                    .collect();
                let best = (0..model.arch.prototype_count())
                    .map(|k| {
                        let p = &protos[k * latent..(k + 1) * latent];
                        let s: f64 = p.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum();
                        (s + 1e-12).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min);
                total += best;
            }
            total / members.len() as f64
        };
        majority_gap += nearest_mean(1) - nearest_mean(0);
    }
    assert!(
        majority_gap / 3.0 >= 0.0,
        "minority ended up better covered than the majority: mean gap {}",
        majority_gap / 3.0
    );
}

#[test]
fn validation_split_is_scored_each_epoch() {
    let ds = gen_synthetic(&[14, 6], 8, 7).unwrap();
    let val = gen_synthetic(&[5, 3], 8, 107).unwrap();
    let arch = tiny_spec().build(&ds, 2);
    let out = train::<f32>(&ds, Some(&val), &quick_cfg(), &arch, 0, None).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|r| r.val_accuracy.is_some()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn subset_preserves_ratio_within_one_sample(
        n0 in 3usize..60,
        n1 in 1usize..20,
        fraction in 0.01f64..1.0,
        seed in 0u64..1000,
    ) {
        let ds = gen_synthetic(&[n0, n1], 8, seed).unwrap();
        let sub = stratified_subset(&ds, &SubsetSpec { fraction, seed }).unwrap();
        prop_assert_eq!(sub.num_classes, 2);
        for (j, &nj) in ds.class_counts.iter().enumerate() {
            let got = sub.class_counts[j] as f64;
            prop_assert!(sub.class_counts[j] >= 1, "class {} emptied", j);
            prop_assert!(
                (got - fraction * nj as f64).abs() <= 1.0,
                "class {}: {} vs target {}",
                j, got, fraction * nj as f64
            );
        }
    }

    #[test]
    fn subset_indices_are_sorted_unique_and_deterministic(
        fraction in 0.05f64..1.0,
        seed in 0u64..500,
    ) {
        let ds = gen_synthetic(&[25, 9], 8, 11).unwrap();
        let a = stratified_indices(&ds, &SubsetSpec { fraction, seed }).unwrap();
        let b = stratified_indices(&ds, &SubsetSpec { fraction, seed }).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn epoch_batches_partition_the_dataset(
        n0 in 1usize..25,
        n1 in 1usize..25,
        batch_size in 1usize..12,
        seed in 0u64..200,
        epoch in 0u64..4,
    ) {
        let ds = gen_synthetic(&[n0, n1], 8, 17).unwrap();
        let mut label_counts = vec![0usize; 2];
        let mut total = 0usize;
        let mut sizes = Vec::new();
        for b in batches::<f64>(&ds, batch_size, seed, epoch, true, None) {
            for &l in &b.labels {
                label_counts[l] += 1;
            }
            total += b.len();
            sizes.push(b.len());
        }
        prop_assert_eq!(total, ds.len());
        prop_assert_eq!(label_counts, ds.class_counts.clone());
        // every batch full except possibly the last
        for (i, &s) in sizes.iter().enumerate() {
            if i + 1 < sizes.len() {
                prop_assert_eq!(s, batch_size);
            } else {
                prop_assert!(s >= 1 && s <= batch_size);
            }
        }
    }

    #[test]
    fn log_softmax_rows_always_normalize(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in 0u64..300,
    ) {
        let mut rng = precise_core::rng::rng_from(seed);
        use rand::Rng;
        let values: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(values, &[rows, cols], false).unwrap();
        let l = tape.log_softmax(a).unwrap();
        for i in 0..rows {
            let s: f64 = tape.values(l)[i * cols..(i + 1) * cols].iter().map(|v| v.exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
