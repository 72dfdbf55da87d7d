//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The mechanism-study runs (criteria 4 and 5) train with lambda2=0.02, the
//! desk-scale empirical setting for the prototype-alignment coefficient; the
//! engine's defaults stay at the published values (criterion 8 checks them).

use std::panic::{catch_unwind, resume_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use precise_core::checkpoint::{self, CheckpointMeta, Loaded};
use precise_core::data::{gen_synthetic, stratified_indices, LabeledDataset, SubsetSpec};
use precise_core::explain::{class_average_distances, distance_report};
use precise_core::loss::{ae_loss, proto_loss_reserved, proto_loss_unreserved, weighted_ce};
use precise_core::metrics::evaluate;
use precise_core::model::{PreciseModel, PrototypeLayout};
use precise_core::rng::{mix, rng_from};
use precise_core::runner::{run_multiseed, run_one_seed, sweep_prototypes, ArchSpec, SeedOutcome};
use precise_core::scalar::Scalar;
use precise_core::tape::Tape;
use precise_core::train::TrainConfig;
use precise_core::ProtoMode;
use rand::Rng;

fn criterion<F: FnOnce()>(number: usize, name: &str, body: F) {
    let result = catch_unwind(AssertUnwindSafe(body));
    match result {
        Ok(()) => println!("ACCEPTANCE {number} {name}: PASS"),
        Err(e) => {
            println!("ACCEPTANCE {number} {name}: FAIL");
            resume_unwind(e);
        }
    }
}

/// The criterion-4/5 study data: 2-class 95:5, 190+10 train, 95+5 test, 16x16.
fn study_train() -> LabeledDataset {
    gen_synthetic(&[190, 10], 16, 7).unwrap()
}

fn study_test() -> LabeledDataset {
    gen_synthetic(&[95, 5], 16, mix(7, 0x7E57)).unwrap()
}

/// Desk-scale study config; lambda2 per the ledger note above.
fn study_cfg(mode: ProtoMode) -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 16,
        lambda2: 0.02,
        mode,
        num_seeds: 5,
        seed: 0,
        workers: 2,
        ..TrainConfig::default()
    }
}

fn guarded_dist(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s + 1e-12).sqrt()
}

// ── 1. gradient integrity ───────────────────────────────────────────

#[test]
fn criterion_1_gradient_integrity() {
    criterion(1, "gradient integrity", || {
        let started = Instant::now();
        let dir = tempfile::tempdir().unwrap();
        let output = Command::new(env!("CARGO_BIN_EXE_precise"))
            .args(["gradcheck", "--out", dir.path().to_str().unwrap()])
            .output()
            .expect("binary runs");
        let stdout = String::from_utf8_lossy(&output.stdout);
        assert!(
            output.status.success(),
            "cmd_gradcheck failed:\n{stdout}\n{}",
            String::from_utf8_lossy(&output.stderr)
        );
        let lines: Vec<&str> = stdout.lines().collect();
        let checks = lines.iter().filter(|l| l.starts_with("PASS ")).count();
        assert!(
            checks >= 30,
            "expected a full op suite, saw {checks} checks"
        );
        assert!(!stdout.contains("FAIL "), "{stdout}");
        assert!(stdout.contains("20 instances"), "{stdout}");
        let elapsed = started.elapsed();
        assert!(
            elapsed.as_secs() < 120,
            "gradcheck took {elapsed:?}, budget is 2 minutes"
        );
    });
}

// ── 2. loss oracles ─────────────────────────────────────────────────

#[test]
fn criterion_2_loss_oracles() {
    criterion(2, "loss oracles", || {
        let mut rng = rng_from(2024);
        // ae_loss vs double loop, n=5 pixels=6
        let (n, pixels) = (5usize, 6usize);
        let xv: Vec<f64> = (0..n * pixels)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let rv: Vec<f64> = (0..n * pixels)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let mut expect = 0.0;
        for i in 0..n {
            for p in 0..pixels {
                expect += (rv[i * pixels + p] - xv[i * pixels + p]).powi(2);
            }
        }
        expect /= n as f64;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xv, &[n, pixels], false).unwrap();
        let r = tape.leaf(rv, &[n, pixels], false).unwrap();
        let l = ae_loss(&mut tape, x, r).unwrap();
        assert!((tape.scalar_value(l) - expect).abs() < 1e-12);

        // weighted_ce vs double loop, n=6 N=3
        let (n, classes) = (6usize, 3usize);
        let mut pv = vec![0.0f64; n * classes];
        for i in 0..n {
            let raw: Vec<f64> = (0..classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            for (j, &v) in raw.iter().enumerate() {
                pv[i * classes + j] = v / s;
            }
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let weights = [1.0, 2.5, 0.5];
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            num += weights[y] * -(pv[i * classes + y].ln());
            den += weights[y];
        }
        let mut tape = Tape::<f64>::new();
        let probs = tape.leaf(pv, &[n, classes], false).unwrap();
        let l = weighted_ce(&mut tape, probs, &labels, &weights).unwrap();
        assert!((tape.scalar_value(l) - num / den).abs() < 1e-12);

        // prototype losses vs exhaustive enumeration: n=6, m=6, latent=3
        let layout = PrototypeLayout {
            per_class: 3,
            num_classes: 2,
        };
        let (n, m, latent) = (6usize, 6usize, 3usize);
        for labels in [vec![0, 1, 0, 1, 1, 0], vec![1usize; 6]] {
            let enc: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..latent).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let protos: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..latent).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();

            // oracle: reserved
            let mut o1 = 0.0;
            for (z, &y) in enc.iter().zip(&labels) {
                o1 += layout
                    .reserved(y)
                    .map(|k| guarded_dist(&protos[k], z))
                    .fold(f64::INFINITY, f64::min);
            }
            o1 /= n as f64;
            let mut o2 = 0.0;
            let mut contributing = 0usize;
            for class in 0..2 {
                let members: Vec<&Vec<f64>> = enc
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &y)| y == class)
                    .map(|(z, _)| z)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                for k in layout.reserved(class) {
                    o2 += members
                        .iter()
                        .map(|z| guarded_dist(&protos[k], z))
                        .fold(f64::INFINITY, f64::min);
                    contributing += 1;
                }
            }
            o2 /= contributing as f64;

            let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
            let mut tape = Tape::<f64>::new();
            let z = tape.leaf(flat(&enc), &[n, latent], false).unwrap();
            let p = tape.leaf(flat(&protos), &[m, latent], false).unwrap();
            let (t1, t2) = proto_loss_reserved(&mut tape, z, &labels, p, layout).unwrap();
            assert!(
                (tape.scalar_value(t1) - o1).abs() < 1e-12,
                "labels {labels:?}"
            );
            assert!(
                (tape.scalar_value(t2) - o2).abs() < 1e-12,
                "labels {labels:?}"
            );

            // oracle: unreserved on the same instance
            let u1: f64 = enc
                .iter()
                .map(|z| {
                    protos
                        .iter()
                        .map(|p| guarded_dist(p, z))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / n as f64;
            let u2: f64 = protos
                .iter()
                .map(|p| {
                    enc.iter()
                        .map(|z| guarded_dist(p, z))
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / m as f64;
            let (t1, t2) = proto_loss_unreserved(&mut tape, z, p).unwrap();
            assert!((tape.scalar_value(t1) - u1).abs() < 1e-12);
            assert!((tape.scalar_value(t2) - u2).abs() < 1e-12);
        }

        // class_average_distances vs double loop on a real model
        let ds = gen_synthetic(&[4, 2], 8, 9).unwrap();
        let arch = precise_core::Architecture {
            width: 8,
            height: 8,
            hidden: vec![8],
            latent_dim: 3,
            per_class_prototypes: 3,
            num_classes: 2,
            classifier_bias: true,
        };
        let model = PreciseModel::<f64>::init_with_data(arch, 1, &ds, None).unwrap();
        let avg = class_average_distances(&model, &ds, None).unwrap();
        let protos = &model.prototypes().values;
        for a in 0..2 {
            let members = ds.class_indices(a);
            for b in 0..2 {
                let mut total = 0.0;
                for &i in &members {
                    let z = model
                        .encode_values(&ds.sample_pixels::<f64>(i, None), 1)
                        .unwrap();
                    for k in 3 * b..3 * b + 3 {
                        total += guarded_dist(&protos[k * 3..(k + 1) * 3], &z);
                    }
                }
                let want = total / (members.len() * 3) as f64;
                let got = avg.rows[a].as_ref().unwrap()[b];
                assert!((got - want).abs() < 1e-12, "({a},{b}): {got} vs {want}");
            }
        }
    });
}

// ── 3. breakdown identity ───────────────────────────────────────────

fn identity_run<S: Scalar>(tolerance: f64) {
    let ds = gen_synthetic(&[30, 10], 8, 21).unwrap();
    let spec = ArchSpec {
        hidden: vec![16],
        latent_dim: 8,
        classifier_bias: true,
    };
    let cfg = TrainConfig {
        epochs: 10,
        batch_size: 8,
        num_seeds: 1,
        ..TrainConfig::default()
    };
    let out = run_one_seed::<S>(&ds, &ds, &cfg, &spec, 3).unwrap();
    assert!(!out.steps.is_empty());
    for (i, b) in out.steps.iter().enumerate() {
        let gap = b.identity_gap(cfg.lambda1, cfg.lambda2);
        assert!(gap < tolerance, "step {i}: relative gap {gap:e}");
        assert!(b.non_finite_term().is_none());
    }
}

#[test]
fn criterion_3_breakdown_identity() {
    criterion(3, "breakdown identity", || {
        identity_run::<f32>(1e-6);
        identity_run::<f64>(1e-9);
    });
}

// ── 4. reservation efficacy ─────────────────────────────────────────

/// Each class has at least one reserved prototype whose nearest training
/// encoding belongs to that class.
fn prototype_coverage<S: Scalar>(outcome: &SeedOutcome<S>, train_ds: &LabeledDataset) -> bool {
    let model = &outcome.model;
    let layout = model.arch.layout();
    let latent = model.arch.latent_dim;
    let samples: Vec<usize> = outcome.subset_indices.clone();
    let mut encodings = Vec::with_capacity(samples.len());
    let mut enc_labels = Vec::with_capacity(samples.len());
    for &i in &samples {
        let x = train_ds.sample_pixels::<S>(i, outcome.stats.as_ref());
        let z = model.encode_values(&x, 1).unwrap();
        encodings.push(z.iter().map(|&v| Scalar::to_f64(v)).collect::<Vec<f64>>());
        enc_labels.push(train_ds.samples[i].label);
    }
    let protos: Vec<f64> = model
        .prototypes()
        .values
        .iter()
        .map(|&v| Scalar::to_f64(v))
        .collect();
    (0..layout.num_classes).all(|class| {
        layout.reserved(class).any(|k| {
            let p = &protos[k * latent..(k + 1) * latent];
            let nearest = encodings
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    guarded_dist(p, a).partial_cmp(&guarded_dist(p, b)).unwrap()
                })
                .map(|(i, _)| i)
                .unwrap();
            enc_labels[nearest] == class
        })
    })
}

fn minority_mean(outcomes: &[SeedOutcome<f32>]) -> f64 {
    let accs: Vec<f64> = outcomes
        .iter()
        .map(|s| s.metrics.per_class_accuracy[1].expect("minority class present in test"))
        .collect();
    accs.iter().sum::<f64>() / accs.len() as f64
}

#[test]
fn criterion_4_reservation_efficacy() {
    criterion(4, "reservation efficacy", || {
        let started = Instant::now();
        let train_ds = study_train();
        let test_ds = study_test();
        let spec = ArchSpec::default();

        let reserved =
            run_multiseed::<f32>(&train_ds, &test_ds, &study_cfg(ProtoMode::Reserved), &spec)
                .unwrap();
        let unreserved = run_multiseed::<f32>(
            &train_ds,
            &test_ds,
            &study_cfg(ProtoMode::Unreserved),
            &spec,
        )
        .unwrap();

        // paired seeds see identical subsets
        for (a, b) in reserved.seeds.iter().zip(&unreserved.seeds) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.subset_indices, b.subset_indices);
        }

        let res_minority = minority_mean(&reserved.seeds);
        let unr_minority = minority_mean(&unreserved.seeds);
        assert!(
            res_minority >= unr_minority,
            "minority accuracy: reserved {res_minority} < unreserved {unr_minority}"
        );

        let covered = reserved
            .seeds
            .iter()
            .filter(|s| prototype_coverage(s, &train_ds))
            .count();
        assert!(
            covered >= 4,
            "prototype coverage in only {covered}/5 reserved seeds"
        );

        let elapsed = started.elapsed();
        assert!(
            elapsed.as_secs() < 600,
            "efficacy study took {elapsed:?}, budget is 10 minutes"
        );
        println!(
            "  reserved minority acc {res_minority:.1} vs unreserved {unr_minority:.1}; coverage {covered}/5; {elapsed:?}"
        );
    });
}

// ── 5. explanation faithfulness ─────────────────────────────────────

#[test]
fn criterion_5_explanation_faithfulness() {
    criterion(5, "explanation faithfulness", || {
        let train_ds = study_train();
        let test_ds = study_test();
        let spec = ArchSpec::default();
        let mut cfg = study_cfg(ProtoMode::Reserved);
        cfg.num_seeds = 1;
        let outcome = run_one_seed::<f32>(&train_ds, &test_ds, &cfg, &spec, 0).unwrap();
        let model = &outcome.model;
        let stats = outcome.stats;

        let report = distance_report(model, &test_ds, None, stats.as_ref()).unwrap();
        let mut rng = rng_from(555);
        let m = model.arch.prototype_count();
        for _ in 0..20 {
            let i = rng.random_range(0..test_ds.len());
            let x = test_ds.sample_pixels::<f32>(i, stats.as_ref());
            let fv = model.run_forward(&x, 1).unwrap();
            for k in 0..m {
                let reported = report.rows[i].distances[k];
                let consumed = Scalar::to_f64(fv.distances[k]);
                assert_eq!(
                    reported.to_bits(),
                    consumed.to_bits(),
                    "image {i} prototype {k}: report differs from classifier input"
                );
            }
        }

        assert!(
            outcome.metrics.accuracy >= 90.0,
            "study model accuracy {} below 90",
            outcome.metrics.accuracy
        );
        let averages = class_average_distances(model, &test_ds, stats.as_ref()).unwrap();
        assert!(
            averages.row_diagonally_dominant(),
            "class-average matrix not row-diagonally dominant: {:?}",
            averages.rows
        );
        println!(
            "  accuracy {:.1}; class-average matrix {:?}",
            outcome.metrics.accuracy, averages.rows
        );
    });
}

// ── 6. data-efficiency protocol ─────────────────────────────────────

#[test]
fn criterion_6_data_efficiency_protocol() {
    criterion(6, "data-efficiency protocol", || {
        let train_ds = study_train();
        let test_ds = study_test();
        let spec = ArchSpec::default();
        let fractions = [0.05, 0.25, 1.0];
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 16,
            num_seeds: 5,
            seed: 0,
            workers: 2,
            ..TrainConfig::default()
        };

        // ratio preservation at every fraction and seed
        for &fraction in &fractions {
            for i in 0..cfg.num_seeds {
                let idx = stratified_indices(
                    &train_ds,
                    &SubsetSpec {
                        fraction,
                        seed: cfg.seed + i as u64,
                    },
                )
                .unwrap();
                let mut counts = [0usize; 2];
                for &s in &idx {
                    counts[train_ds.samples[s].label] += 1;
                }
                for (j, &nj) in train_ds.class_counts.iter().enumerate() {
                    assert!(counts[j] >= 1, "class {j} emptied at fraction {fraction}");
                    assert!(
                        (counts[j] as f64 - fraction * nj as f64).abs() <= 1.0,
                        "fraction {fraction} class {j}: {} vs {}",
                        counts[j],
                        fraction * nj as f64
                    );
                }
            }
        }

        // per-seed runs so the 1.0-vs-0.05 comparison is paired
        let mut acc: Vec<Vec<f64>> = Vec::new();
        for &fraction in &fractions {
            let mut sub_cfg = cfg.clone();
            sub_cfg.subset_fraction = fraction;
            let out = run_multiseed::<f32>(&train_ds, &test_ds, &sub_cfg, &spec).unwrap();
            acc.push(out.seeds.iter().map(|s| s.metrics.accuracy).collect());
        }
        let wins = acc[2]
            .iter()
            .zip(&acc[0])
            .filter(|(full, small)| full >= small)
            .count();
        assert!(
            wins >= 4,
            "full-data accuracy beat 5% in only {wins}/5 paired seeds: {acc:?}"
        );
        println!(
            "  paired wins {wins}/5; acc@5%={:?} acc@100%={:?}",
            acc[0], acc[2]
        );
    });
}

// ── 7. determinism and persistence ──────────────────────────────────

#[test]
fn criterion_7_determinism_and_persistence() {
    criterion(7, "determinism and persistence", || {
        let train_ds = gen_synthetic(&[40, 12], 8, 13).unwrap();
        let test_ds = gen_synthetic(&[10, 4], 8, 113).unwrap();
        let spec = ArchSpec {
            hidden: vec![16],
            latent_dim: 8,
            classifier_bias: true,
        };
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            num_seeds: 1,
            ..TrainConfig::default()
        };
        let a = run_one_seed::<f32>(&train_ds, &test_ds, &cfg, &spec, 2).unwrap();
        let b = run_one_seed::<f32>(&train_ds, &test_ds, &cfg, &spec, 2).unwrap();
        let meta = |o: &SeedOutcome<f32>| CheckpointMeta {
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            mode: cfg.mode,
            train_seed: o.seed,
            norm: o.stats,
        };
        let bytes_a = checkpoint::to_bytes(&a.model, &meta(&a));
        let bytes_b = checkpoint::to_bytes(&b.model, &meta(&b));
        assert_eq!(
            bytes_a, bytes_b,
            "identical config+seed must give identical checkpoints"
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.ckpt");
        checkpoint::save(&path, &a.model, &meta(&a)).unwrap();
        match checkpoint::load(&path).unwrap() {
            Loaded::F32(model, loaded_meta) => {
                let metrics =
                    evaluate(&model, &test_ds, loaded_meta.norm.as_ref(), cfg.batch_size).unwrap();
                assert_eq!(metrics.accuracy.to_bits(), a.metrics.accuracy.to_bits());
                assert_eq!(metrics.macro_f1.to_bits(), a.metrics.macro_f1.to_bits());
                assert_eq!(metrics.confusion, a.metrics.confusion);
            }
            Loaded::F64(..) => panic!("expected an f32 checkpoint"),
        }
    });
}

// ── 8. hyperparameter fidelity ──────────────────────────────────────

#[test]
fn criterion_8_hyperparameter_fidelity() {
    criterion(8, "hyperparameter fidelity", || {
        let dir = tempfile::tempdir().unwrap();
        let output = Command::new(env!("CARGO_BIN_EXE_precise"))
            .args([
                "gradcheck",
                "--out",
                dir.path().to_str().unwrap(),
                "--instances",
                "1",
            ])
            .output()
            .expect("binary runs");
        assert!(output.status.success());
        let echo = std::fs::read_to_string(dir.path().join("effective-config.txt")).unwrap();
        for expected in [
            "lambda1=1\n",
            "lambda2=0.001\n",
            "lr=0.001\n",
            "weight-decay=0.0001\n",
            "d-values=1,2,3,4,5\n",
        ] {
            assert!(echo.contains(expected), "default echo missing {expected:?}");
        }

        // d in 1..=5 is actually sweepable, and the bank scales as d*N
        let train_ds = gen_synthetic(&[8, 4], 8, 5).unwrap();
        let spec = ArchSpec {
            hidden: vec![8],
            latent_dim: 4,
            classifier_bias: true,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            num_seeds: 1,
            ..TrainConfig::default()
        };
        let rows =
            sweep_prototypes::<f32>(&train_ds, &train_ds, &cfg, &spec, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(rows.len(), 5);
        for (d, _) in &rows {
            let mut c = cfg.clone();
            c.per_class_prototypes = *d;
            let out = run_one_seed::<f32>(&train_ds, &train_ds, &c, &spec, 0).unwrap();
            assert_eq!(out.model.prototypes().shape, vec![d * 2, 4]);
        }
        let _ = Path::new("unused");
    });
}
