use std::path::Path;

use hit_core::checkpoint::Checkpoint;
use hit_core::config::TrainConfig;
use hit_core::error::HitError;
use hit_core::model::init_params;
use hit_core::seed::rng_for;
use hit_core::shapes::{generate_dataset, sample_queries, table};
use hit_core::trainer::{build_dataset, train, Trainer};

fn tiny(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        max_steps: 6,
        batch_size: 2,
        num_shapes: 4,
        resolution: 4,
        latent_dim: 8,
        parts_per_level: vec![2, 4],
        planes: 6,
        queries_per_shape: 64,
        points_per_shape: 64,
        guide_samples: 16,
        checkpoint_every: 3,
        ..TrainConfig::desk()
    }
}

fn bits(c: &Checkpoint) -> Vec<u64> {
    c.params
        .tensors()
        .iter()
        .chain(&c.adam.m)
        .chain(&c.adam.v)
        .flat_map(|t| t.data().iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn dataset_is_a_function_of_the_seed() {
    let a = generate_dataset(10, &["table".into(), "dumbbell".into()], 3).unwrap();
    let b = generate_dataset(10, &["table".into(), "dumbbell".into()], 3).unwrap();
    let c = generate_dataset(10, &["table".into(), "dumbbell".into()], 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let cfg = tiny(1);
    let d1 = build_dataset(&cfg).unwrap();
    let d2 = build_dataset(&cfg).unwrap();
    for (x, y) in d1.iter().zip(&d2) {
        assert_eq!(x.shape, y.shape);
        assert_eq!(x.cloud, y.cloud);
    }
}

#[test]
fn four_leg_table_carries_five_labels() {
    let t = table(4, &mut rng_for(7, &[]));
    assert_eq!(t.labels(), vec![0, 1, 2, 3, 4]);
}

#[test]
fn queries_split_evenly_between_uniform_and_near_surface() {
    let t = table(4, &mut rng_for(2, &[]));
    let q = sample_queries(&t, 2048, 5, true);
    assert_eq!(q.len(), 2048);
    let uniform_only = sample_queries(&t, 2048, 5, false);
    let first_half = |b: &hit_core::shapes::QueryBatch| b.points[..1024].to_vec();
    assert_eq!(first_half(&q), first_half(&uniform_only)[..1024]);
    let near = |b: &hit_core::shapes::QueryBatch, r: std::ops::Range<usize>| {
        b.gt_occupancy[r].iter().filter(|&&o| o > 0.5).count()
    };
    // near-surface samples hit the interior far more often than uniform ones
    assert!(near(&q, 1024..2048) > 2 * near(&q, 0..1024));
}

#[test]
fn published_and_desk_defaults() {
    let p = TrainConfig::published();
    assert_eq!((p.batch_size, p.learning_rate, p.points_per_shape), (32, 1e-4, 2048));
    assert_eq!(p.parts_per_level, vec![4, 8, 16, 32]);
    assert_eq!((p.resolution, p.latent_dim, p.planes), (32, 64, 32));
    let d = TrainConfig::desk();
    assert_eq!(d.parts_per_level, vec![2, 4, 8]);
    assert_eq!((d.resolution, d.latent_dim, d.planes, d.max_steps), (8, 32, 8, 2000));
    assert_eq!(TrainConfig::from_toml_str("").unwrap(), d);
    assert!(TrainConfig::from_toml_str("no_such_key = 1").is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(2);
    let mut t = Trainer::new(cfg.clone(), build_dataset(&cfg).unwrap()).unwrap();
    t.step().unwrap();
    let c = t.checkpoint();
    let path = dir.path().join("c.bin");
    c.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, c);
    assert_eq!(bits(&back), bits(&c));
    assert_eq!(back.step, 1);
}

#[test]
fn mismatched_checkpoint_names_the_tensor() {
    let cfg = tiny(3);
    let other = TrainConfig {
        latent_dim: 6,
        ..cfg.clone()
    };
    let c = Checkpoint {
        step: 0,
        params: init_params(&other.model(), 1).unwrap(),
        adam: hit_core::params::Adam::new(other.adam(), &init_params(&other.model(), 1).unwrap()),
        config: other,
    };
    let err = c.check_against(&cfg).unwrap_err();
    assert!(matches!(err, HitError::Checkpoint(_)));
    let msg = err.to_string();
    assert!(msg.contains('`'), "{msg}");
    assert!(msg.contains("encoder."), "{msg}");
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, b"HITCKPT 1\nstep x\n").unwrap();
    assert!(Checkpoint::load(&path).is_err());
    assert!(Checkpoint::load(Path::new("/nonexistent/ckpt.bin")).is_err());
}

#[test]
fn same_seed_gives_identical_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train(tiny(4), a.path(), None, |_| {}).unwrap();
    let rb = train(tiny(4), b.path(), None, |_| {}).unwrap();
    assert_eq!(ra.records, rb.records);
    let ca = Checkpoint::load(&ra.final_checkpoint).unwrap();
    let cb = Checkpoint::load(&rb.final_checkpoint).unwrap();
    assert_eq!(bits(&ca), bits(&cb));
    assert_eq!(
        std::fs::read_to_string(&ra.metrics).unwrap(),
        std::fs::read_to_string(&rb.metrics).unwrap()
    );
}

#[test]
fn resume_matches_the_uninterrupted_run() {
    let full_dir = tempfile::tempdir().unwrap();
    let full = train(tiny(5), full_dir.path(), None, |_| {}).unwrap();
    let mid = Checkpoint::load(full_dir.path().join("ckpt_000003.bin")).unwrap();
    assert_eq!(mid.step, 3);
    let resumed_dir = tempfile::tempdir().unwrap();
    let resumed = train(tiny(5), resumed_dir.path(), Some(mid), |_| {}).unwrap();
    assert_eq!(resumed.records, full.records[3..]);
    let a = Checkpoint::load(&full.final_checkpoint).unwrap();
    let b = Checkpoint::load(&resumed.final_checkpoint).unwrap();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn training_lowers_the_loss() {
    let cfg = TrainConfig {
        max_steps: 40,
        learning_rate: 3e-3,
        ..tiny(6)
    };
    let mut t = Trainer::new(cfg.clone(), build_dataset(&cfg).unwrap()).unwrap();
    let before = t.validation_loss(4, 9).unwrap();
    t.run_until(40, |_, _| Ok(())).unwrap();
    let after = t.validation_loss(4, 9).unwrap();
    assert!(after < before, "{before} -> {after}");
}
