mod common;

use std::time::Instant;

use tiergan::checkpoint::{Checkpoint, CheckpointStatus};
use tiergan::loss::GLossVariant;
use tiergan::losslog::format_loss_csv;
use tiergan::model::{build_discriminator, build_generator, GeneratorVariant, Phase, Stage};
use tiergan::noise::{sample_noise, seeded_rng};
use tiergan::train::{train_gan, GanTrainer, TrainConfig, TrainingSet};
use tiergan::{Error, Tensor};

fn specs(variant: GeneratorVariant) -> (tiergan::model::ModelSpec, tiergan::model::ModelSpec) {
    (
        build_generator(Stage::First, variant, (16, 16), 0.2).unwrap(),
        build_discriminator((16, 16), 0.2).unwrap(),
    )
}

fn constant_set(n: usize, v: f32) -> TrainingSet {
    TrainingSet::unconditional(vec![Tensor::full([1, 16, 16], v); n])
}

fn cfg(epochs: u32, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        log_every: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_half_target_converges() {
    let t0 = Instant::now();
    let (g, d) = specs(GeneratorVariant::LatentUpsample);
    // 16 images, batch 8: two steps per epoch, 500 steps.
    let out = train_gan(g, d, &constant_set(16, 0.5), cfg(250, 3)).unwrap();
    assert_eq!(out.history.len(), 500);
    assert!(out
        .history
        .iter()
        .all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()));
    let mut t = out.trainer;
    let z = sample_noise(t.noise_spec().unwrap(), 64, &mut seeded_rng(77)).unwrap();
    let mean = t.generator.forward(&z, Phase::Infer).unwrap().mean();
    assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
    assert!(t0.elapsed().as_secs() < 120);
}

#[test]
fn seeded_runs_are_bit_identical() {
    let data = TrainingSet::unconditional((0..10).map(|i| common::painting(i, 16, 16)).collect());
    let run = || {
        let (g, d) = specs(GeneratorVariant::LatentUpsample);
        let out = train_gan(g, d, &data, cfg(3, 42)).unwrap();
        (
            format_loss_csv(&out.history),
            out.trainer
                .checkpoint(CheckpointStatus::Complete)
                .to_bytes(),
        )
    };
    let (a_csv, a_ck) = run();
    let (b_csv, b_ck) = run();
    assert_eq!(a_csv, b_csv);
    assert_eq!(a_ck, b_ck);
    // 10 samples, batch 8: the partial batch is dropped.
    assert_eq!(a_csv.lines().count(), 1 + 3);

    let (g, d) = specs(GeneratorVariant::LatentUpsample);
    let other = train_gan(g, d, &data, cfg(3, 43)).unwrap();
    assert_ne!(format_loss_csv(&other.history), a_csv);
}

#[test]
fn checkpoint_resume_matches_uninterrupted() {
    let data =
        TrainingSet::unconditional((0..16).map(|i| common::painting(100 + i, 16, 16)).collect());
    let (g, d) = specs(GeneratorVariant::LatentUpsample);
    let full = train_gan(g.clone(), d.clone(), &data, cfg(4, 9)).unwrap();

    let mut first = GanTrainer::new(g.clone(), d.clone(), cfg(4, 9), false).unwrap();
    let mut history = Vec::new();
    for _ in 0..2 {
        first.train_epoch(&data, &mut |r| history.push(r)).unwrap();
    }
    let bytes = first.checkpoint(CheckpointStatus::InProgress).to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes(), bytes);
    let mut resumed = GanTrainer::from_checkpoint(g, d, cfg(4, 9), false, &ck).unwrap();
    assert_eq!((resumed.epoch(), resumed.step()), (2, 4));
    while resumed.epoch() < 4 {
        resumed
            .train_epoch(&data, &mut |r| history.push(r))
            .unwrap();
    }
    assert_eq!(history, full.history);
    assert_eq!(
        resumed.checkpoint(CheckpointStatus::Complete).to_bytes(),
        full.trainer
            .checkpoint(CheckpointStatus::Complete)
            .to_bytes()
    );
}

#[test]
fn checkpoint_rejects_other_architecture() {
    let (g, d) = specs(GeneratorVariant::LatentUpsample);
    let t = GanTrainer::new(g, d, cfg(1, 0), false).unwrap();
    let ck = t.checkpoint(CheckpointStatus::InProgress);
    let (g2, d2) = specs(GeneratorVariant::DenseNoise);
    assert!(matches!(
        GanTrainer::from_checkpoint(g2, d2, cfg(1, 0), false, &ck),
        Err(Error::CheckpointDigest { .. })
    ));
}

#[test]
fn discriminator_step_leaves_generator_untouched() {
    let data = constant_set(8, 0.25);
    let (g, d) = specs(GeneratorVariant::LatentUpsample);
    let mut t = GanTrainer::new(g, d, cfg(1, 1), false).unwrap();
    let before = t.generator.clone();
    let d_before = t.discriminator.clone();
    let real = Tensor::stack(&data.targets.iter().collect::<Vec<_>>()).unwrap();
    t.d_train_step(&real, None).unwrap();
    assert_eq!(t.generator, before);
    assert_ne!(t.discriminator, d_before);

    let d_after = t.discriminator.clone();
    t.g_train_step(None, 8).unwrap();
    assert_eq!(t.discriminator.params(), d_after.params());
    assert_ne!(t.generator.params(), before.params());
}

#[test]
fn saturating_variant_trains() {
    let (g, d) = specs(GeneratorVariant::DenseNoise);
    let mut c = cfg(2, 5);
    c.loss.g_loss_variant = GLossVariant::Saturating;
    let out = train_gan(g, d, &constant_set(8, 0.7), c).unwrap();
    // The saturating objective ln(1 - D) is negative.
    assert!(out.history.iter().all(|r| r.g_loss < 0.0 && r.d_loss > 0.0));
}

#[test]
fn refinement_stage_trains_on_pairs() {
    let targets: Vec<_> = (0..8).map(|i| common::painting(i, 16, 16)).collect();
    let inputs: Vec<_> = targets
        .iter()
        .map(|t| tiergan::tiers::degrade(t, 4).unwrap())
        .collect();
    let g = build_generator(Stage::Refine, GeneratorVariant::default(), (16, 16), 0.2).unwrap();
    let d = build_discriminator((16, 16), 0.2).unwrap();
    let out = train_gan(
        g.clone(),
        d.clone(),
        &TrainingSet::paired(inputs, targets.clone()),
        cfg(2, 0),
    )
    .unwrap();
    assert_eq!(out.history.len(), 2);
    // A noise-driven trainer refuses paired data and vice versa.
    let mut t = GanTrainer::new(g, d, cfg(1, 0), true).unwrap();
    assert!(t
        .train_epoch(&TrainingSet::unconditional(targets), &mut |_| {})
        .is_err());
}
