//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tiergan::cascade::{
    generate_cascade, stage_dir, train_stage, train_tier_cascade, CascadeConfig, CHECKPOINT_FILE,
    LOSSES_FILE,
};
use tiergan::checkpoint::{load_checkpoint, save_checkpoint};
use tiergan::config::RunConfig;
use tiergan::dataset::preprocess;
use tiergan::gradcheck::{run_suite, CheckOptions};
use tiergan::image::{decode_pnm, denormalize, encode_pnm};
use tiergan::kernels::{conv2d, conv2d_transpose, ConvGeometry};
use tiergan::loss::{bce, value_function};
use tiergan::losslog::read_loss_csv;
use tiergan::model::{build_discriminator, build_generator, GeneratorVariant, Model, Phase, Stage};
use tiergan::noise::{sample_noise, seeded_rng};
use tiergan::optim::{AdamConfig, AdamState};
use tiergan::tiers::{build_tier_datasets, detail_energy, is_block_constant, TierDataset};
use tiergan::train::{train_gan, GanTrainer, TrainConfig, TrainingSet};
use tiergan::Tensor;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t0: Instant, limit: Duration) -> Result<(), String> {
    let e = t0.elapsed();
    ensure(e < limit, || {
        format!("took {:.1}s, limit {}s", e.as_secs_f64(), limit.as_secs())
    })
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let report = run_suite(&CheckOptions::default()).map_err(|e| e.to_string())?;
    within(t0, Duration::from_secs(60))?;
    let kinds = report.by_kind();
    for needed in [
        "dense",
        "conv2d",
        "conv2d_transpose",
        "batchnorm",
        "leaky_relu",
        "sigmoid",
        "bce",
        "generator",
        "discriminator",
    ] {
        ensure(kinds.iter().any(|(k, _)| k == needed), || {
            format!("no {needed} case")
        })?;
    }
    ensure(report.passed(), || report.render())?;
    let worst = kinds.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(format!(
        "{} cases, worst rel err {worst:.2e}, {:.1}s",
        report.cases.len(),
        t0.elapsed().as_secs_f64()
    ))
}

fn random_geometry(rng: &mut ChaCha8Rng) -> ConvGeometry {
    ConvGeometry {
        kernel: (rng.random_range(1..=5), rng.random_range(1..=5)),
        stride: (rng.random_range(1..=3), rng.random_range(1..=3)),
        padding: (rng.random_range(0..=2), rng.random_range(0..=2)),
        in_channels: rng.random_range(1..=3),
        out_channels: rng.random_range(1..=3),
    }
}

fn conv_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_fwd: f64 = 0.0;
    let mut checked = 0;
    while checked < 200 {
        let g = random_geometry(&mut rng);
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        if g.conv_output(h, w).is_err() {
            continue;
        }
        let n = rng.random_range(1..=2);
        let x = common::random_tensor(&mut rng, &[n, g.in_channels, h, w]);
        let k = common::random_tensor(
            &mut rng,
            &[g.out_channels, g.in_channels, g.kernel.0, g.kernel.1],
        );
        let b = common::random_tensor(&mut rng, &[g.out_channels]);
        let fast = conv2d(&x.cast::<f32>(), &k.cast(), &b.cast(), &g).map_err(|e| e.to_string())?;
        let err = common::max_rel_diff(&fast.cast(), &common::naive_conv2d(&x, &k, &b, &g));
        ensure(err < 1e-5, || {
            format!("{g:?} on {h}x{w}: rel err {err:.2e}")
        })?;
        worst_fwd = worst_fwd.max(err);
        checked += 1;
    }

    // Sizes are built backwards from the conv output so the transpose tiles
    // the input exactly.
    let mut worst_adj: f64 = 0.0;
    let mut checked_adj = 0;
    while checked_adj < 200 {
        let g = random_geometry(&mut rng);
        let (oh, ow) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let h = ((oh - 1) * g.stride.0 + g.kernel.0) as isize - 2 * g.padding.0 as isize;
        let w = ((ow - 1) * g.stride.1 + g.kernel.1) as isize - 2 * g.padding.1 as isize;
        if !(1..=12).contains(&h) || !(1..=12).contains(&w) {
            continue;
        }
        let (h, w) = (h as usize, w as usize);
        if g.conv_output(h, w).ok() != Some((oh, ow)) {
            continue;
        }
        let t = ConvGeometry {
            in_channels: g.out_channels,
            out_channels: g.in_channels,
            ..g
        };
        let x = common::random_tensor(&mut rng, &[1, g.in_channels, h, w]);
        let y = common::random_tensor(&mut rng, &[1, g.out_channels, oh, ow]);
        let k = common::random_tensor(
            &mut rng,
            &[g.out_channels, g.in_channels, g.kernel.0, g.kernel.1],
        );
        let cx = conv2d(&x, &k, &Tensor::zeros([g.out_channels]), &g).map_err(|e| e.to_string())?;
        let ty = conv2d_transpose(&y, &k, &Tensor::zeros([g.in_channels]), &t)
            .map_err(|e| e.to_string())?;
        let (lhs, rhs) = (cx.dot(&y).unwrap(), x.dot(&ty).unwrap());
        let err = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0);
        ensure(err < 1e-4, || {
            format!("{g:?}: <conv x, y> {lhs} vs <x, convT y> {rhs}")
        })?;
        worst_adj = worst_adj.max(err);
        checked_adj += 1;
    }
    Ok(format!(
        "200 forward geometries, worst {worst_fwd:.2e}; 200 adjoint pairs, worst {worst_adj:.2e}"
    ))
}

fn loss_anchors() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let half = Tensor::<f64>::full([8, 1], 0.5);
    let bce_real = bce(&half, &Tensor::ones([8, 1]), 1e-7).unwrap();
    let bce_fake = bce(&half, &Tensor::zeros([8, 1]), 1e-7).unwrap();
    ensure((bce_real - ln2).abs() <= 1e-6, || {
        format!("BCE(0.5, 1) = {bce_real}")
    })?;
    ensure((bce_fake - ln2).abs() <= 1e-6, || {
        format!("BCE(0.5, 0) = {bce_fake}")
    })?;

    // A zeroed discriminator outputs sigmoid(0) = 1/2 for every input.
    let (g, d) = (
        build_generator(Stage::First, GeneratorVariant::default(), (16, 16), 0.2).unwrap(),
        build_discriminator((16, 16), 0.2).unwrap(),
    );
    let mut t = GanTrainer::new(g, d.clone(), TrainConfig::default(), false).unwrap();
    t.discriminator = Model::zeroed(d);
    let real = Tensor::stack(
        &(0..4)
            .map(|i| common::painting(i, 16, 16))
            .collect::<Vec<_>>()
            .iter()
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let z = t.generator_input(None, 4).unwrap();
    let fake = t.generate(&z).unwrap();
    let d_real = t.discriminator.forward(&real, Phase::Infer).unwrap();
    ensure(d_real.data().iter().all(|&p| p == 0.5), || {
        "zeroed D is not 1/2".into()
    })?;
    let d_loss = t.discriminator_loss(&real, &fake).unwrap() as f64;
    ensure((d_loss - 2.0 * ln2).abs() <= 1e-6, || {
        format!("d_loss = {d_loss}")
    })?;

    let v = value_function(&half, &half, 1e-7);
    ensure((v + 2.0 * ln2).abs() <= 1e-6, || format!("value = {v}"))?;
    ensure((v + d_loss).abs() <= 1e-6, || {
        format!("value {v} is not -d_loss {d_loss}")
    })?;
    Ok(format!(
        "BCE {bce_real:.9}, d_loss {d_loss:.9}, value {v:.9}"
    ))
}

fn adam_anchors() -> Outcome {
    let mut worst: f64 = 0.0;
    for lr in [1e-4, 1e-5, 1e-3, 0.1] {
        for sign in [1.0, -1.0] {
            let mut params = vec![Tensor::<f64>::full([5], 0.3)];
            let mut opt = AdamState::new(AdamConfig::with_lr(lr), &params);
            opt.step(&mut params, &[Tensor::full([5], sign)], &[])
                .unwrap();
            for &p in params[0].data() {
                let dev = ((p - 0.3).abs() - lr).abs();
                ensure(dev <= 1e-6, || {
                    format!("lr {lr}: |step| {} ", (p - 0.3).abs())
                })?;
                ensure((p - 0.3) * sign < 0.0, || {
                    "step is not against the gradient".into()
                })?;
                worst = worst.max(dev);
            }
        }
    }
    let start = Tensor::<f32>::new([4], vec![0.5, -1.25, 3.0, 0.0]).unwrap();
    let mut params = vec![start.clone()];
    let mut opt = AdamState::new(AdamConfig::default(), &params);
    for _ in 0..10 {
        opt.step(&mut params, &[Tensor::zeros([4])], &[]).unwrap();
    }
    ensure(params[0] == start, || {
        "zero gradient moved the parameters".into()
    })?;
    Ok(format!(
        "worst first-step deviation {worst:.2e}; zero-gradient fixpoint exact"
    ))
}

fn degenerate_convergence() -> Outcome {
    let t0 = Instant::now();
    let g = build_generator(
        Stage::First,
        GeneratorVariant::LatentUpsample,
        (16, 16),
        0.2,
    )
    .unwrap();
    let d = build_discriminator((16, 16), 0.2).unwrap();
    let data = TrainingSet::unconditional(vec![Tensor::full([1, 16, 16], 0.5f32); 16]);
    let cfg = TrainConfig {
        epochs: 250,
        seed: 3,
        log_every: 0,
        ..TrainConfig::default()
    };
    let out = train_gan(g, d, &data, cfg).map_err(|e| e.to_string())?;
    ensure(out.history.len() == 500, || {
        format!("{} steps", out.history.len())
    })?;
    let mut t = out.trainer;
    let z = sample_noise(t.noise_spec().unwrap(), 64, &mut seeded_rng(77)).unwrap();
    let mean = t.generator.forward(&z, Phase::Infer).unwrap().mean() as f64;
    ensure((mean - 0.5).abs() < 0.1, || format!("mean output {mean}"))?;
    within(t0, Duration::from_secs(120))?;
    Ok(format!(
        "500 steps, mean output {mean:.4}, {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn small_dataset(n: usize, size: usize) -> TierDataset {
    let images = (0..n as u64)
        .map(|i| common::painting(i, size, size))
        .collect();
    let sources = (0..n).map(|i| format!("p{i:02}.ppm")).collect();
    build_tier_datasets(images, &[4, 2], sources).unwrap()
}

fn cascade_config(epochs: u32, size: usize) -> CascadeConfig {
    let mut rc = RunConfig::default();
    rc.apply_overrides([
        format!("epochs={epochs}").as_str(),
        format!("size={size}").as_str(),
        "factors=4,2",
        "checkpoint_every=50",
        "log_every=0",
    ])
    .unwrap();
    rc.cascade()
}

fn cascade_smoke() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let ds = small_dataset(16, 32);
    let cfg = cascade_config(200, 32);
    let state = train_tier_cascade(&ds, &cfg, dir.path()).map_err(|e| e.to_string())?;
    ensure(state.all_trained(), || format!("{:?}", state.stages()))?;
    for k in 1..=3 {
        let sd = stage_dir(dir.path(), k);
        ensure(sd.join(CHECKPOINT_FILE).is_file(), || {
            format!("stage {k}: no checkpoint")
        })?;
        let rows = read_loss_csv(&sd.join(LOSSES_FILE)).map_err(|e| e.to_string())?;
        ensure(rows.len() == 400, || {
            format!("stage {k}: {} loss rows", rows.len())
        })?;
        ensure(
            rows.iter()
                .all(|r| r.d_loss.is_finite() && r.g_loss.is_finite()),
            || format!("stage {k}: non-finite loss"),
        )?;
    }
    let samples = generate_cascade(&state, &cfg, (32, 32), 4, 5).map_err(|e| e.to_string())?;
    ensure(samples.len() == 4, || format!("{} samples", samples.len()))?;
    for t in samples.iter().flatten() {
        ensure(t.shape() == [1, 32, 32], || {
            format!("shape {:?}", t.shape())
        })?;
        ensure(t.data().iter().all(|v| (0.0..=1.0).contains(v)), || {
            "pixel outside [0, 1]".into()
        })?;
        let pgm = encode_pnm(&denormalize(t).unwrap());
        ensure(decode_pnm(&pgm).is_ok(), || "invalid PGM".into())?;
    }
    within(t0, Duration::from_secs(600))?;
    Ok(format!(
        "3 stages x 200 epochs, {:.1}s",
        t0.elapsed().as_secs_f64()
    ))
}

fn tier_properties() -> Outcome {
    let images: Vec<_> = (0..24)
        .map(|i| common::painting(500 + i, 128, 128))
        .collect();
    let sources = (0..24).map(|i| format!("m{i}.ppm")).collect();
    let ds = build_tier_datasets(images, &[8, 4, 2], sources).map_err(|e| e.to_string())?;
    ensure(ds.names() == ["M3", "M2", "M1", "MF"], || {
        format!("{:?}", ds.names())
    })?;
    for i in 0..ds.len() {
        ensure(is_block_constant(&ds.tier(0)[i], 8), || {
            format!("M3 image {i} is not 8x8 block-constant")
        })?;
        let e: Vec<f64> = (0..4).map(|t| detail_energy(&ds.tier(t)[i])).collect();
        ensure(e.windows(2).all(|p| p[0] <= p[1]), || {
            format!("image {i}: energies {e:?}")
        })?;
    }
    Ok(format!(
        "{} images: M3 block-constant, energy ordered",
        ds.len()
    ))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn run_and_render(
    dir: &Path,
    ds: &TierDataset,
    cfg: &CascadeConfig,
) -> Result<Vec<Vec<u8>>, String> {
    let state = train_tier_cascade(ds, cfg, dir).map_err(|e| e.to_string())?;
    let samples =
        generate_cascade(&state, cfg, ds.image_size(), 3, 21).map_err(|e| e.to_string())?;
    Ok(samples
        .iter()
        .flatten()
        .map(|t| encode_pnm(&denormalize(t).unwrap()))
        .collect())
}

fn determinism_and_persistence() -> Outcome {
    let ds = small_dataset(12, 32);
    let cfg = cascade_config(4, 32);
    let (a, b, c) = (
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
        tempfile::tempdir().unwrap(),
    );
    let pgm_a = run_and_render(a.path(), &ds, &cfg)?;
    let pgm_b = run_and_render(b.path(), &ds, &cfg)?;
    ensure(pgm_a == pgm_b, || {
        "generated PGMs differ between runs".into()
    })?;
    for k in 1..=3 {
        let (ca, cb) = (
            stage_dir(a.path(), k).join(LOSSES_FILE),
            stage_dir(b.path(), k).join(LOSSES_FILE),
        );
        ensure(read(&ca) == read(&cb), || {
            format!("stage {k}: loss CSVs differ")
        })?;
        let ck = stage_dir(a.path(), k).join(CHECKPOINT_FILE);
        ensure(
            read(&ck) == read(&stage_dir(b.path(), k).join(CHECKPOINT_FILE)),
            || format!("stage {k}: checkpoints differ"),
        )?;
        let loaded = load_checkpoint(&ck).map_err(|e| e.to_string())?;
        let copy = c.path().join(format!("copy{k}.bin"));
        save_checkpoint(&loaded, &copy).map_err(|e| e.to_string())?;
        ensure(read(&copy) == read(&ck), || {
            format!("stage {k}: checkpoint round trip is not bitwise")
        })?;
        ensure(
            load_checkpoint(&copy).map_err(|e| e.to_string())? == loaded,
            || "reloaded checkpoint differs".into(),
        )?;
    }

    // Interrupted run: stage 1 stops after 2 of 4 epochs, then the full
    // cascade resumes.
    let short = cascade_config(2, 32);
    train_stage(&ds, &short, c.path(), 1).map_err(|e| e.to_string())?;
    train_tier_cascade(&ds, &cfg, c.path()).map_err(|e| e.to_string())?;
    for k in 1..=3 {
        let full = read_loss_csv(&stage_dir(a.path(), k).join(LOSSES_FILE)).unwrap();
        let resumed = read_loss_csv(&stage_dir(c.path(), k).join(LOSSES_FILE)).unwrap();
        ensure(full.len() == resumed.len(), || {
            format!(
                "stage {k}: resumed log has {} rows, uninterrupted {}",
                resumed.len(),
                full.len()
            )
        })?;
    }
    Ok(format!(
        "{} PGMs and 3 CSVs identical; checkpoints bitwise; resume row counts match",
        pgm_a.len()
    ))
}

fn preprocessing_fidelity() -> Outcome {
    let src = common::random_rgb(8, 256, 256);
    let bytes = encode_pnm(&src);
    let decoded = decode_pnm(&bytes).map_err(|e| e.to_string())?;
    let out = preprocess(&decoded, 128).map_err(|e| e.to_string())?;
    ensure(
        (out.width, out.height, out.channels) == (128, 128, 1),
        || "wrong output geometry".into(),
    )?;
    let payload = &bytes[bytes.len() - 256 * 256 * 3..];
    let mut mismatches = 0;
    for y in 0..128 {
        for x in 0..128 {
            let i = ((2 * y) * 256 + 2 * x) * 3;
            let (r, g, b) = (payload[i], payload[i + 1], payload[i + 2]);
            // Round the weighted sum to thousandths first so float noise
            // cannot move an exact .5 tie.
            let exact = ((0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64) * 1000.0).round()
                / 1000.0;
            let want = (exact + 0.5).floor().min(255.0) as u8;
            if out.pixels[y * 128 + x] != want {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, || {
        format!("{mismatches} of 16384 pixels differ")
    })?;
    Ok("16384 of 16384 pixels match".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient check suite", gradient_checks),
        ("convolution oracle", conv_oracle),
        ("loss anchors", loss_anchors),
        ("adam anchors", adam_anchors),
        ("degenerate convergence", degenerate_convergence),
        ("cascade smoke", cascade_smoke),
        ("tier construction", tier_properties),
        ("determinism and persistence", determinism_and_persistence),
        ("preprocessing fidelity", preprocessing_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
