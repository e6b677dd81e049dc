use std::path::Path;
use std::process::{Command, Output};

use tiergan::image::{decode_pnm, save_ppm, ImageU8};

fn tiergan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiergan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_inputs(dir: &Path, n: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let px = (0..size * size * 3)
            .map(|j| ((j * 31 + i * 97 + (j / (size * 3)) * 13) % 256) as u8)
            .collect();
        save_ppm(
            &ImageU8::new(size, size, 3, px).unwrap(),
            &dir.join(format!("img{i:03}.ppm")),
        )
        .unwrap();
    }
}

fn prepared(n: usize, factors: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_inputs(&input, n, 32);
    let w = dir.path().join("w");
    let o = tiergan(&[
        "prepare",
        "--input",
        input.to_str().unwrap(),
        "--output",
        w.to_str().unwrap(),
        "--size",
        "16",
        "--factors",
        factors,
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn workdir(dir: &tempfile::TempDir) -> String {
    dir.path().join("w").to_str().unwrap().to_string()
}

#[test]
fn prepare_reports_counts_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    write_inputs(&input, 5, 32);
    let w = dir.path().join("w");
    let args = [
        "prepare",
        "--input",
        input.to_str().unwrap(),
        "--output",
        w.to_str().unwrap(),
        "--size",
        "16",
    ];
    let o = tiergan(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "MF:5 M1:5 M2:5 M3:5");
    let manifest = std::fs::read(w.join("manifest.tsv")).unwrap();
    assert_eq!(tiergan(&args).status.code(), Some(0));
    assert_eq!(std::fs::read(w.join("manifest.tsv")).unwrap(), manifest);
}

#[test]
fn prepare_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = dir.path().join("w");
    let o = tiergan(&[
        "prepare",
        "--input",
        empty.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no images found"), "{}", stderr(&o));

    std::fs::write(empty.join("broken.pgm"), b"P5\n4 4\n255\n\x01").unwrap();
    let o = tiergan(&[
        "prepare",
        "--input",
        empty.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("broken.pgm"), "{}", stderr(&o));

    let o = tiergan(&[
        "prepare",
        "--input",
        empty.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--factors",
        "2,4",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_echoes_defaults() {
    let dir = prepared(8, "8,4,2");
    let w = workdir(&dir);
    let o = tiergan(&[
        "train",
        "--workdir",
        &w,
        "--stage",
        "1",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    for line in [
        "lr_g=0.0001",
        "lr_d=0.00001",
        "batch_size=8",
        "epochs=1",
        "factors=8,4,2",
        "size=16",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line} in\n{text}");
    }
    let saved = std::fs::read_to_string(dir.path().join("w/run.cfg")).unwrap();
    assert!(text.starts_with(&saved));

    let cfg = dir.path().join("default.cfg");
    std::fs::write(&cfg, "").unwrap();
    let o = tiergan(&[
        "train",
        "--workdir",
        &w,
        "--config",
        cfg.to_str().unwrap(),
        "--stage",
        "1",
    ]);
    assert!(stdout(&o).lines().any(|l| l == "epochs=2000"));
}

#[test]
fn train_rejects_bad_input() {
    let dir = prepared(8, "4,2");
    let w = workdir(&dir);
    let o = tiergan(&[
        "train",
        "--workdir",
        &w,
        "--stage",
        "2",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage 1"), "{}", stderr(&o));

    let o = tiergan(&["train", "--workdir", &w, "--set", "learning_rate=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"));

    let missing = dir.path().join("nothing");
    let o = tiergan(&["train", "--workdir", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn interrupted_training_resumes_to_the_same_log() {
    let full = prepared(8, "4,2");
    let split = prepared(8, "4,2");
    let common = ["--set", "batch_size=4", "--set", "checkpoint_every=5"];
    let run = |w: &str, epochs: &str, stage: Option<&str>| {
        let mut args = vec!["train", "--workdir", w, "--set", epochs];
        args.extend(common);
        if let Some(s) = stage {
            args.extend(["--stage", s]);
        }
        let o = tiergan(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    run(&workdir(&full), "epochs=20", None);
    run(&workdir(&split), "epochs=10", Some("1"));
    run(&workdir(&split), "epochs=20", None);
    for k in 1..=3 {
        let rel = format!("w/stages/stage{k}/losses.csv");
        let a = std::fs::read_to_string(full.path().join(&rel)).unwrap();
        let b = std::fs::read_to_string(split.path().join(&rel)).unwrap();
        assert_eq!(a.lines().count(), 1 + 20 * 2);
        assert_eq!(a, b, "stage {k}");
    }
}

#[test]
fn divergence_exits_with_three() {
    let dir = prepared(8, "4,2");
    let o = tiergan(&[
        "train",
        "--workdir",
        &workdir(&dir),
        "--set",
        "epochs=50",
        "--set",
        "lr_g=1e9",
        "--set",
        "lr_d=1e9",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("stage 1 diverged"), "{}", stderr(&o));
}

#[test]
fn generate_writes_finals_and_intermediates() {
    let dir = prepared(8, "8,4,2");
    let w = workdir(&dir);
    let o = tiergan(&["generate", "--workdir", &w, "--n", "2"]);
    assert_eq!(o.status.code(), Some(2));

    let o = tiergan(&["train", "--workdir", &w, "--set", "epochs=2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("w/out");

    let o = tiergan(&["generate", "--workdir", &w, "--n", "2", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(names, ["0000_final.pgm", "0001_final.pgm"]);
    let first = std::fs::read(out.join("0000_final.pgm")).unwrap();
    let img = decode_pnm(&first).unwrap();
    assert_eq!((img.width, img.height, img.channels), (16, 16, 1));

    std::fs::remove_dir_all(&out).unwrap();
    let o = tiergan(&[
        "generate",
        "--workdir",
        &w,
        "--n",
        "2",
        "--seed",
        "7",
        "--emit-intermediates",
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_dir(&out).unwrap().count(), 8);
    for suffix in ["final", "m1", "m2", "m3"] {
        assert!(out.join(format!("0001_{suffix}.pgm")).exists());
    }
    assert_eq!(std::fs::read(out.join("0000_final.pgm")).unwrap(), first);
}

#[test]
fn generate_names_the_untrained_stage() {
    let dir = prepared(8, "4,2");
    let w = workdir(&dir);
    let o = tiergan(&[
        "train",
        "--workdir",
        &w,
        "--stage",
        "1",
        "--set",
        "epochs=1",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = tiergan(&["generate", "--workdir", &w]);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stderr(&o).contains("stage 2 is not trained"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = tiergan(&["gradcheck", "--seed", "3"]);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    let text = stdout(&a);
    let kinds = text
        .lines()
        .skip_while(|l| !l.starts_with("worst"))
        .skip(1)
        .filter(|l| l.starts_with("  "))
        .count();
    assert!(kinds >= 8, "{text}");
    let b = tiergan(&["gradcheck", "--seed", "3"]);
    assert_eq!(stdout(&b), text);
}

#[test]
fn gradcheck_fault_names_the_primitive() {
    let o = tiergan(&["gradcheck", "--inject-fault", "sigmoid"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sigmoid"), "{}", stderr(&o));
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("FAIL") && l.contains("sigmoid")));
    assert!(stdout(&o)
        .lines()
        .any(|l| l.starts_with("ok") && l.contains("conv2d ")));
}

#[test]
fn help_lists_defaults_and_hides_fault_flag() {
    let o = tiergan(&["prepare", "--help"]);
    assert!(stdout(&o).contains("[default: 128]") && stdout(&o).contains("[default: 8,4,2]"));
    let o = tiergan(&["train", "--help"]);
    assert!(stdout(&o).contains("epochs") && stdout(&o).contains("[default: 2000]"));
    let o = tiergan(&["generate", "--help"]);
    assert!(stdout(&o).contains("[default: 1]"));
    let o = tiergan(&["gradcheck", "--help"]);
    assert!(!stdout(&o).contains("inject"));
}

#[test]
fn thread_count_from_environment() {
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_tiergan"))
            .args(["gradcheck", "--seed", "1"])
            .env("TIERGAN_THREADS", threads)
            .output()
            .unwrap()
    };
    let one = run("1");
    assert_eq!(one.status.code(), Some(0));
    assert_eq!(stdout(&run("3")), stdout(&one));
    assert_eq!(run("zero").status.code(), Some(2));
}
