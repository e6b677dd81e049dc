use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use tiergan::cascade::{generate_cascade, train_stage, train_tier_cascade, CascadeState};
use tiergan::config::{RunConfig, KEYS};
use tiergan::dataset::prepare;
use tiergan::gradcheck::{run_suite, CheckOptions};
use tiergan::image::{denormalize, save_pgm};
use tiergan::tiers::TierDataset;
use tiergan::{Error, Primitive};

const RUN_CONFIG_FILE: &str = "run.cfg";

const EXIT_VERIFY: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(
    name = "tiergan",
    version,
    about = "Tiered GAN cascade: prepare data, train, generate, verify gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a directory of P5/P6 images into grayscale detail tiers.
    Prepare {
        /// Directory of .pgm/.ppm/.pnm files.
        #[arg(long)]
        input: PathBuf,
        /// Working directory to write tiers and the manifest into.
        #[arg(long)]
        output: PathBuf,
        /// Square output size in pixels.
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Tier factors, strictly decreasing.
        #[arg(long, default_value = "8,4,2")]
        factors: String,
    },
    /// Train every cascade stage in order, or a single stage.
    #[command(after_help = config_help())]
    Train {
        /// Prepared working directory.
        #[arg(long)]
        workdir: PathBuf,
        /// key=value config file; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Train only this 1-based stage (earlier stages must be trained).
        #[arg(long)]
        stage: Option<usize>,
        /// Override a config key, e.g. --set epochs=100. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Sample images from a trained cascade into <workdir>/out.
    Generate {
        /// Trained working directory.
        #[arg(long)]
        workdir: PathBuf,
        /// Number of images.
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the coarser stage outputs.
        #[arg(long)]
        emit_intermediates: bool,
    },
    /// Compare analytic and finite-difference gradients in 64-bit.
    Gradcheck {
        /// Seed for test inputs and parameters.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one primitive's backward pass (self-test of the checker).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn config_help() -> String {
    let mut s = String::from("Config keys (file or --set):\n");
    for (k, default, desc) in KEYS {
        s.push_str(&format!("  {k:<17} {desc} [default: {default}]\n"));
    }
    s
}

/// A failed command: message plus exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::StageDiverged { .. }
            | Error::Diverged { .. }
            | Error::NonFiniteGradient { .. } => EXIT_DIVERGED,
            _ => EXIT_INPUT,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_INPUT);
    }
    let result = match cli.command {
        Command::Prepare {
            input,
            output,
            size,
            factors,
        } => cmd_prepare(&input, &output, size, &factors),
        Command::Train {
            workdir,
            config,
            stage,
            overrides,
        } => cmd_train(&workdir, config.as_deref(), stage, &overrides),
        Command::Generate {
            workdir,
            n,
            seed,
            emit_intermediates,
        } => cmd_generate(&workdir, n, seed, emit_intermediates),
        Command::Gradcheck { seed, inject_fault } => cmd_gradcheck(seed, inject_fault.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

/// Sizes the global thread pool from `TIERGAN_THREADS` (default: all cores).
fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("TIERGAN_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("TIERGAN_THREADS must be a positive integer, got `{v}`"))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn cmd_prepare(input: &Path, output: &Path, size: usize, factors: &str) -> CmdResult {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides([
        format!("size={size}").as_str(),
        format!("factors={factors}").as_str(),
    ])?;
    let ds = prepare(input, output, cfg.size, &cfg.factors)?;
    let counts: Vec<String> = ds
        .names()
        .iter()
        .enumerate()
        .rev()
        .map(|(i, name)| format!("{name}:{}", ds.tier(i).len()))
        .collect();
    println!("{}", counts.join(" "));
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn cmd_train(
    workdir: &Path,
    config: Option<&Path>,
    stage: Option<usize>,
    overrides: &[String],
) -> CmdResult {
    let mut cfg = load_config(config, overrides)?;
    let ds = TierDataset::load(workdir)?;
    // The prepared data fixes the tier layout.
    cfg.factors = ds.factors().to_vec();
    cfg.size = ds.image_size().0;
    cfg.workdir = workdir.to_path_buf();
    cfg.validate()?;
    let canonical = cfg.to_canonical();
    print!("{canonical}");
    cfg.save(&workdir.join(RUN_CONFIG_FILE))?;

    let cascade = cfg.cascade();
    match stage {
        Some(k) => {
            let r = train_stage(&ds, &cascade, workdir, k)?;
            let last = r
                .last
                .map(|l| format!(" d_loss={:.6} g_loss={:.6}", l.d_loss, l.g_loss))
                .unwrap_or_default();
            println!("stage {k}: epoch {} step {}{last}", r.epochs, r.steps);
        }
        None => {
            let state = train_tier_cascade(&ds, &cascade, workdir)?;
            for (i, s) in state.stages().iter().enumerate() {
                println!("stage {}: {s:?}", i + 1);
            }
        }
    }
    Ok(())
}

fn cmd_generate(workdir: &Path, n: usize, seed: u64, emit_intermediates: bool) -> CmdResult {
    let cfg_path = workdir.join(RUN_CONFIG_FILE);
    if !cfg_path.exists() {
        return Err(Failure {
            code: EXIT_INPUT,
            msg: format!(
                "{} not found; run `tiergan train` first",
                cfg_path.display()
            ),
        });
    }
    let cfg = RunConfig::load(&cfg_path)?;
    let names = tiergan::tiers::tier_names(cfg.factors.len());
    let state = CascadeState::load(workdir, names.len(), cfg.train.epochs)?;
    let samples = generate_cascade(&state, &cfg.cascade(), (cfg.size, cfg.size), n, seed)?;
    let out = workdir.join("out");
    std::fs::create_dir_all(&out).map_err(|e| Failure {
        code: EXIT_INPUT,
        msg: format!("{}: {e}", out.display()),
    })?;
    let mut written = 0;
    for (i, stages) in samples.iter().enumerate() {
        for (t, name) in stages.iter().zip(&names) {
            let suffix = if name == "MF" {
                "final".to_string()
            } else if emit_intermediates {
                name.to_ascii_lowercase()
            } else {
                continue;
            };
            save_pgm(&denormalize(t)?, &out.join(format!("{i:04}_{suffix}.pgm")))?;
            written += 1;
        }
    }
    info!("wrote {written} images to {}", out.display());
    println!("{written} images written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(seed: u64, fault: Option<&str>) -> CmdResult {
    let fault = match fault {
        Some(name) => Some(Primitive::from_name(name).ok_or_else(|| Failure {
            code: EXIT_INPUT,
            msg: format!("unknown primitive `{name}`"),
        })?),
        None => None,
    };
    let opts = CheckOptions {
        seed,
        fault,
        ..CheckOptions::default()
    };
    let report = run_suite(&opts)?;
    print!("{}", report.render());
    let failures = report.failures();
    if failures.is_empty() {
        println!("all {} checks passed", report.cases.len());
        return Ok(());
    }
    let detail: Vec<String> = failures
        .iter()
        .map(|c| format!("{} ({}) max_rel_err={:.3e}", c.kind, c.case, c.worst()))
        .collect();
    Err(Failure {
        code: EXIT_VERIFY,
        msg: format!("gradient check failed: {}", detail.join(", ")),
    })
}
