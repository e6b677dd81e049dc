//! Stage-by-stage training of the tier cascade and chained generation.
//!
//! Stage 1 maps noise to the coarsest tier. Stage `k > 1` refines tier
//! `k - 1` into tier `k` using paired images derived from the same source.
//! Each stage lives in `stages/stageK/` with a `checkpoint.bin` and a
//! `losses.csv`.

use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointStatus};
use crate::error::{Error, Result};
use crate::losslog::{read_loss_csv, write_loss_csv, LossRecord};
use crate::model::{
    build_discriminator, build_generator, pair_digest, GeneratorVariant, Model, ModelSpec, Phase,
    Stage,
};
use crate::noise::{sample_noise, seeded_rng, NoiseSpec};
use crate::tensor::Tensor;
use crate::tiers::TierDataset;
use crate::train::{GanTrainer, TrainConfig, TrainingSet};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSSES_FILE: &str = "losses.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    pub train: TrainConfig,
    pub generator: GeneratorVariant,
    pub leaky_alpha: f64,
    pub checkpoint_every: u32,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        crate::config::RunConfig::default().cascade()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Untrained,
    /// A checkpoint exists but training has not reached its epoch target.
    Partial {
        epoch: u32,
    },
    Trained,
    Diverged,
}

pub fn stage_dir(workdir: &Path, stage: usize) -> PathBuf {
    workdir.join("stages").join(format!("stage{stage}"))
}

/// Generator and discriminator specs for 1-based `stage`.
pub fn stage_specs(
    cfg: &CascadeConfig,
    stage: usize,
    size: (usize, usize),
) -> Result<(ModelSpec, ModelSpec)> {
    let kind = if stage == 1 {
        Stage::First
    } else {
        Stage::Refine
    };
    Ok((
        build_generator(kind, cfg.generator, size, cfg.leaky_alpha)?,
        build_discriminator(size, cfg.leaky_alpha)?,
    ))
}

/// Training pairs for 1-based `stage`.
pub fn stage_training_set(ds: &TierDataset, stage: usize) -> TrainingSet {
    let target = ds.tier(stage - 1).to_vec();
    if stage == 1 {
        TrainingSet::unconditional(target)
    } else {
        TrainingSet::paired(ds.tier(stage - 2).to_vec(), target)
    }
}

#[derive(Clone, Debug)]
pub struct CascadeState {
    workdir: PathBuf,
    stages: Vec<StageStatus>,
}

impl CascadeState {
    /// Reads the status of stages `1..=n_stages` from their checkpoints.
    pub fn load(workdir: &Path, n_stages: usize, target_epochs: u32) -> Result<Self> {
        let stages = (1..=n_stages)
            .map(|k| {
                let path = stage_dir(workdir, k).join(CHECKPOINT_FILE);
                if !path.exists() {
                    return Ok(StageStatus::Untrained);
                }
                let ck = load_checkpoint(&path)?;
                Ok(match ck.status {
                    CheckpointStatus::Diverged => StageStatus::Diverged,
                    CheckpointStatus::Complete if ck.epoch >= target_epochs => StageStatus::Trained,
                    _ => StageStatus::Partial { epoch: ck.epoch },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            workdir: workdir.to_path_buf(),
            stages,
        })
    }

    pub fn workdir(&self) -> &Path {
        &self.workdir
    }

    pub fn stages(&self) -> &[StageStatus] {
        &self.stages
    }

    /// Status of 1-based `stage`.
    pub fn status(&self, stage: usize) -> StageStatus {
        self.stages[stage - 1]
    }

    pub fn all_trained(&self) -> bool {
        self.stages.iter().all(|s| *s == StageStatus::Trained)
    }

    fn require_trained(&self, stage: usize) -> Result<()> {
        match self.status(stage) {
            StageStatus::Trained => Ok(()),
            StageStatus::Diverged => Err(Error::StageDiverged {
                stage,
                detail: "checkpoint is tagged diverged".into(),
            }),
            _ => Err(Error::StageNotTrained { stage }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: usize,
    pub epochs: u32,
    pub steps: u64,
    pub last: Option<LossRecord>,
    pub resumed_from: Option<u32>,
}

/// Trains (or resumes) one stage. Every earlier stage must already be
/// trained.
pub fn train_stage(
    ds: &TierDataset,
    cfg: &CascadeConfig,
    workdir: &Path,
    stage: usize,
) -> Result<StageReport> {
    let n = ds.tier_count();
    if stage == 0 || stage > n {
        return Err(Error::Precondition(format!(
            "stage {stage} is outside 1..={n}"
        )));
    }
    let state = CascadeState::load(workdir, n, cfg.train.epochs)?;
    for earlier in 1..stage {
        if state.status(earlier) != StageStatus::Trained {
            return Err(Error::Precondition(format!(
                "stage {stage} requires stage {earlier} to be trained first (status: {:?})",
                state.status(earlier)
            )));
        }
    }

    let dir = stage_dir(workdir, stage);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    let csv_path = dir.join(LOSSES_FILE);
    let (g_spec, d_spec) = stage_specs(cfg, stage, ds.image_size())?;
    let conditional = stage > 1;
    let data = stage_training_set(ds, stage);

    let (mut trainer, mut history, resumed_from) = if ckpt_path.exists() {
        let ck = load_checkpoint(&ckpt_path)?;
        if ck.status == CheckpointStatus::Diverged {
            return Err(Error::StageDiverged {
                stage,
                detail: "checkpoint is tagged diverged; remove it to retrain".into(),
            });
        }
        let trainer =
            GanTrainer::from_checkpoint(g_spec, d_spec, cfg.train.clone(), conditional, &ck)?;
        let mut history = if csv_path.exists() {
            read_loss_csv(&csv_path)?
        } else {
            Vec::new()
        };
        history.retain(|r| r.epoch <= ck.epoch);
        info!("stage {stage}: resuming from epoch {}", ck.epoch);
        (trainer, history, Some(ck.epoch))
    } else {
        (
            GanTrainer::new(g_spec, d_spec, cfg.train.clone(), conditional)?,
            Vec::new(),
            None,
        )
    };

    let target = cfg.train.epochs;
    while trainer.epoch() < target {
        if let Err(e) = trainer.train_epoch(&data, &mut |r| history.push(r)) {
            return match e {
                Error::Diverged { .. } | Error::NonFiniteGradient { .. } => {
                    warn!("stage {stage}: {e}");
                    write_loss_csv(&history, &csv_path)?;
                    save_checkpoint(&trainer.checkpoint(CheckpointStatus::Diverged), &ckpt_path)?;
                    Err(Error::StageDiverged {
                        stage,
                        detail: e.to_string(),
                    })
                }
                other => Err(other),
            };
        }
        let done = trainer.epoch() >= target;
        if done || trainer.epoch() % cfg.checkpoint_every == 0 {
            // Loss log first: on resume it is truncated to the checkpoint.
            write_loss_csv(&history, &csv_path)?;
            let status = if done {
                CheckpointStatus::Complete
            } else {
                CheckpointStatus::InProgress
            };
            save_checkpoint(&trainer.checkpoint(status), &ckpt_path)?;
        }
    }
    if resumed_from.is_some_and(|e| e >= target) {
        // Already at or past the target: record completion.
        write_loss_csv(&history, &csv_path)?;
        save_checkpoint(&trainer.checkpoint(CheckpointStatus::Complete), &ckpt_path)?;
    }
    Ok(StageReport {
        stage,
        epochs: trainer.epoch(),
        steps: trainer.step(),
        last: history.last().copied(),
        resumed_from,
    })
}

/// Trains every stage in order, stopping at the first failure.
pub fn train_tier_cascade(
    ds: &TierDataset,
    cfg: &CascadeConfig,
    workdir: &Path,
) -> Result<CascadeState> {
    for stage in 1..=ds.tier_count() {
        let report = train_stage(ds, cfg, workdir, stage)?;
        info!(
            "stage {stage}: trained {} epochs, {} steps",
            report.epochs, report.steps
        );
    }
    CascadeState::load(workdir, ds.tier_count(), cfg.train.epochs)
}

fn load_generator(
    workdir: &Path,
    cfg: &CascadeConfig,
    stage: usize,
    size: (usize, usize),
) -> Result<Model<f32>> {
    let (g_spec, d_spec) = stage_specs(cfg, stage, size)?;
    let ck = load_checkpoint(&stage_dir(workdir, stage).join(CHECKPOINT_FILE))?;
    ck.verify_digest(&pair_digest(&g_spec, &d_spec))?;
    let mut g = Model::zeroed(g_spec);
    let mut loaded = 0;
    for (name, t) in &ck.tensors {
        if let Some(rest) = name.strip_prefix("g.") {
            g.set_named(rest, t.clone())?;
            loaded += 1;
        }
    }
    if loaded != g.named_tensors().count() {
        return Err(Error::CheckpointTruncated(format!(
            "stage {stage}: generator tensors missing"
        )));
    }
    Ok(g)
}

/// Runs noise through every stage's generator. Returns, per sample, the
/// output of each stage (coarsest first, final image last). Checkpoints are
/// only read.
pub fn generate_cascade(
    state: &CascadeState,
    cfg: &CascadeConfig,
    size: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    for stage in 1..=state.stages.len() {
        state.require_trained(stage)?;
    }
    let mut gens = (1..=state.stages.len())
        .map(|k| load_generator(&state.workdir, cfg, k, size))
        .collect::<Result<Vec<_>>>()?;
    let noise = NoiseSpec::for_generator(gens[0].spec(), cfg.train.noise)?;
    let mut rng = seeded_rng(seed);
    let mut out: Vec<Vec<Tensor<f32>>> = Vec::with_capacity(n);
    let chunk = cfg.train.batch_size.max(1);
    let mut remaining = n;
    while remaining > 0 {
        let m = remaining.min(chunk);
        let mut x = sample_noise(&noise, m, &mut rng)?;
        let mut per_stage = Vec::with_capacity(gens.len());
        for g in &mut gens {
            x = g.forward(&x, Phase::Infer)?;
            per_stage.push(x.unstack());
        }
        for i in 0..m {
            out.push(per_stage.iter().map(|s| s[i].clone()).collect());
        }
        remaining -= m;
    }
    Ok(out)
}
