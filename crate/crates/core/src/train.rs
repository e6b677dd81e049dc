//! Alternating adversarial training: one discriminator update then one
//! generator update per minibatch.

use log::info;
use rand::seq::SliceRandom;

use crate::checkpoint::{Checkpoint, CheckpointStatus};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{self, GLossVariant, LossConfig};
use crate::losslog::LossRecord;
use crate::model::{pair_digest, Model, ModelSpec, Phase, DEFAULT_INIT_STD};
use crate::noise::{sample_noise, seeded_rng, NoiseDistribution, NoiseSpec, RngState, TrainRng};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub seed: u64,
    pub loss: LossConfig,
    /// Progress is logged every `log_every` steps; 0 disables it.
    pub log_every: u64,
    pub init_std: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub noise: NoiseDistribution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 2000,
            batch_size: 8,
            lr_g: 0.0001,
            lr_d: 0.00001,
            seed: 0,
            loss: LossConfig::default(),
            log_every: 50,
            init_std: DEFAULT_INIT_STD,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            noise: NoiseDistribution::Normal,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| {
            Err(Error::InvalidValue {
                key: key.into(),
                msg,
            })
        };
        if self.epochs < 1 {
            return bad("epochs", "must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size", format!("{} < 2", self.batch_size));
        }
        for (k, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(k, format!("{v} must be positive"));
            }
        }
        for (k, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(k, format!("{v} is outside (0, 1)"));
            }
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return bad("init_std", format!("{} must be positive", self.init_std));
        }
        self.loss.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Real targets and, for refinement stages, the paired generator inputs.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub targets: Vec<Tensor<f32>>,
    pub inputs: Option<Vec<Tensor<f32>>>,
}

impl TrainingSet {
    pub fn unconditional(targets: Vec<Tensor<f32>>) -> Self {
        Self {
            targets,
            inputs: None,
        }
    }

    pub fn paired(inputs: Vec<Tensor<f32>>, targets: Vec<Tensor<f32>>) -> Self {
        Self {
            targets,
            inputs: Some(inputs),
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn batch(items: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
        let refs: Vec<&Tensor<f32>> = idx.iter().map(|&i| &items[i]).collect();
        Tensor::stack(&refs)
    }
}

/// Owns one generator/discriminator pair, their optimizers and the RNG that
/// drives shuffling and noise.
#[derive(Clone, Debug)]
pub struct GanTrainer {
    pub generator: Model<f32>,
    pub discriminator: Model<f32>,
    pub g_opt: AdamState<f32>,
    pub d_opt: AdamState<f32>,
    rng: TrainRng,
    noise: Option<NoiseSpec>,
    config: TrainConfig,
    epoch: u32,
    step: u64,
}

impl GanTrainer {
    /// Fresh models initialized from `config.seed`. A `conditional` trainer
    /// feeds paired inputs to the generator instead of noise.
    pub fn new(
        g_spec: ModelSpec,
        d_spec: ModelSpec,
        config: TrainConfig,
        conditional: bool,
    ) -> Result<Self> {
        config.validate()?;
        let noise = check_pair(&g_spec, &d_spec, conditional, config.noise)?;
        let mut rng = seeded_rng(config.seed);
        let generator = Model::init(g_spec, config.init_std, &mut rng);
        let discriminator = Model::init(d_spec, config.init_std, &mut rng);
        Ok(Self {
            g_opt: AdamState::new(config.adam(config.lr_g), generator.params()),
            d_opt: AdamState::new(config.adam(config.lr_d), discriminator.params()),
            generator,
            discriminator,
            rng,
            noise,
            config,
            epoch: 0,
            step: 0,
        })
    }

    /// Rebuilds a trainer from a checkpoint written by [`GanTrainer::checkpoint`].
    pub fn from_checkpoint(
        g_spec: ModelSpec,
        d_spec: ModelSpec,
        config: TrainConfig,
        conditional: bool,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        ckpt.verify_digest(&pair_digest(&g_spec, &d_spec))?;
        let mut t = Self::new(g_spec, d_spec, config, conditional)?;
        for (name, tensor) in &ckpt.tensors {
            match name.split_once('.') {
                Some(("g", rest)) => t.generator.set_named(rest, tensor.clone())?,
                Some(("d", rest)) => t.discriminator.set_named(rest, tensor.clone())?,
                _ => return Err(Error::CheckpointTensor(name.clone())),
            }
        }
        let expected =
            t.generator.named_tensors().count() + t.discriminator.named_tensors().count();
        if ckpt.tensors.len() != expected {
            return Err(Error::CheckpointTruncated(format!(
                "{} tensors, expected {expected}",
                ckpt.tensors.len()
            )));
        }
        let [g_opt, d_opt] = &ckpt.optimizers[..] else {
            return Err(Error::CheckpointTruncated(
                "expected two optimizer states".into(),
            ));
        };
        for (opt, model) in [(g_opt, &t.generator), (d_opt, &t.discriminator)] {
            let shapes_ok = opt.m.len() == model.params().len()
                && opt
                    .m
                    .iter()
                    .zip(&opt.v)
                    .zip(model.params())
                    .all(|((m, v), p)| m.shape() == p.shape() && v.shape() == p.shape());
            if !shapes_ok {
                return Err(Error::CheckpointTruncated(
                    "optimizer moments do not match parameters".into(),
                ));
            }
        }
        t.g_opt = g_opt.clone();
        t.d_opt = d_opt.clone();
        // Learning rates follow the current config.
        t.g_opt.config = t.config.adam(t.config.lr_g);
        t.d_opt.config = t.config.adam(t.config.lr_d);
        t.rng = ckpt.rng.restore();
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self, status: CheckpointStatus) -> Checkpoint {
        let tensors = self
            .generator
            .named_tensors()
            .map(|(n, t)| (format!("g.{n}"), t.clone()))
            .chain(
                self.discriminator
                    .named_tensors()
                    .map(|(n, t)| (format!("d.{n}"), t.clone())),
            )
            .collect();
        Checkpoint {
            digest: pair_digest(self.generator.spec(), self.discriminator.spec()),
            status,
            epoch: self.epoch,
            step: self.step,
            tensors,
            optimizers: vec![self.g_opt.clone(), self.d_opt.clone()],
            rng: RngState::capture(&self.rng),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Completed epochs.
    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    /// Completed minibatch steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn noise_spec(&self) -> Option<&NoiseSpec> {
        self.noise.as_ref()
    }

    pub fn rng_mut(&mut self) -> &mut TrainRng {
        &mut self.rng
    }

    /// The paired batch for conditional trainers, fresh noise otherwise.
    pub fn generator_input(&mut self, cond: Option<&Tensor<f32>>, m: usize) -> Result<Tensor<f32>> {
        match (cond, &self.noise) {
            (Some(c), None) => Ok(c.clone()),
            (None, Some(spec)) => sample_noise(spec, m, &mut self.rng),
            (Some(_), Some(_)) => Err(Error::Precondition(
                "noise-driven generator given a paired input".into(),
            )),
            (None, None) => Err(Error::Precondition(
                "conditional generator needs a paired input".into(),
            )),
        }
    }

    /// Generator output for `input`. Running statistics are left untouched.
    pub fn generate(&mut self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.generator.forward(input, Phase::TrainFrozenStats)
    }

    fn diverged(&self, d_loss: f64, g_loss: f64) -> Error {
        Error::Diverged {
            epoch: self.epoch + 1,
            step: self.step + 1,
            d_loss,
            g_loss,
        }
    }

    /// Discriminator loss on fixed batches, without updating anything.
    pub fn discriminator_loss(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f32> {
        let clamp = self.config.loss.prob_clamp as f32;
        let p_real = self.discriminator.forward(real, Phase::TrainFrozenStats)?;
        let p_fake = self.discriminator.forward(fake, Phase::TrainFrozenStats)?;
        let real_l = loss::bce(&p_real, &loss::labels(p_real.shape(), true), clamp)?;
        let fake_l = loss::bce(&p_fake, &loss::labels(p_fake.shape(), false), clamp)?;
        Ok(real_l + fake_l)
    }

    /// `BCE(D(real), 1) + BCE(D(fake), 0)`, backpropagated into the
    /// discriminator only, followed by one Adam step.
    pub fn d_update(&mut self, real: &Tensor<f32>, fake: &Tensor<f32>) -> Result<f32> {
        let clamp = self.config.loss.prob_clamp as f32;
        let mut g = Graph::new();
        let leaves = self.discriminator.bind(&mut g, true);
        let xr = g.input(real.clone());
        let xf = g.input(fake.clone());
        let pr = self
            .discriminator
            .apply(&mut g, &leaves, xr, Phase::Train)?;
        let pf = self
            .discriminator
            .apply(&mut g, &leaves, xf, Phase::Train)?;
        let lr = g.bce(pr, loss::labels(g.value(pr).shape(), true), clamp)?;
        let lf = g.bce(pf, loss::labels(g.value(pf).shape(), false), clamp)?;
        let total = g.add(lr, lf)?;
        let d_loss = g.value(total).item();
        if !d_loss.is_finite() {
            return Err(self.diverged(d_loss as f64, f64::NAN));
        }
        g.backward(total)?;
        let grads: Vec<Tensor<f32>> = leaves.iter().map(|&l| g.grad(l).unwrap().clone()).collect();
        self.d_opt
            .step(self.discriminator.params_mut(), &grads, &[])
            .map_err(|e| self.name_param(e, true))?;
        Ok(d_loss)
    }

    fn name_param(&self, e: Error, disc: bool) -> Error {
        match e {
            Error::NonFiniteGradient { step, param } => {
                let names = if disc {
                    self.discriminator.param_names()
                } else {
                    self.generator.param_names()
                };
                let idx: Option<usize> = param.trim_start_matches('#').parse().ok();
                let name = idx.and_then(|i| names.get(i)).cloned().unwrap_or(param);
                Error::NonFiniteGradient {
                    step,
                    param: format!("{}.{name}", if disc { "d" } else { "g" }),
                }
            }
            other => other,
        }
    }

    /// One discriminator step against fresh fakes.
    pub fn d_train_step(&mut self, real: &Tensor<f32>, cond: Option<&Tensor<f32>>) -> Result<f32> {
        let input = self.generator_input(cond, real.shape()[0])?;
        let fake = self.generate(&input)?;
        self.d_update(real, &fake)
    }

    /// One generator step: the configured generator loss through a frozen
    /// discriminator, Adam on the generator only.
    pub fn g_train_step(&mut self, cond: Option<&Tensor<f32>>, m: usize) -> Result<f32> {
        let clamp = self.config.loss.prob_clamp as f32;
        let input = self.generator_input(cond, m)?;
        let mut g = Graph::new();
        let g_leaves = self.generator.bind(&mut g, true);
        let d_leaves = self.discriminator.bind(&mut g, false);
        let z = g.input(input);
        let fake = self.generator.apply(&mut g, &g_leaves, z, Phase::Train)?;
        let p = self
            .discriminator
            .apply(&mut g, &d_leaves, fake, Phase::TrainFrozenStats)?;
        let shape = g.value(p).shape().to_vec();
        let root = match self.config.loss.g_loss_variant {
            GLossVariant::NonSaturating => g.bce(p, loss::labels(&shape, true), clamp)?,
            GLossVariant::Saturating => {
                // mean ln(1 - D) = -BCE(D, 0)
                let l = g.bce(p, loss::labels(&shape, false), clamp)?;
                g.scale(l, -1.0)
            }
        };
        let g_loss = g.value(root).item();
        if !g_loss.is_finite() {
            return Err(self.diverged(f64::NAN, g_loss as f64));
        }
        g.backward(root)?;
        let grads: Vec<Tensor<f32>> = g_leaves
            .iter()
            .map(|&l| g.grad(l).unwrap().clone())
            .collect();
        self.g_opt
            .step(self.generator.params_mut(), &grads, &[])
            .map_err(|e| self.name_param(e, false))?;
        Ok(g_loss)
    }

    /// Runs one epoch: shuffle, then a D step and a G step per full batch.
    /// The trailing partial batch is dropped.
    pub fn train_epoch(
        &mut self,
        data: &TrainingSet,
        sink: &mut dyn FnMut(LossRecord),
    ) -> Result<()> {
        let m = self.config.batch_size;
        if data.len() < m {
            return Err(Error::Precondition(format!(
                "dataset of {} samples is smaller than one batch of {m}",
                data.len()
            )));
        }
        if data.inputs.is_some() != self.noise.is_none() {
            return Err(Error::Precondition(
                "training set pairing does not match the generator".into(),
            ));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        for idx in order.chunks_exact(m) {
            let real = TrainingSet::batch(&data.targets, idx)?;
            let cond = match &data.inputs {
                Some(inputs) => Some(TrainingSet::batch(inputs, idx)?),
                None => None,
            };
            let d_loss = self.d_train_step(&real, cond.as_ref())?;
            let g_loss = self.g_train_step(cond.as_ref(), m)?;
            self.step += 1;
            let rec = LossRecord {
                epoch: self.epoch + 1,
                step: self.step,
                d_loss: d_loss as f64,
                g_loss: g_loss as f64,
            };
            if self.config.log_every > 0 && self.step.is_multiple_of(self.config.log_every) {
                info!(
                    "epoch {} step {}: d_loss {:.6} g_loss {:.6}",
                    rec.epoch, rec.step, rec.d_loss, rec.g_loss
                );
            }
            sink(rec);
        }
        self.epoch += 1;
        Ok(())
    }
}

fn check_pair(
    g_spec: &ModelSpec,
    d_spec: &ModelSpec,
    conditional: bool,
    dist: NoiseDistribution,
) -> Result<Option<NoiseSpec>> {
    if d_spec.output_shape() != [1] || !d_spec.ends_with_sigmoid() {
        return Err(Error::Precondition(
            "discriminator must end in a sigmoid over one value per sample".into(),
        ));
    }
    if !g_spec.ends_with_sigmoid() {
        return Err(Error::Precondition(
            "generator must end in a sigmoid".into(),
        ));
    }
    if g_spec.output_shape() != d_spec.input_shape() {
        return Err(Error::Shape {
            op: "generator output vs discriminator input",
            lhs: g_spec.output_shape().to_vec(),
            rhs: d_spec.input_shape().to_vec(),
        });
    }
    if conditional {
        if g_spec.input_shape() != g_spec.output_shape() {
            return Err(Error::Shape {
                op: "refinement generator",
                lhs: g_spec.input_shape().to_vec(),
                rhs: g_spec.output_shape().to_vec(),
            });
        }
        Ok(None)
    } else {
        NoiseSpec::for_generator(g_spec, dist).map(Some)
    }
}

/// Result of [`train_gan`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: GanTrainer,
    pub history: Vec<LossRecord>,
}

/// Trains a fresh pair for `config.epochs` epochs.
pub fn train_gan(
    g_spec: ModelSpec,
    d_spec: ModelSpec,
    data: &TrainingSet,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Precondition("empty training set".into()));
    }
    let epochs = config.epochs;
    let mut trainer = GanTrainer::new(g_spec, d_spec, config, data.inputs.is_some())?;
    let mut history = Vec::new();
    for _ in 0..epochs {
        trainer.train_epoch(data, &mut |r| history.push(r))?;
    }
    Ok(TrainOutcome { trainer, history })
}
