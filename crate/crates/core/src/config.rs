//! Flat `key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::to_canonical`] writes every key in a fixed order;
//! parsing that output gives back the same configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cascade::CascadeConfig;
use crate::error::{Error, Result};
use crate::loss::{GLossVariant, LossConfig};
use crate::model::{GeneratorVariant, DEFAULT_LEAKY_ALPHA};
use crate::noise::NoiseDistribution;
use crate::tiers::DEFAULT_FACTORS;
use crate::train::TrainConfig;

/// Every key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("epochs", "2000", "training epochs per stage"),
    ("batch_size", "8", "minibatch size (>= 2)"),
    ("lr_g", "0.0001", "generator Adam learning rate"),
    ("lr_d", "0.00001", "discriminator Adam learning rate"),
    ("seed", "0", "seed for initialization, shuffling and noise"),
    (
        "g_loss",
        "non_saturating",
        "generator objective: non_saturating | saturating",
    ),
    ("log_every", "50", "log progress every N steps (0 = never)"),
    (
        "generator",
        "latent_upsample",
        "first-stage generator: latent_upsample | dense_noise",
    ),
    (
        "noise",
        "normal",
        "first-stage noise distribution: normal | uniform",
    ),
    ("leaky_alpha", "0.2", "leaky ReLU negative slope"),
    (
        "init_std",
        "0.02",
        "std of the normal weight initialization",
    ),
    ("beta1", "0.9", "Adam beta1"),
    ("beta2", "0.999", "Adam beta2"),
    ("adam_eps", "0.00000001", "Adam epsilon"),
    (
        "prob_clamp",
        "0.0000001",
        "probability clamp before log, in (0, 0.01]",
    ),
    (
        "checkpoint_every",
        "50",
        "write a checkpoint every N epochs",
    ),
    ("size", "128", "square image size used by prepare"),
    ("factors", "8,4,2", "tier factors, strictly decreasing"),
    ("workdir", "work", "working directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub generator: GeneratorVariant,
    pub leaky_alpha: f64,
    pub checkpoint_every: u32,
    pub size: usize,
    pub factors: Vec<usize>,
    pub workdir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            generator: GeneratorVariant::default(),
            leaky_alpha: DEFAULT_LEAKY_ALPHA,
            checkpoint_every: 50,
            size: 128,
            factors: DEFAULT_FACTORS.to_vec(),
            workdir: PathBuf::from("work"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::InvalidValue {
        key: key.into(),
        msg: format!("`{v}` is not a valid number"),
    })
}

fn parse_enum<T: std::str::FromStr<Err = String>>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|msg| Error::InvalidValue {
        key: key.into(),
        msg,
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::InvalidValue {
                key: format!("line {}", n + 1),
                msg: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Writes the canonical form atomically.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::losslog::write_atomic(path, self.to_canonical().as_bytes())
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "lr_g" => t.lr_g = parse_num(key, v)?,
            "lr_d" => t.lr_d = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "g_loss" => t.loss.g_loss_variant = parse_enum::<GLossVariant>(key, v)?,
            "log_every" => t.log_every = parse_num(key, v)?,
            "generator" => self.generator = parse_enum(key, v)?,
            "noise" => t.noise = parse_enum::<NoiseDistribution>(key, v)?,
            "leaky_alpha" => self.leaky_alpha = parse_num(key, v)?,
            "init_std" => t.init_std = parse_num(key, v)?,
            "beta1" => t.beta1 = parse_num(key, v)?,
            "beta2" => t.beta2 = parse_num(key, v)?,
            "adam_eps" => t.adam_eps = parse_num(key, v)?,
            "prob_clamp" => t.loss.prob_clamp = parse_num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "size" => self.size = parse_num(key, v)?,
            "factors" => {
                self.factors = v
                    .split(',')
                    .map(|f| parse_num(key, f.trim()))
                    .collect::<Result<Vec<usize>>>()?
            }
            "workdir" => self.workdir = PathBuf::from(v),
            _ => return Err(Error::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, then validates.
    pub fn apply_overrides<'a>(
        &mut self,
        overrides: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::InvalidValue {
                key: o.into(),
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |key: &str, msg: String| {
            Err(Error::InvalidValue {
                key: key.into(),
                msg,
            })
        };
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return bad(
                "leaky_alpha",
                format!("{} is outside (0, 1)", self.leaky_alpha),
            );
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be >= 1".into());
        }
        if self.size < 16 || !self.size.is_power_of_two() {
            return bad("size", format!("{} is not a power of two >= 16", self.size));
        }
        if self.factors.is_empty()
            || self.factors.windows(2).any(|p| p[0] <= p[1])
            || self
                .factors
                .iter()
                .any(|&f| f < 2 || !self.size.is_multiple_of(f))
        {
            return bad(
                "factors",
                format!(
                    "{:?} must be strictly decreasing, >= 2 and divide {}",
                    self.factors, self.size
                ),
            );
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        match key {
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "lr_g" => t.lr_g.to_string(),
            "lr_d" => t.lr_d.to_string(),
            "seed" => t.seed.to_string(),
            "g_loss" => t.loss.g_loss_variant.to_string(),
            "log_every" => t.log_every.to_string(),
            "generator" => self.generator.to_string(),
            "noise" => t.noise.to_string(),
            "leaky_alpha" => self.leaky_alpha.to_string(),
            "init_std" => t.init_std.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "adam_eps" => t.adam_eps.to_string(),
            "prob_clamp" => t.loss.prob_clamp.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "size" => self.size.to_string(),
            "factors" => self
                .factors
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "workdir" => self.workdir.display().to_string(),
            _ => unreachable!("{key} is not a config key"),
        }
    }

    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for (k, _, _) in KEYS {
            let _ = writeln!(out, "{k}={}", self.value_of(k));
        }
        out
    }

    pub fn cascade(&self) -> CascadeConfig {
        CascadeConfig {
            train: self.train.clone(),
            generator: self.generator,
            leaky_alpha: self.leaky_alpha,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn loss(&self) -> &LossConfig {
        &self.train.loss
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_table() {
        let d = RunConfig::default();
        let canon = d.to_canonical();
        for (line, (k, default, _)) in canon.lines().zip(KEYS) {
            assert_eq!(line, format!("{k}={default}"));
        }
        assert_eq!(RunConfig::parse("").unwrap(), d);
    }

    #[test]
    fn canonical_is_stable() {
        let cfg = RunConfig::parse(
            "# comment\nepochs = 20\nlr_g=0.0003\nfactors=4,2\nsize=32\ng_loss=saturating\n",
        )
        .unwrap();
        let once = cfg.to_canonical();
        let again = RunConfig::parse(&once).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_canonical(), once);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(
            matches!(RunConfig::parse("learning_rate=1"), Err(Error::UnknownKey(k)) if k == "learning_rate")
        );
        assert!(matches!(
            RunConfig::parse("epochs=many"),
            Err(Error::InvalidValue { .. })
        ));
        assert!(RunConfig::parse("batch_size=1").is_err());
        assert!(RunConfig::parse("factors=2,4").is_err());
        assert!(RunConfig::parse("factors=3").is_err());
        assert!(RunConfig::parse("just text").is_err());
    }

    #[test]
    fn overrides() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(["epochs=3", "seed=9"]).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.seed), (3, 9));
        assert!(cfg.apply_overrides(["bogus=1"]).is_err());
    }
}
