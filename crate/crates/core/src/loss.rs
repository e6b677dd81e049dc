//! Binary cross-entropy and the empirical minimax value.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_PROB_CLAMP: f64 = 1e-7;

/// Generator objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GLossVariant {
    /// `-E[log D(G(z))]`.
    #[default]
    NonSaturating,
    /// `E[log(1 - D(G(z)))]`, minimized directly. Takes negative values.
    Saturating,
}

impl fmt::Display for GLossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GLossVariant::NonSaturating => "non_saturating",
            GLossVariant::Saturating => "saturating",
        })
    }
}

impl FromStr for GLossVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "non_saturating" => Ok(Self::NonSaturating),
            "saturating" => Ok(Self::Saturating),
            _ => Err(format!("expected non_saturating or saturating, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub g_loss_variant: GLossVariant,
    pub prob_clamp: f64,
}

impl LossConfig {
    pub const LABEL_REAL: f64 = 1.0;
    pub const LABEL_FAKE: f64 = 0.0;

    pub fn validate(&self) -> Result<()> {
        if !(self.prob_clamp > 0.0 && self.prob_clamp <= 0.01) {
            return Err(Error::InvalidValue {
                key: "prob_clamp".into(),
                msg: format!("{} is outside (0, 0.01]", self.prob_clamp),
            });
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            g_loss_variant: GLossVariant::NonSaturating,
            prob_clamp: DEFAULT_PROB_CLAMP,
        }
    }
}

#[inline]
fn clamp<T: Scalar>(p: T, c: T) -> T {
    if p.is_nan() {
        return p;
    }
    p.max(c).min(T::one() - c)
}

/// `mean(-[y ln p + (1 - y) ln(1 - p)])` with `p` clamped to `[c, 1 - c]`.
pub fn bce<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, c: T) -> Result<T> {
    p.expect_same_shape("bce", y)?;
    let n = T::from_usize(p.len()).unwrap();
    let s: T = p
        .data()
        .iter()
        .zip(y.data())
        .map(|(&p, &y)| {
            let p = clamp(p, c);
            -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
        })
        .sum();
    Ok(s / n)
}

/// Gradient of [`bce`] with respect to `p`, scaled by `upstream`. Zero where
/// the clamp is active.
pub fn bce_grad<T: Scalar>(p: &Tensor<T>, y: &Tensor<T>, c: T, upstream: T) -> Result<Tensor<T>> {
    let n = T::from_usize(p.len()).unwrap();
    p.zip_map(y, |p, y| {
        if p < c || p > T::one() - c {
            T::zero()
        } else {
            upstream * (p - y) / (p * (T::one() - p) * n)
        }
    })
}

/// Empirical minimax value `mean(ln D(x)) + mean(ln(1 - D(G(z))))`, with the
/// same clamp as [`bce`].
pub fn value_function<T: Scalar>(d_real: &Tensor<T>, d_fake: &Tensor<T>, c: T) -> T {
    let mean_ln = |t: &Tensor<T>, f: &dyn Fn(T) -> T| {
        let s: T = t.data().iter().map(|&p| f(clamp(p, c)).ln()).sum();
        s / T::from_usize(t.len()).unwrap()
    };
    mean_ln(d_real, &|p| p) + mean_ln(d_fake, &|p| T::one() - p)
}

/// Labels tensor filled with the real (1) or fake (0) label.
pub fn labels<T: Scalar>(shape: &[usize], real: bool) -> Tensor<T> {
    let v = if real {
        LossConfig::LABEL_REAL
    } else {
        LossConfig::LABEL_FAKE
    };
    Tensor::full(shape.to_vec(), lit(v))
}
