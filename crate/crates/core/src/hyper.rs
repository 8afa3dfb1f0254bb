//! Training hyperparameters and the diminishing weight schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Harmonic decay `v(t) = initial / (1 + decay·t)` over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial: f64,
    pub decay: f64,
}

impl Schedule {
    pub const fn new(initial: f64, decay: f64) -> Self {
        Self { initial, decay }
    }

    pub fn value(&self, epoch: usize) -> f64 {
        self.initial / (1.0 + self.decay * epoch as f64)
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.initial >= 0.0 && self.decay >= 0.0) || !self.initial.is_finite() {
            return Err(Error::Config(format!(
                "{name} schedule needs finite initial >= 0 and decay >= 0"
            )));
        }
        Ok(())
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::new(1.0, 0.1)
    }
}

/// How expected-loss strategies average over top-layer hidden states.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpectedLossEstimator {
    /// Exact enumeration when the top layer has at most
    /// `Hyper::enumeration_max_units` units, sampling otherwise.
    #[default]
    Auto,
    Exact,
    Sampled,
}

/// How the bilevel penalty obtains layer gradients and Hessian-vector
/// products.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    /// Exact enumeration; tiny layers only.
    Exact,
    /// Contrastive-divergence gradient and a central difference of it along
    /// the gradient direction with shared random numbers.
    #[default]
    FdCd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub pretrain_lr: f64,
    pub pretrain_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    /// Gibbs steps for contrastive divergence.
    pub cd_k: usize,
    /// Box radius for the boxed strategies; `inf` disables the box.
    #[serde(with = "radius")]
    pub delta: f64,
    /// Weight on the likelihood term of DBN+loss.
    pub rho: Schedule,
    /// Weight on the bilevel stationarity penalty.
    pub mu: Schedule,
    pub expected_loss: ExpectedLossEstimator,
    pub enumeration_max_units: usize,
    /// Monte Carlo sample count for sampled expected loss.
    pub mc_samples: usize,
    pub hvp: HvpMode,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            pretrain_lr: 0.01,
            pretrain_epochs: 100,
            finetune_lr: 0.1,
            finetune_epochs: 300,
            batch_size: 10,
            cd_k: 1,
            delta: 0.1,
            rho: Schedule::default(),
            mu: Schedule::default(),
            expected_loss: ExpectedLossEstimator::Auto,
            enumeration_max_units: 12,
            mc_samples: 10,
            hvp: HvpMode::FdCd,
            seed: 0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and positive")))
            }
        };
        positive("pretrain_lr", self.pretrain_lr)?;
        positive("finetune_lr", self.finetune_lr)?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.cd_k == 0 {
            return Err(Error::Config("cd_k must be at least 1".into()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        if self.enumeration_max_units > 20 {
            return Err(Error::Config("enumeration_max_units is capped at 20".into()));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::Config("delta must be >= 0".into()));
        }
        self.rho.validate("rho")?;
        self.mu.validate("mu")?;
        Ok(())
    }
}

/// Box radius that may be infinite; JSON has no infinity, so it travels as
/// the string `"inf"`.
mod radius {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) if matches!(t.as_str(), "inf" | "+inf" | "infinity") => Ok(f64::INFINITY),
            Repr::Text(t) => Err(serde::de::Error::custom(format!("bad radius {t:?}"))),
        }
    }
}
