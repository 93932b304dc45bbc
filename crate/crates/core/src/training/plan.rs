use std::fmt;
use std::str::FromStr;

use crate::denoiser::{LpConfig, SkipMode};
use crate::error::{Error, Result};
use crate::params::ParamGroup;
use crate::training::noise::NoiseSpec;
use crate::training::schedule::DAMPING;

/// Heavy dropout applied after the feature layer in the first phase.
pub const CLEAN_TO_CLEAN_DROPOUT: f64 = 0.7;
/// Denoiser learning rate during adversarial training.
pub const ADVERSARIAL_DENOISER_LR: f64 = 1e-5;
/// Discriminator learning rate during adversarial training.
pub const DISCRIMINATOR_LR: f64 = 1e-6;
/// Discriminator updates per adversarial iteration.
pub const DISCRIMINATOR_UPDATES_PER_ITERATION: usize = 2;
/// Discriminator warm-up epochs before adversarial training.
pub const DISCRIMINATOR_PRETRAIN_EPOCHS: usize = 10;
/// Metrics are logged every this many iterations.
pub const LOG_INTERVAL: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    CleanToClean,
    NoisyToClean,
    Adversarial,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::CleanToClean => 1,
            Phase::NoisyToClean => 2,
            Phase::Adversarial => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(Phase::CleanToClean),
            2 => Some(Phase::NoisyToClean),
            3 => Some(Phase::Adversarial),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::CleanToClean => "clean_to_clean",
            Phase::NoisyToClean => "noisy_to_clean",
            Phase::Adversarial => "adversarial",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Phase::CleanToClean, Phase::NoisyToClean, Phase::Adversarial]
            .into_iter()
            .find(|p| p.name() == s || p.number().to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown phase `{s}`")))
    }
}

/// Form of the denoiser's adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorLoss {
    /// Minimize `-log D(G(x))`.
    NonSaturating,
    /// Minimize `log(1 - D(G(x)))`.
    Saturating,
}

impl FromStr for GeneratorLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            "saturating" => Ok(GeneratorLoss::Saturating),
            other => Err(Error::Config(format!("unknown generator loss `{other}`"))),
        }
    }
}

impl fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GeneratorLoss::NonSaturating => "non_saturating",
            GeneratorLoss::Saturating => "saturating",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialSpec {
    pub damping: f64,
    pub generator_loss: GeneratorLoss,
    pub disc_lr: f64,
    pub disc_updates_per_iteration: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Train the discriminator's conv stack too, not only its head.
    pub train_disc_features: bool,
    pub accuracy_window: usize,
}

impl Default for AdversarialSpec {
    fn default() -> Self {
        Self {
            damping: DAMPING,
            generator_loss: GeneratorLoss::NonSaturating,
            disc_lr: DISCRIMINATOR_LR,
            disc_updates_per_iteration: DISCRIMINATOR_UPDATES_PER_ITERATION,
            pretrain_epochs: DISCRIMINATOR_PRETRAIN_EPOCHS,
            pretrain_lr: 1e-3,
            train_disc_features: true,
            accuracy_window: 64,
        }
    }
}

/// Configuration of one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePlan {
    pub phase: Phase,
    pub iterations: u64,
    pub batch_size: usize,
    /// Side of the random training crops; patches smaller than this are rejected.
    pub crop_size: usize,
    pub skip_mode: SkipMode,
    pub dropout: Option<f64>,
    pub frozen: Vec<ParamGroup>,
    pub learning_rate: f64,
    pub lp: Option<LpConfig>,
    pub noise: Option<NoiseSpec>,
    pub adversarial: Option<AdversarialSpec>,
    pub seed: u64,
    pub log_every: u64,
    /// Validation PSNR is computed on logged iterations divisible by this.
    pub eval_every: Option<u64>,
    pub validation_seed: u64,
}

impl PhasePlan {
    pub fn clean_to_clean(iterations: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            phase: Phase::CleanToClean,
            iterations,
            batch_size,
            crop_size: 64,
            skip_mode: SkipMode::ShortCircuit,
            dropout: Some(CLEAN_TO_CLEAN_DROPOUT),
            frozen: vec![ParamGroup::Gating],
            learning_rate: 1e-3,
            lp: None,
            noise: None,
            adversarial: None,
            seed,
            log_every: LOG_INTERVAL,
            eval_every: Some(LOG_INTERVAL),
            validation_seed: 0,
        }
    }

    pub fn noisy_to_clean(iterations: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            phase: Phase::NoisyToClean,
            skip_mode: SkipMode::Gated,
            dropout: None,
            frozen: vec![ParamGroup::Features],
            lp: Some(LpConfig::default()),
            noise: Some(NoiseSpec::default()),
            ..Self::clean_to_clean(iterations, batch_size, seed)
        }
    }

    pub fn adversarial(iterations: u64, batch_size: usize, seed: u64) -> Self {
        Self {
            phase: Phase::Adversarial,
            learning_rate: ADVERSARIAL_DENOISER_LR,
            adversarial: Some(AdversarialSpec::default()),
            ..Self::noisy_to_clean(iterations, batch_size, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("{} plan: {msg}", self.phase)));
        if self.iterations == 0 || self.batch_size == 0 || self.crop_size == 0 || self.log_every == 0 {
            return bad("iterations, batch size, crop size and log interval must be positive");
        }
        if self.eval_every == Some(0) {
            return bad("evaluation interval must be positive");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if let Some(lp) = &self.lp {
            lp.validate()?;
        }
        if let Some(n) = &self.noise {
            n.validate()?;
        }
        match self.phase {
            Phase::CleanToClean => {
                if self.skip_mode != SkipMode::ShortCircuit {
                    return bad("the gating block must be short-circuited");
                }
                if !matches!(self.dropout, Some(p) if p > 0.0 && p < 1.0) {
                    return bad("dropout after the feature layer must be active");
                }
                if self.lp.is_some() || self.adversarial.is_some() || self.noise.is_some() {
                    return bad("only the reconstruction loss on clean inputs is allowed");
                }
                if !self.frozen.contains(&ParamGroup::Gating) {
                    return bad("the gating block does not take part in training");
                }
            }
            Phase::NoisyToClean | Phase::Adversarial => {
                if self.skip_mode != SkipMode::Gated {
                    return bad("the gating block must be active");
                }
                if self.dropout.is_some() {
                    return bad("dropout is removed after the first phase");
                }
                if self.noise.is_none() {
                    return bad("noisy inputs are required");
                }
                if self.phase == Phase::NoisyToClean {
                    if !self.frozen.contains(&ParamGroup::Features) {
                        return bad("the feature layer must be frozen");
                    }
                    if self.lp.is_none() {
                        return bad("the lp regularizer must be active");
                    }
                    if self.adversarial.is_some() {
                        return bad("no adversarial term before the third phase");
                    }
                } else {
                    let Some(adv) = &self.adversarial else {
                        return bad("the scheduled adversarial term is required");
                    };
                    if adv.disc_updates_per_iteration == 0 || adv.accuracy_window == 0 {
                        return bad("discriminator updates and accuracy window must be positive");
                    }
                    if !(adv.disc_lr > 0.0 && adv.pretrain_lr > 0.0) {
                        return bad("discriminator learning rates must be positive");
                    }
                }
            }
        }
        Ok(())
    }
}
