//! Run configuration: a plain `key=value` file with `#` comments.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use advdenoise_core::params::ParamGroup;
use advdenoise_core::training::{AdversarialSpec, GeneratorLoss, PhasePlan};
use advdenoise_core::{LpConfig, MultiScaleConfig, NoiseSpec};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub branches: String,
    pub phase1_iters: u64,
    pub phase2_iters: u64,
    pub phase3_iters: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub lr_denoiser_adv: f64,
    pub lr_disc: f64,
    pub lr_disc_pretrain: f64,
    pub disc_pretrain_epochs: usize,
    pub disc_updates_per_iter: usize,
    pub disc_train_features: bool,
    pub disc_accuracy_window: usize,
    pub generator_loss: GeneratorLoss,
    pub dropout: f64,
    pub lp_p: f64,
    pub lp_eps: f64,
    pub lp_lambda: f64,
    pub lp_in_phase3: bool,
    pub freeze_features_phase3: bool,
    pub damping: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub log_every: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub train_dir: String,
    pub val_dir: String,
    pub crops_per_image: usize,
    pub synthetic_train_count: usize,
    pub synthetic_val_count: usize,
    pub synthetic_size: usize,
    pub validation_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let adv = AdversarialSpec::default();
        let lp = LpConfig::default();
        let noise = NoiseSpec::default();
        Self {
            seed: 0,
            branches: MultiScaleConfig::default().to_spec_string(),
            phase1_iters: 5000,
            phase2_iters: 5000,
            phase3_iters: 2000,
            batch_size: 8,
            crop_size: 64,
            lr_phase1: 1e-3,
            lr_phase2: 1e-3,
            lr_denoiser_adv: advdenoise_core::training::ADVERSARIAL_DENOISER_LR,
            lr_disc: adv.disc_lr,
            lr_disc_pretrain: adv.pretrain_lr,
            disc_pretrain_epochs: adv.pretrain_epochs,
            disc_updates_per_iter: adv.disc_updates_per_iteration,
            disc_train_features: adv.train_disc_features,
            disc_accuracy_window: adv.accuracy_window,
            generator_loss: adv.generator_loss,
            dropout: advdenoise_core::training::CLEAN_TO_CLEAN_DROPOUT,
            lp_p: lp.p,
            lp_eps: lp.eps,
            lp_lambda: lp.lambda,
            lp_in_phase3: true,
            freeze_features_phase3: true,
            damping: adv.damping,
            sigma_min: noise.sigma_min,
            sigma_max: noise.sigma_max,
            log_every: advdenoise_core::training::LOG_INTERVAL,
            eval_every: advdenoise_core::training::LOG_INTERVAL,
            checkpoint_every: 0,
            train_dir: String::new(),
            val_dir: String::new(),
            crops_per_image: 1,
            synthetic_train_count: 16,
            synthetic_val_count: 7,
            synthetic_size: 64,
            validation_seed: 0,
        }
    }
}

/// Every accepted key with a one-line description, in file order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for initialization, batches and noise"),
    ("branches", "feature branches as kernel:channels, comma separated"),
    ("phase1_iters", "clean-to-clean iterations"),
    ("phase2_iters", "noisy-to-clean iterations"),
    ("phase3_iters", "adversarial iterations"),
    ("batch_size", "images per mini-batch"),
    ("crop_size", "side of the square training crops"),
    ("lr_phase1", "Adam learning rate, clean-to-clean"),
    ("lr_phase2", "Adam learning rate, noisy-to-clean"),
    ("lr_denoiser_adv", "denoiser learning rate, adversarial phase"),
    ("lr_disc", "discriminator learning rate, adversarial phase"),
    ("lr_disc_pretrain", "discriminator learning rate during pretraining"),
    ("disc_pretrain_epochs", "discriminator pretraining epochs"),
    (
        "disc_updates_per_iter",
        "discriminator updates per adversarial iteration",
    ),
    (
        "disc_train_features",
        "train the discriminator conv stack (false: head only)",
    ),
    (
        "disc_accuracy_window",
        "predictions in the discriminator accuracy window",
    ),
    ("generator_loss", "non_saturating or saturating"),
    ("dropout", "drop probability after the feature layer in phase 1"),
    ("lp_p", "exponent of the lp regularizer"),
    ("lp_eps", "smoothing constant of the lp regularizer"),
    ("lp_lambda", "weight of the lp regularizer"),
    ("lp_in_phase3", "keep the lp regularizer in the adversarial phase"),
    (
        "freeze_features_phase3",
        "keep the feature layer frozen in the adversarial phase",
    ),
    ("damping", "damping factor s of the adversarial weight (1+st)/T"),
    ("sigma_min", "smallest training noise sigma (0-255 scale)"),
    ("sigma_max", "largest training noise sigma (0-255 scale)"),
    ("log_every", "iterations between metrics rows"),
    (
        "eval_every",
        "iterations between validation PSNR evaluations (0: phase end only)",
    ),
    (
        "checkpoint_every",
        "iterations between periodic checkpoints (0: phase end only)",
    ),
    (
        "train_dir",
        "directory of training images (empty: bundled synthetic set)",
    ),
    (
        "val_dir",
        "directory of validation images (empty: bundled synthetic set)",
    ),
    (
        "crops_per_image",
        "random crop_size crops cut once from each training image",
    ),
    ("synthetic_train_count", "number of synthetic training patches"),
    ("synthetic_val_count", "number of synthetic validation images"),
    ("synthetic_size", "side of the synthetic images"),
    (
        "validation_seed",
        "seed of the validation noise and synthetic validation set",
    ),
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "branches" => self.branches.clone(),
            "phase1_iters" => self.phase1_iters.to_string(),
            "phase2_iters" => self.phase2_iters.to_string(),
            "phase3_iters" => self.phase3_iters.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "crop_size" => self.crop_size.to_string(),
            "lr_phase1" => self.lr_phase1.to_string(),
            "lr_phase2" => self.lr_phase2.to_string(),
            "lr_denoiser_adv" => self.lr_denoiser_adv.to_string(),
            "lr_disc" => self.lr_disc.to_string(),
            "lr_disc_pretrain" => self.lr_disc_pretrain.to_string(),
            "disc_pretrain_epochs" => self.disc_pretrain_epochs.to_string(),
            "disc_updates_per_iter" => self.disc_updates_per_iter.to_string(),
            "disc_train_features" => self.disc_train_features.to_string(),
            "disc_accuracy_window" => self.disc_accuracy_window.to_string(),
            "generator_loss" => self.generator_loss.to_string(),
            "dropout" => self.dropout.to_string(),
            "lp_p" => self.lp_p.to_string(),
            "lp_eps" => self.lp_eps.to_string(),
            "lp_lambda" => self.lp_lambda.to_string(),
            "lp_in_phase3" => self.lp_in_phase3.to_string(),
            "freeze_features_phase3" => self.freeze_features_phase3.to_string(),
            "damping" => self.damping.to_string(),
            "sigma_min" => self.sigma_min.to_string(),
            "sigma_max" => self.sigma_max.to_string(),
            "log_every" => self.log_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "train_dir" => self.train_dir.clone(),
            "val_dir" => self.val_dir.clone(),
            "crops_per_image" => self.crops_per_image.to_string(),
            "synthetic_train_count" => self.synthetic_train_count.to_string(),
            "synthetic_val_count" => self.synthetic_val_count.to_string(),
            "synthetic_size" => self.synthetic_size.to_string(),
            "validation_seed" => self.validation_seed.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "branches" => self.branches = v.to_string(),
            "phase1_iters" => self.phase1_iters = parse_value(key, v)?,
            "phase2_iters" => self.phase2_iters = parse_value(key, v)?,
            "phase3_iters" => self.phase3_iters = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "crop_size" => self.crop_size = parse_value(key, v)?,
            "lr_phase1" => self.lr_phase1 = parse_value(key, v)?,
            "lr_phase2" => self.lr_phase2 = parse_value(key, v)?,
            "lr_denoiser_adv" => self.lr_denoiser_adv = parse_value(key, v)?,
            "lr_disc" => self.lr_disc = parse_value(key, v)?,
            "lr_disc_pretrain" => self.lr_disc_pretrain = parse_value(key, v)?,
            "disc_pretrain_epochs" => self.disc_pretrain_epochs = parse_value(key, v)?,
            "disc_updates_per_iter" => self.disc_updates_per_iter = parse_value(key, v)?,
            "disc_train_features" => self.disc_train_features = parse_value(key, v)?,
            "disc_accuracy_window" => self.disc_accuracy_window = parse_value(key, v)?,
            "generator_loss" => self.generator_loss = parse_value(key, v)?,
            "dropout" => self.dropout = parse_value(key, v)?,
            "lp_p" => self.lp_p = parse_value(key, v)?,
            "lp_eps" => self.lp_eps = parse_value(key, v)?,
            "lp_lambda" => self.lp_lambda = parse_value(key, v)?,
            "lp_in_phase3" => self.lp_in_phase3 = parse_value(key, v)?,
            "freeze_features_phase3" => self.freeze_features_phase3 = parse_value(key, v)?,
            "damping" => self.damping = parse_value(key, v)?,
            "sigma_min" => self.sigma_min = parse_value(key, v)?,
            "sigma_max" => self.sigma_max = parse_value(key, v)?,
            "log_every" => self.log_every = parse_value(key, v)?,
            "eval_every" => self.eval_every = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "train_dir" => self.train_dir = v.to_string(),
            "val_dir" => self.val_dir = v.to_string(),
            "crops_per_image" => self.crops_per_image = parse_value(key, v)?,
            "synthetic_train_count" => self.synthetic_train_count = parse_value(key, v)?,
            "synthetic_val_count" => self.synthetic_val_count = parse_value(key, v)?,
            "synthetic_size" => self.synthetic_size = parse_value(key, v)?,
            "validation_seed" => self.validation_seed = parse_value(key, v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses a config file on top of the defaults. Unknown and repeated keys
    /// are errors.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config(format!("line {}: {msg}", i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found `{line}`")))?;
            let key = key.trim();
            if seen.contains(&key) {
                return Err(err(format!("`{key}` is set twice")));
            }
            cfg.set(key, value.trim()).map_err(err)?;
            seen.push(key);
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical serialization: every key in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            let _ = writeln!(out, "{key}={}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn pairs(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|(k, _)| (k.to_string(), self.get(k).expect("listed key")))
            .collect()
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn model_config(&self) -> Result<MultiScaleConfig, CliError> {
        MultiScaleConfig::parse_spec(&self.branches).map_err(CliError::from)
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
        }
    }

    pub fn lp(&self) -> LpConfig {
        LpConfig {
            p: self.lp_p,
            eps: self.lp_eps,
            lambda: self.lp_lambda,
        }
    }

    pub fn train_dir(&self) -> Option<PathBuf> {
        (!self.train_dir.is_empty()).then(|| PathBuf::from(&self.train_dir))
    }

    pub fn val_dir(&self) -> Option<PathBuf> {
        (!self.val_dir.is_empty()).then(|| PathBuf::from(&self.val_dir))
    }

    fn common(&self, mut plan: PhasePlan, learning_rate: f64) -> PhasePlan {
        plan.crop_size = self.crop_size;
        plan.learning_rate = learning_rate;
        plan.log_every = self.log_every;
        plan.eval_every = (self.eval_every > 0).then_some(self.eval_every);
        plan.validation_seed = self.validation_seed;
        plan
    }

    /// The three phase plans, validated.
    pub fn plans(&self) -> Result<[PhasePlan; 3], CliError> {
        self.model_config()?;
        if self.crops_per_image == 0 || self.synthetic_train_count == 0 || self.synthetic_val_count == 0 {
            return Err(CliError::Config(
                "crop and synthetic image counts must be positive".into(),
            ));
        }
        if self.synthetic_size < self.crop_size {
            return Err(CliError::Config(format!(
                "synthetic_size {} is smaller than crop_size {}",
                self.synthetic_size, self.crop_size
            )));
        }
        let mut p1 = self.common(
            PhasePlan::clean_to_clean(self.phase1_iters, self.batch_size, self.seed),
            self.lr_phase1,
        );
        p1.dropout = Some(self.dropout);

        let mut p2 = self.common(
            PhasePlan::noisy_to_clean(self.phase2_iters, self.batch_size, self.seed),
            self.lr_phase2,
        );
        p2.lp = Some(self.lp());
        p2.noise = Some(self.noise());

        let mut p3 = self.common(
            PhasePlan::adversarial(self.phase3_iters, self.batch_size, self.seed),
            self.lr_denoiser_adv,
        );
        p3.lp = self.lp_in_phase3.then(|| self.lp());
        p3.noise = Some(self.noise());
        p3.frozen = if self.freeze_features_phase3 {
            vec![ParamGroup::Features]
        } else {
            Vec::new()
        };
        p3.adversarial = Some(AdversarialSpec {
            damping: self.damping,
            generator_loss: self.generator_loss,
            disc_lr: self.lr_disc,
            disc_updates_per_iteration: self.disc_updates_per_iter,
            pretrain_epochs: self.disc_pretrain_epochs,
            pretrain_lr: self.lr_disc_pretrain,
            train_disc_features: self.disc_train_features,
            accuracy_window: self.disc_accuracy_window,
        });

        for plan in [&p1, &p2, &p3] {
            plan.validate().map_err(CliError::from)?;
        }
        Ok([p1, p2, p3])
    }

    /// `--help` text listing every key with its default.
    pub fn help_text() -> String {
        let defaults = Self::default();
        let mut out = String::from("Config keys (key=value, one per line, '#' starts a comment):\n");
        for (key, doc) in KEYS {
            let _ = writeln!(
                out,
                "  {key:<24} {doc} [default: {}]",
                defaults.get(key).expect("listed key")
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_round_trips() {
        let cfg = RunConfig::default();
        for (key, _) in KEYS {
            let mut other = RunConfig::default();
            other.set(key, &cfg.get(key).unwrap()).unwrap();
            assert_eq!(other, cfg, "{key}");
        }
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn defaults_echo_the_training_constants() {
        let text = RunConfig::default().to_text();
        for line in [
            "lp_p=0.1",
            "dropout=0.7",
            "damping=0.99",
            "lr_denoiser_adv=0.00001",
            "lr_disc=0.000001",
            "disc_updates_per_iter=2",
            "disc_pretrain_epochs=10",
            "branches=3:32,5:40,7:48,9:56,11:64",
        ] {
            assert!(text.lines().any(|l| l == line), "missing {line}");
        }
        RunConfig::default().plans().unwrap();
    }

    #[test]
    fn comments_blank_lines_and_whitespace() {
        let cfg = RunConfig::parse("# header\n\n  seed = 42  # trailing\nbatch_size=2\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.batch_size, 2);
    }

    #[test]
    fn bad_files_are_rejected_with_line_numbers() {
        for (text, needle) in [
            ("seed=1\nlearning_rate=3\n", "line 2"),
            ("seed=1\nseed=2\n", "twice"),
            ("seed\n", "key=value"),
            ("batch_size=-1\n", "invalid value"),
        ] {
            match RunConfig::parse(text) {
                Err(CliError::Config(msg)) => assert!(msg.contains(needle), "{msg}"),
                other => panic!("expected config error, got {other:?}"),
            }
        }
    }

    #[test]
    fn hash_tracks_every_key() {
        let base = RunConfig::default();
        let mut changed = base.clone();
        changed.lp_lambda = 2e-4;
        assert_ne!(base.hash(), changed.hash());
        assert_eq!(base.hash(), RunConfig::default().hash());
        assert_eq!(base.hash().len(), 64);
    }

    #[test]
    fn invalid_values_fail_validation() {
        for (key, value) in [("dropout", "1.5"), ("sigma_min", "40"), ("branches", "3:32,5:40")] {
            let mut cfg = RunConfig::default();
            cfg.set(key, value).unwrap();
            assert!(cfg.plans().is_err(), "{key}={value}");
        }
    }
}
