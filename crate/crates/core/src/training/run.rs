//! Drives a whole training phase: batching, logging, validation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{random_crop, ImagePatch};
use crate::denoiser::DenoiserModel;
use crate::discriminator::{AccuracyMeter, Discriminator};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_validation, ValidationReport, VALIDATION_SIGMAS};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamGroup;
use crate::tensor::Tensor;
use crate::training::plan::{Phase, PhasePlan};
use crate::training::record::MetricsRecord;
use crate::training::schedule::LossSchedule;
use crate::training::steps::{
    phase1_step, phase2_step, phase3_iteration, pretrain_discriminator, AdversarialOptimizers, StepStats,
};

#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub train: &'a [ImagePatch],
    pub validation: &'a [ImagePatch],
}

/// Callbacks invoked while a phase runs.
pub trait PhaseObserver {
    fn on_record(&mut self, _record: &MetricsRecord) -> Result<()> {
        Ok(())
    }

    /// Called after every completed iteration `iter` (1-based).
    fn on_iteration(
        &mut self,
        _iter: u64,
        _model: &DenoiserModel<f32>,
        _disc: Option<&Discriminator<f32>>,
    ) -> Result<()> {
        Ok(())
    }
}

impl PhaseObserver for () {}

impl PhaseObserver for Vec<MetricsRecord> {
    fn on_record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub phase: Phase,
    pub records: Vec<MetricsRecord>,
    pub last_step: StepStats,
    pub last_validation: Option<ValidationReport>,
    pub disc_accuracy: Option<f64>,
    /// Discriminator accuracy after pretraining, before the first iteration.
    pub pretrain_accuracy: Option<f64>,
    pub denoiser_updates: u64,
    pub disc_updates: u64,
}

/// Puts `model` in the configuration `plan` trains: skip mode, dropout,
/// frozen groups and lp settings.
pub fn configure_model(plan: &PhasePlan, model: &mut DenoiserModel<f32>) -> Result<()> {
    model.set_skip_mode(plan.skip_mode);
    model.set_dropout(plan.dropout)?;
    model.set_trainable(
        &[ParamGroup::Features, ParamGroup::Gating, ParamGroup::Reconstruction],
        true,
    );
    model.set_trainable(&plan.frozen, false);
    if let Some(lp) = plan.lp {
        model.set_lp_config(lp)?;
    }
    Ok(())
}

fn sample_batch<R: Rng + ?Sized>(
    images: &[ImagePatch],
    batch_size: usize,
    crop_size: usize,
    rng: &mut R,
) -> Result<Vec<Tensor<f32>>> {
    (0..batch_size)
        .map(|_| {
            let img = &images[rng.random_range(0..images.len())];
            Ok(random_crop(img, crop_size, rng)?.pixels)
        })
        .collect()
}

fn phase_stream(plan: &PhasePlan) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(plan.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(plan.phase.number() as u64)))
}

/// Runs all iterations of `plan` on `model` (and `disc` for the adversarial
/// phase). A record is emitted every `log_every` iterations and after the
/// last one; validation PSNR is attached on iterations divisible by
/// `eval_every` and on the last one.
pub fn run_phase(
    plan: &PhasePlan,
    model: &mut DenoiserModel<f32>,
    mut disc: Option<&mut Discriminator<f32>>,
    data: TrainingData<'_>,
    observer: &mut dyn PhaseObserver,
) -> Result<PhaseOutcome> {
    plan.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if plan.phase == Phase::Adversarial && disc.is_none() {
        return Err(Error::Config("the adversarial phase needs a discriminator".into()));
    }
    configure_model(plan, model)?;
    let mut rng = phase_stream(plan);
    let mut opt = Adam::new(AdamConfig::new(plan.learning_rate));
    let lambda = plan.lp.map_or(0.0, |lp| lp.lambda);
    let noise = plan.noise.unwrap_or_default();

    let mut adversarial = None;
    let mut pretrain_accuracy = None;
    if let (Phase::Adversarial, Some(spec), Some(d)) = (plan.phase, plan.adversarial.as_ref(), disc.as_deref_mut()) {
        d.set_trainable(&[ParamGroup::Features, ParamGroup::Head], true);
        if !spec.train_disc_features {
            d.set_trainable(&[ParamGroup::Features], false);
        }
        if spec.pretrain_epochs > 0 {
            let mut pre_opt = Adam::new(AdamConfig::new(spec.pretrain_lr));
            let frozen_model = model.clone();
            let crops = data
                .train
                .iter()
                .map(|img| random_crop(img, plan.crop_size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let meter = pretrain_discriminator(
                d,
                &mut pre_opt,
                &frozen_model,
                &crops,
                &noise,
                spec.pretrain_epochs,
                plan.batch_size,
                plan.crop_size,
                spec.accuracy_window,
                &mut rng,
            )?;
            pretrain_accuracy = Some(meter.accuracy());
        }
        adversarial = Some((
            spec.clone(),
            LossSchedule::new(spec.damping, plan.iterations)?,
            AdversarialOptimizers {
                denoiser: Adam::new(AdamConfig::new(plan.learning_rate)),
                discriminator: Adam::new(AdamConfig::new(spec.disc_lr)),
            },
            AccuracyMeter::new(spec.accuracy_window),
        ));
    }

    let mut records = Vec::new();
    let mut last_step = StepStats::default();
    let mut last_validation = None;
    let mut disc_accuracy = None;
    let (mut denoiser_updates, mut disc_updates) = (0u64, 0u64);

    for t in 1..=plan.iterations {
        let batch = sample_batch(data.train, plan.batch_size, plan.crop_size, &mut rng)?;
        last_step = match plan.phase {
            Phase::CleanToClean => phase1_step(model, &mut opt, &batch, &mut rng)?,
            Phase::NoisyToClean => phase2_step(model, &mut opt, &batch, &noise, lambda, &mut rng)?,
            Phase::Adversarial => {
                let (spec, schedule, opts, meter) = adversarial.as_mut().expect("adversarial state");
                let d = disc.as_deref_mut().expect("discriminator present");
                let extra = (1..spec.disc_updates_per_iteration)
                    .map(|_| sample_batch(data.train, plan.batch_size, plan.crop_size, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let weight = schedule.weight(t)?;
                let stats = phase3_iteration(
                    model, d, opts, &batch, &extra, &noise, weight, spec, lambda, meter, &mut rng,
                )?;
                disc_updates += stats.disc_updates as u64;
                disc_accuracy = Some(stats.disc_accuracy);
                stats.step
            }
        };
        denoiser_updates += 1;

        let last = t == plan.iterations;
        if t % plan.log_every == 0 || last {
            let evaluate = !data.validation.is_empty() && (last || plan.eval_every.is_some_and(|e| t % e == 0));
            let mut psnr = [None; 4];
            if evaluate {
                let report = evaluate_validation(&*model, data.validation, &VALIDATION_SIGMAS, plan.validation_seed)?;
                for (slot, &sigma) in psnr.iter_mut().zip(VALIDATION_SIGMAS.iter()) {
                    *slot = report.mean_denoised(sigma);
                }
                last_validation = Some(report);
            }
            let record = MetricsRecord {
                iter: t,
                phase: plan.phase,
                l_deno: last_step.l_deno,
                l_adv: last_step.l_adv,
                weight: last_step.weight,
                total_loss: last_step.total,
                disc_accuracy,
                psnr,
            };
            observer.on_record(&record)?;
            records.push(record);
        }
        observer.on_iteration(t, model, disc.as_deref())?;
    }

    Ok(PhaseOutcome {
        phase: plan.phase,
        records,
        last_step,
        last_validation,
        disc_accuracy,
        pretrain_accuracy,
        denoiser_updates,
        disc_updates,
    })
}
