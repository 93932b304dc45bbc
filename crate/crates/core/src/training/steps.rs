//! Single optimization steps of the three training phases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{random_crop, ImagePatch};
use crate::denoiser::{DenoiserModel, LpConfig, SkipMode};
use crate::discriminator::{AccuracyMeter, Discriminator};
use crate::error::{Error, Result};
use crate::metrics::Denoise;
use crate::optim::Adam;
use crate::params::{accumulate_grads, ParamGroup};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};
use crate::training::noise::NoiseSpec;
use crate::training::plan::{AdversarialSpec, GeneratorLoss};

/// Losses of one denoiser update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    /// Mean squared reconstruction error.
    pub l_deno: f64,
    /// Mean adversarial term of the denoiser (0 outside the third phase).
    pub l_adv: f64,
    /// Weight of the adversarial term.
    pub weight: f64,
    /// `l_deno + weight * l_adv`.
    pub total: f64,
    /// `lambda * lp`, added to the optimized objective on top of `total`.
    pub lp_term: f64,
}

struct ItemResult<T> {
    mse: f64,
    adv: f64,
    grads: Vec<Option<Tensor<T>>>,
}

struct Adversary<'a, T> {
    disc: &'a Discriminator<T>,
    weight: f64,
    loss: GeneratorLoss,
}

fn item_grads<T: Real>(
    model: &DenoiserModel<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    dropout_seed: Option<u64>,
    adversary: Option<&Adversary<'_, T>>,
) -> Result<ItemResult<T>> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let x = tape.constant(input.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed.unwrap_or(0));
    let fwd = model.forward_on_tape(&mut tape, &params, x, true, &mut rng)?;
    let y = tape.constant(target.clone());
    let mse = tape.mse_loss(fwd.output, y)?;
    let (loss, adv) = match adversary {
        None => (mse, 0.0),
        Some(a) => {
            let dparams = a.disc.bind_frozen(&mut tape);
            let clamped = tape.clamp(fwd.output, T::zero(), T::one());
            let prob = a.disc.forward_on_tape(&mut tape, &dparams, clamped)?;
            let term = match a.loss {
                GeneratorLoss::NonSaturating => tape.bce(prob, 1.0)?,
                GeneratorLoss::Saturating => {
                    let b = tape.bce(prob, 0.0)?;
                    tape.scale(b, -T::one())
                }
            };
            let scaled = tape.scale(term, T::from_f64_lossy(a.weight));
            let adv = tape.value(term).item().as_f64();
            (tape.add(mse, scaled)?, adv)
        }
    };
    let mse_value = tape.value(mse).item().as_f64();
    let mut grads = tape.backward(loss)?;
    Ok(ItemResult {
        mse: mse_value,
        adv,
        grads: model.params().collect_grads(&params, &mut grads),
    })
}

/// Averaged gradients of a denoiser batch; items run in parallel and are
/// reduced in batch order.
fn batch_update<T: Real, R: Rng + ?Sized>(
    model: &DenoiserModel<T>,
    pairs: &[(Tensor<T>, Tensor<T>)],
    adversary: Option<&Adversary<'_, T>>,
    rng: &mut R,
) -> Result<(f64, f64, Vec<Option<Tensor<T>>>)> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("training batch is empty".into()));
    }
    let seeds: Vec<Option<u64>> = pairs
        .iter()
        .map(|_| model.dropout().map(|_| rng.random::<u64>()))
        .collect();
    let results = pairs
        .par_iter()
        .zip(seeds.par_iter())
        .map(|((input, target), &seed)| item_grads(model, input, target, seed, adversary))
        .collect::<Result<Vec<_>>>()?;
    let n = pairs.len() as f64;
    let mut grads = Vec::new();
    let (mut mse, mut adv) = (0.0, 0.0);
    for r in results {
        mse += r.mse;
        adv += r.adv;
        accumulate_grads(&mut grads, r.grads);
    }
    let inv = T::from_f64_lossy(1.0 / n);
    for g in grads.iter_mut().flatten() {
        g.scale_in_place(inv);
    }
    Ok((mse / n, adv / n, grads))
}

fn add_lp<T: Real>(model: &DenoiserModel<T>, lambda: f64, grads: &mut Vec<Option<Tensor<T>>>) -> Result<f64> {
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let lp = LpConfig {
        lambda,
        ..model.lp_config()
    };
    let (value, lp_grads) = model.lp_term_grads_with(&lp)?;
    accumulate_grads(grads, lp_grads);
    Ok(value)
}

fn ensure_finite(stats: &StepStats) -> Result<()> {
    if stats.total.is_finite() && stats.lp_term.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss diverged (l_deno={}, l_adv={}, lp={})",
            stats.l_deno, stats.l_adv, stats.lp_term
        )))
    }
}

/// One clean-to-clean step: Adam on `mse(G(x), x)` with feature dropout and
/// the gating block short-circuited.
pub fn phase1_step<T: Real, R: Rng + ?Sized>(
    model: &mut DenoiserModel<T>,
    opt: &mut Adam<T>,
    clean: &[Tensor<T>],
    rng: &mut R,
) -> Result<StepStats> {
    if model.skip_mode() != SkipMode::ShortCircuit || model.dropout().is_none() {
        return Err(Error::Config(
            "clean-to-clean step needs the short-circuited model with dropout".into(),
        ));
    }
    let pairs: Vec<_> = clean.iter().map(|x| (x.clone(), x.clone())).collect();
    let (l_deno, _, grads) = batch_update(model, &pairs, None, rng)?;
    let stats = StepStats {
        l_deno,
        total: l_deno,
        ..Default::default()
    };
    ensure_finite(&stats)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(stats)
}

fn check_gated(model: &DenoiserModel<impl Real>) -> Result<()> {
    if model.skip_mode() != SkipMode::Gated || model.dropout().is_some() {
        return Err(Error::Config("gated model without dropout required".into()));
    }
    Ok(())
}

fn corrupt_batch<T: Real, R: Rng + ?Sized>(
    clean: &[Tensor<T>],
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    clean.iter().map(|x| Ok((noise.corrupt(x, rng)?, x.clone()))).collect()
}

/// One noisy-to-clean step: Adam on `mse(G(x + n), x) + lambda * lp`.
pub fn phase2_step<T: Real, R: Rng + ?Sized>(
    model: &mut DenoiserModel<T>,
    opt: &mut Adam<T>,
    clean: &[Tensor<T>],
    noise: &NoiseSpec,
    lambda_lp: f64,
    rng: &mut R,
) -> Result<StepStats> {
    check_gated(model)?;
    if model.params().is_trainable(ParamGroup::Features) {
        return Err(Error::Config(
            "noisy-to-clean step needs the feature layer frozen".into(),
        ));
    }
    if clean.is_empty() {
        return Err(Error::InvalidArgument("training batch is empty".into()));
    }
    let pairs = corrupt_batch(clean, noise, rng)?;
    let (l_deno, _, mut grads) = batch_update(model, &pairs, None, rng)?;
    let lp_term = add_lp(model, lambda_lp, &mut grads)?;
    let stats = StepStats {
        l_deno,
        total: l_deno,
        lp_term,
        ..Default::default()
    };
    ensure_finite(&stats)?;
    opt.step(model.params_mut(), &grads)?;
    Ok(stats)
}

/// One discriminator update on a balanced batch; predictions made before the
/// update are pushed into `meter`. Returns the mean BCE.
pub fn discriminator_step<T: Real>(
    disc: &mut Discriminator<T>,
    opt: &mut Adam<T>,
    clean: &[Tensor<T>],
    denoised: &[Tensor<T>],
    meter: &mut AccuracyMeter,
) -> Result<f64> {
    if clean.is_empty() || denoised.is_empty() {
        return Err(Error::InvalidArgument("discriminator batches must be non-empty".into()));
    }
    let batch = disc.loss_and_grads(clean, denoised)?;
    if !batch.loss.is_finite() {
        return Err(Error::NonFinite(format!("discriminator loss {}", batch.loss)));
    }
    opt.step(disc.params_mut(), &batch.grads)?;
    for (p, l) in batch.predictions {
        meter.record(p, l);
    }
    Ok(batch.loss)
}

fn denoise_clamped<T: Real>(model: &DenoiserModel<T>, noisy: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    noisy
        .par_iter()
        .map(|x| Ok(model.denoise(x)?.map(|v| v.max(T::zero()).min(T::one()))))
        .collect()
}

/// Optimizers of the adversarial phase.
#[derive(Clone, Debug)]
pub struct AdversarialOptimizers<T> {
    pub denoiser: Adam<T>,
    pub discriminator: Adam<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Phase3Stats {
    pub step: StepStats,
    pub disc_loss: f64,
    pub disc_accuracy: f64,
    pub disc_updates: usize,
    pub denoiser_updates: usize,
}

/// One iteration of adversarial training.
///
/// The primary batch is corrupted and denoised; the discriminator is updated
/// on it (clean as true, denoised as false) and then once more on each of the
/// `extra` batches, so with one extra batch it sees the data twice. Finally the
/// denoiser takes one step on `l_deno + weight * l_adv + lambda * lp` for the
/// primary batch against the updated discriminator.
#[allow(clippy::too_many_arguments)]
pub fn phase3_iteration<T: Real, R: Rng + ?Sized>(
    model: &mut DenoiserModel<T>,
    disc: &mut Discriminator<T>,
    opts: &mut AdversarialOptimizers<T>,
    primary: &[Tensor<T>],
    extra: &[Vec<Tensor<T>>],
    noise: &NoiseSpec,
    weight: f64,
    spec: &AdversarialSpec,
    lambda_lp: f64,
    meter: &mut AccuracyMeter,
    rng: &mut R,
) -> Result<Phase3Stats> {
    check_gated(model)?;
    if primary.is_empty() {
        return Err(Error::InvalidArgument("training batch is empty".into()));
    }
    if !weight.is_finite() {
        return Err(Error::InvalidArgument(format!("adversarial weight {weight}")));
    }
    let pairs = corrupt_batch(primary, noise, rng)?;
    let noisy: Vec<Tensor<T>> = pairs.iter().map(|(n, _)| n.clone()).collect();

    let mut disc_loss = 0.0;
    let mut disc_updates = 0;
    let denoised = denoise_clamped(model, &noisy)?;
    disc_loss += discriminator_step(disc, &mut opts.discriminator, primary, &denoised, meter)?;
    disc_updates += 1;
    for batch in extra {
        let extra_noisy = batch
            .iter()
            .map(|x| noise.corrupt(x, rng))
            .collect::<Result<Vec<_>>>()?;
        let extra_denoised = denoise_clamped(model, &extra_noisy)?;
        disc_loss += discriminator_step(disc, &mut opts.discriminator, batch, &extra_denoised, meter)?;
        disc_updates += 1;
    }

    let adversary = Adversary {
        disc,
        weight,
        loss: spec.generator_loss,
    };
    let (l_deno, l_adv, mut grads) = batch_update(model, &pairs, Some(&adversary), rng)?;
    let lp_term = add_lp(model, lambda_lp, &mut grads)?;
    let stats = StepStats {
        l_deno,
        l_adv,
        weight,
        total: l_deno + weight * l_adv,
        lp_term,
    };
    ensure_finite(&stats)?;
    opts.denoiser.step(model.params_mut(), &grads)?;
    Ok(Phase3Stats {
        step: stats,
        disc_loss: disc_loss / disc_updates as f64,
        disc_accuracy: meter.accuracy(),
        disc_updates,
        denoiser_updates: 1,
    })
}

/// Warm-up of the discriminator on clean patches versus the outputs of
/// `denoiser` on their noisy versions. One epoch is one shuffled pass over
/// `clean`. Returns the windowed accuracy meter.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_discriminator<R: Rng + ?Sized>(
    disc: &mut Discriminator<f32>,
    opt: &mut Adam<f32>,
    denoiser: &dyn Denoise,
    clean: &[ImagePatch],
    noise: &NoiseSpec,
    epochs: usize,
    batch_size: usize,
    crop_size: usize,
    window: usize,
    rng: &mut R,
) -> Result<AccuracyMeter> {
    if clean.is_empty() {
        return Err(Error::InvalidArgument("discriminator pretraining set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut meter = AccuracyMeter::new(window);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        for chunk in order.chunks(batch_size) {
            let real = chunk
                .iter()
                .map(|&i| Ok(random_crop(&clean[i], crop_size, rng)?.pixels))
                .collect::<Result<Vec<_>>>()?;
            let noisy = real.iter().map(|x| noise.corrupt(x, rng)).collect::<Result<Vec<_>>>()?;
            let fake = noisy
                .par_iter()
                .map(|x| Ok(denoiser.denoise_image(x)?.map(|v| v.clamp(0.0, 1.0))))
                .collect::<Result<Vec<_>>>()?;
            discriminator_step(disc, opt, &real, &fake, &mut meter)?;
        }
    }
    Ok(meter)
}
