//! Binary clean-vs-denoised classifier.
//!
//! A strided conv stack with ReLU, global average pooling, and a two-layer
//! fully-connected head ending in a 2-way softmax. The reported probability
//! is the "clean" component.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{accumulate_grads, he_uniform, ParamGroup, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Softmax index of the "clean" class.
pub const CLEAN_CLASS: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvStage {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub stages: Vec<ConvStage>,
    pub hidden: usize,
    /// Smallest accepted input side length.
    pub min_size: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        let stages = [16, 32, 64, 64]
            .into_iter()
            .map(|channels| ConvStage {
                kernel: 3,
                stride: 2,
                channels,
            })
            .collect();
        Self {
            stages,
            hidden: 256,
            min_size: 16,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.hidden == 0 || self.min_size == 0 {
            return Err(Error::Config(
                "discriminator needs stages, a hidden layer and a minimum size".into(),
            ));
        }
        if self
            .stages
            .iter()
            .any(|s| s.kernel % 2 == 0 || s.stride == 0 || s.channels == 0)
        {
            return Err(Error::Config(
                "discriminator stages need odd kernels and positive strides".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
}

/// Parameter names and shapes for `config`, in storage order.
pub fn discriminator_shapes(config: &DiscriminatorConfig) -> Vec<(String, ParamGroup, Vec<usize>)> {
    let mut out = Vec::new();
    let mut in_ch = 1;
    for (i, s) in config.stages.iter().enumerate() {
        out.push((
            format!("conv{i}.weight"),
            ParamGroup::Features,
            vec![s.channels, in_ch, s.kernel, s.kernel],
        ));
        out.push((format!("conv{i}.bias"), ParamGroup::Features, vec![s.channels]));
        in_ch = s.channels;
    }
    out.push(("fc1.weight".into(), ParamGroup::Head, vec![config.hidden, in_ch]));
    out.push(("fc1.bias".into(), ParamGroup::Head, vec![config.hidden]));
    out.push(("fc2.weight".into(), ParamGroup::Head, vec![2, config.hidden]));
    out.push(("fc2.bias".into(), ParamGroup::Head, vec![2]));
    out
}

pub fn build_discriminator<T: Real>(config: DiscriminatorConfig, seed: u64) -> Result<Discriminator<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, group, shape) in discriminator_shapes(&config) {
        let value = if name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else {
            let fan_in = shape[1..].iter().product();
            he_uniform(&shape, fan_in, &mut rng)
        };
        params.push(name, group, value);
    }
    Ok(Discriminator { config, params })
}

impl<T: Real> Discriminator<T> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_trainable(&mut self, groups: &[ParamGroup], trainable: bool) {
        for &g in groups {
            self.params.set_trainable(g, trainable);
        }
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.bind(tape)
    }

    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Records the clean-class probability of a `[1,H,W]` image.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, params: &[Var], image: Var) -> Result<Var> {
        let (c, h, w) = tape.value(image).chw()?;
        if c != 1 {
            return Err(Error::shape("discriminator input", &[1, h, w], &[c, h, w]));
        }
        if h < self.config.min_size || w < self.config.min_size {
            return Err(Error::InvalidArgument(format!(
                "discriminator input {h}x{w} is below the minimum {0}x{0}",
                self.config.min_size
            )));
        }
        let mut x = image;
        for (i, stage) in self.config.stages.iter().enumerate() {
            x = tape.conv2d(x, params[2 * i], params[2 * i + 1], stage.stride)?;
            x = tape.relu(x);
        }
        let head = 2 * self.config.stages.len();
        let pooled = tape.global_avg_pool(x)?;
        let hidden = tape.linear(pooled, params[head], params[head + 1])?;
        let hidden = tape.relu(hidden);
        let logits = tape.linear(hidden, params[head + 2], params[head + 3])?;
        let probs = tape.softmax(logits);
        tape.select(probs, CLEAN_CLASS)
    }

    /// Probability that `image` is clean.
    pub fn probability(&self, image: &Tensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(image.clone());
        let p = self.forward_on_tape(&mut tape, &params, x)?;
        Ok(tape.value(p).item().as_f64())
    }

    /// Mean BCE over `clean` (label 1) and `denoised` (label 0) images with
    /// the gradient for every trainable parameter. Also returns the
    /// pre-update predictions as `(probability, label)` pairs.
    pub fn loss_and_grads(&self, clean: &[Tensor<T>], denoised: &[Tensor<T>]) -> Result<DiscriminatorBatch<T>> {
        if clean.is_empty() && denoised.is_empty() {
            return Err(Error::InvalidArgument("discriminator batch is empty".into()));
        }
        let items: Vec<(&Tensor<T>, f64)> = clean
            .iter()
            .map(|t| (t, 1.0))
            .chain(denoised.iter().map(|t| (t, 0.0)))
            .collect();
        let mut total_grads = Vec::new();
        let mut loss = 0.0;
        let mut predictions = Vec::with_capacity(items.len());
        for (image, label) in &items {
            let mut tape = Tape::new();
            let params = self.bind(&mut tape);
            let x = tape.constant((*image).clone());
            let prob = self.forward_on_tape(&mut tape, &params, x)?;
            let l = tape.bce(prob, *label)?;
            predictions.push((tape.value(prob).item().as_f64(), *label));
            loss += tape.value(l).item().as_f64();
            let mut grads = tape.backward(l)?;
            accumulate_grads(&mut total_grads, self.params.collect_grads(&params, &mut grads));
        }
        let n = items.len() as f64;
        let inv = T::from_f64_lossy(1.0 / n);
        for g in total_grads.iter_mut().flatten() {
            g.scale_in_place(inv);
        }
        Ok(DiscriminatorBatch {
            loss: loss / n,
            grads: total_grads,
            predictions,
        })
    }
}

#[derive(Debug)]
pub struct DiscriminatorBatch<T> {
    pub loss: f64,
    pub grads: Vec<Option<Tensor<T>>>,
    pub predictions: Vec<(f64, f64)>,
}

/// Mean BCE of precomputed probabilities: label 1 for `clean`, 0 for `denoised`.
pub fn disc_loss_from_probs(clean: &[f64], denoised: &[f64]) -> Result<f64> {
    let n = clean.len() + denoised.len();
    if clean.is_empty() || denoised.is_empty() {
        return Err(Error::InvalidArgument("both batches must be non-empty".into()));
    }
    let total: f64 = clean.iter().map(|&p| crate::tape::bce_value(p, 1.0)).sum::<f64>()
        + denoised.iter().map(|&p| crate::tape::bce_value(p, 0.0)).sum::<f64>();
    Ok(total / n as f64)
}

/// Accuracy over a sliding window of recent predictions (threshold 0.5).
#[derive(Clone, Debug)]
pub struct AccuracyMeter {
    window: usize,
    hits: VecDeque<bool>,
}

impl AccuracyMeter {
    pub fn new(window: usize) -> Self {
        assert!(window > 0, "accuracy window must be positive");
        Self {
            window,
            hits: VecDeque::with_capacity(window),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn record(&mut self, probability: f64, label: f64) {
        let predicted_clean = probability > 0.5;
        if self.hits.len() == self.window {
            self.hits.pop_front();
        }
        self.hits.push_back(predicted_clean == (label > 0.5));
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// Fraction correct over the window; 0 when nothing was recorded.
    pub fn accuracy(&self) -> f64 {
        if self.hits.is_empty() {
            return 0.0;
        }
        self.hits.iter().filter(|&&h| h).count() as f64 / self.hits.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn probability_is_strictly_inside_unit_interval() {
        let d = build_discriminator::<f32>(DiscriminatorConfig::default(), 3).unwrap();
        for v in [0.0f32, 1.0] {
            let p = d.probability(&Tensor::full(&[1, 32, 32], v)).unwrap();
            assert!(p > 0.0 && p < 1.0, "{p}");
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let d = build_discriminator::<f32>(DiscriminatorConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::from_fn(&[1, 24, 20], |_| rng.random::<f32>());
        assert_eq!(d.probability(&img).unwrap(), d.probability(&img).unwrap());
    }

    #[test]
    fn undersized_input_is_rejected() {
        let d = build_discriminator::<f32>(DiscriminatorConfig::default(), 3).unwrap();
        assert!(d.probability(&Tensor::zeros(&[1, 8, 32])).is_err());
    }

    #[test]
    fn untrained_probability_is_near_half_on_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut total = 0.0;
        let seeds = 20;
        for seed in 0..seeds {
            let d = build_discriminator::<f32>(DiscriminatorConfig::default(), seed).unwrap();
            let img = Tensor::from_fn(&[1, 32, 32], |_| rng.random::<f32>());
            total += d.probability(&img).unwrap();
        }
        let mean = total / seeds as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean {mean}");
    }

    #[test]
    fn loss_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((disc_loss_from_probs(&[0.5, 0.5], &[0.5]).unwrap() - ln2).abs() < 1e-15);
        assert!(disc_loss_from_probs(&[1.0], &[0.0]).unwrap() < 1e-6);
        let a = disc_loss_from_probs(&[0.8], &[0.3]).unwrap();
        // swapping the pair and the labels: clean->1-0.3, denoised->1-0.8
        let b = disc_loss_from_probs(&[1.0 - 0.3], &[1.0 - 0.8]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(disc_loss_from_probs(&[], &[0.5]).is_err());
    }

    #[test]
    fn constant_classifier_scores_half_on_balanced_data() {
        let mut meter = AccuracyMeter::new(100);
        for i in 0..100 {
            meter.record(0.9, if i % 2 == 0 { 1.0 } else { 0.0 });
        }
        assert_eq!(meter.accuracy(), 0.5);
        assert_eq!(meter.len(), 100);
        for _ in 0..100 {
            meter.record(0.2, 0.0);
        }
        assert_eq!(meter.accuracy(), 1.0);
    }
}
