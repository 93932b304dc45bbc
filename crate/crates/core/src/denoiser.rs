//! The seven-layer fully convolutional denoiser.
//!
//! Layer 1 is the multi-scale feature extraction layer: parallel branches of
//! growing kernel size applied directly to the image, stacked into 240
//! feature maps. Layers 2-4 form the gating block, whose sigmoid output in
//! `(0,1)` rescales every feature map pixel-wise. Layers 5-7 are 1x1
//! reconstruction convolutions down to a single output channel. In
//! [`SkipMode::ShortCircuit`] the gating block is bypassed entirely.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{he_uniform, ParamGroup, ParamSet};
use crate::tape::{lp_value, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Width of the stacked feature maps and of every gating layer.
pub const FEATURE_WIDTH: usize = 240;
/// Output channels of reconstruction layers 5 and 6.
pub const RECON_WIDTH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branch {
    pub kernel: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiScaleConfig {
    pub input_channels: usize,
    pub branches: Vec<Branch>,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        let branches = [(3, 32), (5, 40), (7, 48), (9, 56), (11, 64)]
            .into_iter()
            .map(|(kernel, channels)| Branch { kernel, channels })
            .collect();
        Self {
            input_channels: 1,
            branches,
        }
    }
}

impl MultiScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != 1 {
            return Err(Error::Config(format!(
                "only grayscale input is supported, got {} channels",
                self.input_channels
            )));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("multi-scale layer needs at least one branch".into()));
        }
        for b in &self.branches {
            if b.kernel % 2 == 0 || b.channels == 0 {
                return Err(Error::Config(format!(
                    "branch {}x{} with {} channels: kernels must be odd and channels positive",
                    b.kernel, b.kernel, b.channels
                )));
            }
        }
        for pair in self.branches.windows(2) {
            if pair[1].kernel <= pair[0].kernel || pair[1].channels <= pair[0].channels {
                return Err(Error::Config(
                    "branch kernels and channel counts must both be strictly increasing".into(),
                ));
            }
        }
        if self.width() != FEATURE_WIDTH {
            return Err(Error::Config(format!(
                "branch channels sum to {}, the gating block needs {FEATURE_WIDTH}",
                self.width()
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.branches.iter().map(|b| b.channels).sum()
    }

    pub fn largest_kernel(&self) -> usize {
        self.branches.iter().map(|b| b.kernel).max().unwrap_or(1)
    }

    /// `"3:32,5:40,..."`
    pub fn to_spec_string(&self) -> String {
        self.branches
            .iter()
            .map(|b| format!("{}:{}", b.kernel, b.channels))
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_spec(s: &str) -> Result<Self> {
        let branches = s
            .split(',')
            .map(|part| {
                let (k, c) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("branch `{part}` is not kernel:channels")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad integer `{v}` in branch list")))
                };
                Ok(Branch {
                    kernel: parse(k)?,
                    channels: parse(c)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cfg = Self {
            input_channels: 1,
            branches,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Smoothed lp sparsity penalty on the weights of layers 5 and 6.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LpConfig {
    pub p: f64,
    pub eps: f64,
    pub lambda: f64,
}

impl Default for LpConfig {
    fn default() -> Self {
        Self {
            p: 0.1,
            eps: 1e-6,
            lambda: 1e-4,
        }
    }
}

impl LpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("lp exponent must lie in (0, 1), got {}", self.p)));
        }
        if !(self.eps > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("lp eps must be positive and lambda non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    /// Gating block bypassed; effective depth 4.
    ShortCircuit,
    /// Features are multiplied by the gating block's output.
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvSlot {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    features: Vec<ConvSlot>,
    gating: [ConvSlot; 3],
    recon: [ConvSlot; 3],
}

/// Tape handles of the interesting intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub features: Var,
    pub gates: Option<Var>,
    pub output: Var,
}

/// Materialized intermediates, for inspection.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub features: Tensor<T>,
    pub gates: Option<Tensor<T>>,
    pub output: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserModel<T> {
    config: MultiScaleConfig,
    lp: LpConfig,
    skip_mode: SkipMode,
    dropout: Option<f64>,
    params: ParamSet<T>,
    layout: Layout,
}

fn layout_for(config: &MultiScaleConfig) -> Layout {
    let mut next = 0;
    let mut slot = || {
        let s = ConvSlot {
            weight: next,
            bias: next + 1,
        };
        next += 2;
        s
    };
    let features = config.branches.iter().map(|_| slot()).collect();
    let gating = [slot(), slot(), slot()];
    let recon = [slot(), slot(), slot()];
    Layout {
        features,
        gating,
        recon,
    }
}

/// `(name, group, weight shape)` of every conv layer in declaration order.
fn conv_specs(config: &MultiScaleConfig) -> Vec<(String, ParamGroup, [usize; 4])> {
    let mut specs = Vec::new();
    for b in &config.branches {
        specs.push((
            format!("features.k{}", b.kernel),
            ParamGroup::Features,
            [b.channels, config.input_channels, b.kernel, b.kernel],
        ));
    }
    for i in 2..=4 {
        specs.push((
            format!("gating.conv{i}"),
            ParamGroup::Gating,
            [FEATURE_WIDTH, FEATURE_WIDTH, 1, 1],
        ));
    }
    specs.push((
        "recon.conv5".into(),
        ParamGroup::Reconstruction,
        [RECON_WIDTH, FEATURE_WIDTH, 1, 1],
    ));
    specs.push((
        "recon.conv6".into(),
        ParamGroup::Reconstruction,
        [RECON_WIDTH, RECON_WIDTH, 1, 1],
    ));
    specs.push(("recon.conv7".into(), ParamGroup::Reconstruction, [1, RECON_WIDTH, 1, 1]));
    specs
}

/// Expected `(name, shape)` of every parameter for `config`, in storage order.
pub fn parameter_shapes(config: &MultiScaleConfig) -> Vec<(String, Vec<usize>)> {
    conv_specs(config)
        .into_iter()
        .flat_map(|(name, _, shape)| {
            [
                (format!("{name}.weight"), shape.to_vec()),
                (format!("{name}.bias"), vec![shape[0]]),
            ]
        })
        .collect()
}

/// Builds a denoiser with fan-in scaled uniform weights and zero biases.
pub fn build_denoiser<T: Real>(config: MultiScaleConfig, seed: u64) -> Result<DenoiserModel<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, group, shape) in conv_specs(&config) {
        let fan_in = shape[1] * shape[2] * shape[3];
        params.push(format!("{name}.weight"), group, he_uniform(&shape, fan_in, &mut rng));
        params.push(format!("{name}.bias"), group, Tensor::zeros(&[shape[0]]));
    }
    Ok(DenoiserModel {
        layout: layout_for(&config),
        config,
        lp: LpConfig::default(),
        skip_mode: SkipMode::Gated,
        dropout: None,
        params,
    })
}

impl<T: Real> DenoiserModel<T> {
    pub fn config(&self) -> &MultiScaleConfig {
        &self.config
    }

    pub fn lp_config(&self) -> LpConfig {
        self.lp
    }

    pub fn set_lp_config(&mut self, lp: LpConfig) -> Result<()> {
        lp.validate()?;
        self.lp = lp;
        Ok(())
    }

    pub fn skip_mode(&self) -> SkipMode {
        self.skip_mode
    }

    pub fn set_skip_mode(&mut self, mode: SkipMode) {
        self.skip_mode = mode;
    }

    pub fn dropout(&self) -> Option<f64> {
        self.dropout
    }

    /// Dropout applied to the feature stack in training mode.
    pub fn set_dropout(&mut self, drop_prob: Option<f64>) -> Result<()> {
        if let Some(p) = drop_prob {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout must lie in [0, 1), got {p}")));
            }
        }
        self.dropout = drop_prob;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Freezes or unfreezes parameter groups. Frozen parameters receive no
    /// optimizer updates; gradients still flow through them to earlier values.
    pub fn set_trainable(&mut self, groups: &[ParamGroup], trainable: bool) {
        for &g in groups {
            self.params.set_trainable(g, trainable);
        }
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            config: self.config.clone(),
            lp: self.lp,
            skip_mode: self.skip_mode,
            dropout: self.dropout,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.bind(tape)
    }

    fn conv(&self, tape: &mut Tape<T>, params: &[Var], slot: ConvSlot, x: Var) -> Result<Var> {
        tape.conv2d(x, params[slot.weight], params[slot.bias], 1)
    }

    /// Records one forward pass of a `[1,H,W]` image on `tape`.
    pub fn forward_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        image: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardVars> {
        let (c, h, w) = tape.value(image).chw()?;
        if c != self.config.input_channels {
            return Err(Error::shape(
                "denoiser input",
                &[self.config.input_channels, h, w],
                &[c, h, w],
            ));
        }
        let radius = self.config.largest_kernel() / 2;
        if h < radius.max(1) || w < radius.max(1) {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} is smaller than the largest kernel radius {radius}"
            )));
        }

        let branches = self
            .layout
            .features
            .iter()
            .map(|&slot| self.conv(tape, params, slot, image))
            .collect::<Result<Vec<_>>>()?;
        let stacked = tape.concat_channels(&branches)?;
        let mut features = tape.relu(stacked);
        if let Some(p) = self.dropout {
            features = tape.dropout(features, p, training, rng)?;
        }

        let (gates, gated) = match self.skip_mode {
            SkipMode::ShortCircuit => (None, features),
            SkipMode::Gated => {
                let [g2, g3, g4] = self.layout.gating;
                let a = self.conv(tape, params, g2, features)?;
                let a = tape.relu(a);
                let b = self.conv(tape, params, g3, a)?;
                let b = tape.relu(b);
                let pre = self.conv(tape, params, g4, b)?;
                let gates = tape.sigmoid(pre);
                (Some(gates), tape.hadamard(features, gates)?)
            }
        };

        let [r5, r6, r7] = self.layout.recon;
        let x = self.conv(tape, params, r5, gated)?;
        let x = tape.relu(x);
        let x = self.conv(tape, params, r6, x)?;
        let x = tape.relu(x);
        let output = self.conv(tape, params, r7, x)?;
        Ok(ForwardVars {
            features,
            gates,
            output,
        })
    }

    pub fn trace<R: Rng + ?Sized>(&self, image: &Tensor<T>, training: bool, rng: &mut R) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape);
        let x = tape.constant(image.clone());
        let vars = self.forward_on_tape(&mut tape, &params, x, training, rng)?;
        Ok(ForwardTrace {
            features: tape.value(vars.features).clone(),
            gates: vars.gates.map(|g| tape.value(g).clone()),
            output: tape.value(vars.output).clone(),
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, image: &Tensor<T>, training: bool, rng: &mut R) -> Result<Tensor<T>> {
        Ok(self.trace(image, training, rng)?.output)
    }

    /// Evaluation-mode forward pass (dropout disabled). Output is unclamped.
    pub fn denoise(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        // eval mode never draws from the generator
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.forward(image, false, &mut unused)
    }

    fn bind_constants(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Indices of the layer 5 and layer 6 weights.
    pub fn lp_targets(&self) -> [usize; 2] {
        [self.layout.recon[0].weight, self.layout.recon[1].weight]
    }

    /// Smoothed lp penalty of layers 5 and 6 (without the lambda factor).
    pub fn lp_penalty(&self, p: f64, eps: f64) -> Result<f64> {
        LpConfig { p, eps, lambda: 0.0 }.validate()?;
        Ok(self
            .lp_targets()
            .iter()
            .map(|&i| lp_value(self.params.get(i).value.data(), p, eps))
            .sum())
    }

    /// Records the penalty of layers 5 and 6 (without lambda) on `tape`.
    pub fn lp_penalty_on_tape(&self, tape: &mut Tape<T>, params: &[Var]) -> Result<Var> {
        self.lp.validate()?;
        let [a, b] = self.lp_targets();
        let pa = tape.lp_penalty(params[a], self.lp.p, self.lp.eps);
        let pb = tape.lp_penalty(params[b], self.lp.p, self.lp.eps);
        tape.add(pa, pb)
    }

    /// `lambda * penalty` and its gradient, laid out like the parameter set.
    pub fn lp_term_grads(&self) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        self.lp_term_grads_with(&self.lp)
    }

    /// Like [`Self::lp_term_grads`] with an explicit configuration.
    pub fn lp_term_grads_with(&self, lp: &LpConfig) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
        lp.validate()?;
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let wanted = self.lp_targets().contains(&i) && self.params.is_trainable(p.group);
                if wanted {
                    tape.leaf(p.value.clone(), true)
                } else {
                    tape.constant(Tensor::zeros(&[0]))
                }
            })
            .collect();
        let [a, b] = self.lp_targets();
        let pa = tape.lp_penalty(params[a], lp.p, lp.eps);
        let pb = tape.lp_penalty(params[b], lp.p, lp.eps);
        let sum = tape.add(pa, pb)?;
        let term = tape.scale(sum, T::from_f64_lossy(lp.lambda));
        let value = tape.value(term).item().as_f64();
        let mut grads = tape.backward(term)?;
        Ok((value, self.params.collect_grads(&params, &mut grads)))
    }
}
