use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Parameter groups that can be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// Multi-scale feature extraction layer (denoiser) or conv stack (discriminator).
    Features,
    /// Gating block of the denoiser.
    Gating,
    /// 1x1 reconstruction stack of the denoiser.
    Reconstruction,
    /// Fully-connected head of the discriminator.
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamGroup::Features => "features",
            ParamGroup::Gating => "gating",
            ParamGroup::Reconstruction => "reconstruction",
            ParamGroup::Head => "head",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// An ordered collection of named parameters with per-group trainability.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    frozen: Vec<ParamGroup>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.frozen.retain(|&g| g != group);
        if !trainable {
            self.frozen.push(group);
            self.frozen.sort();
        }
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        !self.frozen.contains(&group)
    }

    pub fn frozen_groups(&self) -> &[ParamGroup] {
        &self.frozen
    }

    /// Copies every parameter onto `tape` as a leaf; only trainable groups
    /// request gradients.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), self.is_trainable(p.group)))
            .collect()
    }

    /// Collects per-parameter gradients for the leaves returned by [`bind`](Self::bind).
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        vars.iter().map(|&v| grads.take(v)).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            frozen: self.frozen.clone(),
        }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Fan-in scaled uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn he_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

/// Sum of per-item gradient lists, item order preserved.
pub(crate) fn accumulate_grads<T: Real>(total: &mut Vec<Option<Tensor<T>>>, item: Vec<Option<Tensor<T>>>) {
    if total.is_empty() {
        *total = item;
        return;
    }
    for (slot, g) in total.iter_mut().zip(item) {
        match (slot.as_mut(), g) {
            (Some(acc), Some(g)) => acc.add_assign(&g).expect("gradient shapes agree"),
            (None, Some(g)) => *slot = Some(g),
            (_, None) => {}
        }
    }
}
