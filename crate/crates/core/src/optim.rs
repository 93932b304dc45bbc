//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{Real, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl<T: Real> AdamState<T> {
    pub fn new(shape: &[usize], config: AdamConfig) -> Self {
        Self {
            first_moment: Tensor::zeros(shape),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
            config,
        }
    }
}

fn check_grad<T: Real>(param: &Tensor<T>, grad: &Tensor<T>, state: &AdamState<T>) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(Error::shape("adam_step", param.shape(), grad.shape()));
    }
    if state.first_moment.shape() != param.shape() {
        return Err(Error::shape(
            "adam_step state",
            param.shape(),
            state.first_moment.shape(),
        ));
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("gradient holds NaN or infinity".into()));
    }
    Ok(())
}

/// One Adam update of `param` in place. Non-finite gradients are rejected
/// before anything is modified.
pub fn adam_step<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    check_grad(param, grad, state)?;
    apply(param, grad, state);
    Ok(())
}

fn apply<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState<T>) {
    state.step_count += 1;
    let c = state.config;
    let t = state.step_count as i32;
    let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
    let one = T::one();
    let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let lr = T::from_f64_lossy(c.learning_rate);
    let eps = T::from_f64_lossy(c.epsilon);
    let m = state.first_moment.data_mut();
    let v = state.second_moment.data_mut();
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / corr1;
        let v_hat = *v / corr2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Adam over a whole [`ParamSet`]; one state per parameter, created lazily.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    states: Vec<Option<AdamState<T>>>,
    updates: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
            updates: 0,
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    /// Number of [`step`](Self::step) calls that modified parameters.
    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn state(&self, index: usize) -> Option<&AdamState<T>> {
        self.states.get(index).and_then(Option::as_ref)
    }

    /// Applies one update to every trainable parameter that has a gradient.
    /// Frozen groups and parameters without gradients are left untouched.
    /// The whole step is rejected if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.states.len() < params.len() {
            self.states.resize_with(params.len(), || None);
        }
        let mut active = Vec::new();
        for (i, grad) in grads.iter().enumerate() {
            let p = params.get(i);
            let Some(grad) = grad else { continue };
            if !params.is_trainable(p.group) {
                continue;
            }
            let state = self.states[i].get_or_insert_with(|| AdamState::new(p.value.shape(), self.config));
            check_grad(&p.value, grad, state).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("gradient of {} is not finite", p.name)),
                other => other,
            })?;
            active.push(i);
        }
        for i in active {
            let state = self.states[i].as_mut().expect("created above");
            let grad = grads[i].as_ref().expect("checked above");
            apply(&mut params.get_mut(i).value, grad, state);
        }
        self.updates += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let alpha = 1e-3;
        let mut p = Tensor::<f64>::zeros(&[3]);
        let g = Tensor::ones(&[3]);
        let mut s = AdamState::new(&[3], AdamConfig::new(alpha));
        adam_step(&mut p, &g, &mut s).unwrap();
        let expected = -alpha / (1.0 + DEFAULT_EPSILON);
        for &v in p.data() {
            assert!((v - expected).abs() < 1e-18);
        }
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn zero_gradient_from_zero_state_is_a_no_op() {
        let mut p = Tensor::<f32>::from_vec(&[2], vec![0.25, -1.0]).unwrap();
        let before = p.clone();
        let mut s = AdamState::new(&[2], AdamConfig::new(1e-5));
        adam_step(&mut p, &Tensor::zeros(&[2]), &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut p = Tensor::<f64>::ones(&[2]);
        let g = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        let mut s = AdamState::new(&[2], AdamConfig::new(0.1));
        assert!(matches!(adam_step(&mut p, &g, &mut s), Err(Error::NonFinite(_))));
        assert_eq!(p, Tensor::ones(&[2]));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn step_is_deterministic() {
        let g = Tensor::<f32>::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let run = || {
            let mut p = Tensor::<f32>::ones(&[3]);
            let mut s = AdamState::new(&[3], AdamConfig::new(1e-2));
            for _ in 0..5 {
                adam_step(&mut p, &g, &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_groups_and_partial_nan_leave_everything_untouched() {
        let mut params = ParamSet::<f64>::new();
        params.push("a", ParamGroup::Features, Tensor::ones(&[2]));
        params.push("b", ParamGroup::Gating, Tensor::ones(&[2]));
        params.set_trainable(ParamGroup::Features, false);
        let mut adam = Adam::new(AdamConfig::new(0.1));
        adam.step(&mut params, &[Some(Tensor::ones(&[2])), Some(Tensor::ones(&[2]))])
            .unwrap();
        assert_eq!(params.get(0).value, Tensor::ones(&[2]));
        assert_ne!(params.get(1).value, Tensor::ones(&[2]));

        params.set_trainable(ParamGroup::Features, true);
        let snapshot = params.clone();
        let bad = Tensor::from_vec(&[2], vec![f64::INFINITY, 0.0]).unwrap();
        assert!(adam.step(&mut params, &[Some(Tensor::ones(&[2])), Some(bad)]).is_err());
        assert_eq!(params, snapshot);
    }
}
