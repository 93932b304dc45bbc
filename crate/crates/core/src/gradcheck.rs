//! Central finite-difference verification of backpropagated gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{build_denoiser, DenoiserModel, MultiScaleConfig, SkipMode};
use crate::error::{Error, Result};
use crate::synthetic;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor of the relative error; below it the error is absolute.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Outcome of a gradient comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the gradient produced by `value_and_grad` at `x` against central
/// differences of `value` with step `h`, over every element of `x`.
pub fn finite_diff_check(
    value: impl FnMut(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    h: f64,
) -> Result<GradCheck> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(value, analytic, x, h, &all)
}

/// Like [`finite_diff_check`] but only at the listed element indices.
pub fn finite_diff_check_at(
    mut value: impl FnMut(&Tensor<f64>) -> Result<f64>,
    analytic: &Tensor<f64>,
    x: &Tensor<f64>,
    h: f64,
    indices: &[usize],
) -> Result<GradCheck> {
    if analytic.shape() != x.shape() {
        return Err(Error::shape("finite_diff_check", x.shape(), analytic.shape()));
    }
    let mut probe = x.clone();
    let mut worst = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = value(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = value(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic.data()[i], numeric);
        if err > worst.max_relative_error || err.is_nan() {
            worst.max_relative_error = err;
            worst.worst_index = i;
        }
        worst.checked += 1;
    }
    Ok(worst)
}

impl GradCheck {
    fn merge(self, other: GradCheck) -> GradCheck {
        let worse = other.max_relative_error > self.max_relative_error || other.max_relative_error.is_nan();
        GradCheck {
            max_relative_error: if worse {
                other.max_relative_error
            } else {
                self.max_relative_error
            },
            worst_index: if worse { other.worst_index } else { self.worst_index },
            checked: self.checked + other.checked,
        }
    }

    const EMPTY: GradCheck = GradCheck {
        max_relative_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
}

/// Checks the gradient of the scalar graph built by `build` with respect to
/// every element of every input.
pub fn check_graph(
    inputs: &[Tensor<f64>],
    h: f64,
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let mut total = GradCheck::EMPTY;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[k]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let value = |probe: &Tensor<f64>| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, v)| t.constant(if j == k { probe.clone() } else { v.clone() }))
                .collect();
            let l = build(&mut t, &vs)?;
            Ok(t.value(l).item())
        };
        total = total.merge(finite_diff_check(value, &analytic, x, h)?);
    }
    Ok(total)
}

/// Reduces `y` to a scalar through a fixed random projection, so that a
/// gradient check on the result covers every output element.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(tape.value(y).shape(), |_| rng.random_range(-1.0..1.0));
    let rv = tape.constant(r);
    let prod = tape.hadamard(y, rv)?;
    Ok(tape.sum(prod))
}

/// Random tensor with entries in `±[0.1, 1]`, away from the kinks of relu
/// and clamp at zero.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Gradient checks of every differentiable tape operation on small random
/// inputs, one entry per case.
pub fn primitive_suite(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    const H: f64 = 1e-6;
    let t = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(31).wrapping_add(k));
    let mut out = Vec::new();
    let mut case = |name: &'static str,
                    inputs: Vec<Tensor<f64>>,
                    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        out.push((name, check_graph(&inputs, H, build)?));
        Ok(())
    };
    case(
        "conv2d",
        vec![t(&[2, 6, 6], 1), t(&[3, 2, 3, 3], 2), t(&[3], 3)],
        &|tp, v| {
            let y = tp.conv2d(v[0], v[1], v[2], 1)?;
            project(tp, y, 10)
        },
    )?;
    case(
        "conv2d_5x5",
        vec![t(&[1, 8, 8], 4), t(&[2, 1, 5, 5], 5), t(&[2], 6)],
        &|tp, v| {
            let y = tp.conv2d(v[0], v[1], v[2], 1)?;
            project(tp, y, 11)
        },
    )?;
    case(
        "conv2d_stride2",
        vec![t(&[2, 7, 7], 7), t(&[2, 2, 3, 3], 8), t(&[2], 9)],
        &|tp, v| {
            let y = tp.conv2d(v[0], v[1], v[2], 2)?;
            project(tp, y, 12)
        },
    )?;
    case(
        "conv2d_1x1",
        vec![t(&[4, 5, 5], 13), t(&[3, 4, 1, 1], 14), t(&[3], 15)],
        &|tp, v| {
            let y = tp.conv2d(v[0], v[1], v[2], 1)?;
            project(tp, y, 16)
        },
    )?;
    case("relu", vec![t(&[2, 4, 4], 17)], &|tp, v| {
        let y = tp.relu(v[0]);
        project(tp, y, 18)
    })?;
    case("sigmoid", vec![t(&[2, 4, 4], 19)], &|tp, v| {
        let y = tp.sigmoid(v[0]);
        project(tp, y, 20)
    })?;
    case("dropout", vec![t(&[3, 4, 4], 21)], &|tp, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let y = tp.dropout(v[0], 0.5, true, &mut rng)?;
        project(tp, y, 23)
    })?;
    case("hadamard", vec![t(&[2, 3, 3], 24), t(&[2, 3, 3], 25)], &|tp, v| {
        let y = tp.hadamard(v[0], v[1])?;
        project(tp, y, 26)
    })?;
    case("hadamard_shared_input", vec![t(&[2, 3, 3], 27)], &|tp, v| {
        let g = tp.sigmoid(v[0]);
        let y = tp.hadamard(v[0], g)?;
        project(tp, y, 28)
    })?;
    case("add", vec![t(&[2, 3, 3], 29), t(&[2, 3, 3], 30)], &|tp, v| {
        let y = tp.add(v[0], v[1])?;
        project(tp, y, 31)
    })?;
    case("scale", vec![t(&[2, 3, 3], 32)], &|tp, v| {
        let y = tp.scale(v[0], -1.7);
        project(tp, y, 33)
    })?;
    case(
        "concat_channels",
        vec![t(&[1, 3, 3], 34), t(&[2, 3, 3], 35)],
        &|tp, v| {
            let y = tp.concat_channels(&[v[0], v[1]])?;
            project(tp, y, 36)
        },
    )?;
    case("sum", vec![t(&[2, 3, 3], 37)], &|tp, v| Ok(tp.sum(v[0])))?;
    case("mse_loss", vec![t(&[1, 4, 4], 38), t(&[1, 4, 4], 39)], &|tp, v| {
        tp.mse_loss(v[0], v[1])
    })?;
    for label in [0.0, 1.0] {
        case(
            if label == 0.0 { "bce_label0" } else { "bce_label1" },
            vec![t(&[1], 40)],
            &move |tp, v| {
                let p = tp.sigmoid(v[0]);
                let p = tp.select(p, 0)?;
                tp.bce(p, label)
            },
        )?;
    }
    case("clamp", vec![t(&[2, 4, 4], 41).map(|v| 1.5 * v + 0.5)], &|tp, v| {
        let y = tp.clamp(v[0], 0.0, 1.0);
        project(tp, y, 42)
    })?;
    case("global_avg_pool", vec![t(&[3, 4, 4], 43)], &|tp, v| {
        let y = tp.global_avg_pool(v[0])?;
        project(tp, y, 44)
    })?;
    case("linear", vec![t(&[5], 45), t(&[3, 5], 46), t(&[3], 47)], &|tp, v| {
        let y = tp.linear(v[0], v[1], v[2])?;
        project(tp, y, 48)
    })?;
    case("softmax", vec![t(&[4], 49)], &|tp, v| {
        let y = tp.softmax(v[0]);
        project(tp, y, 50)
    })?;
    case("select", vec![t(&[4], 51)], &|tp, v| tp.select(v[0], 2))?;
    case("lp_penalty", vec![t(&[3, 4], 52)], &|tp, v| {
        Ok(tp.lp_penalty(v[0], 0.1, 1e-6))
    })?;
    Ok(out)
}

/// Gradient check of the denoiser training loss `mse(G(x), y) + lambda * lp`
/// in 64-bit precision. The input gradient is checked in full; every
/// parameter tensor at `per_param` random positions.
pub fn check_denoiser_loss(
    config: MultiScaleConfig,
    skip_mode: SkipMode,
    size: usize,
    per_param: usize,
    seed: u64,
) -> Result<GradCheck> {
    // The loss is O(1) while some parameter gradients are O(1e-7); a smaller
    // step lets cancellation error dominate.
    const H: f64 = 1e-5;
    let mut model = build_denoiser::<f64>(config, seed)?;
    model.set_skip_mode(skip_mode);
    let clean = synthetic::texture(seed, size, size).cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let noisy = crate::training::add_gaussian_noise(&clean, 25.0, &mut rng)?;

    let loss = |m: &DenoiserModel<f64>, input: &Tensor<f64>| -> Result<(f64, Gradients<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let x = tape.leaf(input.clone(), true);
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let fwd = m.forward_on_tape(&mut tape, &params, x, false, &mut unused)?;
        let y = tape.constant(clean.clone());
        let mse = tape.mse_loss(fwd.output, y)?;
        let lp = m.lp_penalty_on_tape(&mut tape, &params)?;
        let lp = tape.scale(lp, m.lp_config().lambda);
        let total = tape.add(mse, lp)?;
        let value = tape.value(total).item();
        Ok((value, tape.backward(total)?, params, x))
    };
    let value_only = |m: &DenoiserModel<f64>, input: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let x = tape.constant(input.clone());
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let fwd = m.forward_on_tape(&mut tape, &params, x, false, &mut unused)?;
        let y = tape.constant(clean.clone());
        let mse = tape.mse_loss(fwd.output, y)?;
        let lp = m.lp_penalty_on_tape(&mut tape, &params)?;
        Ok(tape.value(mse).item() + m.lp_config().lambda * tape.value(lp).item())
    };

    let (_, mut grads, params, x) = loss(&model, &noisy)?;
    let input_grad = grads.take(x).unwrap_or_else(|| Tensor::zeros(noisy.shape()));
    let mut total = finite_diff_check(|probe| value_only(&model, probe), &input_grad, &noisy, H)?;
    for (i, var) in params.iter().enumerate() {
        let value = model.params().get(i).value.clone();
        let analytic = grads.take(*var).unwrap_or_else(|| Tensor::zeros(value.shape()));
        let picks: Vec<usize> = if value.len() <= per_param {
            (0..value.len()).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..value.len())).collect()
        };
        let mut probe_model = model.clone();
        let check = finite_diff_check_at(
            |probe| {
                probe_model.params_mut().get_mut(i).value = probe.clone();
                value_only(&probe_model, &noisy)
            },
            &analytic,
            &value,
            H,
            &picks,
        );
        total = total.merge(check?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_squares(x: &Tensor<f64>) -> Result<f64> {
        Ok(x.data().iter().map(|v| v * v).sum())
    }

    #[test]
    fn sum_of_squares_matches_analytic_gradient() {
        let x = Tensor::from_fn(&[4, 5], |i| ((i * 7919) % 23) as f64 / 11.0 - 1.0);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let sq = tape.hadamard(xv, xv).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let analytic = g.get(xv).unwrap();
        assert_eq!(analytic, &x.map(|v| 2.0 * v));
        let r = finite_diff_check(sum_squares, analytic, &x, 1e-5).unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 20);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::ones(&[3]);
        let zero = Tensor::zeros(&[3]);
        let r = finite_diff_check(|_| Ok(4.0), &zero, &x, 1e-5).unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::<f64>::ones(&[2]);
        let wrong = Tensor::full(&[2], 3.0);
        let r = finite_diff_check(sum_squares, &wrong, &x, 1e-5).unwrap();
        assert!(r.max_relative_error > 0.3);
    }
}
