//! LARS and heavy-ball SGD over the parameter registry.
//!
//! Adapted parameters get the layer-wise trust ratio
//! `eta * ||w|| / (||g|| + wd * ||w||)` and weight decay; parameters flagged
//! by the registry (biases, normalization) use trust 1 and no decay.

use crate::nn::Encoder;
use crate::tensor::Tensor;

use super::TrainError;

pub struct OptimizerState {
    /// Heavy-ball momentum buffers, aligned with the registry.
    pub buffers: Vec<Vec<f32>>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(encoder: &Encoder<f32>) -> Self {
        OptimizerState {
            buffers: encoder
                .params()
                .iter()
                .map(|p| vec![0.0f32; p.value.numel()])
                .collect(),
            step_count: 0,
        }
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn check_finite(grads: &[Option<Tensor<f32>>], encoder: &Encoder<f32>) -> Result<(), TrainError> {
    for (g, p) in grads.iter().zip(encoder.params()) {
        if let Some(g) = g {
            if !g.all_finite() {
                return Err(TrainError::NanGradient { param: p.name.clone() });
            }
        }
    }
    Ok(())
}

/// One LARS update; `grads` align with the registry (missing entries are
/// treated as zero gradient).
pub fn lars_step(
    encoder: &mut Encoder<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimizerState,
    lr: f64,
    eta: f64,
    weight_decay: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    check_finite(grads, encoder)?;
    let zero: Vec<f32> = Vec::new();
    for i in 0..grads.len() {
        let excluded = encoder.params()[i].exclude_from_adaptation;
        let w = encoder.params()[i].value.values().to_vec();
        let g: &[f32] = grads[i].as_ref().map_or(&zero, |t| t.values());
        let get_g = |j: usize| if g.is_empty() { 0.0f32 } else { g[j] };
        let (trust, wd) = if excluded {
            (1.0f64, 0.0f64)
        } else {
            let w_norm = l2_norm(&w);
            let g_norm = l2_norm(g);
            let trust = if w_norm > 0.0 && g_norm > 0.0 {
                eta * w_norm / (g_norm + weight_decay * w_norm)
            } else {
                1.0
            };
            (trust, weight_decay)
        };
        let buf = &mut state.buffers[i];
        let mut new_w = w.clone();
        for j in 0..w.len() {
            let d = (get_g(j) as f64 + wd * w[j] as f64) * trust;
            buf[j] = (momentum * buf[j] as f64 + d) as f32;
            new_w[j] = (w[j] as f64 - lr * buf[j] as f64) as f32;
        }
        encoder.set_param_values(i, new_w);
    }
    state.step_count += 1;
    Ok(())
}

/// Classic heavy-ball SGD; weight decay skips flagged parameters.
pub fn sgd_step(
    encoder: &mut Encoder<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    check_finite(grads, encoder)?;
    let zero: Vec<f32> = Vec::new();
    for i in 0..grads.len() {
        let wd = if encoder.params()[i].no_weight_decay {
            0.0
        } else {
            weight_decay
        };
        let w = encoder.params()[i].value.values().to_vec();
        let g: &[f32] = grads[i].as_ref().map_or(&zero, |t| t.values());
        let get_g = |j: usize| if g.is_empty() { 0.0f32 } else { g[j] };
        let buf = &mut state.buffers[i];
        let mut new_w = w.clone();
        for j in 0..w.len() {
            let d = get_g(j) as f64 + wd * w[j] as f64;
            buf[j] = (momentum * buf[j] as f64 + d) as f32;
            new_w[j] = (w[j] as f64 - lr * buf[j] as f64) as f32;
        }
        encoder.set_param_values(i, new_w);
    }
    state.step_count += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_encoder, BackboneKind, EncoderSpec};

    fn tiny() -> Encoder<f32> {
        let spec = EncoderSpec {
            backbone: BackboneKind::Mlp,
            backbone_widths: vec![4],
            in_channels: 1,
            in_size: 2,
            projector_hidden: 4,
            projector_out: 2,
            predictor_hidden: 4,
            use_predictor: false,
        };
        build_encoder(&spec, 0).unwrap()
    }

    fn grads_like(enc: &Encoder<f32>, fill: f32) -> Vec<Option<Tensor<f32>>> {
        enc.params()
            .iter()
            .map(|p| Some(Tensor::full(p.value.dims(), fill).unwrap()))
            .collect()
    }

    #[test]
    fn zero_gradient_zero_buffer_is_fixed_point_without_decay() {
        let mut enc = tiny();
        let mut state = OptimizerState::new(&enc);
        let before = enc.checksum();
        let grads = grads_like(&enc, 0.0);
        lars_step(&mut enc, &grads, &mut state, 0.1, 0.02, 0.0, 0.9).unwrap();
        assert_eq!(enc.checksum(), before);
    }

    #[test]
    fn lars_scalar_trust_ratio() {
        // w = 1, g = 1, wd = 0 -> trust = eta; one step moves w by lr * eta.
        let mut enc = tiny();
        let idx = enc
            .params()
            .iter()
            .position(|p| !p.exclude_from_adaptation)
            .unwrap();
        let n = enc.params()[idx].value.numel();
        enc.set_param_values(idx, vec![1.0 / (n as f32).sqrt(); n]);
        // Uniform fill keeps ||w|| = ||g|| so the ratio is eta exactly when
        // wd = 0; a single-element view of the same algebra.
        let w_norm = 1.0f64;
        let grads: Vec<Option<Tensor<f32>>> = enc
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i == idx {
                    Some(Tensor::full(p.value.dims(), 1.0 / (n as f32).sqrt()).unwrap())
                } else {
                    None
                }
            })
            .collect();
        let mut state = OptimizerState::new(&enc);
        let before = enc.params()[idx].value.values().to_vec();
        lars_step(&mut enc, &grads, &mut state, 1.0, 0.02, 0.0, 0.0).unwrap();
        let after = enc.params()[idx].value.values();
        for (b, a) in before.iter().zip(after) {
            let moved = (b - a) as f64;
            // delta = lr * trust * g = 0.02 / sqrt(n)
            let expect = 0.02 * w_norm / (n as f64).sqrt();
            assert!((moved - expect).abs() < 1e-7, "moved {moved} expect {expect}");
        }
    }

    #[test]
    fn excluded_parameters_skip_decay() {
        // With zero gradient and nonzero decay, excluded parameters must not
        // move while adapted ones do.
        let mut enc = tiny();
        for i in 0..enc.params().len() {
            let n = enc.params()[i].value.numel();
            enc.set_param_values(i, vec![0.5; n]);
        }
        let grads = grads_like(&enc, 0.0);
        let mut state = OptimizerState::new(&enc);
        lars_step(&mut enc, &grads, &mut state, 0.1, 0.02, 0.5, 0.0).unwrap();
        for p in enc.params() {
            let moved = p.value.values().iter().any(|&v| v != 0.5);
            if p.exclude_from_adaptation {
                assert!(!moved, "{} must not decay", p.name);
            } else {
                assert!(moved, "{} must decay", p.name);
            }
        }
    }

    #[test]
    fn sgd_plain_and_two_step_recursion() {
        let mut enc = tiny();
        let mut state = OptimizerState::new(&enc);
        let w0: Vec<f32> = enc.params()[0].value.values().to_vec();
        let grads = grads_like(&enc, 0.25);

        // momentum 0, wd 0: w <- w - lr * g.
        sgd_step(&mut enc, &grads, &mut state, 0.1, 0.0, 0.0).unwrap();
        for (a, b) in enc.params()[0].value.values().iter().zip(&w0) {
            assert!((a - (b - 0.1 * 0.25)).abs() < 1e-7);
        }

        // Constant gradient, momentum 0.9: displacement after two steps is
        // lr * g * (1 + 1.9).
        let mut enc = tiny();
        let mut state = OptimizerState::new(&enc);
        let w0: Vec<f32> = enc.params()[0].value.values().to_vec();
        sgd_step(&mut enc, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut enc, &grads, &mut state, 0.1, 0.9, 0.0).unwrap();
        for (a, b) in enc.params()[0].value.values().iter().zip(&w0) {
            let moved = (b - a) as f64;
            let expect = 0.1 * 0.25 * (1.0 + 1.9);
            assert!((moved - expect).abs() < 1e-6, "moved {moved}");
        }

        // Zero gradient decays the buffer geometrically.
        let zeros = grads_like(&enc, 0.0);
        let b0 = state.buffers[0][0];
        for _ in 0..5 {
            sgd_step(&mut enc, &zeros, &mut state, 0.1, 0.9, 0.0).unwrap();
        }
        assert!((state.buffers[0][0] - b0 * 0.9f32.powi(5)).abs() < 1e-6);
    }

    #[test]
    fn nan_gradient_aborts_the_step() {
        let mut enc = tiny();
        let mut state = OptimizerState::new(&enc);
        let mut grads = grads_like(&enc, 0.0);
        let dims = enc.params()[1].value.dims().to_vec();
        let n: usize = dims.iter().product();
        grads[1] = Some(Tensor::from_vec(&dims, vec![f32::NAN; n]).unwrap());
        let before = enc.checksum();
        let err = lars_step(&mut enc, &grads, &mut state, 0.1, 0.02, 0.0, 0.9).unwrap_err();
        assert!(matches!(err, TrainError::NanGradient { .. }));
        assert_eq!(enc.checksum(), before, "aborted step must not move weights");
    }
}
