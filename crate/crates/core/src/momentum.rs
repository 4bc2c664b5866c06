//! EMA teacher lifecycle: initialization, the interpolation update
//! `xi <- beta * xi + (1 - beta) * theta`, and the cosine schedule that ramps
//! the momentum coefficient from its base value to 1.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::nn::{build_encoder, copy_parameters, EncodeOut, Encoder, Mode, ModelError};
use crate::tensor::{Scalar, Tensor};

pub type Result<T> = std::result::Result<T, MomentumError>;

#[derive(Clone, Debug, PartialEq)]
pub enum MomentumError {
    StepOutOfRange { step: u64, total: u64 },
    BetaOutOfRange { beta: f64 },
    InvalidSchedule(String),
    Model(ModelError),
}

impl fmt::Display for MomentumError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::StepOutOfRange { step, total } => {
                write!(f, "step {step} outside schedule range 0..={total}")
            }
            Self::BetaOutOfRange { beta } => write!(f, "beta {beta} outside (0, 1]"),
            Self::InvalidSchedule(msg) => write!(f, "invalid momentum schedule: {msg}"),
            Self::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MomentumError {}

impl From<ModelError> for MomentumError {
    fn from(e: ModelError) -> Self {
        MomentumError::Model(e)
    }
}

/// EMA shadow of the student; never receives gradients.
pub struct TeacherState<S: Scalar> {
    pub encoder: Encoder<S>,
    pub step_of_last_update: u64,
}

/// Cosine ramp of the momentum coefficient over a fixed step budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentumSchedule {
    pub beta_base: f64,
    pub beta_final: f64,
    pub total_steps: u64,
}

impl MomentumSchedule {
    pub fn new(beta_base: f64, total_steps: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta_base) || beta_base == 0.0 {
            return Err(MomentumError::InvalidSchedule(format!(
                "beta_base {beta_base} outside (0, 1)"
            )));
        }
        if total_steps == 0 {
            return Err(MomentumError::InvalidSchedule(
                "total_steps must be >= 1".into(),
            ));
        }
        Ok(MomentumSchedule {
            beta_base,
            beta_final: 1.0,
            total_steps,
        })
    }

    /// beta(t) = final - (final - base) * (cos(pi t / T) + 1) / 2,
    /// nondecreasing from base at t = 0 to final at t = T.
    pub fn beta_at(&self, t: u64) -> Result<f64> {
        if t > self.total_steps {
            return Err(MomentumError::StepOutOfRange {
                step: t,
                total: self.total_steps,
            });
        }
        let progress = t as f64 / self.total_steps as f64;
        let w = ((PI * progress).cos() + 1.0) / 2.0;
        Ok(self.beta_final - (self.beta_final - self.beta_base) * w)
    }
}

/// Teacher starts as a bitwise copy of the student (parameters and BN
/// running statistics alike).
pub fn init_teacher<S: Scalar>(student: &Encoder<S>) -> Result<TeacherState<S>> {
    let mut encoder = build_encoder(student.spec(), 0)?;
    copy_parameters(student, &mut encoder)?;
    Ok(TeacherState {
        encoder,
        step_of_last_update: 0,
    })
}

/// Applies `xi <- beta * xi + (1 - beta) * theta` to every teacher parameter
/// and BN running statistic.
pub fn ema_update<S: Scalar>(
    teacher: &mut TeacherState<S>,
    student: &Encoder<S>,
    beta: f64,
    step: u64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) || beta == 0.0 {
        return Err(MomentumError::BetaOutOfRange { beta });
    }
    if teacher.encoder.spec() != student.spec() {
        return Err(MomentumError::Model(ModelError::SpecMismatch));
    }
    let b = S::from_f64(beta);
    let keep = S::one() - b;
    for i in 0..student.params().len() {
        let new: Vec<S> = teacher.encoder.params()[i]
            .value
            .values()
            .iter()
            .zip(student.params()[i].value.values())
            .map(|(&xi, &theta)| b * xi + keep * theta)
            .collect();
        teacher.encoder.set_param_values(i, new);
    }
    let src_bn: Vec<_> = student.bn_states().to_vec();
    for (dst, src) in teacher.encoder.bn_states_mut().iter_mut().zip(&src_bn) {
        for (xi, &theta) in dst.running_mean.iter_mut().zip(&src.running_mean) {
            *xi = b * *xi + keep * theta;
        }
        for (xi, &theta) in dst.running_var.iter_mut().zip(&src.running_var) {
            *xi = b * *xi + keep * theta;
        }
    }
    teacher.step_of_last_update = step;
    Ok(())
}

/// Forward through the teacher: identical to a student encode in the same
/// mode, but all outputs are detached and no state moves.
pub fn teacher_forward<S: Scalar>(
    teacher: &TeacherState<S>,
    x: &Tensor<S>,
    mode: Mode,
) -> Result<EncodeOut<S>> {
    Ok(teacher.encoder.encode_frozen(x, mode)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BackboneKind, EncoderSpec};
    use crate::tensor::Tape;

    fn spec() -> EncoderSpec {
        EncoderSpec {
            backbone: BackboneKind::Mlp,
            backbone_widths: vec![6],
            in_channels: 1,
            in_size: 3,
            projector_hidden: 4,
            projector_out: 3,
            predictor_hidden: 4,
            use_predictor: true,
        }
    }

    fn input(b: usize) -> Tensor<f64> {
        let v: Vec<f64> = (0..b * 9).map(|i| (i as f64) * 0.11 - 0.5).collect();
        Tensor::from_vec(&[b, 1, 3, 3], v).unwrap()
    }

    #[test]
    fn init_teacher_is_bitwise_copy() {
        let student = build_encoder::<f64>(&spec(), 42).unwrap();
        let teacher = init_teacher(&student).unwrap();
        assert_eq!(student.checksum(), teacher.encoder.checksum());
        for (a, b) in student.params().iter().zip(teacher.encoder.params()) {
            for (x, y) in a.value.values().iter().zip(b.value.values()) {
                assert_eq!(x, y);
            }
        }
    }

    #[test]
    fn teacher_outputs_are_detached_and_match_student_in_eval() {
        let mut student = build_encoder::<f64>(&spec(), 1).unwrap();
        let teacher = init_teacher(&student).unwrap();
        let x = input(2);
        let tape = Tape::<f64>::new();
        let nodes_before = tape.node_count();
        let t_out = teacher_forward(&teacher, &x, Mode::Eval).unwrap();
        assert_eq!(tape.node_count(), nodes_before, "teacher records nothing");
        assert!(!t_out.p.is_tracked() && !t_out.z.is_tracked() && !t_out.h.is_tracked());
        let s_out = student.encode(&x, Mode::Eval, None).unwrap();
        assert_eq!(t_out.p.values(), s_out.p.values());
    }

    #[test]
    fn beta_schedule_endpoints_and_midpoint() {
        let sched = MomentumSchedule::new(0.996, 1000).unwrap();
        assert_eq!(sched.beta_at(0).unwrap(), 0.996);
        assert_eq!(sched.beta_at(1000).unwrap(), 1.0);
        let mid = sched.beta_at(500).unwrap();
        assert!((mid - 0.998).abs() < 1e-12, "midpoint {mid}");
        assert!(matches!(
            sched.beta_at(1001),
            Err(MomentumError::StepOutOfRange { .. })
        ));
    }

    #[test]
    fn beta_schedule_is_monotonic() {
        let sched = MomentumSchedule::new(0.9, 500).unwrap();
        let mut prev = 0.0;
        for t in 0..=500 {
            let b = sched.beta_at(t).unwrap();
            assert!(b >= prev, "beta must be nondecreasing");
            prev = b;
        }
    }

    #[test]
    fn ema_update_interpolates_and_is_fixed_at_one() {
        let student = build_encoder::<f64>(&spec(), 7).unwrap();
        let mut teacher = init_teacher(&student).unwrap();
        // Zero the teacher: after one update, xi = (1 - beta) * theta.
        for i in 0..teacher.encoder.params().len() {
            let n = teacher.encoder.params()[i].value.numel();
            teacher.encoder.set_param_values(i, vec![0.0; n]);
        }
        ema_update(&mut teacher, &student, 0.99, 1).unwrap();
        for (t, s) in teacher.encoder.params().iter().zip(student.params()) {
            for (&xi, &theta) in t.value.values().iter().zip(s.value.values()) {
                assert!((xi - 0.01 * theta).abs() < 1e-15);
            }
        }

        let before = teacher.encoder.checksum();
        ema_update(&mut teacher, &student, 1.0, 2).unwrap();
        assert_eq!(teacher.encoder.checksum(), before, "beta = 1 is a fixed point");

        assert!(matches!(
            ema_update(&mut teacher, &student, 0.0, 3),
            Err(MomentumError::BetaOutOfRange { .. })
        ));
    }

    #[test]
    fn ema_contraction_follows_geometric_law() {
        // Constant student: |xi_n - theta| = beta^n |xi_0 - theta|.
        let student = build_encoder::<f64>(&spec(), 3).unwrap();
        for beta in [0.9, 0.99, 0.996] {
            let mut teacher = init_teacher(&student).unwrap();
            let offset = 0.5;
            for i in 0..teacher.encoder.params().len() {
                let v: Vec<f64> = student.params()[i]
                    .value
                    .values()
                    .iter()
                    .map(|t| t + offset)
                    .collect();
                teacher.encoder.set_param_values(i, v);
            }
            // Short horizon: with a nonzero student the additive rounding
            // noise (~eps * |theta| per step) caps how small a measurable
            // gap can get.
            let n = 100u32;
            for step in 0..n {
                ema_update(&mut teacher, &student, beta, step as u64).unwrap();
            }
            let expected = offset * beta.powi(n as i32);
            for (t, s) in teacher.encoder.params().iter().zip(student.params()) {
                for (&xi, &theta) in t.value.values().iter().zip(s.value.values()) {
                    let gap = (xi - theta).abs();
                    assert!(
                        (gap - expected).abs() <= 1e-6 * expected.max(1e-12),
                        "beta {beta}: gap {gap} vs expected {expected}"
                    );
                }
            }
        }
    }

    #[test]
    fn ema_update_moves_running_stats_too() {
        let mut student = build_encoder::<f64>(&spec(), 5).unwrap();
        let mut teacher = init_teacher(&student).unwrap();
        student.encode(&input(4), Mode::Train, None).unwrap(); // move student stats
        let before = teacher.encoder.checksum();
        ema_update(&mut teacher, &student, 0.5, 1).unwrap();
        assert_ne!(teacher.encoder.checksum(), before);
        let t_mean = teacher.encoder.bn_states()[0].running_mean.clone();
        let s_mean = &student.bn_states()[0].running_mean;
        for (t, s) in t_mean.iter().zip(s_mean) {
            // Teacher mean started at 0 like the student's pre-forward init,
            // so one 0.5 update lands halfway to the student's new value.
            assert!((t - 0.5 * s).abs() < 1e-12);
        }
    }
}
