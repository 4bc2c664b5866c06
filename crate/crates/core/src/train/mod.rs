//! Pretraining orchestration: the per-step teacher/student update, LARS/SGD
//! optimizers, the warmup-cosine learning rate, EMA stepping and gap
//! telemetry.
//!
//! Schedule conventions: the learning rate ramps linearly over the warmup
//! steps then follows a half-cosine to zero at the final step; the momentum
//! coefficient either ramps by cosine from its base to 1 or stays fixed.
//! Within a step the optimizer update precedes the EMA update, so the
//! teacher always absorbs the newest student.

mod optim;

pub use optim::{lars_step, sgd_step, OptimizerState};

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{
    make_view_batch, pretrain_batches, AugmentParams, DataError, DatasetHandle,
};
use crate::momentum::{ema_update, init_teacher, teacher_forward, MomentumError, MomentumSchedule, TeacherState};
use crate::nn::{build_encoder, Encoder, EncoderSpec, Mode, ModelError};
use crate::objectives::{
    intra_gap_cosine, total_loss, BatchEmbeddings, IntraDistance, ObjectiveConfig,
};
use crate::tensor::{Scalar, Tensor, TensorError};
use crate::util::{self, tags};

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    NonFiniteLoss { step: u64, value: f64 },
    NanGradient { param: String },
    InvalidConfig(String),
    Model(ModelError),
    Momentum(MomentumError),
    Tensor(TensorError),
    Data(DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFiniteLoss { step, value } => {
                write!(f, "non-finite loss {value} at step {step}")
            }
            Self::NanGradient { param } => write!(f, "non-finite gradient on {param}"),
            Self::InvalidConfig(msg) => write!(f, "invalid train config: {msg}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Momentum(e) => write!(f, "{e}"),
            Self::Tensor(e) => write!(f, "{e}"),
            Self::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}
impl From<MomentumError> for TrainError {
    fn from(e: MomentumError) -> Self {
        TrainError::Momentum(e)
    }
}
impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}
impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Lars,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaMode {
    CosineRamp,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub eta_lars: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub beta_base: f64,
    pub beta_mode: BetaMode,
    pub objective: ObjectiveConfig,
    pub seed: u64,
    /// Alternating on/off phase length (steps) for the intra term; `None`
    /// keeps it always on.
    pub intra_toggle_period: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.3,
            eta_lars: 0.02,
            weight_decay: 1e-6,
            momentum: 0.9,
            optimizer: OptimizerKind::Lars,
            batch_size: 256,
            epochs: 100,
            warmup_epochs: 10,
            beta_base: 0.996,
            beta_mode: BetaMode::CosineRamp,
            objective: ObjectiveConfig::default(),
            seed: 1,
            intra_toggle_period: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(TrainError::InvalidConfig("lr must be > 0".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(TrainError::InvalidConfig(
                "warmup_epochs must be < epochs".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.beta_base) || self.beta_base == 0.0 {
            return Err(TrainError::InvalidConfig("beta_base must be in (0, 1)".into()));
        }
        if self.intra_toggle_period == Some(0) {
            return Err(TrainError::InvalidConfig(
                "intra_toggle_period must be >= 1".into(),
            ));
        }
        self.objective.validate()?;
        Ok(())
    }
}

/// Per-step telemetry; the gap is always the cosine distance between
/// student and teacher predictor outputs of the same views, whatever
/// distance trains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub step: u64,
    pub intra_gap: f32,
    pub sim_pct: f32,
    pub inter_loss: f32,
    pub intra_loss: f32,
    pub beta: f32,
    pub lr: f32,
}

/// Warmup-cosine learning rate: linear 0 -> lr over the warmup steps, then
/// `lr * (cos(pi * progress) + 1) / 2` down to 0 at `total_steps`.
pub fn lr_at(base_lr: f64, warmup_steps: u64, total_steps: u64, step: u64) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = (step.saturating_sub(warmup_steps)) as f64 / span as f64;
    base_lr * ((PI * progress).cos() + 1.0) / 2.0
}

/// Whether the intra term trains at `step` under the toggle schedule
/// (phases start on).
pub fn intra_active(period: Option<u64>, step: u64) -> bool {
    match period {
        None => true,
        Some(p) => (step / p) % 2 == 0,
    }
}

fn scalar_value<S: Scalar>(t: &Tensor<S>) -> f64 {
    Scalar::to_f64(t.values()[0])
}

/// One pretraining step: student forwards on both views, teacher forwards
/// (no grad), total loss, backward, optimizer, EMA update, telemetry.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    student: &mut Encoder<f32>,
    teacher: &mut TeacherState<f32>,
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    lr: f64,
    beta: f64,
    step: u64,
) -> Result<GapRecord> {
    let tape = crate::tensor::Tape::new();
    let binding = student.attach(&tape);
    let s1 = student.encode(x1, Mode::Train, Some(&binding))?;
    let s2 = student.encode(x2, Mode::Train, Some(&binding))?;
    // Teacher normalizes by its EMA running statistics: a deterministic
    // per-sample target that only ema_update may move.
    let t1 = teacher_forward(teacher, x1, Mode::Eval)?;
    let t2 = teacher_forward(teacher, x2, Mode::Eval)?;

    let be = BatchEmbeddings::new(s1.p, s2.p, s1.z, s2.z, t1.p, t2.p, t1.z, t2.z)?;
    let mut objective = cfg.objective;
    if !intra_active(cfg.intra_toggle_period, step) {
        objective.intra = IntraDistance::None;
    }
    let parts = total_loss(&be, &objective)?;
    let total = scalar_value(&parts.total);
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss { step, value: total });
    }
    tape.backward(&parts.total)?;
    let grads = binding.grads();
    match cfg.optimizer {
        OptimizerKind::Lars => lars_step(
            student,
            &grads,
            opt,
            lr,
            cfg.eta_lars,
            cfg.weight_decay,
            cfg.momentum,
        )?,
        OptimizerKind::Sgd => {
            sgd_step(student, &grads, opt, lr, cfg.momentum, cfg.weight_decay)?
        }
    }
    ema_update(teacher, student, beta, step)?;

    // Gap telemetry is always the cosine distance on (p, p_m).
    let g1 = scalar_value(&intra_gap_cosine(&be.p1.detach(), &be.p1m)?);
    let g2 = scalar_value(&intra_gap_cosine(&be.p2.detach(), &be.p2m)?);
    let gap = 0.5 * (g1 + g2);
    Ok(GapRecord {
        step,
        intra_gap: gap as f32,
        sim_pct: ((1.0 - gap / 2.0) * 100.0) as f32,
        inter_loss: parts.inter as f32,
        intra_loss: parts.intra as f32,
        beta: beta as f32,
        lr: lr as f32,
    })
}

/// Owns the training loop state; epochs run one at a time so callers can
/// checkpoint and persist metrics between them.
pub struct Pretrainer {
    pub cfg: TrainConfig,
    pub student: Encoder<f32>,
    pub teacher: TeacherState<f32>,
    pub opt: OptimizerState,
    pub step: u64,
    pub batches_per_epoch: usize,
    pub total_steps: u64,
    pub aug1: AugmentParams,
    pub aug2: AugmentParams,
    beta_schedule: MomentumSchedule,
}

impl Pretrainer {
    pub fn new(
        cfg: TrainConfig,
        spec: &EncoderSpec,
        aug1: AugmentParams,
        aug2: AugmentParams,
        dataset: &DatasetHandle,
    ) -> Result<Self> {
        cfg.validate()?;
        aug1.validate()?;
        aug2.validate()?;
        let n = dataset.train.len();
        if cfg.batch_size > n {
            return Err(TrainError::Data(DataError::BatchTooLarge {
                batch: cfg.batch_size,
                available: n,
            }));
        }
        let batches_per_epoch = n / cfg.batch_size;
        let total_steps = (cfg.epochs * batches_per_epoch) as u64;
        let student = build_encoder::<f32>(spec, cfg.seed)?;
        let teacher = init_teacher(&student)?;
        let opt = OptimizerState::new(&student);
        let beta_schedule = MomentumSchedule::new(cfg.beta_base, total_steps.max(1))?;
        Ok(Pretrainer {
            cfg,
            student,
            teacher,
            opt,
            step: 0,
            batches_per_epoch,
            total_steps,
            aug1,
            aug2,
            beta_schedule,
        })
    }

    /// Rebuilds a loop from restored state (checkpoint resume).
    pub fn from_parts(
        cfg: TrainConfig,
        student: Encoder<f32>,
        teacher: TeacherState<f32>,
        opt: OptimizerState,
        step: u64,
        aug1: AugmentParams,
        aug2: AugmentParams,
        dataset: &DatasetHandle,
    ) -> Result<Self> {
        cfg.validate()?;
        let batches_per_epoch = dataset.train.len() / cfg.batch_size;
        let total_steps = (cfg.epochs * batches_per_epoch) as u64;
        let beta_schedule = MomentumSchedule::new(cfg.beta_base, total_steps.max(1))?;
        Ok(Pretrainer {
            cfg,
            student,
            teacher,
            opt,
            step,
            batches_per_epoch,
            total_steps,
            aug1,
            aug2,
            beta_schedule,
        })
    }

    pub fn current_epoch(&self) -> usize {
        (self.step / self.batches_per_epoch.max(1) as u64) as usize
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn lr_now(&self) -> f64 {
        let warmup = (self.cfg.warmup_epochs * self.batches_per_epoch) as u64;
        lr_at(self.cfg.lr, warmup, self.total_steps, self.step)
    }

    pub fn beta_now(&self) -> Result<f64> {
        match self.cfg.beta_mode {
            BetaMode::Fixed => Ok(self.cfg.beta_base),
            BetaMode::CosineRamp => Ok(self
                .beta_schedule
                .beta_at(self.step.min(self.beta_schedule.total_steps))?),
        }
    }

    /// Runs the remainder of the current epoch (all of it when the step
    /// counter sits on an epoch boundary), invoking `on_step` per record.
    pub fn run_epoch(
        &mut self,
        dataset: &DatasetHandle,
        mut on_step: impl FnMut(&GapRecord),
    ) -> Result<Vec<GapRecord>> {
        let epoch = self.current_epoch();
        let epoch_seed = util::subseed(self.cfg.seed, tags::SHUFFLE ^ (epoch as u64));
        let batches =
            pretrain_batches(dataset.train.len(), self.cfg.batch_size, epoch_seed)?;
        let offset = (self.step % self.batches_per_epoch as u64) as usize;
        let mut records = Vec::new();
        for batch in batches.iter().skip(offset) {
            if self.finished() {
                break;
            }
            let (x1, x2) = make_view_batch(
                &dataset.train,
                batch,
                &self.aug1,
                &self.aug2,
                epoch_seed,
                &dataset.stats,
            )?;
            let lr = self.lr_now();
            let beta = self.beta_now()?;
            let record = train_step(
                &mut self.student,
                &mut self.teacher,
                &x1,
                &x2,
                &self.cfg,
                &mut self.opt,
                lr,
                beta,
                self.step,
            )?;
            self.step += 1;
            on_step(&record);
            records.push(record);
        }
        Ok(records)
    }

    /// Runs every remaining epoch, collecting all records.
    pub fn run(
        &mut self,
        dataset: &DatasetHandle,
        mut on_step: impl FnMut(&GapRecord),
    ) -> Result<Vec<GapRecord>> {
        let mut all = Vec::new();
        while !self.finished() {
            all.extend(self.run_epoch(dataset, &mut on_step)?);
        }
        Ok(all)
    }
}

/// Convenience wrapper: build a fresh loop and run it to completion.
pub fn pretrain(
    cfg: TrainConfig,
    spec: &EncoderSpec,
    aug1: AugmentParams,
    aug2: AugmentParams,
    dataset: &DatasetHandle,
) -> Result<(Encoder<f32>, TeacherState<f32>, Vec<GapRecord>)> {
    let mut loop_ = Pretrainer::new(cfg, spec, aug1, aug2, dataset)?;
    let records = loop_.run(dataset, |_| {})?;
    let Pretrainer { student, teacher, .. } = loop_;
    Ok((student, teacher, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_blobs, SynthSpec};
    use crate::nn::BackboneKind;

    fn tiny_spec() -> EncoderSpec {
        EncoderSpec {
            backbone: BackboneKind::Mlp,
            backbone_widths: vec![8],
            in_channels: 3,
            in_size: 8,
            projector_hidden: 8,
            projector_out: 4,
            predictor_hidden: 8,
            use_predictor: true,
        }
    }

    fn tiny_dataset() -> DatasetHandle {
        synth_blobs(&SynthSpec {
            classes: 2,
            per_class: 12,
            image_size: 8,
            separation: 2.0,
            noise: 0.05,
            seed: 3,
        })
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 6,
            epochs: 2,
            warmup_epochs: 1,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_endpoints_and_continuity() {
        let (warmup, total) = (100u64, 1000u64);
        assert_eq!(lr_at(0.3, warmup, total, 0), 0.0);
        assert_eq!(lr_at(0.3, warmup, total, warmup), 0.3);
        // Continuity at the boundary.
        let before = lr_at(0.3, warmup, total, warmup - 1);
        assert!((before - 0.3 * 99.0 / 100.0).abs() < 1e-12);
        assert!(lr_at(0.3, warmup, total, total).abs() < 1e-9);
        // Monotone down after warmup.
        assert!(lr_at(0.3, warmup, total, 500) > lr_at(0.3, warmup, total, 900));
    }

    #[test]
    fn toggle_phases_alternate_starting_on() {
        assert!(intra_active(None, 999));
        for s in 0..100 {
            assert!(intra_active(Some(100), s));
        }
        for s in 100..200 {
            assert!(!intra_active(Some(100), s));
        }
        assert!(intra_active(Some(100), 200));
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = tiny_cfg();
        cfg.warmup_epochs = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.batch_size = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.intra_toggle_period = Some(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn baseline_objective_reports_zero_intra() {
        let ds = tiny_dataset();
        let mut cfg = tiny_cfg();
        cfg.objective.intra = IntraDistance::None;
        let mut tr = Pretrainer::new(
            cfg,
            &tiny_spec(),
            AugmentParams::view1(8),
            AugmentParams::view2(8),
            &ds,
        )
        .unwrap();
        let records = tr.run_epoch(&ds, |_| {}).unwrap();
        assert_eq!(records.len(), 4, "24 samples / batch 6");
        for r in &records {
            assert_eq!(r.intra_loss, 0.0);
            assert!(r.inter_loss.is_finite());
            assert!(r.intra_gap >= 0.0 && r.intra_gap <= 4.0);
            assert!(r.sim_pct <= 100.0 && r.sim_pct >= -100.0);
        }
    }

    #[test]
    fn frozen_teacher_at_beta_one_never_moves_during_steps() {
        let ds = tiny_dataset();
        let mut cfg = tiny_cfg();
        cfg.beta_mode = BetaMode::Fixed;
        cfg.beta_base = 0.5; // validated base; the step itself gets beta = 1
        let mut tr = Pretrainer::new(
            cfg.clone(),
            &tiny_spec(),
            AugmentParams::view1(8),
            AugmentParams::view2(8),
            &ds,
        )
        .unwrap();
        let before = tr.teacher.encoder.checksum();
        let student_before = tr.student.checksum();
        let batches = pretrain_batches(ds.train.len(), cfg.batch_size, 1).unwrap();
        let (x1, x2) =
            make_view_batch(&ds.train, &batches[0], &tr.aug1, &tr.aug2, 1, &ds.stats).unwrap();
        train_step(
            &mut tr.student,
            &mut tr.teacher,
            &x1,
            &x2,
            &cfg,
            &mut tr.opt,
            0.05,
            1.0,
            0,
        )
        .unwrap();
        assert_eq!(
            tr.teacher.encoder.checksum(),
            before,
            "beta = 1 freezes the teacher through a full step"
        );
        assert_ne!(tr.student.checksum(), student_before, "student must move");
    }

    #[test]
    fn toggle_off_phase_zeroes_intra_loss_but_records_gap() {
        let ds = tiny_dataset();
        let mut cfg = tiny_cfg();
        cfg.intra_toggle_period = Some(1); // on at step 0, off at step 1
        let mut tr = Pretrainer::new(
            cfg,
            &tiny_spec(),
            AugmentParams::view1(8),
            AugmentParams::view2(8),
            &ds,
        )
        .unwrap();
        let records = tr.run_epoch(&ds, |_| {}).unwrap();
        assert!(records[0].intra_loss != 0.0, "on-phase trains the intra term");
        assert_eq!(records[1].intra_loss, 0.0, "off-phase zeroes the intra term");
        assert!(records[1].intra_gap > 0.0, "gap is still recorded");
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let ds = tiny_dataset();
        let run = || {
            pretrain(
                tiny_cfg(),
                &tiny_spec(),
                AugmentParams::view1(8),
                AugmentParams::view2(8),
                &ds,
            )
            .unwrap()
            .2
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 8, "epochs * batches_per_epoch records");
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        // An intra weight beyond f32 range overflows the total, which must
        // abort the step before any parameter moves.
        let ds = tiny_dataset();
        let mut cfg = tiny_cfg();
        cfg.objective.intra_weight = 1e40;
        let mut tr = Pretrainer::new(
            cfg.clone(),
            &tiny_spec(),
            AugmentParams::view1(8),
            AugmentParams::view2(8),
            &ds,
        )
        .unwrap();
        let batches = pretrain_batches(ds.train.len(), cfg.batch_size, 1).unwrap();
        let (x1, x2) =
            make_view_batch(&ds.train, &batches[0], &tr.aug1, &tr.aug2, 1, &ds.stats).unwrap();
        let err = train_step(
            &mut tr.student,
            &mut tr.teacher,
            &x1,
            &x2,
            &cfg,
            &mut tr.opt,
            0.1,
            0.9,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { .. }), "{err:?}");
    }
}
