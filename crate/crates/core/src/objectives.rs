//! Training objectives: InfoNCE inter-view losses (with and without an EMA
//! key encoder), BYOL/SimSiam cosine inter losses, and the three intra-view
//! distances (cosine, CE, MSE) with their symmetrized combinations.
//!
//! Teacher-derived tensors enter untracked, so no objective can leak
//! gradient into the teacher; momentum-free variants stop gradients
//! explicitly via `detach`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Denominator floor for row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterLoss {
    InfonceEma,
    #[serde(rename = "infonce_noema")]
    InfonceNoEma,
    Byol,
    Simsiam,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraDistance {
    None,
    Cosine,
    Ce,
    Mse,
}

impl FromStr for InterLoss {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "infonce_ema" => Ok(Self::InfonceEma),
            "infonce_noema" => Ok(Self::InfonceNoEma),
            "byol" => Ok(Self::Byol),
            "simsiam" => Ok(Self::Simsiam),
            "none" => Ok(Self::None),
            other => Err(format!("unknown inter loss '{other}'")),
        }
    }
}

impl FromStr for IntraDistance {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "cosine" => Ok(Self::Cosine),
            "ce" => Ok(Self::Ce),
            "mse" => Ok(Self::Mse),
            other => Err(format!("unknown intra distance '{other}'")),
        }
    }
}

impl fmt::Display for InterLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::InfonceEma => "infonce_ema",
            Self::InfonceNoEma => "infonce_noema",
            Self::Byol => "byol",
            Self::Simsiam => "simsiam",
            Self::None => "none",
        };
        write!(f, "{s}")
    }
}

impl fmt::Display for IntraDistance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Cosine => "cosine",
            Self::Ce => "ce",
            Self::Mse => "mse",
        };
        write!(f, "{s}")
    }
}

/// Which losses train, and their temperatures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    pub inter: InterLoss,
    pub intra: IntraDistance,
    /// Contrastive temperature.
    pub tau: f64,
    /// Softmax temperature of the CE/MSE intra distances.
    pub tau_s: f64,
    pub intra_weight: f64,
    /// Pair the student predictor against the teacher projector instead of
    /// the teacher predictor (ablation knob; off by default).
    pub intra_asymmetric: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            inter: InterLoss::InfonceEma,
            intra: IntraDistance::Cosine,
            tau: 0.2,
            tau_s: 4.0,
            intra_weight: 1.0,
            intra_asymmetric: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(TensorError::NonPositiveTemperature { value: self.tau });
        }
        if self.tau_s <= 0.0 {
            return Err(TensorError::NonPositiveTemperature { value: self.tau_s });
        }
        if self.inter == InterLoss::None && self.intra == IntraDistance::None {
            return Err(TensorError::InvalidArgument {
                op: "objective",
                detail: "inter and intra cannot both be none".into(),
            });
        }
        Ok(())
    }
}

/// Student and teacher embeddings of both augmented views.
///
/// `p*` are predictor outputs, `z*` projector outputs; the `*m` tensors come
/// from the teacher and must be detached.
#[derive(Debug)]
pub struct BatchEmbeddings<S: Scalar> {
    pub p1: Tensor<S>,
    pub p2: Tensor<S>,
    pub z1: Tensor<S>,
    pub z2: Tensor<S>,
    pub p1m: Tensor<S>,
    pub p2m: Tensor<S>,
    pub z1m: Tensor<S>,
    pub z2m: Tensor<S>,
}

impl<S: Scalar> BatchEmbeddings<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        p1: Tensor<S>,
        p2: Tensor<S>,
        z1: Tensor<S>,
        z2: Tensor<S>,
        p1m: Tensor<S>,
        p2m: Tensor<S>,
        z1m: Tensor<S>,
        z2m: Tensor<S>,
    ) -> Result<Self> {
        let dims = p1.dims().to_vec();
        for t in [&p2, &z1, &z2, &p1m, &p2m, &z1m, &z2m] {
            if t.dims() != dims || t.rank() != 2 {
                return Err(TensorError::ShapeMismatch {
                    op: "batch_embeddings",
                    left: dims,
                    right: t.dims().to_vec(),
                });
            }
        }
        for t in [&p1m, &p2m, &z1m, &z2m] {
            if t.is_tracked() {
                return Err(TensorError::InvalidArgument {
                    op: "batch_embeddings",
                    detail: "teacher tensors must be detached".into(),
                });
            }
        }
        Ok(BatchEmbeddings {
            p1,
            p2,
            z1,
            z2,
            p1m,
            p2m,
            z1m,
            z2m,
        })
    }

    fn batch(&self) -> usize {
        self.p1.dims()[0]
    }
}

/// InfoNCE with in-batch negatives: for row i, the positive key is `k_i` and
/// every other row of `k` is a negative. Rows are l2-normalized internally.
pub fn infonce<S: Scalar>(q: &Tensor<S>, k: &Tensor<S>, tau: f64) -> Result<Tensor<S>> {
    if tau <= 0.0 {
        return Err(TensorError::NonPositiveTemperature { value: tau });
    }
    if q.rank() != 2 || q.dims() != k.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "infonce",
            left: q.dims().to_vec(),
            right: k.dims().to_vec(),
        });
    }
    let b = q.dims()[0];
    if b < 2 {
        return Err(TensorError::InvalidArgument {
            op: "infonce",
            detail: format!("batch {b} has no negatives; need at least 2 rows"),
        });
    }
    let eps = S::from_f64(NORM_EPS);
    let qn = q.l2_normalize(1, eps)?;
    let kn = k.l2_normalize(1, eps)?;
    let logits = qn
        .matmul(&kn.transpose2d()?)?
        .mul_scalar(S::one() / S::from_f64(tau));
    // Row log-sum-exp minus the diagonal (positive) logit.
    let m = logits.max_axis_detached(1)?;
    let lse = logits
        .sub(&m)?
        .exp()
        .sum_axis(1, true)?
        .ln()?
        .add(&m)?;
    let pos = logits.mul(&Tensor::eye(b)?)?.sum_axis(1, true)?;
    lse.sub(&pos)?.mean_all()
}

/// Mean over the batch of `2 - 2 cos(a_i, b_i)`; rows are l2-normalized
/// internally, so the value ranges over [0, 4].
pub fn intra_gap_cosine<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || a.dims() != b.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_distance",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let eps = S::from_f64(NORM_EPS);
    let an = a.l2_normalize(1, eps)?;
    let bn = b.l2_normalize(1, eps)?;
    let dots = an.mul(&bn)?.sum_axis(1, true)?;
    let two = S::from_f64(2.0);
    dots.mul_scalar(-two).add_scalar(two).mean_all()
}

/// Stable log-softmax computed eagerly (for the detached teacher rows).
fn log_softmax_rows<S: Scalar>(x: &Tensor<S>, tau_s: f64) -> Result<Tensor<S>> {
    let (b, d) = (x.dims()[0], x.dims()[1]);
    let inv_t = S::from_f64(1.0 / tau_s);
    let mut out = vec![S::zero(); b * d];
    for r in 0..b {
        let row = &x.values()[r * d..(r + 1) * d];
        let m = row.iter().cloned().fold(S::neg_infinity(), S::max) * inv_t;
        let mut sum = S::zero();
        for &v in row {
            sum = sum + (v * inv_t - m).exp();
        }
        let log_z = m + sum.ln();
        for (j, &v) in row.iter().enumerate() {
            out[r * d + j] = v * inv_t - log_z;
        }
    }
    Tensor::from_vec(&[b, d], out)
}

/// Cross-entropy distance between temperature-softmaxed rows,
/// `-P(q) . log P(q_m)`, averaged over the batch. The teacher side is
/// detached; gradient flows only through the student softmax.
pub fn intra_gap_ce<S: Scalar>(q: &Tensor<S>, q_m: &Tensor<S>, tau_s: f64) -> Result<Tensor<S>> {
    if tau_s <= 0.0 {
        return Err(TensorError::NonPositiveTemperature { value: tau_s });
    }
    if q.rank() != 2 || q.dims() != q_m.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "ce_distance",
            left: q.dims().to_vec(),
            right: q_m.dims().to_vec(),
        });
    }
    let p = q.softmax_t(1, S::from_f64(tau_s))?;
    let log_pm = log_softmax_rows(&q_m.detach(), tau_s)?;
    p.mul(&log_pm)?.sum_axis(1, true)?.neg().mean_all()
}

/// Half squared distance between the softmax rows, averaged over the batch;
/// ranges over [0, 1]. The teacher side is detached.
pub fn intra_gap_mse<S: Scalar>(q: &Tensor<S>, q_m: &Tensor<S>, tau_s: f64) -> Result<Tensor<S>> {
    if tau_s <= 0.0 {
        return Err(TensorError::NonPositiveTemperature { value: tau_s });
    }
    if q.rank() != 2 || q.dims() != q_m.dims() {
        return Err(TensorError::ShapeMismatch {
            op: "mse_distance",
            left: q.dims().to_vec(),
            right: q_m.dims().to_vec(),
        });
    }
    let ts = S::from_f64(tau_s);
    let p = q.softmax_t(1, ts)?;
    let pm = q_m.detach().softmax_t(1, ts)?;
    let d = p.sub(&pm)?;
    d.mul(&d)?
        .sum_axis(1, true)?
        .mul_scalar(S::from_f64(0.5))
        .mean_all()
}

/// Symmetrized inter-view InfoNCE: student predictor queries against
/// teacher projector keys, averaged over both view assignments.
pub fn inter_moco<S: Scalar>(be: &BatchEmbeddings<S>, tau: f64) -> Result<Tensor<S>> {
    let a = infonce(&be.p1, &be.z2m, tau)?;
    let b = infonce(&be.p2, &be.z1m, tau)?;
    a.add(&b)?.mul_scalar(S::from_f64(0.5)).mean_all()
}

/// Momentum-free contrastive loss: keys come from the student's own
/// projector with stop-gradient.
pub fn cl_no_ema<S: Scalar>(be: &BatchEmbeddings<S>, tau: f64) -> Result<Tensor<S>> {
    let a = infonce(&be.p1, &be.z2.detach(), tau)?;
    let b = infonce(&be.p2, &be.z1.detach(), tau)?;
    a.add(&b)?.mul_scalar(S::from_f64(0.5)).mean_all()
}

/// Symmetrized cosine inter-view loss against teacher projections.
pub fn byol_inter<S: Scalar>(be: &BatchEmbeddings<S>) -> Result<Tensor<S>> {
    let a = intra_gap_cosine(&be.p1, &be.z2m)?;
    let b = intra_gap_cosine(&be.p2, &be.z1m)?;
    a.add(&b)?.mul_scalar(S::from_f64(0.5)).mean_all()
}

/// Momentum-free symmetrized cosine loss with stop-gradient keys.
pub fn simsiam_inter<S: Scalar>(be: &BatchEmbeddings<S>) -> Result<Tensor<S>> {
    let a = intra_gap_cosine(&be.p1, &be.z2.detach())?;
    let b = intra_gap_cosine(&be.p2, &be.z1.detach())?;
    a.add(&b)?.mul_scalar(S::from_f64(0.5)).mean_all()
}

/// Symmetrized intra-view loss: the configured distance applied between
/// student and teacher outputs of the same view, averaged over views.
pub fn intra_m<S: Scalar>(be: &BatchEmbeddings<S>, cfg: &ObjectiveConfig) -> Result<Tensor<S>> {
    let (t1, t2) = if cfg.intra_asymmetric {
        (&be.z1m, &be.z2m)
    } else {
        (&be.p1m, &be.p2m)
    };
    let (a, b) = match cfg.intra {
        IntraDistance::Cosine => (
            intra_gap_cosine(&be.p1, t1)?,
            intra_gap_cosine(&be.p2, t2)?,
        ),
        IntraDistance::Ce => (
            intra_gap_ce(&be.p1, t1, cfg.tau_s)?,
            intra_gap_ce(&be.p2, t2, cfg.tau_s)?,
        ),
        IntraDistance::Mse => (
            intra_gap_mse(&be.p1, t1, cfg.tau_s)?,
            intra_gap_mse(&be.p2, t2, cfg.tau_s)?,
        ),
        IntraDistance::None => {
            return Err(TensorError::InvalidArgument {
                op: "intra_m",
                detail: "intra distance is none".into(),
            })
        }
    };
    a.add(&b)?.mul_scalar(S::from_f64(0.5)).mean_all()
}

/// Total objective plus the individual term values for telemetry.
pub struct LossParts<S: Scalar> {
    pub total: Tensor<S>,
    pub inter: f64,
    pub intra: f64,
}

/// total = inter_term + intra_weight * intra_term, each per the config
/// (a `none` selection contributes zero).
pub fn total_loss<S: Scalar>(
    be: &BatchEmbeddings<S>,
    cfg: &ObjectiveConfig,
) -> Result<LossParts<S>> {
    cfg.validate()?;
    let _ = be.batch();
    let inter = match cfg.inter {
        InterLoss::InfonceEma => Some(inter_moco(be, cfg.tau)?),
        InterLoss::InfonceNoEma => Some(cl_no_ema(be, cfg.tau)?),
        InterLoss::Byol => Some(byol_inter(be)?),
        InterLoss::Simsiam => Some(simsiam_inter(be)?),
        InterLoss::None => None,
    };
    let intra = match cfg.intra {
        IntraDistance::None => None,
        _ => Some(intra_m(be, cfg)?),
    };
    let inter_value = inter.as_ref().map_or(0.0, |t| Scalar::to_f64(t.values()[0]));
    let intra_value = intra.as_ref().map_or(0.0, |t| Scalar::to_f64(t.values()[0]));
    let zero = Tensor::zeros(&[1])?;
    let total = match (inter, intra) {
        (Some(a), Some(b)) => a.add(&b.mul_scalar(S::from_f64(cfg.intra_weight)))?,
        (Some(a), None) => a,
        (None, Some(b)) => b.mul_scalar(S::from_f64(cfg.intra_weight)),
        (None, None) => zero,
    };
    Ok(LossParts {
        total,
        inter: inter_value,
        intra: intra_value,
    })
}
