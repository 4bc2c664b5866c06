//! Layers, backbones and the projector/predictor heads making up an encoder.
//!
//! An [`Encoder`] is backbone `f` + projector `g` + optional predictor `q`
//! with a flat named-parameter registry. Parameters are value-semantic
//! tensors; a training step attaches them to a tape once via
//! [`Encoder::attach`] and reuses the binding for both augmented views so
//! fan-out gradients accumulate on a single set of leaves.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tape, Tensor, TensorError};
use crate::util::{self, tags};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelError {
    InvalidSpec(String),
    /// Source and destination encoders were built from different specs.
    SpecMismatch,
    /// Batch statistics are undefined for a single-sample batch.
    DegenerateBatch { batch: usize },
    Tensor(TensorError),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InvalidSpec(msg) => write!(f, "invalid encoder spec: {msg}"),
            Self::SpecMismatch => write!(f, "encoder specs do not match"),
            Self::DegenerateBatch { batch } => {
                write!(f, "batch normalization needs at least 2 samples, got {batch}")
            }
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    Smallconv,
}

/// Architecture description; two encoders with equal specs are structurally
/// identical and can exchange parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub backbone: BackboneKind,
    pub backbone_widths: Vec<usize>,
    pub in_channels: usize,
    /// Square input extent (H = W).
    pub in_size: usize,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub predictor_hidden: usize,
    pub use_predictor: bool,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            backbone: BackboneKind::Smallconv,
            backbone_widths: vec![16, 32, 64],
            in_channels: 3,
            in_size: 32,
            projector_hidden: 512,
            projector_out: 256,
            predictor_hidden: 512,
            use_predictor: true,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_widths.is_empty() {
            return Err(ModelError::InvalidSpec("backbone_widths is empty".into()));
        }
        if self.backbone_widths.iter().any(|&w| w == 0)
            || self.projector_hidden == 0
            || self.predictor_hidden == 0
            || self.in_channels == 0
            || self.in_size == 0
        {
            return Err(ModelError::InvalidSpec("all widths must be >= 1".into()));
        }
        if self.projector_out < 2 {
            return Err(ModelError::InvalidSpec("projector_out must be >= 2".into()));
        }
        if self.backbone == BackboneKind::Smallconv {
            // Each stride-2 stage halves the spatial extent.
            let min = 1usize << self.backbone_widths.len();
            if self.in_size < min {
                return Err(ModelError::InvalidSpec(format!(
                    "in_size {} too small for {} stride-2 stages",
                    self.in_size,
                    self.backbone_widths.len()
                )));
            }
        }
        Ok(())
    }

    /// Backbone feature width (the representation evaluated downstream).
    pub fn feature_dim(&self) -> usize {
        *self.backbone_widths.last().expect("validated non-empty")
    }
}

/// One named trainable value. Bias and normalization parameters are flagged
/// so the optimizer can skip trust-ratio adaptation and weight decay.
pub struct ParamTensor<S: Scalar> {
    pub name: String,
    pub value: Tensor<S>,
    pub exclude_from_adaptation: bool,
    pub no_weight_decay: bool,
}

#[derive(Clone)]
pub struct BnState<S: Scalar> {
    pub running_mean: Vec<S>,
    pub running_var: Vec<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy)]
enum Layer {
    Conv { w: usize, b: usize, stride: usize, pad: usize },
    Linear { w: usize, b: usize },
    BatchNorm { gamma: usize, beta: usize, state: usize },
    Relu,
    Flatten,
    GlobalAvgPool,
}

/// Backbone + projector + predictor with the parameter registry.
pub struct Encoder<S: Scalar> {
    spec: EncoderSpec,
    params: Vec<ParamTensor<S>>,
    bn: Vec<BnState<S>>,
    backbone: Vec<Layer>,
    projector: Vec<Layer>,
    predictor: Vec<Layer>,
}

/// Per-step leaf binding of every parameter onto one tape, in registry order.
pub struct TapedParams<S: Scalar> {
    leaves: Vec<Tensor<S>>,
}

impl<S: Scalar> TapedParams<S> {
    /// Gradient per parameter in registry order (after `backward`).
    pub fn grads(&self) -> Vec<Option<Tensor<S>>> {
        self.leaves.iter().map(|l| l.grad()).collect()
    }

    /// Binding assembled from explicit leaf tensors, in registry order.
    pub fn from_leaves(leaves: Vec<Tensor<S>>) -> Self {
        TapedParams { leaves }
    }
}

pub struct EncodeOut<S: Scalar> {
    /// Backbone features (pre-projector), the representation for evaluation.
    pub h: Tensor<S>,
    /// Projector output.
    pub z: Tensor<S>,
    /// Predictor output; equal to `z` when the spec has no predictor.
    pub p: Tensor<S>,
}

/// Batch moments queued during a train-mode forward, folded into running
/// statistics only for the student path.
type PendingStats<S> = Vec<(usize, Vec<S>, Vec<S>)>;

struct Builder<S: Scalar> {
    rng: ChaCha8Rng,
    params: Vec<ParamTensor<S>>,
    bn: Vec<BnState<S>>,
}

impl<S: Scalar> Builder<S> {
    /// He-uniform weight in [-sqrt(6/fan_in), sqrt(6/fan_in)], drawn in
    /// row-major order so identical seeds give identical bytes.
    fn weight(&mut self, name: &str, dims: &[usize], fan_in: usize) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = dims.iter().product();
        let values: Vec<S> = (0..n)
            .map(|_| S::from_f64(self.rng.gen_range(-bound..bound)))
            .collect();
        self.push(name, dims, values, false, false)
    }

    fn bias(&mut self, name: &str, dims: &[usize]) -> usize {
        let n: usize = dims.iter().product();
        self.push(name, dims, vec![S::zero(); n], true, true)
    }

    fn bn_params(&mut self, name: &str, dims: &[usize], channels: usize) -> (usize, usize, usize) {
        let n: usize = dims.iter().product();
        let gamma = self.push(&format!("{name}.gamma"), dims, vec![S::one(); n], true, true);
        let beta = self.push(&format!("{name}.beta"), dims, vec![S::zero(); n], true, true);
        self.bn.push(BnState {
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
        });
        (gamma, beta, self.bn.len() - 1)
    }

    fn push(
        &mut self,
        name: &str,
        dims: &[usize],
        values: Vec<S>,
        exclude: bool,
        no_decay: bool,
    ) -> usize {
        let value = Tensor::from_vec(dims, values).expect("builder shapes are valid");
        self.params.push(ParamTensor {
            name: name.to_string(),
            value,
            exclude_from_adaptation: exclude,
            no_weight_decay: no_decay,
        });
        self.params.len() - 1
    }

    /// Linear -> BN -> ReLU -> Linear head over the given width chain.
    fn mlp_head(&mut self, prefix: &str, dims: &[usize], layers: &mut Vec<Layer>) {
        for i in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[i], dims[i + 1]);
            let w = self.weight(&format!("{prefix}.fc{i}.weight"), &[fan_in, fan_out], fan_in);
            let b = self.bias(&format!("{prefix}.fc{i}.bias"), &[fan_out]);
            layers.push(Layer::Linear { w, b });
            if i + 1 < dims.len() - 1 {
                let (gamma, beta, state) =
                    self.bn_params(&format!("{prefix}.bn{i}"), &[fan_out], fan_out);
                layers.push(Layer::BatchNorm { gamma, beta, state });
                layers.push(Layer::Relu);
            }
        }
    }
}

/// Deterministically initialized encoder; identical seeds give
/// bitwise-identical parameters.
pub fn build_encoder<S: Scalar>(spec: &EncoderSpec, seed: u64) -> Result<Encoder<S>> {
    spec.validate()?;
    let mut b = Builder::<S> {
        rng: ChaCha8Rng::seed_from_u64(util::subseed(seed, tags::INIT)),
        params: Vec::new(),
        bn: Vec::new(),
    };

    let mut backbone = Vec::new();
    match spec.backbone {
        BackboneKind::Smallconv => {
            let mut in_ch = spec.in_channels;
            for (i, &out_ch) in spec.backbone_widths.iter().enumerate() {
                let fan_in = in_ch * 9;
                let w = b.weight(
                    &format!("backbone.conv{i}.weight"),
                    &[out_ch, in_ch, 3, 3],
                    fan_in,
                );
                let bias = b.bias(&format!("backbone.conv{i}.bias"), &[out_ch, 1, 1]);
                backbone.push(Layer::Conv { w, b: bias, stride: 2, pad: 1 });
                let (gamma, beta, state) =
                    b.bn_params(&format!("backbone.bn{i}"), &[out_ch, 1, 1], out_ch);
                backbone.push(Layer::BatchNorm { gamma, beta, state });
                backbone.push(Layer::Relu);
                in_ch = out_ch;
            }
            backbone.push(Layer::GlobalAvgPool);
        }
        BackboneKind::Mlp => {
            backbone.push(Layer::Flatten);
            let mut in_f = spec.in_channels * spec.in_size * spec.in_size;
            for (i, &out_f) in spec.backbone_widths.iter().enumerate() {
                let w = b.weight(&format!("backbone.fc{i}.weight"), &[in_f, out_f], in_f);
                let bias = b.bias(&format!("backbone.fc{i}.bias"), &[out_f]);
                backbone.push(Layer::Linear { w, b: bias });
                let (gamma, beta, state) =
                    b.bn_params(&format!("backbone.bn{i}"), &[out_f], out_f);
                backbone.push(Layer::BatchNorm { gamma, beta, state });
                backbone.push(Layer::Relu);
                in_f = out_f;
            }
        }
    }

    let feat = spec.feature_dim();
    let mut projector = Vec::new();
    b.mlp_head(
        "projector",
        &[feat, spec.projector_hidden, spec.projector_out],
        &mut projector,
    );
    let mut predictor = Vec::new();
    if spec.use_predictor {
        b.mlp_head(
            "predictor",
            &[spec.projector_out, spec.predictor_hidden, spec.projector_out],
            &mut predictor,
        );
    }

    Ok(Encoder {
        spec: spec.clone(),
        params: b.params,
        bn: b.bn,
        backbone,
        projector,
        predictor,
    })
}

impl<S: Scalar> Encoder<S> {
    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor<S>] {
        &self.params
    }

    pub fn set_param_values(&mut self, idx: usize, values: Vec<S>) {
        let dims = self.params[idx].value.dims().to_vec();
        self.params[idx].value =
            Tensor::from_vec(&dims, values).expect("replacement preserves shape");
    }

    pub fn bn_states(&self) -> &[BnState<S>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<S>] {
        &mut self.bn
    }

    /// Total trainable scalar count across the registry.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Content hash over parameters and BN running statistics, for
    /// frozen-state assertions.
    pub fn checksum(&self) -> u64 {
        let mut bytes = Vec::new();
        for p in &self.params {
            for v in p.value.values() {
                bytes.extend_from_slice(&Scalar::to_f64(*v).to_bits().to_le_bytes());
            }
        }
        for s in &self.bn {
            for v in s.running_mean.iter().chain(&s.running_var) {
                bytes.extend_from_slice(&Scalar::to_f64(*v).to_bits().to_le_bytes());
            }
        }
        util::fnv1a(&bytes)
    }

    /// Registers every parameter as a leaf on `tape`, in registry order.
    pub fn attach(&self, tape: &Tape<S>) -> TapedParams<S> {
        TapedParams {
            leaves: self.params.iter().map(|p| tape.leaf(&p.value)).collect(),
        }
    }

    /// Forward pass producing (h, z, p). Train mode normalizes by batch
    /// statistics and folds them into the running statistics; pass a binding
    /// from [`Encoder::attach`] to make the pass differentiable.
    pub fn encode(
        &mut self,
        x: &Tensor<S>,
        mode: Mode,
        binding: Option<&TapedParams<S>>,
    ) -> Result<EncodeOut<S>> {
        let (out, pending) = self.forward(x, mode, binding)?;
        if mode == Mode::Train {
            self.apply_pending(pending);
        }
        Ok(out)
    }

    /// Forward pass that never mutates running statistics (teacher use).
    pub fn encode_frozen(&self, x: &Tensor<S>, mode: Mode) -> Result<EncodeOut<S>> {
        let (out, _) = self.forward(x, mode, None)?;
        Ok(out)
    }

    /// Pure differentiable forward against an explicit parameter binding,
    /// leaving running statistics untouched (gradient-check use).
    pub fn encode_pure(
        &self,
        x: &Tensor<S>,
        mode: Mode,
        binding: Option<&TapedParams<S>>,
    ) -> Result<EncodeOut<S>> {
        let (out, _) = self.forward(x, mode, binding)?;
        Ok(out)
    }

    fn forward(
        &self,
        x: &Tensor<S>,
        mode: Mode,
        binding: Option<&TapedParams<S>>,
    ) -> Result<(EncodeOut<S>, PendingStats<S>)> {
        self.check_input(x)?;
        let mut pending = PendingStats::new();
        let h = self.run_stack(&self.backbone, x.clone(), mode, binding, &mut pending)?;
        let z = self.run_stack(&self.projector, h.clone(), mode, binding, &mut pending)?;
        let p = if self.spec.use_predictor {
            self.run_stack(&self.predictor, z.clone(), mode, binding, &mut pending)?
        } else {
            z.clone()
        };
        Ok((EncodeOut { h, z, p }, pending))
    }

    fn apply_pending(&mut self, pending: PendingStats<S>) {
        let m = S::from_f64(BN_MOMENTUM);
        let keep = S::one() - m;
        for (state, mean, var) in pending {
            let s = &mut self.bn[state];
            for (r, b) in s.running_mean.iter_mut().zip(mean) {
                *r = keep * *r + m * b;
            }
            for (r, b) in s.running_var.iter_mut().zip(var) {
                *r = keep * *r + m * b;
            }
        }
    }

    fn check_input(&self, x: &Tensor<S>) -> Result<()> {
        let d = x.dims();
        let ok = d.len() == 4
            && d[1] == self.spec.in_channels
            && d[2] == self.spec.in_size
            && d[3] == self.spec.in_size;
        if !ok {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "encode",
                left: d.to_vec(),
                right: vec![
                    0,
                    self.spec.in_channels,
                    self.spec.in_size,
                    self.spec.in_size,
                ],
            }));
        }
        Ok(())
    }

    fn param<'a>(&'a self, idx: usize, binding: Option<&'a TapedParams<S>>) -> &'a Tensor<S> {
        match binding {
            Some(b) => &b.leaves[idx],
            None => &self.params[idx].value,
        }
    }

    fn run_stack(
        &self,
        layers: &[Layer],
        mut x: Tensor<S>,
        mode: Mode,
        binding: Option<&TapedParams<S>>,
        pending: &mut PendingStats<S>,
    ) -> Result<Tensor<S>> {
        for layer in layers {
            x = match *layer {
                Layer::Conv { w, b, stride, pad } => {
                    let out = x.conv2d(self.param(w, binding), stride, pad)?;
                    out.add(self.param(b, binding))?
                }
                Layer::Linear { w, b } => {
                    let out = x.matmul(self.param(w, binding))?;
                    out.add(self.param(b, binding))?
                }
                Layer::BatchNorm { gamma, beta, state } => {
                    let g = self.param(gamma, binding);
                    let bt = self.param(beta, binding);
                    let (out, moments) = batchnorm_inner(&x, g, bt, &self.bn[state], mode)?;
                    if let Some((mean, var)) = moments {
                        pending.push((state, mean, var));
                    }
                    out
                }
                Layer::Relu => x.relu(),
                Layer::Flatten => {
                    let b = x.dims()[0];
                    x.reshape(&[b, x.numel() / b])?
                }
                Layer::GlobalAvgPool => x.mean_axis(3, false)?.mean_axis(2, false)?,
            };
        }
        Ok(x)
    }
}

/// Per-channel batch moments with keepdim shape; rank 2 normalizes per
/// feature, rank 4 per channel over (N, H, W).
fn batch_moments<S: Scalar>(x: &Tensor<S>) -> crate::tensor::Result<(Tensor<S>, Tensor<S>)> {
    let mean = match x.rank() {
        2 => x.mean_axis(0, true)?,
        _ => x.mean_axis(0, true)?.mean_axis(2, true)?.mean_axis(3, true)?,
    };
    let centered = x.sub(&mean)?;
    let sq = centered.mul(&centered)?;
    let var = match x.rank() {
        2 => sq.mean_axis(0, true)?,
        _ => sq.mean_axis(0, true)?.mean_axis(2, true)?.mean_axis(3, true)?,
    };
    Ok((mean, var))
}

fn batchnorm_inner<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    state: &BnState<S>,
    mode: Mode,
) -> Result<(Tensor<S>, Option<(Vec<S>, Vec<S>)>)> {
    if x.rank() != 2 && x.rank() != 4 {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "batchnorm",
            left: x.dims().to_vec(),
            right: vec![],
        }));
    }
    let channels = x.dims()[1];
    if channels != state.running_mean.len() {
        return Err(ModelError::Tensor(TensorError::ShapeMismatch {
            op: "batchnorm",
            left: vec![channels],
            right: vec![state.running_mean.len()],
        }));
    }
    let eps = S::from_f64(BN_EPS);
    let (mean, var, moments) = match mode {
        Mode::Train => {
            if x.dims()[0] < 2 {
                return Err(ModelError::DegenerateBatch { batch: x.dims()[0] });
            }
            let (mean, var) = batch_moments(x)?;
            let m = (mean.detach().values().to_vec(), var.detach().values().to_vec());
            (mean, var, Some(m))
        }
        Mode::Eval => {
            let dims: &[usize] = if x.rank() == 2 {
                &[1, channels]
            } else {
                &[1, channels, 1, 1]
            };
            (
                Tensor::from_vec(dims, state.running_mean.clone())?,
                Tensor::from_vec(dims, state.running_var.clone())?,
                None,
            )
        }
    };
    let denom = var.add_scalar(eps).sqrt()?;
    let xhat = x.sub(&mean)?.div(&denom)?;
    let out = xhat.mul(gamma)?.add(beta)?;
    Ok((out, moments))
}

/// Batch normalization over rank-2 `[B, F]` or rank-4 `[N, C, H, W]` input.
///
/// Train mode normalizes by the (biased) batch statistics; eval mode uses
/// running statistics. Running-stat updates are handled by the encoder so
/// the same code path serves student and teacher forwards.
pub fn batchnorm<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    state: &BnState<S>,
    mode: Mode,
) -> Result<Tensor<S>> {
    Ok(batchnorm_inner(x, gamma, beta, state, mode)?.0)
}

/// Copies every parameter value and BN running statistic from `src` into
/// `dst` (bitwise; tensors are value-semantic).
pub fn copy_parameters<S: Scalar>(src: &Encoder<S>, dst: &mut Encoder<S>) -> Result<()> {
    if src.spec != dst.spec {
        return Err(ModelError::SpecMismatch);
    }
    for i in 0..src.params.len() {
        dst.params[i].value = src.params[i].value.clone();
    }
    dst.bn = src.bn.clone();
    Ok(())
}
