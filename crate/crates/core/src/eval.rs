//! Frozen-representation evaluation: linear probe (top-1/top-5) and
//! cosine KNN-1 over backbone features.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{ChannelStats, Split};
use crate::nn::{Encoder, Mode, ModelError};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::util::{self, tags};

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Debug, PartialEq)]
pub enum EvalError {
    /// Feature extraction requires eval mode.
    ModeError,
    ClassMismatch { train: usize, test: usize },
    EmptyBank,
    KTooLarge { k: usize, classes: usize },
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ModeError => write!(f, "feature extraction requires eval mode"),
            Self::ClassMismatch { train, test } => {
                write!(f, "class count mismatch: train {train} vs test {test}")
            }
            Self::EmptyBank => write!(f, "feature bank is empty"),
            Self::KTooLarge { k, classes } => write!(f, "k {k} exceeds class count {classes}"),
            Self::Model(e) => write!(f, "{e}"),
            Self::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<ModelError> for EvalError {
    fn from(e: ModelError) -> Self {
        EvalError::Model(e)
    }
}
impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}

/// Frozen backbone features of one split, row-major `[n, dim]`.
pub struct FeatureBank {
    pub features: Vec<f32>,
    pub n: usize,
    pub dim: usize,
    pub labels: Vec<u16>,
    pub class_count: usize,
    pub split: String,
}

impl FeatureBank {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: Option<f64>,
    pub top5: Option<f64>,
    pub knn1: Option<f64>,
    pub fingerprint: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.3,
            momentum: 0.9,
            batch_size: 256,
            seed: 1,
        }
    }
}

/// Center view of an image for evaluation: plain bilinear resize to the
/// encoder's input extent plus per-channel normalization (no augmentation).
pub fn plain_view(img: &crate::data::ImageU8, size: usize, stats: &ChannelStats) -> Vec<f32> {
    let mut out = vec![0.0f32; 3 * size * size];
    for c in 0..3 {
        let mean = stats.mean[c] as f32;
        let std = stats.std[c] as f32;
        for dy in 0..size {
            let sy = ((dy as f64 + 0.5) * img.height as f64 / size as f64 - 0.5)
                .clamp(0.0, (img.height - 1) as f64);
            let ty = sy.floor() as usize;
            let by = (ty + 1).min(img.height - 1);
            let fy = (sy - ty as f64) as f32;
            for dx in 0..size {
                let sx = ((dx as f64 + 0.5) * img.width as f64 / size as f64 - 0.5)
                    .clamp(0.0, (img.width - 1) as f64);
                let lx = sx.floor() as usize;
                let rx = (lx + 1).min(img.width - 1);
                let fx = (sx - lx as f64) as f32;
                let p = |y: usize, x: usize| img.get(y, x, c) as f32;
                let top = p(ty, lx) * (1.0 - fx) + p(ty, rx) * fx;
                let bot = p(by, lx) * (1.0 - fx) + p(by, rx) * fx;
                let v = top * (1.0 - fy) + bot * fy;
                out[(c * size + dy) * size + dx] = (v / 255.0 - mean) / std;
            }
        }
    }
    out
}

/// Backbone features of every sample in a split, taken with frozen
/// parameters in eval mode.
pub fn extract_features(
    encoder: &Encoder<f32>,
    split: &Split,
    class_count: usize,
    stats: &ChannelStats,
    mode: Mode,
    tag: &str,
) -> Result<FeatureBank> {
    if mode != Mode::Eval {
        return Err(EvalError::ModeError);
    }
    if split.is_empty() {
        return Err(EvalError::EmptyBank);
    }
    let size = encoder.spec().in_size;
    let dim = encoder.spec().feature_dim();
    let batch = 256usize;
    let mut features = Vec::with_capacity(split.len() * dim);
    for chunk in crate::data::eval_batches(split.len(), batch) {
        let b = chunk.len();
        let mut v = vec![0.0f32; b * 3 * size * size];
        for (row, &i) in chunk.iter().enumerate() {
            let pv = plain_view(&split.images[i], size, stats);
            v[row * pv.len()..(row + 1) * pv.len()].copy_from_slice(&pv);
        }
        let x = Tensor::from_vec(&[b, 3, size, size], v).expect("stacked eval batch");
        let out = encoder.encode_frozen(&x, Mode::Eval)?;
        features.extend_from_slice(out.h.values());
    }
    Ok(FeatureBank {
        features,
        n: split.len(),
        dim,
        labels: split.labels.clone(),
        class_count,
        split: tag.to_string(),
    })
}

/// Percent of rows whose label ranks inside the top `k` logits, ties broken
/// toward lower class indices.
pub fn topk_accuracy(logits: &[f32], n: usize, c: usize, labels: &[u16], k: usize) -> Result<f64> {
    if k > c {
        return Err(EvalError::KTooLarge { k, classes: c });
    }
    if n == 0 {
        return Err(EvalError::EmptyBank);
    }
    let mut correct = 0usize;
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let label = labels[i] as usize;
        let lv = row[label];
        let mut rank = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > lv || (v == lv && j < label) {
                rank += 1;
            }
        }
        if rank < k {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}

fn normalized_rows(bank: &FeatureBank) -> Vec<f32> {
    let mut out = bank.features.clone();
    for r in 0..bank.n {
        let row = &mut out[r * bank.dim..(r + 1) * bank.dim];
        let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
        for v in row.iter_mut() {
            *v = (*v as f64 * inv) as f32;
        }
    }
    out
}

/// Cosine nearest-neighbor classification; ties go to the lowest train
/// index. Returns percent correct on the test bank.
pub fn knn1(train: &FeatureBank, test: &FeatureBank) -> Result<f64> {
    if train.n == 0 || test.n == 0 {
        return Err(EvalError::EmptyBank);
    }
    if train.class_count != test.class_count {
        return Err(EvalError::ClassMismatch {
            train: train.class_count,
            test: test.class_count,
        });
    }
    let tr = normalized_rows(train);
    let te = normalized_rows(test);
    let mut correct = 0usize;
    for i in 0..test.n {
        let q = &te[i * test.dim..(i + 1) * test.dim];
        let mut best = (f32::NEG_INFINITY, 0usize);
        for j in 0..train.n {
            let r = &tr[j * train.dim..(j + 1) * train.dim];
            let sim: f32 = q.iter().zip(r).map(|(a, b)| a * b).sum();
            if sim > best.0 {
                best = (sim, j);
            }
        }
        if train.labels[best.1] == test.labels[i] {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / test.n as f64)
}

/// Single linear layer + softmax cross-entropy trained by heavy-ball SGD
/// with a cosine learning rate on frozen features; reports test top-1 and
/// top-5 percentages.
pub fn linear_probe(
    train: &FeatureBank,
    test: &FeatureBank,
    cfg: &ProbeConfig,
) -> Result<(f64, f64)> {
    if train.n == 0 || test.n == 0 {
        return Err(EvalError::EmptyBank);
    }
    if train.class_count != test.class_count {
        return Err(EvalError::ClassMismatch {
            train: train.class_count,
            test: test.class_count,
        });
    }
    let (f, c) = (train.dim, train.class_count);
    let mut w = vec![0.0f32; f * c];
    let mut b = vec![0.0f32; c];
    let mut buf_w = vec![0.0f32; f * c];
    let mut buf_b = vec![0.0f32; c];
    let batch_size = cfg.batch_size.min(train.n).max(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr
            * ((std::f64::consts::PI * epoch as f64 / cfg.epochs.max(1) as f64).cos() + 1.0)
            / 2.0;
        let seed = util::subseed(cfg.seed, tags::PROBE ^ (epoch as u64));
        let order = crate::data::shuffled_indices(train.n, seed);
        for chunk in order.chunks(batch_size) {
            let bs = chunk.len();
            let mut xv = vec![0.0f32; bs * f];
            let mut onehot = vec![0.0f32; bs * c];
            for (row, &i) in chunk.iter().enumerate() {
                xv[row * f..(row + 1) * f].copy_from_slice(train.row(i));
                onehot[row * c + train.labels[i] as usize] = 1.0;
            }
            let tape = Tape::<f32>::new();
            let x = Tensor::from_vec(&[bs, f], xv)?;
            let wt = tape.var(&[f, c], w.clone())?;
            let bt = tape.var(&[c], b.clone())?;
            let logits = x.matmul(&wt)?.add(&bt)?;
            let m = logits.max_axis_detached(1)?;
            let shifted = logits.sub(&m)?;
            let lse = shifted.exp().sum_axis(1, true)?.ln()?;
            let logp = shifted.sub(&lse)?;
            let oh = Tensor::from_vec(&[bs, c], onehot)?;
            let loss = logp.mul(&oh)?.sum_axis(1, true)?.neg().mean_all()?;
            tape.backward(&loss)?;
            let gw = wt.grad().expect("probe weight gradient");
            let gb = bt.grad().expect("probe bias gradient");
            for (j, (wv, gv)) in w.iter_mut().zip(gw.values()).enumerate() {
                buf_w[j] = (cfg.momentum * buf_w[j] as f64 + *gv as f64) as f32;
                *wv = (*wv as f64 - lr * buf_w[j] as f64) as f32;
            }
            for (j, (bv, gv)) in b.iter_mut().zip(gb.values()).enumerate() {
                buf_b[j] = (cfg.momentum * buf_b[j] as f64 + *gv as f64) as f32;
                *bv = (*bv as f64 - lr * buf_b[j] as f64) as f32;
            }
        }
    }

    // Test logits from the trained layer.
    let mut logits = vec![0.0f32; test.n * c];
    for i in 0..test.n {
        let x = test.row(i);
        for j in 0..c {
            let mut acc = b[j] as f64;
            for (k_, &xv) in x.iter().enumerate() {
                acc += xv as f64 * w[k_ * c + j] as f64;
            }
            logits[i * c + j] = acc as f32;
        }
    }
    let top1 = topk_accuracy(&logits, test.n, c, &test.labels, 1)?;
    let top5 = topk_accuracy(&logits, test.n, c, &test.labels, 5.min(c))?;
    Ok((top1, top5))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(features: Vec<f32>, dim: usize, labels: Vec<u16>, classes: usize) -> FeatureBank {
        FeatureBank {
            n: labels.len(),
            features,
            dim,
            labels,
            class_count: classes,
            split: "test".into(),
        }
    }

    fn onehot_bank(n_per_class: usize, classes: usize) -> FeatureBank {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for k in 0..classes {
            for _ in 0..n_per_class {
                let mut row = vec![0.0f32; classes];
                row[k] = 1.0;
                features.extend(row);
                labels.push(k as u16);
            }
        }
        bank(features, classes, labels, classes)
    }

    #[test]
    fn probe_on_onehot_features_is_perfect() {
        let train = onehot_bank(8, 4);
        let test = onehot_bank(3, 4);
        let cfg = ProbeConfig { epochs: 30, batch_size: 16, ..Default::default() };
        let (top1, top5) = linear_probe(&train, &test, &cfg).unwrap();
        assert_eq!(top1, 100.0);
        assert_eq!(top5, 100.0, "top-5 saturates when classes <= 5");
    }

    #[test]
    fn probe_on_random_features_matches_permutation_chance() {
        // Random features with random labels: accuracy ~ 100 / C, checked
        // against a label-permutation oracle on the same features.
        let classes = 4usize;
        let n = 400usize;
        let dim = 8usize;
        let mut state = 7u64;
        let mut next = || {
            state = crate::util::splitmix64(state);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        let features: Vec<f32> = (0..n * dim).map(|_| (next() * 2.0 - 1.0) as f32).collect();
        let labels: Vec<u16> = (0..n).map(|_| (next() * classes as f64) as u16).collect();
        let train = bank(features.clone(), dim, labels.clone(), classes);
        // Permutation oracle: shift every label by one class.
        let permuted: Vec<u16> = labels.iter().map(|l| (l + 1) % classes as u16).collect();
        let test = bank(features.clone(), dim, labels.clone(), classes);
        let test_perm = bank(features, dim, permuted, classes);
        let cfg = ProbeConfig { epochs: 10, batch_size: 64, ..Default::default() };
        let (acc, _) = linear_probe(&train, &test, &cfg).unwrap();
        let (chance, _) = linear_probe(&train, &test_perm, &cfg).unwrap();
        // Training data is its own test set here, so 'acc' can exceed
        // chance via memorization, but the permuted labels stay at chance.
        assert!((chance - 100.0 / classes as f64).abs() < 5.0, "chance {chance}");
        assert!(acc >= chance - 5.0);
    }

    #[test]
    fn knn_self_match_tie_rule_and_scale_invariance() {
        let train = bank(vec![1.0, 0.0, 0.0, 1.0], 2, vec![0, 1], 2);
        let test = bank(vec![1.0, 0.0], 2, vec![0], 2);
        assert_eq!(knn1(&train, &test).unwrap(), 100.0);

        // Equidistant test point: lowest train index (label 0) wins.
        let tie = bank(vec![0.7, 0.7], 2, vec![0], 2);
        assert_eq!(knn1(&train, &tie).unwrap(), 100.0);
        let tie_other = bank(vec![0.7, 0.7], 2, vec![1], 2);
        assert_eq!(knn1(&train, &tie_other).unwrap(), 0.0);

        // Positive per-row scaling changes nothing (cosine metric).
        let scaled = bank(vec![300.0, 0.0], 2, vec![0], 2);
        assert_eq!(knn1(&train, &scaled).unwrap(), 100.0);

        let empty = bank(vec![], 2, vec![], 2);
        assert!(matches!(knn1(&train, &empty), Err(EvalError::EmptyBank)));
        let wrong = bank(vec![1.0, 0.0], 2, vec![0], 3);
        assert!(matches!(
            knn1(&train, &wrong),
            Err(EvalError::ClassMismatch { .. })
        ));
    }

    #[test]
    fn topk_rules() {
        // Perfect logits.
        let logits = vec![0.9, 0.1, 0.2, 0.8];
        assert_eq!(topk_accuracy(&logits, 2, 2, &[0, 1], 1).unwrap(), 100.0);
        // k = C is exhaustive.
        assert_eq!(topk_accuracy(&logits, 2, 2, &[1, 0], 2).unwrap(), 100.0);
        // All-equal logits: tie-break by class index.
        let flat = vec![0.5f32; 12];
        for k in 1..=3usize {
            let acc = topk_accuracy(&flat, 4, 3, &[0, 1, 2, 0], k).unwrap();
            let expect = (0..4).filter(|i| [0usize, 1, 2, 0][*i] < k).count() as f64 * 25.0;
            assert_eq!(acc, expect, "k={k}");
        }
        // Monotone in k.
        let mut prev = 0.0;
        let logits: Vec<f32> = (0..40).map(|i| ((i * 7) % 11) as f32).collect();
        let labels: Vec<u16> = (0..10).map(|i| (i % 4) as u16).collect();
        for k in 1..=4 {
            let acc = topk_accuracy(&logits, 10, 4, &labels, k).unwrap();
            assert!(acc >= prev);
            prev = acc;
        }
        assert!(matches!(
            topk_accuracy(&logits, 10, 4, &labels, 5),
            Err(EvalError::KTooLarge { .. })
        ));
    }

    #[test]
    fn extraction_is_deterministic_and_needs_eval_mode() {
        use crate::data::{synth_blobs, SynthSpec};
        use crate::nn::{build_encoder, BackboneKind, EncoderSpec};
        let ds = synth_blobs(&SynthSpec {
            classes: 2,
            per_class: 5,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let spec = EncoderSpec {
            backbone: BackboneKind::Smallconv,
            backbone_widths: vec![4, 6],
            in_channels: 3,
            in_size: 8,
            projector_hidden: 8,
            projector_out: 4,
            predictor_hidden: 8,
            use_predictor: true,
        };
        let enc = build_encoder::<f32>(&spec, 2).unwrap();
        let before = enc.checksum();
        let a = extract_features(&enc, &ds.train, 2, &ds.stats, Mode::Eval, "train").unwrap();
        let b = extract_features(&enc, &ds.train, 2, &ds.stats, Mode::Eval, "train").unwrap();
        assert_eq!(enc.checksum(), before, "extraction must not move parameters");
        assert_eq!(a.features, b.features);
        assert_eq!(a.n, ds.train.len());
        assert_eq!(a.dim, 6);
        assert!(matches!(
            extract_features(&enc, &ds.train, 2, &ds.stats, Mode::Train, "train"),
            Err(EvalError::ModeError)
        ));
    }
}
