//! Tensor operations: forward evaluation plus recorded backward rules.
//!
//! Every operation evaluates eagerly. When at least one input is tracked the
//! result is recorded on that input's tape with a backward closure; otherwise
//! the result is a plain untracked tensor. Elementwise operations broadcast
//! with trailing-dimension rules and reduce gradients back to each operand's
//! own shape.

use std::sync::Arc;

use super::tape::Tape;
use super::{Result, Scalar, Shape, Tensor, TensorError, DOMAIN_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Trailing-dimension broadcast of two shapes.
fn broadcast_dims(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![1usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::NotBroadcastable {
                left: a.to_vec(),
                right: b.to_vec(),
            });
        };
    }
    Ok(out)
}

/// Pads dims to rank 4 with leading ones.
fn pad4(dims: &[usize]) -> [usize; 4] {
    let mut out = [1usize; 4];
    let off = 4 - dims.len();
    for (i, &d) in dims.iter().enumerate() {
        out[off + i] = d;
    }
    out
}

/// Row-major strides of `dims` padded to rank 4, with stride 0 on axes of
/// extent 1 so the same index map serves broadcast reads and reduced writes.
fn strides4(dims: &[usize]) -> [usize; 4] {
    let p = pad4(dims);
    let mut s = [0usize; 4];
    let mut acc = 1usize;
    for i in (0..4).rev() {
        s[i] = if p[i] == 1 { 0 } else { acc };
        acc *= p[i];
    }
    s
}

/// Visits the rank-4 padded output domain in row-major order, handing each
/// output offset the matching offsets into `a` and `b`.
fn for_each3(out: [usize; 4], sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let mut oi = 0usize;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                let base_a = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let base_b = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..out[3] {
                    f(oi, base_a + i3 * sa[3], base_b + i3 * sb[3]);
                    oi += 1;
                }
            }
        }
    }
}

fn tape_of2<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Option<Tape<S>>> {
    match (a.node(), b.node()) {
        (Some(x), Some(y)) => {
            if !x.same_tape(y) {
                return Err(TensorError::TapeMismatch);
            }
            Ok(Some(x.tape()))
        }
        (Some(x), None) => Ok(Some(x.tape())),
        (None, Some(y)) => Ok(Some(y.tape())),
        (None, None) => Ok(None),
    }
}

fn emit<S, F>(
    tape: Option<Tape<S>>,
    shape: Shape,
    values: Vec<S>,
    inputs: Vec<Option<usize>>,
    backward: F,
) -> Tensor<S>
where
    S: Scalar,
    F: Fn(&[S]) -> Vec<Option<Vec<S>>> + 'static,
{
    match tape {
        Some(t) => t.record(shape, Arc::new(values), inputs, Box::new(backward)),
        None => Tensor::with_node(shape, Arc::new(values), None),
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn add(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        self.binary(rhs, BinOp::Mul)
    }

    /// Elementwise division; rejects denominators whose magnitude falls
    /// below the numeric-domain guard instead of propagating NaN/Inf.
    pub fn div(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        let eps = S::from_f64(DOMAIN_EPS);
        let bad: Vec<usize> = rhs
            .values()
            .iter()
            .enumerate()
            .filter(|(_, v)| v.abs() < eps)
            .map(|(i, _)| i)
            .take(4)
            .collect();
        if !bad.is_empty() {
            return Err(TensorError::NumericDomain {
                op: "div",
                detail: format!("denominator magnitude < {DOMAIN_EPS} at positions {bad:?}"),
            });
        }
        self.binary(rhs, BinOp::Div)
    }

    fn binary(&self, rhs: &Tensor<S>, op: BinOp) -> Result<Tensor<S>> {
        let out_dims = broadcast_dims(self.dims(), rhs.dims())?;
        let shape = Shape::new(&out_dims)?;
        let op4 = pad4(&out_dims);
        let sa = strides4(self.dims());
        let sb = strides4(rhs.dims());
        let av = self.values();
        let bv = rhs.values();
        let mut out = vec![S::zero(); shape.numel()];
        if self.dims() == rhs.dims() {
            // Same-shape fast path.
            for ((o, &x), &y) in out.iter_mut().zip(av).zip(bv) {
                *o = apply(op, x, y);
            }
        } else {
            for_each3(op4, sa, sb, |oi, ai, bi| {
                out[oi] = apply(op, av[ai], bv[bi]);
            });
        }

        let tape = tape_of2(self, rhs)?;
        if tape.is_none() {
            return Ok(Tensor::with_node(shape, Arc::new(out), None));
        }
        let need_a = self.is_tracked();
        let need_b = rhs.is_tracked();
        let a_vals = self.values_arc();
        let b_vals = rhs.values_arc();
        let (a_len, b_len) = (self.numel(), rhs.numel());
        let inputs = vec![
            self.node().map(|n| n.id()),
            rhs.node().map(|n| n.id()),
        ];
        let backward = move |g: &[S]| {
            let mut ga = if need_a { Some(vec![S::zero(); a_len]) } else { None };
            let mut gb = if need_b { Some(vec![S::zero(); b_len]) } else { None };
            for_each3(op4, sa, sb, |oi, ai, bi| {
                let go = g[oi];
                match op {
                    BinOp::Add => {
                        if let Some(ga) = ga.as_mut() {
                            ga[ai] = ga[ai] + go;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[bi] = gb[bi] + go;
                        }
                    }
                    BinOp::Sub => {
                        if let Some(ga) = ga.as_mut() {
                            ga[ai] = ga[ai] + go;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[bi] = gb[bi] - go;
                        }
                    }
                    BinOp::Mul => {
                        if let Some(ga) = ga.as_mut() {
                            ga[ai] = ga[ai] + go * b_vals[bi];
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[bi] = gb[bi] + go * a_vals[ai];
                        }
                    }
                    BinOp::Div => {
                        let d = b_vals[bi];
                        if let Some(ga) = ga.as_mut() {
                            ga[ai] = ga[ai] + go / d;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[bi] = gb[bi] - go * a_vals[ai] / (d * d);
                        }
                    }
                }
            });
            vec![ga, gb]
        };
        Ok(emit(tape, shape, out, inputs, backward))
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.values().iter().map(|&x| x + c).collect();
        let shape = self.shape().clone();
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        emit(tape, shape, out, inputs, move |g: &[S]| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn mul_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self.values().iter().map(|&x| x * c).collect();
        let shape = self.shape().clone();
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        emit(tape, shape, out, inputs, move |g: &[S]| {
            vec![Some(g.iter().map(|&v| v * c).collect())]
        })
    }

    pub fn neg(&self) -> Tensor<S> {
        self.mul_scalar(-S::one())
    }

    /// max(x, 0) with subgradient 0 at exactly 0.
    pub fn relu(&self) -> Tensor<S> {
        let out: Vec<S> = self
            .values()
            .iter()
            .map(|&x| if x > S::zero() { x } else { S::zero() })
            .collect();
        let shape = self.shape().clone();
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        let x_vals = self.values_arc();
        emit(tape, shape, out, inputs, move |g: &[S]| {
            vec![Some(
                g.iter()
                    .zip(x_vals.iter())
                    .map(|(&gv, &xv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect(),
            )]
        })
    }

    pub fn exp(&self) -> Tensor<S> {
        let out: Vec<S> = self.values().iter().map(|x| x.exp()).collect();
        let shape = self.shape().clone();
        let inputs = vec![self.node().map(|n| n.id())];
        let out = Arc::new(out);
        match self.node().map(|n| n.tape()) {
            Some(t) => {
                let out_bw = Arc::clone(&out);
                t.record(
                    shape,
                    out,
                    inputs,
                    Box::new(move |g: &[S]| {
                        vec![Some(
                            g.iter()
                                .zip(out_bw.iter())
                                .map(|(&gv, &ov)| gv * ov)
                                .collect(),
                        )]
                    }),
                )
            }
            None => Tensor::with_node(shape, out, None),
        }
    }

    /// Natural log; domain-guarded against non-positive inputs.
    pub fn ln(&self) -> Result<Tensor<S>> {
        if let Some(i) = self.values().iter().position(|&x| x <= S::zero()) {
            return Err(TensorError::NumericDomain {
                op: "ln",
                detail: format!("non-positive input at position {i}"),
            });
        }
        let out: Vec<S> = self.values().iter().map(|x| x.ln()).collect();
        let shape = self.shape().clone();
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        let x_vals = self.values_arc();
        Ok(emit(tape, shape, out, inputs, move |g: &[S]| {
            vec![Some(
                g.iter()
                    .zip(x_vals.iter())
                    .map(|(&gv, &xv)| gv / xv)
                    .collect(),
            )]
        }))
    }

    /// Elementwise square root; domain-guarded against negative inputs.
    pub fn sqrt(&self) -> Result<Tensor<S>> {
        if let Some(i) = self.values().iter().position(|&x| x < S::zero()) {
            return Err(TensorError::NumericDomain {
                op: "sqrt",
                detail: format!("negative input at position {i}"),
            });
        }
        let out: Vec<S> = self.values().iter().map(|x| x.sqrt()).collect();
        let shape = self.shape().clone();
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        let out = Arc::new(out);
        let two = S::from_f64(2.0);
        Ok(match tape {
            Some(t) => {
                let out_bw = Arc::clone(&out);
                t.record(
                    shape,
                    out,
                    inputs,
                    Box::new(move |g: &[S]| {
                        vec![Some(
                            g.iter()
                                .zip(out_bw.iter())
                                .map(|(&gv, &ov)| gv / (two * ov))
                                .collect(),
                        )]
                    }),
                )
            }
            None => Tensor::with_node(shape, out, None),
        })
    }

    /// max(x, c); gradient passes only where x > c.
    pub fn clamp_min_scalar(&self, c: S) -> Tensor<S> {
        let out: Vec<S> = self
            .values()
            .iter()
            .map(|&x| if x > c { x } else { c })
            .collect();
        let shape = self.shape().clone();
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        let x_vals = self.values_arc();
        emit(tape, shape, out, inputs, move |g: &[S]| {
            vec![Some(
                g.iter()
                    .zip(x_vals.iter())
                    .map(|(&gv, &xv)| if xv > c { gv } else { S::zero() })
                    .collect(),
            )]
        })
    }

    pub fn reshape(&self, dims: &[usize]) -> Result<Tensor<S>> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.dims().to_vec(),
                right: dims.to_vec(),
            });
        }
        let tape = self.node().map(|n| n.tape());
        let inputs = vec![self.node().map(|n| n.id())];
        let out = self.values().to_vec();
        Ok(emit(tape, shape, out, inputs, move |g: &[S]| {
            vec![Some(g.to_vec())]
        }))
    }

    /// Matrix transpose (rank 2 only).
    pub fn transpose2d(&self) -> Result<Tensor<S>> {
        if self.rank() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose2d",
                detail: format!("expected rank 2, got {}", self.rank()),
            });
        }
        let (m, n) = (self.dims()[0], self.dims()[1]);
        let v = self.values();
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        let shape = Shape::new(&[n, m])?;
        let tape = self.node().map(|t| t.tape());
        let inputs = vec![self.node().map(|t| t.id())];
        Ok(emit(tape, shape, out, inputs, move |g: &[S]| {
            let mut gx = vec![S::zero(); m * n];
            for j in 0..n {
                for i in 0..m {
                    gx[i * n + j] = g[j * m + i];
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Tensor<S>) -> Result<Tensor<S>> {
        if self.rank() != 2 || rhs.rank() != 2 || self.dims()[1] != rhs.dims()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.dims().to_vec(),
                right: rhs.dims().to_vec(),
            });
        }
        let (m, k, n) = (self.dims()[0], self.dims()[1], rhs.dims()[1]);
        let out = mm_nn(self.values(), rhs.values(), m, k, n);
        let shape = Shape::new(&[m, n])?;
        let tape = tape_of2(self, rhs)?;
        if tape.is_none() {
            return Ok(Tensor::with_node(shape, Arc::new(out), None));
        }
        let need_a = self.is_tracked();
        let need_b = rhs.is_tracked();
        let a_vals = self.values_arc();
        let b_vals = rhs.values_arc();
        let inputs = vec![self.node().map(|t| t.id()), rhs.node().map(|t| t.id())];
        let backward = move |g: &[S]| {
            // ga = g . b^T, gb = a^T . g
            let ga = need_a.then(|| mm_nt(g, &b_vals, m, n, k));
            let gb = need_b.then(|| mm_tn(&a_vals, g, m, k, n));
            vec![ga, gb]
        };
        Ok(emit(tape, shape, out, inputs, backward))
    }

    /// Sum over every element, producing a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor<S>> {
        let mut acc = S::zero();
        for &v in self.values() {
            acc = acc + v;
        }
        let shape = Shape::new(&[1])?;
        let tape = self.node().map(|t| t.tape());
        let inputs = vec![self.node().map(|t| t.id())];
        let numel = self.numel();
        Ok(emit(tape, shape, vec![acc], inputs, move |g: &[S]| {
            vec![Some(vec![g[0]; numel])]
        }))
    }

    pub fn mean_all(&self) -> Result<Tensor<S>> {
        let n = S::from_f64(self.numel() as f64);
        Ok(self.sum_all()?.mul_scalar(S::one() / n))
    }

    /// Sum along one axis. With `keepdim` the axis extent becomes 1,
    /// otherwise the axis is removed (a reduced rank-1 tensor stays `[1]`).
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let in_dims = self.dims().to_vec();
        let mut keep_dims = in_dims.clone();
        keep_dims[axis] = 1;
        let out_dims: Vec<usize> = if keepdim {
            keep_dims.clone()
        } else if in_dims.len() == 1 {
            vec![1]
        } else {
            in_dims
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != axis)
                .map(|(_, &d)| d)
                .collect()
        };
        let shape = Shape::new(&out_dims)?;
        let mut out = vec![S::zero(); shape.numel()];
        // Iterate the input domain, writing through the reduced-stride map.
        let ip4 = pad4(&in_dims);
        let s_out = strides4(&keep_dims);
        let s_in = strides4(&in_dims);
        let v = self.values();
        for_each3(ip4, s_out, s_in, |_, oi, ii| {
            out[oi] = out[oi] + v[ii];
        });
        let tape = self.node().map(|t| t.tape());
        let inputs = vec![self.node().map(|t| t.id())];
        let in_len = self.numel();
        let backward = move |g: &[S]| {
            let mut gx = vec![S::zero(); in_len];
            for_each3(ip4, s_out, s_in, |_, oi, ii| {
                gx[ii] = gx[ii] + g[oi];
            });
            vec![Some(gx)]
        };
        Ok(emit(tape, shape, out, inputs, backward))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let n = S::from_f64(self.dims()[axis] as f64);
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(S::one() / n))
    }

    /// Per-slice maximum along `axis` as an untracked keepdim tensor; used
    /// as the stability shift inside softmax (subtracting a constant does
    /// not change the softmax value or its gradient).
    pub fn max_axis_detached(&self, axis: usize) -> Result<Tensor<S>> {
        if axis >= self.rank() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: self.rank(),
            });
        }
        let in_dims = self.dims().to_vec();
        let mut keep_dims = in_dims.clone();
        keep_dims[axis] = 1;
        let shape = Shape::new(&keep_dims)?;
        let mut out = vec![S::neg_infinity(); shape.numel()];
        let ip4 = pad4(&in_dims);
        let s_out = strides4(&keep_dims);
        let s_in = strides4(&in_dims);
        let v = self.values();
        for_each3(ip4, s_out, s_in, |_, oi, ii| {
            if v[ii] > out[oi] {
                out[oi] = v[ii];
            }
        });
        Ok(Tensor::with_node(shape, Arc::new(out), None))
    }

    /// Temperature softmax along `axis`, computed with max-subtraction.
    pub fn softmax_t(&self, axis: usize, temperature: S) -> Result<Tensor<S>> {
        if temperature <= S::zero() {
            return Err(TensorError::NonPositiveTemperature {
                value: temperature.to_f64(),
            });
        }
        let m = self.max_axis_detached(axis)?;
        let z = self
            .sub(&m)?
            .mul_scalar(S::one() / temperature)
            .exp();
        let s = z.sum_axis(axis, true)?;
        z.div(&s)
    }

    /// x / max(||x||_2, eps) along `axis`; zero rows stay zero.
    pub fn l2_normalize(&self, axis: usize, eps: S) -> Result<Tensor<S>> {
        let norm = self.mul(self)?.sum_axis(axis, true)?.sqrt()?;
        let denom = norm.clamp_min_scalar(eps);
        self.div(&denom)
    }

    /// 2D cross-correlation (NCHW input, OIHW weight) with zero padding.
    pub fn conv2d(&self, weight: &Tensor<S>, stride: usize, pad: usize) -> Result<Tensor<S>> {
        if self.rank() != 4 || weight.rank() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.dims().to_vec(),
                right: weight.dims().to_vec(),
            });
        }
        let [n, c, h, w] = [self.dims()[0], self.dims()[1], self.dims()[2], self.dims()[3]];
        let [o, i, kh, kw] = [
            weight.dims()[0],
            weight.dims()[1],
            weight.dims()[2],
            weight.dims()[3],
        ];
        if c != i || stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: self.dims().to_vec(),
                right: weight.dims().to_vec(),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let rows = n * oh * ow;
        let cols = c * kh * kw;
        let patches = im2col(self.values(), n, c, h, w, kh, kw, stride, pad, oh, ow);
        // out_mat[r, o] = patches[r, :] . weight[o, :]
        let wt = transpose_copy(weight.values(), o, cols);
        let out_mat = mm_nn(&patches, &wt, rows, cols, o);
        let mut out = vec![S::zero(); n * o * oh * ow];
        for r in 0..rows {
            let (nn, rem) = (r / (oh * ow), r % (oh * ow));
            for oc in 0..o {
                out[((nn * o + oc) * oh * ow) + rem] = out_mat[r * o + oc];
            }
        }
        let shape = Shape::new(&[n, o, oh, ow])?;
        let tape = tape_of2(self, weight)?;
        if tape.is_none() {
            return Ok(Tensor::with_node(shape, Arc::new(out), None));
        }
        let need_x = self.is_tracked();
        let need_w = weight.is_tracked();
        let patches = Arc::new(patches);
        let w_vals = weight.values_arc();
        let inputs = vec![self.node().map(|t| t.id()), weight.node().map(|t| t.id())];
        let backward = move |g: &[S]| {
            // Gather NCHW grad into [rows, O].
            let mut gmat = vec![S::zero(); rows * o];
            for r in 0..rows {
                let (nn, rem) = (r / (oh * ow), r % (oh * ow));
                for oc in 0..o {
                    gmat[r * o + oc] = g[((nn * o + oc) * oh * ow) + rem];
                }
            }
            let gw = need_w.then(|| mm_tn(&gmat, &patches, rows, o, cols));
            let gx = need_x.then(|| {
                let gcols = mm_nn(&gmat, &w_vals, rows, o, cols);
                col2im(&gcols, n, c, h, w, kh, kw, stride, pad, oh, ow)
            });
            vec![gx, gw]
        };
        Ok(emit(tape, shape, out, inputs, backward))
    }
}

fn apply<S: Scalar>(op: BinOp, a: S, b: S) -> S {
    match op {
        BinOp::Add => a + b,
        BinOp::Sub => a - b,
        BinOp::Mul => a * b,
        BinOp::Div => a / b,
    }
}

/// a[m,k] . b[k,n], accumulated in axpy order so the inner loop vectorizes
/// and the summation order is fixed.
pub(crate) fn mm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
    out
}

/// a[m,k] . b[n,k]^T -> [m,n].
pub(crate) fn mm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let bt = transpose_copy(b, n, k);
    mm_nn(a, &bt, m, k, n)
}

/// a[k,m]^T . b[k,n] -> [m,n].
pub(crate) fn mm_tn<S: Scalar>(a: &[S], b: &[S], k: usize, m: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let orow = &mut out[i * n..(i + 1) * n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * bv;
            }
        }
    }
    out
}

fn transpose_copy<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let cols = c * kh * kw;
    let mut out = vec![S::zero(); n * oh * ow * cols];
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((nn * oh) + oy) * ow + ox;
                let dst = &mut out[r * cols..(r + 1) * cols];
                let mut k = 0usize;
                for cc in 0..c {
                    let plane = &x[(nn * c + cc) * h * w..(nn * c + cc + 1) * h * w];
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                dst[k] = plane[iy as usize * w + ix as usize];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols_mat: &[S],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let cols = c * kh * kw;
    let mut out = vec![S::zero(); n * c * h * w];
    for nn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((nn * oh) + oy) * ow + ox;
                let src = &cols_mat[r * cols..(r + 1) * cols];
                let mut k = 0usize;
                for cc in 0..c {
                    let base = (nn * c + cc) * h * w;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                let idx = base + iy as usize * w + ix as usize;
                                out[idx] = out[idx] + src[k];
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::Tape;
    use super::*;

    fn t(dims: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(dims, v).unwrap()
    }

    #[test]
    fn add_basic() {
        let r = t(&[2], vec![1.0, 2.0]).add(&t(&[2], vec![3.0, 4.0])).unwrap();
        assert_eq!(r.values(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = t(&[2, 3], (0..6).map(|i| i as f64 - 2.5).collect());
        let r = x.mul(&Tensor::ones(&[2, 3]).unwrap()).unwrap();
        assert_eq!(r.values(), x.values());
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let err = t(&[1], vec![1.0]).div(&t(&[1], vec![0.0])).unwrap_err();
        assert!(matches!(err, TensorError::NumericDomain { op: "div", .. }));
    }

    #[test]
    fn broadcast_trailing_rules() {
        // [2,3] + [3] broadcasts; gradient shapes match the leaves.
        let tape = Tape::<f64>::new();
        let a = tape.var(&[2, 3], vec![1.0; 6]).unwrap();
        let b = tape.var(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = a.add(&b).unwrap();
        assert_eq!(r.dims(), &[2, 3]);
        assert_eq!(r.values(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        let loss = r.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap().dims(), &[2, 3]);
        let gb = b.grad().unwrap();
        assert_eq!(gb.dims(), &[3]);
        assert_eq!(gb.values(), &[2.0, 2.0, 2.0]);
        let err = a.add(&t(&[4], vec![0.0; 4])).unwrap_err();
        assert!(matches!(err, TensorError::NotBroadcastable { .. }));
    }

    #[test]
    fn matmul_identity_and_inner_product() {
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = a.matmul(&Tensor::eye(2).unwrap()).unwrap();
        assert_eq!(r.values(), a.values());
        let p = t(&[1, 2], vec![1.0, 2.0])
            .matmul(&t(&[2, 1], vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(p.values(), &[11.0]);
        assert!(t(&[1, 2], vec![0.0; 2])
            .matmul(&t(&[1, 2], vec![0.0; 2]))
            .is_err());
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_bt() {
        let tape = Tape::<f64>::new();
        let a = tape.var(&[2, 3], vec![0.5; 6]).unwrap();
        let b = t(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let loss = a.matmul(&b).unwrap().sum_all().unwrap();
        tape.backward(&loss).unwrap();
        // d sum(A.B) / dA = ones . B^T; row sums of B.
        assert_eq!(a.grad().unwrap().values(), &[3.0, 7.0, 11.0, 3.0, 7.0, 11.0]);
    }

    #[test]
    fn relu_cases() {
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        let r = x.relu();
        assert_eq!(r.values(), &[0.0, 0.0, 2.0]);
        assert_eq!(r.relu().values(), r.values()); // idempotent

        let tape = Tape::<f64>::new();
        let x = tape.var(&[1], vec![3.0]).unwrap();
        let loss = x.relu().sum_all().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().values(), &[1.0]);
    }

    #[test]
    fn softmax_symmetry_and_hand_value() {
        let r = t(&[1, 2], vec![0.0, 0.0]).softmax_t(1, 4.0).unwrap();
        assert_eq!(r.values(), &[0.5, 0.5]);

        // Very large temperature flattens any finite vector.
        let r = t(&[1, 2], vec![1.0, 2.0]).softmax_t(1, 1e6).unwrap();
        assert!((r.values()[0] - 0.5).abs() < 1e-6);
        assert!((r.values()[1] - 0.5).abs() < 1e-6);

        let r = t(&[1, 2], vec![1.0, 0.0]).softmax_t(1, 1.0).unwrap();
        assert!((r.values()[0] - 0.7311).abs() < 1e-4);
        assert!((r.values()[1] - 0.2689).abs() < 1e-4);

        assert!(t(&[1, 2], vec![0.0; 2]).softmax_t(1, 0.0).is_err());
        assert!(t(&[1, 2], vec![0.0; 2]).softmax_t(1, -1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[3, 4], (0..12).map(|i| (i as f64) * 0.7 - 3.0).collect());
        let p = x.softmax_t(1, 0.5).unwrap();
        for row in 0..3 {
            let s: f64 = p.values()[row * 4..(row + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
            assert!(p.values()[row * 4..(row + 1) * 4].iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn l2_normalize_cases() {
        let r = t(&[1, 2], vec![3.0, 4.0]).l2_normalize(1, 1e-12).unwrap();
        assert!((r.values()[0] - 0.6).abs() < 1e-12);
        assert!((r.values()[1] - 0.8).abs() < 1e-12);

        let u = t(&[1, 2], vec![1.0, 0.0]).l2_normalize(1, 1e-12).unwrap();
        assert!((u.values()[0] - 1.0).abs() < 1e-12);

        let z = t(&[1, 2], vec![0.0, 0.0]).l2_normalize(1, 1e-12).unwrap();
        assert_eq!(z.values(), &[0.0, 0.0]);
    }

    #[test]
    fn reduce_cases() {
        let x = t(&[3], vec![1.0, 2.0, 3.0]);
        assert_eq!(x.sum_all().unwrap().values(), &[6.0]);
        let c = Tensor::<f64>::full(&[2, 2], 7.5).unwrap();
        assert_eq!(c.mean_all().unwrap().values(), &[7.5]);

        let tape = Tape::<f64>::new();
        let x = tape.var(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = x.mean_all().unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().values(), &[0.25; 4]);

        assert!(x.sum_axis(1, true).is_err());
    }

    #[test]
    fn sum_axis_shapes() {
        let x = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s1 = x.sum_axis(1, true).unwrap();
        assert_eq!(s1.dims(), &[2, 1]);
        assert_eq!(s1.values(), &[6.0, 15.0]);
        let s0 = x.sum_axis(0, false).unwrap();
        assert_eq!(s0.dims(), &[3]);
        assert_eq!(s0.values(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn conv2d_window_sums_and_identity() {
        // 1x1x3x3 ones with a 2x2 ones kernel -> 2x2 map of 4.
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let w = Tensor::<f64>::ones(&[1, 1, 2, 2]).unwrap();
        let r = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(r.dims(), &[1, 1, 2, 2]);
        assert_eq!(r.values(), &[4.0; 4]);

        // 1x1x1x1 kernel of value 1 is the identity.
        let x = t(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let r = x.conv2d(&w, 1, 0).unwrap();
        assert_eq!(r.values(), x.values());

        // Channel mismatch.
        let w = Tensor::<f64>::ones(&[1, 2, 1, 1]).unwrap();
        assert!(x.conv2d(&w, 1, 0).is_err());
    }

    #[test]
    fn identical_forwards_are_bitwise_identical() {
        let x = t(&[2, 3], vec![0.3, -1.7, 2.2, 0.0, 9.1, -4.4]);
        let run = |x: &Tensor<f64>| {
            x.mul_scalar(1.37)
                .relu()
                .softmax_t(1, 0.7)
                .unwrap()
                .sum_all()
                .unwrap()
                .item()
                .unwrap()
        };
        assert_eq!(run(&x).to_bits(), run(&x).to_bits());
    }
}
