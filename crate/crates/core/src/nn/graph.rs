//! Reverse-mode automatic differentiation on a per-forward tape.
//!
//! A [`Graph`] records one forward pass as a flat list of nodes; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates exact
//! gradients for every registered parameter. The tape is instance-local
//! and single-threaded; independent model instances may run concurrently.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
struct ConvDims {
    n: usize,
    h: usize,
    w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
    c_out: usize,
}

enum Op<S> {
    Input,
    Param,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    MatMul(NodeId, NodeId),
    Conv2d {
        x: NodeId,
        k: NodeId,
        cols: Vec<S>,
        dims: ConvDims,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    Dropout {
        x: NodeId,
        mask: Vec<S>,
    },
    Reshape(NodeId),
    SliceStep {
        x: NodeId,
        step: usize,
    },
    ConcatChannels(NodeId, NodeId),
    CenterCrop {
        x: NodeId,
        off_h: usize,
        off_w: usize,
    },
    Sum(NodeId),
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
    },
}

/// Tape of one forward pass, plus parameter bindings.
pub struct Graph<S: Scalar> {
    values: Vec<Tensor<S>>,
    grads: Vec<Option<Tensor<S>>>,
    ops: Vec<Op<S>>,
    needs: Vec<bool>,
    params: Vec<(String, NodeId)>,
    ran_backward: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
            params: Vec::new(),
            ran_backward: false,
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs);
        NodeId(self.values.len() - 1)
    }

    fn needs1(&self, a: NodeId) -> bool {
        self.needs[a.0]
    }

    fn needs2(&self, a: NodeId, b: NodeId) -> bool {
        self.needs[a.0] || self.needs[b.0]
    }

    /// Value of a node after the forward pass.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.values[id.0]
    }

    /// A leaf node that does not require gradients (inputs, constants).
    pub fn input(&mut self, t: Tensor<S>) -> NodeId {
        self.push(t, Op::Input, false)
    }

    /// A named parameter leaf; its gradient is collected by `param_grads`.
    pub fn param(&mut self, name: &str, t: Tensor<S>) -> NodeId {
        let id = self.push(t, Op::Param, true);
        self.params.push((name.to_string(), id));
        id
    }

    // ---- elementwise and linear ops -------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "add shapes {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o = *o + v;
        }
        let needs = self.needs2(a, b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    /// Broadcast add of a bias vector `[U]` over rows of `[N,U]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return Err(Error::Shape(format!("add_bias shapes {:?} + {:?}", xs, bs)));
        }
        let mut out = self.values[x.0].clone();
        let bias = self.values[b.0].data().to_vec();
        for row in out.data_mut().chunks_mut(bs[0]) {
            for (o, &v) in row.iter_mut().zip(&bias) {
                *o = *o + v;
            }
        }
        let needs = self.needs2(x, b);
        Ok(self.push(out, Op::AddBias(x, b), needs))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Shape(format!(
                "mul shapes {:?} vs {:?}",
                self.values[a.0].shape(),
                self.values[b.0].shape()
            )));
        }
        let mut out = self.values[a.0].clone();
        for (o, &v) in out.data_mut().iter_mut().zip(self.values[b.0].data()) {
            *o = *o * v;
        }
        let needs = self.needs2(a, b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let out = self.values[a.0].map(|v| S::one() - v);
        let needs = self.needs1(a);
        self.push(out, Op::OneMinus(a), needs)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.values[a.0].matmul(&self.values[b.0])?;
        let needs = self.needs2(a, b);
        Ok(self.push(out, Op::MatMul(a, b), needs))
    }

    /// Fully connected layer: `x[N,D] * w[D,U] + b[U]`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    // ---- convolution and pooling ----------------------------------------

    /// Valid cross-correlation with stride 1: `x[N,H,W,Ci] * k[kh,kw,Ci,Co]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        let ks = self.values[k.0].shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(Error::Shape(format!("conv2d shapes {:?} * {:?}", xs, ks)));
        }
        let (n, h, w, c_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, c_out) = (ks[0], ks[1], ks[3]);
        if kh > h || kw > w {
            return Err(Error::Shape(format!(
                "conv2d kernel {:?} larger than input {:?}",
                ks, xs
            )));
        }
        let h_out = h - kh + 1;
        let w_out = w - kw + 1;
        let rows = n * h_out * w_out;
        let kk = kh * kw * c_in;

        // im2col: every output position becomes one row of a [rows, kk] matrix.
        let xd = self.values[x.0].data();
        let mut cols = vec![S::zero(); rows * kk];
        let run = kw * c_in;
        for b in 0..n {
            for i in 0..h_out {
                for j in 0..w_out {
                    let row = ((b * h_out + i) * w_out + j) * kk;
                    for di in 0..kh {
                        let src = ((b * h + i + di) * w + j) * c_in;
                        cols[row + di * run..row + (di + 1) * run]
                            .copy_from_slice(&xd[src..src + run]);
                    }
                }
            }
        }

        let mut out = Tensor::zeros(&[n, h_out, w_out, c_out]);
        unsafe {
            S::gemm(
                rows,
                kk,
                c_out,
                S::one(),
                cols.as_ptr(),
                kk as isize,
                1,
                self.values[k.0].data().as_ptr(),
                c_out as isize,
                1,
                S::zero(),
                out.data_mut().as_mut_ptr(),
                c_out as isize,
                1,
            );
        }
        let needs = self.needs2(x, k);
        let dims = ConvDims {
            n,
            h,
            w,
            c_in,
            kh,
            kw,
            h_out,
            w_out,
            c_out,
        };
        Ok(self.push(out, Op::Conv2d { x, k, cols, dims }, needs))
    }

    /// Max pooling over square windows; trailing rows/cols that do not fill
    /// a window are truncated.
    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("maxpool2d input shape {:?}", xs)));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        if window > h || window > w {
            return Err(Error::Shape(format!(
                "maxpool2d window {} larger than input {}x{}",
                window, h, w
            )));
        }
        let h_out = (h - window) / stride + 1;
        let w_out = (w - window) / stride + 1;
        let xd = self.values[x.0].data();
        let mut out = Tensor::zeros(&[n, h_out, w_out, c]);
        let mut argmax = vec![0usize; n * h_out * w_out * c];
        {
            let od = out.data_mut();
            for b in 0..n {
                for i in 0..h_out {
                    for j in 0..w_out {
                        for ch in 0..c {
                            let mut best = S::neg_infinity();
                            let mut best_idx = 0usize;
                            for di in 0..window {
                                for dj in 0..window {
                                    let idx = ((b * h + i * stride + di) * w + j * stride + dj)
                                        * c
                                        + ch;
                                    if xd[idx] > best {
                                        best = xd[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            let o = ((b * h_out + i) * w_out + j) * c + ch;
                            od[o] = best;
                            argmax[o] = best_idx;
                        }
                    }
                }
            }
        }
        let needs = self.needs1(x);
        Ok(self.push(out, Op::MaxPool { x, argmax }, needs))
    }

    // ---- activations ------------------------------------------------------

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].map(|v| if v > S::zero() { v } else { S::zero() });
        let needs = self.needs1(x);
        self.push(out, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].map(|v| S::one() / (S::one() + (-v).exp()));
        let needs = self.needs1(x);
        self.push(out, Op::Sigmoid(x), needs)
    }

    pub fn tanh_op(&mut self, x: NodeId) -> NodeId {
        let out = self.values[x.0].map(|v| v.tanh());
        let needs = self.needs1(x);
        self.push(out, Op::Tanh(x), needs)
    }

    /// Row-wise softmax of `[N,K]`, computed with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("softmax input shape {:?}", xs)));
        }
        let mut out = self.values[x.0].clone();
        for row in out.data_mut().chunks_mut(xs[1]) {
            let mut m = S::neg_infinity();
            for v in row.iter() {
                if *v > m {
                    m = *v;
                }
            }
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs1(x);
        Ok(self.push(out, Op::Softmax(x), needs))
    }

    /// Inverted dropout. Training mode zeroes activations with probability
    /// `rate` and scales survivors by `1/(1-rate)`; inference returns the
    /// input node unchanged (bitwise identity).
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Argument(format!(
                "dropout rate {} outside [0,1)",
                rate
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::of(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.values[x.0].numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut out = self.values[x.0].clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * m;
        }
        let needs = self.needs1(x);
        Ok(self.push(out, Op::Dropout { x, mask }, needs))
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.values[x.0].reshape(shape)?;
        let needs = self.needs1(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Flatten `[N, ...]` to `[N, D]`.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.is_empty() {
            return Err(Error::Shape("flatten of rank-0 tensor".into()));
        }
        let n = xs[0];
        let d: usize = xs[1..].iter().product();
        self.reshape(x, &[n, d])
    }

    /// Extract time step `t` from a sequence `[N,T,D]` as `[N,D]`.
    pub fn slice_step(&mut self, x: NodeId, step: usize) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 3 || step >= xs[1] {
            return Err(Error::Shape(format!(
                "slice_step {} of sequence {:?}",
                step, xs
            )));
        }
        let (n, t, d) = (xs[0], xs[1], xs[2]);
        let xd = self.values[x.0].data();
        let mut out = Tensor::zeros(&[n, d]);
        {
            let od = out.data_mut();
            for b in 0..n {
                od[b * d..(b + 1) * d]
                    .copy_from_slice(&xd[(b * t + step) * d..(b * t + step) * d + d]);
            }
        }
        let needs = self.needs1(x);
        Ok(self.push(out, Op::SliceStep { x, step }, needs))
    }

    /// Concatenate two `[N,H,W,C]` maps along the channel axis.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.values[a.0].shape().to_vec();
        let sb = self.values[b.0].shape().to_vec();
        if sa.len() != 4 || sb.len() != 4 || sa[..3] != sb[..3] {
            return Err(Error::Shape(format!(
                "concat_channels shapes {:?} vs {:?}",
                sa, sb
            )));
        }
        let (ca, cb) = (sa[3], sb[3]);
        let pixels = sa[0] * sa[1] * sa[2];
        let mut out = Tensor::zeros(&[sa[0], sa[1], sa[2], ca + cb]);
        {
            let od = out.data_mut();
            let ad = self.values[a.0].data();
            let bd = self.values[b.0].data();
            for p in 0..pixels {
                od[p * (ca + cb)..p * (ca + cb) + ca].copy_from_slice(&ad[p * ca..(p + 1) * ca]);
                od[p * (ca + cb) + ca..(p + 1) * (ca + cb)]
                    .copy_from_slice(&bd[p * cb..(p + 1) * cb]);
            }
        }
        let needs = self.needs2(a, b);
        Ok(self.push(out, Op::ConcatChannels(a, b), needs))
    }

    /// Crop `[N,H,W,C]` to a centered `[N,h2,w2,C]` window.
    pub fn center_crop(&mut self, x: NodeId, h2: usize, w2: usize) -> Result<NodeId> {
        let xs = self.values[x.0].shape().to_vec();
        if xs.len() != 4 || h2 > xs[1] || w2 > xs[2] {
            return Err(Error::Shape(format!(
                "center_crop {}x{} of {:?}",
                h2, w2, xs
            )));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let off_h = (h - h2) / 2;
        let off_w = (w - w2) / 2;
        let xd = self.values[x.0].data();
        let mut out = Tensor::zeros(&[n, h2, w2, c]);
        {
            let od = out.data_mut();
            for b in 0..n {
                for i in 0..h2 {
                    let src = ((b * h + i + off_h) * w + off_w) * c;
                    let dst = (b * h2 + i) * w2 * c;
                    od[dst..dst + w2 * c].copy_from_slice(&xd[src..src + w2 * c]);
                }
            }
        }
        let needs = self.needs1(x);
        Ok(self.push(out, Op::CenterCrop { x, off_h, off_w }, needs))
    }

    // ---- reductions and loss ----------------------------------------------

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.values[x.0]
            .data()
            .iter()
            .map(|v| v.to_f64().unwrap())
            .sum();
        let needs = self.needs1(x);
        self.push(Tensor::scalar(S::of(total)), Op::Sum(x), needs)
    }

    /// Mean negative log likelihood of the labelled class, with the
    /// probability clamped at 1e-12. Accumulates in f64.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ps = self.values[probs.0].shape().to_vec();
        if ps.len() != 2 || ps[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy probs {:?} vs {} labels",
                ps,
                labels.len()
            )));
        }
        let k = ps[1];
        for &l in labels {
            if l >= k {
                return Err(Error::Argument(format!(
                    "label {} out of range for {} classes",
                    l, k
                )));
            }
        }
        let pd = self.values[probs.0].data();
        let mut total = 0.0f64;
        for (i, &l) in labels.iter().enumerate() {
            let p = pd[i * k + l].to_f64().unwrap().max(1e-12);
            total -= p.ln();
        }
        let loss = total / labels.len() as f64;
        let needs = self.needs1(probs);
        Ok(self.push(
            Tensor::scalar(S::of(loss)),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar node, accumulating parameter gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if loss.0 >= self.values.len() {
            return Err(Error::State(format!("backward on unknown node {}", loss.0)));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::State(format!(
                "backward target must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));
        self.ran_backward = true;

        // Disjoint field borrows so gradient buffers can be grown while
        // values and ops are read.
        let values = &self.values;
        let grads = &mut self.grads;
        let ops = &self.ops;
        let needs = &self.needs;

        fn buf<'a, S: Scalar>(
            grads: &'a mut [Option<Tensor<S>>],
            values: &[Tensor<S>],
            id: NodeId,
        ) -> &'a mut Tensor<S> {
            if grads[id.0].is_none() {
                grads[id.0] = Some(Tensor::zeros(values[id.0].shape()));
            }
            grads[id.0].as_mut().unwrap()
        }

        for i in (0..values.len()).rev() {
            if matches!(ops[i], Op::Input | Op::Param) {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &ops[i] {
                Op::Input | Op::Param => unreachable!(),
                Op::Add(a, b) => {
                    if needs[a.0] {
                        buf(grads, values, *a).add_scaled(&g, S::one());
                    }
                    if needs[b.0] {
                        buf(grads, values, *b).add_scaled(&g, S::one());
                    }
                }
                Op::AddBias(x, bias) => {
                    let u = values[bias.0].numel();
                    if needs[x.0] {
                        buf(grads, values, *x).add_scaled(&g, S::one());
                    }
                    if needs[bias.0] {
                        let gb = buf(grads, values, *bias);
                        for row in g.data().chunks(u) {
                            for (acc, &v) in gb.data_mut().iter_mut().zip(row) {
                                *acc = *acc + v;
                            }
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a.0] {
                        let ga = buf(grads, values, *a);
                        for ((acc, &gv), &bv) in ga
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(values[b.0].data())
                        {
                            *acc = *acc + gv * bv;
                        }
                    }
                    if needs[b.0] {
                        let gb = buf(grads, values, *b);
                        for ((acc, &gv), &av) in gb
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(values[a.0].data())
                        {
                            *acc = *acc + gv * av;
                        }
                    }
                }
                Op::OneMinus(a) => {
                    if needs[a.0] {
                        buf(grads, values, *a).add_scaled(&g, -S::one());
                    }
                }
                Op::MatMul(a, b) => {
                    let m = values[a.0].shape()[0];
                    let kdim = values[a.0].shape()[1];
                    let n = values[b.0].shape()[1];
                    if needs[a.0] {
                        // dA = g . B^T
                        let bp = values[b.0].data().as_ptr();
                        let ga = buf(grads, values, *a);
                        unsafe {
                            S::gemm(
                                m,
                                n,
                                kdim,
                                S::one(),
                                g.data().as_ptr(),
                                n as isize,
                                1,
                                bp,
                                1,
                                n as isize,
                                S::one(),
                                ga.data_mut().as_mut_ptr(),
                                kdim as isize,
                                1,
                            );
                        }
                    }
                    if needs[b.0] {
                        // dB = A^T . g
                        let ap = values[a.0].data().as_ptr();
                        let gb = buf(grads, values, *b);
                        unsafe {
                            S::gemm(
                                kdim,
                                m,
                                n,
                                S::one(),
                                ap,
                                1,
                                kdim as isize,
                                g.data().as_ptr(),
                                n as isize,
                                1,
                                S::one(),
                                gb.data_mut().as_mut_ptr(),
                                n as isize,
                                1,
                            );
                        }
                    }
                }
                Op::Conv2d { x, k, cols, dims } => {
                    let rows = dims.n * dims.h_out * dims.w_out;
                    let kk = dims.kh * dims.kw * dims.c_in;
                    let c_out = dims.c_out;
                    if needs[k.0] {
                        // dK = cols^T . g
                        let gk = buf(grads, values, *k);
                        unsafe {
                            S::gemm(
                                kk,
                                rows,
                                c_out,
                                S::one(),
                                cols.as_ptr(),
                                1,
                                kk as isize,
                                g.data().as_ptr(),
                                c_out as isize,
                                1,
                                S::one(),
                                gk.data_mut().as_mut_ptr(),
                                c_out as isize,
                                1,
                            );
                        }
                    }
                    if needs[x.0] {
                        // dcols = g . K^T, then scatter back (col2im).
                        let mut dcols = vec![S::zero(); rows * kk];
                        unsafe {
                            S::gemm(
                                rows,
                                c_out,
                                kk,
                                S::one(),
                                g.data().as_ptr(),
                                c_out as isize,
                                1,
                                values[k.0].data().as_ptr(),
                                1,
                                c_out as isize,
                                S::zero(),
                                dcols.as_mut_ptr(),
                                kk as isize,
                                1,
                            );
                        }
                        let run = dims.kw * dims.c_in;
                        let (h, w, c_in) = (dims.h, dims.w, dims.c_in);
                        let (h_out, w_out, kh) = (dims.h_out, dims.w_out, dims.kh);
                        let gxd = buf(grads, values, *x).data_mut();
                        for b in 0..dims.n {
                            for i in 0..h_out {
                                for j in 0..w_out {
                                    let row = ((b * h_out + i) * w_out + j) * kk;
                                    for di in 0..kh {
                                        let dst = ((b * h + i + di) * w + j) * c_in;
                                        let src = row + di * run;
                                        for t in 0..run {
                                            gxd[dst + t] = gxd[dst + t] + dcols[src + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax, .. } => {
                    if needs[x.0] {
                        let gxd = buf(grads, values, *x).data_mut();
                        for (o, &src) in argmax.iter().enumerate() {
                            gxd[src] = gxd[src] + g.data()[o];
                        }
                    }
                }
                Op::Relu(x) => {
                    if needs[x.0] {
                        let y = &values[i];
                        let gx = buf(grads, values, *x);
                        for ((acc, &gv), &yv) in
                            gx.data_mut().iter_mut().zip(g.data()).zip(y.data())
                        {
                            if yv > S::zero() {
                                *acc = *acc + gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    if needs[x.0] {
                        let y = &values[i];
                        let gx = buf(grads, values, *x);
                        for ((acc, &gv), &yv) in
                            gx.data_mut().iter_mut().zip(g.data()).zip(y.data())
                        {
                            *acc = *acc + gv * yv * (S::one() - yv);
                        }
                    }
                }
                Op::Tanh(x) => {
                    if needs[x.0] {
                        let y = &values[i];
                        let gx = buf(grads, values, *x);
                        for ((acc, &gv), &yv) in
                            gx.data_mut().iter_mut().zip(g.data()).zip(y.data())
                        {
                            *acc = *acc + gv * (S::one() - yv * yv);
                        }
                    }
                }
                Op::Softmax(x) => {
                    if needs[x.0] {
                        let y = &values[i];
                        let k = y.shape()[1];
                        let gxd = buf(grads, values, *x).data_mut();
                        for r in 0..y.shape()[0] {
                            let yr = &y.data()[r * k..(r + 1) * k];
                            let gr = &g.data()[r * k..(r + 1) * k];
                            let mut dot = S::zero();
                            for (yv, gv) in yr.iter().zip(gr) {
                                dot = dot + *yv * *gv;
                            }
                            for j in 0..k {
                                gxd[r * k + j] = gxd[r * k + j] + yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if needs[x.0] {
                        let gx = buf(grads, values, *x);
                        for ((acc, &gv), &m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask)
                        {
                            *acc = *acc + gv * m;
                        }
                    }
                }
                Op::Reshape(x) => {
                    if needs[x.0] {
                        let gx = buf(grads, values, *x);
                        for (acc, &gv) in gx.data_mut().iter_mut().zip(g.data()) {
                            *acc = *acc + gv;
                        }
                    }
                }
                Op::SliceStep { x, step } => {
                    if needs[x.0] {
                        let (n, t, d) = {
                            let s = values[x.0].shape();
                            (s[0], s[1], s[2])
                        };
                        let gxd = buf(grads, values, *x).data_mut();
                        for b in 0..n {
                            let dst = (b * t + step) * d;
                            for (j, &gv) in g.data()[b * d..(b + 1) * d].iter().enumerate() {
                                gxd[dst + j] = gxd[dst + j] + gv;
                            }
                        }
                    }
                }
                Op::ConcatChannels(a, b) => {
                    let ca = values[a.0].shape()[3];
                    let cb = values[b.0].shape()[3];
                    let pixels = values[a.0].numel() / ca;
                    if needs[a.0] {
                        let gad = buf(grads, values, *a).data_mut();
                        for p in 0..pixels {
                            for t in 0..ca {
                                gad[p * ca + t] = gad[p * ca + t] + g.data()[p * (ca + cb) + t];
                            }
                        }
                    }
                    if needs[b.0] {
                        let gbd = buf(grads, values, *b).data_mut();
                        for p in 0..pixels {
                            for t in 0..cb {
                                gbd[p * cb + t] =
                                    gbd[p * cb + t] + g.data()[p * (ca + cb) + ca + t];
                            }
                        }
                    }
                }
                Op::CenterCrop { x, off_h, off_w } => {
                    if needs[x.0] {
                        let (h, w, c) = {
                            let s = values[x.0].shape();
                            (s[1], s[2], s[3])
                        };
                        let (n, h2, w2) = {
                            let s = g.shape();
                            (s[0], s[1], s[2])
                        };
                        let gxd = buf(grads, values, *x).data_mut();
                        for b in 0..n {
                            for i in 0..h2 {
                                let dst = ((b * h + i + off_h) * w + off_w) * c;
                                let src = (b * h2 + i) * w2 * c;
                                for t in 0..w2 * c {
                                    gxd[dst + t] = gxd[dst + t] + g.data()[src + t];
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if needs[x.0] {
                        let gv = g.data()[0];
                        let gx = buf(grads, values, *x);
                        for acc in gx.data_mut().iter_mut() {
                            *acc = *acc + gv;
                        }
                    }
                }
                Op::CrossEntropy { probs, labels } => {
                    if needs[probs.0] {
                        let k = values[probs.0].shape()[1];
                        let inv_n = S::of(1.0 / labels.len() as f64);
                        let gv = g.data()[0];
                        let pd = values[probs.0].data();
                        let mut updates = Vec::with_capacity(labels.len());
                        for (r, &l) in labels.iter().enumerate() {
                            let p = pd[r * k + l];
                            // Clamp region has zero derivative.
                            if p.to_f64().unwrap() >= 1e-12 {
                                updates.push((r * k + l, gv * inv_n / p));
                            }
                        }
                        let gpd = buf(grads, values, *probs).data_mut();
                        for (idx, delta) in updates {
                            gpd[idx] = gpd[idx] - delta;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradients of all registered parameters, keyed by name. Parameters
    /// untouched by the loss get zero gradients.
    pub fn param_grads(&self) -> Result<std::collections::BTreeMap<String, Tensor<S>>> {
        if !self.ran_backward {
            return Err(Error::State("param_grads called before backward".into()));
        }
        let mut out = std::collections::BTreeMap::new();
        for (name, id) in &self.params {
            let g = self.grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.values[id.0].shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}
