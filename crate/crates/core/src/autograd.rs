//! Tape-style reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward op in creation order, which is already a
//! topological order, so backward is a single reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KdsmError, Result};
use crate::tensor::{
    col2im, conv_shape, deconv_shape, gemm, im2col, softmax_rows_slice, ConvGeometry, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Relu(Var),
    Transpose(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, geo: ConvGeometry, cols: Vec<f64> },
    Deconv2d { x: Var, w: Var, geo: ConvGeometry },
    Mask { x: Var, mask: Vec<f64> },
    SelectChannels { x: Var, picks: Vec<Option<usize>> },
    Sum(Var),
    Mse { a: Var, b: Var },
    CrossEntropy { p: Var, target: Vec<f64>, floor: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> KdsmError {
    KdsmError::Dimension {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

fn take_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` with optional transposes, where `a` is `m x k` (or
    /// `k x m` when `ta`).
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ar, ac) = av.dims2()?;
        let (br, bc) = bv.dims2()?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, Tensor::new(vec![m, n], out)?, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), t, rg)
    }

    /// `x [m, n] + bias [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, n) = xv.dims2()?;
        if bv.numel() != n {
            return Err(dim_err("add_row_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddRowBias { x, bias }, t, rg))
    }

    /// `x [c, h, w] + bias [c]` broadcast over each channel plane.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (c, h, w) = xv.dims3()?;
        if bv.numel() != c {
            return Err(dim_err("add_channel_bias", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for (plane, b) in data.chunks_exact_mut(h * w).zip(bv.data()) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Op::AddChannelBias { x, bias }, t, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&v| v.max(0.0)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(Op::Relu(a), t, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = av.dims2()?;
        let src = av.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Transpose(a), t, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        if start + len > n || len == 0 {
            return Err(KdsmError::Dimension {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for row in xv.data().chunks_exact(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceCols { x, start }, t, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2()?;
            if pm != m {
                return Err(dim_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg))
    }

    /// Rows `start..start+len` of a 2-D tensor (or leading-axis slabs of any
    /// rank).
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        if start + len > lead || len == 0 {
            return Err(KdsmError::Dimension {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let inner = xv.numel() / lead;
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, xv.data()[start * inner..(start + len) * inner].to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(Op::SliceRows { x, start }, t, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let mut out = vec![0.0; m * n];
        softmax_rows_slice(xv.data(), n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SoftmaxRows(x), t, rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.dims2()?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.numel() != n || bv.numel() != n {
            return Err(dim_err("layer_norm", xv, gv));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let xh = (row[j] - mean) * r;
                xhat[i * n + j] = xh;
                out[i * n + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            t,
            rg,
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let s = conv_shape(xv, wv, geo)?;
        let cols = im2col(xv.data(), s.cin, s.h, s.w, s.kh, s.kw, s.oh, s.ow, geo);
        let mut out = vec![0.0; s.cout * s.oh * s.ow];
        gemm(
            s.cout,
            s.cin * s.kh * s.kw,
            s.oh * s.ow,
            wv.data(),
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![s.cout, s.oh, s.ow], out)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Conv2d { x, w, geo, cols }, t, rg))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let t = crate::tensor::deconv2d(self.value(x), self.value(w), geo)?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::Deconv2d { x, w, geo }, t, rg))
    }

    /// Inverted dropout with a mask drawn from `seed`. A rate of zero records
    /// nothing and returns `x`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = self.value(x);
        let mask: Vec<f64> = (0..xv.numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(Op::Mask { x, mask }, t, rg)
    }

    /// Output channel `i` is input channel `picks[i]`, or zeros for `None`.
    /// Works on any tensor whose leading axis indexes channels.
    pub fn select_channels(&mut self, x: Var, picks: &[Option<usize>]) -> Result<Var> {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        let inner = xv.numel() / lead;
        let mut shape = xv.shape().to_vec();
        shape[0] = picks.len();
        let mut out = vec![0.0; picks.len() * inner];
        for (i, p) in picks.iter().enumerate() {
            if let Some(src) = *p {
                if src >= lead {
                    return Err(KdsmError::Lookup(format!(
                        "channel {src} out of range for {lead} channels"
                    )));
                }
                out[i * inner..(i + 1) * inner]
                    .copy_from_slice(&xv.data()[src * inner..(src + 1) * inner]);
            }
        }
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            Op::SelectChannels {
                x,
                picks: picks.to_vec(),
            },
            t,
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), Tensor::scalar(s), rg)
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("mse", av, bv));
        }
        let n = av.numel() as f64;
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mse { a, b }, Tensor::scalar(s), rg))
    }

    /// `-sum(target * ln(max(p, floor)))` with a constant target.
    pub fn cross_entropy(&mut self, p: Var, target: &Tensor, floor: f64) -> Result<Var> {
        let pv = self.value(p);
        if pv.shape() != target.shape() {
            return Err(dim_err("cross_entropy", pv, target));
        }
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .filter(|(_, &d)| d != 0.0)
            .map(|(&q, &d)| -d * q.max(floor).ln())
            .sum();
        let rg = self.rg(p);
        Ok(self.push(
            Op::CrossEntropy {
                p,
                target: target.data().to_vec(),
                floor,
            },
            Tensor::scalar(s),
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(KdsmError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ar, ac) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let (m, k) = if *ta { (ac, ar) } else { (ar, ac) };
                let n = if *tb { br } else { bc };
                if self.rg(*a) {
                    let ga = take_slot(grads, *a, av.numel());
                    if *ta {
                        // a is k x m: dA = op(B) * G^T
                        gemm(k, n, m, bv.data(), *tb, g, true, ga, true);
                    } else {
                        // dA = G * op(B)^T
                        gemm(m, n, k, g, false, bv.data(), !*tb, ga, true);
                    }
                }
                if self.rg(*b) {
                    let gb = take_slot(grads, *b, bv.numel());
                    if *tb {
                        // b is n x k: dB = G^T * op(A)
                        gemm(n, m, k, g, true, av.data(), *ta, gb, true);
                    } else {
                        // dB = op(A)^T * G
                        gemm(k, m, n, av.data(), !*ta, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.rg(*b) {
                    add_into(&mut grads[b.0], g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = take_slot(grads, *a, av.numel());
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *d += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let gb = take_slot(grads, *b, bv.numel());
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(av.data()) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                let ga = take_slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
            }
            Op::AddRowBias { x, bias } => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.rg(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = take_slot(grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                }
            }
            Op::AddChannelBias { x, bias } => {
                if self.rg(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if self.rg(*bias) {
                    let c = self.value(*bias).numel();
                    let plane = g.len() / c;
                    let gb = take_slot(grads, *bias, c);
                    for (d, chunk) in gb.iter_mut().zip(g.chunks_exact(plane)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let ga = take_slot(grads, *a, av.numel());
                for ((d, gi), x) in ga.iter_mut().zip(g).zip(av.data()) {
                    if *x > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let ga = take_slot(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g),
            Op::SliceCols { x, start } => {
                let (m, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let len = g.len() / m;
                let gx = take_slot(grads, *x, m * n);
                for i in 0..m {
                    let dst = &mut gx[i * n + start..i * n + start + len];
                    dst.iter_mut()
                        .zip(&g[i * len..(i + 1) * len])
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let n = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let gp = take_slot(grads, p, m * w);
                        for i in 0..m {
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * n + off..i * n + off + w])
                                .for_each(|(d, v)| *d += v);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let inner = xv.numel() / xv.shape()[0];
                let gx = take_slot(grads, *x, xv.numel());
                gx[start * inner..start * inner + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let n = node.value.shape()[1];
                let gx = take_slot(grads, *x, y.len());
                for ((yr, gr), dr) in y
                    .chunks_exact(n)
                    .zip(g.chunks_exact(n))
                    .zip(gx.chunks_exact_mut(n))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.shape()[1];
                let m = node.value.shape()[0];
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let gg = take_slot(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.rg(*beta) {
                    let gb = take_slot(grads, *beta, n);
                    for row in g.chunks_exact(n) {
                        gb.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
                if self.rg(*x) {
                    let gx = take_slot(grads, *x, m * n);
                    let nf = n as f64;
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        for j in 0..n {
                            let d = gr[j] * gam[j];
                            gx[i * n + j] += rstd[i] / nf * (nf * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geo, cols } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let s = conv_shape(xv, wv, *geo).expect("validated in forward");
                let kdim = s.cin * s.kh * s.kw;
                let ohw = s.oh * s.ow;
                if self.rg(*w) {
                    let gw = take_slot(grads, *w, wv.numel());
                    gemm(s.cout, ohw, kdim, g, false, cols, true, gw, true);
                }
                if self.rg(*x) {
                    let mut dcols = vec![0.0; kdim * ohw];
                    gemm(kdim, s.cout, ohw, wv.data(), true, g, false, &mut dcols, false);
                    let gx = take_slot(grads, *x, xv.numel());
                    col2im(&dcols, s.cin, s.h, s.w, s.kh, s.kw, s.oh, s.ow, *geo, gx);
                }
            }
            Op::Deconv2d { x, w, geo } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let s = deconv_shape(xv, wv, *geo).expect("validated in forward");
                let kdim = s.cout * s.kh * s.kw;
                let hw = s.h * s.w;
                // unfold the output gradient onto the input grid
                let gcols = im2col(g, s.cout, s.oh, s.ow, s.kh, s.kw, s.h, s.w, *geo);
                if self.rg(*w) {
                    let gw = take_slot(grads, *w, wv.numel());
                    gemm(s.cin, hw, kdim, xv.data(), false, &gcols, true, gw, true);
                }
                if self.rg(*x) {
                    let gx = take_slot(grads, *x, xv.numel());
                    gemm(s.cin, kdim, hw, wv.data(), false, &gcols, false, gx, true);
                }
            }
            Op::Mask { x, mask } => {
                let gx = take_slot(grads, *x, mask.len());
                for ((d, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }
            Op::SelectChannels { x, picks } => {
                let xv = self.value(*x);
                let inner = xv.numel() / xv.shape()[0];
                let gx = take_slot(grads, *x, xv.numel());
                for (i, p) in picks.iter().enumerate() {
                    if let Some(src) = *p {
                        gx[src * inner..(src + 1) * inner]
                            .iter_mut()
                            .zip(&g[i * inner..(i + 1) * inner])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = take_slot(grads, *x, n);
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let scale = 2.0 * g[0] / av.numel() as f64;
                if self.rg(*a) {
                    let ga = take_slot(grads, *a, av.numel());
                    for ((d, x), y) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d += scale * (x - y);
                    }
                }
                if self.rg(*b) {
                    let gb = take_slot(grads, *b, bv.numel());
                    for ((d, x), y) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                        *d -= scale * (x - y);
                    }
                }
            }
            Op::CrossEntropy { p, target, floor } => {
                let pv = self.value(*p);
                let gp = take_slot(grads, *p, pv.numel());
                for ((d, &q), &t) in gp.iter_mut().zip(pv.data()).zip(target) {
                    if t != 0.0 && q > *floor {
                        *d -= g[0] * t / q;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn mse_against_zero_has_closed_form_gradient() {
        let mut g = Graph::new();
        let data = vec![0.3, -1.2, 2.0, 0.7];
        let x = g.param(Tensor::new(vec![4], data.clone()).unwrap());
        let z = g.constant(Tensor::zeros(&[4]));
        let l = g.mse(x, z).unwrap();
        let grads = g.backward(l).unwrap();
        for (gv, xv) in grads.get(x).unwrap().data().iter().zip(&data) {
            assert!((gv - 2.0 * xv / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(KdsmError::Usage(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 2], 2.0));
        let c = g.constant(Tensor::full(&[2, 1], 3.0));
        let y = g.matmul(x, c).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn dropout_is_seeded_and_zero_rate_is_identity() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[8, 8], 1.0));
        assert_eq!(g.dropout(x, 0.0, 1), x);
        let a = g.dropout(x, 0.1, 42);
        let b = g.dropout(x, 0.1, 42);
        assert_eq!(g.value(a), g.value(b));
        let kept = g.value(a).data().iter().filter(|&&v| v > 0.0).count();
        assert!(kept > 40 && kept < 64);
    }
}
