//! Minimal reverse-mode tape for the generator, discriminator and losses.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over node
//! indices is a valid topological order. Leaves are either trainable
//! parameters or constants; constants (the frozen base weights among them)
//! never receive gradients.

use rayon::prelude::*;

use crate::error::{LfsError, Result};
use crate::left::{ActivationKind, ConvShape, LeftConvModulator, LeftFcModulator};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf { trainable: bool },
    /// `a (m x k) · b (k x n)`, or `a · bᵀ` with `b` stored `n x k`.
    MatMul { a: Var, b: Var, trans_b: bool },
    AddRowBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var },
    ChannelScale { x: Var, s: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulConst { a: Var, c: Vec<T> },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Reciprocal { a: Var },
    Act { x: Var, kind: ActivationKind },
    Softplus { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    MeanPerSample { x: Var },
    Conv2d { x: Var, w: Var },
    Upsample2 { x: Var },
    AvgPool2 { x: Var },
    Reshape { x: Var },
    PairMad { x: Var, pairs: Vec<(usize, usize)> },
    ModulateConv { w: Var, factors: Vec<Var>, shape: ConvShape, rank: usize, act: ActivationKind },
    ModulateFcWeight { w: Var, factors: [Var; 4], rank: usize },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf { trainable: true }, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(t.into_data(), shape, Op::Leaf { trainable: false }, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    /// Every node's value in evaluation order.
    pub fn values(&self) -> impl Iterator<Item = &[T]> {
        self.nodes.iter().map(|n| &n.value[..])
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node value matches shape")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf { trainable: true })
    }

    fn same_shape(&self, ctx: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LfsError::shape(ctx, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, ctx: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(LfsError::shape(ctx, "2-d", s)),
        }
    }

    fn dims4(&self, ctx: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [a, b, c, d] => Ok([a, b, c, d]),
            ref s => Err(LfsError::shape(ctx, "4-d", s)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims2("matmul lhs", a)?;
        let (br, bc) = self.dims2("matmul rhs", b)?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(LfsError::shape("matmul", k, kb));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, trans_b }, rg))
    }

    /// `x (N x D) + b (D)` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.dims2("add_row_bias", x)?;
        if self.value(b).len() != d {
            return Err(LfsError::shape("add_row_bias", d, self.value(b).len()));
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v += *bv;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, shape, Op::AddRowBias { x, b }, rg))
    }

    /// `x (N x C x H x W) + b (C)`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [_, c, h, w] = self.dims4("add_channel_bias", x)?;
        if self.value(b).len() != c {
            return Err(LfsError::shape("add_channel_bias", c, self.value(b).len()));
        }
        let hw = h * w;
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for (i, plane) in out.chunks_exact_mut(hw).enumerate() {
            let bv = bias[i % c];
            plane.iter_mut().for_each(|v| *v += bv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(out, shape, Op::AddChannelBias { x, b }, rg))
    }

    /// `x (N x C x H x W) * s (N x C)` per channel.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("channel_scale", x)?;
        if self.shape(s) != [n, c] {
            return Err(LfsError::shape("channel_scale", [n, c], self.shape(s)));
        }
        let hw = h * w;
        let scale = self.value(s);
        let mut out = self.value(x).to_vec();
        for (i, plane) in out.chunks_exact_mut(hw).enumerate() {
            let sv = scale[i];
            plane.iter_mut().for_each(|v| *v *= sv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, shape, Op::ChannelScale { x, s }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Mul { a, b }, rg))
    }

    /// Elementwise product with a constant buffer of the same length.
    pub fn mul_const(&mut self, a: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(LfsError::shape("mul_const", self.value(a).len(), c.len()));
        }
        let out = self.value(a).iter().zip(&c).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(out, shape, Op::MulConst { a, c }, rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Scale { a, s }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|x| *x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::AddScalar { a }, rg)
    }

    pub fn reciprocal(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| T::one() / *x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(out, shape, Op::Reciprocal { a }, rg)
    }

    pub fn act(&mut self, x: Var, kind: ActivationKind) -> Var {
        let out = self.value(x).iter().map(|v| kind.apply(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Act { x, kind }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        self.act(x, ActivationKind::LeakyRelu)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| softplus(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Softplus { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let len = self.value(x).len();
        if len == 0 {
            return Err(LfsError::Empty("mean of empty tensor"));
        }
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![s / T::of(len as f64)], vec![1], Op::Mean { x }, rg))
    }

    /// Mean over all but the leading axis: `N x ... -> N`.
    pub fn mean_per_sample(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).first().ok_or(LfsError::Empty("mean_per_sample"))?;
        let len = self.value(x).len();
        if n == 0 || len == 0 {
            return Err(LfsError::Empty("mean_per_sample"));
        }
        let d = len / n;
        let inv = T::one() / T::of(d as f64);
        let out = self.value(x).chunks_exact(d).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(out, vec![n], Op::MeanPerSample { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let len: usize = shape.iter().product();
        if len != self.value(x).len() {
            return Err(LfsError::shape("reshape", len, self.value(x).len()));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Reshape { x }, rg))
    }

    /// Same-padded stride-1 convolution, `x: N x C x H x W`, `w: O x C x k x k`, odd `k`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let [n, c, h, wd] = self.dims4("conv2d input", x)?;
        let [o, wc, k, k2] = self.dims4("conv2d weight", w)?;
        if wc != c || k != k2 || k % 2 == 0 {
            return Err(LfsError::shape("conv2d", [c, k, k], [wc, k, k2]));
        }
        let geom = ConvGeom { c, h, w: wd, k, o };
        let out = conv_forward(&geom, n, self.value(x), self.value(w));
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(out, vec![n, o, h, wd], Op::Conv2d { x, w }, rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("upsample2", x)?;
        let src = self.value(x);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = plane[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![n, c, oh, ow], Op::Upsample2 { x }, rg))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("avg_pool2", x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LfsError::shape("avg_pool2", "even spatial dims", [h, w]));
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of(0.25);
        let src = self.value(x);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (plane, dst) in src.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]) * quarter;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![n, c, oh, ow], Op::AvgPool2 { x }, rg))
    }

    /// Mean absolute difference between sample rows: output `p` is
    /// `mean_d |x[i, d] - x[j, d]|` for `pairs[p] = (i, j)`.
    pub fn pair_mad(&mut self, x: Var, pairs: Vec<(usize, usize)>) -> Result<Var> {
        let n = *self.shape(x).first().ok_or(LfsError::Empty("pair_mad"))?;
        let len = self.value(x).len();
        if n == 0 || len == 0 {
            return Err(LfsError::Empty("pair_mad"));
        }
        let d = len / n;
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(LfsError::shape("pair_mad index", n, (i, j)));
        }
        let vals = self.value(x);
        let inv = T::one() / T::of(d as f64);
        let out = pairs
            .iter()
            .map(|&(i, j)| {
                let a = &vals[i * d..(i + 1) * d];
                let b = &vals[j * d..(j + 1) * d];
                a.iter().zip(b).map(|(p, q)| (*p - *q).abs()).sum::<T>() * inv
            })
            .collect::<Vec<_>>();
        let np = out.len();
        let rg = self.rg(x);
        Ok(self.push(out, vec![np], Op::PairMad { x, pairs }, rg))
    }

    /// Modulated convolution weight `w * gamma + beta` from factor leaves in
    /// checkpoint order.
    pub fn modulate_conv(
        &mut self,
        w: Var,
        factors: Vec<Var>,
        shape: ConvShape,
        rank: usize,
        act: ActivationKind,
    ) -> Result<Var> {
        let m = self.conv_modulator(&factors, shape, rank, act)?;
        let base = self.tensor(w);
        let out = m.modulate(&base)?;
        let rg = self.rg(w) || factors.iter().any(|f| self.rg(*f));
        Ok(self.push(out.into_data(), shape.dims().to_vec(), Op::ModulateConv { w, factors, shape, rank, act }, rg))
    }

    /// Modulated fully-connected weight from `[m_out, m_in, a_out, a_in]`.
    pub fn modulate_fc_weight(&mut self, w: Var, factors: [Var; 4], rank: usize) -> Result<Var> {
        let (d_out, d_in) = self.dims2("modulate_fc_weight", w)?;
        let m = self.fc_modulator(&factors, d_out, rank)?;
        let base = Matrix::new(d_out, d_in, self.value(w).to_vec())?;
        let out = m.modulate_weight(&base)?;
        let rg = self.rg(w) || factors.iter().any(|f| self.rg(*f));
        Ok(self.push(out.into_data(), vec![d_out, d_in], Op::ModulateFcWeight { w, factors, rank }, rg))
    }

    fn matrix(&self, v: Var) -> Result<Matrix<T>> {
        let (r, c) = self.dims2("factor", v)?;
        Matrix::new(r, c, self.value(v).to_vec())
    }

    fn conv_modulator(
        &self,
        factors: &[Var],
        shape: ConvShape,
        rank: usize,
        act: ActivationKind,
    ) -> Result<LeftConvModulator<T>> {
        let m: Vec<Matrix<T>> = factors.iter().map(|f| self.matrix(*f)).collect::<Result<_>>()?;
        let mut it = m.into_iter();
        let mut next = || it.next().ok_or(LfsError::Empty("conv modulator factors"));
        let (m1_out, m1_inst, m2_in) = (next()?, next()?, next()?);
        let a1 = match factors.len() {
            7 => Some((next()?, next()?)),
            5 => None,
            other => return Err(LfsError::shape("conv modulator factor count", "5 or 7", other)),
        };
        let (a2_in, a2_inst) = (next()?, next()?);
        LeftConvModulator::from_factors(shape, rank, act, m1_out, m1_inst, m2_in, a1, a2_in, a2_inst)
    }

    fn fc_modulator(&self, factors: &[Var; 4], d_out: usize, rank: usize) -> Result<LeftFcModulator<T>> {
        LeftFcModulator::from_factors(
            rank,
            self.matrix(factors[0])?,
            self.matrix(factors[1])?,
            self.matrix(factors[2])?,
            self.matrix(factors[3])?,
            vec![T::one(); d_out],
            vec![T::zero(); d_out],
        )
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for exactly the
    /// requested leaves, which must be trainable.
    pub fn backward(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Vec<T>>> {
        if let Some(v) = wrt.iter().find(|v| !self.is_trainable(**v)) {
            return Err(LfsError::Contract(format!(
                "gradient requested for node {} which is not a trainable parameter",
                v.0
            )));
        }
        if self.value(loss).len() != 1 {
            return Err(LfsError::shape("backward loss", 1, self.value(loss).len()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf { .. }) {
                grads[idx] = Some(g);
            } else {
                self.propagate(idx, &g, &mut grads)?;
            }
        }
        Ok(wrt
            .iter()
            .map(|v| {
                grads
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| vec![T::zero(); self.value(*v).len()])
            })
            .collect())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.dims2("matmul", *a)?;
                let n = node.shape[1];
                let bv = self.value(*b);
                let av = self.value(*a);
                self.accumulate(grads, *a, |ga| {
                    // dA = G · Bᵀ (or G · B when B is stored transposed)
                    gemm(m, n, k, g, false, bv, !*trans_b, ga, true);
                });
                self.accumulate(grads, *b, |gb| {
                    if *trans_b {
                        // B is n x k: dB = Gᵀ · A
                        gemm(n, m, k, g, true, av, false, gb, true);
                    } else {
                        gemm(k, m, n, av, true, g, false, gb, true);
                    }
                });
            }
            Op::AddRowBias { x, b } => {
                let d = self.value(*b).len();
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *b, |gb| {
                    for row in g.chunks_exact(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::AddChannelBias { x, b } => {
                let c = self.value(*b).len();
                let hw = node.shape[2] * node.shape[3];
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *b, |gb| {
                    for (i, plane) in g.chunks_exact(hw).enumerate() {
                        gb[i % c] += plane.iter().copied().sum::<T>();
                    }
                });
            }
            Op::ChannelScale { x, s } => {
                let hw = node.shape[2] * node.shape[3];
                let sv = self.value(*s);
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for (i, (gp, op)) in gx.chunks_exact_mut(hw).zip(g.chunks_exact(hw)).enumerate() {
                        for (a, b) in gp.iter_mut().zip(op) {
                            *a += *b * sv[i];
                        }
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    for (i, (xp, op)) in xv.chunks_exact(hw).zip(g.chunks_exact(hw)).enumerate() {
                        gs[i] += xp.iter().zip(op).map(|(a, b)| *a * *b).sum::<T>();
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |ga| {
                    for ((d, gv), o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += *gv * *o;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((d, gv), o) in gb.iter_mut().zip(g).zip(av) {
                        *d += *gv * *o;
                    }
                });
            }
            Op::MulConst { a, c } => {
                self.accumulate(grads, *a, |ga| {
                    for ((d, gv), cv) in ga.iter_mut().zip(g).zip(c) {
                        *d += *gv * *cv;
                    }
                });
            }
            Op::Scale { a, s } => {
                self.accumulate(grads, *a, |ga| {
                    for (d, gv) in ga.iter_mut().zip(g) {
                        *d += *gv * *s;
                    }
                });
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Reciprocal { a } => {
                let out = &node.value;
                self.accumulate(grads, *a, |ga| {
                    for ((d, gv), y) in ga.iter_mut().zip(g).zip(out) {
                        *d -= *gv * *y * *y;
                    }
                });
            }
            Op::Act { x, kind } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += *gv * kind.derivative(*v);
                    }
                });
            }
            Op::Softplus { x } => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((d, gv), v) in gx.iter_mut().zip(g).zip(xv) {
                        *d += *gv * sigmoid(*v);
                    }
                });
            }
            Op::Sum { x } => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { x } => {
                let len = self.value(*x).len();
                let v = g[0] / T::of(len as f64);
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += v));
            }
            Op::MeanPerSample { x } => {
                let n = node.shape[0];
                let d = self.value(*x).len() / n;
                let inv = T::one() / T::of(d as f64);
                self.accumulate(grads, *x, |gx| {
                    for (chunk, gv) in gx.chunks_exact_mut(d).zip(g) {
                        chunk.iter_mut().for_each(|v| *v += *gv * inv);
                    }
                });
            }
            Op::Reshape { x } => self.accumulate(grads, *x, |gx| add_into(gx, g)),
            Op::Conv2d { x, w } => {
                let [n, c, h, wd] = self.dims4("conv2d", *x)?;
                let [o, _, k, _] = self.dims4("conv2d", *w)?;
                let geom = ConvGeom { c, h, w: wd, k, o };
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.rg(*w) {
                    let dw = conv_backward_weight(&geom, n, xv, g);
                    self.accumulate(grads, *w, |gw| add_into(gw, &dw));
                }
                if self.rg(*x) {
                    self.accumulate(grads, *x, |gx| conv_backward_input(&geom, n, wv, g, gx));
                }
            }
            Op::Upsample2 { x } => {
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let (h, w) = (oh / 2, ow / 2);
                self.accumulate(grads, *x, |gx| {
                    for (dst, src) in gx.chunks_exact_mut(h * w).zip(g.chunks_exact(oh * ow)) {
                        for y in 0..oh {
                            for xx in 0..ow {
                                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::AvgPool2 { x } => {
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let w = ow * 2;
                let quarter = T::of(0.25);
                self.accumulate(grads, *x, |gx| {
                    for (dst, src) in gx.chunks_exact_mut(4 * oh * ow).zip(g.chunks_exact(oh * ow)) {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let v = src[y * ow + xx] * quarter;
                                let i = 2 * y * w + 2 * xx;
                                dst[i] += v;
                                dst[i + 1] += v;
                                dst[i + w] += v;
                                dst[i + w + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::PairMad { x, pairs } => {
                let n = self.shape(*x)[0];
                let xv = self.value(*x);
                let d = xv.len() / n;
                let inv = T::one() / T::of(d as f64);
                self.accumulate(grads, *x, |gx| {
                    for (&(i, j), gp) in pairs.iter().zip(g) {
                        let scale = *gp * inv;
                        for t in 0..d {
                            let diff = xv[i * d + t] - xv[j * d + t];
                            let s = if diff > T::zero() {
                                scale
                            } else if diff < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            };
                            gx[i * d + t] += s;
                            gx[j * d + t] -= s;
                        }
                    }
                });
            }
            Op::ModulateConv { w, factors, shape, rank, act } => {
                let m = self.conv_modulator(factors, *shape, *rank, *act)?;
                let base = self.tensor(*w);
                if factors.iter().any(|f| self.rg(*f)) {
                    let grad = m.backward(&base, g)?;
                    for (f, gm) in factors.iter().zip(grad.factors()) {
                        self.accumulate(grads, *f, |gf| add_into(gf, gm.data()));
                    }
                }
                if self.rg(*w) {
                    let gamma = m.gamma()?;
                    self.accumulate(grads, *w, |gw| {
                        for ((d, gv), gm) in gw.iter_mut().zip(g).zip(gamma.data()) {
                            *d += *gv * *gm;
                        }
                    });
                }
            }
            Op::ModulateFcWeight { w, factors, rank } => {
                let (d_out, d_in) = self.dims2("modulate_fc_weight", *w)?;
                let m = self.fc_modulator(factors, d_out, *rank)?;
                let base = Matrix::new(d_out, d_in, self.value(*w).to_vec())?;
                if factors.iter().any(|f| self.rg(*f)) {
                    let grad = m.weight_backward(&base, g)?;
                    for (f, gm) in factors.iter().zip([&grad.m_out, &grad.m_in, &grad.a_out, &grad.a_in]) {
                        self.accumulate(grads, *f, |gf| add_into(gf, gm.data()));
                    }
                }
                if self.rg(*w) {
                    let gamma = m.gamma_w()?;
                    self.accumulate(grads, *w, |gw| {
                        for ((d, gv), gm) in gw.iter_mut().zip(g).zip(gamma.data()) {
                            *d += *gv * *gm;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    o: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds one sample `C x H x W` into `(C*k*k) x (H*W)` with zero padding.
fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &x[c * hw..(c + 1) * hw];
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (c * g.k + u) * g.k + v;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = u as isize - pad;
                let dx = v as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    let line = &mut dst[(y * w) as usize..((y + 1) * w) as usize];
                    if sy < 0 || sy >= h {
                        line.iter_mut().for_each(|e| *e = T::zero());
                        continue;
                    }
                    let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                    for (xx, e) in line.iter_mut().enumerate() {
                        let sx = xx as isize + dx;
                        *e = if sx < 0 || sx >= w { T::zero() } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let pad = (g.k / 2) as isize;
    let (h, w) = (g.h as isize, g.w as isize);
    let hw = g.hw();
    for c in 0..g.c {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for u in 0..g.k {
            for v in 0..g.k {
                let row = (c * g.k + u) * g.k + v;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = u as isize - pad;
                let dxo = v as isize - pad;
                for y in 0..h {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx + dxo;
                        if sx >= 0 && sx < w {
                            plane[(sy * w + sx) as usize] += src[(y * w + xx) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], w: &[T]) -> Vec<T> {
    let (hw, rows, in_len) = (g.hw(), g.rows(), g.c * g.hw());
    let mut out = vec![T::zero(); n * g.o * hw];
    out.par_chunks_mut(g.o * hw).enumerate().for_each(|(i, dst)| {
        let sample = &x[i * in_len..(i + 1) * in_len];
        if g.k == 1 {
            gemm(g.o, rows, hw, w, false, sample, false, dst, false);
        } else {
            let mut cols = vec![T::zero(); rows * hw];
            im2col(g, sample, &mut cols);
            gemm(g.o, rows, hw, w, false, &cols, false, dst, false);
        }
    });
    out
}

fn conv_backward_weight<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], grad_out: &[T]) -> Vec<T> {
    let (hw, rows, in_len) = (g.hw(), g.rows(), g.c * g.hw());
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let sample = &x[i * in_len..(i + 1) * in_len];
            let go = &grad_out[i * g.o * hw..(i + 1) * g.o * hw];
            let mut dw = vec![T::zero(); g.o * rows];
            if g.k == 1 {
                gemm(g.o, hw, rows, go, false, sample, true, &mut dw, false);
            } else {
                let mut cols = vec![T::zero(); rows * hw];
                im2col(g, sample, &mut cols);
                gemm(g.o, hw, rows, go, false, &cols, true, &mut dw, false);
            }
            dw
        })
        .collect();
    // Fixed-order reduction keeps results bit-identical across thread counts.
    let mut total = vec![T::zero(); g.o * rows];
    for p in &partials {
        add_into(&mut total, p);
    }
    total
}

fn conv_backward_input<T: Scalar>(g: &ConvGeom, _n: usize, w: &[T], grad_out: &[T], dx: &mut [T]) {
    let (hw, rows, in_len) = (g.hw(), g.rows(), g.c * g.hw());
    dx.par_chunks_mut(in_len).enumerate().for_each(|(i, dst)| {
        let go = &grad_out[i * g.o * hw..(i + 1) * g.o * hw];
        if g.k == 1 {
            gemm(rows, g.o, hw, w, true, go, false, dst, true);
        } else {
            let mut cols = vec![T::zero(); rows * hw];
            gemm(rows, g.o, hw, w, true, go, false, &mut cols, false);
            col2im(g, &cols, dst);
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).unwrap()
    }

    /// Checks every trainable entry of `leaves` against central differences.
    fn check_grads(leaves: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let h = 1e-5;
        let eval = |vals: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            (g.scalar(out), g, vars, out)
        };
        let (_, g, vars, out) = eval(&leaves);
        let analytic = g.backward(out, &vars).unwrap();
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.len() {
                let mut plus = leaves.clone();
                plus[li].data_mut()[e] += h;
                let mut minus = leaves.clone();
                minus[li].data_mut()[e] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let an = analytic[li][e];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-5, "leaf {li} entry {e}: fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, vec![2, 3, 5, 4]);
        let w = rand_tensor(&mut rng, vec![2, 3, 3, 3]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let y = g.conv2d(xv, wv).unwrap();
        let out = g.value(y);
        for n in 0..2 {
            for o in 0..2 {
                for yy in 0..5isize {
                    for xx in 0..4isize {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for u in 0..3isize {
                                for v in 0..3isize {
                                    let (sy, sx) = (yy + u - 1, xx + v - 1);
                                    if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                        acc += x.data()[((n * 3 + c) * 5 + sy as usize) * 4 + sx as usize]
                                            * w.data()[((o * 3 + c) * 3 + u as usize) * 3 + v as usize];
                                    }
                                }
                            }
                        }
                        let got = out[((n * 2 + o) * 5 + yy as usize) * 4 + xx as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_spatial_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            rand_tensor(&mut rng, vec![2, 2, 4, 4]),
            rand_tensor(&mut rng, vec![3, 2, 3, 3]),
            rand_tensor(&mut rng, vec![3]),
            rand_tensor(&mut rng, vec![2, 3]),
            rand_tensor(&mut rng, vec![1, 3, 1, 1]),
        ];
        check_grads(leaves, |g, v| {
            let y = g.conv2d(v[0], v[1]).unwrap();
            let y = g.add_channel_bias(y, v[2]).unwrap();
            let y = g.channel_scale(y, v[3]).unwrap();
            let y = g.act(y, ActivationKind::Silu);
            let y = g.upsample2(y).unwrap();
            let y = g.conv2d(y, v[4]).unwrap();
            let y = g.avg_pool2(y).unwrap();
            let y = g.softplus(y);
            let s = g.mean_per_sample(y).unwrap();
            let s = g.mul(s, s).unwrap();
            g.sum(s)
        });
    }

    #[test]
    fn dense_and_pairwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![
            rand_tensor(&mut rng, vec![4, 3]),
            rand_tensor(&mut rng, vec![5, 3]),
            rand_tensor(&mut rng, vec![5]),
            rand_tensor(&mut rng, vec![3, 2]),
        ];
        check_grads(leaves, |g, v| {
            let y = g.matmul(v[0], v[1], true).unwrap();
            let y = g.add_row_bias(y, v[2]).unwrap();
            let y = g.act(y, ActivationKind::Tanh);
            let z = g.matmul(v[0], v[3], false).unwrap();
            let d = g.pair_mad(y, vec![(0, 1), (1, 2), (0, 3)]).unwrap();
            let e = g.pair_mad(z, vec![(0, 1), (1, 2), (0, 3)]).unwrap();
            let e = g.add_scalar(e, 0.5);
            let r = g.reciprocal(e);
            let q = g.mul_const(r, vec![1.0, 2.0, 3.0]).unwrap();
            let p = g.mul(d, q).unwrap();
            let p = g.scale(p, 0.7);
            let s = g.reshape(p, vec![3, 1]).unwrap();
            g.mean(s).unwrap()
        });
    }

    #[test]
    fn frozen_leaf_gradient_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::filled(vec![2], 1.0));
        let p = g.param(Tensor::filled(vec![2], 2.0));
        let y = g.mul(w, p).unwrap();
        let s = g.sum(y);
        assert!(matches!(g.backward(s, &[w]), Err(LfsError::Contract(_))));
        assert_eq!(g.backward(s, &[p]).unwrap(), vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(1e3f64) == 1e3);
        assert!(softplus(-1e3f64) >= 0.0 && softplus(-1e3f64) < 1e-300);
    }
}
