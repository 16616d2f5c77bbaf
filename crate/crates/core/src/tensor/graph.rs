use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;

use super::kernels::{self, ConvGeometry, NormStats};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Where batch norm takes its normalisation statistics from.
#[derive(Clone, Copy, Debug)]
pub enum BnStats<'a, T> {
    /// The current batch (training, differentiable through the statistics).
    Batch,
    /// Constant running statistics (inference).
    Fixed { mean: &'a [T], var: &'a [T] },
}

/// Loss reduction over valid pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    /// Weighted mean: divide by the summed weights of the valid pixels.
    #[default]
    Mean,
    Sum,
}

enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry },
    MaxPool { input: Var, argmax: Vec<u32> },
    AvgPool { input: Var },
    BatchNorm { input: Var, gamma: Var, beta: Var, stats: NormStats<T>, batch: bool },
    Relu { input: Var },
    LeakyRelu { input: Var, slope: T },
    Tanh { input: Var },
    Exp { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { input: Var, scale: T },
    Concat { a: Var, b: Var },
    ConcatBatch { parts: Vec<Var> },
    Dropout { input: Var, mask: Vec<T> },
    ChannelMix { input: Var, coeffs: Vec<T> },
    Sum { input: Var },
    Mean { input: Var },
    LogSigmoid { input: Var, eps: T },
    L1Mean { a: Var, b: Var },
    SoftmaxXent { logits: Var, labels: Vec<u8>, weights: Vec<T>, ignore: u8, scale: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations as they execute and replays them backwards.
///
/// Nodes are appended in execution order, so every input precedes its
/// consumers and a single reverse sweep visits each node once.
pub struct Graph<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn map<T: Element>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
        .expect("shape preserved")
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        #[cfg(debug_assertions)]
        {
            if !value.all_finite() && inputs.iter().all(|v| self.nodes[v.0].value.all_finite()) {
                panic!("non-finite output from finite inputs in graph node {}", self.nodes.len());
            }
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let mut value = value;
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; gradients are retained on leaves that require them.
    pub fn leaf(&mut self, mut t: Tensor<T>, requires_grad: bool) -> Var {
        t.requires_grad = requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// A constant copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, &deps))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        Ok(self.push(out, Op::ConvTranspose2d { input, weight, bias, geom }, &deps))
    }

    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = kernels::max_pool2x2_forward(self.value(input))?;
        Ok(self.push(out, Op::MaxPool { input, argmax }, &[input]))
    }

    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var> {
        let out = kernels::avg_pool2x2_forward(self.value(input))?;
        Ok(self.push(out, Op::AvgPool { input }, &[input]))
    }

    /// Per-channel batch normalisation of `[N, C, H, W]`; also returns the
    /// statistics used so callers can maintain running averages.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        source: BnStats<'_, T>,
        eps: f64,
    ) -> Result<(Var, NormStats<T>)> {
        const OP: &str = "batch_norm2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::shape(
                    OP,
                    format!("{name} shape {:?} does not match {c} channels", self.shape(v)),
                ));
            }
        }
        let fixed = match source {
            BnStats::Batch => {
                if n * h * w < 2 {
                    return Err(Error::invalid(
                        OP,
                        "training mode needs at least 2 values per channel",
                    ));
                }
                None
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape(OP, "running statistics do not match channels"));
                }
                Some((mean, var))
            }
        };
        let (y, stats) = kernels::batch_norm_forward(
            self.value(input).data(),
            [n, c, h * w],
            self.value(gamma).data(),
            self.value(beta).data(),
            fixed,
            eps,
        );
        let out = Tensor::new(vec![n, c, h, w], y)?;
        let batch = fixed.is_none();
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                stats: stats.clone(),
                batch,
            },
            &[input, gamma, beta],
        );
        Ok((var, stats))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = map(self.value(input), |v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu { input }, &[input])
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let out = map(self.value(input), |v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { input, slope }, &[input])
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let out = map(self.value(input), |v| v.tanh());
        self.push(out, Op::Tanh { input }, &[input])
    }

    pub fn exp(&mut self, input: Var) -> Var {
        let out = map(self.value(input), |v| v.exp());
        self.push(out, Op::Exp { input }, &[input])
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, &[a, b]))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, input: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (T::lit(scale), T::lit(shift));
        let out = map(self.value(input), |v| v * s + b);
        self.push(out, Op::Affine { input, scale: s }, &[input])
    }

    /// Concatenates two `[N, C, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let [n, ca, h, w] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape(
                OP,
                format!("N,H,W must agree: {n}x{h}x{w} vs {nb}x{hb}x{wb}"),
            ));
        }
        let plane = h * w;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&da[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&db[s * cb * plane..(s + 1) * cb * plane]);
        }
        let out = Tensor::new(vec![n, ca + cb, h, w], out)?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    /// Concatenates tensors along the leading (batch) axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat_batch";
        let first = parts.first().ok_or_else(|| Error::invalid(OP, "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::shape(OP, format!("{:?} vs trailing {:?}", t.shape(), tail)));
            }
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatBatch { parts: parts.to_vec() }, parts))
    }

    /// Channel-wise dropout with inverted scaling. `p == 0` is a no-op.
    pub fn dropout2d(&mut self, input: Var, p: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid("dropout2d", format!("p = {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(input);
        }
        let [n, c, h, w] = self.value(input).dims4("dropout2d")?;
        let keep = T::lit(1.0 / (1.0 - p));
        let mut mask = Vec::with_capacity(n * c * h * w);
        for _ in 0..n * c {
            let m = if rng.random::<f64>() < p { T::zero() } else { keep };
            mask.extend(std::iter::repeat_n(m, h * w));
        }
        let x = self.value(input);
        let out = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        Ok(self.push(out, Op::Dropout { input, mask }, &[input]))
    }

    /// Weighted sum over channels: `[N, C, H, W] -> [N, 1, H, W]`.
    pub fn channel_mix(&mut self, input: Var, coeffs: &[f64]) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4("channel_mix")?;
        if coeffs.len() != c {
            return Err(Error::shape(
                "channel_mix",
                format!("{} coefficients for {c} channels", coeffs.len()),
            ));
        }
        let coeffs: Vec<T> = coeffs.iter().map(|&v| T::lit(v)).collect();
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = vec![T::zero(); n * plane];
        for s in 0..n {
            let dst = &mut out[s * plane..(s + 1) * plane];
            for (ch, &k) in coeffs.iter().enumerate() {
                let src = &x[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + k * v);
            }
        }
        let out = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(out, Op::ChannelMix { input, coeffs }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { input }, &[input])
    }

    /// `ln(sigmoid(x) + eps)`, finite for any finite `x`.
    pub fn log_sigmoid(&mut self, input: Var, eps: f64) -> Var {
        let e = T::lit(eps);
        let out = map(self.value(input), |v| (sigmoid(v) + e).ln());
        self.push(out, Op::LogSigmoid { input, eps: e }, &[input])
    }

    /// Mean absolute difference of two equal-shape tensors.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary("l1_mean", a, b, |x, y| (x - y).abs())?;
        let m = d.data().iter().copied().sum::<T>() / T::lit(d.numel() as f64);
        Ok(self.push(Tensor::scalar(m), Op::L1Mean { a, b }, &[a, b]))
    }

    /// Class-weighted pixel-wise softmax cross-entropy on `[N, K, H, W]`
    /// logits, fused with log-softmax. Pixels labelled `ignore` contribute
    /// nothing; with [`Reduction::Mean`] the sum is divided by the total
    /// weight of the remaining pixels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[u8],
        weights: &[T],
        ignore: u8,
        reduction: Reduction,
    ) -> Result<Var> {
        const OP: &str = "seg_loss";
        let [n, k, h, w] = self.value(logits).dims4(OP)?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::shape(
                OP,
                format!("{} labels for logits {n}x{k}x{h}x{w}", labels.len()),
            ));
        }
        if weights.len() != k {
            return Err(Error::shape(OP, format!("{} class weights for {k} classes", weights.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::LabelOutOfRange {
                label: bad as u32,
                num_classes: k,
            });
        }
        let x = self.value(logits).data();
        let mut total = 0.0f64;
        let mut weight_sum = 0.0f64;
        for s in 0..n {
            for p in 0..plane {
                let l = labels[s * plane + p];
                if l == ignore {
                    continue;
                }
                let at = |c: usize| x[(s * k + c) * plane + p].as_f64();
                let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..k).map(|c| (at(c) - m).exp()).sum::<f64>().ln();
                let wl = weights[l as usize].as_f64();
                total += wl * (lse - at(l as usize));
                weight_sum += wl;
            }
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if weight_sum > 0.0 => 1.0 / weight_sum,
            Reduction::Mean => 0.0,
        };
        let out = Tensor::scalar(T::lit(total * scale));
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                ignore,
                scale: T::lit(scale),
            },
            &[logits],
        ))
    }

    /// Hash of every piecewise-linear branch decision in the graph (ReLU
    /// masks, pooling winners, signs inside |.|). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } | Op::LeakyRelu { input, .. } => {
                    for v in self.nodes[input.0].value.data() {
                        (*v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::L1Mean { a, b } => {
                    let (x, y) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    for (p, q) in x.iter().zip(y) {
                        p.partial_cmp(q).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across
    /// calls; uses of a node inside one graph sum.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = &mut self.nodes[i].value.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
            slot @ None => *slot = Some(g),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let need = (self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b)));
                let cg = kernels::conv2d_backward(g, self.value(*input), self.value(*weight), *geom, need)?;
                self.route_conv(grads, cg, *input, *weight, *bias);
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let need = (self.rg(*input), self.rg(*weight), bias.is_some_and(|b| self.rg(b)));
                let cg = kernels::conv_transpose2d_backward(
                    g,
                    self.value(*input),
                    self.value(*weight),
                    *geom,
                    need,
                )?;
                self.route_conv(grads, cg, *input, *weight, *bias);
            }
            Op::MaxPool { input, argmax } => {
                let dx = kernels::max_pool2x2_backward(g, argmax, self.value(*input).numel());
                self.accumulate(grads, *input, dx);
            }
            Op::AvgPool { input } => {
                let dims = self.value(*input).dims4("avg_pool2d")?;
                self.accumulate(grads, *input, kernels::avg_pool2x2_backward(g, dims));
            }
            Op::BatchNorm { input, gamma, beta, stats, batch } => {
                let [n, c, h, w] = self.value(*input).dims4("batch_norm2d")?;
                let ng = kernels::batch_norm_backward(
                    g,
                    self.value(*input).data(),
                    [n, c, h * w],
                    self.value(*gamma).data(),
                    stats,
                    *batch,
                );
                self.accumulate(grads, *input, ng.input);
                self.accumulate(grads, *gamma, ng.gamma);
                self.accumulate(grads, *beta, ng.beta);
            }
            Op::Relu { input } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::LeakyRelu { input, slope } => {
                let dx = g
                    .iter()
                    .zip(self.value(*input).data())
                    .map(|(&d, &x)| if x > T::zero() { d } else { d * *slope })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Tanh { input } => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * (T::one() - y * y))
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Exp { input } => {
                let dx = g.iter().zip(out.data()).map(|(&d, &y)| d * y).collect();
                self.accumulate(grads, *input, dx);
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&d| -d).collect());
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&d, &y)| d * y).collect());
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Affine { input, scale } => {
                self.accumulate(grads, *input, g.iter().map(|&d| d * *scale).collect());
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for s in 0..n {
                    let base = s * (ca + cb) * plane;
                    ga.extend_from_slice(&g[base..base + ca * plane]);
                    gb.extend_from_slice(&g[base + ca * plane..base + (ca + cb) * plane]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ConcatBatch { parts } => {
                let mut at = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(grads, p, g[at..at + n].to_vec());
                    at += n;
                }
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, g.iter().zip(mask).map(|(&d, &m)| d * m).collect());
            }
            Op::ChannelMix { input, coeffs } => {
                let [n, c, h, w] = self.value(*input).dims4("channel_mix")?;
                let plane = h * w;
                let mut dx = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    let src = &g[s * plane..(s + 1) * plane];
                    for (ch, &k) in coeffs.iter().enumerate() {
                        let dst = &mut dx[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = k * v);
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Sum { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel();
                self.accumulate(grads, *input, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::LogSigmoid { input, eps } => {
                let dx = g
                    .iter()
                    .zip(self.value(*input).data())
                    .map(|(&d, &x)| {
                        let s = sigmoid(x);
                        d * s * (T::one() - s) / (s + *eps)
                    })
                    .collect();
                self.accumulate(grads, *input, dx);
            }
            Op::L1Mean { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = g[0] / T::lit(va.len() as f64);
                let da: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        if x > y {
                            scale
                        } else if x < y {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                if self.rg(*b) {
                    self.accumulate(grads, *b, da.iter().map(|&d| -d).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxXent { logits, labels, weights, ignore, scale } => {
                let [n, k, h, w] = self.value(*logits).dims4("seg_loss")?;
                let plane = h * w;
                let x = self.value(*logits).data();
                let mut dx = vec![T::zero(); x.len()];
                let up = g[0] * *scale;
                for s in 0..n {
                    for p in 0..plane {
                        let l = labels[s * plane + p];
                        if l == *ignore {
                            continue;
                        }
                        let at = |c: usize| x[(s * k + c) * plane + p].as_f64();
                        let m = (0..k).map(at).fold(f64::NEG_INFINITY, f64::max);
                        let z = (0..k).map(|c| (at(c) - m).exp()).sum::<f64>();
                        let coef = (up * weights[l as usize]).as_f64();
                        for c in 0..k {
                            let prob = (at(c) - m).exp() / z;
                            let onehot = if c == l as usize { 1.0 } else { 0.0 };
                            dx[(s * k + c) * plane + p] = T::lit(coef * (prob - onehot));
                        }
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
        }
        Ok(())
    }

    fn route_conv(
        &self,
        grads: &mut [Option<Vec<T>>],
        cg: kernels::ConvGrads<T>,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) {
        if let Some(dx) = cg.input {
            self.accumulate(grads, input, dx);
        }
        if let Some(dw) = cg.weight {
            self.accumulate(grads, weight, dw);
        }
        if let (Some(db), Some(b)) = (cg.bias, bias) {
            self.accumulate(grads, b, db);
        }
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([3], |i| i as f64));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn reuse_doubles_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![0.5, -1.5]).unwrap());
        let once = g.sum(x);
        let twice = g.add(x, x).unwrap();
        let s2 = g.sum(twice);
        g.backward(once).unwrap();
        let single = g.grad(x).unwrap().to_vec();
        let mut g2 = Graph::<f64>::new();
        let y = g2.param(Tensor::new([2], vec![0.5, -1.5]).unwrap());
        let tw = g2.add(y, y).unwrap();
        let s = g2.sum(tw);
        g2.backward(s).unwrap();
        let double = g2.grad(y).unwrap();
        assert!(single.iter().zip(double).all(|(a, b)| 2.0 * a == *b));
        let _ = s2;
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::zeros([2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new([2], vec![-1.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn concat_stacks_channels() {
        let mut g = Graph::<f32>::new();
        let l = g.input(Tensor::full([1, 1, 2, 2], 1.0));
        let d = g.input(Tensor::full([1, 1, 2, 2], 2.0));
        let ld = g.concat_channels(l, d).unwrap();
        assert_eq!(g.shape(ld), &[1, 2, 2, 2]);
        assert_eq!(g.value(ld).data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
        let bad = g.input(Tensor::zeros([1, 1, 4, 2]));
        assert!(g.concat_channels(l, bad).is_err());
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::from_fn([1, 2, 2, 2], |i| i as f32 - 3.0));
        let z = g.input(Tensor::zeros([1, 2, 2, 2]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn detached_copy_blocks_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
        assert!(!g.requires_grad(d));
    }

    #[test]
    fn dropout_eval_shapes_and_zero_p() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full([2, 8, 2, 2], 1.0));
        assert_eq!(g.dropout2d(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout2d(x, 0.5, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
