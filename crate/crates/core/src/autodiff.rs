//! A small reverse-mode automatic differentiation tape.
//!
//! Nodes are appended in evaluation order; [`Tape::backward`] walks them in
//! reverse. A tape built with [`Tape::inference`] records values only, which
//! keeps the fixed-precision codec path and the training path on the exact
//! same forward arithmetic.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape, Result};
use crate::kernels::{self, ConvGeom, DeconvGeom, PlaneShift};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv2d { x: Var, w: Var, b: Option<Var>, geom: DeconvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Score(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Ln(Var),
    LowerBound(Var, T),
    Clamp(Var, T, T),
    RoundSte(Var),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    SumAxis0(Var),
    SumAll(Var),
    Reshape(Var),
    ShiftVolume { x: Var, sign: PlaneShift },
    Warp { feat: Var, flow: Var },
    AvgPool2(Var),
    GaussianBits { delta: Var, sigma: Var, floor: f64 },
    ChannelMatmul(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape over element type `T`.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    record: bool,
    params: HashMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `src` viewed at the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums a broadcast gradient `g` down to `target` shape.
fn reduce_to<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let st = broadcast_strides(target, g.shape());
    let zeros = vec![0; g.rank()];
    let mut out = Tensor::zeros(target);
    let gd = g.data();
    let od = out.data_mut();
    for_each_broadcast(g.shape(), &st, &zeros, |o, it, _| od[it] += gd[o]);
    out
}

impl<T: Scalar> Tape<T> {
    /// Tape that records operations for differentiation.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), record: true, params: HashMap::new() }
    }

    /// Tape that only evaluates values.
    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), record: false, params: HashMap::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Input that gradients are computed for.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: self.record });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    /// Parameters outside `store`'s trainable mask never receive gradients.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store.get(name).clone();
        let trainable = self.record && store.is_trainable(name);
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Gradients for every parameter leaf that received one.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.params
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        let geom = ConvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_c: ws[0],
            k: ws[2],
            stride,
            pad,
            groups,
        };
        if groups == 0 || xs[0] % groups != 0 || ws[0] % groups != 0 || ws[1] * groups != xs[0] {
            return Err(shape(format!("conv2d channels: input {xs:?} weight {ws:?} groups {groups}")));
        }
        if xs[1] + 2 * pad < ws[2] || xs[2] + 2 * pad < ws[2] {
            return Err(shape(format!("conv2d kernel {} larger than padded input {xs:?}", ws[2])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape("conv2d bias length"));
            }
        }
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_vec(&[geom.out_c, geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &parents))
    }

    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[0] != xs[0] || ws[2] != ws[3] {
            return Err(shape(format!("deconv2d input {xs:?} weight {ws:?}")));
        }
        let geom = DeconvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            out_c: ws[1],
            k: ws[2],
            stride,
            pad,
            out_pad,
        };
        let out = kernels::deconv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_vec(&[geom.out_c, geom.out_h(), geom.out_w()], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Deconv2d { x, w, b, geom }, &parents))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            return Ok(ta.zip_map(tb, f));
        }
        let out = broadcast_shape(ta.shape(), tb.shape())
            .ok_or_else(|| shape(format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())))?;
        let sa = broadcast_strides(ta.shape(), &out);
        let sb = broadcast_strides(tb.shape(), &out);
        let mut r = Tensor::zeros(&out);
        let (da, db) = (ta.data(), tb.data());
        let rd = r.data_mut();
        for_each_broadcast(&out, &sa, &sb, |o, ia, ib| rd[o] = f(da[ia], db[ib]));
        Ok(r)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.value(a).map(softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    /// Disparity attention score `tanh(softplus(x))`, kept inside `(0, 1)`.
    pub fn score(&mut self, a: Var) -> Var {
        let t = self.value(a).map(attention_score);
        self.push(t, Op::Score(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.abs());
        self.push(t, Op::Abs(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        self.push(t, Op::Ln(a), &[a])
    }

    /// `max(x, bound)`; the gradient passes where `x ≥ bound` or where the
    /// upstream gradient would push `x` upward.
    pub fn lower_bound(&mut self, a: Var, bound: T) -> Var {
        let t = self.value(a).map(|x| x.max(bound));
        self.push(t, Op::LowerBound(a, bound), &[a])
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(t, Op::Clamp(a, lo, hi), &[a])
    }

    /// Clamp to `[lo, hi]` built from two [`Self::lower_bound`]s, so the
    /// gradient still flows where it would move the value back inside.
    pub fn bound(&mut self, a: Var, lo: T, hi: T) -> Var {
        let x = self.lower_bound(a, lo);
        let x = self.scale(x, -T::one());
        let x = self.lower_bound(x, -hi);
        self.scale(x, -T::one())
    }

    /// Rounds half away from zero; the backward pass is the identity.
    pub fn round_ste(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.round());
        self.push(t, Op::RoundSte(a), &[a])
    }

    /// Copy of `a` that blocks gradients.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let t = Tensor::concat0(&tensors)?;
        Ok(self.push(t, Op::Concat(parts.to_vec()), parts))
    }

    /// Leading-axis range `[start, start + len)`.
    pub fn narrow(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let lead = self.shape(a)[0];
        if start + len > lead || len == 0 {
            return Err(shape(format!("narrow {start}+{len} of leading axis {lead}")));
        }
        let t = self.value(a).narrow0(start, len);
        Ok(self.push(t, Op::Narrow(a, start), &[a]))
    }

    pub fn sum_axis0(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let lead = src.shape()[0];
        let inner_shape = src.shape()[1..].to_vec();
        let inner: usize = inner_shape.iter().product();
        let mut out = Tensor::zeros(&inner_shape);
        let od = out.data_mut();
        for chunk in src.data().chunks(inner).take(lead) {
            for (o, &v) in od.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        self.push(out, Op::SumAxis0(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = T::from_usize(self.value(a).numel()).unwrap();
        let s = self.sum_all(a);
        self.scale(s, T::one() / n)
    }

    /// Mean squared error between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape(format!("mse {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean_all(sq))
    }

    pub fn reshape(&mut self, a: Var, new_shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(new_shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Disparity volume `[D, C, H, W]` of a `[C, H, W]` map.
    pub fn shift_volume(&mut self, x: Var, sign: PlaneShift, planes: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || planes == 0 {
            return Err(shape(format!("shift_volume on {s:?} with {planes} planes")));
        }
        let out = kernels::shift_volume_forward(self.value(x).data(), s[0], s[1], s[2], sign, planes);
        let t = Tensor::from_vec(&[planes, s[0], s[1], s[2]], out)?;
        Ok(self.push(t, Op::ShiftVolume { x, sign }, &[x]))
    }

    /// Bilinear backward warp of `feat [C,H,W]` by `flow [2,H,W]`.
    pub fn warp(&mut self, feat: Var, flow: Var) -> Result<Var> {
        let fs = self.shape(feat).to_vec();
        let ws = self.shape(flow).to_vec();
        if fs.len() != 3 || ws != [2, fs[1], fs[2]] {
            return Err(shape(format!("warp feature {fs:?} flow {ws:?}")));
        }
        let out = kernels::warp_forward(self.value(feat).data(), self.value(flow).data(), fs[0], fs[1], fs[2]);
        let t = Tensor::from_vec(&fs, out)?;
        Ok(self.push(t, Op::Warp { feat, flow }, &[feat, flow]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] < 2 || s[2] < 2 {
            return Err(shape(format!("avg_pool2 on {s:?}")));
        }
        let out = kernels::avg_pool2_forward(self.value(x).data(), s[0], s[1], s[2]);
        let t = Tensor::from_vec(&[s[0], s[1] / 2, s[2] / 2], out)?;
        Ok(self.push(t, Op::AvgPool2(x), &[x]))
    }

    /// Per-element code length in bits of integer offsets `delta` under a
    /// zero-mean Gaussian with scale `sigma`, integrated over the unit bin;
    /// probabilities are floored at `floor`.
    pub fn gaussian_bits(&mut self, delta: Var, sigma: Var, floor: f64) -> Result<Var> {
        if self.shape(delta) != self.shape(sigma) {
            return Err(shape("gaussian_bits delta/sigma shapes"));
        }
        let t = self
            .value(delta)
            .zip_map(self.value(sigma), |d, s| T::from_f64_lossy(gaussian_bin_bits(d.as_f64(), s.as_f64(), floor)));
        Ok(self.push(t, Op::GaussianBits { delta, sigma, floor }, &[delta, sigma]))
    }

    /// Batched product `[C, O, I] × [C, I, P] → [C, O, P]`.
    pub fn channel_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape(format!("channel_matmul {sa:?} × {sb:?}")));
        }
        let (c, o, i, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); c * o * p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for ch in 0..c {
            T::gemm(
                o,
                i,
                p,
                &da[ch * o * i..(ch + 1) * o * i],
                i as isize,
                1,
                &db[ch * i * p..(ch + 1) * i * p],
                p as isize,
                1,
                T::zero(),
                &mut out[ch * o * p..(ch + 1) * o * p],
                p as isize,
                1,
            );
        }
        let t = Tensor::from_vec(&[c, o, p], out)?;
        Ok(self.push(t, Op::ChannelMatmul(a, b), &[a, b]))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn unary_grad(&self, grads: &mut [Option<Tensor<T>>], a: Var, g: &Tensor<T>, f: impl Fn(T, T, T) -> T, out: &Tensor<T>) {
        if !self.needs(a) {
            return;
        }
        let x = self.value(a);
        let data = g
            .data()
            .iter()
            .zip(x.data())
            .zip(out.data())
            .map(|((&gv, &xv), &yv)| f(gv, xv, yv))
            .collect();
        self.accumulate(grads, a, Tensor::from_vec(x.shape(), data).unwrap());
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g.data(), self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw).unwrap());
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::Deconv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::deconv2d_backward(geom, self.value(*x).data(), self.value(*w).data(), g.data(), self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, Tensor::from_vec(self.shape(*x), dx).unwrap());
                }
                self.accumulate(grads, *w, Tensor::from_vec(self.shape(*w), dw).unwrap());
                if let Some(b) = b {
                    self.accumulate(grads, *b, Tensor::from_vec(self.shape(*b), db).unwrap());
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, reduce_to(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.needs(*b) {
                    let neg = g.map(|v| -v);
                    self.accumulate(grads, *b, reduce_to(&neg, self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if !self.needs(this) {
                        continue;
                    }
                    let ov = self.value(other);
                    let prod = if ov.shape() == g.shape() {
                        g.zip_map(ov, |x, y| x * y)
                    } else {
                        let so = broadcast_strides(ov.shape(), g.shape());
                        let zeros = vec![0; g.rank()];
                        let mut p = Tensor::zeros(g.shape());
                        let (gd, od) = (g.data(), ov.data());
                        let pd = p.data_mut();
                        for_each_broadcast(g.shape(), &so, &zeros, |o, io, _| pd[o] = gd[o] * od[io]);
                        p
                    };
                    self.accumulate(grads, this, reduce_to(&prod, self.shape(this)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.unary_grad(grads, *a, g, |gv, _, _| gv * s, out);
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                self.unary_grad(grads, *a, g, |gv, x, _| if x > T::zero() { gv } else { gv * slope }, out);
            }
            Op::Softplus(a) => self.unary_grad(grads, *a, g, |gv, x, _| gv * sigmoid(x), out),
            Op::Score(a) => self.unary_grad(
                grads,
                *a,
                g,
                |gv, x, _| {
                    let t = softplus(x).tanh();
                    gv * (T::one() - t * t) * sigmoid(x)
                },
                out,
            ),
            Op::Tanh(a) => self.unary_grad(grads, *a, g, |gv, _, y| gv * (T::one() - y * y), out),
            Op::Sigmoid(a) => self.unary_grad(grads, *a, g, |gv, _, y| gv * y * (T::one() - y), out),
            Op::Abs(a) => self.unary_grad(grads, *a, g, |gv, x, _| if x >= T::zero() { gv } else { -gv }, out),
            Op::Ln(a) => self.unary_grad(grads, *a, g, |gv, x, _| gv / x, out),
            Op::LowerBound(a, bound) => {
                let bound = *bound;
                self.unary_grad(grads, *a, g, |gv, x, _| if x >= bound || gv < T::zero() { gv } else { T::zero() }, out);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(grads, *a, g, |gv, x, _| if x >= lo && x <= hi { gv } else { T::zero() }, out);
            }
            Op::RoundSte(a) => self.accumulate(grads, *a, g.clone()),
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[0];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.narrow0(start, len));
                    }
                    start += len;
                }
            }
            Op::Narrow(a, start) => {
                if self.needs(*a) {
                    let src = self.shape(*a);
                    let inner: usize = src[1..].iter().product();
                    let mut full = Tensor::zeros(src);
                    full.data_mut()[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                    self.accumulate(grads, *a, full);
                }
            }
            Op::SumAxis0(a) => {
                if self.needs(*a) {
                    let src = self.shape(*a);
                    let mut full = Vec::with_capacity(src.iter().product());
                    for _ in 0..src[0] {
                        full.extend_from_slice(g.data());
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(src, full).unwrap());
                }
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.shape(*a), gv));
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.shape(*a)).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::ShiftVolume { x, sign } => {
                let s = self.shape(*x);
                let planes = out.shape()[0];
                let dx = kernels::shift_volume_backward(g.data(), s[0], s[1], s[2], *sign, planes);
                self.accumulate(grads, *x, Tensor::from_vec(s, dx).unwrap());
            }
            Op::Warp { feat, flow } => {
                let s = self.shape(*feat);
                let (df, dflow) = kernels::warp_backward(self.value(*feat).data(), self.value(*flow).data(), g.data(), s[0], s[1], s[2]);
                self.accumulate(grads, *feat, Tensor::from_vec(s, df).unwrap());
                self.accumulate(grads, *flow, Tensor::from_vec(self.shape(*flow), dflow).unwrap());
            }
            Op::AvgPool2(x) => {
                let s = self.shape(*x);
                let dx = kernels::avg_pool2_backward(g.data(), s[0], s[1], s[2]);
                self.accumulate(grads, *x, Tensor::from_vec(s, dx).unwrap());
            }
            Op::GaussianBits { delta, sigma, floor } => {
                let (dv, sv) = (self.value(*delta), self.value(*sigma));
                let mut gd = Vec::with_capacity(dv.numel());
                let mut gs = Vec::with_capacity(dv.numel());
                for ((&gv, &d), &s) in g.data().iter().zip(dv.data()).zip(sv.data()) {
                    let (bd, bs) = gaussian_bin_bits_grad(d.as_f64(), s.as_f64(), *floor);
                    gd.push(gv * T::from_f64_lossy(bd));
                    gs.push(gv * T::from_f64_lossy(bs));
                }
                self.accumulate(grads, *delta, Tensor::from_vec(dv.shape(), gd).unwrap());
                self.accumulate(grads, *sigma, Tensor::from_vec(sv.shape(), gs).unwrap());
            }
            Op::ChannelMatmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (c, o, i, p) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db, dg) = (self.value(*a).data(), self.value(*b).data(), g.data());
                if self.needs(*a) {
                    let mut ga = vec![T::zero(); c * o * i];
                    for ch in 0..c {
                        // dA = G · Bᵀ
                        T::gemm(o, p, i, &dg[ch * o * p..(ch + 1) * o * p], p as isize, 1, &db[ch * i * p..(ch + 1) * i * p], 1, p as isize, T::zero(), &mut ga[ch * o * i..(ch + 1) * o * i], i as isize, 1);
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(sa, ga).unwrap());
                }
                if self.needs(*b) {
                    let mut gb = vec![T::zero(); c * i * p];
                    for ch in 0..c {
                        // dB = Aᵀ · G
                        T::gemm(i, o, p, &da[ch * o * i..(ch + 1) * o * i], 1, i as isize, &dg[ch * o * p..(ch + 1) * o * p], p as isize, 1, T::zero(), &mut gb[ch * i * p..(ch + 1) * i * p], p as isize, 1);
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(sb, gb).unwrap());
                }
            }
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    let thirty = T::from_f64_lossy(30.0);
    if x > thirty {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `tanh(softplus(x))`, clamped one ulp inside `(0, 1)` where floating point
/// would otherwise saturate to exactly 0 or 1.
pub fn attention_score<T: Scalar>(x: T) -> T {
    let hi = T::one() - T::epsilon() / T::from_f64_lossy(2.0);
    softplus(x).tanh().max(T::min_positive_value()).min(hi)
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Probability mass of the unit bin around `delta` under `N(0, sigma²)`.
///
/// Evaluated on `|delta|` so that both CDF terms sit in the lower tail where
/// `erfc` keeps full relative precision.
pub fn gaussian_bin_prob(delta: f64, sigma: f64) -> f64 {
    let a = delta.abs();
    let upper = (0.5 - a) / sigma;
    let lower = (-0.5 - a) / sigma;
    crate::scalar::normal_cdf(upper) - crate::scalar::normal_cdf(lower)
}

/// `−log2` of [`gaussian_bin_prob`] with the probability floored at `floor`.
pub fn gaussian_bin_bits(delta: f64, sigma: f64, floor: f64) -> f64 {
    -gaussian_bin_prob(delta, sigma).max(floor).log2()
}

/// Partial derivatives of [`gaussian_bin_bits`] with respect to `(delta, sigma)`.
pub fn gaussian_bin_bits_grad(delta: f64, sigma: f64, floor: f64) -> (f64, f64) {
    let p = gaussian_bin_prob(delta, sigma);
    if p <= floor {
        return (0.0, 0.0);
    }
    let u = (delta + 0.5) / sigma;
    let l = (delta - 0.5) / sigma;
    let (pu, pl) = (crate::scalar::normal_pdf(u), crate::scalar::normal_pdf(l));
    let dp_dd = (pu - pl) / sigma;
    let dp_ds = -(u * pu - l * pl) / sigma;
    let k = -1.0 / (p * std::f64::consts::LN_2);
    (k * dp_dd, k * dp_ds)
}
