//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable (gradient requested) or constants; every other node records the
//! op that produced it. [`Graph::backward`] walks the tape once in reverse.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Conv2d { x: Var, w: Var },
    Upsample2x(Var),
    AvgPool2x(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Clamp(Var, T, T),
    InstanceNorm { x: Var, inv_std: Vec<T> },
    Modulate { x: Var, gamma: Var, beta: Var },
    NoiseInject { x: Var, strength: Var, noise: Tensor<T> },
    BroadcastBatch(Var),
    SpatialMean(Var),
    ChannelMeanBroadcast(Var),
    SampleMeanBroadcast(Var),
    Translate { x: Var, shifts: Vec<(isize, isize)> },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SquaredError { a: Var, b: Var },
    Custom(Vec<(Var, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node that requires them.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn nchw(shape: &[usize]) -> (usize, usize, usize, usize) {
    (shape[0], shape[1], shape[2], shape[3])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant leaf; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "sub")?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let v = Tensor::from_fn(av.shape(), |i| av.data()[i] - bv[i]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let bv = self.value(b).data();
        let av = self.value(a);
        let v = Tensor::from_fn(av.shape(), |i| av.data()[i] * bv[i]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `[m,k] x [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::ZERO; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `x[n,d] + b[d]`.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape(format!("row bias {sx:?} + {sb:?}")));
        }
        let d = sx[1];
        let bv = self.value(b).data();
        let xv = self.value(x);
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv[i % d]);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddRowBias(x, b), rg))
    }

    /// `x[n,c,h,w] + b[c]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sx.len() != 4 || sb != [sx[1]] {
            return Err(Error::shape(format!("channel bias {sx:?} + {sb:?}")));
        }
        let (_, c, h, w) = nchw(sx);
        let hw = h * w;
        let bv = self.value(b).data();
        let xv = self.value(x);
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bv[(i / hw) % c]);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddChannelBias(x, b), rg))
    }

    /// Stride-1 convolution with "same" zero padding and an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0
        {
            return Err(Error::shape(format!("conv2d {sx:?} * {sw:?}")));
        }
        let (n, ci, h, wd) = nchw(&sx);
        let (co, k) = (sw[0], sw[2]);
        let hw = h * wd;
        let kk = ci * k * k;
        let mut out = vec![T::ZERO; n * co * hw];
        let mut cols = if k == 1 { Vec::new() } else { vec![T::ZERO; kk * hw] };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..n {
            let xs = &xv[s * ci * hw..(s + 1) * ci * hw];
            let src: &[T] = if k == 1 {
                xs
            } else {
                im2col(xs, ci, h, wd, k, &mut cols);
                &cols
            };
            matmul_into(wv, src, &mut out[s * co * hw..(s + 1) * co * hw], co, kk, hw, false);
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(
            Tensor::new(vec![n, co, h, wd], out)?,
            Op::Conv2d { x, w },
            rg,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("upsample {s:?}")));
        }
        let (n, c, h, w) = nchw(s);
        let xv = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, h2, w2], out)?, Op::Upsample2x(x), rg))
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2x {s:?}")));
        }
        let (n, c, h, w) = nchw(s);
        let (h2, w2) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let q = T::from_f64(0.25);
        let mut out = vec![T::ZERO; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * w2 + j] = (a + b) * q;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, h2, w2], out)?, Op::AvgPool2x(x), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self
            .value(x)
            .map(|a| if a > T::ZERO { a } else { a * slope });
        let rg = self.rg(x);
        self.push(v, Op::LeakyRelu(x, slope), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.tanh());
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| {
            if a < lo {
                lo
            } else if a > hi {
                hi
            } else {
                a
            }
        });
        let rg = self.rg(x);
        self.push(v, Op::Clamp(x, lo, hi), rg)
    }

    /// Per-sample, per-channel normalization over the spatial axes.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("instance_norm {s:?}")));
        }
        let (n, c, h, w) = nchw(s);
        let hw = h * w;
        let inv_hw = T::from_f64(1.0 / hw as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * hw];
        let mut inv_std = vec![T::ZERO; n * c];
        for p in 0..n * c {
            let src = &xv[p * hw..(p + 1) * hw];
            let mut mean = T::ZERO;
            for &v in src {
                mean += v;
            }
            mean *= inv_hw;
            let mut var = T::ZERO;
            for &v in src {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_hw;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[p] = is;
            for (o, &v) in out[p * hw..(p + 1) * hw].iter_mut().zip(src) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::InstanceNorm { x, inv_std },
            rg,
        ))
    }

    /// `x[n,c,h,w] * gamma[n,c] + beta[n,c]`, broadcast over space.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || self.shape(gamma) != [s[0], s[1]] || self.shape(beta) != [s[0], s[1]] {
            return Err(Error::shape(format!(
                "modulate {s:?} with {:?}/{:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let hw = s[2] * s[3];
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x);
        let v = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * g[i / hw] + b[i / hw]);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(v, Op::Modulate { x, gamma, beta }, rg))
    }

    /// `x + strength[c] * noise`, where `noise` is `[1 or n, 1, h, w]` and constant.
    pub fn noise_inject(&mut self, x: Var, strength: Var, noise: Tensor<T>) -> Result<Var> {
        let s = self.shape(x);
        let ns = noise.shape();
        if s.len() != 4
            || ns.len() != 4
            || !(ns[0] == 1 || ns[0] == s[0])
            || ns[1] != 1
            || ns[2..] != s[2..]
            || self.shape(strength) != [s[1]]
        {
            return Err(Error::shape(format!("noise_inject {s:?} with noise {ns:?}")));
        }
        let (n, c, h, w) = nchw(s);
        let hw = h * w;
        let st = self.value(strength).data();
        let xv = self.value(x).data();
        let nd = noise.data();
        let per_sample = ns[0] != 1;
        let mut out = xv.to_vec();
        for si in 0..n {
            let nz = if per_sample { &nd[si * hw..(si + 1) * hw] } else { &nd[..hw] };
            for ch in 0..c {
                let o = &mut out[(si * c + ch) * hw..(si * c + ch + 1) * hw];
                for (a, &z) in o.iter_mut().zip(nz) {
                    *a += st[ch] * z;
                }
            }
        }
        let rg = self.rg(x) || self.rg(strength);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::NoiseInject { x, strength, noise },
            rg,
        ))
    }

    /// Repeat a `[1, ...]` tensor `n` times along the leading axis.
    pub fn broadcast_batch(&mut self, x: Var, n: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[0] != 1 {
            return Err(Error::shape(format!("broadcast_batch {s:?}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(src);
        }
        let mut shape = s;
        shape[0] = n;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::BroadcastBatch(x), rg))
    }

    /// Global average pooling `[n,c,h,w] -> [n,c]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("spatial_mean {s:?}")));
        }
        let (n, c, h, w) = nchw(s);
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let xv = self.value(x).data();
        let out: Vec<T> = (0..n * c)
            .map(|p| {
                let mut acc = T::ZERO;
                for &v in &xv[p * hw..(p + 1) * hw] {
                    acc += v;
                }
                acc * inv
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::SpatialMean(x), rg))
    }

    /// Mean over channels, broadcast back to `[n,c,h,w]`.
    pub fn channel_mean_broadcast(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape(format!("channel_mean {s:?}")));
        }
        let (n, c, h, w) = nchw(s);
        let hw = h * w;
        let inv = T::from_f64(1.0 / c as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * hw];
        for si in 0..n {
            for p in 0..hw {
                let mut acc = T::ZERO;
                for ch in 0..c {
                    acc += xv[(si * c + ch) * hw + p];
                }
                acc *= inv;
                for ch in 0..c {
                    out[(si * c + ch) * hw + p] = acc;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::ChannelMeanBroadcast(x),
            rg,
        ))
    }

    /// Mean over all non-batch axes, broadcast back to the input shape.
    pub fn sample_mean_broadcast(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("sample_mean {s:?}")));
        }
        let per: usize = s[1..].iter().product();
        let inv = T::from_f64(1.0 / per as f64);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; xv.len()];
        for si in 0..s[0] {
            let mut acc = T::ZERO;
            for &v in &xv[si * per..(si + 1) * per] {
                acc += v;
            }
            acc *= inv;
            out[si * per..(si + 1) * per].fill(acc);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(s, out)?, Op::SampleMeanBroadcast(x), rg))
    }

    /// Per-sample integer shift `(dx, dy)` with zero fill: `out[i][j] = x[i-dy][j-dx]`.
    pub fn translate(&mut self, x: Var, shifts: Vec<(isize, isize)>) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || shifts.len() != s[0] {
            return Err(Error::shape(format!(
                "translate {s:?} with {} shifts",
                shifts.len()
            )));
        }
        let (n, c, h, w) = nchw(s);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; n * c * h * w];
        for si in 0..n {
            let (dx, dy) = shifts[si];
            for ch in 0..c {
                let base = (si * c + ch) * h * w;
                for i in 0..h as isize {
                    let si_ = i - dy;
                    if si_ < 0 || si_ >= h as isize {
                        continue;
                    }
                    for j in 0..w as isize {
                        let sj = j - dx;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        out[base + (i as usize) * w + j as usize] =
                            xv[base + (si_ as usize) * w + sj as usize];
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::Translate { x, shifts },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(Tensor::scalar(acc), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let mut acc = T::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(acc * T::from_f64(1.0 / n as f64)),
            Op::Mean(x),
            rg,
        )
    }

    /// `sum((a - b)^2)` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "squared_error")?;
        let mut acc = T::ZERO;
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x - y;
            acc += d * d;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(acc), Op::SquaredError { a, b }, rg))
    }

    /// Scalar node whose value and input gradients were computed outside the tape.
    pub fn custom_scalar(&mut self, value: T, grads: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        for (v, g) in &grads {
            if self.shape(*v) != g.shape() {
                return Err(Error::shape(format!(
                    "custom grad {:?} for input {:?}",
                    g.shape(),
                    self.shape(*v)
                )));
            }
        }
        let rg = grads.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Custom(grads), rg))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.value(out).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), T::ONE));
        for id in (0..=out.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, || g.clone());
                self.accum(grads, *b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, || {
                    Tensor::from_fn(g.shape(), |i| gd[i] * bv.data()[i])
                });
                self.accum(grads, *b, || {
                    Tensor::from_fn(g.shape(), |i| gd[i] * av.data()[i])
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, || g.map(|v| v * s));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accum(grads, *a, || g.clone().reshape(&shape).expect("reshape grad"));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, || {
                    // g[m,n] * b^T[n,k]
                    let mut out = vec![T::ZERO; m * k];
                    T::gemm(
                        m, n, k, T::ONE, gd, n as isize, 1, bv, 1, n as isize, T::ZERO,
                        &mut out, k as isize, 1,
                    );
                    Tensor::new(vec![m, k], out).expect("matmul grad")
                });
                self.accum(grads, *b, || {
                    // a^T[k,m] * g[m,n]
                    let mut out = vec![T::ZERO; k * n];
                    T::gemm(
                        k, m, n, T::ONE, av, 1, k as isize, gd, n as isize, 1, T::ZERO,
                        &mut out, n as isize, 1,
                    );
                    Tensor::new(vec![k, n], out).expect("matmul grad")
                });
            }
            Op::AddRowBias(x, b) => {
                self.accum(grads, *x, || g.clone());
                let d = self.shape(*b)[0];
                self.accum(grads, *b, || {
                    let mut out = vec![T::ZERO; d];
                    for (i, &v) in gd.iter().enumerate() {
                        out[i % d] += v;
                    }
                    Tensor::new(vec![d], out).expect("bias grad")
                });
            }
            Op::AddChannelBias(x, b) => {
                self.accum(grads, *x, || g.clone());
                let s = self.shape(*x);
                let (_, c, h, w) = nchw(s);
                let hw = h * w;
                self.accum(grads, *b, || {
                    let mut out = vec![T::ZERO; c];
                    for (p, chunk) in gd.chunks(hw).enumerate() {
                        let mut acc = T::ZERO;
                        for &v in chunk {
                            acc += v;
                        }
                        out[p % c] += acc;
                    }
                    Tensor::new(vec![c], out).expect("bias grad")
                });
            }
            Op::Conv2d { x, w } => self.conv2d_backward(*x, *w, g, grads),
            Op::Upsample2x(x) => {
                let (n, c, h, w) = nchw(self.shape(*x));
                let w2 = 2 * w;
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; n * c * h * w];
                    for p in 0..n * c {
                        let src = &gd[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let dst = &mut out[p * h * w..(p + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..w2 {
                                dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                            }
                        }
                    }
                    Tensor::new(vec![n, c, h, w], out).expect("upsample grad")
                });
            }
            Op::AvgPool2x(x) => {
                let (n, c, h, w) = nchw(self.shape(*x));
                let (h2, w2) = (h / 2, w / 2);
                let q = T::from_f64(0.25);
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; n * c * h * w];
                    for p in 0..n * c {
                        let src = &gd[p * h2 * w2..(p + 1) * h2 * w2];
                        let dst = &mut out[p * h * w..(p + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] = src[(i / 2) * w2 + j / 2] * q;
                            }
                        }
                    }
                    Tensor::new(vec![n, c, h, w], out).expect("pool grad")
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let slope = *slope;
                self.accum(grads, *x, || {
                    Tensor::from_fn(g.shape(), |i| {
                        if xv[i] > T::ZERO {
                            gd[i]
                        } else {
                            gd[i] * slope
                        }
                    })
                });
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                self.accum(grads, *x, || {
                    Tensor::from_fn(g.shape(), |i| gd[i] * (T::ONE - yv[i] * yv[i]))
                });
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let (lo, hi) = (*lo, *hi);
                self.accum(grads, *x, || {
                    Tensor::from_fn(g.shape(), |i| {
                        if xv[i] >= lo && xv[i] <= hi {
                            gd[i]
                        } else {
                            T::ZERO
                        }
                    })
                });
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = nchw(self.shape(*x));
                let hw = h * w;
                let inv_hw = T::from_f64(1.0 / hw as f64);
                let yv = node.value.data();
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; n * c * hw];
                    for p in 0..n * c {
                        let gy = &gd[p * hw..(p + 1) * hw];
                        let y = &yv[p * hw..(p + 1) * hw];
                        let (mut mg, mut mgy) = (T::ZERO, T::ZERO);
                        for (&a, &b) in gy.iter().zip(y) {
                            mg += a;
                            mgy += a * b;
                        }
                        mg *= inv_hw;
                        mgy *= inv_hw;
                        let is = inv_std[p];
                        for ((o, &a), &b) in out[p * hw..(p + 1) * hw].iter_mut().zip(gy).zip(y) {
                            *o = is * (a - mg - b * mgy);
                        }
                    }
                    Tensor::new(vec![n, c, h, w], out).expect("norm grad")
                });
            }
            Op::Modulate { x, gamma, beta } => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let nc = s[0] * s[1];
                let gm = self.value(*gamma).data();
                self.accum(grads, *x, || {
                    Tensor::from_fn(g.shape(), |i| gd[i] * gm[i / hw])
                });
                let xv = self.value(*x).data();
                self.accum(grads, *gamma, || {
                    let out: Vec<T> = (0..nc)
                        .map(|p| {
                            let mut acc = T::ZERO;
                            for i in p * hw..(p + 1) * hw {
                                acc += gd[i] * xv[i];
                            }
                            acc
                        })
                        .collect();
                    Tensor::new(vec![s[0], s[1]], out).expect("gamma grad")
                });
                self.accum(grads, *beta, || {
                    let out: Vec<T> = (0..nc)
                        .map(|p| {
                            let mut acc = T::ZERO;
                            for &v in &gd[p * hw..(p + 1) * hw] {
                                acc += v;
                            }
                            acc
                        })
                        .collect();
                    Tensor::new(vec![s[0], s[1]], out).expect("beta grad")
                });
            }
            Op::NoiseInject { x, strength, noise } => {
                self.accum(grads, *x, || g.clone());
                let (n, c, h, w) = nchw(self.shape(*x));
                let hw = h * w;
                let per_sample = noise.shape()[0] != 1;
                let nd = noise.data();
                self.accum(grads, *strength, || {
                    let mut out = vec![T::ZERO; c];
                    for si in 0..n {
                        let nz = if per_sample { &nd[si * hw..(si + 1) * hw] } else { &nd[..hw] };
                        for (ch, o) in out.iter_mut().enumerate() {
                            let base = (si * c + ch) * hw;
                            for (k, &z) in nz.iter().enumerate() {
                                *o += gd[base + k] * z;
                            }
                        }
                    }
                    Tensor::new(vec![c], out).expect("noise grad")
                });
            }
            Op::BroadcastBatch(x) => {
                let shape = self.shape(*x).to_vec();
                let per: usize = shape.iter().product();
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; per];
                    for chunk in gd.chunks(per) {
                        for (o, &v) in out.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    Tensor::new(shape.clone(), out).expect("broadcast grad")
                });
            }
            Op::SpatialMean(x) => {
                let s = self.shape(*x).to_vec();
                let hw = s[2] * s[3];
                let inv = T::from_f64(1.0 / hw as f64);
                self.accum(grads, *x, || Tensor::from_fn(&s, |i| gd[i / hw] * inv));
            }
            Op::ChannelMeanBroadcast(x) => {
                let s = self.shape(*x).to_vec();
                let (n, c, h, w) = nchw(&s);
                let hw = h * w;
                let inv = T::from_f64(1.0 / c as f64);
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; n * c * hw];
                    for si in 0..n {
                        for p in 0..hw {
                            let mut acc = T::ZERO;
                            for ch in 0..c {
                                acc += gd[(si * c + ch) * hw + p];
                            }
                            acc *= inv;
                            for ch in 0..c {
                                out[(si * c + ch) * hw + p] = acc;
                            }
                        }
                    }
                    Tensor::new(s.clone(), out).expect("channel mean grad")
                });
            }
            Op::SampleMeanBroadcast(x) => {
                let s = self.shape(*x).to_vec();
                let per: usize = s[1..].iter().product();
                let inv = T::from_f64(1.0 / per as f64);
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; gd.len()];
                    for si in 0..s[0] {
                        let mut acc = T::ZERO;
                        for &v in &gd[si * per..(si + 1) * per] {
                            acc += v;
                        }
                        out[si * per..(si + 1) * per].fill(acc * inv);
                    }
                    Tensor::new(s.clone(), out).expect("sample mean grad")
                });
            }
            Op::Translate { x, shifts } => {
                let s = self.shape(*x).to_vec();
                let (n, c, h, w) = nchw(&s);
                self.accum(grads, *x, || {
                    let mut out = vec![T::ZERO; n * c * h * w];
                    for si in 0..n {
                        let (dx, dy) = shifts[si];
                        for ch in 0..c {
                            let base = (si * c + ch) * h * w;
                            for i in 0..h as isize {
                                let si_ = i - dy;
                                if si_ < 0 || si_ >= h as isize {
                                    continue;
                                }
                                for j in 0..w as isize {
                                    let sj = j - dx;
                                    if sj < 0 || sj >= w as isize {
                                        continue;
                                    }
                                    out[base + (si_ as usize) * w + sj as usize] +=
                                        gd[base + (i as usize) * w + j as usize];
                                }
                            }
                        }
                    }
                    Tensor::new(s.clone(), out).expect("translate grad")
                });
            }
            Op::Sum(x) => {
                let s = self.shape(*x).to_vec();
                let g0 = gd[0];
                self.accum(grads, *x, || Tensor::full(&s, g0));
            }
            Op::Mean(x) => {
                let s = self.shape(*x).to_vec();
                let n = self.value(*x).numel();
                let g0 = gd[0] * T::from_f64(1.0 / n as f64);
                self.accum(grads, *x, || Tensor::full(&s, g0));
            }
            Op::SquaredError { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let two_g = gd[0] + gd[0];
                let s = self.shape(*a).to_vec();
                self.accum(grads, *a, || Tensor::from_fn(&s, |i| two_g * (av[i] - bv[i])));
                self.accum(grads, *b, || Tensor::from_fn(&s, |i| two_g * (bv[i] - av[i])));
            }
            Op::Custom(inputs) => {
                let g0 = gd[0];
                for (v, local) in inputs {
                    self.accum(grads, *v, || local.map(|x| x * g0));
                }
            }
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        let contribution = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn conv2d_backward(&self, x: Var, w: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, ci, h, wd) = nchw(&sx);
        let (co, k) = (sw[0], sw[2]);
        let hw = h * wd;
        let kk = ci * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let need_w = self.rg(w);
        let need_x = self.rg(x);
        let mut gw = if need_w { vec![T::ZERO; co * kk] } else { Vec::new() };
        let mut gx = if need_x { vec![T::ZERO; n * ci * hw] } else { Vec::new() };
        let mut cols = if k == 1 { Vec::new() } else { vec![T::ZERO; kk * hw] };
        let mut gcols = if k == 1 || !need_x { Vec::new() } else { vec![T::ZERO; kk * hw] };
        for s in 0..n {
            let gs = &gd[s * co * hw..(s + 1) * co * hw];
            if need_w {
                let xs = &xv[s * ci * hw..(s + 1) * ci * hw];
                let src: &[T] = if k == 1 {
                    xs
                } else {
                    im2col(xs, ci, h, wd, k, &mut cols);
                    &cols
                };
                // gw[co,kk] += g[co,hw] * cols^T[hw,kk]
                T::gemm(
                    co, hw, kk, T::ONE, gs, hw as isize, 1, src, 1, hw as isize, T::ONE,
                    &mut gw, kk as isize, 1,
                );
            }
            if need_x {
                let dst: &mut [T] = if k == 1 {
                    &mut gx[s * ci * hw..(s + 1) * ci * hw]
                } else {
                    &mut gcols
                };
                // dcols[kk,hw] = w^T[kk,co] * g[co,hw]
                T::gemm(
                    kk, co, hw, T::ONE, wv, 1, kk as isize, gs, hw as isize, 1, T::ZERO, dst,
                    hw as isize, 1,
                );
                if k != 1 {
                    col2im(&gcols, ci, h, wd, k, &mut gx[s * ci * hw..(s + 1) * ci * hw]);
                }
            }
        }
        if need_w {
            self.accum(grads, w, || Tensor::new(sw.clone(), gw).expect("conv w grad"));
        }
        if need_x {
            self.accum(grads, x, || Tensor::new(sx.clone(), gx).expect("conv x grad"));
        }
    }
}

fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let src = &x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oi = ki as isize - pad;
                let oj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + oi;
                    let drow = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize {
                        drow.fill(T::ZERO);
                        continue;
                    }
                    let srow = &src[si as usize * w..(si as usize + 1) * w];
                    for (j, d) in drow.iter_mut().enumerate() {
                        let sj = j as isize + oj;
                        *d = if sj < 0 || sj >= w as isize {
                            T::ZERO
                        } else {
                            srow[sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, x: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let dst = &mut x[ch * hw..(ch + 1) * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let oi = ki as isize - pad;
                let oj = kj as isize - pad;
                for i in 0..h {
                    let si = i as isize + oi;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[si as usize * w..(si as usize + 1) * w];
                    for j in 0..w {
                        let sj = j as isize + oj;
                        if sj >= 0 && sj < w as isize {
                            drow[sj as usize] += src[i * w + j];
                        }
                    }
                }
            }
        }
    }
}
