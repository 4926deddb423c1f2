//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every intermediate value together with the op that
//! produced it. [`Graph::backward`] walks the tape in reverse and returns a
//! gradient for every node that depends on a parameter.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, GroupNormStats};
use crate::params::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    /// `v` broadcast over the trailing axes of `x`.
    BroadcastAdd {
        x: Var,
        v: Var,
    },
    BroadcastMul {
        x: Var,
        v: Var,
    },
    Silu(Var),
    Sigmoid(Var),
    Square(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: GroupNormStats<T>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    PixelUnshuffle {
        x: Var,
        r: usize,
    },
    PixelShuffle {
        x: Var,
        r: usize,
    },
    RepeatRows {
        x: Var,
        k: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    param_names: Vec<(Var, String)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            param_names: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            Op::Input => false,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, &[])
    }

    /// Binds a named parameter; repeated lookups of the same name share one node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name:?}")))?
            .clone();
        let v = if store.is_frozen() {
            self.push(t, Op::Input, &[])
        } else {
            self.push(t, Op::Param, &[])
        };
        self.params.insert(name.to_string(), v);
        self.param_names.push((v, name.to_string()));
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::dim(format!("conv2d: input {xs:?}, kernel {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d: input has {} channels but kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!("conv2d: bias shape {:?}", self.shape(b))));
            }
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::dim("conv2d: kernel larger than padded input"));
        }
        let geom = ConvGeom {
            n: xs[0],
            c_in: xs[1],
            h: xs[2],
            w: xs[3],
            c_out: ws[0],
            k: ws[2],
            stride,
            pad,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let t = Tensor::from_vec([geom.n, geom.c_out, geom.h_out(), geom.w_out()], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, &parents))
    }

    /// `x: [N, D]`, `w: [O, D]`, `b: [O]` → `[N, O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, d, o) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * o];
        let mut beta = T::zero();
        if let Some(b) = b {
            let bv = self.value(b);
            bv.expect_shape(&[o], "linear bias")?;
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
            beta = T::one();
        }
        T::gemm(n, d, o, T::one(), self.value(x).data(), false, self.value(w).data(), true, beta, &mut out);
        let t = Tensor::from_vec([n, o], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(t, Op::Linear { x, w, b }, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).add(self.value(b))?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).sub(self.value(b))?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let t = self.value(a).scale(k);
        self.push(t, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.push(t, Op::AddConst(a), &[a])
    }

    fn broadcast_inner(&self, x: Var, v: Var, what: &str) -> Result<usize> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if vs.len() > xs.len() || xs[..vs.len()] != *vs {
            return Err(Error::dim(format!("{what}: cannot broadcast {vs:?} over {xs:?}")));
        }
        Ok(numel(&xs[vs.len()..]))
    }

    /// Adds `v` to `x`, broadcasting over the axes of `x` that follow `v`'s shape.
    pub fn broadcast_add(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.broadcast_inner(x, v, "broadcast_add")?;
        let vv = self.value(v).data();
        let mut t = self.value(x).clone();
        for (i, o) in t.data_mut().iter_mut().enumerate() {
            *o += vv[i / inner];
        }
        Ok(self.push(t, Op::BroadcastAdd { x, v }, &[x, v]))
    }

    pub fn broadcast_mul(&mut self, x: Var, v: Var) -> Result<Var> {
        let inner = self.broadcast_inner(x, v, "broadcast_mul")?;
        let vv = self.value(v).data();
        let mut t = self.value(x).clone();
        for (i, o) in t.data_mut().iter_mut().enumerate() {
            *o *= vv[i / inner];
        }
        Ok(self.push(t, Op::BroadcastMul { x, v }, &[x, v]))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::silu);
        self.push(t, Op::Silu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(kernels::sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        self.push(t, Op::Square(a), &[a])
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("group_norm: input {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim(format!("group_norm: {groups} groups do not divide {c} channels")));
        }
        self.value(gamma).expect_shape(&[c], "group_norm gamma")?;
        self.value(beta).expect_shape(&[c], "group_norm beta")?;
        let hw = numel(&xs[2..]);
        let (out, stats) = kernels::group_norm_forward(
            self.value(x).data(),
            n,
            c,
            hw,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let t = Tensor::from_vec(xs, out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// `[N, C, ...] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim(format!("global_avg_pool: input {xs:?}")));
        }
        let inner = numel(&xs[2..]);
        let denom = T::from_usize(inner).unwrap();
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() / denom)
            .collect();
        let t = Tensor::from_vec([xs[0], xs[1]], out)?;
        Ok(self.push(t, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::dim(format!("concat_channels: {sa:?} and {sb:?}")));
        }
        let inner = numel(&sa[2..]);
        let (la, lb) = (sa[1] * inner, sb[1] * inner);
        let mut out = Vec::with_capacity(sa[0] * (la + lb));
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for n in 0..sa[0] {
            out.extend_from_slice(&da[n * la..(n + 1) * la]);
            out.extend_from_slice(&db[n * lb..(n + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::ConcatChannels(a, b), &[a, b]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!("upsample: input {s:?}")));
        }
        let out = kernels::upsample_nearest(self.value(x).data(), s[0] * s[1], s[2], s[3], factor);
        let t = Tensor::from_vec([s[0], s[1], s[2] * factor, s[3] * factor], out)?;
        Ok(self.push(t, Op::Upsample { x, factor }, &[x]))
    }

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % r != 0 || s[3] % r != 0 {
            return Err(Error::dim(format!("pixel_unshuffle by {r}: input {s:?}")));
        }
        let out = kernels::pixel_unshuffle(self.value(x).data(), s[0], s[1], s[2], s[3], r);
        let t = Tensor::from_vec([s[0], s[1] * r * r, s[2] / r, s[3] / r], out)?;
        Ok(self.push(t, Op::PixelUnshuffle { x, r }, &[x]))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[1] % (r * r) != 0 {
            return Err(Error::dim(format!("pixel_shuffle by {r}: input {s:?}")));
        }
        let c = s[1] / (r * r);
        let out = kernels::pixel_shuffle(self.value(x).data(), s[0], c, s[2], s[3], r);
        let t = Tensor::from_vec([s[0], c, s[2] * r, s[3] * r], out)?;
        Ok(self.push(t, Op::PixelShuffle { x, r }, &[x]))
    }

    /// Repeats every row along axis 0 `k` times consecutively: `[N, ...] -> [N*k, ...]`.
    pub fn repeat_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let v = self.value(x);
        if v.ndim() == 0 {
            return Err(Error::dim("repeat_rows on a scalar"));
        }
        let row = v.row_len();
        let mut out = Vec::with_capacity(v.len() * k);
        for r in v.data().chunks(row.max(1)) {
            for _ in 0..k {
                out.extend_from_slice(r);
            }
        }
        let mut shape = v.shape().to_vec();
        shape[0] *= k;
        let t = Tensor::from_vec(shape, out)?;
        Ok(self.push(t, Op::RepeatRows { x, k }, &[x]))
    }

    /// Row lookup into an embedding table `[V, D]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.ndim() != 2 {
            return Err(Error::dim(format!("gather_rows: table {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.dim(0), tv.dim(1));
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= vocab {
                return Err(Error::Config(format!("embedding index {i} out of range 0..{vocab}")));
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::from_vec([idx.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).mean());
        self.push(t, Op::Mean(x), &[x])
    }

    /// Mean over all elements of `(pred - target)^2`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let q = self.value(target);
        p.same_shape(q, "mse")?;
        let n = T::from_usize(p.len().max(1)).unwrap();
        let s: T = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let t = Tensor::scalar(s / n);
        Ok(self.push(t, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim(format!("backward from non-scalar {:?}", lv.shape())));
        }
        if !lv.all_finite() {
            return Err(Error::Numeric(format!("non-finite loss {}", lv.data()[0])));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.param_names.clone(),
        })
    }

    fn backprop_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += *x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    geom,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gy.data(),
                    needs(*x),
                );
                if let Some(gx) = gx {
                    acc(*x, like(*x, gx)?);
                }
                acc(*w, like(*w, gw)?);
                if let Some(b) = b {
                    acc(*b, like(*b, gb)?);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d, o) = (xs[0], xs[1], self.shape(*w)[0]);
                if needs(*x) {
                    let mut gx = vec![T::zero(); n * d];
                    T::gemm(n, o, d, T::one(), gy.data(), false, self.value(*w).data(), false, T::zero(), &mut gx);
                    acc(*x, like(*x, gx)?);
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); o * d];
                    T::gemm(o, n, d, T::one(), gy.data(), true, self.value(*x).data(), false, T::zero(), &mut gw);
                    acc(*w, like(*w, gw)?);
                }
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); o];
                    for row in gy.data().chunks(o) {
                        for (g, r) in gb.iter_mut().zip(row) {
                            *g += *r;
                        }
                    }
                    acc(*b, like(*b, gb)?);
                }
            }
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.scale(-T::one()));
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, gy.zip_map(self.value(*b), |g, q| g * q)?);
                }
                if needs(*b) {
                    acc(*b, gy.zip_map(self.value(*a), |g, p| g * p)?);
                }
            }
            Op::Scale(a, k) => acc(*a, gy.scale(*k)),
            Op::AddConst(a) => acc(*a, gy.clone()),
            Op::BroadcastAdd { x, v } => {
                acc(*x, gy.clone());
                if needs(*v) {
                    let vl = self.value(*v).len();
                    let inner = gy.len() / vl.max(1);
                    let gv: Vec<T> = gy.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
                    acc(*v, like(*v, gv)?);
                }
            }
            Op::BroadcastMul { x, v } => {
                let vv = self.value(*v).data();
                let inner = gy.len() / vv.len().max(1);
                if needs(*x) {
                    let gx: Vec<T> = gy.data().iter().enumerate().map(|(i, &g)| g * vv[i / inner]).collect();
                    acc(*x, like(*x, gx)?);
                }
                if needs(*v) {
                    let xv = self.value(*x).data();
                    let gv: Vec<T> = gy
                        .data()
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(g, xx)| g.iter().zip(xx).map(|(&a, &b)| a * b).sum())
                        .collect();
                    acc(*v, like(*v, gv)?);
                }
            }
            Op::Silu(a) => acc(*a, gy.zip_map(self.value(*a), |g, x| g * kernels::silu_grad(x))?),
            Op::Sigmoid(a) => {
                acc(*a, gy.zip_map(&node.value, |g, s| g * s * (T::one() - s))?);
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                acc(*a, gy.zip_map(self.value(*a), |g, x| two * g * x)?);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xs = self.shape(*x);
                let (gx, gg, gb) = kernels::group_norm_backward(
                    self.value(*x).data(),
                    gy.data(),
                    xs[0],
                    xs[1],
                    numel(&xs[2..]),
                    *groups,
                    self.value(*gamma).data(),
                    stats,
                );
                acc(*x, like(*x, gx)?);
                acc(*gamma, like(*gamma, gg)?);
                acc(*beta, like(*beta, gb)?);
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let inner = numel(&xs[2..]);
                let denom = T::from_usize(inner).unwrap();
                let mut gx = Vec::with_capacity(numel(xs));
                for &g in gy.data() {
                    gx.extend(std::iter::repeat(g / denom).take(inner));
                }
                acc(*x, like(*x, gx)?);
            }
            Op::Reshape(x) => acc(*x, like(*x, gy.data().to_vec())?),
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let inner = numel(&sa[2..]);
                let (la, lb) = (sa[1] * inner, sb[1] * inner);
                let mut ga = Vec::with_capacity(sa[0] * la);
                let mut gb = Vec::with_capacity(sa[0] * lb);
                for chunk in gy.data().chunks(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                acc(*a, like(*a, ga)?);
                acc(*b, like(*b, gb)?);
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x);
                let gx = kernels::upsample_nearest_backward(gy.data(), s[0] * s[1], s[2], s[3], *factor);
                acc(*x, like(*x, gx)?);
            }
            Op::PixelUnshuffle { x, r } => {
                let s = self.shape(*x);
                let gx = kernels::pixel_shuffle(gy.data(), s[0], s[1], s[2] / r, s[3] / r, *r);
                acc(*x, like(*x, gx)?);
            }
            Op::PixelShuffle { x, r } => {
                let s = node.value.shape();
                let gx = kernels::pixel_unshuffle(gy.data(), s[0], s[1], s[2], s[3], *r);
                acc(*x, like(*x, gx)?);
            }
            Op::RepeatRows { x, k } => {
                let row = self.value(*x).row_len().max(1);
                let rows = self.shape(*x)[0];
                let mut gx = vec![T::zero(); rows * row];
                for (j, chunk) in gy.data().chunks(row).enumerate() {
                    let dst = &mut gx[(j / k) * row..(j / k + 1) * row];
                    for (d, g) in dst.iter_mut().zip(chunk) {
                        *d += *g;
                    }
                }
                acc(*x, like(*x, gx)?);
            }
            Op::Gather { table, idx } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).len()];
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        gt[i * d + c] += gy.data()[j * d + c];
                    }
                }
                acc(*table, like(*table, gt)?);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                acc(*x, Tensor::full(self.shape(*x).to_vec(), g));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).len().max(1)).unwrap();
                acc(*x, Tensor::full(self.shape(*x).to_vec(), gy.data()[0] / n));
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let q = self.value(*target);
                let n = T::from_usize(p.len().max(1)).unwrap();
                let k = (T::one() + T::one()) * gy.data()[0] / n;
                let diff = p.zip_map(q, |a, b| k * (a - b))?;
                if needs(*target) {
                    acc(*target, diff.scale(-T::one()));
                }
                acc(*pred, diff);
            }
        }
        Ok(())
    }
}

/// Result of a reverse sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, String)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every bound parameter, by name. Parameters the loss does not
    /// depend on are reported as absent.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.params.iter().map(|(v, name)| (name.as_str(), self.wrt(*v)))
    }
}
