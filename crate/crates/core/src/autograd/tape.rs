use std::ops::Range;

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Add {
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Sub {
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Affine {
        a: Var,
        scale: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        axis: usize,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    /// `out[i] = a[map[i]]`; backs slicing and axis permutation.
    Gather {
        a: Var,
        map: Vec<usize>,
    },
    Reshape(Var),
    Mean {
        a: Var,
        axis: usize,
    },
    Sum(Var),
    MseLoss {
        pred: Var,
        target: Var,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it participates.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

fn check_map(a: &[usize], out: &[usize]) -> Option<Vec<usize>> {
    (a != out).then(|| kernels::broadcast_index_map(a, out))
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        Some(m) => m[i],
        None => i,
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records `t` as an input; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Records a differentiable input regardless of the tensor's flag.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    /// `[.., m, k] × [k, n]` (shared right operand) or `[.., m, k] × [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let lead = &sa[..sa.len() - 2];
        let shared_rhs = sb.len() == 2;
        if k != kb || (!shared_rhs && &sb[..sb.len() - 2] != lead) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if shared_rhs {
            kernels::gemm_nn(batch * m, k, n, av, bv, &mut out);
        } else {
            for bi in 0..batch {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &av[bi * m * k..],
                    &bv[bi * k * n..],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            shape,
            out,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            needs,
        ))
    }

    /// NCHW convolution (cross-correlation) with kernel `[out, in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (si, sk) = (self.shape(input).to_vec(), self.shape(kernel).to_vec());
        if si.len() != 4 || sk.len() != 4 || si[1] != sk[1] || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::shape("conv2d", &si, &sk));
        }
        let (h_pad, w_pad) = (si[2] + 2 * padding.0, si[3] + 2 * padding.1);
        if h_pad < sk[2] || w_pad < sk[3] {
            return Err(Error::shape("conv2d", &si, &sk));
        }
        let geom = ConvGeom {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            o: sk[0],
            kh: sk[2],
            kw: sk[3],
            sh: stride.0,
            sw: stride.1,
            ph: padding.0,
            pw: padding.1,
            oh: (h_pad - sk[2]) / stride.0 + 1,
            ow: (w_pad - sk[3]) / stride.1 + 1,
        };
        let (pl, p) = (geom.patch_len(), geom.out_pixels());
        let img_len = geom.c * geom.h * geom.w;
        let mut cols = vec![0.0; geom.n * pl * p];
        let mut out = vec![0.0; geom.n * geom.o * p];
        let (iv, kv) = (&self.nodes[input.0].value, &self.nodes[kernel.0].value);
        for b in 0..geom.n {
            let col = &mut cols[b * pl * p..(b + 1) * pl * p];
            kernels::im2col(&geom, &iv[b * img_len..(b + 1) * img_len], col);
            kernels::gemm_nn(
                geom.o,
                pl,
                p,
                kv,
                col,
                &mut out[b * geom.o * p..(b + 1) * geom.o * p],
            );
        }
        let needs = self.needs(input) || self.needs(kernel);
        Ok(self.push(
            vec![geom.n, geom.o, geom.oh, geom.ow],
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            needs,
        ))
    }

    /// Non-overlapping max pooling over `[N, C, H, W]`; trailing rows/cols that
    /// do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let (kh, kw) = window;
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] < kh || s[3] < kw {
            return Err(Error::shape("max_pool2d", &s, &[kh, kw]));
        }
        let (oh, ow) = (s[2] / kh, s[3] / kw);
        let planes = s[0] * s[1];
        let v = &self.nodes[input.0].value;
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for plane in 0..planes {
            let base = plane * s[2] * s[3];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * kh * s[3] + ox * kw;
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let idx = base + (oy * kh + dy) * s[3] + ox * kw + dx;
                            if v[idx] > v[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(v[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(
            vec![s[0], s[1], oh, ow],
            out,
            Op::MaxPool2d { input, argmax },
            needs,
        ))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = kernels::broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        Ok((out.clone(), check_map(sa, &out), check_map(sb, &out)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let (shape, a_map, b_map) = self.broadcast_binary(name, a, b)?;
        let numel = shape.iter().product();
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = (0..numel)
            .map(|i| f(av[at(&a_map, i)], bv[at(&b_map, i)]))
            .collect();
        Ok((shape, out, a_map, b_map))
    }

    /// Elementwise sum with right-aligned broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, a_map, b_map) = self.binary("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add { a, b, a_map, b_map }, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, a_map, b_map) = self.binary("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Sub { a, b, a_map, b_map }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, a_map, b_map) = self.binary("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Mul { a, b, a_map, b_map }, needs))
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(a).iter().map(|&x| scale * x + shift).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.needs(a));
        self.push(shape, out, Op::Affine { a, scale }, needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, needs) = (self.shape(a).to_vec(), self.needs(a));
        self.push(shape, out, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| out[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (out[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= total;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::Softmax { a, axis }, needs))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", &shape, &[axis]));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let mut out = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|j| out[base + j * inner]).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|j| (out[base + j * inner] - mean).powi(2))
                    .sum::<f64>()
                    / len as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..len {
                    out[base + j * inner] = (out[base + j * inner] - mean) * is;
                }
                inv_std.push(is);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::LayerNorm { a, axis, inv_std }, needs))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .map(|&v| self.shape(v).to_vec())
            .ok_or_else(|| Error::domain("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(Error::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Sub-block `a[r0, r1, ...]`, one range per axis.
    pub fn slice(&mut self, a: Var, ranges: &[Range<usize>]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if ranges.len() != shape.len()
            || ranges
                .iter()
                .zip(&shape)
                .any(|(r, &d)| r.start >= r.end || r.end > d)
        {
            let flat: Vec<usize> = ranges.iter().flat_map(|r| [r.start, r.end]).collect();
            return Err(Error::shape("slice", &shape, &flat));
        }
        let strides = kernels::row_major_strides(&shape);
        let base = ranges.iter().zip(&strides).map(|(r, s)| r.start * s).sum();
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.len()).collect();
        let map = kernels::strided_index_map(&out_shape, &strides, base);
        Ok(self.gather(a, out_shape, map))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::shape("permute", &shape, axes));
        }
        let in_strides = kernels::row_major_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let map = kernels::strided_index_map(&out_shape, &strides, 0);
        Ok(self.gather(a, out_shape, map))
    }

    fn gather(&mut self, a: Var, shape: Vec<usize>, map: Vec<usize>) -> Var {
        let v = self.value(a);
        let out = map.iter().map(|&i| v[i]).collect();
        let needs = self.needs(a);
        self.push(shape, out, Op::Gather { a, map }, needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a);
        if shape.iter().product::<usize>() != from.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::shape("reshape", from, shape));
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), needs))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean", &shape, &[axis]));
        }
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let v = self.value(a);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &v[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        out.iter_mut().for_each(|x| *x /= len as f64);
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(a);
        Ok(self.push(out_shape, out, Op::Mean { a, axis }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![1], vec![total], Op::Sum(a), needs)
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(Error::shape("mse_loss", sp, st));
        }
        let (pv, tv) = (self.value(pred), self.value(target));
        let mse = pv
            .iter()
            .zip(tv)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / pv.len() as f64;
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(vec![1], vec![mse], Op::MseLoss { pred, target }, needs))
    }

    /// Backpropagates from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::domain(format!("loss {loss:?} is not on this tape")))?;
        if root.value.len() != 1 {
            return Err(Error::domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        if root.needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let node = &nodes[i];
            propagate(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gradient slot for `v`, allocated on first use; `None` if `v` is not differentiated.
fn slot<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn propagate(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            shared_rhs,
        } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                if *shared_rhs {
                    kernels::gemm_nt(batch * m, *n, *k, g, bv, ga);
                } else {
                    for bi in 0..*batch {
                        kernels::gemm_nt(
                            *m,
                            *n,
                            *k,
                            &g[bi * m * n..],
                            &bv[bi * k * n..],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                if *shared_rhs {
                    kernels::gemm_tn(batch * m, *k, *n, av, g, gb);
                } else {
                    for bi in 0..*batch {
                        kernels::gemm_tn(
                            *m,
                            *k,
                            *n,
                            &av[bi * m * k..],
                            &g[bi * m * n..],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
            }
        }
        Op::Conv2d {
            input,
            kernel,
            geom,
            cols,
        } => {
            let (pl, p) = (geom.patch_len(), geom.out_pixels());
            let out_len = geom.o * p;
            if let Some(gk) = slot(nodes, grads, *kernel) {
                for b in 0..geom.n {
                    kernels::gemm_nt(geom.o, p, pl, &g[b * out_len..], &cols[b * pl * p..], gk);
                }
            }
            let kv = val(*kernel);
            if let Some(gi) = slot(nodes, grads, *input) {
                let img_len = geom.c * geom.h * geom.w;
                let mut dcols = vec![0.0; pl * p];
                for b in 0..geom.n {
                    dcols.iter_mut().for_each(|x| *x = 0.0);
                    kernels::gemm_tn(
                        geom.o,
                        pl,
                        p,
                        kv,
                        &g[b * out_len..(b + 1) * out_len],
                        &mut dcols,
                    );
                    kernels::col2im(geom, &dcols, &mut gi[b * img_len..(b + 1) * img_len]);
                }
            }
        }
        Op::MaxPool2d { input, argmax } => {
            if let Some(gi) = slot(nodes, grads, *input) {
                for (&src, &gv) in argmax.iter().zip(g) {
                    gi[src] += gv;
                }
            }
        }
        Op::Add { a, b, a_map, b_map } | Op::Sub { a, b, a_map, b_map } => {
            let sign = if matches!(node.op, Op::Sub { .. }) {
                -1.0
            } else {
                1.0
            };
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &gv) in g.iter().enumerate() {
                    ga[at(a_map, i)] += gv;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &gv) in g.iter().enumerate() {
                    gb[at(b_map, i)] += sign * gv;
                }
            }
        }
        Op::Mul { a, b, a_map, b_map } => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for (i, &gv) in g.iter().enumerate() {
                    ga[at(a_map, i)] += gv * bv[at(b_map, i)];
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (i, &gv) in g.iter().enumerate() {
                    gb[at(b_map, i)] += gv * av[at(a_map, i)];
                }
            }
        }
        Op::Affine { a, scale } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += scale * gv;
                }
            }
        }
        Op::Relu(a) | Op::Sigmoid(a) | Op::Tanh(a) => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, *a) {
                let deriv: fn(f64) -> f64 = match node.op {
                    Op::Relu(_) => |y| if y > 0.0 { 1.0 } else { 0.0 },
                    Op::Sigmoid(_) => |y| y * (1.0 - y),
                    _ => |y| 1.0 - y * y,
                };
                for ((d, &gv), &yv) in ga.iter_mut().zip(g).zip(y) {
                    *d += gv * deriv(yv);
                }
            }
        }
        Op::Softmax { a, axis } => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, *a) {
                let (outer, len, inner) = kernels::split_axis(&node.shape, *axis);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dotp: f64 = (0..len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] += y[idx] * (g[idx] - dotp);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { a, axis, inv_std } => {
            let y = &node.value;
            if let Some(ga) = slot(nodes, grads, *a) {
                let (outer, len, inner) = kernels::split_axis(&node.shape, *axis);
                let lf = len as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let is = inv_std[o * inner + i];
                        let mut mean_g = 0.0;
                        let mut mean_gy = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            mean_g += g[idx];
                            mean_gy += g[idx] * y[idx];
                        }
                        mean_g /= lf;
                        mean_gy /= lf;
                        for j in 0..len {
                            let idx = base + j * inner;
                            ga[idx] += is * (g[idx] - mean_g - y[idx] * mean_gy);
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = kernels::split_axis(&node.shape, *axis);
            let mut offset = 0;
            let row = node.shape[*axis] * inner;
            for &v in inputs {
                let chunk = nodes[v.0].shape[*axis] * inner;
                if let Some(gv) = slot(nodes, grads, v) {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        for (d, &s) in gv[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::Gather { a, map } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (&src, &gv) in map.iter().zip(g) {
                    ga[src] += gv;
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for (d, &gv) in ga.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Mean { a, axis } => {
            if let Some(ga) = slot(nodes, grads, *a) {
                let (outer, len, inner) = kernels::split_axis(&nodes[a.0].shape, *axis);
                let scale = 1.0 / len as f64;
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut ga[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &gv) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += gv * scale;
                        }
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::MseLoss { pred, target } => {
            let (pv, tv) = (val(*pred), val(*target));
            let scale = 2.0 * g[0] / pv.len() as f64;
            if let Some(gp) = slot(nodes, grads, *pred) {
                for ((d, &p), &t) in gp.iter_mut().zip(pv).zip(tv) {
                    *d += scale * (p - t);
                }
            }
            if let Some(gt) = slot(nodes, grads, *target) {
                for ((d, &p), &t) in gt.iter_mut().zip(pv).zip(tv) {
                    *d -= scale * (p - t);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_conv_kernel_is_identity() {
        let mut tape = Tape::new();
        let img = Tensor::from_fn(&[2, 1, 5, 4], |i| (i as f64 * 0.3).sin());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let x = tape.constant(&img);
        let kv = tape.constant(&t(&[1, 1, 3, 3], &k));
        let y = tape.conv2d(x, kv, (1, 1), (1, 1)).unwrap();
        assert_eq!(tape.shape(y), img.shape());
        assert_eq!(tape.value(y), img.data());
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let eye = tape.constant(&t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let xs = Tensor::from_fn(&[3, 4], |i| i as f64 - 5.5);
        let x = tape.constant(&xs);
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y), xs.data());
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[4, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
        assert!(tape.add(a, b).is_err());
        assert!(tape.mse_loss(a, b).is_err());
        assert!(tape.concat(&[a, b], 0).is_err());
        assert!(tape.slice(a, &[0..3, 0..1]).is_err());
        assert!(tape.permute(a, &[0, 0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(&t(&[2], &[1.0, 0.0]));
        let z = tape.constant(&t(&[2], &[0.0, 0.0]));
        let l = tape.mse_loss(p, z).unwrap();
        assert_eq!(tape.value(l), &[0.5]);
        let l = tape.mse_loss(p, p).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        let a = tape.constant(&t(&[1], &[2.0]));
        let b = tape.constant(&t(&[1], &[-2.0]));
        let l = tape.mse_loss(a, b).unwrap();
        assert_eq!(tape.value(l), &[16.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x), Some(&[6.0][..]));
    }

    #[test]
    fn mse_gradient_of_single_weight() {
        let mut tape = Tape::new();
        let w = tape.variable(&Tensor::scalar(1.0));
        let zero = tape.constant(&Tensor::scalar(0.0));
        let l = tape.mse_loss(w, zero).unwrap();
        let grads = tape.backward(l).unwrap();
        assert_eq!(grads.get(w), Some(&[2.0][..]));
        assert_eq!(grads.get(zero), None);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::zeros(&[2]));
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_visits_nodes_once_in_reverse() {
        let mut tape = Tape::new();
        let x = tape.variable(&Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1));
        let w = tape.variable(&Tensor::from_fn(&[3, 2], |i| 1.0 - i as f64 * 0.2));
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h);
        let h2 = tape.mul(h, h).unwrap();
        let s = tape.sum(h2);
        let grads = tape.backward(s).unwrap();
        let order = grads.visit_order();
        assert!(order.windows(2).all(|w| w[0] > w[1]));
        let mut uniq = order.to_vec();
        uniq.dedup();
        assert_eq!(uniq.len(), order.len());
        assert_eq!(order.len(), 6);
    }

    #[test]
    fn constants_record_no_backward_rule() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::filled(&[2], 1.0));
        let b = tape.relu(a);
        assert!(matches!(tape.nodes[b.0].op, Op::Leaf));
        assert!(!tape.nodes[b.0].needs_grad);
    }
}
