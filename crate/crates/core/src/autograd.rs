//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation applied during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns the
//! gradient of that scalar with respect to every parameter leaf that took part.
//!
//! Spatial tensors use `[N, C, H, W]` layout. Matrices are `[rows, cols]`.

use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{matmul_into, Real, Tensor};

/// Index of a parameter inside a [`crate::params::ParamStore`].
pub type ParamId = usize;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear resampling operator shared by bilinear crops, upsampling and area resizing.
///
/// Output position `p` of group `g` is `sum_t w_t * x[idx_t]` over the taps of `(g, p)`,
/// applied independently to every channel.
#[derive(Clone, Debug)]
pub struct Taps<T> {
    pub groups: usize,
    pub positions: usize,
    pub in_spatial: usize,
    offsets: Vec<u32>,
    idx: Vec<u32>,
    w: Vec<T>,
}

impl<T: Real> Taps<T> {
    pub fn builder(in_spatial: usize) -> TapsBuilder<T> {
        TapsBuilder {
            in_spatial,
            offsets: vec![0],
            idx: Vec::new(),
            w: Vec::new(),
        }
    }

    /// Taps of output position `o` (flattened over groups and positions).
    pub fn taps(&self, o: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let (s, e) = (self.offsets[o] as usize, self.offsets[o + 1] as usize);
        self.idx[s..e]
            .iter()
            .zip(&self.w[s..e])
            .map(|(&i, &w)| (i as usize, w))
    }

    /// Applies the operator to a single-channel plane.
    pub fn apply_plane(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_spatial);
        (0..self.groups * self.positions)
            .map(|o| self.taps(o).map(|(i, w)| w * x[i]).sum())
            .collect()
    }
}

pub struct TapsBuilder<T> {
    in_spatial: usize,
    offsets: Vec<u32>,
    idx: Vec<u32>,
    w: Vec<T>,
}

impl<T: Real> TapsBuilder<T> {
    pub fn push(&mut self, taps: &[(usize, T)]) {
        for &(i, w) in taps {
            debug_assert!(i < self.in_spatial);
            self.idx.push(i as u32);
            self.w.push(w);
        }
        self.offsets.push(self.idx.len() as u32);
    }

    pub fn finish(self, groups: usize, positions: usize) -> Taps<T> {
        assert_eq!(self.offsets.len() - 1, groups * positions);
        Taps {
            groups,
            positions,
            in_spatial: self.in_spatial,
            offsets: self.offsets,
            idx: self.idx,
            w: self.w,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn same(dilation: usize, stride: usize) -> Self {
        Self {
            stride,
            pad: dilation,
            dilation,
        }
    }

    pub fn pointwise() -> Self {
        Self {
            stride: 1,
            pad: 0,
            dilation: 1,
        }
    }

    pub fn out_dim(&self, input: usize, k: usize) -> usize {
        let eff = self.dilation * (k - 1) + 1;
        (input + 2 * self.pad - eff) / self.stride + 1
    }
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Option<Vec<T>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Resample {
        x: Var,
        taps: Rc<Taps<T>>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    MulSpatial {
        x: Var,
        mask: Rc<Vec<T>>,
    },
    MulConst {
        x: Var,
        c: Rc<Vec<T>>,
    },
    Reshape(Var),
    Transpose(Var),
    Concat {
        parts: Vec<(Var, usize)>,
    },
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    MaskedSoftmax {
        x: Var,
    },
    SoftmaxXent {
        logits: Var,
        target: Rc<Vec<T>>,
        probs: Vec<T>,
    },
    BceLogits {
        x: Var,
        target: Rc<Vec<T>>,
        weight: Rc<Vec<T>>,
        norm: T,
    },
    SmoothL1 {
        x: Var,
        target: Rc<Vec<T>>,
        weight: Rc<Vec<T>>,
        norm: T,
        beta: T,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    pub by_param: HashMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn global_norm(&self) -> f64 {
        let mut ids: Vec<_> = self.by_param.keys().copied().collect();
        ids.sort_unstable();
        ids.iter()
            .map(|id| self.by_param[id].sum_squares())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.by_param.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Adds `other` into `self`.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.by_param {
            match self.by_param.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.by_param.insert(id, g);
                }
            }
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars pointing past `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.params.retain(|_, v| v.0 < len);
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

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.len(), 1);
        t.at(0)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Registers a parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    /// Copies the value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        Tensor::new(
            ta.shape(),
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    /// Sum of several same-shaped nodes; `None` for an empty list.
    pub fn add_all(&mut self, vars: &[Var]) -> Option<Var> {
        let mut it = vars.iter();
        let first = *it.next()?;
        Some(it.fold(first, |acc, &v| self.add(acc, v)))
    }

    fn row_dims(&self, a: Var, b: Var) -> (usize, usize) {
        let n = self.value(b).len();
        let total = self.value(a).len();
        assert!(n > 0 && total.is_multiple_of(n), "row broadcast mismatch");
        (total / n, n)
    }

    /// `a[.., j] + b[j]`, broadcasting `b` over leading dims of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, n) = self.row_dims(a, b);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddRow(a, b), rg)
    }

    /// `a[.., j] * b[j]`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (_, n) = self.row_dims(a, b);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= bv[i % n];
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MulRow(a, b), rg)
    }

    fn mat_dims(shape: &[usize]) -> (usize, usize) {
        match shape {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => panic!("expected a matrix, got {shape:?}"),
        }
    }

    /// `op(a) * op(b)` for 2-D operands.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (ar, ac) = Self::mat_dims(self.shape(a));
        let (br, bc) = Self::mat_dims(self.shape(b));
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        matmul_into(
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            m,
            k,
            n,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(&[m, n], out),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x W^T + b` with `W: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_t(x, false, w, true);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    /// 2-D convolution. `x: [N, C, H, W]`, `w: [Co, C, k, k]`, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, c, h, wd] = xs[..] else {
            panic!("conv2d input must be 4-D, got {xs:?}")
        };
        let [co, ci, k, k2] = ws[..] else {
            panic!("conv2d weight must be 4-D, got {ws:?}")
        };
        assert_eq!(ci, c, "conv2d channel mismatch");
        assert_eq!(k, k2);
        let (ho, wo) = (spec.out_dim(h, k), spec.out_dim(wd, k));
        let ckk = c * k * k;
        let sp = ho * wo;
        let pointwise = k == 1 && spec.stride == 1 && spec.pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * co * sp];
        let mut cols_all = if pointwise {
            None
        } else {
            Some(vec![T::zero(); n * ckk * sp])
        };
        for bi in 0..n {
            let xin = &xv[bi * c * h * wd..(bi + 1) * c * h * wd];
            let o = &mut out[bi * co * sp..(bi + 1) * co * sp];
            match cols_all.as_mut() {
                None => matmul_into(wv, false, xin, false, co, ckk, sp, o, false),
                Some(cols_all) => {
                    let cols = &mut cols_all[bi * ckk * sp..(bi + 1) * ckk * sp];
                    im2col(xin, c, h, wd, k, spec, ho, wo, cols);
                    matmul_into(wv, false, cols, false, co, ckk, sp, o, false);
                }
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for bi in 0..n {
                for oc in 0..co {
                    let bb = bv[oc];
                    out[(bi * co + oc) * sp..(bi * co + oc + 1) * sp]
                        .iter_mut()
                        .for_each(|v| *v += bb);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::new(&[n, co, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols: cols_all,
            },
            rg,
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sigmoid());
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Applies `taps` to every channel of `x`.
    ///
    /// `x` is viewed as `[C, in_spatial]`; the result has shape
    /// `[groups, C, positions]` reshaped to `out_shape`.
    pub fn resample(&mut self, x: Var, taps: Rc<Taps<T>>, out_shape: &[usize]) -> Var {
        let xv = self.value(x).data();
        let s = taps.in_spatial;
        assert_eq!(
            xv.len() % s,
            0,
            "resample input not divisible by spatial size"
        );
        let c = xv.len() / s;
        let (g, p) = (taps.groups, taps.positions);
        assert_eq!(out_shape.iter().product::<usize>(), g * c * p);
        let mut out = vec![T::zero(); g * c * p];
        for gi in 0..g {
            for pi in 0..p {
                let o = gi * p + pi;
                let (st, en) = (taps.offsets[o] as usize, taps.offsets[o + 1] as usize);
                for t in st..en {
                    let (i, w) = (taps.idx[t] as usize, taps.w[t]);
                    for ci in 0..c {
                        out[(gi * c + ci) * p + pi] += w * xv[ci * s + i];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, out), Op::Resample { x, taps }, rg)
    }

    /// 2x2 max pooling with stride 2 over `[N, C, H, W]`.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = xs[..] else {
            panic!("max_pool2 expects 4-D input")
        };
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(&[n, c, ho, wo], out),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    /// Multiplies every channel plane of `x` by a constant spatial mask.
    pub fn mul_spatial(&mut self, x: Var, mask: Rc<Vec<T>>) -> Var {
        let s = mask.len();
        let mut out = self.value(x).clone();
        assert_eq!(out.len() % s, 0);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= mask[i % s];
        }
        let rg = self.rg(x);
        self.push(out, Op::MulSpatial { x, mask }, rg)
    }

    /// Elementwise product with a constant of identical size.
    pub fn mul_const(&mut self, x: Var, c: Rc<Vec<T>>) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.len(), c.len());
        for (v, &m) in out.data_mut().iter_mut().zip(c.iter()) {
            *v *= m;
        }
        let rg = self.rg(x);
        self.push(out, Op::MulConst { x, c }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// Transpose of a 2-D node.
    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = Self::mat_dims(self.shape(x));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[c, r], out), Op::Transpose(x), rg)
    }

    /// Concatenates 2-D nodes with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = Self::mat_dims(self.shape(parts[0])).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = Self::mat_dims(self.shape(p));
                assert_eq!(r, rows, "concat row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(&[rows, total], out),
            Op::Concat {
                parts: parts.iter().copied().zip(widths).collect(),
            },
            rg,
        )
    }

    /// Columns `start..start+len` of a 2-D node.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = Self::mat_dims(self.shape(x));
        assert!(start + len <= c);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[r, len], out), Op::Slice { x, start, len }, rg)
    }

    /// Selects entries along the first axis.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        let inner: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            assert!(r < shape[0]);
            out.extend_from_slice(&xv[r * inner..(r + 1) * inner]);
        }
        let mut new_shape = shape.clone();
        new_shape[0] = rows.len();
        let rg = self.rg(x);
        self.push(
            Tensor::new(&new_shape, out),
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        )
    }

    /// Normalizes each row of a 2-D node to zero mean and unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = Self::mat_dims(self.shape(x));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut inv_std = Vec::with_capacity(r);
        let nf = T::from_f64(c as f64);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[r, c], out), Op::LayerNorm { x, inv_std }, rg)
    }

    /// Row-wise softmax; entries where `valid` is false get exactly zero weight.
    ///
    /// `valid` has one flag per column (shared by all rows) or one per entry.
    pub fn masked_softmax(&mut self, x: Var, valid: Option<&[bool]>) -> Var {
        let (r, c) = Self::mat_dims(self.shape(x));
        if let Some(v) = valid {
            assert!(v.len() == c || v.len() == r * c, "validity length mismatch");
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ok =
                |j: usize| valid.is_none_or(|v| if v.len() == c { v[j] } else { v[i * c + j] });
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if ok(j) && v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for j in 0..c {
                if ok(j) {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    denom += e;
                }
            }
            if denom > T::zero() {
                for v in &mut out[i * c..(i + 1) * c] {
                    *v = *v / denom;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::new(&[r, c], out), Op::MaskedSoftmax { x }, rg)
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and a
    /// constant target distribution of the same shape.
    pub fn softmax_xent(&mut self, logits: Var, target: Rc<Vec<T>>) -> Var {
        let (r, c) = Self::mat_dims(self.shape(logits));
        assert_eq!(target.len(), r * c);
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        for i in 0..r {
            let row = &lv[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
            for j in 0..c {
                let lp = row[j] - lse;
                probs[i * c + j] = lp.exp();
                let t = target[i * c + j];
                if t != T::zero() {
                    loss -= t * lp;
                }
            }
        }
        let loss = loss / T::from_f64(r as f64);
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            },
            rg,
        )
    }

    /// `sum_i w_i * bce(sigmoid(x_i), t_i) / norm`.
    pub fn bce_logits(&mut self, x: Var, target: Rc<Vec<T>>, weight: Rc<Vec<T>>, norm: T) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), target.len());
        assert_eq!(xv.len(), weight.len());
        let mut loss = T::zero();
        for i in 0..xv.len() {
            let w = weight[i];
            if w == T::zero() {
                continue;
            }
            let z = xv[i];
            let l = z.max(T::zero()) - z * target[i] + (T::one() + (-z.abs()).exp()).ln();
            loss += w * l;
        }
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(loss / norm),
            Op::BceLogits {
                x,
                target,
                weight,
                norm,
            },
            rg,
        )
    }

    /// `sum_i w_i * smooth_l1(x_i - t_i) / norm`.
    pub fn smooth_l1(
        &mut self,
        x: Var,
        target: Rc<Vec<T>>,
        weight: Rc<Vec<T>>,
        norm: T,
        beta: T,
    ) -> Var {
        let xv = self.value(x).data();
        assert_eq!(xv.len(), target.len());
        assert_eq!(xv.len(), weight.len());
        let mut loss = T::zero();
        for i in 0..xv.len() {
            if weight[i] != T::zero() {
                loss += weight[i] * smooth_l1_value(xv[i] - target[i], beta);
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::scalar(loss / norm),
            Op::SmoothL1 {
                x,
                target,
                weight,
                norm,
                beta,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Gradients of the scalar `loss` with respect to every parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![T::one()]));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, g, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => {
                out.by_param.insert(*id, g);
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * bv[i];
                    }
                });
                self.acc_with(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.map(|v| v * *s)),
            Op::AddRow(a, b) => {
                let n = self.value(*b).len();
                self.acc_with(grads, *b, |d| {
                    for (i, &v) in gd.iter().enumerate() {
                        d[i % n] += v;
                    }
                });
                self.acc(grads, *a, g);
            }
            Op::MulRow(a, b) => {
                let n = self.value(*b).len();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *b, |d| {
                    for (i, &v) in gd.iter().enumerate() {
                        d[i % n] += v * av[i];
                    }
                });
                self.acc_with(grads, *a, |d| {
                    for (i, &v) in gd.iter().enumerate() {
                        d[i] += v * bv[i % n];
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                // dA = dC * op(B)^T, stored according to ta.
                self.acc_with(grads, *a, |d| {
                    if *ta {
                        // A stored [k, m]: dA = op(B) * dC^T
                        matmul_into(bv, *tb, gd, true, k, n, m, d, true);
                    } else {
                        matmul_into(gd, false, bv, !*tb, m, n, k, d, true);
                    }
                });
                self.acc_with(grads, *b, |d| {
                    if *tb {
                        // B stored [n, k]: dB = dC^T * op(A)
                        matmul_into(gd, true, av, *ta, n, m, k, d, true);
                    } else {
                        matmul_into(av, !*ta, gd, false, k, m, n, d, true);
                    }
                });
            }
            Op::Conv2d {
                x,
                w,
                b,
                spec,
                cols,
            } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (co, k) = (ws[0], ws[2]);
                let os = node.value.shape();
                let (ho, wo) = (os[2], os[3]);
                let sp = ho * wo;
                let ckk = c * k * k;
                if let Some(b) = b {
                    self.acc_with(grads, *b, |d| {
                        for bi in 0..n {
                            for oc in 0..co {
                                d[oc] += gd[(bi * co + oc) * sp..(bi * co + oc + 1) * sp]
                                    .iter()
                                    .copied()
                                    .sum::<T>();
                            }
                        }
                    });
                }
                let xv = self.value(*x).data();
                self.acc_with(grads, *w, |d| {
                    for bi in 0..n {
                        let go = &gd[bi * co * sp..(bi + 1) * co * sp];
                        let src = match cols {
                            Some(cols) => &cols[bi * ckk * sp..(bi + 1) * ckk * sp],
                            None => &xv[bi * c * h * wd..(bi + 1) * c * h * wd],
                        };
                        matmul_into(go, false, src, true, co, sp, ckk, d, true);
                    }
                });
                let wv = self.value(*w).data();
                let spec = *spec;
                self.acc_with(grads, *x, |d| {
                    let mut dcols = vec![T::zero(); ckk * sp];
                    for bi in 0..n {
                        let go = &gd[bi * co * sp..(bi + 1) * co * sp];
                        let dx = &mut d[bi * c * h * wd..(bi + 1) * c * h * wd];
                        if cols.is_none() {
                            matmul_into(wv, true, go, false, ckk, co, sp, dx, true);
                        } else {
                            matmul_into(wv, true, go, false, ckk, co, sp, &mut dcols, false);
                            col2im(&dcols, c, h, wd, k, spec, ho, wo, dx);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let y = node.value.data();
                self.acc_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        if y[i] > T::zero() {
                            d[i] += gd[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * y[i] * (T::one() - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.acc_with(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * (T::one() - y[i] * y[i]);
                    }
                });
            }
            Op::Resample { x, taps } => {
                let s = taps.in_spatial;
                let c = self.value(*x).len() / s;
                let (gn, p) = (taps.groups, taps.positions);
                self.acc_with(grads, *x, |d| {
                    for gi in 0..gn {
                        for pi in 0..p {
                            let o = gi * p + pi;
                            let (st, en) = (taps.offsets[o] as usize, taps.offsets[o + 1] as usize);
                            for t in st..en {
                                let (i, w) = (taps.idx[t] as usize, taps.w[t]);
                                for ci in 0..c {
                                    d[ci * s + i] += w * gd[(gi * c + ci) * p + pi];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc_with(grads, *x, |d| {
                    for (o, &i) in argmax.iter().enumerate() {
                        d[i as usize] += gd[o];
                    }
                });
            }
            Op::MulSpatial { x, mask } => {
                let s = mask.len();
                self.acc_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * mask[i % s];
                    }
                });
            }
            Op::MulConst { x, c } => {
                self.acc_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        d[i] += gd[i] * c[i];
                    }
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, g.reshape(&shape));
            }
            Op::Transpose(x) => {
                let (r, c) = Self::mat_dims(self.shape(*x));
                self.acc_with(grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += gd[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for &(p, w) in parts {
                    self.acc_with(grads, p, |d| {
                        for r in 0..rows {
                            for j in 0..w {
                                d[r * w + j] += gd[r * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice { x, start, len } => {
                let (r, c) = Self::mat_dims(self.shape(*x));
                self.acc_with(grads, *x, |d| {
                    for i in 0..r {
                        for j in 0..*len {
                            d[i * c + start + j] += gd[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                self.acc_with(grads, *x, |d| {
                    for (o, &r) in rows.iter().enumerate() {
                        for j in 0..inner {
                            d[r * inner + j] += gd[o * inner + j];
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = node.value.data();
                let c = node.value.shape()[1];
                let nf = T::from_f64(c as f64);
                self.acc_with(grads, *x, |d| {
                    for (i, &is) in inv_std.iter().enumerate() {
                        let gy = &gd[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let mg = gy.iter().copied().sum::<T>() / nf;
                        let mgy = gy.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for j in 0..c {
                            d[i * c + j] += is * (gy[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let (r, c) = Self::mat_dims(node.value.shape());
                self.acc_with(grads, *x, |d| {
                    for i in 0..r {
                        let dot: T = (0..c).map(|j| gd[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            d[i * c + j] += y[i * c + j] * (gd[i * c + j] - dot);
                        }
                    }
                });
            }
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            } => {
                let (r, _) = Self::mat_dims(self.shape(*logits));
                let scale = gd[0] / T::from_f64(r as f64);
                self.acc_with(grads, *logits, |d| {
                    for i in 0..d.len() {
                        d[i] += scale * (probs[i] - target[i]);
                    }
                });
            }
            Op::BceLogits {
                x,
                target,
                weight,
                norm,
            } => {
                let xv = self.value(*x).data();
                let scale = gd[0] / *norm;
                self.acc_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        if weight[i] != T::zero() {
                            d[i] += scale * weight[i] * (xv[i].sigmoid() - target[i]);
                        }
                    }
                });
            }
            Op::SmoothL1 {
                x,
                target,
                weight,
                norm,
                beta,
            } => {
                let xv = self.value(*x).data();
                let scale = gd[0] / *norm;
                self.acc_with(grads, *x, |d| {
                    for i in 0..d.len() {
                        if weight[i] != T::zero() {
                            let r = xv[i] - target[i];
                            let dr = if r.abs() < *beta {
                                r / *beta
                            } else if r > T::zero() {
                                T::one()
                            } else {
                                -T::one()
                            };
                            d[i] += scale * weight[i] * dr;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc_with(grads, *x, |d| d.iter_mut().for_each(|v| *v += s));
            }
        }
    }
}

/// Piecewise smooth-L1: quadratic below `beta`, linear above.
pub fn smooth_l1_value<T: Real>(r: T, beta: T) -> T {
    let a = r.abs();
    let half = T::from_f64(0.5);
    if a < beta {
        half * a * a / beta
    } else {
        a - half * beta
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    cols: &mut [T],
) {
    let sp = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * sp..(row + 1) * sp];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    spec: ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let sp = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * sp..(row + 1) * sp];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix =
                            (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear sampling taps at continuous position `(y, x)` of an `h x w` grid whose
/// cell `(i, j)` is centred at `(i + 0.5, j + 0.5)`. Positions are clamped to the grid.
pub fn bilinear_taps<T: Real>(h: usize, w: usize, y: f64, x: f64) -> [(usize, T); 4] {
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ly = fy - y0 as f64;
    let lx = fx - x0 as f64;
    [
        (y0 * w + x0, T::from_f64((1.0 - ly) * (1.0 - lx))),
        (y0 * w + x1, T::from_f64((1.0 - ly) * lx)),
        (y1 * w + x0, T::from_f64(ly * (1.0 - lx))),
        (y1 * w + x1, T::from_f64(ly * lx)),
    ]
}

/// Taps for bilinear crops of axis-aligned boxes (in grid units) to `out_h x out_w` each.
pub fn roi_align_taps<T: Real>(
    h: usize,
    w: usize,
    boxes: &[[f64; 4]],
    out_h: usize,
    out_w: usize,
) -> Taps<T> {
    let mut b = Taps::builder(h * w);
    for bx in boxes {
        let [x0, y0, x1, y1] = *bx;
        let (bw, bh) = (x1 - x0, y1 - y0);
        for i in 0..out_h {
            let y = y0 + (i as f64 + 0.5) * bh / out_h as f64;
            for j in 0..out_w {
                let x = x0 + (j as f64 + 0.5) * bw / out_w as f64;
                b.push(&bilinear_taps::<T>(h, w, y, x));
            }
        }
    }
    b.finish(boxes.len(), out_h * out_w)
}

/// Taps for a bilinear resize of a whole `h x w` grid to `out_h x out_w`.
pub fn resize_taps<T: Real>(h: usize, w: usize, out_h: usize, out_w: usize) -> Taps<T> {
    roi_align_taps(h, w, &[[0.0, 0.0, w as f64, h as f64]], out_h, out_w)
}

/// Taps for a `factor x factor` box-filter (area) downsample.
pub fn area_downsample_taps<T: Real>(h: usize, w: usize, factor: usize) -> Taps<T> {
    let (oh, ow) = (h / factor, w / factor);
    let wgt = T::from_f64(1.0 / (factor * factor) as f64);
    let mut b = Taps::builder(h * w);
    let mut taps = Vec::with_capacity(factor * factor);
    for i in 0..oh {
        for j in 0..ow {
            taps.clear();
            for dy in 0..factor {
                for dx in 0..factor {
                    taps.push(((i * factor + dy) * w + j * factor + dx, wgt));
                }
            }
            b.push(&taps);
        }
    }
    b.finish(1, oh * ow)
}
