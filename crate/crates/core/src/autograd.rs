//! A small reverse-mode autodiff tape.
//!
//! Every forward pass records its operations on a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that needs one.
//! The op set is exactly what the segmentation model uses: dense linear maps,
//! layer normalization, GELU, fused multi-head attention, cosine
//! normalization, fused softmax cross-entropy, and sparse row mixing (which
//! covers rotation, gathering, pooling, bilinear resampling and im2col).

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse linear map between row-major row blocks: output row `r` is
/// `sum_k weight_k * input[src_k]`. Rows are contiguous channel blocks of a
/// fixed width chosen by the caller.
#[derive(Clone, Debug)]
pub struct RowMap {
    in_rows: usize,
    offsets: Vec<usize>,
    src: Vec<u32>,
    weight: Vec<f64>,
}

impl RowMap {
    pub fn builder(in_rows: usize) -> RowMapBuilder {
        RowMapBuilder {
            map: RowMap {
                in_rows,
                offsets: vec![0],
                src: Vec::new(),
                weight: Vec::new(),
            },
        }
    }

    /// Pure gather: output row `r` copies input row `idx[r]`.
    pub fn gather(in_rows: usize, idx: impl IntoIterator<Item = usize>) -> RowMap {
        let mut b = RowMap::builder(in_rows);
        for i in idx {
            b.push(&[(i, 1.0)]);
        }
        b.finish()
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Applies the map to a plain slice with rows of width `width`.
    pub fn apply(&self, input: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * width];
        for (r, dst) in out.chunks_mut(width).enumerate() {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let s = self.src[k] as usize * width;
                let w = self.weight[k];
                for (d, &x) in dst.iter_mut().zip(&input[s..s + width]) {
                    *d += w * x;
                }
            }
        }
        out
    }

    fn apply_transpose(&self, grad_out: &[f64], width: usize, grad_in: &mut [f64]) {
        for (r, g) in grad_out.chunks(width).enumerate() {
            for k in self.offsets[r]..self.offsets[r + 1] {
                let s = self.src[k] as usize * width;
                let w = self.weight[k];
                for (d, &x) in grad_in[s..s + width].iter_mut().zip(g) {
                    *d += w * x;
                }
            }
        }
    }
}

pub struct RowMapBuilder {
    map: RowMap,
}

impl RowMapBuilder {
    pub fn push(&mut self, terms: &[(usize, f64)]) {
        for &(s, w) in terms {
            assert!(s < self.map.in_rows, "row {s} out of range");
            self.map.src.push(s as u32);
            self.map.weight.push(w);
        }
        self.map.offsets.push(self.map.src.len());
    }

    pub fn finish(self) -> RowMap {
        self.map
    }
}

enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    RowMap {
        x: Var,
        map: Arc<RowMap>,
    },
    Concat(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Tensor,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Forward tape. Nodes are append-only; a graph lives for one forward and
/// (optionally) one backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf treated as constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// All attention probability tensors recorded so far, each shaped
    /// `[batch, heads, queries, keys]`.
    pub fn attention_probs(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().filter_map(|n| match &n.op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err!("add: {:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.needs(&[x]);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let (first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Empty("mean of zero tensors".into()))?;
        let mut acc = *first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(self.scale(acc, 1.0 / xs.len() as f64))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let ng = self.needs(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    /// `x @ w + b` over the last axis of `x`. `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.rank() != 2 || vx.last_dim() != vw.shape()[0] {
            return Err(shape_err!(
                "linear: input {:?} vs weight {:?}",
                vx.shape(),
                vw.shape()
            ));
        }
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        let rows = vx.numel() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.numel() != dout {
                return Err(shape_err!("linear: bias {:?} for {dout} outputs", vb.shape()));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(
            rows,
            din,
            dout,
            vx.data(),
            (din, 1),
            vw.data(),
            (dout, 1),
            &mut out,
            (dout, 1),
        );
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let value = Tensor::new(shape, out)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        Ok(self.push(value, Op::Linear { x, w, b }, ng))
    }

    /// `a @ b^T` for `a: [m, c]`, `b: [n, c]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[1] {
            return Err(shape_err!(
                "matmul_nt: {:?} vs {:?}",
                va.shape(),
                vb.shape()
            ));
        }
        let (m, c, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
        let mut out = vec![0.0; m * n];
        gemm(m, c, n, va.data(), (c, 1), vb.data(), (1, c), &mut out, (n, 1));
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMulNt { a, b }, ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.numel() != d || vb.numel() != d {
            return Err(shape_err!("layer_norm: affine size vs width {d}"));
        }
        let rows = vx.numel() / d;
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = h * vg.data()[i] + vb.data()[i];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Applies a [`RowMap`]; `x` is viewed as `map.in_rows()` rows and the
    /// result is reshaped to `out_shape`.
    pub fn row_map(&mut self, x: Var, map: Arc<RowMap>, out_shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if !vx.numel().is_multiple_of(map.in_rows()) {
            return Err(shape_err!(
                "row_map: {:?} is not divisible into {} rows",
                vx.shape(),
                map.in_rows()
            ));
        }
        let width = vx.numel() / map.in_rows();
        let out = map.apply(vx.data(), width);
        let value = Tensor::new(out_shape.to_vec(), out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::RowMap { x, map }, ng))
    }

    /// Concatenation along the last axis; leading shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let lead = {
            let s = self.shape(parts[0]);
            s[..s.len() - 1].to_vec()
        };
        let rows: usize = lead.iter().product();
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err!("concat: {:?} vs leading {:?}", s, lead));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                let w = v.last_dim();
                out.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(width);
        let value = Tensor::new(shape, out)?;
        let ng = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), ng))
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut norms = Vec::with_capacity(vx.numel() / d);
        let mut out = vx.data().to_vec();
        for (r, row) in out.chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n >= NORM_FLOOR) {
                return Err(Error::Degenerate(format!(
                    "vector {r} has norm {n:e}, below {NORM_FLOOR:e}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(value, Op::L2Normalize { x, norms }, ng))
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    /// `q: [b, lq, d]`, `k, v: [b, lk, d]`; `d` is split into `heads` heads.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.rank() != 3 || vk.shape() != vv.shape() || vk.rank() != 3 {
            return Err(shape_err!(
                "attention: q {:?}, k {:?}, v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            ));
        }
        let (b, lq, d) = (vq.shape()[0], vq.shape()[1], vq.shape()[2]);
        let lk = vk.shape()[1];
        if vk.shape()[0] != b || vk.shape()[2] != d {
            return Err(shape_err!("attention: q {:?} vs k {:?}", vq.shape(), vk.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * d];
        let (qd, kd, vd) = (vq.data(), vk.data(), vv.data());
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let qrow = &qd[(bi * lq + i) * d + h * dh..][..dh];
                    let p = &mut probs[((bi * heads + h) * lq + i) * lk..][..lk];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kd[(bi * lk + j) * d + h * dh..][..dh];
                        *pj = dot(qrow, krow) * scale;
                        max = max.max(*pj);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    let orow = &mut out[(bi * lq + i) * d + h * dh..][..dh];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj /= z;
                        let vrow = &vd[(bi * lk + j) * d + h * dh..][..dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += *pj * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![b, lq, d], out)?;
        let probs = Tensor::new(vec![b, heads, lq, lk], probs)?;
        let ng = self.needs(&[q, k, v]);
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Mean softmax cross-entropy over rows whose label is `Some`.
    /// `logits: [rows, classes]`. Returns the scalar node and the number of
    /// rows that contributed (zero when everything was ignored, in which
    /// case the loss is 0).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: Vec<Option<usize>>,
    ) -> Result<(Var, usize)> {
        let vl = self.value(logits);
        let n = vl.last_dim();
        let rows = vl.numel() / n;
        if labels.len() != rows {
            return Err(shape_err!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            ));
        }
        let mut probs = vec![0.0; vl.numel()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, label) in labels.iter().enumerate() {
            let row = &vl.data()[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, &v) in probs[r * n..(r + 1) * n].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            if let Some(c) = *label {
                if c >= n {
                    return Err(shape_err!("cross_entropy: label {c} >= {n} classes"));
                }
                total += z.ln() + max - row[c];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let ng = self.needs(&[logits]);
        let v = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            },
            ng,
        );
        Ok((v, count))
    }

    /// `sum_i x_i * weights_i`, a scalar. Handy as a generic test objective.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() != weights.len() {
            return Err(shape_err!(
                "weighted_sum: {} weights for {:?}",
                weights.len(),
                vx.shape()
            ));
        }
        let s = dot(vx.data(), &weights);
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, ng))
    }

    /// Reverse pass from scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        assert_eq!(self.nodes[root.0].value.numel(), 1, "backward needs a scalar root");
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accum(grads, *x, |acc| add_into(acc, g)),
            Op::Add(a, b) => {
                self.accum(grads, *a, |acc| add_into(acc, g));
                self.accum(grads, *b, |acc| add_into(acc, g));
            }
            Op::Scale(x, s) => self.accum(grads, *x, |acc| {
                acc.iter_mut().zip(g).for_each(|(a, &v)| *a += s * v)
            }),
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, |acc| {
                    for ((a, &v), &xi) in acc.iter_mut().zip(g).zip(xv) {
                        *a += v * gelu_grad(xi);
                    }
                })
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (din, dout) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.numel() / din;
                self.accum(grads, *x, |acc| {
                    gemm(rows, dout, din, g, (dout, 1), vw.data(), (1, dout), acc, (din, 1))
                });
                self.accum(grads, *w, |acc| {
                    gemm(din, rows, dout, vx.data(), (1, din), g, (dout, 1), acc, (dout, 1))
                });
                if let Some(b) = b {
                    self.accum(grads, *b, |acc| {
                        for row in g.chunks(dout) {
                            add_into(acc, row);
                        }
                    });
                }
            }
            Op::MatMulNt { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, c, n) = (va.shape()[0], va.shape()[1], vb.shape()[0]);
                self.accum(grads, *a, |acc| {
                    gemm(m, n, c, g, (n, 1), vb.data(), (c, 1), acc, (c, 1))
                });
                self.accum(grads, *b, |acc| {
                    gemm(n, m, c, g, (1, n), va.data(), (c, 1), acc, (c, 1))
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let gv = self.value(*gamma).data();
                self.accum(grads, *gamma, |acc| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            acc[i] += gr[i] * xr[i];
                        }
                    }
                });
                self.accum(grads, *beta, |acc| {
                    for gr in g.chunks(d) {
                        add_into(acc, gr);
                    }
                });
                self.accum(grads, *x, |acc| {
                    for (r, (gr, xr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for i in 0..d {
                            let gh = gr[i] * gv[i];
                            m1 += gh;
                            m2 += gh * xr[i];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for i in 0..d {
                            let gh = gr[i] * gv[i];
                            acc[r * d + i] += rstd[r] * (gh - m1 - xr[i] * m2);
                        }
                    }
                });
            }
            Op::RowMap { x, map } => {
                let width = self.value(*x).numel() / map.in_rows();
                self.accum(grads, *x, |acc| map.apply_transpose(g, width, acc));
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.numel() / total;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accum(grads, p, |acc| {
                        for r in 0..rows {
                            add_into(
                                &mut acc[r * w..(r + 1) * w],
                                &g[r * total + off..r * total + off + w],
                            );
                        }
                    });
                    off += w;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                self.accum(grads, *x, |acc| {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let proj = dot(yr, gr);
                        for i in 0..d {
                            acc[r * d + i] += (gr[i] - yr[i] * proj) / n;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = self.value(*logits).last_dim();
                let s = g[0] / *count as f64;
                self.accum(grads, *logits, |acc| {
                    for (r, label) in labels.iter().enumerate() {
                        let Some(c) = *label else { continue };
                        for i in 0..n {
                            let t = if i == c { 1.0 } else { 0.0 };
                            acc[r * n + i] += s * (probs[r * n + i] - t);
                        }
                    }
                });
            }
            Op::WeightedSum { x, weights } => self.accum(grads, *x, |acc| {
                acc.iter_mut().zip(weights).for_each(|(a, &w)| *a += g[0] * w)
            }),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, lq, d) = (vq.shape()[0], vq.shape()[1], vq.shape()[2]);
        let lk = vk.shape()[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; vq.numel()];
        let mut dk = vec![0.0; vk.numel()];
        let mut dv = vec![0.0; vv.numel()];
        let mut dp = vec![0.0; lk];
        let p = probs.data();
        for bi in 0..b {
            for h in 0..heads {
                for i in 0..lq {
                    let prow = &p[((bi * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[(bi * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        let vrow = &vv.data()[(bi * lk + j) * d + h * dh..][..dh];
                        dp[j] = dot(go, vrow);
                        let dvrow = &mut dv[(bi * lk + j) * d + h * dh..][..dh];
                        for (a, &x) in dvrow.iter_mut().zip(go) {
                            *a += prow[j] * x;
                        }
                    }
                    let inner = dot(prow, &dp);
                    let qrow = &vq.data()[(bi * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        let ds = prow[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &vk.data()[(bi * lk + j) * d + h * dh..][..dh];
                        let dqrow = &mut dq[(bi * lq + i) * d + h * dh..][..dh];
                        for (a, &x) in dqrow.iter_mut().zip(krow) {
                            *a += ds * x;
                        }
                        let dkrow = &mut dk[(bi * lk + j) * d + h * dh..][..dh];
                        for (a, &x) in dkrow.iter_mut().zip(qrow) {
                            *a += ds * x;
                        }
                    }
                }
            }
        }
        self.accum(grads, q, |acc| add_into(acc, &dq));
        self.accum(grads, k, |acc| add_into(acc, &dk));
        self.accum(grads, v, |acc| add_into(acc, &dv));
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// `c += a @ b` with explicit (row, col) strides for every operand.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    c_strides: (usize, usize),
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the assertions above bound every index the kernel touches for
    // the contiguous layouts used in this module.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central finite-difference check of `build` w.r.t. every input entry.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = build(&mut g, &vars);
            g.value(out).data()[0]
        };
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).unwrap();
            for e in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {i} elem {e}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn objective(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = g.value(x).numel();
        let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.weighted_sum(x, w).unwrap()
    }

    #[test]
    fn linear_and_gelu_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ins = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 5]),
            rand_tensor(&mut rng, &[5]),
        ];
        check(ins, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            let y = g.gelu(y);
            objective(g, y, 7)
        });
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ins = vec![
            rand_tensor(&mut rng, &[3, 6]),
            rand_tensor(&mut rng, &[6]),
            rand_tensor(&mut rng, &[6]),
        ];
        check(ins, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            objective(g, y, 8)
        });
    }

    #[test]
    fn attention_grads_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ins = vec![
            rand_tensor(&mut rng, &[2, 3, 4]),
            rand_tensor(&mut rng, &[2, 5, 4]),
            rand_tensor(&mut rng, &[2, 5, 4]),
        ];
        check(ins.clone(), |g, v| {
            let y = g.attention(v[0], v[1], v[2], 2).unwrap();
            objective(g, y, 9)
        });
        let mut g = Graph::new();
        let v: Vec<Var> = ins.into_iter().map(|t| g.constant(t)).collect();
        g.attention(v[0], v[1], v[2], 2).unwrap();
        for p in g.attention_probs() {
            for row in p.data().chunks(5) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_indivisible_heads() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 6]));
        assert!(matches!(g.attention(x, x, x, 4), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_path_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ins = vec![rand_tensor(&mut rng, &[4, 3]), rand_tensor(&mut rng, &[2, 3])];
        check(ins, |g, v| {
            let a = g.l2_normalize(v[0]).unwrap();
            let b = g.l2_normalize(v[1]).unwrap();
            let c = g.matmul_nt(a, b).unwrap();
            objective(g, c, 10)
        });
    }

    #[test]
    fn row_map_concat_and_ce_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ins = vec![rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[4, 1])];
        let mut b = RowMap::builder(3);
        b.push(&[(0, 0.5), (2, 0.5)]);
        b.push(&[(1, 1.0)]);
        b.push(&[(2, 2.0), (0, -1.0)]);
        b.push(&[]);
        let map = Arc::new(b.finish());
        check(ins, move |g, v| {
            let m = g.row_map(v[0], map.clone(), &[4, 2]).unwrap();
            let c = g.concat(&[m, v[1]]).unwrap();
            let c = g.scale(c, 1.5);
            let labels = vec![Some(0), None, Some(2), Some(1)];
            g.cross_entropy(c, labels).unwrap().0
        });
    }

    #[test]
    fn l2_normalize_flags_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        let err = g.l2_normalize(x).unwrap_err();
        assert!(err.to_string().contains("vector 1"), "{err}");
    }
}
