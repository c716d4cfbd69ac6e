//! Minimal reverse-mode differentiation over a define-by-run tape.
//!
//! Only the operations the dual-latent model needs are provided. Fused loss
//! nodes delegate their math to [`crate::losses::kernels`] so the value-level
//! loss functions and the differentiable ones share one implementation.

use crate::losses::kernels;
use crate::tensor::{gemm, MatRef, Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over NHWC input with HWIO weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(k: usize, stride: usize, pad: usize, size: usize) -> usize {
        (size + 2 * pad - k) / stride + 1
    }
    pub fn out_h(&self) -> usize {
        Self::out_hw(self.kernel, self.stride, self.pad, self.in_h)
    }
    pub fn out_w(&self) -> usize {
        Self::out_hw(self.kernel, self.stride, self.pad, self.in_w)
    }
    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reparam {
        mean: Var,
        log_var: Var,
        eps: Vec<T>,
    },
    Mse(Var, Var),
    Kl {
        mean: Var,
        log_var: Var,
    },
    CosDist(Var, Var),
    AbsCosSim(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of tensor operations; values are computed eagerly on insertion.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.row_len())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape2(a);
        let (k2, n) = self.shape2(b);
        assert_eq!(k, k2, "matmul shape mismatch");
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(&self.value(a).data, m, k),
            MatRef::new(&self.value(b).data, k, n),
            &mut out,
            false,
        );
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (m, n) = self.shape2(x);
        assert_eq!(self.value(bias).len(), n, "bias width mismatch");
        let mut out = self.value(x).data.clone();
        let b = &self.value(bias).data;
        for row in out.chunks_exact_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(Tensor::new(vec![m, n], out), Op::AddRow(x, bias), ng)
    }

    /// `x · w + b` with `w` stored as `[in × out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let shape = self.value(input).shape.clone();
        assert_eq!(shape.len(), 4, "conv2d expects NHWC input");
        let wshape = &self.value(weight).shape;
        let out_c = *wshape.last().unwrap();
        let geom = ConvGeom {
            batch: shape[0],
            in_h: shape[1],
            in_w: shape[2],
            in_c: shape[3],
            out_c,
            kernel,
            stride,
            pad,
        };
        assert_eq!(self.value(weight).len(), geom.patch() * out_c, "conv weight shape mismatch");
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let rows = geom.batch * oh * ow;
        let cols = im2col(&self.value(input).data, &geom);
        let mut out = vec![T::zero(); rows * out_c];
        gemm(
            MatRef::new(&cols, rows, geom.patch()),
            MatRef::new(&self.value(weight).data, geom.patch(), out_c),
            &mut out,
            false,
        );
        let b = &self.value(bias).data;
        for row in out.chunks_exact_mut(out_c) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let ng = self.ng(input) || self.ng(weight) || self.ng(bias);
        let keep = if self.ng(weight) { cols } else { Vec::new() };
        self.push(
            Tensor::new(vec![geom.batch, oh, ow, out_c], out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols: keep,
            },
            ng,
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| T::one() / (T::one() + (-a).exp()));
        let ng = self.ng(x);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let v = self.value(x).map(|a| a.max(lo).min(hi));
        let ng = self.ng(x);
        self.push(v, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Var {
        let v = Tensor::new(shape, self.value(x).data.clone());
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (m, na) = self.shape2(a);
        let (m2, nb) = self.shape2(b);
        assert_eq!(m, m2, "concat row mismatch");
        let mut out = Vec::with_capacity(m * (na + nb));
        for i in 0..m {
            out.extend_from_slice(&self.value(a).data[i * na..(i + 1) * na]);
            out.extend_from_slice(&self.value(b).data[i * nb..(i + 1) * nb]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, na + nb], out), Op::ConcatCols(a, b), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (m, n) = self.shape2(x);
        assert!(start <= end && end <= n, "column slice out of range");
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&self.value(x).data[i * n + start..i * n + end]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![m, w], out), Op::SliceCols { x, start }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).gather_rows(idx);
        let ng = self.ng(x);
        self.push(
            v,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// `mean + exp(log_var / 2) ⊙ eps`.
    pub fn reparam(&mut self, mean: Var, log_var: Var, eps: Vec<T>) -> Var {
        let m = self.value(mean);
        let lv = self.value(log_var);
        assert_eq!(m.shape, lv.shape);
        assert_eq!(m.len(), eps.len());
        let half = T::from_f64(0.5);
        let data = m
            .data
            .iter()
            .zip(&lv.data)
            .zip(&eps)
            .map(|((&mu, &l), &e)| mu + (half * l).exp() * e)
            .collect();
        let v = Tensor::new(m.shape.clone(), data);
        let ng = self.ng(mean) || self.ng(log_var);
        self.push(v, Op::Reparam { mean, log_var, eps }, ng)
    }

    fn scalar_node(&mut self, v: f64, op: Op<T>, ng: bool) -> Var {
        self.push(Tensor::new(vec![], vec![T::from_f64(v)]), op, ng)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "mse size mismatch");
        let v = kernels::mse(&self.value(a).data, &self.value(b).data);
        let ng = self.ng(a) || self.ng(b);
        self.scalar_node(v, Op::Mse(a, b), ng)
    }

    pub fn kl(&mut self, mean: Var, log_var: Var) -> Var {
        let (b, d) = self.shape2(mean);
        let v = kernels::kl(&self.value(mean).data, &self.value(log_var).data, b, d);
        let ng = self.ng(mean) || self.ng(log_var);
        self.scalar_node(v, Op::Kl { mean, log_var }, ng)
    }

    pub fn cos_dist(&mut self, a: Var, b: Var) -> Var {
        let (rows, d) = self.shape2(a);
        assert_eq!(self.shape2(b), (rows, d), "cosine operand mismatch");
        let v = kernels::mean_cos_dist(&self.value(a).data, &self.value(b).data, d);
        let ng = self.ng(a) || self.ng(b);
        self.scalar_node(v, Op::CosDist(a, b), ng)
    }

    pub fn abs_cos_sim(&mut self, a: Var, b: Var) -> Var {
        let (rows, d) = self.shape2(a);
        assert_eq!(self.shape2(b), (rows, d), "cosine operand mismatch");
        let v = kernels::mean_abs_cos_sim(&self.value(a).data, &self.value(b).data, d);
        let ng = self.ng(a) || self.ng(b);
        self.scalar_node(v, Op::AbsCosSim(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add shape mismatch");
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(&x, &y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape.clone(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let v = self.value(x).map(|a| a * k);
        let ng = self.ng(x);
        self.push(v, Op::Scale(x, k), ng)
    }

    /// Gradients of the scalar `loss` w.r.t. every node. Entries are `None`
    /// for nodes that do not influence the loss or do not need gradients.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        fn acc<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].needs_grad {
                return None;
            }
            let len = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape2(*a);
                let n = self.value(*b).row_len();
                let gm = MatRef::new(g, m, n);
                if let Some(ga) = acc(nodes, grads, *a) {
                    gemm(gm, MatRef::new(&self.value(*b).data, k, n).t(), ga, true);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    gemm(MatRef::new(&self.value(*a).data, m, k).t(), gm, gb, true);
                }
            }
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let rows = geom.batch * geom.out_h() * geom.out_w();
                let (p, co) = (geom.patch(), geom.out_c);
                let gm = MatRef::new(g, rows, co);
                if let Some(gw) = acc(nodes, grads, *weight) {
                    gemm(MatRef::new(cols, rows, p).t(), gm, gw, true);
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    for row in g.chunks_exact(co) {
                        add_into(gb, row);
                    }
                }
                if nodes[input.0].needs_grad {
                    let mut gcols = vec![T::zero(); rows * p];
                    gemm(gm, MatRef::new(&self.value(*weight).data, p, co).t(), &mut gcols, false);
                    let gi = acc(nodes, grads, *input).unwrap();
                    col2im_add(&gcols, geom, gi);
                }
            }
            Op::Relu(x) => {
                let xv = &self.value(*x).data;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = &node.value.data;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &yi) in gx.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.value(*x).data;
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((o, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi >= *lo && xi <= *hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).row_len();
                let nb = self.value(*b).row_len();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (dst, src) in ga.chunks_exact_mut(na).zip(g.chunks_exact(na + nb)) {
                        add_into(dst, &src[..na]);
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (dst, src) in gb.chunks_exact_mut(nb).zip(g.chunks_exact(na + nb)) {
                        add_into(dst, &src[na..]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let n = self.value(*x).row_len();
                let w = node.value.row_len();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (dst, src) in gx.chunks_exact_mut(n).zip(g.chunks_exact(w.max(1))) {
                        add_into(&mut dst[*start..*start + w], src);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let w = self.value(*x).row_len();
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * w..(src + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::Reparam { mean, log_var, eps } => {
                if let Some(gm) = acc(nodes, grads, *mean) {
                    add_into(gm, g);
                }
                let lv = &self.value(*log_var).data;
                let half = T::from_f64(0.5);
                if let Some(gl) = acc(nodes, grads, *log_var) {
                    for (((o, &gi), &l), &e) in gl.iter_mut().zip(g).zip(lv).zip(eps) {
                        *o += gi * e * half * (half * l).exp();
                    }
                }
            }
            Op::Mse(a, b) => {
                let s = g[0].to_f64();
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let n = av.len() as f64;
                let coef = 2.0 * s / n;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                        *o += T::from_f64(coef * (x.to_f64() - y.to_f64()));
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= T::from_f64(coef * (x.to_f64() - y.to_f64()));
                    }
                }
            }
            Op::Kl { mean, log_var } => {
                let s = g[0].to_f64();
                let rows = self.value(*mean).rows().max(1) as f64;
                let (mv, lv) = (&self.value(*mean).data, &self.value(*log_var).data);
                if let Some(gm) = acc(nodes, grads, *mean) {
                    for (o, &m) in gm.iter_mut().zip(mv) {
                        *o += T::from_f64(s * m.to_f64() / rows);
                    }
                }
                if let Some(gl) = acc(nodes, grads, *log_var) {
                    for (o, &l) in gl.iter_mut().zip(lv) {
                        *o += T::from_f64(s * 0.5 * (l.to_f64().exp() - 1.0) / rows);
                    }
                }
            }
            Op::CosDist(a, b) | Op::AbsCosSim(a, b) => {
                let s = g[0].to_f64();
                let abs = matches!(node.op, Op::AbsCosSim(..));
                let d = self.value(*a).row_len();
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let (da, db) = kernels::cos_loss_grad(av, bv, d, abs);
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (o, v) in ga.iter_mut().zip(da) {
                        *o += T::from_f64(s * v);
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (o, v) in gb.iter_mut().zip(db) {
                        *o += T::from_f64(s * v);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Scale(x, k) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += gi * *k;
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Unfold NHWC input into `[B·OH·OW × K·K·C]` patches ordered (ky, kx, c).
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.patch();
    let mut cols = vec![T::zero(); g.batch * oh * ow * p];
    let c = g.in_c;
    for b in 0..g.batch {
        let img = &x[b * g.in_h * g.in_w * c..(b + 1) * g.in_h * g.in_w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * p;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * c;
                        let dst = row + (ky * g.kernel + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = g.patch();
    let c = g.in_c;
    for b in 0..g.batch {
        let base = b * g.in_h * g.in_w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * p;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = base + (iy as usize * g.in_w + ix as usize) * c;
                        let src = row + (ky * g.kernel + kx) * c;
                        add_into(&mut dx[dst..dst + c], &cols[src..src + c]);
                    }
                }
            }
        }
    }
}
