use super::kernels::{col2im, gemm, im2col, permute_into, ConvGeom, MatRef};
use super::{shape_err, Tensor, TensorError};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Slice { x: Var, axis: usize, start: usize },
    L1Loss(Var, Var),
    GaussianKl { mu: Var, logvar: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications (the gradient tape).
///
/// Nodes are appended as ops execute, so inputs always precede the nodes
/// that consume them. When gradients are disabled, values are still
/// recorded but no node is marked as differentiable.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Trailing-dimension broadcast check: `b` equals `a` or a suffix of it.
fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    a == b || (b.len() <= a.len() && !b.is_empty() && a[a.len() - b.len()..] == *b)
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records differentiable nodes (inference mode).
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled && t.requires_grad();
        self.push_raw(t, Op::Leaf, rg)
    }

    /// Records a copy of `t` as a differentiable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_raw(t.clone(), Op::Leaf, rg)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    fn push_raw(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let rg = self.rg(inputs);
        let value = Tensor {
            shape,
            data,
            requires_grad: rg,
        };
        Ok(self.push_raw(value, op, rg))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ----- primitives --------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            MatRef::rows(self.data(a), k),
            MatRef::rows(self.data(b), n),
            0.0,
            &mut out,
        );
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matmul: `[g,m,k] × [g,k,n] → [g,m,n]`, or with `trans_b`
    /// the right operand is `[g,n,k]` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || shape_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let bref = if trans_b {
                MatRef::transposed(bi, k)
            } else {
                MatRef::rows(bi, n)
            };
            gemm(m, k, n, MatRef::rows(ai, k), bref, 0.0, &mut out[i * m * n..(i + 1) * m * n]);
        }
        self.push("bmm", vec![g, m, n], out, Op::BatchMatMul { a, b, trans_b }, &[a, b])
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcast_ok(sa, sb) {
            return Err(shape_err(name, format!("{sa:?} with {sb:?}")));
        }
        let shape = sa.to_vec();
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let out: Vec<f64> = da
            .chunks(nb)
            .flat_map(|row| row.iter().zip(db).map(|(&x, &y)| f(x, y)))
            .collect();
        self.push(name, shape, out, op, &[a, b])
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; `b` may match a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, out, Op::Scale(x, c), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, out, Op::Relu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.data(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push("exp", shape, out, Op::Exp(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::Invalid {
                op: "clamp",
                detail: format!("empty range [{lo}, {hi}]"),
            });
        }
        let out = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        self.push("clamp", shape, out, Op::Clamp { x, lo, hi }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("softmax", format!("axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(d[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..n {
                    let e = (d[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= s;
                }
            }
        }
        self.push("softmax", shape, out, Op::Softmax { x, axis }, &[x])
    }

    /// Normalizes to zero mean, unit variance along `axis` (no affine terms).
    pub fn layer_norm(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err("layer_norm", format!("axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).map(|j| d[base + j * inner]).sum::<f64>() / n as f64;
                let var = (0..n)
                    .map(|j| (d[base + j * inner] - mean).powi(2))
                    .sum::<f64>()
                    / n as f64;
                let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                for j in 0..n {
                    out[base + j * inner] = (d[base + j * inner] - mean) * inv;
                }
            }
        }
        self.push("layer_norm", shape, out, Op::LayerNorm { x, axis }, &[x])
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom), TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = || shape_err("conv2d", format!("x {sx:?}, w {sw:?}, b {sb:?}, stride {stride}, pad {pad}"));
        if sx.len() != 4 || sw.len() != 4 || sb.len() != 1 || stride == 0 {
            return Err(bad());
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, cw, k, k2) = (sw[0], sw[1], sw[2], sw[3]);
        if c != cw || k != k2 || sb[0] != o || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(bad());
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (wd + 2 * pad - k) / stride + 1,
        };
        Ok((n, o, geom))
    }

    /// `x: [N,C,H,W]`, `w: [O,C,K,K]`, `b: [O]` → `[N,O,Ho,Wo]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (n, o, g) = self.conv_geom(x, w, b, stride, pad)?;
        let (pl, ol) = (g.patch_len(), g.out_len());
        let img_len = g.channels * g.height * g.width;
        let (dx, dw, db) = (self.data(x), self.data(w), self.data(b));
        let mut cols = vec![0.0; pl * ol];
        let mut out = vec![0.0; n * o * ol];
        for i in 0..n {
            im2col(&dx[i * img_len..(i + 1) * img_len], &g, &mut cols);
            let dst = &mut out[i * o * ol..(i + 1) * o * ol];
            for (oc, row) in dst.chunks_mut(ol).enumerate() {
                row.fill(db[oc]);
            }
            gemm(o, pl, ol, MatRef::rows(dw, pl), MatRef::rows(&cols, ol), 1.0, dst);
        }
        self.push(
            "conv2d",
            vec![n, o, g.out_h, g.out_w],
            out,
            Op::Conv2d { x, w, b, stride, pad },
            &[x, w, b],
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.data(x).iter().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Vec::new(), vec![s], Op::Mean(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let out = self.data(x).to_vec();
        self.push("reshape", shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(shape_err("permute", format!("axes {axes:?} on {shape:?}")));
        }
        let mut out = vec![0.0; self.data(x).len()];
        permute_into(self.data(x), &shape, axes, &mut out);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        self.push(
            "permute",
            out_shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(shape_err("slice", format!("{start}..{end} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.push("slice", out_shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Mean absolute error between equally shaped tensors.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(shape_err("l1_loss", format!("{sp:?} vs {st:?}")));
        }
        let (p, t) = (self.data(pred), self.data(target));
        let v = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64;
        self.push("l1_loss", Vec::new(), vec![v], Op::L1Loss(pred, target), &[pred, target])
    }

    /// `KL(N(mu, exp(logvar)) ‖ N(0, I))`, summed over the last axis and
    /// averaged over leading rows.
    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Result<Var, TensorError> {
        let (sm, sl) = (self.shape(mu), self.shape(logvar));
        if sm != sl || sm.is_empty() {
            return Err(shape_err("gaussian_kl", format!("{sm:?} vs {sl:?}")));
        }
        let rows = (self.data(mu).len() / sm[sm.len() - 1]) as f64;
        let (m, lv) = (self.data(mu), self.data(logvar));
        let v = m
            .iter()
            .zip(lv)
            .map(|(&u, &l)| 0.5 * (u * u + l.exp() - 1.0 - l))
            .sum::<f64>()
            / rows;
        self.push("gaussian_kl", Vec::new(), vec![v], Op::GaussianKl { mu, logvar }, &[mu, logvar])
    }

    // ----- reverse pass -------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, MatRef::rows(g, n), MatRef::transposed(db, n), 1.0, ga)
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, n, MatRef::transposed(da, k), MatRef::rows(g, n), 1.0, gb)
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        // dA = dC · Bᵀ, where B is k×n (or stored n×k when trans_b)
                        let bt = if *trans_b {
                            MatRef::rows(bi, k)
                        } else {
                            MatRef::transposed(bi, n)
                        };
                        gemm(m, n, k, MatRef::rows(gi, n), bt, 1.0, &mut ga[i * m * k..(i + 1) * m * k]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..bs {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // d(Bstored) = dCᵀ · A  (n×k)
                            gemm(n, m, k, MatRef::transposed(gi, n), MatRef::rows(ai, k), 1.0, dst);
                        } else {
                            gemm(k, m, n, MatRef::transposed(ai, k), MatRef::rows(gi, n), 1.0, dst);
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
                self.accumulate(grads, *b, |gb| {
                    let nb = gb.len();
                    for row in g.chunks(nb) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += sign * y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                self.accumulate(grads, *a, |ga| {
                    for (gar, gr) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                        for ((x, y), bv) in gar.iter_mut().zip(gr).zip(db) {
                            *x += y * bv;
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (ar, gr) in da.chunks(nb).zip(g.chunks(nb)) {
                        for ((x, y), av) in gb.iter_mut().zip(gr).zip(ar) {
                            *x += y * av;
                        }
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            }),
            Op::Relu(x) => {
                let dx = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(dx) {
                        if *v > 0.0 {
                            *a += b;
                        }
                    }
                })
            }
            Op::Exp(x) => self.accumulate(grads, *x, |gx| {
                for ((a, b), y) in gx.iter_mut().zip(g).zip(out) {
                    *a += b * y;
                }
            }),
            Op::Clamp { x, lo, hi } => {
                let dx = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    for ((a, b), v) in gx.iter_mut().zip(g).zip(dx) {
                        if *v >= *lo && *v <= *hi {
                            *a += b;
                        }
                    }
                })
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let dot: f64 = (0..n)
                                .map(|j| g[base + j * inner] * out[base + j * inner])
                                .sum();
                            for j in 0..n {
                                let p = base + j * inner;
                                gx[p] += out[p] * (g[p] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm { x, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let dx = self.data(*x);
                self.accumulate(grads, *x, |gx| {
                    let nf = n as f64;
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mean = (0..n).map(|j| dx[base + j * inner]).sum::<f64>() / nf;
                            let var = (0..n)
                                .map(|j| (dx[base + j * inner] - mean).powi(2))
                                .sum::<f64>()
                                / nf;
                            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                            let mut mg = 0.0;
                            let mut mgy = 0.0;
                            for j in 0..n {
                                let p = base + j * inner;
                                mg += g[p];
                                mgy += g[p] * out[p];
                            }
                            mg /= nf;
                            mgy /= nf;
                            for j in 0..n {
                                let p = base + j * inner;
                                gx[p] += inv * (g[p] - mg - out[p] * mgy);
                            }
                        }
                    }
                })
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (n, o, geom) = self
                    .conv_geom(*x, *w, *b, *stride, *pad)
                    .expect("validated in forward");
                let (pl, ol) = (geom.patch_len(), geom.out_len());
                let img_len = geom.channels * geom.height * geom.width;
                let (dx, dw) = (self.data(*x), self.data(*w));
                self.accumulate(grads, *b, |gb| {
                    for i in 0..n {
                        for (oc, row) in g[i * o * ol..(i + 1) * o * ol].chunks(ol).enumerate() {
                            gb[oc] += row.iter().sum::<f64>();
                        }
                    }
                });
                let mut cols = vec![0.0; pl * ol];
                self.accumulate(grads, *w, |gw| {
                    for i in 0..n {
                        im2col(&dx[i * img_len..(i + 1) * img_len], &geom, &mut cols);
                        let gi = &g[i * o * ol..(i + 1) * o * ol];
                        gemm(o, ol, pl, MatRef::rows(gi, ol), MatRef::transposed(&cols, ol), 1.0, gw);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        let gi = &g[i * o * ol..(i + 1) * o * ol];
                        gemm(pl, o, ol, MatRef::transposed(dw, pl), MatRef::rows(gi, ol), 0.0, &mut cols);
                        col2im(&cols, &geom, &mut gx[i * img_len..(i + 1) * img_len]);
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let c = g[0] / self.data(*x).len() as f64;
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += c))
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b)
            }),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let mut back = vec![0.0; g.len()];
                permute_into(g, node.value.shape(), &inverse, &mut back);
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b)
                });
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, n, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::L1Loss(p, t) => {
                let (dp, dt) = (self.data(*p), self.data(*t));
                let c = g[0] / dp.len() as f64;
                let sign = |a: f64, b: f64| {
                    let d = a - b;
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *p, |gp| {
                    for ((a, &x), &y) in gp.iter_mut().zip(dp).zip(dt) {
                        *a += c * sign(x, y);
                    }
                });
                self.accumulate(grads, *t, |gt| {
                    for ((a, &x), &y) in gt.iter_mut().zip(dp).zip(dt) {
                        *a -= c * sign(x, y);
                    }
                });
            }
            Op::GaussianKl { mu, logvar } => {
                let s = self.shape(*mu);
                let rows = (self.data(*mu).len() / s[s.len() - 1]) as f64;
                let c = g[0] / rows;
                let (dm, dl) = (self.data(*mu), self.data(*logvar));
                self.accumulate(grads, *mu, |gm| {
                    gm.iter_mut().zip(dm).for_each(|(a, u)| *a += c * u)
                });
                self.accumulate(grads, *logvar, |gl| {
                    gl.iter_mut()
                        .zip(dl)
                        .for_each(|(a, l)| *a += c * 0.5 * (l.exp() - 1.0))
                });
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient w.r.t. `v`; zeros when `v` did not contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: shape.clone(),
                data: g.clone(),
                requires_grad: false,
            },
            None => Tensor::zeros(shape),
        }
    }

    /// Whether any gradient flowed into `v`.
    pub fn contributed(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}
