//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node replays the record in reverse and
//! accumulates gradients into every node that depends on a leaf created
//! with [`Graph::leaf`]. Constants never receive gradients.

use crate::nn::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Square(Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Reshape(Var),
    Permute { src: Var, offsets: Vec<usize> },
    Softmax(Var),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Gather { table: Var, rows: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (a parameter or anything we want a gradient for).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("graph leaf")?;
        Ok(self.push(value, Op::Leaf, true))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        value.check_finite("graph input")?;
        Ok(self.push(value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient populated by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn elementwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, data).unwrap(), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.elementwise(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.elementwise(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.elementwise(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn trailing(&self, a: Var, b: Var, op: &str) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!(
                "{op}: {sb:?} is not a trailing shape of {sa:?}"
            )));
        }
        Ok(self.value(b).numel())
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.trailing(a, b, "add_broadcast")?;
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBroadcast(a, b), rg))
    }

    /// `a * b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.trailing(a, b, "mul_broadcast")?;
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % nb])
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Scale(a, s), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Square(a), rg)
    }

    /// `[.., k] x [k, m] -> [.., m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (k, m) = (sb[0], sb[1]);
        let n = self.value(a).numel() / k;
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = m;
        let mut out = vec![0.0; n * m];
        gemm(
            n,
            k,
            m,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::MatMul(a, b), rg))
    }

    /// Batched `[g, n, k] x [g, k, m]`, or `[g, n, k] x [g, m, k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape(format!("batch_matmul: {sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, n, k) = (sa[0], sa[1], sa[2]);
        let (kb, m) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(bad());
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; g * n * m];
        for gi in 0..g {
            let ab = &ad[gi * n * k..(gi + 1) * n * k];
            let bb = &bd[gi * k * m..(gi + 1) * k * m];
            let ob = &mut out[gi * n * m..(gi + 1) * n * m];
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for p in 0..k {
                        let bv = if trans_b {
                            bb[j * k + p]
                        } else {
                            bb[p * m + j]
                        };
                        acc += ab[i * k + p] * bv;
                    }
                    ob[i * m + j] = acc;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![g, n, m], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank
            || axes
                .iter()
                .any(|&x| x >= rank || std::mem::replace(&mut seen[x], true))
        {
            return Err(Error::Shape(format!(
                "permute: axes {axes:?} for shape {shape:?}"
            )));
        }
        let mut in_strides = vec![1usize; rank];
        for d in (0..rank.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let strides: Vec<usize> = axes.iter().map(|&x| in_strides[x]).collect();
        let numel: usize = shape.iter().product();
        let mut offsets = Vec::with_capacity(numel);
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            offsets.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let src = self.data(a);
        let data = offsets.iter().map(|&o| src[o]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute { src: a, offsets },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let d = self.value(a).last_dim();
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Softmax(a), rg)
    }

    /// Normalizes the last axis to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let d = self.value(a).last_dim();
        let mut data = self.data(a).to_vec();
        let mut inv_std = Vec::with_capacity(data.len() / d);
        for row in data.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(shape, data).unwrap(),
            Op::LayerNorm { src: a, inv_std },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, data).unwrap(), Op::Gelu(a), rg)
    }

    /// Row lookup into a `[n, d]` table, producing `[rows.len(), d]`.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Shape(format!("gather: table shape {shape:?}")));
        }
        let (n, d) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("gather: row {bad} out of {n}")));
        }
        let src = self.data(table);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], data)?,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!(
                "concat: axis {axis} for shape {base:?}"
            )));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape(format!(
                    "concat: {s:?} vs {base:?} on axis {axis}"
                )));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape(format!(
                "slice: {start}..{end} on axis {axis} of {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                src: a,
                axis,
                start,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Populates gradients of every node `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            };
        }
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let n = &self.nodes[v.0];
        if !n.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.numel()]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Parents may repeat (e.g. `mul(x, x)`), so each parent's buffer is
        // borrowed on its own.
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = self.slot(grads, $v) {
                    $body
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| axpy(ga, 1.0, g));
                with_grad!(*b, |gb| axpy(gb, 1.0, g));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| axpy(ga, 1.0, g));
                with_grad!(*b, |gb| axpy(gb, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                with_grad!(*a, |ga| for (k, v) in ga.iter_mut().enumerate() {
                    *v += g[k] * bd[k];
                });
                with_grad!(*b, |gb| for (k, v) in gb.iter_mut().enumerate() {
                    *v += g[k] * ad[k];
                });
            }
            Op::AddBroadcast(a, b) => {
                with_grad!(*a, |ga| axpy(ga, 1.0, g));
                with_grad!(*b, |gb| {
                    let nb = gb.len();
                    for (k, &gv) in g.iter().enumerate() {
                        gb[k % nb] += gv;
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let nb = bd.len();
                with_grad!(*a, |ga| for (k, v) in ga.iter_mut().enumerate() {
                    *v += g[k] * bd[k % nb];
                });
                with_grad!(*b, |gb| for (k, &gv) in g.iter().enumerate() {
                    gb[k % nb] += gv * ad[k];
                });
            }
            Op::Scale(a, s) => with_grad!(*a, |ga| axpy(ga, *s, g)),
            Op::Square(a) => {
                let ad = self.data(*a);
                with_grad!(*a, |ga| for (k, v) in ga.iter_mut().enumerate() {
                    *v += 2.0 * ad[k] * g[k];
                });
            }
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, m) = (sb[0], sb[1]);
                let n = self.value(*a).numel() / k;
                let (ad, bd) = (self.data(*a), self.data(*b));
                with_grad!(*a, |ga| gemm(n, m, k, g, false, bd, true, ga, true));
                with_grad!(*b, |gb| gemm(k, n, m, ad, true, g, false, gb, true));
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (gn, n, k) = (sa[0], sa[1], sa[2]);
                let m = node.value.shape()[2];
                let (ad, bd) = (self.data(*a), self.data(*b));
                let bidx = |p: usize, j: usize| if *trans_b { j * k + p } else { p * m + j };
                with_grad!(*a, |ga| for gi in 0..gn {
                    let (go, bo) = (gi * n * m, gi * k * m);
                    for i in 0..n {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += g[go + i * m + j] * bd[bo + bidx(p, j)];
                            }
                            ga[gi * n * k + i * k + p] += s;
                        }
                    }
                });
                with_grad!(*b, |gb| for gi in 0..gn {
                    let (go, ao, bo) = (gi * n * m, gi * n * k, gi * k * m);
                    for p in 0..k {
                        for j in 0..m {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += ad[ao + i * k + p] * g[go + i * m + j];
                            }
                            gb[bo + bidx(p, j)] += s;
                        }
                    }
                });
            }
            Op::Reshape(a) => with_grad!(*a, |ga| axpy(ga, 1.0, g)),
            Op::Permute { src, offsets } => {
                with_grad!(*src, |ga| for (k, &o) in offsets.iter().enumerate() {
                    ga[o] += g[k];
                });
            }
            Op::Softmax(a) => {
                let d = node.value.last_dim();
                with_grad!(*a, |ga| for ((gr, yr), gar) in
                    g.chunks(d).zip(out.chunks(d)).zip(ga.chunks_mut(d))
                {
                    let s = dot(gr, yr);
                    for j in 0..d {
                        gar[j] += yr[j] * (gr[j] - s);
                    }
                });
            }
            Op::LayerNorm { src, inv_std } => {
                let d = node.value.last_dim();
                let df = d as f64;
                with_grad!(*src, |ga| for (r, ((gr, yr), gar)) in g
                    .chunks(d)
                    .zip(out.chunks(d))
                    .zip(ga.chunks_mut(d))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / df;
                    let mgy = dot(gr, yr) / df;
                    for j in 0..d {
                        gar[j] += inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                });
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                with_grad!(*a, |ga| for (k, v) in ga.iter_mut().enumerate() {
                    *v += g[k] * gelu_grad(ad[k]);
                });
            }
            Op::Gather { table, rows } => {
                let d = self.shape(*table)[1];
                with_grad!(*table, |gt| for (k, &r) in rows.iter().enumerate() {
                    axpy(&mut gt[r * d..(r + 1) * d], 1.0, &g[k * d..(k + 1) * d]);
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    with_grad!(p, |gp| for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        axpy(&mut gp[o * chunk..(o + 1) * chunk], 1.0, src);
                    });
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let in_shape = self.shape(*src);
                let len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let (in_row, out_row) = (in_shape[*axis] * inner, len * inner);
                with_grad!(*src, |ga| for o in 0..outer {
                    let dst = o * in_row + start * inner;
                    axpy(
                        &mut ga[dst..dst + out_row],
                        1.0,
                        &g[o * out_row..(o + 1) * out_row],
                    );
                });
            }
            Op::Sum(a) => with_grad!(*a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                with_grad!(*a, |ga| ga.iter_mut().for_each(|v| *v += g[0] / n));
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c (m x n) [+]= A (m x k) * B (k x n)`. A transposed operand is stored
/// row-major in its transposed shape.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every access made by dgemm for the
    // given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
