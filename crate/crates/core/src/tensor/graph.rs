use super::kernels::{gelu, gelu_grad, gemm, log_softmax_row, softmax_row};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    LayerNormRows { input: Var, inv_std: Vec<f64> },
    Gather { input: Var, index: Vec<usize> },
    MeanGroups { input: Var, groups: usize },
    Attention { qkv: Var, groups: usize, heads: usize, probs: Vec<f64> },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }
}

/// Define-by-run differentiation graph.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph is built once per
/// forward pass and dropped afterwards.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Inserts a tensor as a leaf; tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, tensor.requires_grad())
    }

    /// Inserts an untracked leaf.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, false)
    }

    /// Inserts a tracked leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected rank-2 input, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    fn map(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip(Op::Add(a, b), a, b, |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip(Op::Sub(a, b), a, b, |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip(Op::Mul(a, b), a, b, |x, y| x * y))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (na, nb) = (self.node(a).value.len(), self.node(b).value.len());
        let (ca, cb) = (self.node(a).cols(), self.node(b).cols());
        if ca != cb || na % nb != 0 {
            return Err(Error::shape(
                op,
                format!("cannot tile {:?} over {:?}", self.shape(b), self.shape(a)),
            ));
        }
        Ok(nb)
    }

    /// `a + b` where `b`'s rows are tiled down `a` (bias rows, positional tables).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.broadcast_check("add_broadcast", a, b)?;
        let bv = self.value(b);
        let value = self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % nb]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::AddBroadcast(a, b), rg))
    }

    /// `a * b` elementwise with `b`'s rows tiled down `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.broadcast_check("mul_broadcast", a, b)?;
        let bv = self.value(b);
        let value = self.value(a).iter().enumerate().map(|(i, &x)| x * bv[i % nb]).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::MulBroadcast(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(Op::Scale(a, s), a, |x| x * s)
    }

    /// Multiplies every entry of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.node(s).value.len() != 1 {
            return Err(Error::shape("scale_by", format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let k = self.scalar(s);
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(&[a, s]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::ScaleBy(a, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let mut value = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut value, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let src = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], value, Op::Transpose(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(Op::Log(a), a, f64::ln)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(Op::Abs(a), a, f64::abs)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(Op::Gelu(a), a, gelu)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Mean(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, cols) = self.rank2("concat_rows", first)?;
        let mut rows = 0;
        let mut value = Vec::new();
        for &p in parts {
            let (r, c) = self.rank2("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("column counts {cols} vs {c}")));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, cols], value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (rows, _) = self.rank2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rank2("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, total], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("softmax_rows", a)?;
        let mut value = vec![0.0; m * n];
        for (src, dst) in self.value(a).chunks(n).zip(value.chunks_mut(n)) {
            softmax_row(src, dst);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::SoftmaxRows(a), rg))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("log_softmax_rows", a)?;
        let mut value = vec![0.0; m * n];
        for (src, dst) in self.value(a).chunks(n).zip(value.chunks_mut(n)) {
            log_softmax_row(src, dst);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::LogSoftmaxRows(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("l2_normalize_rows", a)?;
        let mut value = self.value(a).to_vec();
        let mut norms = Vec::with_capacity(m);
        for (row, dst) in value.chunks_mut(n).enumerate() {
            let norm = dst.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNorm { row });
            }
            dst.iter_mut().for_each(|x| *x /= norm);
            norms.push(norm);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::L2NormalizeRows { input: a, norms }, rg))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.rank2("layer_norm_rows", a)?;
        let mut value = self.value(a).to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in value.chunks_mut(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, n], value, Op::LayerNormRows { input: a, inv_std }, rg))
    }

    /// `out.flat[i] = a.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(a).value.len();
        if shape.iter().product::<usize>() != index.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("gather", format!("{} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of bounds for {n} elements")));
        }
        let src = self.value(a);
        let value = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Gather { input: a, index }, rg))
    }

    /// Selects whole rows of a rank-2 tensor.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.rank2("select_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("select_rows", format!("row {bad} out of {m}")));
        }
        let index = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(a, index, vec![rows.len(), n])
    }

    /// Averages consecutive blocks of rows: `[groups * t, c] -> [groups, c]`.
    pub fn mean_groups(&mut self, a: Var, groups: usize) -> Result<Var> {
        let (m, n) = self.rank2("mean_groups", a)?;
        if groups == 0 || m % groups != 0 {
            return Err(Error::shape("mean_groups", format!("{m} rows into {groups} groups")));
        }
        let t = m / groups;
        let src = self.value(a);
        let mut value = vec![0.0; groups * n];
        for g in 0..groups {
            let dst = &mut value[g * n..(g + 1) * n];
            for r in 0..t {
                for (d, s) in dst.iter_mut().zip(&src[(g * t + r) * n..(g * t + r + 1) * n]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d /= t as f64);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![groups, n], value, Op::MeanGroups { input: a, groups }, rg))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[groups * t, 3 * d]` with query, key and value blocks side by
    /// side; attention runs independently inside each group of `t` rows. The
    /// result is `[groups * t, d]` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, groups: usize, heads: usize) -> Result<Var> {
        let (m, w) = self.rank2("attention", qkv)?;
        if groups == 0 || m % groups != 0 || w % 3 != 0 || heads == 0 || (w / 3) % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("qkv {m}x{w} with {groups} groups and {heads} heads"),
            ));
        }
        let t = m / groups;
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv);
        let mut out = vec![0.0; m * d];
        let mut probs = vec![0.0; groups * heads * t * t];
        let mut scores = vec![0.0; t];
        for g in 0..groups {
            for h in 0..heads {
                let p_block = &mut probs[(g * heads + h) * t * t..(g * heads + h + 1) * t * t];
                for i in 0..t {
                    let q = &src[(g * t + i) * w + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let k = &src[(g * t + j) * w + d + h * dh..][..dh];
                        *s = scale * q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let p_row = &mut p_block[i * t..(i + 1) * t];
                    softmax_row(&scores, p_row);
                    let o = &mut out[(g * t + i) * d + h * dh..][..dh];
                    for (j, &p) in p_row.iter().enumerate() {
                        let v = &src[(g * t + j) * w + 2 * d + h * dh..][..dh];
                        for (oo, vv) in o.iter_mut().zip(v) {
                            *oo += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[qkv]);
        Ok(self.push(vec![m, d], out, Op::Attention { qkv, groups, heads, probs }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.node(a).value.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape, value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a one-element `loss`.
    ///
    /// Gradients from any previous call are discarded, not accumulated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.node(loss).value.len() != 1 {
            return Err(Error::NonScalarLoss { shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.node(loss).requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[idx];
        // Runs `f` on the gradient buffer of `v` if `v` is tracked.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64], &[f64])| {
            let n = &nodes[v.0];
            if n.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf, &n.value);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga, _| add_into(ga, g));
                acc(*b, &mut |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga, _| add_into(ga, g));
                acc(*b, &mut |gb, _| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |ga, _| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &mut |gb, _| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddBroadcast(a, b) => {
                acc(*a, &mut |ga, _| add_into(ga, g));
                acc(*b, &mut |gb, _| {
                    let nb = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += gi;
                    }
                });
            }
            Op::MulBroadcast(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let nb = bv.len();
                acc(*a, &mut |ga, _| {
                    for (i, (x, gi)) in ga.iter_mut().zip(g).enumerate() {
                        *x += gi * bv[i % nb];
                    }
                });
                acc(*b, &mut |gb, _| {
                    for (i, (gi, ai)) in g.iter().zip(av).enumerate() {
                        gb[i % nb] += gi * ai;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga, _| {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += s * gi);
            }),
            Op::ScaleBy(a, s) => {
                let k = nodes[s.0].value[0];
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga, _| ga.iter_mut().zip(g).for_each(|(x, gi)| *x += k * gi));
                acc(*s, &mut |gs, _| gs[0] += g.iter().zip(av).map(|(gi, ai)| gi * ai).sum::<f64>());
            }
            Op::MatMul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let (m, k, n) = (na.rows(), na.cols(), nb.cols());
                // dA = G B^T, dB = A^T G
                acc(*a, &mut |ga, _| gemm(m, n, k, g, false, &nb.value, true, ga, 1.0));
                acc(*b, &mut |gb, _| gemm(k, m, n, &na.value, true, g, false, gb, 1.0));
            }
            Op::Transpose(a) => {
                let (m, n) = (nodes[a.0].rows(), nodes[a.0].cols());
                acc(*a, &mut |ga, _| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |ga, _| {
                    for ((x, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *x += gi * yi;
                    }
                });
            }
            Op::Log(a) => acc(*a, &mut |ga, av| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi / ai;
                }
            }),
            Op::Abs(a) => acc(*a, &mut |ga, av| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    if *ai > 0.0 {
                        *x += gi;
                    } else if *ai < 0.0 {
                        *x -= gi;
                    }
                }
            }),
            Op::Gelu(a) => acc(*a, &mut |ga, av| {
                for ((x, gi), ai) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi * gelu_grad(*ai);
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga, _| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => acc(*a, &mut |ga, _| {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |gp, _| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].cols();
                    acc(*p, &mut |gp, _| {
                        for (i, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::SoftmaxRows(a) => {
                let n = node.cols();
                let y = &node.value;
                acc(*a, &mut |ga, _| {
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let n = node.cols();
                let y = &node.value;
                acc(*a, &mut |ga, _| {
                    for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let total: f64 = gr.iter().sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += gi - yi.exp() * total;
                        }
                    }
                });
            }
            Op::L2NormalizeRows { input, norms } => {
                let n = node.cols();
                let y = &node.value;
                acc(*input, &mut |ga, _| {
                    for (r, ((gr, yr), xr)) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += (gi - yi * dot) / norms[r];
                        }
                    }
                });
            }
            Op::LayerNormRows { input, inv_std } => {
                let n = node.cols();
                let y = &node.value;
                acc(*input, &mut |ga, _| {
                    for (r, ((gr, yr), xr)) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let mean_g = gr.iter().sum::<f64>() / n as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for ((x, gi), yi) in xr.iter_mut().zip(gr).zip(yr) {
                            *x += inv_std[r] * (gi - mean_g - yi * mean_gy);
                        }
                    }
                });
            }
            Op::Gather { input, index } => acc(*input, &mut |ga, _| {
                for (gi, &i) in g.iter().zip(index) {
                    ga[i] += gi;
                }
            }),
            Op::MeanGroups { input, groups } => {
                let n = node.cols();
                let t = nodes[input.0].rows() / groups;
                acc(*input, &mut |ga, _| {
                    for (r, xr) in ga.chunks_mut(n).enumerate() {
                        let gr = &g[(r / t) * n..(r / t + 1) * n];
                        for (x, gi) in xr.iter_mut().zip(gr) {
                            *x += gi / t as f64;
                        }
                    }
                });
            }
            Op::Attention { qkv, groups, heads, probs } => {
                let src = &nodes[qkv.0].value;
                acc(*qkv, &mut |gq, _| attention_backward(src, g, probs, *groups, *heads, gq));
            }
            Op::Reshape(a) => acc(*a, &mut |ga, _| add_into(ga, g)),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn attention_backward(src: &[f64], g: &[f64], probs: &[f64], groups: usize, heads: usize, gq: &mut [f64]) {
    let t = ((probs.len() / (groups * heads)) as f64).sqrt().round() as usize;
    let n_rows = groups * t;
    let d = g.len() / n_rows;
    let w = 3 * d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t];
    for grp in 0..groups {
        for h in 0..heads {
            let p_block = &probs[(grp * heads + h) * t * t..(grp * heads + h + 1) * t * t];
            for i in 0..t {
                let go = &g[(grp * t + i) * d + h * dh..][..dh];
                let p_row = &p_block[i * t..(i + 1) * t];
                // dP and dV
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let base = (grp * t + j) * w + 2 * d + h * dh;
                    let v = &src[base..base + dh];
                    *dpj = go.iter().zip(v).map(|(a, b)| a * b).sum();
                    let pij = p_row[j];
                    for (x, goo) in gq[base..base + dh].iter_mut().zip(go) {
                        *x += pij * goo;
                    }
                }
                let dot: f64 = dp.iter().zip(p_row).map(|(a, b)| a * b).sum();
                let q_base = (grp * t + i) * w + h * dh;
                for j in 0..t {
                    let ds = scale * p_row[j] * (dp[j] - dot);
                    if ds == 0.0 {
                        continue;
                    }
                    let k_base = (grp * t + j) * w + d + h * dh;
                    for c in 0..dh {
                        gq[q_base + c] += ds * src[k_base + c];
                        gq[k_base + c] += ds * src[q_base + c];
                    }
                }
            }
        }
    }
}
