//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! A `Graph` is a tape of eagerly evaluated nodes. `backward` walks the tape
//! in reverse and accumulates gradients into every node that (transitively)
//! depends on a differentiable leaf. Graphs are rebuilt per step; they are
//! cheap at the scales this crate runs at.

use crate::tensor::{gelu, gelu_grad, softmax_rows, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// matrix + row vector, broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// broadcast multiply by a 1x1 node
    ScaleBy(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// A . B^T
    MatmulNT(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// per-row normalization with gain and bias row vectors
    LayerNorm(NodeId, NodeId, NodeId),
    Gelu(NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Sqrt(NodeId),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    MulConst(NodeId, Tensor),
    AddConst(NodeId),
    SliceRows(NodeId, usize, usize),
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn parents(&self, op: &Op) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::ScaleBy(a, b)
            | Op::Matmul(a, b)
            | Op::MatmulNT(a, b) => vec![*a, *b],
            Op::LayerNorm(a, g, b) => vec![*a, *g, *b],
            Op::Scale(a, _)
            | Op::GatherRows(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Sqrt(a)
            | Op::SumAll(a)
            | Op::MulConst(a, _)
            | Op::AddConst(a)
            | Op::SliceRows(a, _, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.nodes[id.0].needs_grad = true;
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push(Op::Div(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!(r.rows, 1, "add_row expects a row vector");
        assert_eq!(m.cols, r.cols, "add_row width mismatch");
        let mut v = m.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                *v.at_mut(i, j) += r.data[j];
            }
        }
        self.push(Op::AddRow(a, row), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x * c);
        self.push(Op::Scale(a, c), v)
    }

    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let c = self.value(s).item();
        let v = self.value(a).map(|x| x * c);
        self.push(Op::ScaleBy(a, s), v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::Matmul(a, b), v)
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(Op::MatmulNT(a, b), v)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Tensor::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            v.data[i * t.cols..(i + 1) * t.cols].copy_from_slice(t.row(id));
        }
        self.push(Op::GatherRows(table, ids.to_vec()), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows {
            let row = &mut v.data[r * x.cols..(r + 1) * x.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&y| (y - m).exp()).sum::<f64>().ln();
            for y in row.iter_mut() {
                *y -= lse;
            }
        }
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (x, g, b) = (self.value(a), self.value(gain), self.value(bias));
        assert_eq!(g.rows, 1);
        assert_eq!(b.rows, 1);
        assert_eq!(g.cols, x.cols);
        let mut v = Tensor::zeros(x.rows, x.cols);
        for r in 0..x.rows {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / x.cols as f64;
            let var = row.iter().map(|&y| (y - mean) * (y - mean)).sum::<f64>() / x.cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..x.cols {
                *v.at_mut(r, j) = g.data[j] * (row[j] - mean) * inv + b.data[j];
            }
        }
        self.push(Op::LayerNorm(a, gain, bias), v)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        // stable ln(1 + e^x) = max(x, 0) + ln(1 + e^-|x|)
        let v = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(Op::Softplus(a), v)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(Op::Sqrt(a), v)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&p| self.value(p).rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&t.data);
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Tensor) -> NodeId {
        let v = self.value(a).zip(&mask, |x, m| x * m);
        self.push(Op::MulConst(a, mask), v)
    }

    pub fn add_const(&mut self, a: NodeId, c: Tensor) -> NodeId {
        let v = self.value(a).zip(&c, |x, y| x + y);
        self.push(Op::AddConst(a), v)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let t = self.value(a);
        let mut v = Tensor::zeros(len, t.cols);
        v.data
            .copy_from_slice(&t.data[start * t.cols..(start + len) * t.cols]);
        self.push(Op::SliceRows(a, start, len), v)
    }

    /// Mean of selected rows, weights as a constant 1 x rows matrix.
    pub fn masked_mean_rows(&mut self, a: NodeId, keep: &[bool]) -> NodeId {
        let rows = self.value(a).rows;
        assert_eq!(keep.len(), rows);
        let n = keep.iter().filter(|&&k| k).count().max(1) as f64;
        let w: Vec<f64> = keep.iter().map(|&k| if k { 1.0 / n } else { 0.0 }).collect();
        let wn = self.constant(Tensor::from_vec(1, rows, w));
        self.matmul(wn, a)
    }

    /// Gradients of a scalar node w.r.t. every node; entries are `None` where
    /// no gradient is needed or reaches.
    pub fn backward(&self, loss: NodeId) -> Vec<Option<Tensor>> {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        grads
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let da = g.zip(self.value(b), |x, y| x * y);
                let db = g.zip(self.value(a), |x, y| x * y);
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::Div(a, b) => {
                let bv = self.value(b);
                let da = g.zip(bv, |x, y| x / y);
                let av = self.value(a);
                let mut db = Tensor::zeros(bv.rows, bv.cols);
                for i in 0..db.len() {
                    db.data[i] = -g.data[i] * av.data[i] / (bv.data[i] * bv.data[i]);
                }
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::AddRow(a, row) => {
                self.acc(grads, a, g.clone());
                let mut dr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for j in 0..g.cols {
                        dr.data[j] += g.at(r, j);
                    }
                }
                self.acc(grads, row, dr);
            }
            Op::Scale(a, c) => {
                self.acc(grads, a, g.map(|x| x * c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(s).item();
                self.acc(grads, a, g.map(|x| x * c));
                let ds = g
                    .data
                    .iter()
                    .zip(&self.value(a).data)
                    .map(|(&x, &y)| x * y)
                    .sum::<f64>();
                self.acc(grads, s, Tensor::scalar(ds));
            }
            Op::Matmul(a, b) => {
                let da = g.matmul_nt(self.value(b));
                let db = self.value(a).matmul_tn(g);
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::MatmulNT(a, b) => {
                // C = A . B^T : dA = dC . B ; dB = dC^T . A
                let da = g.matmul(self.value(b));
                let db = g.matmul_tn(self.value(a));
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(table);
                let mut dt = Tensor::zeros(t.rows, t.cols);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..t.cols {
                        *dt.at_mut(id, j) += g.at(i, j);
                    }
                }
                self.acc(grads, table, dt);
            }
            Op::Softmax(a) => {
                let p = &self.nodes[idx].value;
                let mut da = Tensor::zeros(p.rows, p.cols);
                for r in 0..p.rows {
                    let dot: f64 = (0..p.cols).map(|j| g.at(r, j) * p.at(r, j)).sum();
                    for j in 0..p.cols {
                        *da.at_mut(r, j) = p.at(r, j) * (g.at(r, j) - dot);
                    }
                }
                self.acc(grads, a, da);
            }
            Op::LogSoftmax(a) => {
                let lp = &self.nodes[idx].value;
                let mut da = Tensor::zeros(lp.rows, lp.cols);
                for r in 0..lp.rows {
                    let gsum: f64 = (0..lp.cols).map(|j| g.at(r, j)).sum();
                    for j in 0..lp.cols {
                        *da.at_mut(r, j) = g.at(r, j) - lp.at(r, j).exp() * gsum;
                    }
                }
                self.acc(grads, a, da);
            }
            Op::LayerNorm(a, gain, bias) => {
                let x = self.value(a);
                let gv = self.value(gain);
                let n = x.cols as f64;
                let mut da = Tensor::zeros(x.rows, x.cols);
                let mut dg = Tensor::zeros(1, x.cols);
                let mut db = Tensor::zeros(1, x.cols);
                for r in 0..x.rows {
                    let row = x.row(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|&y| (y - mean) * (y - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&y| (y - mean) * inv).collect();
                    let dy: Vec<f64> = (0..x.cols).map(|j| g.at(r, j)).collect();
                    let dxh: Vec<f64> = (0..x.cols).map(|j| dy[j] * gv.data[j]).collect();
                    let m1 = dxh.iter().sum::<f64>() / n;
                    let m2 = dxh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / n;
                    for j in 0..x.cols {
                        *da.at_mut(r, j) = (dxh[j] - m1 - xhat[j] * m2) * inv;
                        dg.data[j] += dy[j] * xhat[j];
                        db.data[j] += dy[j];
                    }
                }
                self.acc(grads, a, da);
                self.acc(grads, gain, dg);
                self.acc(grads, bias, db);
            }
            Op::Gelu(a) => {
                let x = self.value(a);
                let da = g.zip(x, |gy, xv| gy * gelu_grad(xv));
                self.acc(grads, a, da);
            }
            Op::Relu(a) => {
                let x = self.value(a);
                let da = g.zip(x, |gy, xv| if xv > 0.0 { gy } else { 0.0 });
                self.acc(grads, a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let da = g.zip(y, |gy, yv| gy * (1.0 - yv * yv));
                self.acc(grads, a, da);
            }
            Op::Sqrt(a) => {
                let y = &self.nodes[idx].value;
                let da = g.zip(y, |gy, yv| gy / (2.0 * yv));
                self.acc(grads, a, da);
            }
            Op::Softplus(a) => {
                let x = self.value(a);
                let da = g.zip(x, |gy, xv| gy / (1.0 + (-xv).exp()));
                self.acc(grads, a, da);
            }
            Op::SumAll(a) => {
                let s = g.item();
                let av = self.value(a);
                self.acc(grads, a, Tensor::from_vec(av.rows, av.cols, vec![s; av.len()]));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value(p);
                    let mut dp = Tensor::zeros(t.rows, t.cols);
                    for r in 0..t.rows {
                        for j in 0..t.cols {
                            *dp.at_mut(r, j) = g.at(r, off + j);
                        }
                    }
                    off += t.cols;
                    self.acc(grads, p, dp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let t = self.value(p);
                    let mut dp = Tensor::zeros(t.rows, t.cols);
                    dp.data
                        .copy_from_slice(&g.data[off * t.cols..(off + t.rows) * t.cols]);
                    off += t.rows;
                    self.acc(grads, p, dp);
                }
            }
            Op::MulConst(a, mask) => {
                self.acc(grads, a, g.zip(&mask, |x, m| x * m));
            }
            Op::AddConst(a) => {
                self.acc(grads, a, g.clone());
            }
            Op::SliceRows(a, start, _len) => {
                let t = self.value(a);
                let mut da = Tensor::zeros(t.rows, t.cols);
                for r in 0..g.rows {
                    for j in 0..g.cols {
                        *da.at_mut(start + r, j) = g.at(r, j);
                    }
                }
                self.acc(grads, a, da);
            }
        }
    }
}

/// Compare analytic gradients against central finite differences.
///
/// `f` rebuilds the scalar function on a fresh graph from leaf values; the
/// returned value is the maximum relative error over all leaf components.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &ids);
    let grads = graph.backward(out);

    let mut max_rel = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads[ids[i].0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data[j];
            // Floor above the central-difference noise floor (~ulp(f)/h), so
            // components whose true gradient is zero don't amplify FD noise.
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    max_rel
}

/// Finite-difference check on a random subset of input components.
///
/// Same contract as [`finite_diff_check`] but only `probes` randomly chosen
/// components are perturbed, which keeps the check fast on large blocks.
pub fn finite_diff_check_probes<F>(
    f: F,
    inputs: &[Tensor],
    h: f64,
    probes: usize,
    rng: &mut impl rand::Rng,
) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };

    let mut graph = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let out = f(&mut graph, &ids);
    let grads = graph.backward(out);

    let total: usize = inputs.iter().map(|t| t.len()).sum();
    let mut max_rel = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= inputs[which].len() {
            flat -= inputs[which].len();
            which += 1;
        }
        let analytic = grads[ids[which].0]
            .as_ref()
            .map(|g| g.data[flat])
            .unwrap_or(0.0);
        let mut plus = inputs.to_vec();
        plus[which].data[flat] += h;
        let mut minus = inputs.to_vec();
        minus[which].data[flat] -= h;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max((analytic - numeric).abs() / denom);
    }
    max_rel
}
