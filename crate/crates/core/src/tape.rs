//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to apply the chain rule later. Nodes are only ever appended,
//! so creation order is a topological order and [`Tape::backward`] is a
//! single reverse sweep that visits each node once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{axis_layout, Mask, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Transpose {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ScaleBy {
        x: Var,
        s: Var,
        axis: Option<usize>,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    L2Normalize {
        x: Var,
        axis: usize,
        eps: f64,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Permute { .. } => "permute",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::Scale { .. } => "scale",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::LayerNorm { .. } => "layer_norm",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records tensor operations for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Registers a tensor, keeping its `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        self.push(tensor, Op::Leaf)
    }

    /// Registers a tensor that receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Registers a tensor that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Name of the operation that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let requires = inputs.iter().any(|&v| self.requires(v));
        let value = Tensor::new(shape, data)
            .expect("op produced inconsistent shape")
            .with_requires_grad(requires);
        self.push(value, op)
    }

    /// Batched matrix product `[.., m, k] x [.., k, n]`.
    ///
    /// Leading batch extents must match, or one operand may be a plain
    /// matrix shared across the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let (a_batched, b_batched, lead) = if ba == bb {
            (!ba.is_empty(), !bb.is_empty(), ba.to_vec())
        } else if bb.is_empty() {
            (true, false, ba.to_vec())
        } else if ba.is_empty() {
            (false, true, bb.to_vec())
        } else {
            return Err(mismatch());
        };
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            if a_batched && !b_batched {
                gemm(batch * m, k, n, ad, false, bd, false, &mut out, false);
            } else {
                for p in 0..batch {
                    let ap = if a_batched { &ad[p * m * k..(p + 1) * m * k] } else { ad };
                    let bp = if b_batched { &bd[p * k * n..(p + 1) * k * n] } else { bd };
                    gemm(m, k, n, ap, false, bp, false, &mut out[p * m * n..(p + 1) * m * n], false);
                }
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        Ok(self.push_derived(
            shape,
            out,
            &[a, b],
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "transpose needs rank >= 2".into(),
            });
        }
        let data = transpose_last2(self.data(x), &shape);
        let mut out_shape = shape;
        out_shape.swap(r - 2, r - 1);
        Ok(self.push_derived(out_shape, data, &[x], Op::Transpose { x }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "permutation {axes:?} invalid for rank {}",
                shape.len()
            )));
        }
        let (data, out_shape) = permute_data(self.data(x), &shape, axes);
        Ok(self.push_derived(out_shape, data, &[x], Op::Permute { x, axes: axes.to_vec() }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push_derived(shape.to_vec(), data, &[x], Op::Reshape { x }))
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise `a + b`, where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("add", a, b)?;
        let bd = self.data(b);
        let nb = bd.len();
        let data = self.data(a).iter().enumerate().map(|(i, x)| x + bd[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, data, &[a, b], Op::Add { a, b }))
    }

    /// Elementwise `a * b`, where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul", a, b)?;
        let bd = self.data(b);
        let nb = bd.len();
        let data = self.data(a).iter().enumerate().map(|(i, x)| x * bd[i % nb]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_derived(shape, data, &[a, b], Op::Mul { a, b }))
    }

    /// Multiplies `x` by a differentiable scale.
    ///
    /// With `axis == None`, `s` must hold one element. Otherwise `s` has one
    /// entry per index of `x` along `axis`.
    pub fn scale_by(&mut self, x: Var, s: Var, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let sd = self.data(s).to_vec();
        let data = match axis {
            None => {
                if sd.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        op: "scale_by",
                        lhs: shape,
                        rhs: self.shape(s).to_vec(),
                    });
                }
                self.data(x).iter().map(|v| v * sd[0]).collect()
            }
            Some(axis) => {
                let (_, len, inner) = axis_layout(&shape, axis)?;
                if sd.len() != len {
                    return Err(Error::ShapeMismatch {
                        op: "scale_by",
                        lhs: shape,
                        rhs: self.shape(s).to_vec(),
                    });
                }
                self.data(x)
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * sd[(i / inner) % len])
                    .collect()
            }
        };
        Ok(self.push_derived(shape, data, &[x, s], Op::ScaleBy { x, s, axis }))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_derived(shape, data, &[x], Op::Relu { x })
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_layout(&shape, axis)?;
        let xd = self.data(x);
        if xd.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax"));
        }
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| xd[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (xd[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        Ok(self.push_derived(shape, out, &[x], Op::Softmax { x, axis }))
    }

    /// `x / (||x|| + eps)` for every slice along `axis`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_layout(&shape, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let norm = (0..len).map(|i| xd[at(i)] * xd[at(i)]).sum::<f64>().sqrt();
                norms[o * inner + j] = norm;
                let denom = norm + eps;
                for i in 0..len {
                    out[at(i)] = xd[at(i)] / denom;
                }
            }
        }
        Ok(self.push_derived(shape, out, &[x], Op::L2Normalize { x, axis, eps, norms }))
    }

    /// Layer normalization over the trailing axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::InvalidShape {
            shape: shape.clone(),
            reason: "layer_norm needs rank >= 1".into(),
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * gd[c] + bd[c];
            }
        }
        Ok(self.push_derived(
            shape,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Replaces blocked positions with `value`; they pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &Mask, value: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dense = mask.broadcast_to(&shape)?;
        let data = self
            .data(x)
            .iter()
            .zip(&dense)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        Ok(self.push_derived(shape, data, &[x], Op::MaskedFill { x, mask: dense }))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                shape,
                reason: "gather expects a [vocab, d] table".into(),
            });
        }
        let (vocab, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Empty("gather ids"));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocabulary { id, vocab });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        Ok(self.push_derived(
            vec![ids.len(), d],
            out,
            &[table],
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean token cross-entropy over rows of `[.., vocab]` logits.
    ///
    /// Rows whose target is `None` (padding) are excluded from both the sum
    /// and the count. `smoothing` mixes the one-hot target with a uniform
    /// distribution.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], smoothing: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or(Error::Empty("logits"))?;
        let rows = self.value(logits).numel() / vocab;
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; ld.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for c in 0..vocab {
                probs[r * vocab + c] = (row[c] - log_z).exp();
            }
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::OutOfVocabulary { id: t, vocab });
                }
                let nll = log_z - row[t];
                let loss = if smoothing > 0.0 {
                    let mean_nll = row.iter().map(|v| log_z - v).sum::<f64>() / vocab as f64;
                    (1.0 - smoothing) * nll + smoothing * mean_nll
                } else {
                    nll
                };
                total += loss;
                count += 1;
            }
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        Ok(self.push_derived(
            Vec::new(),
            vec![value],
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push_derived(Vec::new(), vec![s], &[x], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push_derived(Vec::new(), vec![s], &[x], Op::Mean { x })
    }

    /// Inverted dropout with a freshly sampled mask; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let numel = self.value(x).numel();
        let mask: Vec<f64> = (0..numel).map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep }).collect();
        let m = self.constant(Tensor::new(shape, mask)?);
        self.mul(x, m)
    }

    /// Populates `grad` on every node that requires one, seeded with
    /// d(loss)/d(loss) = 1. Earlier gradients on this tape are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            let g = if node.value.requires_grad() { g.or_else(|| Some(vec![0.0; node.value.numel()])) } else { None };
            node.value.set_grad(g);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                a_batched,
                b_batched,
            } => {
                let ad = self.data(a);
                let bd = self.data(b);
                if self.requires(a) {
                    let ga = self.grad_slot(grads, a);
                    if a_batched && !b_batched {
                        gemm(batch * m, n, k, g, false, bd, true, ga, true);
                    } else {
                        for p in 0..batch {
                            let gp = &g[p * m * n..(p + 1) * m * n];
                            let bp = if b_batched { &bd[p * k * n..(p + 1) * k * n] } else { bd };
                            let gap = if a_batched { &mut ga[p * m * k..(p + 1) * m * k] } else { &mut ga[..] };
                            gemm(m, n, k, gp, false, bp, true, gap, true);
                        }
                    }
                }
                if self.requires(b) {
                    let gb = self.grad_slot(grads, b);
                    if a_batched && !b_batched {
                        gemm(k, batch * m, n, ad, true, g, false, gb, true);
                    } else {
                        for p in 0..batch {
                            let gp = &g[p * m * n..(p + 1) * m * n];
                            let ap = if a_batched { &ad[p * m * k..(p + 1) * m * k] } else { ad };
                            let gbp = if b_batched { &mut gb[p * k * n..(p + 1) * k * n] } else { &mut gb[..] };
                            gemm(k, m, n, ap, true, gp, false, gbp, true);
                        }
                    }
                }
            }
            &Op::Transpose { x } => {
                if self.requires(x) {
                    let back = transpose_last2(g, node.value.shape());
                    add_into(self.grad_slot(grads, x), &back);
                }
            }
            Op::Permute { x, axes } => {
                if self.requires(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inverse);
                    add_into(self.grad_slot(grads, *x), &back);
                }
            }
            &Op::Reshape { x } => {
                if self.requires(x) {
                    add_into(self.grad_slot(grads, x), g);
                }
            }
            &Op::Add { a, b } => {
                if self.requires(a) {
                    add_into(self.grad_slot(grads, a), g);
                }
                if self.requires(b) {
                    let gb = self.grad_slot(grads, b);
                    let nb = gb.len();
                    for (i, v) in g.iter().enumerate() {
                        gb[i % nb] += v;
                    }
                }
            }
            &Op::Mul { a, b } => {
                let ad = self.data(a);
                let bd = self.data(b);
                let nb = bd.len();
                if self.requires(a) {
                    let ga = self.grad_slot(grads, a);
                    for (i, v) in g.iter().enumerate() {
                        ga[i] += v * bd[i % nb];
                    }
                }
                if self.requires(b) {
                    let gb = self.grad_slot(grads, b);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % nb] += v * ad[i];
                    }
                }
            }
            &Op::ScaleBy { x, s, axis } => {
                let xd = self.data(x);
                let sd = self.data(s);
                let index: Box<dyn Fn(usize) -> usize> = match axis {
                    None => Box::new(|_| 0),
                    Some(axis) => {
                        let (_, len, inner) = axis_layout(node.value.shape(), axis).expect("validated in forward");
                        Box::new(move |i| (i / inner) % len)
                    }
                };
                if self.requires(x) {
                    let gx = self.grad_slot(grads, x);
                    for (i, v) in g.iter().enumerate() {
                        gx[i] += v * sd[index(i)];
                    }
                }
                if self.requires(s) {
                    let gs = self.grad_slot(grads, s);
                    for (i, v) in g.iter().enumerate() {
                        gs[index(i)] += v * xd[i];
                    }
                }
            }
            &Op::Scale { x, c } => {
                if self.requires(x) {
                    let gx = self.grad_slot(grads, x);
                    for (a, v) in gx.iter_mut().zip(g) {
                        *a += v * c;
                    }
                }
            }
            &Op::Relu { x } => {
                if self.requires(x) {
                    let xd = self.data(x);
                    let gx = self.grad_slot(grads, x);
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if self.requires(x) {
                    let (outer, len, inner) = axis_layout(node.value.shape(), axis).expect("validated in forward");
                    let gx = self.grad_slot(grads, x);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * out[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += out[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, axis, eps, norms } => {
                if self.requires(*x) {
                    let (outer, len, inner) = axis_layout(node.value.shape(), *axis).expect("validated in forward");
                    let xd = self.data(*x);
                    let gx = self.grad_slot(grads, *x);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let norm = norms[o * inner + j];
                            let denom = norm + eps;
                            let coupling = if norm > 0.0 {
                                let dot: f64 = (0..len).map(|i| g[at(i)] * xd[at(i)]).sum();
                                dot / (norm * denom * denom)
                            } else {
                                0.0
                            };
                            for i in 0..len {
                                gx[at(i)] += g[at(i)] / denom - xd[at(i)] * coupling;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gain).numel();
                let rows = g.len() / d;
                let gd = self.data(*gain);
                if self.requires(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for c in 0..d {
                            let gh = gr[c] * gd[c];
                            mean_gh += gh;
                            mean_ghh += gh * hr[c];
                        }
                        mean_gh /= d as f64;
                        mean_ghh /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] += inv_std[r] * (gr[c] * gd[c] - mean_gh - hr[c] * mean_ghh);
                        }
                    }
                }
                if self.requires(*gain) {
                    let gg = self.grad_slot(grads, *gain);
                    for (i, v) in g.iter().enumerate() {
                        gg[i % d] += v * xhat[i];
                    }
                }
                if self.requires(*bias) {
                    let gb = self.grad_slot(grads, *bias);
                    for (i, v) in g.iter().enumerate() {
                        gb[i % d] += v;
                    }
                }
            }
            Op::MaskedFill { x, mask } => {
                if self.requires(*x) {
                    let gx = self.grad_slot(grads, *x);
                    for i in 0..g.len() {
                        if !mask[i] {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.requires(*table) {
                    let d = self.shape(*table)[1];
                    let gt = self.grad_slot(grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
                count,
            } => {
                if self.requires(*logits) && *count > 0 {
                    let vocab = *self.shape(*logits).last().expect("rank >= 1");
                    let scale = g[0] / *count as f64;
                    let gl = self.grad_slot(grads, *logits);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..vocab {
                            let mut q = smoothing / vocab as f64;
                            if c == t {
                                q += 1.0 - smoothing;
                            }
                            gl[r * vocab + c] += scale * (probs[r * vocab + c] - q);
                        }
                    }
                }
            }
            &Op::Sum { x } => {
                if self.requires(x) {
                    for v in self.grad_slot(grads, x).iter_mut() {
                        *v += g[0];
                    }
                }
            }
            &Op::Mean { x } => {
                if self.requires(x) {
                    let gx = self.grad_slot(grads, x);
                    let share = g[0] / gx.len() as f64;
                    for v in gx.iter_mut() {
                        *v += share;
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut [f64] {
        let numel = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; numel])
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `c (+)= op(a) * op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of
/// shape `[k, n]`. A transposed operand is stored as its un-transposed
/// row-major matrix.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every index the strides can reach.
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

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let (rows, cols) = (shape[r - 2], shape[r - 1]);
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(rows * cols).zip(out.chunks_mut(rows * cols)) {
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for k in (0..rank.saturating_sub(1)).rev() {
        in_strides[k] = in_strides[k + 1] * shape[k + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for k in (0..rank).rev() {
            idx[k] += 1;
            offset += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            offset -= strides[k] * idx[k];
            idx[k] = 0;
        }
    }
    (out, out_shape)
}
