//! Define-by-run reverse-mode differentiation.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; values are
//! computed eagerly. [`Tape::backward`] replays the recorded adjoints in
//! reverse order and returns gradients for every tracked leaf.

use std::cell::RefCell;
use std::rc::Rc;

use super::gemm::{gemm, MatRef};
use super::kernels::{self, band_key, Activation, Mask};
use super::tensor::{axis_split, MatmulPlan, Tensor};
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Reshape(usize),
    MatMul(usize, usize, MatmulPlan),
    Softmax(usize, usize),
    Act(usize, Activation),
    Conv1d { x: usize, w: usize, bias: usize },
    AvgPool { x: usize, kernel: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Concat { parts: Vec<usize>, axis: usize },
    MeanAxis(usize, usize),
    BroadcastAxis(usize, usize),
    SumAll(usize),
    MeanAll(usize),
    Embedding { table: usize, codes: Rc<[usize]> },
    Attention { q: usize, k: usize, v: usize, probs: Tensor, scale: f64 },
    BandAttention { q: usize, k: usize, v: usize, probs: Tensor, half_width: usize, scale: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Ordered record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when it did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node and the values they hold.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// Records a gradient-tracking input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        // Untracked nodes never backpropagate, so their saved state can go.
        let op = if tracked { op } else { Op::Constant };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn tracked(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].tracked)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize], name: &'static str) -> Result<Var<'_>> {
        let value = value.check_finite(name)?;
        let tracked = self.tracked(inputs);
        Ok(self.push(value, op, tracked))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.record(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: ids.clone(),
                axis,
            },
            &ids,
            "concat",
        )
    }

    /// Row lookup `table[codes[r]]`; the output has shape `out_shape ++ [d]`.
    pub fn embedding<'t>(
        &'t self,
        table: Var<'t>,
        codes: Rc<[usize]>,
        out_shape: &[usize],
    ) -> Result<Var<'t>> {
        let t = table.value();
        let [card, d] = *t.shape() else {
            return Err(Error::shape("embedding", format!("table {:?}", t.shape())));
        };
        if out_shape.iter().product::<usize>() != codes.len() {
            return Err(Error::shape(
                "embedding",
                format!("{} codes for shape {out_shape:?}", codes.len()),
            ));
        }
        let mut data = Vec::with_capacity(codes.len() * d);
        for &c in codes.iter() {
            if c >= card {
                return Err(Error::InvalidArgument(format!(
                    "embedding code {c} out of range for cardinality {card}"
                )));
            }
            data.extend_from_slice(&t.data()[c * d..(c + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        self.record(
            Tensor::from_parts(shape, data),
            Op::Embedding {
                table: table.id,
                codes,
            },
            &[table.id],
            "embedding",
        )
    }

    /// Fused scaled-dot-product attention with an optional boolean mask.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        mask: Option<&Mask>,
        scale: f64,
    ) -> Result<Var<'t>> {
        let (out, probs) = kernels::dense_attention(&q.value(), &k.value(), &v.value(), mask, scale)?;
        self.record(
            out,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                probs,
                scale,
            },
            &[q.id, k.id, v.id],
            "attention",
        )
    }

    /// Fused band attention; see [`kernels::band_attention`].
    pub fn band_attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        half_width: usize,
        scale: f64,
    ) -> Result<Var<'t>> {
        let (out, probs) =
            kernels::band_attention(&q.value(), &k.value(), &v.value(), half_width, scale)?;
        self.record(
            out,
            Op::BandAttention {
                q: q.id,
                k: k.id,
                v: v.id,
                probs,
                half_width,
                scale,
            },
            &[q.id, k.id, v.id],
            "band_attention",
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", nodes[loss.id].value.shape()),
            ));
        }
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        let mut leaf_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                leaf_grads[id] = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
        }
        for g in leaf_grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Adds into the gradient buffer of `id` (allocated on first use) if it is tracked.
fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].tracked {
        return;
    }
    let buf = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(buf);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    match &nodes[id].op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[id].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            acc(nodes, grads, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            });
            let nb = val(*b).numel().max(1);
            acc(nodes, grads, *b, |gb| {
                for chunk in g.chunks(nb) {
                    for (x, y) in gb.iter_mut().zip(chunk) {
                        *x += sign * y;
                    }
                }
            });
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let nb = bv.len().max(1);
            acc(nodes, grads, *a, |ga| {
                for (gc, yc) in ga.chunks_mut(nb).zip(g.chunks(nb)) {
                    for ((x, y), w) in gc.iter_mut().zip(yc).zip(bv) {
                        *x += y * w;
                    }
                }
            });
            acc(nodes, grads, *b, |gb| {
                for (yc, ac) in g.chunks(nb).zip(av.chunks(nb)) {
                    for ((x, y), u) in gb.iter_mut().zip(yc).zip(ac) {
                        *x += y * u;
                    }
                }
            });
        }
        Op::Scale(a, c) => acc(nodes, grads, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += c * y;
            }
        }),
        Op::Offset(a) | Op::Reshape(a) => acc(nodes, grads, *a, |ga| {
            for (x, y) in ga.iter_mut().zip(g) {
                *x += y;
            }
        }),
        Op::MatMul(a, b, plan) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            acc(nodes, grads, *a, |ga| plan.backward(av, bv, g, Some(ga), None));
            acc(nodes, grads, *b, |gb| plan.backward(av, bv, g, None, Some(gb)));
        }
        Op::Softmax(a, axis) => {
            let y = val(id);
            let (outer, n, inner) = axis_split(y.shape(), *axis);
            let yd = y.data();
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * yd[idx(j)]).sum();
                        for j in 0..n {
                            ga[idx(j)] += yd[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
            });
        }
        Op::Act(a, kind) => {
            let (x, y) = (val(*a).data(), val(id).data());
            acc(nodes, grads, *a, |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * kind.derivative(x[i], y[i]);
                }
            });
        }
        Op::Conv1d { x, w, bias } => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, l, ci) = kernels::seq_dims(xv.shape(), "conv1d").expect("checked in forward");
            let (co, k) = (wv.shape()[0], wv.shape()[2]);
            acc(nodes, grads, *bias, |gb| {
                for row in g.chunks(co) {
                    for (x, y) in gb.iter_mut().zip(row) {
                        *x += y;
                    }
                }
            });
            if nodes[*w].tracked {
                let cols = kernels::im2col(xv.data(), b, l, ci, k);
                let mut dwm = vec![0.0; k * ci * co];
                gemm(
                    MatRef::new(&cols, b * l, k * ci).t(),
                    MatRef::new(g, b * l, co),
                    0.0,
                    &mut dwm,
                );
                acc(nodes, grads, *w, |gw| {
                    for o in 0..co {
                        for c in 0..ci {
                            for j in 0..k {
                                gw[(o * ci + c) * k + j] += dwm[(j * ci + c) * co + o];
                            }
                        }
                    }
                });
            }
            if nodes[*x].tracked {
                let wm = kernels::conv_weight_matrix(wv.data(), co, ci, k);
                let mut dcols = vec![0.0; b * l * k * ci];
                gemm(
                    MatRef::new(g, b * l, co),
                    MatRef::new(&wm, k * ci, co).t(),
                    0.0,
                    &mut dcols,
                );
                let pad = k / 2;
                acc(nodes, grads, *x, |gx| {
                    for bi in 0..b {
                        for t in 0..l {
                            let row = &dcols[(bi * l + t) * k * ci..(bi * l + t + 1) * k * ci];
                            for j in 0..k {
                                let src = t as isize + j as isize - pad as isize;
                                if src < 0 || src >= l as isize {
                                    continue;
                                }
                                let s = (bi * l + src as usize) * ci;
                                for c in 0..ci {
                                    gx[s + c] += row[j * ci + c];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::AvgPool { x, kernel } => {
            let (b, l, c) = kernels::seq_dims(val(*x).shape(), "avgpool").expect("checked in forward");
            let half = (*kernel / 2) as isize;
            let inv = 1.0 / *kernel as f64;
            acc(nodes, grads, *x, |gx| {
                for bi in 0..b {
                    for t in 0..l {
                        let gt = &g[(bi * l + t) * c..(bi * l + t + 1) * c];
                        for j in -half..=half {
                            let s = (t as isize + j).clamp(0, l as isize - 1) as usize;
                            let dst = &mut gx[(bi * l + s) * c..(bi * l + s + 1) * c];
                            for ch in 0..c {
                                dst[ch] += gt[ch] * inv;
                            }
                        }
                    }
                }
            });
        }
        Op::Narrow { a, axis, start } => {
            let (outer, n, inner) = axis_split(val(*a).shape(), *axis);
            let len = val(id).shape()[*axis];
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    for i in 0..len * inner {
                        ga[dst + i] += g[src + i];
                    }
                }
            });
        }
        Op::Concat { parts, axis } => {
            let out_shape = val(id).shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0;
            for &p in parts {
                let n = val(p).shape()[*axis];
                acc(nodes, grads, p, |gp| {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for i in 0..n * inner {
                            gp[o * n * inner + i] += g[src + i];
                        }
                    }
                });
                offset += n;
            }
        }
        Op::MeanAxis(a, axis) => {
            let (outer, n, inner) = axis_split(val(*a).shape(), *axis);
            let inv = 1.0 / n as f64;
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[(o * n + j) * inner + i] += g[o * inner + i] * inv;
                        }
                    }
                }
            });
        }
        Op::BroadcastAxis(a, axis) => {
            let (outer, n, inner) = axis_split(val(id).shape(), *axis);
            acc(nodes, grads, *a, |ga| {
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            ga[o * inner + i] += g[(o * n + j) * inner + i];
                        }
                    }
                }
            });
        }
        Op::SumAll(a) => acc(nodes, grads, *a, |ga| {
            for x in ga.iter_mut() {
                *x += g[0];
            }
        }),
        Op::MeanAll(a) => acc(nodes, grads, *a, |ga| {
            let s = g[0] / ga.len() as f64;
            for x in ga.iter_mut() {
                *x += s;
            }
        }),
        Op::Embedding { table, codes } => {
            let d = val(*table).shape()[1];
            acc(nodes, grads, *table, |gt| {
                for (r, &c) in codes.iter().enumerate() {
                    for j in 0..d {
                        gt[c * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::Attention {
            q,
            k,
            v,
            probs,
            scale,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), probs, *scale),
        Op::BandAttention {
            q,
            k,
            v,
            probs,
            half_width,
            scale,
        } => band_attention_backward(nodes, grads, g, (*q, *k, *v), probs, *half_width, *scale),
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    probs: &Tensor,
    scale: f64,
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = kernels::attn_dims(qv.shape(), kv.shape(), vv.shape()).expect("checked in forward");
    let p = probs.data();
    let mut ds = vec![0.0; d.batch * d.lq * d.lk];
    for b in 0..d.batch {
        let pb = &p[b * d.lq * d.lk..(b + 1) * d.lq * d.lk];
        let gb = &g[b * d.lq * d.dv..(b + 1) * d.lq * d.dv];
        let vb = &vv.data()[b * d.lk * d.dv..(b + 1) * d.lk * d.dv];
        let dsb = &mut ds[b * d.lq * d.lk..(b + 1) * d.lq * d.lk];
        // dP = dO V^T, then the softmax Jacobian.
        gemm(
            MatRef::new(gb, d.lq, d.dv),
            MatRef::new(vb, d.lk, d.dv).t(),
            0.0,
            dsb,
        );
        for (drow, prow) in dsb.chunks_mut(d.lk).zip(pb.chunks(d.lk)) {
            let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
            for (x, &pp) in drow.iter_mut().zip(prow) {
                *x = pp * (*x - dot) * scale;
            }
        }
    }
    acc(nodes, grads, v, |gv| {
        for b in 0..d.batch {
            gemm(
                MatRef::new(&p[b * d.lq * d.lk..(b + 1) * d.lq * d.lk], d.lq, d.lk).t(),
                MatRef::new(&g[b * d.lq * d.dv..(b + 1) * d.lq * d.dv], d.lq, d.dv),
                1.0,
                &mut gv[b * d.lk * d.dv..(b + 1) * d.lk * d.dv],
            );
        }
    });
    acc(nodes, grads, q, |gq| {
        for b in 0..d.batch {
            gemm(
                MatRef::new(&ds[b * d.lq * d.lk..(b + 1) * d.lq * d.lk], d.lq, d.lk),
                MatRef::new(&kv.data()[b * d.lk * d.dk..(b + 1) * d.lk * d.dk], d.lk, d.dk),
                1.0,
                &mut gq[b * d.lq * d.dk..(b + 1) * d.lq * d.dk],
            );
        }
    });
    acc(nodes, grads, k, |gk| {
        for b in 0..d.batch {
            gemm(
                MatRef::new(&ds[b * d.lq * d.lk..(b + 1) * d.lq * d.lk], d.lq, d.lk).t(),
                MatRef::new(&qv.data()[b * d.lq * d.dk..(b + 1) * d.lq * d.dk], d.lq, d.dk),
                1.0,
                &mut gk[b * d.lk * d.dk..(b + 1) * d.lk * d.dk],
            );
        }
    });
}

fn band_attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    probs: &Tensor,
    hw: usize,
    scale: f64,
) {
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let d = kernels::attn_dims(qv.shape(), kv.shape(), vv.shape()).expect("checked in forward");
    let (l, width) = (d.lq, 2 * hw + 1);
    let p = probs.data();
    let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
    let mut ds = vec![0.0; d.batch * l * width];
    for b in 0..d.batch {
        for i in 0..l {
            let row = (b * l + i) * width;
            let gi = &g[(b * l + i) * d.dv..(b * l + i + 1) * d.dv];
            let mut dot = 0.0;
            for o in 0..width {
                if let Some(j) = band_key(i, o, hw, l) {
                    let vj = &vd[(b * l + j) * d.dv..(b * l + j + 1) * d.dv];
                    let dp: f64 = gi.iter().zip(vj).map(|(x, y)| x * y).sum();
                    ds[row + o] = dp;
                    dot += dp * p[row + o];
                }
            }
            for o in 0..width {
                ds[row + o] = p[row + o] * (ds[row + o] - dot) * scale;
            }
        }
    }
    acc(nodes, grads, v, |gv| {
        for b in 0..d.batch {
            for i in 0..l {
                let gi = &g[(b * l + i) * d.dv..(b * l + i + 1) * d.dv];
                for o in 0..width {
                    if let Some(j) = band_key(i, o, hw, l) {
                        let pp = p[(b * l + i) * width + o];
                        let dst = &mut gv[(b * l + j) * d.dv..(b * l + j + 1) * d.dv];
                        for (x, y) in dst.iter_mut().zip(gi) {
                            *x += pp * y;
                        }
                    }
                }
            }
        }
    });
    acc(nodes, grads, q, |gq| {
        for b in 0..d.batch {
            for i in 0..l {
                let dst = &mut gq[(b * l + i) * d.dk..(b * l + i + 1) * d.dk];
                for o in 0..width {
                    if let Some(j) = band_key(i, o, hw, l) {
                        let s = ds[(b * l + i) * width + o];
                        let kj = &kd[(b * l + j) * d.dk..(b * l + j + 1) * d.dk];
                        for (x, y) in dst.iter_mut().zip(kj) {
                            *x += s * y;
                        }
                    }
                }
            }
        }
    });
    acc(nodes, grads, k, |gk| {
        for b in 0..d.batch {
            for i in 0..l {
                let qi = &qd[(b * l + i) * d.dk..(b * l + i + 1) * d.dk];
                for o in 0..width {
                    if let Some(j) = band_key(i, o, hw, l) {
                        let s = ds[(b * l + i) * width + o];
                        let dst = &mut gk[(b * l + j) * d.dk..(b * l + j + 1) * d.dk];
                        for (x, y) in dst.iter_mut().zip(qi) {
                            *x += s * y;
                        }
                    }
                }
            }
        }
    });
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        suffix_broadcast(name, a.shape(), b.shape())?;
        let bd = b.data();
        let mut data = Vec::with_capacity(a.numel());
        for chunk in a.data().chunks(bd.len().max(1)) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        self.tape.record(
            Tensor::from_parts(a.shape().to_vec(), data),
            op,
            &[self.id, other.id],
            name,
        )
    }

    /// Elementwise sum; `other` may broadcast over leading axes (its shape a suffix of ours).
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| c * x);
        self.tape.record(v, Op::Scale(self.id, c), &[self.id], "scale")
    }

    /// Adds a constant to every element.
    pub fn offset(self, c: f64) -> Result<Var<'t>> {
        let v = self.value().map(|x| x + c);
        self.tape.record(v, Op::Offset(self.id), &[self.id], "offset")
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = (*self.value()).clone().reshape(shape.to_vec())?;
        self.tape.record(v, Op::Reshape(self.id), &[self.id], "reshape")
    }

    /// Matrix product: `[.., k] x [k, n]`, `[B, m, k] x [B, k, n]` or `[m, k] x [B, k, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.forward(a.data(), b.data(), &mut out);
        let shape = plan.out_shape.clone();
        self.tape.record(
            Tensor::from_parts(shape, out),
            Op::MatMul(self.id, other.id, plan),
            &[self.id, other.id],
            "matmul",
        )
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let v = kernels::softmax(&self.value(), axis)?;
        self.tape.record(v, Op::Softmax(self.id, axis), &[self.id], "softmax")
    }

    pub fn activation(self, kind: Activation) -> Result<Var<'t>> {
        let v = self.value().map(|x| kind.apply(x));
        self.tape.record(v, Op::Act(self.id, kind), &[self.id], "activation")
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.activation(Activation::Tanh)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.activation(Activation::Softplus)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.activation(Activation::Gelu)
    }

    /// Same-length convolution over time; see [`kernels::conv1d`].
    pub fn conv1d(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let v = kernels::conv1d(&self.value(), &kernel.value(), &bias.value())?;
        self.tape.record(
            v,
            Op::Conv1d {
                x: self.id,
                w: kernel.id,
                bias: bias.id,
            },
            &[self.id, kernel.id, bias.id],
            "conv1d",
        )
    }

    /// Centered moving average over time with replicate padding.
    pub fn avgpool1d_replicate(self, kernel: usize) -> Result<Var<'t>> {
        let v = kernels::avgpool1d_replicate(&self.value(), kernel)?;
        self.tape.record(
            v,
            Op::AvgPool {
                x: self.id,
                kernel,
            },
            &[self.id],
            "avgpool1d_replicate",
        )
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().narrow(axis, start, len)?;
        self.tape.record(
            v,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            &[self.id],
            "narrow",
        )
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for {:?}", a.shape())));
        }
        let (outer, n, inner) = axis_split(a.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += a.data()[(o * n + j) * inner + i];
                }
            }
        }
        for x in &mut data {
            *x /= n as f64;
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = 1;
        self.tape.record(
            Tensor::from_parts(shape, data),
            Op::MeanAxis(self.id, axis),
            &[self.id],
            "mean_axis",
        )
    }

    /// Repeats an extent-1 `axis` `n` times.
    pub fn broadcast_axis(self, axis: usize, n: usize) -> Result<Var<'t>> {
        let a = self.value();
        if axis >= a.rank() || a.shape()[axis] != 1 {
            return Err(Error::shape(
                "broadcast_axis",
                format!("axis {axis} of {:?} must have extent 1", a.shape()),
            ));
        }
        let (outer, _, inner) = axis_split(a.shape(), axis);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                data.extend_from_slice(&a.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = n;
        self.tape.record(
            Tensor::from_parts(shape, data),
            Op::BroadcastAxis(self.id, axis),
            &[self.id],
            "broadcast_axis",
        )
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape
            .record(Tensor::scalar(s), Op::SumAll(self.id), &[self.id], "sum_all")
    }

    pub fn mean_all(self) -> Result<Var<'t>> {
        let s = self.value().mean();
        self.tape
            .record(Tensor::scalar(s), Op::MeanAll(self.id), &[self.id], "mean_all")
    }

    /// Mean squared difference against `target` (same shape).
    pub fn mse(self, target: Var<'t>) -> Result<Var<'t>> {
        if self.shape() != target.shape() {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", self.shape(), target.shape()),
            ));
        }
        self.sub(target)?.square()?.mean_all()
    }
}
