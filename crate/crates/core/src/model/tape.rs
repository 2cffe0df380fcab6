//! Reverse-mode differentiation over matrix operations.
//!
//! A [`Tape`] records every operation of one forward pass. Parameter leaves
//! remember their store index so [`Tape::backward`] can hand back gradients
//! aligned with the [`ParamStore`](super::ParamStore).

use super::tensor::Tensor;
use crate::error::Result;
use crate::scalar::{dot, Scalar};
use crate::train::loss::contrastive_loss_with_grad;

const LN_EPS: f64 = 1e-5;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        q_group: usize,
        kv_group: usize,
        heads: usize,
        /// `[group][head][query][key]`, flattened.
        probs: Vec<S>,
    },
    Interleave(Var, Var),
    SelectRows {
        x: Var,
        stride: usize,
        offset: usize,
    },
    AddCyclic(Var, Var),
    RepeatRows(Var),
    EmbedMean {
        table: Var,
        tokens: Vec<Vec<u32>>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<S>,
    },
    ContrastiveLoss {
        q: Var,
        t: Var,
        qneg: Option<Var>,
        tau: Var,
        grads: Box<crate::train::loss::LossGrads<S>>,
    },
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let a = S::from_f64_lossy(0.044715);
    let half = S::from_f64_lossy(0.5);
    let three = S::from_f64_lossy(3.0);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (S::one() + th);
    let dy = half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * a * x * x);
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Input)
    }

    /// Parameter leaf; `index` is the slot in the parameter store.
    pub fn param(&mut self, index: usize, t: Tensor<S>) -> Var {
        self.push(t, Op::Param(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows, 1);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, bias.cols);
        for r in 0..out.rows {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *o += bb;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let cols = xv.cols;
        let inv_c = S::one() / S::from_usize_lossy(cols);
        let eps = S::from_f64_lossy(LN_EPS);
        let mut xhat = Tensor::zeros(xv.rows, cols);
        let mut out = Tensor::zeros(xv.rows, cols);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_c;
            let rs = S::one() / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data.iter_mut().for_each(|v| *v = gelu_parts(*v).0);
        self.push(out, Op::Gelu(x))
    }

    /// Grouped multi-head scaled dot-product attention. Query rows come in
    /// consecutive groups of `q_group`, key/value rows in groups of
    /// `kv_group`; group `g` of queries attends only to group `g` of keys.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, q_group: usize, kv_group: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert!(d % heads == 0, "width {d} not divisible by {heads} heads");
        assert_eq!(qv.rows % q_group, 0);
        let groups = qv.rows / q_group;
        assert_eq!(kv.rows, groups * kv_group);
        assert_eq!(vv.shape(), kv.shape());
        let dh = d / heads;
        let scale = S::one() / S::from_usize_lossy(dh).sqrt();
        let mut out = Tensor::zeros(qv.rows, d);
        let mut probs = vec![S::zero(); groups * heads * q_group * kv_group];
        let mut logits = vec![S::zero(); kv_group];
        for g in 0..groups {
            for h in 0..heads {
                let cs = h * dh..(h + 1) * dh;
                for i in 0..q_group {
                    let qr = &qv.row(g * q_group + i)[cs.clone()];
                    for (j, l) in logits.iter_mut().enumerate() {
                        *l = dot(qr, &kv.row(g * kv_group + j)[cs.clone()]) * scale;
                    }
                    let max = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                    let mut z = S::zero();
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let base = ((g * heads + h) * q_group + i) * kv_group;
                    let orow = g * q_group + i;
                    for j in 0..kv_group {
                        let p = logits[j] / z;
                        probs[base + j] = p;
                        let vr = &vv.row(g * kv_group + j)[cs.clone()];
                        for (o, &x) in out.row_mut(orow)[cs.clone()].iter_mut().zip(vr) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                q_group,
                kv_group,
                heads,
                probs,
            },
        )
    }

    /// Rows `a0, b0, a1, b1, ...`.
    pub fn interleave(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let mut out = Tensor::zeros(av.rows * 2, av.cols);
        for r in 0..av.rows {
            out.row_mut(2 * r).copy_from_slice(av.row(r));
            out.row_mut(2 * r + 1).copy_from_slice(bv.row(r));
        }
        self.push(out, Op::Interleave(a, b))
    }

    /// Rows `offset, offset + stride, ...`.
    pub fn select_rows(&mut self, x: Var, stride: usize, offset: usize) -> Var {
        let xv = self.value(x);
        let n = (xv.rows + stride - 1 - offset) / stride;
        let mut out = Tensor::zeros(n, xv.cols);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(xv.row(offset + r * stride));
        }
        self.push(out, Op::SelectRows { x, stride, offset })
    }

    /// Adds row `r mod p.rows` of `p` to row `r` of `x`.
    pub fn add_cyclic(&mut self, x: Var, p: Var) -> Var {
        let pv = self.value(p);
        let mut out = self.value(x).clone();
        assert_eq!(out.cols, pv.cols);
        for r in 0..out.rows {
            let pr = pv.row(r % pv.rows);
            for (o, &v) in out.row_mut(r).iter_mut().zip(pr) {
                *o += v;
            }
        }
        self.push(out, Op::AddCyclic(x, p))
    }

    /// Tiles a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows, 1);
        let mut out = Tensor::zeros(n, xv.cols);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(&xv.data);
        }
        self.push(out, Op::RepeatRows(x))
    }

    /// Mean of embedding-table rows per token sequence.
    pub fn embed_mean(&mut self, table: Var, tokens: Vec<Vec<u32>>) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(tokens.len(), tv.cols);
        for (r, seq) in tokens.iter().enumerate() {
            assert!(!seq.is_empty(), "token sequences are never empty");
            let inv = S::one() / S::from_usize_lossy(seq.len());
            for &tok in seq {
                let e = tv.row(tok as usize);
                for (o, &v) in out.row_mut(r).iter_mut().zip(e) {
                    *o += v * inv;
                }
            }
        }
        self.push(out, Op::EmbedMean { table, tokens })
    }

    /// Scales every row to unit length.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let tiny = S::from_f64_lossy(1e-12);
        let mut norms = Vec::with_capacity(out.rows);
        for r in 0..out.rows {
            let n = crate::scalar::norm(out.row(r)).max(tiny);
            norms.push(n);
            out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Batch-mean contrastive loss as a `1 x 1` node. `tau` is a `1 x 1` node.
    pub fn contrastive_loss(&mut self, q: Var, t: Var, qneg: Option<Var>, tau: Var) -> Result<(Var, crate::train::loss::LossTerms<S>)> {
        let tau_v = self.value(tau).data[0];
        let (terms, grads) = contrastive_loss_with_grad(
            self.value(q),
            self.value(t),
            qneg.map(|n| self.value(n)),
            tau_v,
        )?;
        let node = self.push(
            Tensor::scalar(terms.loss),
            Op::ContrastiveLoss {
                q,
                t,
                qneg,
                tau,
                grads: Box::new(grads),
            },
        );
        Ok((node, terms))
    }

    /// Backpropagates from scalar `root` and returns gradients for every
    /// parameter slot in `0..n_params` (zeros for slots not on the tape).
    pub fn backward(&self, root: Var, param_shapes: &[(usize, usize)]) -> Vec<Tensor<S>> {
        assert_eq!(self.value(root).shape(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(S::one()));
        let mut out: Vec<Tensor<S>> = param_shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |v: Var, t: Tensor<S>| match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            };
            match &node.op {
                Op::Input => {}
                Op::Param(i) => out[*i].add_assign(&g),
                Op::MatMul(a, b) => {
                    let da = g.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&g);
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::AddBias(x, b) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, &v) in db.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*b, db);
                    acc(*x, g);
                }
                Op::Add(a, b) => {
                    acc(*b, g.clone());
                    acc(*a, g);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gain);
                    let cols = g.cols;
                    let inv_c = S::one() / S::from_usize_lossy(cols);
                    let mut dx = Tensor::zeros(g.rows, cols);
                    let mut dg = Tensor::zeros(1, cols);
                    let mut db = Tensor::zeros(1, cols);
                    let mut dxhat = vec![S::zero(); cols];
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut m1 = S::zero();
                        let mut m2 = S::zero();
                        for c in 0..cols {
                            dg.data[c] += gr[c] * hr[c];
                            db.data[c] += gr[c];
                            dxhat[c] = gr[c] * gv.data[c];
                            m1 += dxhat[c];
                            m2 += dxhat[c] * hr[c];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = rstd[r] * (dxhat[c] - m1 - hr[c] * m2);
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &v) in dx.data.iter_mut().zip(&xv.data) {
                        *d *= gelu_parts(v).1;
                    }
                    acc(*x, dx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    q_group,
                    kv_group,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (qg, kg, heads) = (*q_group, *kv_group, *heads);
                    let d = qv.cols;
                    let dh = d / heads;
                    let scale = S::one() / S::from_usize_lossy(dh).sqrt();
                    let groups = qv.rows / qg;
                    let mut dq = Tensor::zeros(qv.rows, d);
                    let mut dk = Tensor::zeros(kv.rows, d);
                    let mut dv = Tensor::zeros(vv.rows, d);
                    let mut dp = vec![S::zero(); kg];
                    for gi in 0..groups {
                        for h in 0..heads {
                            let cs = h * dh..(h + 1) * dh;
                            for i in 0..qg {
                                let orow = gi * qg + i;
                                let go = &g.row(orow)[cs.clone()];
                                let base = ((gi * heads + h) * qg + i) * kg;
                                let p = &probs[base..base + kg];
                                let mut pdp = S::zero();
                                for j in 0..kg {
                                    let kr = gi * kg + j;
                                    dp[j] = dot(go, &vv.row(kr)[cs.clone()]);
                                    pdp += p[j] * dp[j];
                                    for (d, &x) in dv.row_mut(kr)[cs.clone()].iter_mut().zip(go) {
                                        *d += p[j] * x;
                                    }
                                }
                                for j in 0..kg {
                                    let kr = gi * kg + j;
                                    let dl = p[j] * (dp[j] - pdp) * scale;
                                    if dl == S::zero() {
                                        continue;
                                    }
                                    let krow = &kv.row(kr)[cs.clone()];
                                    for (d, &x) in dq.row_mut(orow)[cs.clone()].iter_mut().zip(krow) {
                                        *d += dl * x;
                                    }
                                    let qrow = &qv.row(orow)[cs.clone()];
                                    for (d, &x) in dk.row_mut(kr)[cs.clone()].iter_mut().zip(qrow) {
                                        *d += dl * x;
                                    }
                                }
                            }
                        }
                    }
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::Interleave(a, b) => {
                    let n = g.rows / 2;
                    let mut da = Tensor::zeros(n, g.cols);
                    let mut db = Tensor::zeros(n, g.cols);
                    for r in 0..n {
                        da.row_mut(r).copy_from_slice(g.row(2 * r));
                        db.row_mut(r).copy_from_slice(g.row(2 * r + 1));
                    }
                    acc(*a, da);
                    acc(*b, db);
                }
                Op::SelectRows { x, stride, offset } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        dx.row_mut(offset + r * stride).copy_from_slice(g.row(r));
                    }
                    acc(*x, dx);
                }
                Op::AddCyclic(x, p) => {
                    let pv = self.value(*p);
                    let mut dp = Tensor::zeros(pv.rows, pv.cols);
                    for r in 0..g.rows {
                        for (d, &v) in dp.row_mut(r % pv.rows).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*p, dp);
                    acc(*x, g);
                }
                Op::RepeatRows(x) => {
                    let mut dx = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (d, &v) in dx.data.iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(*x, dx);
                }
                Op::EmbedMean { table, tokens } => {
                    let tv = self.value(*table);
                    let mut dt = Tensor::zeros(tv.rows, tv.cols);
                    for (r, seq) in tokens.iter().enumerate() {
                        let inv = S::one() / S::from_usize_lossy(seq.len());
                        for &tok in seq {
                            for (d, &v) in dt.row_mut(tok as usize).iter_mut().zip(g.row(r)) {
                                *d += v * inv;
                            }
                        }
                    }
                    acc(*table, dt);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = g;
                    for r in 0..dx.rows {
                        let yr = y.row(r);
                        let proj = dot(dx.row(r), yr);
                        let n = norms[r];
                        for (d, &yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = (*d - proj * yv) / n;
                        }
                    }
                    acc(*x, dx);
                }
                Op::ContrastiveLoss {
                    q,
                    t,
                    qneg,
                    tau,
                    grads: lg,
                } => {
                    let s = g.data[0];
                    let scaled = |m: &Tensor<S>| {
                        let mut m = m.clone();
                        m.data.iter_mut().for_each(|v| *v *= s);
                        m
                    };
                    acc(*q, scaled(&lg.queries));
                    acc(*t, scaled(&lg.targets));
                    if let (Some(n), Some(dn)) = (qneg, &lg.query_negatives) {
                        acc(*n, scaled(dn));
                    }
                    acc(*tau, Tensor::scalar(lg.tau * s));
                }
            }
        }
        out
    }
}
