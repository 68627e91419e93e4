//! Tensor-level reverse-mode tape.
//!
//! Every builder method evaluates its op eagerly and records it; `backward`
//! walks the tape in reverse and accumulates parameter gradients.

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use super::{Gradients, NnError, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Sigmoid => sigmoid(v),
        }
    }

    /// Derivative expressed through the activation's output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
}

enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Act(NodeId, Activation),
    Exp(NodeId),
    Reshape(NodeId),
    Sum(NodeId),
    Stack(Vec<NodeId>),
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        width: usize,
    },
    Gru {
        x: NodeId,
        h: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
        cache: GruCache,
    },
    MaskedLogLik {
        logits: NodeId,
        mask: Vec<bool>,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Kl {
        mu: NodeId,
        logvar: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> NnError {
    NnError::Shape(format!("{op}: {detail}"))
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, index: usize) -> NodeId {
        self.push(params.tensor(index).clone(), Op::Param(index))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.rows() != k {
            return Err(shape_err(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = bv.cols();
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            av.data(),
            k,
            1,
            bv.data(),
            n,
            1,
            0.0,
            &mut out,
            n,
            1,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        let n = *av.shape().last().unwrap_or(&1);
        if bv.len() != n {
            return Err(shape_err(
                "add_bias",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bias) in row.iter_mut().zip(bv.data()) {
                *o += bias;
            }
        }
        Ok(self.push(out, Op::AddBias(a, b)))
    }

    fn zip_same(
        &mut self,
        op: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, NnError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= s);
        self.push(t, Op::Scale(a, s))
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return a;
        }
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = act.apply(*v));
        self.push(t, Op::Act(a, act))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.exp());
        self.push(t, Op::Exp(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, NnError> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Stacks equally shaped `[batch, n]` nodes into `[batch, steps, n]`.
    pub fn stack_steps(&mut self, steps: &[NodeId]) -> Result<NodeId, NnError> {
        let Some(&first) = steps.first() else {
            return Err(shape_err("stack_steps", "no inputs".into()));
        };
        let (bsz, n) = (self.value(first).rows(), self.value(first).cols());
        let t = steps.len();
        let mut out = vec![0.0; bsz * t * n];
        for (j, &s) in steps.iter().enumerate() {
            let v = self.value(s);
            if v.rows() != bsz || v.cols() != n {
                return Err(shape_err(
                    "stack_steps",
                    format!("{:?} vs [{bsz}, {n}]", v.shape()),
                ));
            }
            for i in 0..bsz {
                out[(i * t + j) * n..(i * t + j + 1) * n].copy_from_slice(v.row(i));
            }
        }
        let value = Tensor::new(vec![bsz, t, n], out)?;
        Ok(self.push(value, Op::Stack(steps.to_vec())))
    }

    /// Valid 1-D convolution over the time axis.
    ///
    /// `x` is `[batch, time, channels]`, `w` is `[width * channels, out]` with
    /// row `j * channels + c` holding tap `j` of input channel `c`, and `b` is
    /// `[out]`. Output is `[batch, time - width + 1, out]`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        width: usize,
    ) -> Result<NodeId, NnError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.shape().len() != 3 {
            return Err(shape_err(
                "conv1d",
                format!("input {:?} is not 3-D", xv.shape()),
            ));
        }
        let (bsz, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if width == 0 || width > t {
            return Err(NnError::ConvWidth { width, len: t });
        }
        let out_ch = wv.cols();
        if wv.shape().len() != 2 || wv.rows() != width * c || bv.len() != out_ch {
            return Err(shape_err(
                "conv1d",
                format!(
                    "x {:?}, w {:?}, b {:?}, width {width}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let t_out = t - width + 1;
        let mut out = vec![0.0; bsz * t_out * out_ch];
        for (row, bias) in out.chunks_mut(out_ch).zip(std::iter::repeat(bv.data())) {
            row.copy_from_slice(bias);
        }
        for i in 0..bsz {
            // Window t spans rows t..t+width, a contiguous run of width*c values.
            let xs = &xv.data()[i * t * c..(i + 1) * t * c];
            let ys = &mut out[i * t_out * out_ch..(i + 1) * t_out * out_ch];
            gemm(
                t_out,
                width * c,
                out_ch,
                1.0,
                xs,
                c,
                1,
                wv.data(),
                out_ch,
                1,
                1.0,
                ys,
                out_ch,
                1,
            );
        }
        let value = Tensor::new(vec![bsz, t_out, out_ch], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, width }))
    }

    /// One GRU step for a batch.
    ///
    /// `x` is `[batch, in]`, `h` is `[batch, hidden]`, `w` is `[in, 3*hidden]`,
    /// `u` is `[hidden, 3*hidden]` and `b` is `[3*hidden]`, gate blocks ordered
    /// update, reset, candidate:
    ///
    /// ```text
    /// z = sigmoid(x Wz + h Uz + bz)
    /// r = sigmoid(x Wr + h Ur + br)
    /// n = tanh(x Wn + (r * h) Un + bn)
    /// h' = (1 - z) * h + z * n
    /// ```
    pub fn gru(
        &mut self,
        x: NodeId,
        h: NodeId,
        w: NodeId,
        u: NodeId,
        b: NodeId,
    ) -> Result<NodeId, NnError> {
        let (xv, hv, wv, uv, bv) = (
            self.value(x),
            self.value(h),
            self.value(w),
            self.value(u),
            self.value(b),
        );
        let (bsz, inp) = (xv.rows(), xv.cols());
        let hid = hv.cols();
        let g3 = 3 * hid;
        if hv.rows() != bsz || wv.shape() != [inp, g3] || uv.shape() != [hid, g3] || bv.len() != g3
        {
            return Err(shape_err(
                "gru",
                format!(
                    "x {:?}, h {:?}, w {:?}, u {:?}, b {:?}",
                    xv.shape(),
                    hv.shape(),
                    wv.shape(),
                    uv.shape(),
                    bv.shape()
                ),
            ));
        }
        // ax = x W + b
        let mut ax = vec![0.0; bsz * g3];
        for row in ax.chunks_mut(g3) {
            row.copy_from_slice(bv.data());
        }
        gemm(
            bsz,
            inp,
            g3,
            1.0,
            xv.data(),
            inp,
            1,
            wv.data(),
            g3,
            1,
            1.0,
            &mut ax,
            g3,
            1,
        );
        // uh = h [Uz | Ur]
        let mut uh = vec![0.0; bsz * 2 * hid];
        gemm(
            bsz,
            hid,
            2 * hid,
            1.0,
            hv.data(),
            hid,
            1,
            uv.data(),
            g3,
            1,
            0.0,
            &mut uh,
            2 * hid,
            1,
        );
        let mut z = vec![0.0; bsz * hid];
        let mut r = vec![0.0; bsz * hid];
        let mut rh = vec![0.0; bsz * hid];
        for i in 0..bsz {
            for j in 0..hid {
                let o = i * hid + j;
                z[o] = sigmoid(ax[i * g3 + j] + uh[i * 2 * hid + j]);
                r[o] = sigmoid(ax[i * g3 + hid + j] + uh[i * 2 * hid + hid + j]);
                rh[o] = r[o] * hv.data()[o];
            }
        }
        // n pre-activation = ax_n + (r*h) Un
        let mut n = vec![0.0; bsz * hid];
        for i in 0..bsz {
            n[i * hid..(i + 1) * hid].copy_from_slice(&ax[i * g3 + 2 * hid..(i + 1) * g3]);
        }
        gemm(
            bsz,
            hid,
            hid,
            1.0,
            &rh,
            hid,
            1,
            &uv.data()[2 * hid..],
            g3,
            1,
            1.0,
            &mut n,
            hid,
            1,
        );
        n.iter_mut().for_each(|v| *v = v.tanh());
        let out: Vec<f64> = (0..bsz * hid)
            .map(|o| (1.0 - z[o]) * hv.data()[o] + z[o] * n[o])
            .collect();
        let value = Tensor::new(vec![bsz, hid], out)?;
        Ok(self.push(
            value,
            Op::Gru {
                x,
                h,
                w,
                u,
                b,
                cache: GruCache { z, r, n, rh },
            },
        ))
    }

    /// Sum over rows of `log p(target | mask)` under the masked softmax of
    /// each logit row. Rows with no target contribute nothing.
    pub fn masked_loglik(
        &mut self,
        logits: NodeId,
        mask: Vec<bool>,
        targets: Vec<Option<usize>>,
    ) -> Result<NodeId, NnError> {
        let lv = self.value(logits);
        let (rows, k) = (lv.rows(), lv.cols());
        if mask.len() != rows * k || targets.len() != rows {
            return Err(shape_err(
                "masked_loglik",
                format!(
                    "logits {:?}, mask {}, targets {}",
                    lv.shape(),
                    mask.len(),
                    targets.len()
                ),
            ));
        }
        let mut probs = vec![0.0; rows * k];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            let m = &mask[i * k..(i + 1) * k];
            if target >= k || !m[target] {
                return Err(NnError::MaskedTarget { row: i, target });
            }
            let p = crate::sampler::masked_distribution(lv.row(i), m)
                .map_err(|_| NnError::MaskedTarget { row: i, target })?;
            let row = lv.row(i);
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&f, _)| f)
                .fold(f64::NEG_INFINITY, f64::max);
            let lse: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &on)| on)
                .map(|(&f, _)| (f - max).exp())
                .sum::<f64>()
                .ln();
            total += row[target] - max - lse;
            probs[i * k..(i + 1) * k].copy_from_slice(&p);
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedLogLik {
                logits,
                mask,
                targets,
                probs,
            },
        ))
    }

    /// `KL(N(mu, exp(logvar)) || N(0, I))` summed over all entries.
    pub fn kl_standard_normal(&mut self, mu: NodeId, logvar: NodeId) -> Result<NodeId, NnError> {
        let (mv, lv) = (self.value(mu), self.value(logvar));
        if mv.shape() != lv.shape() {
            return Err(shape_err(
                "kl",
                format!("{:?} vs {:?}", mv.shape(), lv.shape()),
            ));
        }
        let kl = 0.5
            * mv.data()
                .iter()
                .zip(lv.data())
                .map(|(&m, &l)| m * m + l.exp() - 1.0 - l)
                .sum::<f64>();
        Ok(self.push(Tensor::scalar(kl), Op::Kl { mu, logvar }))
    }

    /// Gradients of the scalar `loss` with respect to every parameter leaf.
    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> Result<Gradients, NnError> {
        if loss.0 >= self.nodes.len() {
            return Err(NnError::BackwardBeforeForward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::Shape(format!(
                "backward: loss has shape {:?}, expected a scalar",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |id: NodeId| self.nodes[id.0].value.data();
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let target = out.tensors[*p].data_mut();
                    if target.len() != g.len() {
                        return Err(NnError::Shape(format!(
                            "parameter {p} changed shape during the forward pass"
                        )));
                    }
                    for (t, v) in target.iter_mut().zip(&g) {
                        *t += v;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    // da += g b^T
                    let da = slot(&mut grads, *a, m * k);
                    gemm(m, n, k, 1.0, &g, n, 1, bv.data(), 1, n, 1.0, da, k, 1);
                    // db += a^T g
                    let db = slot(&mut grads, *b, k * n);
                    gemm(k, m, n, 1.0, av.data(), 1, k, &g, n, 1, 1.0, db, n, 1);
                }
                Op::AddBias(a, b) => {
                    let n = self.nodes[b.0].value.len();
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    let db = slot(&mut grads, *b, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let db = slot(&mut grads, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::Scale(a, s) => {
                    let da = slot(&mut grads, *a, g.len());
                    for (d, gi) in da.iter_mut().zip(&g) {
                        *d += gi * s;
                    }
                }
                Op::Stack(steps) => {
                    let t = steps.len();
                    let (bsz, n) = (node.value.shape()[0], node.value.shape()[2]);
                    for (j, s) in steps.iter().enumerate() {
                        let ds = slot(&mut grads, *s, bsz * n);
                        for i in 0..bsz {
                            add_into(
                                &mut ds[i * n..(i + 1) * n],
                                &g[(i * t + j) * n..(i * t + j + 1) * n],
                            );
                        }
                    }
                }
                Op::Act(a, act) => {
                    let y = node.value.data();
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), yi) in da.iter_mut().zip(&g).zip(y) {
                        *d += gi * act.grad_from_output(*yi);
                    }
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let da = slot(&mut grads, *a, g.len());
                    for ((d, gi), yi) in da.iter_mut().zip(&g).zip(y) {
                        *d += gi * yi;
                    }
                }
                Op::Reshape(a) => add_into(slot(&mut grads, *a, g.len()), &g),
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    slot(&mut grads, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Conv1d { x, w, b, width } => {
                    let xv = &self.nodes[x.0].value;
                    let (bsz, t, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                    let out_ch = self.nodes[w.0].value.cols();
                    let t_out = t - width + 1;
                    let wc = width * c;
                    {
                        let db = slot(&mut grads, *b, out_ch);
                        for row in g.chunks(out_ch) {
                            add_into(db, row);
                        }
                    }
                    {
                        let dw = slot(&mut grads, *w, wc * out_ch);
                        for i in 0..bsz {
                            let xs = &xv.data()[i * t * c..(i + 1) * t * c];
                            let gs = &g[i * t_out * out_ch..(i + 1) * t_out * out_ch];
                            // dw += X_win^T g_i
                            gemm(
                                wc, t_out, out_ch, 1.0, xs, 1, c, gs, out_ch, 1, 1.0, dw, out_ch, 1,
                            );
                        }
                    }
                    let wv = self.nodes[w.0].value.data();
                    let mut dwin = vec![0.0; t_out * wc];
                    let dx = slot(&mut grads, *x, bsz * t * c);
                    for i in 0..bsz {
                        let gs = &g[i * t_out * out_ch..(i + 1) * t_out * out_ch];
                        gemm(
                            t_out, out_ch, wc, 1.0, gs, out_ch, 1, wv, 1, out_ch, 0.0, &mut dwin,
                            wc, 1,
                        );
                        let dxs = &mut dx[i * t * c..(i + 1) * t * c];
                        for (tt, win) in dwin.chunks(wc).enumerate() {
                            add_into(&mut dxs[tt * c..tt * c + wc], win);
                        }
                    }
                }
                Op::Gru {
                    x,
                    h,
                    w,
                    u,
                    b,
                    cache,
                } => {
                    let (xv, hv) = (&self.nodes[x.0].value, val(*h));
                    let (bsz, inp) = (xv.rows(), xv.cols());
                    let hid = g.len() / bsz;
                    let g3 = 3 * hid;
                    let uv = self.nodes[u.0].value.data();
                    let GruCache { z, r, n, rh } = cache;
                    let mut dh = vec![0.0; bsz * hid];
                    let mut dax = vec![0.0; bsz * g3];
                    for i in 0..bsz {
                        for j in 0..hid {
                            let o = i * hid + j;
                            let dz = g[o] * (n[o] - hv[o]);
                            let dn = g[o] * z[o];
                            dh[o] = g[o] * (1.0 - z[o]);
                            dax[i * g3 + j] = dz * z[o] * (1.0 - z[o]);
                            dax[i * g3 + 2 * hid + j] = dn * (1.0 - n[o] * n[o]);
                        }
                    }
                    // d(rh) = dan Un^T
                    let mut drh = vec![0.0; bsz * hid];
                    gemm(
                        bsz,
                        hid,
                        hid,
                        1.0,
                        &dax[2 * hid..],
                        g3,
                        1,
                        &uv[2 * hid..],
                        1,
                        g3,
                        0.0,
                        &mut drh,
                        hid,
                        1,
                    );
                    for i in 0..bsz {
                        for j in 0..hid {
                            let o = i * hid + j;
                            let dr = drh[o] * hv[o];
                            dh[o] += drh[o] * r[o];
                            dax[i * g3 + hid + j] = dr * r[o] * (1.0 - r[o]);
                        }
                    }
                    {
                        let du = slot(&mut grads, *u, hid * g3);
                        // dUn += rh^T dan ; d[Uz|Ur] += h^T [daz|dar]
                        gemm(
                            hid,
                            bsz,
                            hid,
                            1.0,
                            rh,
                            1,
                            hid,
                            &dax[2 * hid..],
                            g3,
                            1,
                            1.0,
                            &mut du[2 * hid..],
                            g3,
                            1,
                        );
                        gemm(
                            hid,
                            bsz,
                            2 * hid,
                            1.0,
                            hv,
                            1,
                            hid,
                            &dax,
                            g3,
                            1,
                            1.0,
                            du,
                            g3,
                            1,
                        );
                    }
                    // dh += [daz|dar] [Uz|Ur]^T
                    gemm(
                        bsz,
                        2 * hid,
                        hid,
                        1.0,
                        &dax,
                        g3,
                        1,
                        uv,
                        1,
                        g3,
                        1.0,
                        &mut dh,
                        hid,
                        1,
                    );
                    add_into(slot(&mut grads, *h, bsz * hid), &dh);
                    {
                        let db = slot(&mut grads, *b, g3);
                        for row in dax.chunks(g3) {
                            add_into(db, row);
                        }
                    }
                    {
                        let dw = slot(&mut grads, *w, inp * g3);
                        gemm(
                            inp,
                            bsz,
                            g3,
                            1.0,
                            xv.data(),
                            1,
                            inp,
                            &dax,
                            g3,
                            1,
                            1.0,
                            dw,
                            g3,
                            1,
                        );
                    }
                    let wv = self.nodes[w.0].value.data();
                    let dx = slot(&mut grads, *x, bsz * inp);
                    gemm(bsz, g3, inp, 1.0, &dax, g3, 1, wv, 1, g3, 1.0, dx, inp, 1);
                }
                Op::MaskedLogLik {
                    logits,
                    mask,
                    targets,
                    probs,
                } => {
                    let k = self.nodes[logits.0].value.cols();
                    let dl = slot(&mut grads, *logits, targets.len() * k);
                    for (i, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        for j in 0..k {
                            let o = i * k + j;
                            if mask[o] {
                                let ind = if j == target { 1.0 } else { 0.0 };
                                dl[o] += g[0] * (ind - probs[o]);
                            }
                        }
                    }
                }
                Op::Kl { mu, logvar } => {
                    let (mv, lv) = (val(*mu), val(*logvar));
                    let dm = slot(&mut grads, *mu, mv.len());
                    for (d, m) in dm.iter_mut().zip(mv) {
                        *d += g[0] * m;
                    }
                    let dl = slot(&mut grads, *logvar, lv.len());
                    for (d, l) in dl.iter_mut().zip(lv) {
                        *d += g[0] * 0.5 * (l.exp() - 1.0);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
