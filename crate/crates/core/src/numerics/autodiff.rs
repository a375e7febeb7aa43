//! Tape-based reverse-mode differentiation. Every op records its parents
//! and an explicit backward function; [`Graph::backward`] walks the tape
//! in reverse creation order.

use std::rc::Rc;

use super::kernels::{self, compensated_sum, dot, gelu, gelu_grad, sigmoid};
use super::params::{ParamId, ParamStore};
use super::resample::{apply_axis, AxisMap};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Running statistics over every attention matrix built on this tape.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionStats {
    pub matrices: usize,
    pub max_row_sum_error: f64,
    pub min_entry: f64,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(usize, ParamId)>,
    attention: AttentionStats,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            attention: AttentionStats {
                min_entry: f64::INFINITY,
                ..Default::default()
            },
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

    pub fn attention_stats(&self) -> AttentionStats {
        self.attention
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives no gradient bookkeeping beyond its own slot.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, vec![], None)
    }

    /// Leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), vec![], None);
        self.params.push((v.0, id));
        v
    }

    /// Registers an op with a caller-supplied backward. The closure receives
    /// the upstream gradient, the parent values and the op's own output and
    /// returns one gradient per parent.
    pub fn custom(
        &mut self,
        parents: &[Var],
        value: Tensor,
        backward: impl Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor> + 'static,
    ) -> Var {
        self.push(
            value,
            parents.iter().map(|v| v.0).collect(),
            Some(Box::new(backward)),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.custom(&[a, b], out, |g, p, _| {
            vec![
                kernels::matmul_bt(g, p[1]).expect("shape checked"),
                kernels::matmul_at(p[0], g).expect("shape checked"),
            ]
        }))
    }

    /// Affine map over the last axis: `x W + b` for `x: ... x C`, `W: C x D`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or_else(|| shape_err!("linear on scalar"))?;
        let rows = self.value(x).len() / c.max(1);
        let flat = if shape.len() == 2 { x } else { self.reshape(x, &[rows, c])? };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() == 2 {
            return Ok(y);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = self.value(w).shape()[1];
        self.reshape(y, &out_shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.custom(&[a, b], out, |g, _, _| vec![g.clone(), g.clone()]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.custom(&[a, b], out, |g, _, _| vec![g.clone(), g.scale(-1.0)]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.custom(&[a], out, move |g, _, _| vec![g.scale(s)])
    }

    /// `x * s` for a scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err!("scale_by expects a scalar, got {:?}", self.value(s).shape()));
        }
        let out = self.value(x).scale(self.value(s).item());
        Ok(self.custom(&[x, s], out, |g, p, _| {
            let ds = dot(g.data(), p[0].data());
            vec![g.scale(p[1].item()), Tensor::from_parts(p[1].shape().to_vec(), vec![ds])]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.custom(&[x], out, |g, p, _| {
            vec![Tensor::from_parts(p[0].shape().to_vec(), g.data().to_vec())]
        }))
    }

    /// Adds a length-`C` bias to every row of an `N x C` (or `H x W x C`) tensor.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(b).len();
        let xv = self.value(x);
        if xv.shape().last() != Some(&c) {
            return Err(shape_err!("bias of {c} vs tensor {:?}", xv.shape()));
        }
        let bd = self.value(b).data().to_vec();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + bd[i % c]);
        Ok(self.custom(&[x, b], out, move |g, p, _| {
            let mut db = vec![0.0; c];
            for (i, gv) in g.data().iter().enumerate() {
                db[i % c] += gv;
            }
            vec![g.clone(), Tensor::from_parts(p[1].shape().to_vec(), db)]
        }))
    }

    /// Multiplies every row (last axis) elementwise by a length-`C` vector.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let c = self.value(w).len();
        let xv = self.value(x);
        if xv.shape().last() != Some(&c) {
            return Err(shape_err!("row scale of {c} vs tensor {:?}", xv.shape()));
        }
        let wd = self.value(w).data().to_vec();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] * wd[i % c]);
        Ok(self.custom(&[x, w], out, move |g, p, _| {
            let wd = p[1].data();
            let mut dw = vec![0.0; c];
            let dx = Tensor::from_fn(g.shape(), |i| g.data()[i] * wd[i % c]);
            for (i, gv) in g.data().iter().enumerate() {
                dw[i % c] += gv * p[0].data()[i];
            }
            vec![dx, Tensor::from_parts(p[1].shape().to_vec(), dw)]
        }))
    }

    /// Parameter-free normalization of each row (last axis) to zero mean and
    /// unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| shape_err!("layer_norm on scalar"))?;
        let rows = xv.len() / c;
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), out);
        Ok(self.custom(&[x], out, move |g, _, y| {
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g.data()[r * c..(r + 1) * c];
                let yr = &y.data()[r * c..(r + 1) * c];
                let mg = gr.iter().sum::<f64>() / c as f64;
                let mgy = dot(gr, yr) / c as f64;
                for k in 0..c {
                    dx[r * c + k] = inv_std[r] * (gr[k] - mg - yr[k] * mgy);
                }
            }
            vec![Tensor::from_parts(g.shape().to_vec(), dx)]
        }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.custom(&[x], out, |g, p, _| {
            vec![g.zip_map(p[0], |gv, xv| gv * gelu_grad(xv)).expect("same shape")]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.custom(&[x], out, |g, _, y| {
            vec![g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)).expect("same shape")]
        })
    }

    /// `softmax(q k^T / sqrt(C)) v` for token matrices `q (n x C)`,
    /// `k (m x C)`, `v (m x D)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (a, out) = attention_forward(self.value(q), self.value(k), self.value(v))?;
        self.record_attention(&a);
        let c = self.value(q).shape()[1];
        let inv = 1.0 / (c as f64).sqrt();
        Ok(self.custom(&[q, k, v], out, move |g, p, _| {
            let (dq, dk, dv) = attention_backward(p[0], p[1], p[2], &a, g, inv);
            vec![dq, dk, dv]
        }))
    }

    fn record_attention(&mut self, a: &Tensor) {
        let (r, c) = a.rows_cols().expect("rank 2");
        let st = &mut self.attention;
        st.matrices += 1;
        for i in 0..r {
            let row = &a.data()[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            st.max_row_sum_error = st.max_row_sum_error.max((s - 1.0).abs());
            st.min_entry = row.iter().cloned().fold(st.min_entry, f64::min);
        }
    }

    /// Applies a fixed 1-D operator along a spatial axis of an `H x W x C` tensor.
    pub fn apply_axis(&mut self, x: Var, map: Rc<AxisMap>, axis: usize) -> Result<Var> {
        let out = apply_axis(self.value(x), &map, axis)?;
        let adj = Rc::new(map.transpose());
        Ok(self.custom(&[x], out, move |g, _, _| {
            vec![apply_axis(g, &adj, axis).expect("adjoint shape")]
        }))
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (h, w, _) = self.value(x).hwc()?;
        if (h, w) == (out_h, out_w) {
            return Ok(x);
        }
        let r = self.apply_axis(x, Rc::new(AxisMap::bilinear(h, out_h)), 0)?;
        self.apply_axis(r, Rc::new(AxisMap::bilinear(w, out_w)), 1)
    }

    /// Zero-padded "same" convolution with optional per-output-channel bias.
    pub fn conv2d_same(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = kernels::conv2d_same(self.value(x), self.value(k), stride)?;
        let y = self.custom(&[x, k], out, move |g, p, _| {
            let (dx, dk) = kernels::conv2d_same_backward(p[0], p[1], stride, g);
            vec![dx, dk]
        });
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Concatenates tensors along their last axis; leading extents must agree.
    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| shape_err!("empty concat"))?);
        let lead = first.shape()[..first.rank() - 1].to_vec();
        let widths: Vec<usize> = xs
            .iter()
            .map(|v| {
                let s = self.value(*v).shape();
                if s[..s.len() - 1] != lead[..] {
                    Err(shape_err!("concat leading extents {:?} vs {:?}", s, lead))
                } else {
                    Ok(s[s.len() - 1])
                }
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.clone();
        shape.push(total);
        let out = Tensor::from_parts(shape, out);
        let widths2 = widths.clone();
        Ok(self.custom(xs, out, move |g, p, _| {
            let mut grads: Vec<Vec<f64>> = widths2.iter().map(|w| Vec::with_capacity(rows * w)).collect();
            for r in 0..rows {
                let mut off = r * total;
                for (gi, &w) in grads.iter_mut().zip(&widths2) {
                    gi.extend_from_slice(&g.data()[off..off + w]);
                    off += w;
                }
            }
            grads
                .into_iter()
                .zip(p)
                .map(|(d, pv)| Tensor::from_parts(pv.shape().to_vec(), d))
                .collect()
        }))
    }

    /// Rearranges `r x r` spatial blocks into channels: `H x W x C` to
    /// `H/r x W/r x r*r*C`.
    pub fn space_to_depth(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if h % r != 0 || w % r != 0 {
            return Err(shape_err!("space_to_depth({r}) on {h}x{w}"));
        }
        let perm = space_to_depth_perm(h, w, c, r);
        let xd = self.value(x).data();
        let out = Tensor::from_parts(
            vec![h / r, w / r, r * r * c],
            perm.iter().map(|&s| xd[s]).collect(),
        );
        Ok(self.custom(&[x], out, move |g, p, _| {
            let mut dx = vec![0.0; g.len()];
            for (o, &s) in perm.iter().enumerate() {
                dx[s] = g.data()[o];
            }
            vec![Tensor::from_parts(p[0].shape().to_vec(), dx)]
        }))
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        if c % (r * r) != 0 {
            return Err(shape_err!("depth_to_space({r}) with {c} channels"));
        }
        let co = c / (r * r);
        let perm = space_to_depth_perm(h * r, w * r, co, r);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for (o, &s) in perm.iter().enumerate() {
            out[s] = xd[o];
        }
        let out = Tensor::from_parts(vec![h * r, w * r, co], out);
        Ok(self.custom(&[x], out, move |g, p, _| {
            let dx = perm.iter().map(|&s| g.data()[s]).collect();
            vec![Tensor::from_parts(p[0].shape().to_vec(), dx)]
        }))
    }

    /// 2x2 average pooling of `H x W x C` (edge cells average what exists).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).hwc()?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let rows = Rc::new(AxisMap::from_fn(oh, h, |o, i| pool_weight(o, i, h)));
        let cols = Rc::new(AxisMap::from_fn(ow, w, |o, i| pool_weight(o, i, w)));
        let _ = c;
        let r = self.apply_axis(x, rows, 0)?;
        self.apply_axis(r, cols, 1)
    }

    /// Per-row (last axis) L2 normalization.
    pub fn l2_normalize_last(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = *xv.shape().last().ok_or_else(|| shape_err!("normalize scalar"))?;
        let rows = xv.len() / c;
        let norms: Vec<f64> = (0..rows)
            .map(|r| (xv.data()[r * c..(r + 1) * c].iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            .collect();
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i] / norms[i / c]);
        Ok(self.custom(&[x], out, move |g, _, y| {
            let mut dx = vec![0.0; g.len()];
            for r in 0..rows {
                let gr = &g.data()[r * c..(r + 1) * c];
                let yr = &y.data()[r * c..(r + 1) * c];
                let gy = dot(gr, yr);
                for k in 0..c {
                    dx[r * c + k] = (gr[k] - yr[k] * gy) / norms[r];
                }
            }
            vec![Tensor::from_parts(g.shape().to_vec(), dx)]
        }))
    }

    /// Euclidean norm of all elements, as a scalar node.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).norm_l2();
        self.custom(&[x], Tensor::scalar(n), move |g, p, _| {
            let s = if n > 0.0 { g.item() / n } else { 0.0 };
            vec![p[0].scale(s)]
        })
    }

    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| shape_err!("empty sum"))?).clone();
        let mut acc = first;
        for v in &xs[1..] {
            acc = acc.add(self.value(*v))?;
        }
        Ok(self.custom(xs, acc, |g, p, _| p.iter().map(|_| g.clone()).collect()))
    }

    /// Mean cross-entropy of `N x K` logits against class ids; entries equal
    /// to `ignore` are skipped. Returns 0 when every pixel is ignored.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<u8>>, ignore: u8) -> Result<Var> {
        let lv = self.value(logits);
        let (n, k) = lv.rows_cols()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} logit rows", labels.len()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        let probs = kernels::softmax_rows(lv)?;
        let count = labels.iter().filter(|&&l| l != ignore).count();
        let loss = compensated_sum(labels.iter().enumerate().filter(|(_, &l)| l != ignore).map(|(i, &l)| {
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() - row[l as usize]
        }));
        let denom = count.max(1) as f64;
        Ok(self.custom(&[logits], Tensor::scalar(loss / denom), move |g, _, _| {
            let s = g.item() / denom;
            let mut d = probs.data().to_vec();
            for (i, &l) in labels.iter().enumerate() {
                let row = &mut d[i * k..(i + 1) * k];
                if l == ignore {
                    row.iter_mut().for_each(|v| *v = 0.0);
                } else {
                    row[l as usize] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
            }
            vec![Tensor::from_parts(vec![n, k], d)]
        }))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::filled(self.nodes[root.0].value.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(bw) = &node.backward {
                let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
                let pg = bw(&g, &parents, &node.value);
                debug_assert_eq!(pg.len(), node.parents.len());
                for (&p, d) in node.parents.iter().zip(pg) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&d),
                        slot => *slot = Some(d),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }
}

fn pool_weight(o: usize, i: usize, n: usize) -> f64 {
    if i / 2 != o {
        return 0.0;
    }
    let span = if 2 * o + 1 < n { 2.0 } else { 1.0 };
    1.0 / span
}

/// Source flat index for each destination index of space_to_depth.
fn space_to_depth_perm(h: usize, w: usize, c: usize, r: usize) -> Vec<usize> {
    let (oh, ow, oc) = (h / r, w / r, r * r * c);
    let mut perm = Vec::with_capacity(h * w * c);
    for i in 0..oh {
        for j in 0..ow {
            for d in 0..oc {
                let (a, b, ch) = (d / (r * c), (d / c) % r, d % c);
                perm.push(((i * r + a) * w + (j * r + b)) * c + ch);
            }
        }
    }
    perm
}

/// Returns the attention matrix and the attended output.
pub(crate) fn attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, c) = q.rows_cols()?;
    let (m, c2) = k.rows_cols()?;
    let (m2, _) = v.rows_cols()?;
    if c != c2 || m != m2 {
        return Err(shape_err!(
            "attention q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    let s = kernels::matmul_bt(q, k)?.scale(1.0 / (c as f64).sqrt());
    let a = kernels::softmax_rows(&s)?;
    let out = kernels::matmul(&a, v)?;
    Ok((a, out))
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    a: &Tensor,
    g: &Tensor,
    inv_sqrt_c: f64,
) -> (Tensor, Tensor, Tensor) {
    let da = kernels::matmul_bt(g, v).expect("shape");
    let dv = kernels::matmul_at(a, g).expect("shape");
    let (n, m) = a.rows_cols().expect("rank 2");
    let mut ds = vec![0.0; n * m];
    for i in 0..n {
        let ar = a.row(i);
        let dr = da.row(i);
        let inner = dot(ar, dr);
        for j in 0..m {
            ds[i * m + j] = ar[j] * (dr[j] - inner) * inv_sqrt_c;
        }
    }
    let ds = Tensor::from_parts(vec![n, m], ds);
    let dq = kernels::matmul(&ds, k).expect("shape");
    let dk = kernels::matmul_at(&ds, q).expect("shape");
    (dq, dk, dv)
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Adds every parameter gradient into `acc` (same layout as the store).
    /// Parameters used several times on the tape accumulate.
    pub fn accumulate_into(&self, acc: &mut [Tensor], weight: f64) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = &mut acc[id.index()];
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += weight * s;
                }
            }
        }
    }
}
