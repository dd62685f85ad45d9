//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its value plus whatever it needs
//! for the backward pass. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for the parameters that were touched.
//!
//! Sequence tensors are `[batch, length, features]`. Per-position masks are
//! flat `bool` slices over `batch * length` rows, `true` for real positions.

use std::collections::HashMap;

use rand::Rng;

use super::params::{site_rng, Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine {
        x: Var,
        w: Var,
        b: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    Gather {
        x: Var,
        sources: Vec<Option<usize>>,
    },
    Reshape {
        x: Var,
    },
    MaskedL1 {
        pred: Var,
        target: Vec<f64>,
        keep: Vec<bool>,
        count: usize,
    },
    MaskedMse {
        pred: Var,
        target: Vec<f64>,
        keep: Vec<bool>,
        count: usize,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    DotConst {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass over parameters borrowed from a [`ParamStore`].
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    train: bool,
    seed: u64,
}

fn dim_err(op: &str, msg: String) -> Error {
    Error::Dimension(format!("{op}: {msg}"))
}

impl<'s> Graph<'s> {
    /// An inference graph: dropout is the identity.
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            train: false,
            seed: 0,
        }
    }

    /// A training graph whose dropout masks derive from `seed` and the site name.
    pub fn training(store: &'s ParamStore, seed: u64) -> Self {
        Self {
            train: true,
            seed,
            ..Self::new(store)
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op_name: &str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{op_name} produced a non-finite value")));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        self.nodes.push(Node {
            value,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// `y = x W + b` over the last axis.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if wv.shape().len() != 2 {
            return Err(dim_err("affine", format!("weight must be 2-D, got {:?}", wv.shape())));
        }
        let (din, dout) = (wv.shape()[0], wv.shape()[1]);
        if xv.last_dim() != din || bv.numel() != dout {
            return Err(dim_err(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let y = &mut out[r * dout..(r + 1) * dout];
            y.copy_from_slice(bd);
            for i in 0..din {
                let xi = xd[r * din + i];
                if xi != 0.0 {
                    let wrow = &wd[i * dout..(i + 1) * dout];
                    for (yo, wo) in y.iter_mut().zip(wrow) {
                        *yo += xi * wo;
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        self.push("affine", Tensor::new(shape, out)?, Op::Affine { x, w, b })
    }

    /// Normalises each row over the last axis (population variance), then
    /// scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::Argument(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if d == 0 || gv.numel() != d || bv.numel() != d {
            return Err(dim_err(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for i in 0..d {
                let h = (row[i] - mean) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = gv.data()[i] * h + bv.data()[i];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Scaled dot-product attention over already-projected `q`, `k`, `v`
    /// (`[B, L, D]`), split into `heads` heads. Keys at padded positions get
    /// zero weight.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape().len() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(dim_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (b, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        if let Some(m) = mask {
            if m.len() != b * l {
                return Err(dim_err("attention", format!("mask has {} entries, expected {}", m.len(), b * l)));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut probs = vec![0.0; b * heads * l * l];
        let mut out = vec![0.0; b * l * d];
        let mut scores = vec![0.0; l];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let qrow = &qd[(bi * l + i) * d + off..(bi * l + i) * d + off + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..l {
                        let valid = mask.is_none_or(|m| m[bi * l + j]);
                        if valid {
                            let krow = &kd[(bi * l + j) * d + off..(bi * l + j) * d + off + dh];
                            let s = qrow.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>() * scale;
                            scores[j] = s;
                            max = max.max(s);
                        } else {
                            scores[j] = f64::NEG_INFINITY;
                        }
                    }
                    let pbase = ((bi * heads + h) * l + i) * l;
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut z = 0.0;
                    for j in 0..l {
                        let e = if scores[j] == f64::NEG_INFINITY {
                            0.0
                        } else {
                            (scores[j] - max).exp()
                        };
                        probs[pbase + j] = e;
                        z += e;
                    }
                    let orow = &mut out[(bi * l + i) * d + off..(bi * l + i) * d + off + dh];
                    for j in 0..l {
                        let p = probs[pbase + j] / z;
                        probs[pbase + j] = p;
                        if p != 0.0 {
                            let vrow = &vd[(bi * l + j) * d + off..(bi * l + j) * d + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vrow) {
                                *o += p * vv;
                            }
                        }
                    }
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.push(
            "attention",
            Tensor::new(shape, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// Attention weights `[B, heads, L, L]` of an attention node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Same-length 1-D convolution along the sequence axis, zero padded.
    /// `kernel` is `[k, Din, Dout]` with odd `k`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if kv.shape().len() != 3 || xv.shape().len() != 3 {
            return Err(dim_err("conv1d", format!("x {:?}, kernel {:?}", xv.shape(), kv.shape())));
        }
        let (kw, din, dout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        if kw % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {kw}")));
        }
        let (b, l) = (xv.shape()[0], xv.shape()[1]);
        if xv.shape()[2] != din || bv.numel() != dout {
            return Err(dim_err(
                "conv1d",
                format!("x {:?}, kernel {:?}, bias {:?}", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        let pad = kw / 2;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![0.0; b * l * dout];
        for bi in 0..b {
            for t in 0..l {
                let y = &mut out[(bi * l + t) * dout..(bi * l + t + 1) * dout];
                y.copy_from_slice(bd);
                for j in 0..kw {
                    let src = t + j;
                    if src < pad || src - pad >= l {
                        continue;
                    }
                    let xrow = &xd[(bi * l + src - pad) * din..(bi * l + src - pad + 1) * din];
                    for (i, &xi) in xrow.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let krow = &kd[(j * din + i) * dout..(j * din + i + 1) * dout];
                        for (yo, ko) in y.iter_mut().zip(krow) {
                            *yo += xi * ko;
                        }
                    }
                }
            }
        }
        self.push(
            "conv1d",
            Tensor::new(vec![b, l, dout], out)?,
            Op::Conv1d { x, kernel, bias },
        )
    }

    /// Gathers rows of `table` (`[V, D]`); output shape is `shape + [D]`.
    pub fn embedding(&mut self, ids: &[usize], shape: &[usize], table: Var) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(dim_err("embedding", format!("table must be 2-D, got {:?}", tv.shape())));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        if shape.iter().product::<usize>() != ids.len() {
            return Err(dim_err("embedding", format!("{} ids for shape {shape:?}", ids.len())));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Index(format!("embedding id {id} >= vocabulary size {vocab}")));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        self.push(
            "embedding",
            Tensor::new(out_shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v.max(0.0)).collect())?;
        self.push("relu", out, Op::Relu { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err("add", format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out: Vec<f64> = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b })
    }

    pub fn add_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c)?;
        self.add(x, c)
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factor.len() != xv.numel() {
            return Err(dim_err("mul_const", format!("{} factors for {:?}", factor.len(), xv.shape())));
        }
        let out: Vec<f64> = xv.data().iter().zip(&factor).map(|(a, f)| a * f).collect();
        let shape = xv.shape().to_vec();
        self.push("mul_const", Tensor::new(shape, out)?, Op::MulConst { x, factor })
    }

    /// Zeroes the rows (over the last axis) where `keep` is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if keep.len() != xv.rows() {
            return Err(dim_err("mask_rows", format!("{} mask rows for {:?}", keep.len(), xv.shape())));
        }
        let factor: Vec<f64> = keep
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d))
            .collect();
        self.mul_const(x, factor)
    }

    /// Inverted dropout. Identity on inference graphs or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, site: &str) -> Result<Var> {
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        let mut rng = site_rng(self.seed, site);
        let n = self.value(x).numel();
        let keep = 1.0 / (1.0 - p);
        let factor = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.mul_const(x, factor)
    }

    /// Builds `[rows.len() / ..., D]` output rows from source rows of `x`
    /// (viewed as `[rows, D]`); `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, sources: Vec<Option<usize>>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let n_rows = xv.rows();
        if shape.last() != Some(&d) || shape.iter().product::<usize>() != sources.len() * d {
            return Err(dim_err("gather_rows", format!("shape {shape:?} for {} rows of {d}", sources.len())));
        }
        let mut out = vec![0.0; sources.len() * d];
        for (r, s) in sources.iter().enumerate() {
            if let Some(s) = *s {
                if s >= n_rows {
                    return Err(Error::Index(format!("gather source row {s} >= {n_rows}")));
                }
                out[r * d..(r + 1) * d].copy_from_slice(&xv.data()[s * d..(s + 1) * d]);
            }
        }
        self.push("gather_rows", Tensor::new(shape.to_vec(), out)?, Op::Gather { x, sources })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape { x })
    }

    fn check_loss_inputs(&self, op: &str, pred: Var, target: &Tensor, keep: &[bool]) -> Result<usize> {
        let pv = self.value(pred);
        if pv.numel() != target.numel() {
            return Err(dim_err(op, format!("prediction {:?} vs target {:?}", pv.shape(), target.shape())));
        }
        if keep.len() != pv.rows() {
            return Err(dim_err(op, format!("{} mask rows for {:?}", keep.len(), pv.shape())));
        }
        Ok(keep.iter().filter(|&&k| k).count() * pv.last_dim())
    }

    /// Mean absolute error over the rows where `keep` is true.
    pub fn masked_l1(&mut self, pred: Var, target: &Tensor, keep: &[bool]) -> Result<Var> {
        let count = self.check_loss_inputs("masked_l1", pred, target, keep)?;
        let pv = self.value(pred);
        let d = pv.last_dim();
        let mut sum = 0.0;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                for i in r * d..(r + 1) * d {
                    sum += (pv.data()[i] - target.data()[i]).abs();
                }
            }
        }
        let value = if count == 0 { 0.0 } else { sum / count as f64 };
        self.push(
            "masked_l1",
            Tensor::scalar(value),
            Op::MaskedL1 {
                pred,
                target: target.data().to_vec(),
                keep: keep.to_vec(),
                count,
            },
        )
    }

    /// Mean squared error over the rows where `keep` is true.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, keep: &[bool]) -> Result<Var> {
        let count = self.check_loss_inputs("masked_mse", pred, target, keep)?;
        let pv = self.value(pred);
        let d = pv.last_dim();
        let mut sum = 0.0;
        for (r, &k) in keep.iter().enumerate() {
            if k {
                for i in r * d..(r + 1) * d {
                    let e = pv.data()[i] - target.data()[i];
                    sum += e * e;
                }
            }
        }
        let value = if count == 0 { 0.0 } else { sum / count as f64 };
        self.push(
            "masked_mse",
            Tensor::scalar(value),
            Op::MaskedMse {
                pred,
                target: target.data().to_vec(),
                keep: keep.to_vec(),
                count,
            },
        )
    }

    /// `sum_i w_i * x_i` over scalar nodes, accumulated left to right.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = 0.0;
        for &(v, w) in terms {
            let vv = self.value(v);
            if vv.numel() != 1 {
                return Err(dim_err("weighted_sum", format!("term has shape {:?}", vv.shape())));
            }
            acc += w * vv.data()[0];
        }
        self.push(
            "weighted_sum",
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    /// `sum(x * weights)`; reduces any tensor to a scalar for gradient checks.
    pub fn dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() != weights.numel() {
            return Err(dim_err("dot_const", format!("{:?} vs {:?}", xv.shape(), weights.shape())));
        }
        let value = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        self.push(
            "dot_const",
            Tensor::scalar(value),
            Op::DotConst {
                x,
                weights: weights.data().to_vec(),
            },
        )
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(dim_err("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.entries.push((*id, Tensor::new(node.value.shape().to_vec(), g)?)),
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (din, dout) = (wv.shape()[0], wv.shape()[1]);
                    let rows = xv.rows();
                    {
                        let dx = self.grad_buf(&mut grads, *x);
                        for r in 0..rows {
                            let gy = &g[r * dout..(r + 1) * dout];
                            for i in 0..din {
                                let wrow = &wv.data()[i * dout..(i + 1) * dout];
                                dx[r * din + i] += gy.iter().zip(wrow).map(|(a, c)| a * c).sum::<f64>();
                            }
                        }
                    }
                    {
                        let dw = self.grad_buf(&mut grads, *w);
                        for r in 0..rows {
                            let gy = &g[r * dout..(r + 1) * dout];
                            for i in 0..din {
                                let xi = xv.data()[r * din + i];
                                if xi != 0.0 {
                                    for (dwo, gyo) in dw[i * dout..(i + 1) * dout].iter_mut().zip(gy) {
                                        *dwo += xi * gyo;
                                    }
                                }
                            }
                        }
                    }
                    let db = self.grad_buf(&mut grads, *b);
                    for r in 0..rows {
                        for (o, dbo) in db.iter_mut().enumerate() {
                            *dbo += g[r * dout + o];
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let d = gv.numel();
                    let rows = inv_std.len();
                    {
                        let dgamma = self.grad_buf(&mut grads, *gamma);
                        for r in 0..rows {
                            for i in 0..d {
                                dgamma[i] += g[r * d + i] * xhat[r * d + i];
                            }
                        }
                    }
                    {
                        let dbeta = self.grad_buf(&mut grads, *beta);
                        for r in 0..rows {
                            for i in 0..d {
                                dbeta[i] += g[r * d + i];
                            }
                        }
                    }
                    let gd = gv.data().to_vec();
                    let dx = self.grad_buf(&mut grads, *x);
                    let n = d as f64;
                    for r in 0..rows {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for i in 0..d {
                            let dh = g[r * d + i] * gd[i];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + i];
                        }
                        for i in 0..d {
                            let dh = g[r * d + i] * gd[i];
                            dx[r * d + i] +=
                                inv_std[r] / n * (n * dh - sum_dh - xhat[r * d + i] * sum_dh_h);
                        }
                    }
                }
                Op::Attention { q, k, v, heads, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs);
                }
                Op::Conv1d { x, kernel, bias } => {
                    let (xv, kv) = (self.value(*x), self.value(*kernel));
                    let (kw, din, dout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    let (b, l) = (xv.shape()[0], xv.shape()[1]);
                    let pad = kw / 2;
                    {
                        let dx = self.grad_buf(&mut grads, *x);
                        for bi in 0..b {
                            for t in 0..l {
                                let gy = &g[(bi * l + t) * dout..(bi * l + t + 1) * dout];
                                for j in 0..kw {
                                    let src = t + j;
                                    if src < pad || src - pad >= l {
                                        continue;
                                    }
                                    let xr = (bi * l + src - pad) * din;
                                    for i in 0..din {
                                        let krow = &kv.data()[(j * din + i) * dout..(j * din + i + 1) * dout];
                                        dx[xr + i] += gy.iter().zip(krow).map(|(a, c)| a * c).sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                    {
                        let dk = self.grad_buf(&mut grads, *kernel);
                        for bi in 0..b {
                            for t in 0..l {
                                let gy = &g[(bi * l + t) * dout..(bi * l + t + 1) * dout];
                                for j in 0..kw {
                                    let src = t + j;
                                    if src < pad || src - pad >= l {
                                        continue;
                                    }
                                    let xr = (bi * l + src - pad) * din;
                                    for i in 0..din {
                                        let xi = xv.data()[xr + i];
                                        if xi == 0.0 {
                                            continue;
                                        }
                                        let kr = (j * din + i) * dout;
                                        for (dko, gyo) in dk[kr..kr + dout].iter_mut().zip(gy) {
                                            *dko += xi * gyo;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let db = self.grad_buf(&mut grads, *bias);
                    for r in 0..b * l {
                        for (o, dbo) in db.iter_mut().enumerate() {
                            *dbo += g[r * dout + o];
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let d = self.value(*table).shape()[1];
                    let dt = self.grad_buf(&mut grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            dt[id * d + i] += g[r * d + i];
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx = self.grad_buf(&mut grads, *x);
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for t in [*a, *b] {
                        let dt = self.grad_buf(&mut grads, t);
                        for (d, gi) in dt.iter_mut().zip(&g) {
                            *d += gi;
                        }
                    }
                }
                Op::MulConst { x, factor } => {
                    let dx = self.grad_buf(&mut grads, *x);
                    for i in 0..g.len() {
                        dx[i] += g[i] * factor[i];
                    }
                }
                Op::Gather { x, sources } => {
                    let d = self.value(*x).last_dim();
                    let dx = self.grad_buf(&mut grads, *x);
                    for (r, s) in sources.iter().enumerate() {
                        if let Some(s) = *s {
                            for i in 0..d {
                                dx[s * d + i] += g[r * d + i];
                            }
                        }
                    }
                }
                Op::Reshape { x } => {
                    let dx = self.grad_buf(&mut grads, *x);
                    for (d, gi) in dx.iter_mut().zip(&g) {
                        *d += gi;
                    }
                }
                Op::MaskedL1 {
                    pred,
                    target,
                    keep,
                    count,
                } => {
                    if *count > 0 {
                        let pv = self.value(*pred);
                        let d = pv.last_dim();
                        let scale = g[0] / *count as f64;
                        let pd = pv.data().to_vec();
                        let dp = self.grad_buf(&mut grads, *pred);
                        for (r, &k) in keep.iter().enumerate() {
                            if k {
                                for i in r * d..(r + 1) * d {
                                    let e = pd[i] - target[i];
                                    if e > 0.0 {
                                        dp[i] += scale;
                                    } else if e < 0.0 {
                                        dp[i] -= scale;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::MaskedMse {
                    pred,
                    target,
                    keep,
                    count,
                } => {
                    if *count > 0 {
                        let pv = self.value(*pred);
                        let d = pv.last_dim();
                        let scale = 2.0 * g[0] / *count as f64;
                        let pd = pv.data().to_vec();
                        let dp = self.grad_buf(&mut grads, *pred);
                        for (r, &k) in keep.iter().enumerate() {
                            if k {
                                for i in r * d..(r + 1) * d {
                                    dp[i] += scale * (pd[i] - target[i]);
                                }
                            }
                        }
                    }
                }
                Op::WeightedSum { terms } => {
                    for &(v, w) in terms {
                        if w != 0.0 {
                            self.grad_buf(&mut grads, v)[0] += w * g[0];
                        }
                    }
                }
                Op::DotConst { x, weights } => {
                    let dx = self.grad_buf(&mut grads, *x);
                    for (d, w) in dx.iter_mut().zip(weights) {
                        *d += g[0] * w;
                    }
                }
            }
        }
        out.entries.sort_by_key(|(id, _)| *id);
        for (id, grad) in &out.entries {
            if !grad.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    self.store.get(*id).name
                )));
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![0.0; b * l * d];
        let mut dk = vec![0.0; b * l * d];
        let mut dv = vec![0.0; b * l * d];
        let mut dp = vec![0.0; l];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..l {
                    let pbase = ((bi * heads + h) * l + i) * l;
                    let gi = &g[(bi * l + i) * d + off..(bi * l + i) * d + off + dh];
                    let mut dot = 0.0;
                    for j in 0..l {
                        let p = probs[pbase + j];
                        if p == 0.0 {
                            dp[j] = 0.0;
                            continue;
                        }
                        let vr = (bi * l + j) * d + off;
                        let vrow = &vv.data()[vr..vr + dh];
                        dp[j] = gi.iter().zip(vrow).map(|(a, c)| a * c).sum();
                        dot += p * dp[j];
                        for (dvo, go) in dv[vr..vr + dh].iter_mut().zip(gi) {
                            *dvo += p * go;
                        }
                    }
                    let qr = (bi * l + i) * d + off;
                    for j in 0..l {
                        let p = probs[pbase + j];
                        if p == 0.0 {
                            continue;
                        }
                        let ds = p * (dp[j] - dot) * scale;
                        let kr = (bi * l + j) * d + off;
                        for c in 0..dh {
                            dq[qr + c] += ds * kv.data()[kr + c];
                            dk[kr + c] += ds * qv.data()[qr + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            let dst = self.grad_buf(grads, var);
            for (a, c) in dst.iter_mut().zip(&buf) {
                *a += c;
            }
        }
    }
}

/// Fixed sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * freq;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}
