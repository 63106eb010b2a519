//! Dense f64 tensors and a single-use reverse-mode tape.
//!
//! Every op appends a node holding its value; `backward` walks the nodes in
//! reverse and accumulates gradients into the leaves that asked for them.
//! Layout is row-major; volumetric tensors are `[N, C, D, H, W]`.

use crate::conv;
use crate::error::{NnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per (sample, channel) for a `[N, C, ...]` tensor.
    fn spatial(&self) -> usize {
        self.shape[2..].iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Silu(usize),
    Add(usize, usize),
    Concat(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Modulate {
        h: usize,
        ss: usize,
    },
    Upsample2(usize),
    Attention {
        qkv: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    L1Loss {
        pred: usize,
        target: Vec<f64>,
    },
    Sum(usize),
    Dot {
        x: usize,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(NnError::Shape(msg))
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf; receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of a leaf after `backward`; `None` for constants and untouched leaves.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5
            || ws.len() != 5
            || ws[1] != xs[1]
            || ws[2] != ws[3]
            || ws[3] != ws[4]
            || stride == 0
        {
            return shape_err(format!("conv3d input {xs:?} with weight {ws:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return shape_err(format!(
                    "conv3d bias {:?} for {} outputs",
                    self.shape(b),
                    ws[0]
                ));
            }
        }
        let geom = conv::ConvGeom::new(&xs, &ws, stride, pad)?;
        let out = conv::forward(
            &geom,
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            b.map(|b| self.nodes[b.0].value.data.as_slice()),
        );
        let rg = self.rg(&[x.0, w.0]) || b.is_some_and(|b| self.nodes[b.0].requires_grad);
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv3d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 || groups == 0 || xs[1] % groups != 0 {
            return shape_err(format!("group_norm of {xs:?} into {groups} groups"));
        }
        let c = xs[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err(format!(
                "group_norm affine parameters must have shape [{c}]"
            ));
        }
        let xv = &self.nodes[x.0].value;
        let (n, s, cg) = (xs[0], xv.spatial(), c / groups);
        let (gv, bv) = (
            &self.nodes[gamma.0].value.data,
            &self.nodes[beta.0].value.data,
        );
        let mut out = vec![0.0; xv.len()];
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let m = (cg * s) as f64;
        for ni in 0..n {
            for g in 0..groups {
                let start = (ni * c + g * cg) * s;
                let block = &xv.data[start..start + cg * s];
                let mu = block.iter().sum::<f64>() / m;
                let var = block.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
                let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    let off = start + ci * s;
                    for k in 0..s {
                        out[off + k] = (xv.data[off + k] - mu) * r * gv[ch] + bv[ch];
                    }
                }
                mean.push(mu);
                rstd.push(r);
            }
        }
        let rg = self.rg(&[x.0, gamma.0, beta.0]);
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                mean,
                rstd,
            },
            rg,
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let data = xv.data.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        let rg = self.rg(&[x.0]);
        self.push(value, Op::Silu(x.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let value = Tensor {
            shape: av.shape.clone(),
            data,
        };
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    /// Concatenate two `[N, C, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("concat {sa:?} with {sb:?}"));
        }
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let s = av.spatial();
        let (ca, cb) = (sa[1], sb[1]);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&av.data[n * ca * s..(n + 1) * ca * s]);
            data.extend_from_slice(&bv.data[n * cb * s..(n + 1) * cb * s]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(Tensor { shape, data }, Op::Concat(a.0, b.0), rg))
    }

    /// `x [N, I] · wᵀ [I, O] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return shape_err(format!("linear {xs:?} with weight {ws:?}"));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let (xv, wv, bv) = (
            &self.nodes[x.0].value.data,
            &self.nodes[w.0].value.data,
            &self.nodes[b.0].value.data,
        );
        let mut out = vec![0.0; n * o];
        for r in 0..n {
            for c in 0..o {
                out[r * o + c] = bv[c] + (0..i).map(|k| xv[r * i + k] * wv[c * i + k]).sum::<f64>();
            }
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            Tensor::new(vec![n, o], out)?,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        ))
    }

    /// `h * (1 + scale) + shift` with `ss = [scale | shift]` of shape `[N, 2C]`.
    pub fn modulate(&mut self, h: Var, ss: Var) -> Result<Var> {
        let (hs, sss) = (self.shape(h).to_vec(), self.shape(ss).to_vec());
        if hs.len() < 2 || sss != [hs[0], 2 * hs[1]] {
            return shape_err(format!("modulate {hs:?} by {sss:?}"));
        }
        let hv = &self.nodes[h.0].value;
        let sv = &self.nodes[ss.0].value.data;
        let (c, s) = (hs[1], hv.spatial());
        let mut out = vec![0.0; hv.len()];
        for n in 0..hs[0] {
            for ch in 0..c {
                let (scale, shift) = (sv[n * 2 * c + ch], sv[n * 2 * c + c + ch]);
                let off = (n * c + ch) * s;
                for k in off..off + s {
                    out[k] = hv.data[k] * (1.0 + scale) + shift;
                }
            }
        }
        let rg = self.rg(&[h.0, ss.0]);
        Ok(self.push(Tensor::new(hs, out)?, Op::Modulate { h: h.0, ss: ss.0 }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of a `[N, C, D, H, W]` tensor.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return shape_err(format!("upsample2 expects 5 dims, got {xs:?}"));
        }
        let (d, h, w) = (xs[2], xs[3], xs[4]);
        let xv = &self.nodes[x.0].value.data;
        let mut out = vec![0.0; xv.len() * 8];
        for nc in 0..xs[0] * xs[1] {
            let src = &xv[nc * d * h * w..];
            let dst = &mut out[nc * 8 * d * h * w..];
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let row = ((z / 2) * h + y / 2) * w;
                    let orow = (z * 2 * h + y) * 2 * w;
                    for xx in 0..2 * w {
                        dst[orow + xx] = src[row + xx / 2];
                    }
                }
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![xs[0], xs[1], 2 * d, 2 * h, 2 * w], out)?,
            Op::Upsample2(x.0),
            rg,
        ))
    }

    /// Multi-head softmax attention over flattened spatial positions.
    ///
    /// `qkv` has `3 · heads · dh` channels laid out as `[q | k | v]`, each
    /// head-major; the output has `heads · dh` channels and the same spatial shape.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let qs = self.shape(qkv).to_vec();
        if qs.len() < 3 || heads == 0 || qs[1] % (3 * heads) != 0 {
            return shape_err(format!("attention over {qs:?} with {heads} heads"));
        }
        let qv = &self.nodes[qkv.0].value;
        let (n, l) = (qs[0], qv.spatial());
        let width = qs[1] / 3;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; n * width * l];
        let mut probs = vec![0.0; n * heads * l * l];
        for b in 0..n {
            let base = b * qs[1] * l;
            for hd in 0..heads {
                let q = base + hd * dh * l;
                let k = base + (width + hd * dh) * l;
                let v = base + (2 * width + hd * dh) * l;
                let p = &mut probs[(b * heads + hd) * l * l..(b * heads + hd + 1) * l * l];
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    for (j, r) in row.iter_mut().enumerate() {
                        *r = scale
                            * (0..dh)
                                .map(|c| qv.data[q + c * l + i] * qv.data[k + c * l + j])
                                .sum::<f64>();
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - mx).exp();
                        z += *r;
                    }
                    row.iter_mut().for_each(|r| *r /= z);
                }
                let o = (b * width + hd * dh) * l;
                for c in 0..dh {
                    for i in 0..l {
                        out[o + c * l + i] =
                            (0..l).map(|j| p[i * l + j] * qv.data[v + c * l + j]).sum();
                    }
                }
            }
        }
        let mut shape = qs.clone();
        shape[1] = width;
        let rg = self.rg(&[qkv.0]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Attention {
                qkv: qkv.0,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Mean absolute difference against a constant target; scalar output.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape.as_slice() {
            return shape_err(format!(
                "l1 loss {:?} vs {:?}",
                self.shape(pred),
                target.shape
            ));
        }
        let pv = &self.nodes[pred.0].value.data;
        let loss = pv
            .iter()
            .zip(&target.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / pv.len() as f64;
        let rg = self.rg(&[pred.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::L1Loss {
                pred: pred.0,
                target: target.data.clone(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// `Σ x ⊙ weights` with constant weights; scalar output.
    pub fn dot(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xv = &self.nodes[x.0].value.data;
        if xv.len() != weights.len() {
            return shape_err(format!(
                "dot of {} values with {} weights",
                xv.len(),
                weights.len()
            ));
        }
        let s = xv.iter().zip(weights).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Dot {
                x: x.0,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// Populate gradients of every trainable leaf with respect to the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(NnError::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NonScalarLoss(
                self.nodes[loss.0].value.shape.clone(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads)?;
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: usize, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let g = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
        f(g);
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let geom = conv::ConvGeom::new(&val(*x).shape, &val(*w).shape, *stride, *pad)?;
                let need_x = self.nodes[*x].requires_grad;
                let need_w = self.nodes[*w].requires_grad;
                let (dx, dw) =
                    conv::backward(&geom, &val(*x).data, &val(*w).data, g, need_x, need_w);
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, |acc| add_into(acc, &dx));
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, *w, |acc| add_into(acc, &dw));
                }
                if let Some(b) = b {
                    let (co, p) = (geom.c_out, geom.out_spatial());
                    self.accumulate(grads, *b, |acc| {
                        for n in 0..geom.n {
                            for c in 0..co {
                                acc[c] += g[(n * co + c) * p..(n * co + c + 1) * p]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                    });
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xv = val(*x);
                let gv = &val(*gamma).data;
                let (n, c, s) = (xv.shape[0], xv.shape[1], xv.spatial());
                let cg = c / groups;
                let m = (cg * s) as f64;
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ni in 0..n {
                    for grp in 0..*groups {
                        let gi = ni * groups + grp;
                        let (mu, r) = (mean[gi], rstd[gi]);
                        let start = (ni * c + grp * cg) * s;
                        let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            for k in start + ci * s..start + (ci + 1) * s {
                                let xhat = (xv.data[k] - mu) * r;
                                dgamma[ch] += g[k] * xhat;
                                dbeta[ch] += g[k];
                                let d = g[k] * gv[ch];
                                sum_d += d;
                                sum_dx += d * xhat;
                            }
                        }
                        let (md, mdx) = (sum_d / m, sum_dx / m);
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            for k in start + ci * s..start + (ci + 1) * s {
                                let xhat = (xv.data[k] - mu) * r;
                                dx[k] = r * (g[k] * gv[ch] - md - xhat * mdx);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, |acc| add_into(acc, &dx));
                self.accumulate(grads, *gamma, |acc| add_into(acc, &dgamma));
                self.accumulate(grads, *beta, |acc| add_into(acc, &dbeta));
            }
            Op::Silu(x) => {
                let xv = &val(*x).data;
                self.accumulate(grads, *x, |acc| {
                    for ((a, &v), &gi) in acc.iter_mut().zip(xv).zip(g) {
                        let sg = 1.0 / (1.0 + (-v).exp());
                        *a += gi * sg * (1.0 + v * (1.0 - sg));
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| add_into(acc, g));
                self.accumulate(grads, *b, |acc| add_into(acc, g));
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (&val(*a).shape, &val(*b).shape);
                let s: usize = sa[2..].iter().product();
                let (ca, cb) = (sa[1] * s, sb[1] * s);
                self.accumulate(grads, *a, |acc| {
                    for n in 0..sa[0] {
                        add_into(
                            &mut acc[n * ca..(n + 1) * ca],
                            &g[n * (ca + cb)..n * (ca + cb) + ca],
                        );
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for n in 0..sa[0] {
                        add_into(
                            &mut acc[n * cb..(n + 1) * cb],
                            &g[n * (ca + cb) + ca..(n + 1) * (ca + cb)],
                        );
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&val(*x).data, &val(*w).data);
                let (n, i) = (val(*x).shape[0], val(*x).shape[1]);
                let o = val(*w).shape[0];
                self.accumulate(grads, *x, |acc| {
                    for r in 0..n {
                        for k in 0..i {
                            acc[r * i + k] +=
                                (0..o).map(|c| g[r * o + c] * wv[c * i + k]).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *w, |acc| {
                    for c in 0..o {
                        for k in 0..i {
                            acc[c * i + k] +=
                                (0..n).map(|r| g[r * o + c] * xv[r * i + k]).sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for c in 0..o {
                        acc[c] += (0..n).map(|r| g[r * o + c]).sum::<f64>();
                    }
                });
            }
            Op::Modulate { h, ss } => {
                let hv = val(*h);
                let sv = &val(*ss).data;
                let (c, s) = (hv.shape[1], hv.spatial());
                self.accumulate(grads, *h, |acc| {
                    for n in 0..hv.shape[0] {
                        for ch in 0..c {
                            let scale = sv[n * 2 * c + ch];
                            let off = (n * c + ch) * s;
                            for k in off..off + s {
                                acc[k] += g[k] * (1.0 + scale);
                            }
                        }
                    }
                });
                self.accumulate(grads, *ss, |acc| {
                    for n in 0..hv.shape[0] {
                        for ch in 0..c {
                            let off = (n * c + ch) * s;
                            let (mut ds, mut dt) = (0.0, 0.0);
                            for k in off..off + s {
                                ds += g[k] * hv.data[k];
                                dt += g[k];
                            }
                            acc[n * 2 * c + ch] += ds;
                            acc[n * 2 * c + c + ch] += dt;
                        }
                    }
                });
            }
            Op::Upsample2(x) => {
                let xs = &val(*x).shape;
                let (d, h, w) = (xs[2], xs[3], xs[4]);
                self.accumulate(grads, *x, |acc| {
                    for nc in 0..xs[0] * xs[1] {
                        let src = &g[nc * 8 * d * h * w..];
                        let dst = &mut acc[nc * d * h * w..];
                        for z in 0..2 * d {
                            for y in 0..2 * h {
                                let row = ((z / 2) * h + y / 2) * w;
                                let orow = (z * 2 * h + y) * 2 * w;
                                for xx in 0..2 * w {
                                    dst[row + xx / 2] += src[orow + xx];
                                }
                            }
                        }
                    }
                });
            }
            Op::Attention { qkv, heads, probs } => {
                let qv = val(*qkv);
                let (n, l) = (qv.shape[0], qv.spatial());
                let width = qv.shape[1] / 3;
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dqkv = vec![0.0; qv.len()];
                let mut dp = vec![0.0; l * l];
                for b in 0..n {
                    let base = b * qv.shape[1] * l;
                    for hd in 0..*heads {
                        let q = base + hd * dh * l;
                        let k = base + (width + hd * dh) * l;
                        let v = base + (2 * width + hd * dh) * l;
                        let o = (b * width + hd * dh) * l;
                        let p = &probs[(b * heads + hd) * l * l..(b * heads + hd + 1) * l * l];
                        for c in 0..dh {
                            for j in 0..l {
                                dqkv[v + c * l + j] +=
                                    (0..l).map(|i| g[o + c * l + i] * p[i * l + j]).sum::<f64>();
                            }
                        }
                        for i in 0..l {
                            for j in 0..l {
                                dp[i * l + j] = (0..dh)
                                    .map(|c| g[o + c * l + i] * qv.data[v + c * l + j])
                                    .sum();
                            }
                            let inner: f64 = (0..l).map(|j| p[i * l + j] * dp[i * l + j]).sum();
                            for j in 0..l {
                                dp[i * l + j] = p[i * l + j] * (dp[i * l + j] - inner) * scale;
                            }
                        }
                        for c in 0..dh {
                            for i in 0..l {
                                dqkv[q + c * l + i] += (0..l)
                                    .map(|j| dp[i * l + j] * qv.data[k + c * l + j])
                                    .sum::<f64>();
                            }
                            for j in 0..l {
                                dqkv[k + c * l + j] += (0..l)
                                    .map(|i| dp[i * l + j] * qv.data[q + c * l + i])
                                    .sum::<f64>();
                            }
                        }
                    }
                }
                self.accumulate(grads, *qkv, |acc| add_into(acc, &dqkv));
            }
            Op::L1Loss { pred, target } => {
                let pv = &val(*pred).data;
                let scale = g[0] / pv.len() as f64;
                self.accumulate(grads, *pred, |acc| {
                    for ((a, p), t) in acc.iter_mut().zip(pv).zip(target) {
                        let d = p - t;
                        *a += if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Sum(x) => self.accumulate(grads, *x, |acc| acc.iter_mut().for_each(|a| *a += g[0])),
            Op::Dot { x, weights } => self.accumulate(grads, *x, |acc| {
                for (a, w) in acc.iter_mut().zip(weights) {
                    *a += g[0] * w;
                }
            }),
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}
