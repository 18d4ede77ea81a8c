use super::kernels::{self, Conv3dGeometry};
use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside the square root of instance statistics.
pub const INSTANCE_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
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
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv3dGeometry,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    InstanceStd {
        x: Var,
        mu: Vec<f64>,
    },
    AdaIn {
        x: Var,
        scale: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_sigma: Vec<f64>,
    },
    Mae {
        pred: Var,
        target: Var,
    },
    ScaleShift {
        x: Var,
        scale: f64,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of executed ops.
///
/// Nodes are stored in execution order, which is a topological order, so
/// backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; no gradient is produced for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if bv.ndim() != 1 {
            return Err(Error::Shape(format!(
                "conv3d bias must be 1-D, got {:?}",
                bv.shape()
            )));
        }
        let geom = Conv3dGeometry::new(xv.shape(), wv.shape(), bv.len(), stride, padding)?;
        let out = kernels::conv3d_forward(&geom, xv.data(), wv.data(), bv.data());
        let value = Tensor::new(geom.output_shape(), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Conv3d { x, w, b, geom }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let ok = xv.ndim() == 2
            && wv.ndim() == 2
            && bv.ndim() == 1
            && xv.shape()[1] == wv.shape()[1]
            && bv.len() == wv.shape()[0];
        if !ok {
            return Err(Error::Shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?} do not agree",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (n, fin) = (xv.shape()[0], xv.shape()[1]);
        let fout = wv.shape()[0];
        let mut out = Vec::with_capacity(n * fout);
        for row in xv.data().chunks_exact(fin) {
            for (o, wrow) in wv.data().chunks_exact(fin).enumerate() {
                let dot: f64 = row.iter().zip(wrow).map(|(a, b)| a * b).sum();
                out.push(dot + bv.data()[o]);
            }
        }
        let value = Tensor::new(vec![n, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.shape(), |i| xv.data()[i].max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.shape(), |i| {
            let v = xv.data()[i];
            if v > 0.0 {
                v
            } else {
                slope * v
            }
        });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    /// Non-overlapping cubic max pooling; every spatial extent must be a
    /// multiple of `window`.
    pub fn maxpool3d(&mut self, x: Var, window: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 5 {
            return Err(Error::Shape(format!(
                "maxpool3d input must be [N,C,D,H,W], got {:?}",
                xv.shape()
            )));
        }
        if window == 0 || xv.shape()[2..].iter().any(|&e| e % window != 0) {
            return Err(Error::Config(format!(
                "maxpool3d window {window} does not divide spatial extents {:?}",
                &xv.shape()[2..]
            )));
        }
        let (shape, vals, argmax) = kernels::maxpool3d_forward(xv.shape(), xv.data(), window);
        let value = Tensor::new(shape, vals)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool3d { x, argmax }, rg))
    }

    /// Spatial mean per (sample, channel): `[N,C,...] -> [N,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 3 {
            return Err(Error::Shape(format!(
                "global_avg_pool needs [N,C,spatial..], got {:?}",
                xv.shape()
            )));
        }
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let vol: usize = xv.shape()[2..].iter().product();
        let means = xv
            .data()
            .chunks_exact(vol)
            .map(|p| p.iter().sum::<f64>() / vol as f64)
            .collect();
        let value = Tensor::new(vec![n, c], means)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool { x }, rg))
    }

    /// `[N, ...] -> [N, F]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.shape()[0];
        let f = xv.len() / n;
        let value = xv.clone().reshape(&[n, f])?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let compatible = av.ndim() == bv.ndim()
            && axis < av.ndim()
            && av
                .shape()
                .iter()
                .zip(bv.shape())
                .enumerate()
                .all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(Error::Shape(format!(
                "concat on axis {axis}: {:?} and {:?} do not agree",
                av.shape(),
                bv.shape()
            )));
        }
        let (outer, inner) = outer_inner(av.shape(), axis);
        let (la, lb) = (av.shape()[axis] * inner, bv.shape()[axis] * inner);
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * la..(o + 1) * la]);
            data.extend_from_slice(&bv.data()[o * lb..(o + 1) * lb]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] += bv.shape()[axis];
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, axis }, rg))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() || len == 0 || start + len > xv.shape()[axis] {
            return Err(Error::Shape(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                xv.shape()
            )));
        }
        let (outer, inner) = outer_inner(xv.shape(), axis);
        let full = xv.shape()[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Per-(sample, channel) spatial mean and `sqrt(population variance + eps)`.
    pub fn instance_stats(&mut self, x: Var) -> Result<(Var, Var)> {
        let mu = self.global_avg_pool(x)?;
        let xv = self.value(x);
        let vol: usize = xv.shape()[2..].iter().product();
        let mus = self.value(mu).data().to_vec();
        let sigmas: Vec<f64> = xv
            .data()
            .chunks_exact(vol)
            .zip(&mus)
            .map(|(p, m)| {
                let var = p.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vol as f64;
                (var + INSTANCE_EPS).sqrt()
            })
            .collect();
        let value = Tensor::new(self.shape(mu).to_vec(), sigmas)?;
        let rg = self.rg(&[x]);
        let sigma = self.push(value, Op::InstanceStd { x, mu: mus }, rg);
        Ok((mu, sigma))
    }

    /// Adaptive instance normalization: `scale * (x - mu) / sigma + bias`
    /// with per-sample, per-channel `scale` and `bias` of shape `[N, C]`.
    pub fn adain(&mut self, x: Var, scale: Var, bias: Var) -> Result<Var> {
        let (xv, sv, bv) = (self.value(x), self.value(scale), self.value(bias));
        if xv.ndim() < 3 {
            return Err(Error::Shape(format!(
                "adain input needs [N,C,spatial..], got {:?}",
                xv.shape()
            )));
        }
        let nc = &xv.shape()[..2];
        if sv.shape() != nc || bv.shape() != nc {
            return Err(Error::Shape(format!(
                "adain: feature map {:?} needs scale/bias of shape {nc:?}, got {:?} and {:?}",
                xv.shape(),
                sv.shape(),
                bv.shape()
            )));
        }
        let vol: usize = xv.shape()[2..].iter().product();
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        let mut inv_sigma = Vec::with_capacity(sv.len());
        for (i, plane) in xv.data().chunks_exact(vol).enumerate() {
            let mu = plane.iter().sum::<f64>() / vol as f64;
            let var = plane.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vol as f64;
            let inv = 1.0 / (var + INSTANCE_EPS).sqrt();
            let (s, b) = (sv.data()[i], bv.data()[i]);
            for v in plane {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(s * h + b);
            }
            inv_sigma.push(inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, scale, bias]);
        Ok(self.push(
            value,
            Op::AdaIn {
                x,
                scale,
                bias,
                xhat,
                inv_sigma,
            },
            rg,
        ))
    }

    /// Mean absolute error; the subgradient at zero residual is zero.
    pub fn mae(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        if pv.shape() != tv.shape() {
            return Err(Error::Shape(format!(
                "mae: prediction {:?} vs target {:?}",
                pv.shape(),
                tv.shape()
            )));
        }
        let sum: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| (p - t).abs())
            .sum();
        let value = Tensor::scalar(sum / pv.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(value, Op::Mae { pred, target }, rg))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_fn(xv.shape(), |i| scale * xv.data()[i] + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::ScaleShift { x, scale }, rg)
    }

    /// `sum(x * weights)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum: {:?} vs weights {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                if self.wants(*x) {
                    let gx = kernels::conv3d_backward_input(geom, gd, self.value(*w).data());
                    let t = Tensor::new(self.shape(*x).to_vec(), gx)?;
                    self.accumulate(grads, *x, t);
                }
                if self.wants(*w) || self.wants(*b) {
                    let (gw, gb) = kernels::conv3d_backward_params(geom, gd, self.value(*x).data());
                    let tw = Tensor::new(self.shape(*w).to_vec(), gw)?;
                    let tb = Tensor::new(self.shape(*b).to_vec(), gb)?;
                    self.accumulate(grads, *w, tw);
                    self.accumulate(grads, *b, tb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin) = (xv.shape()[0], xv.shape()[1]);
                let fout = wv.shape()[0];
                if self.wants(*x) {
                    let mut gx = vec![0.0; n * fin];
                    for (i, grow) in gd.chunks_exact(fout).enumerate() {
                        let gxrow = &mut gx[i * fin..(i + 1) * fin];
                        for (go, wrow) in grow.iter().zip(wv.data().chunks_exact(fin)) {
                            for (a, wi) in gxrow.iter_mut().zip(wrow) {
                                *a += go * wi;
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![n, fin], gx)?);
                }
                if self.wants(*w) {
                    let mut gw = vec![0.0; fout * fin];
                    for (grow, xrow) in gd.chunks_exact(fout).zip(xv.data().chunks_exact(fin)) {
                        for (go, gwrow) in grow.iter().zip(gw.chunks_exact_mut(fin)) {
                            for (a, xi) in gwrow.iter_mut().zip(xrow) {
                                *a += go * xi;
                            }
                        }
                    }
                    self.accumulate(grads, *w, Tensor::new(vec![fout, fin], gw)?);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; fout];
                    for grow in gd.chunks_exact(fout) {
                        for (a, go) in gb.iter_mut().zip(grow) {
                            *a += go;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(vec![fout], gb)?);
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let t = Tensor::from_fn(xv.shape(), |i| if xv.data()[i] > 0.0 { gd[i] } else { 0.0 });
                self.accumulate(grads, *x, t);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let t = Tensor::from_fn(xv.shape(), |i| {
                    if xv.data()[i] > 0.0 {
                        gd[i]
                    } else {
                        slope * gd[i]
                    }
                });
                self.accumulate(grads, *x, t);
            }
            Op::MaxPool3d { x, argmax } => {
                let mut t = Tensor::zeros(self.shape(*x));
                let td = t.data_mut();
                for (go, &src) in gd.iter().zip(argmax) {
                    td[src] += go;
                }
                self.accumulate(grads, *x, t);
            }
            Op::GlobalAvgPool { x } => {
                let xv = self.value(*x);
                let vol = xv.len() / gd.len();
                let scale = 1.0 / vol as f64;
                let t = Tensor::from_fn(xv.shape(), |i| gd[i / vol] * scale);
                self.accumulate(grads, *x, t);
            }
            Op::Reshape { x } => {
                let t = g.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, t);
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (outer, inner) = outer_inner(&sa, *axis);
                let (la, lb) = (sa[*axis] * inner, sb[*axis] * inner);
                let mut ga = Vec::with_capacity(outer * la);
                let mut gb = Vec::with_capacity(outer * lb);
                for chunk in gd.chunks_exact(la + lb) {
                    ga.extend_from_slice(&chunk[..la]);
                    gb.extend_from_slice(&chunk[la..]);
                }
                if self.wants(*a) {
                    self.accumulate(grads, *a, Tensor::new(sa, ga)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, Tensor::new(sb, gb)?);
                }
            }
            Op::Narrow { x, axis, start } => {
                let sx = self.shape(*x).to_vec();
                let (_, inner) = outer_inner(&sx, *axis);
                let full = sx[*axis] * inner;
                let part = node.value.shape()[*axis] * inner;
                let mut t = Tensor::zeros(&sx);
                let td = t.data_mut();
                for (o, chunk) in gd.chunks_exact(part).enumerate() {
                    let base = o * full + start * inner;
                    td[base..base + part].copy_from_slice(chunk);
                }
                self.accumulate(grads, *x, t);
            }
            Op::InstanceStd { x, mu } => {
                let xv = self.value(*x);
                let vol = xv.len() / mu.len();
                let sig = node.value.data();
                let t = Tensor::from_fn(xv.shape(), |i| {
                    let p = i / vol;
                    gd[p] * (xv.data()[i] - mu[p]) / (vol as f64 * sig[p])
                });
                self.accumulate(grads, *x, t);
            }
            Op::AdaIn {
                x,
                scale,
                bias,
                xhat,
                inv_sigma,
            } => {
                let vol = xhat.len() / inv_sigma.len();
                let sv = self.value(*scale).data();
                let mut gs = Vec::with_capacity(inv_sigma.len());
                let mut gb = Vec::with_capacity(inv_sigma.len());
                let mut gx = if self.wants(*x) {
                    Vec::with_capacity(xhat.len())
                } else {
                    Vec::new()
                };
                for (p, (gp, hp)) in gd.chunks_exact(vol).zip(xhat.chunks_exact(vol)).enumerate() {
                    let sum_g: f64 = gp.iter().sum();
                    let sum_gh: f64 = gp.iter().zip(hp).map(|(a, b)| a * b).sum();
                    gs.push(sum_gh);
                    gb.push(sum_g);
                    if self.wants(*x) {
                        let k = sv[p] * inv_sigma[p];
                        let (mg, mgh) = (sum_g / vol as f64, sum_gh / vol as f64);
                        gx.extend(gp.iter().zip(hp).map(|(gi, hi)| k * (gi - mg - hi * mgh)));
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                }
                if self.wants(*scale) {
                    self.accumulate(grads, *scale, Tensor::new(self.shape(*scale).to_vec(), gs)?);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, Tensor::new(self.shape(*bias).to_vec(), gb)?);
                }
            }
            Op::Mae { pred, target } => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let k = gd[0] / pv.len() as f64;
                let sign = |i: usize| {
                    let r = pv.data()[i] - tv.data()[i];
                    if r > 0.0 {
                        k
                    } else if r < 0.0 {
                        -k
                    } else {
                        0.0
                    }
                };
                if self.wants(*pred) {
                    self.accumulate(grads, *pred, Tensor::from_fn(pv.shape(), sign));
                }
                if self.wants(*target) {
                    self.accumulate(grads, *target, Tensor::from_fn(tv.shape(), |i| -sign(i)));
                }
            }
            Op::ScaleShift { x, scale } => {
                let t = Tensor::from_fn(g.shape(), |i| scale * gd[i]);
                self.accumulate(grads, *x, t);
            }
            Op::WeightedSum { x, weights } => {
                let t = Tensor::from_fn(self.shape(*x), |i| gd[0] * weights[i]);
                self.accumulate(grads, *x, t);
            }
        }
        Ok(())
    }

    /// Smallest distance of any recorded non-differentiable point from its
    /// kink: relu/leaky-relu preactivations, mae residuals and the gap
    /// between the two largest entries of each maxpool window.
    pub fn min_kink_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::LeakyRelu { x, .. } => {
                    for v in self.value(*x).data() {
                        best = best.min(v.abs());
                    }
                }
                Op::Mae { pred, target } => {
                    for (p, t) in self.value(*pred).data().iter().zip(self.value(*target).data()) {
                        best = best.min((p - t).abs());
                    }
                }
                Op::MaxPool3d { x, argmax } => {
                    best = best.min(self.maxpool_margin(*x, &node.value, argmax));
                }
                _ => {}
            }
        }
        best
    }

    fn maxpool_margin(&self, x: Var, out: &Tensor, argmax: &[usize]) -> f64 {
        let xs = self.shape(x);
        let [h, w] = [xs[3], xs[4]];
        let window = xs[2] / out.shape()[2];
        let mut best = f64::INFINITY;
        for (&src, &top) in argmax.iter().zip(out.data()) {
            // recover the window origin from the winning index
            let plane = src / (xs[2] * h * w);
            let rem = src % (xs[2] * h * w);
            let (z, y, xo) = (rem / (h * w), (rem / w) % h, rem % w);
            let (z0, y0, x0) = (z - z % window, y - y % window, xo - xo % window);
            let base = plane * xs[2] * h * w;
            for dz in 0..window {
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = base + ((z0 + dz) * h + y0 + dy) * w + x0 + dx;
                        if idx != src {
                            best = best.min(top - self.value(x).data()[idx]);
                        }
                    }
                }
            }
        }
        best
    }

    /// Discrete state of every kink-bearing op: relu signs, mae residual
    /// signs and maxpool winners. Finite differences are only meaningful
    /// between evaluations whose patterns agree.
    pub fn activation_pattern(&self) -> Vec<u64> {
        let mut pat = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } | Op::LeakyRelu { x, .. } => {
                    pat.extend(self.value(*x).data().iter().map(|v| (*v > 0.0) as u64));
                }
                Op::Mae { pred, target } => {
                    pat.extend(
                        self.value(*pred)
                            .data()
                            .iter()
                            .zip(self.value(*target).data())
                            .map(|(p, t)| (p > t) as u64),
                    );
                }
                Op::MaxPool3d { argmax, .. } => pat.extend(argmax.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        pat
    }
}
