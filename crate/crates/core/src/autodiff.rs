//! Reverse-mode differentiation over a recorded forward pass.
//!
//! A [`Graph`] is a tape of 64-bit nodes. Each op evaluates eagerly, stores
//! what its backward rule needs, and returns a [`NodeId`]. [`Graph::backward`]
//! walks the tape in reverse and returns gradients for every parameter and
//! every leaf created with [`Graph::input_with_grad`].

use std::collections::BTreeMap;

use crate::ops::{self, Activation, BatchStats, BnParams, ConvGeometry};
use crate::tensor::{Result, Shape, Tensor, TensorError};

pub type NodeId = usize;

/// Identifies a trainable tensor across graphs.
pub type ParamId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        /// Batch statistics were used, so the mean and variance depend on x.
        batch: bool,
    },
    Act {
        x: NodeId,
        kind: Activation,
    },
    Mse {
        a: NodeId,
        b: NodeId,
    },
    Bce {
        logits: NodeId,
        targets: Vec<f64>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    SlicePrefix {
        src: NodeId,
        n: usize,
        c: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_ran: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    params: BTreeMap<ParamId, Vec<f64>>,
    leaves: BTreeMap<NodeId, Vec<f64>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn leaf(&self, id: NodeId) -> Option<&[f64]> {
        self.leaves.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.params {
            match self.params.get_mut(id) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                None => {
                    self.params.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data()[0]
    }

    fn push(&mut self, value: Tensor<f64>, op: Op, requires_grad: bool) -> NodeId {
        self.backward_ran = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A constant leaf: no gradient flows into it.
    pub fn input(&mut self, t: Tensor<f64>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<f64>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId, t: &Tensor<f64>) -> NodeId {
        let mut v = t.clone();
        v.zero_grad();
        self.push(v, Op::Param(id), true)
    }

    pub fn slice_prefix(&mut self, src: NodeId, n: usize, c: usize) -> Result<NodeId> {
        let s = self.nodes[src].value.shape();
        if n == s.n && c == s.c {
            return Ok(src);
        }
        let v = self.nodes[src].value.slice_prefix(n, c)?;
        let rg = self.rg(&[src]);
        Ok(self.push(v, Op::SlicePrefix { src, n, c }, rg))
    }

    /// `b` is a `(1, C, 1, 1)` bias vector.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let v = ops::conv2d(&self.nodes[x].value, &self.nodes[w].value, self.nodes[b].value.data(), geom)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(v, Op::Conv { x, w, b, geom }, rg))
    }

    /// Batch norm normalized by the batch's own statistics, which are returned
    /// for the caller to fold into its running estimates.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchStats)> {
        let c = self.nodes[x].value.shape().c;
        let unit = vec![1.0; c];
        let zero = vec![0.0; c];
        let p = BnParams {
            gamma: self.nodes[gamma].value.data(),
            beta: self.nodes[beta].value.data(),
            running_mean: &zero,
            running_var: &unit,
            eps,
        };
        let (y, stats) = ops::batch_norm_train(&self.nodes[x].value, &p)?;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = standardize(&self.nodes[x].value, &stats.mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        let id = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: true,
            },
            rg,
        );
        Ok((id, stats))
    }

    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        let p = BnParams {
            gamma: self.nodes[gamma].value.data(),
            beta: self.nodes[beta].value.data(),
            running_mean,
            running_var,
            eps,
        };
        let y = ops::batch_norm_infer(&self.nodes[x].value, &p)?;
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xhat = standardize(&self.nodes[x].value, running_mean, &inv_std);
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch: false,
            },
            rg,
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        let v = ops::activation(&self.nodes[x].value, kind);
        v.check_finite("activation")?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Act { x, kind }, rg))
    }

    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::mse(&self.nodes[a].value, &self.nodes[b].value)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse { a, b }, rg))
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &Tensor<f64>) -> Result<NodeId> {
        let v = ops::bce_with_logits(&self.nodes[logits].value, targets)?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_with_logits" });
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut v = 0.0;
        for &(id, w) in terms {
            let t = &self.nodes[id].value;
            if t.numel() != 1 {
                return Err(TensorError::NotScalar(id));
            }
            v += w * t.data()[0];
        }
        if !v.is_finite() {
            return Err(TensorError::NonFinite { op: "weighted_sum" });
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec()), rg))
    }

    /// Reverse-mode pass from a scalar `loss`.
    ///
    /// Running it a second time without recording a new op is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_ran {
            return Err(TensorError::BackwardTwice);
        }
        if self.nodes[loss].value.numel() != 1 {
            return Err(TensorError::NotScalar(loss));
        }
        self.backward_ran = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if !g.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(id, g);
                }
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.params.insert(*pid, g);
                    }
                },
                Op::SlicePrefix { src, n, c } => {
                    let full = self.nodes[*src].value.shape();
                    let plane = full.plane();
                    let mut gs = vec![0.0; full.numel()];
                    for i in 0..*n {
                        let dst = i * full.c * plane;
                        let srcoff = i * c * plane;
                        gs[dst..dst + c * plane].copy_from_slice(&g[srcoff..srcoff + c * plane]);
                    }
                    add_into(&mut grads, *src, gs);
                }
                Op::Conv { x, w, b, geom } => {
                    let gy = Tensor::new(node.value.shape(), g)?;
                    let need_x = self.nodes[*x].requires_grad;
                    let cg = ops::conv2d_backward(&self.nodes[*x].value, &self.nodes[*w].value, &gy, *geom, need_x)?;
                    if let Some(gx) = cg.x {
                        add_into(&mut grads, *x, gx.into_data());
                    }
                    add_into(&mut grads, *w, cg.w.into_data());
                    add_into(&mut grads, *b, cg.bias);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch,
                } => {
                    let s = node.value.shape();
                    let (gx, gg, gb) = bn_backward(s, &g, xhat, inv_std, self.nodes[*gamma].value.data(), *batch);
                    if self.nodes[*x].requires_grad {
                        add_into(&mut grads, *x, gx);
                    }
                    add_into(&mut grads, *gamma, gg);
                    add_into(&mut grads, *beta, gb);
                }
                Op::Act { x, kind } => {
                    let xin = self.nodes[*x].value.data();
                    let y = node.value.data();
                    let gx: Vec<f64> = match kind {
                        Activation::Relu => g.iter().zip(xin).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                        Activation::Sigmoid => g.iter().zip(y).map(|(g, &s)| g * s * (1.0 - s)).collect(),
                    };
                    add_into(&mut grads, *x, gx);
                }
                Op::Mse { a, b } => {
                    let av = self.nodes[*a].value.data();
                    let bv = self.nodes[*b].value.data();
                    let scale = 2.0 * g[0] / av.len() as f64;
                    let ga: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                    if self.nodes[*b].requires_grad {
                        add_into(&mut grads, *b, ga.iter().map(|v| -v).collect());
                    }
                    if self.nodes[*a].requires_grad {
                        add_into(&mut grads, *a, ga);
                    }
                }
                Op::Bce { logits, targets } => {
                    let z = self.nodes[*logits].value.data();
                    let scale = g[0] / z.len() as f64;
                    let gz = z.iter().zip(targets).map(|(&z, &t)| scale * (ops::sigmoid(z) - t)).collect();
                    add_into(&mut grads, *logits, gz);
                }
                Op::WeightedSum(terms) => {
                    for &(t, w) in terms {
                        add_into(&mut grads, t, vec![w * g[0]]);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn standardize(x: &Tensor<f64>, mean: &[f64], inv_std: &[f64]) -> Vec<f64> {
    let s = x.shape();
    let plane = s.plane();
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let c = i % s.c;
        chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) * inv_std[c]);
    }
    out
}

fn bn_backward(s: Shape, g: &[f64], xhat: &[f64], inv_std: &[f64], gamma: &[f64], batch: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane = s.plane();
    let m = (s.n * plane) as f64;
    let mut sum_g = vec![0.0; s.c];
    let mut sum_gx = vec![0.0; s.c];
    for (i, (gc, xc)) in g.chunks(plane).zip(xhat.chunks(plane)).enumerate() {
        let c = i % s.c;
        for (gv, xv) in gc.iter().zip(xc) {
            sum_g[c] += gv;
            sum_gx[c] += gv * xv;
        }
    }
    let mut gx = vec![0.0; g.len()];
    for (i, ((dst, gc), xc)) in gx.chunks_mut(plane).zip(g.chunks(plane)).zip(xhat.chunks(plane)).enumerate() {
        let c = i % s.c;
        let k = gamma[c] * inv_std[c];
        if batch {
            let k = k / m;
            for ((d, gv), xv) in dst.iter_mut().zip(gc).zip(xc) {
                *d = k * (m * gv - sum_g[c] - xv * sum_gx[c]);
            }
        } else {
            for (d, gv) in dst.iter_mut().zip(gc) {
                *d = k * gv;
            }
        }
    }
    (gx, sum_gx, sum_g)
}
