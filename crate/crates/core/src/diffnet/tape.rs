//! Reverse-mode differentiation over a linear record of batched operations.
//!
//! Every value on the tape carries a leading batch dimension. Parameters are
//! registered by name; [`Tape::backward`] returns a gradient for every
//! registered parameter name (zeros when the loss does not depend on it) and
//! accumulates repeated registrations of the same name.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvGeom};
use super::layer::{
    leaky, sigmoid, softmax_in_place, softplus, BnMode, LayerKind, LayerParams, BN_EPS,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Batch statistics observed by a batchnorm layer running in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct StatUpdate {
    pub layer: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    Conv {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    ConvT {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    Linear {
        x: usize,
        w: usize,
        b: usize,
        batch: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: usize,
        slope: f64,
    },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Softmax(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Mean(usize),
    RowNorm(usize),
    Reshape(usize),
    ConcatRows(usize, usize),
    ConcatBatch(Vec<usize>),
    SelectBatch {
        x: usize,
        rows: Vec<usize>,
    },
    WeightedNll {
        p: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
    Mmd2 {
        a: usize,
        b: usize,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations with the cached values needed for
/// reverse accumulation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    stats: Vec<StatUpdate>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable does not belong to this tape");
        &self.nodes[v.idx].value
    }

    /// Batch statistics recorded by train-mode batchnorm layers, in execution order.
    pub fn stat_updates(&self) -> &[StatUpdate] {
        &self.stats
    }

    /// A value that receives gradients but is not a parameter (inputs, detached values).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, name: impl Into<String>, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Param(name.into()))
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let i = self.idx(v)?;
        let value = self.nodes[i].value.clone();
        Ok(self.constant(value))
    }

    fn layer_params(&mut self, layer: &LayerParams) -> (Var, Var) {
        let w = self.param(format!("{}.weight", layer.name), &layer.weight);
        let b = self.param(format!("{}.bias", layer.name), &layer.bias);
        (w, b)
    }

    /// Applies a conv1d, transposed conv1d, conv2d or fully-connected layer.
    pub fn layer(&mut self, x: Var, layer: &LayerParams) -> Result<Var> {
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        match layer.kind {
            LayerKind::Conv1d | LayerKind::Conv2d => {
                let geom = layer.conv_geom("conv", &shape)?;
                let (w, b) = self.layer_params(layer);
                let (oh, ow) = geom.conv_out();
                let y = kernels::conv_forward(
                    &geom,
                    self.nodes[xi].value.data(),
                    layer.weight.data(),
                    layer.bias.data(),
                );
                let value = Tensor::new(&[geom.batch, geom.out_ch, oh, ow], y)?;
                Ok(self.push(
                    value,
                    Op::Conv {
                        x: xi,
                        w: w.idx,
                        b: b.idx,
                        geom,
                    },
                ))
            }
            LayerKind::ConvTranspose1d => {
                let geom = layer.conv_geom("conv_transpose", &shape)?;
                let (w, b) = self.layer_params(layer);
                let (oh, ow) = geom.transpose_out();
                let y = kernels::conv_transpose_forward(
                    &geom,
                    self.nodes[xi].value.data(),
                    layer.weight.data(),
                    layer.bias.data(),
                );
                let value = Tensor::new(&[geom.batch, geom.out_ch, oh, ow], y)?;
                Ok(self.push(
                    value,
                    Op::ConvT {
                        x: xi,
                        w: w.idx,
                        b: b.idx,
                        geom,
                    },
                ))
            }
            LayerKind::FullyConnected => {
                let batch = shape[0];
                let per_item = self.nodes[xi].value.per_item();
                if per_item != layer.in_channels() {
                    return Err(Error::shape(
                        "fully_connected",
                        format!("{} inputs per item for {}", layer.in_channels(), layer.name),
                        format!("{shape:?}"),
                    ));
                }
                let (w, b) = self.layer_params(layer);
                let y = kernels::linear_forward(
                    batch,
                    self.nodes[xi].value.data(),
                    layer.weight.data(),
                    layer.bias.data(),
                );
                let value = Tensor::new(&[batch, 1, 1, layer.hyper.filters], y)?;
                Ok(self.push(
                    value,
                    Op::Linear {
                        x: xi,
                        w: w.idx,
                        b: b.idx,
                        batch,
                    },
                ))
            }
            LayerKind::BatchNorm => Err(Error::Usage(format!(
                "use Tape::batchnorm for batchnorm layer {}",
                layer.name
            ))),
        }
    }

    pub fn batchnorm(&mut self, x: Var, layer: &LayerParams, mode: BnMode) -> Result<Var> {
        if layer.kind != LayerKind::BatchNorm {
            return Err(Error::Usage(format!(
                "{} is not a batchnorm layer",
                layer.name
            )));
        }
        let xi = self.idx(x)?;
        let shape = self.nodes[xi].value.shape().to_vec();
        let channels = layer.hyper.filters;
        if shape.len() < 2 || shape[1] != channels {
            return Err(Error::shape(
                "batchnorm",
                format!("[batch, {channels}, ...] for {}", layer.name),
                format!("{shape:?}"),
            ));
        }
        let batch = shape[0];
        let (mean, var, batch_stats) = match mode {
            BnMode::Train | BnMode::Batch => {
                if batch < 2 {
                    return Err(Error::Usage(format!(
                        "batchnorm {} in train mode needs a batch of at least 2",
                        layer.name
                    )));
                }
                let (mean, var) =
                    kernels::channel_stats(batch, channels, self.nodes[xi].value.data());
                if mode == BnMode::Train {
                    self.stats.push(StatUpdate {
                        layer: layer.name.clone(),
                        mean: mean.clone(),
                        var: var.clone(),
                        count: self.nodes[xi].value.len() / channels,
                    });
                }
                (mean, var, true)
            }
            BnMode::Eval => {
                let rs = layer.running.as_ref().ok_or_else(|| {
                    Error::Config(format!("{} has no running statistics", layer.name))
                })?;
                (rs.mean.clone(), rs.var.clone(), false)
            }
        };
        let (gamma, beta) = self.layer_params(layer);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (y, xhat) = kernels::channel_normalize(
            batch,
            channels,
            self.nodes[xi].value.data(),
            &mean,
            &inv_std,
            layer.weight.data(),
            layer.bias.data(),
        );
        let value = Tensor::new(&shape, y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x: xi,
                gamma: gamma.idx,
                beta: beta.idx,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(f);
        Ok(self.push(value, op(xi)))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, |v| leaky(v, slope), |x| Op::LeakyRelu { x, slope })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    /// `ln(1 + e^x)`, used for numerically stable log-sigmoid terms.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, softplus, Op::Softplus)
    }

    /// Softmax over the elements of each batch item.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let mut value = self.nodes[xi].value.clone();
        let per = value.per_item();
        for chunk in value.data_mut().chunks_mut(per) {
            softmax_in_place(chunk);
        }
        Ok(self.push(value, Op::Softmax(xi)))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let mut value = self.nodes[ai].value.clone();
        value.add_assign(&self.nodes[bi].value);
        Ok(self.push(value, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("sub", ai, bi)?;
        let data = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[ai].value.shape(), data)?;
        Ok(self.push(value, Op::Sub(ai, bi)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| c * v, |x| Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        if v.is_empty() {
            return Err(Error::Usage("mean of an empty value".into()));
        }
        let m = v.sum() / v.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(xi)))
    }

    /// Euclidean norm of each batch item, shape `[batch]`.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let batch = v.shape()[0];
        let per = v.per_item();
        let norms: Vec<f64> = v
            .data()
            .chunks(per)
            .map(|c| c.iter().map(|a| a * a).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(&[batch], norms)?;
        Ok(self.push(value, Op::RowNorm(xi)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.reshape(shape)?;
        Ok(self.push(value, Op::Reshape(xi)))
    }

    /// Flattens each batch item into a `1 × 1 × n` row.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let shape = [v.shape()[0], 1, 1, v.per_item()];
        self.reshape(x, &shape)
    }

    /// Stacks two `[n, c, r, w]` values along the row axis into `[n, c, 2r, w]`:
    /// row block 0 holds `a`, row block 1 holds `b`, channel by channel.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("concat_rows", ai, bi)?;
        let value = concat_rows_value(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(value, Op::ConcatRows(ai, bi)))
    }

    /// Concatenates values along the batch axis.
    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_batch of nothing".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|p| self.idx(*p)).collect::<Result<_>>()?;
        let tail = self.nodes[idx[0]].value.shape()[1..].to_vec();
        let mut batch = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat_batch",
                    format!("[_, {tail:?}]"),
                    format!("{:?}", v.shape()),
                ));
            }
            batch += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::ConcatBatch(idx)))
    }

    /// Gathers batch items by index.
    pub fn select_batch(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = &self.nodes[xi].value;
        let batch = v.shape()[0];
        let per = v.per_item();
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            if r >= batch {
                return Err(Error::Usage(format!(
                    "batch index {r} out of range {batch}"
                )));
            }
            data.extend_from_slice(&v.data()[r * per..(r + 1) * per]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::SelectBatch {
                x: xi,
                rows: rows.to_vec(),
            },
        ))
    }

    /// `Σ_j w_j · (−ln p_j[t_j])` over probability rows `p`.
    pub fn weighted_nll(&mut self, p: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let pi = self.idx(p)?;
        let v = &self.nodes[pi].value;
        let batch = v.shape()[0];
        let classes = v.per_item();
        if targets.len() != batch || weights.len() != batch {
            return Err(Error::shape(
                "weighted_nll",
                format!("{batch} targets and weights"),
                format!("{} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let mut loss = 0.0;
        for (j, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if t >= classes {
                return Err(Error::Usage(format!(
                    "target class {t} out of range {classes}"
                )));
            }
            loss -= w * v.data()[j * classes + t].max(f64::MIN_POSITIVE).ln();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedNll {
                p: pi,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Biased squared maximum mean discrepancy between the item sets of `a`
    /// and `b` under a Gaussian kernel of bandwidth `sigma` (treated as constant).
    pub fn mmd2_rbf(&mut self, a: Var, b: Var, sigma: f64) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if va.per_item() != vb.per_item() {
            return Err(Error::shape(
                "mmd2_rbf",
                format!("{} features per item", va.per_item()),
                format!("{}", vb.per_item()),
            ));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!(
                "mmd bandwidth must be positive, got {sigma}"
            )));
        }
        let value = mmd2_value(va, vb, sigma)?;
        Ok(self.push(
            Tensor::scalar(value),
            Op::Mmd2 {
                a: ai,
                b: bi,
                sigma,
            },
        ))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[li] = Some(Tensor::full(self.nodes[li].value.shape(), 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match params.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        params.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_backward(
                    geom,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    gd,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::ConvT { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv_transpose_backward(
                    geom,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    gd,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::Linear { x, w, b, batch } => {
                let (dx, dw, db) = kernels::linear_backward(
                    *batch,
                    self.nodes[*x].value.data(),
                    self.nodes[*w].value.data(),
                    gd,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let shape = node.value.shape();
                let (batch, channels) = (shape[0], shape[1]);
                let spatial = node.value.len() / (batch * channels);
                let gam = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; channels];
                let mut dbeta = vec![0.0; channels];
                let mut sum_dxhat = vec![0.0; channels];
                let mut sum_dxhat_xhat = vec![0.0; channels];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * spatial;
                        for k in base..base + spatial {
                            dgamma[c] += gd[k] * xhat[k];
                            dbeta[c] += gd[k];
                            let dxh = gd[k] * gam[c];
                            sum_dxhat[c] += dxh;
                            sum_dxhat_xhat[c] += dxh * xhat[k];
                        }
                    }
                }
                let m = (batch * spatial) as f64;
                let mut dx = vec![0.0; node.value.len()];
                for n in 0..batch {
                    for c in 0..channels {
                        let base = (n * channels + c) * spatial;
                        for k in base..base + spatial {
                            let dxh = gd[k] * gam[c];
                            dx[k] = if *batch_stats {
                                inv_std[c] / m
                                    * (m * dxh - sum_dxhat[c] - xhat[k] * sum_dxhat_xhat[c])
                            } else {
                                dxh * inv_std[c]
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.nodes[*x].value.data();
                let dx = gd
                    .iter()
                    .zip(xv)
                    .map(|(d, v)| if *v >= 0.0 { *d } else { d * slope })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softplus(x) => {
                let xv = self.nodes[*x].value.data();
                let dx = gd.iter().zip(xv).map(|(d, v)| d * sigmoid(*v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let per = node.value.per_item();
                let mut dx = vec![0.0; y.len()];
                for ((dxc, yc), gc) in dx.chunks_mut(per).zip(y.chunks(per)).zip(gd.chunks(per)) {
                    let dot: f64 = yc.iter().zip(gc).map(|(a, b)| a * b).sum();
                    for k in 0..per {
                        dxc[k] = yc[k] * (gc[k] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|d| -d).collect());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gd.iter().map(|d| d * c).collect());
            }
            Op::Sum(x) => {
                let n = self.nodes[*x].value.len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.len();
                self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
            }
            Op::RowNorm(x) => {
                let xv = &self.nodes[*x].value;
                let per = xv.per_item();
                let norms = node.value.data();
                let mut dx = vec![0.0; xv.len()];
                for (n, (dxc, xc)) in dx.chunks_mut(per).zip(xv.data().chunks(per)).enumerate() {
                    if norms[n] > 0.0 {
                        for k in 0..per {
                            dxc[k] = gd[n] * xc[k] / norms[n];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, gd.to_vec());
            }
            Op::ConcatRows(a, b) => {
                let (da, db) = split_rows_data(self.nodes[*a].value.shape(), gd);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::ConcatBatch(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    self.accumulate(grads, p, gd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectBatch { x, rows } => {
                let xv = &self.nodes[*x].value;
                let per = xv.per_item();
                let mut dx = vec![0.0; xv.len()];
                for (j, &r) in rows.iter().enumerate() {
                    for k in 0..per {
                        dx[r * per + k] += gd[j * per + k];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WeightedNll {
                p,
                targets,
                weights,
            } => {
                let pv = &self.nodes[*p].value;
                let classes = pv.per_item();
                let mut dp = vec![0.0; pv.len()];
                for (j, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    let prob = pv.data()[j * classes + t].max(f64::MIN_POSITIVE);
                    dp[j * classes + t] = -gd[0] * w / prob;
                }
                self.accumulate(grads, *p, dp);
            }
            Op::Mmd2 { a, b, sigma } => {
                let (da, db) = mmd2_grad(&self.nodes[*a].value, &self.nodes[*b].value, *sigma);
                self.accumulate(grads, *a, da.into_iter().map(|v| v * gd[0]).collect());
                self.accumulate(grads, *b, db.into_iter().map(|v| v * gd[0]).collect());
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: usize, delta: Vec<f64>) {
        match &mut grads[target] {
            Some(t) => {
                for (a, d) in t.data_mut().iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => {
                let shape = self.nodes[target].value.shape();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }
}

pub(crate) fn concat_rows_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let s = a.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "concat_rows",
            "[batch, channels, rows, cols]",
            format!("{s:?}"),
        ));
    }
    let (n, c, r, w) = (s[0], s[1], s[2], s[3]);
    let block = r * w;
    let mut data = Vec::with_capacity(2 * a.len());
    for i in 0..n * c {
        data.extend_from_slice(&a.data()[i * block..(i + 1) * block]);
        data.extend_from_slice(&b.data()[i * block..(i + 1) * block]);
    }
    Tensor::new(&[n, c, 2 * r, w], data)
}

/// Inverse of [`concat_rows_value`] on raw data; `half` is the shape of each part.
pub(crate) fn split_rows_data(half: &[usize], data: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n, c, r, w) = (half[0], half[1], half[2], half[3]);
    let block = r * w;
    let mut a = Vec::with_capacity(n * c * block);
    let mut b = Vec::with_capacity(n * c * block);
    for i in 0..n * c {
        let base = 2 * i * block;
        a.extend_from_slice(&data[base..base + block]);
        b.extend_from_slice(&data[base + block..base + 2 * block]);
    }
    (a, b)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Orders the operands canonically so the value is exactly symmetric:
/// swapping them would otherwise change the summation order.
fn mmd2_value(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    let key = |t: &Tensor| (t.shape()[0], t.data().to_vec());
    let (ka, kb) = (key(a), key(b));
    let swap = ka.0 > kb.0
        || (ka.0 == kb.0
            && ka
                .1
                .iter()
                .zip(&kb.1)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                == Some(std::cmp::Ordering::Greater));
    if swap {
        mmd2_ordered(b, a, sigma)
    } else {
        mmd2_ordered(a, b, sigma)
    }
}

fn mmd2_ordered(a: &Tensor, b: &Tensor, sigma: f64) -> Result<f64> {
    let d = a.per_item();
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    if na == 0 || nb == 0 {
        return Err(Error::Usage("mmd2 needs non-empty sets".into()));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |x: &[f64], y: &[f64]| (-sq_dist(x, y) * gamma).exp();
    let mean_within = |t: &Tensor, n: usize| {
        let mut s = 0.0;
        for i in 0..n {
            let xi = &t.data()[i * d..(i + 1) * d];
            s += 1.0;
            for j in i + 1..n {
                s += 2.0 * k(xi, &t.data()[j * d..(j + 1) * d]);
            }
        }
        s / (n * n) as f64
    };
    let mut cross = 0.0;
    for i in 0..na {
        let xi = &a.data()[i * d..(i + 1) * d];
        for j in 0..nb {
            cross += k(xi, &b.data()[j * d..(j + 1) * d]);
        }
    }
    Ok(mean_within(a, na) + mean_within(b, nb) - 2.0 * cross / (na * nb) as f64)
}

fn mmd2_grad(a: &Tensor, b: &Tensor, sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let d = a.per_item();
    let (na, nb) = (a.shape()[0], b.shape()[0]);
    let s2 = sigma * sigma;
    let gamma = 1.0 / (2.0 * s2);
    let mut da = vec![0.0; a.len()];
    let mut db = vec![0.0; b.len()];
    let within = |t: &Tensor, n: usize, out: &mut [f64]| {
        let c = 2.0 / ((n * n) as f64 * s2);
        for i in 0..n {
            let xi = &t.data()[i * d..(i + 1) * d];
            for j in i + 1..n {
                let xj = &t.data()[j * d..(j + 1) * d];
                let kv = (-sq_dist(xi, xj) * gamma).exp();
                for q in 0..d {
                    let diff = xi[q] - xj[q];
                    out[i * d + q] -= c * kv * diff;
                    out[j * d + q] += c * kv * diff;
                }
            }
        }
    };
    within(a, na, &mut da);
    within(b, nb, &mut db);
    let c = 2.0 / ((na * nb) as f64 * s2);
    for i in 0..na {
        let xi = &a.data()[i * d..(i + 1) * d];
        for j in 0..nb {
            let yj = &b.data()[j * d..(j + 1) * d];
            let kv = (-sq_dist(xi, yj) * gamma).exp();
            for q in 0..d {
                let diff = xi[q] - yj[q];
                da[i * d + q] += c * kv * diff;
                db[j * d + q] -= c * kv * diff;
            }
        }
    }
    (da, db)
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient with respect to any recorded value (`None` when unreachable from the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.idx).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Gradients keyed by parameter name.
    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).unwrap().data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
        let y = tape.sigmoid(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn foreign_or_non_scalar_loss_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.constant(Tensor::scalar(1.0));
        let _ = b.constant(Tensor::scalar(1.0));
        assert!(matches!(b.backward(xa), Err(Error::Usage(_))));
        let v = a.constant(Tensor::zeros(&[2]));
        assert!(matches!(a.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn untouched_params_get_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param("unused", &Tensor::full(&[3], 2.0));
        let q = tape.param("used", &Tensor::full(&[1], 2.0));
        let s = tape.sum(q).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("unused").unwrap().data(), &[0.0; 3]);
        assert_eq!(g.param("used").unwrap().data(), &[1.0]);
        assert!(g.wrt(p).is_none());
    }

    #[test]
    fn repeated_param_registrations_accumulate() {
        let mut tape = Tape::new();
        let p1 = tape.param("w", &Tensor::full(&[1], 3.0));
        let p2 = tape.param("w", &Tensor::full(&[1], 3.0));
        let s = tape.add(p1, p2).unwrap();
        let s = tape.sum(s).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn concat_rows_then_split_round_trips() {
        let a = Tensor::new(&[2, 3, 1, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::new(&[2, 3, 1, 4], (100..124).map(|v| v as f64).collect()).unwrap();
        let f = concat_rows_value(&a, &b).unwrap();
        assert_eq!(f.shape(), &[2, 3, 2, 4]);
        let (ra, rb) = split_rows_data(a.shape(), f.data());
        assert_eq!(ra, a.data());
        assert_eq!(rb, b.data());
    }
}
