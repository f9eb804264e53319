//! Layer parameters and the single-sample forward API.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerKind {
    Conv1d,
    ConvTranspose1d,
    Conv2d,
    FullyConnected,
    BatchNorm,
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Conv1d => 1,
            LayerKind::ConvTranspose1d => 2,
            LayerKind::Conv2d => 3,
            LayerKind::FullyConnected => 4,
            LayerKind::BatchNorm => 5,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            1 => LayerKind::Conv1d,
            2 => LayerKind::ConvTranspose1d,
            3 => LayerKind::Conv2d,
            4 => LayerKind::FullyConnected,
            5 => LayerKind::BatchNorm,
            _ => return None,
        })
    }
}

/// Filters / kernel size / stride, as listed per layer in the architecture tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running statistics.
    Train,
    /// Normalize with batch statistics, leave running statistics untouched.
    Batch,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softmax,
}

/// Trainable parameters of one layer plus its hyper-parameters.
///
/// Weight layouts: conv1d `[filters, in, k]`, transposed conv1d
/// `[in, filters, k]`, conv2d `[filters, in, kr, kc]`, fully connected
/// `[out, in]`, batchnorm `gamma` in `weight` and `beta` in `bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub kind: LayerKind,
    pub hyper: Hyper,
    pub weight: Tensor,
    pub bias: Tensor,
    pub running: Option<RunningStats>,
}

impl LayerParams {
    pub fn conv1d(
        name: impl Into<String>,
        in_ch: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        LayerParams {
            name: name.into(),
            kind: LayerKind::Conv1d,
            hyper: Hyper {
                filters,
                kernel: (1, kernel),
                stride: (1, stride),
            },
            weight: Tensor::zeros(&[filters, in_ch, kernel]),
            bias: Tensor::zeros(&[filters]),
            running: None,
        }
    }

    pub fn conv_transpose1d(
        name: impl Into<String>,
        in_ch: usize,
        filters: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        LayerParams {
            name: name.into(),
            kind: LayerKind::ConvTranspose1d,
            hyper: Hyper {
                filters,
                kernel: (1, kernel),
                stride: (1, stride),
            },
            weight: Tensor::zeros(&[in_ch, filters, kernel]),
            bias: Tensor::zeros(&[filters]),
            running: None,
        }
    }

    pub fn conv2d(
        name: impl Into<String>,
        in_ch: usize,
        filters: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Self {
        LayerParams {
            name: name.into(),
            kind: LayerKind::Conv2d,
            hyper: Hyper {
                filters,
                kernel,
                stride,
            },
            weight: Tensor::zeros(&[filters, in_ch, kernel.0, kernel.1]),
            bias: Tensor::zeros(&[filters]),
            running: None,
        }
    }

    pub fn fully_connected(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        LayerParams {
            name: name.into(),
            kind: LayerKind::FullyConnected,
            hyper: Hyper {
                filters: outputs,
                kernel: (1, inputs),
                stride: (1, 1),
            },
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
            running: None,
        }
    }

    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        LayerParams {
            name: name.into(),
            kind: LayerKind::BatchNorm,
            hyper: Hyper {
                filters: channels,
                kernel: (1, 1),
                stride: (1, 1),
            },
            weight: Tensor::full(&[channels], 1.0),
            bias: Tensor::zeros(&[channels]),
            running: Some(RunningStats {
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            }),
        }
    }

    /// Input channel count implied by the weight shape.
    pub fn in_channels(&self) -> usize {
        let s = self.weight.shape();
        match self.kind {
            LayerKind::Conv1d | LayerKind::Conv2d => s[1],
            LayerKind::ConvTranspose1d => s[0],
            LayerKind::FullyConnected => s[1],
            LayerKind::BatchNorm => s[0],
        }
    }

    /// Uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    /// Draws are rounded to `f32` so a fresh layer is already checkpoint-exact.
    /// Batchnorm layers reset to `gamma = 1`, `beta = 0`.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let (k_rows, k_cols) = self.hyper.kernel;
        let fan_in = match self.kind {
            LayerKind::BatchNorm => {
                self.weight.data_mut().fill(1.0);
                self.bias.data_mut().fill(0.0);
                return;
            }
            LayerKind::FullyConnected => self.in_channels(),
            _ => self.in_channels() * k_rows * k_cols,
        };
        let bound = (6.0 / fan_in as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = f64::from(rng.gen_range(-bound..bound) as f32);
        }
        self.bias.data_mut().fill(0.0);
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hyper;
        let ws = self.weight.shape();
        let expected: Vec<usize> = match self.kind {
            LayerKind::Conv1d => vec![h.filters, self.in_channels(), h.kernel.1],
            LayerKind::ConvTranspose1d => vec![self.in_channels(), h.filters, h.kernel.1],
            LayerKind::Conv2d => vec![h.filters, self.in_channels(), h.kernel.0, h.kernel.1],
            LayerKind::FullyConnected => vec![h.filters, h.kernel.1],
            LayerKind::BatchNorm => vec![h.filters],
        };
        if ws != expected.as_slice() {
            return Err(Error::shape(
                "layer weights",
                format!("{expected:?} for {}", self.name),
                format!("{ws:?}"),
            ));
        }
        if self.bias.shape() != [h.filters] {
            return Err(Error::shape(
                "layer bias",
                format!("[{}] for {}", h.filters, self.name),
                format!("{:?}", self.bias.shape()),
            ));
        }
        if h.stride.0 == 0 || h.stride.1 == 0 || h.kernel.0 == 0 || h.kernel.1 == 0 {
            return Err(Error::Config(format!(
                "{}: zero kernel or stride",
                self.name
            )));
        }
        if let Some(rs) = &self.running {
            if rs.mean.len() != h.filters || rs.var.len() != h.filters {
                return Err(Error::shape(
                    "running stats",
                    format!("{} channels", h.filters),
                    format!("{}/{}", rs.mean.len(), rs.var.len()),
                ));
            }
            if rs.var.iter().any(|v| *v < 0.0) {
                return Err(Error::Config(format!(
                    "{}: negative running variance",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Geometry for a convolution-type layer applied to a batched `[n, c, r, w]` input.
    pub(crate) fn conv_geom(&self, op: &'static str, input: &[usize]) -> Result<ConvGeom> {
        if input.len() != 4 {
            return Err(Error::shape(
                op,
                "[batch, channels, rows, cols]",
                format!("{input:?}"),
            ));
        }
        let (k_rows, k_cols) = self.hyper.kernel;
        let (s_rows, s_cols) = self.hyper.stride;
        let g = ConvGeom {
            batch: input[0],
            in_ch: input[1],
            out_ch: self.hyper.filters,
            in_rows: input[2],
            in_cols: input[3],
            k_rows,
            k_cols,
            s_rows,
            s_cols,
        };
        if g.in_ch != self.in_channels() {
            return Err(Error::shape(
                op,
                format!(
                    "{} input channels for {} (weights {:?})",
                    self.in_channels(),
                    self.name,
                    self.weight.shape()
                ),
                format!("input {input:?}"),
            ));
        }
        let needs_kernel = !matches!(self.kind, LayerKind::ConvTranspose1d);
        if needs_kernel && (g.in_rows < k_rows || g.in_cols < k_cols) {
            return Err(Error::shape(
                op,
                format!("spatial size at least {k_rows}x{k_cols} for {}", self.name),
                format!("input {input:?}"),
            ));
        }
        Ok(g)
    }

    fn expect_kind(&self, kind: LayerKind, op: &'static str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!(
                "{op} called with {:?} layer {}",
                self.kind, self.name
            )));
        }
        Ok(())
    }
}

fn batched(input: &Tensor) -> Result<Vec<usize>> {
    match input.shape() {
        [c, r, w] => Ok(vec![1, *c, *r, *w]),
        s => Err(Error::shape(
            "layer input",
            "[channels, rows, cols]",
            format!("{s:?}"),
        )),
    }
}

/// 1-D convolution along the columns of a `channels × rows × cols` tensor.
pub fn conv1d(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.expect_kind(LayerKind::Conv1d, "conv1d")?;
    conv_like(input, params, "conv1d")
}

pub fn conv2d(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.expect_kind(LayerKind::Conv2d, "conv2d")?;
    conv_like(input, params, "conv2d")
}

fn conv_like(input: &Tensor, params: &LayerParams, op: &'static str) -> Result<Tensor> {
    let g = params.conv_geom(op, &batched(input)?)?;
    let (oh, ow) = g.conv_out();
    let y = kernels::conv_forward(&g, input.data(), params.weight.data(), params.bias.data());
    Tensor::chw(g.out_ch, oh, ow, y)
}

pub fn conv_transpose1d(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.expect_kind(LayerKind::ConvTranspose1d, "conv_transpose1d")?;
    let g = params.conv_geom("conv_transpose1d", &batched(input)?)?;
    let (oh, ow) = g.transpose_out();
    let y =
        kernels::conv_transpose_forward(&g, input.data(), params.weight.data(), params.bias.data());
    Tensor::chw(g.out_ch, oh, ow, y)
}

/// `W · flatten(x) + b`, returned as a `1 × 1 × out` row.
pub fn fully_connected(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    params.expect_kind(LayerKind::FullyConnected, "fully_connected")?;
    if input.len() != params.in_channels() {
        return Err(Error::shape(
            "fully_connected",
            format!("{} inputs for {}", params.in_channels(), params.name),
            format!("{} ({:?})", input.len(), input.shape()),
        ));
    }
    let y = kernels::linear_forward(1, input.data(), params.weight.data(), params.bias.data());
    Ok(Tensor::row(y))
}

pub fn activation(kind: Activation, input: &Tensor) -> Tensor {
    match kind {
        Activation::LeakyRelu(slope) => input.map(|v| leaky(v, slope)),
        Activation::Tanh => input.map(f64::tanh),
        Activation::Sigmoid => input.map(sigmoid),
        Activation::Softmax => {
            let mut out = input.clone();
            softmax_in_place(out.data_mut());
            out
        }
    }
}

/// Batch normalization over a `[batch, channels, ...]` tensor.
///
/// Train mode normalizes with batch statistics and folds them into the
/// running statistics; eval mode uses the running statistics.
pub fn batchnorm(input_batch: &Tensor, params: &mut LayerParams, mode: BnMode) -> Result<Tensor> {
    params.expect_kind(LayerKind::BatchNorm, "batchnorm")?;
    let shape = input_batch.shape().to_vec();
    if shape.len() < 2 || shape[1] != params.hyper.filters {
        return Err(Error::shape(
            "batchnorm",
            format!("[batch, {}, ...]", params.hyper.filters),
            format!("{shape:?}"),
        ));
    }
    let (n, c) = (shape[0], shape[1]);
    let (mean, var) = match mode {
        BnMode::Train | BnMode::Batch => {
            if n < 2 {
                return Err(Error::Usage(
                    "batchnorm in train mode needs a batch of at least 2".into(),
                ));
            }
            let (mean, var) = kernels::channel_stats(n, c, input_batch.data());
            if mode == BnMode::Train {
                let count = input_batch.len() / c;
                update_running(params, &mean, &var, count);
            }
            (mean, var)
        }
        BnMode::Eval => {
            let rs = params.running.as_ref().ok_or_else(|| {
                Error::Config(format!("{} has no running statistics", params.name))
            })?;
            (rs.mean.clone(), rs.var.clone())
        }
    };
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (y, _) = kernels::channel_normalize(
        n,
        c,
        input_batch.data(),
        &mean,
        &inv,
        params.weight.data(),
        params.bias.data(),
    );
    Tensor::new(&shape, y)
}

/// Exponential moving average of batch statistics; the variance is stored unbiased.
pub fn update_running(params: &mut LayerParams, mean: &[f64], var: &[f64], count: usize) {
    let unbias = if count > 1 {
        count as f64 / (count - 1) as f64
    } else {
        1.0
    };
    if let Some(rs) = params.running.as_mut() {
        for c in 0..mean.len() {
            rs.mean[c] = (1.0 - BN_MOMENTUM) * rs.mean[c] + BN_MOMENTUM * mean[c];
            rs.var[c] = (1.0 - BN_MOMENTUM) * rs.var[c] + BN_MOMENTUM * var[c] * unbias;
        }
    }
}

pub(crate) fn leaky(v: f64, slope: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        slope * v
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

/// `ln(1 + e^v)` without overflow.
pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}
