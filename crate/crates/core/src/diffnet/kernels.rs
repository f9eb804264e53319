//! Raw numeric kernels shared by the tape ops and the single-sample layer API.
//!
//! All buffers are row-major. Convolutions use the cross-correlation
//! convention (the kernel is not flipped).

/// Geometry of a 2-D convolution over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_rows: usize,
    pub in_cols: usize,
    pub k_rows: usize,
    pub k_cols: usize,
    pub s_rows: usize,
    pub s_cols: usize,
}

impl ConvGeom {
    /// Output size of the forward convolution.
    pub fn conv_out(&self) -> (usize, usize) {
        (
            (self.in_rows - self.k_rows) / self.s_rows + 1,
            (self.in_cols - self.k_cols) / self.s_cols + 1,
        )
    }

    /// Output size of the transposed convolution.
    pub fn transpose_out(&self) -> (usize, usize) {
        (
            (self.in_rows - 1) * self.s_rows + self.k_rows,
            (self.in_cols - 1) * self.s_cols + self.k_cols,
        )
    }
}

/// Convolution with weights `[out, in, kr, kc]`.
pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.conv_out();
    let mut y = vec![0.0; g.batch * g.out_ch * oh * ow];
    let x_item = g.in_ch * g.in_rows * g.in_cols;
    let y_item = g.out_ch * oh * ow;
    for n in 0..g.batch {
        let xn = &x[n * x_item..(n + 1) * x_item];
        let yn = &mut y[n * y_item..(n + 1) * y_item];
        for o in 0..g.out_ch {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = b[o];
                    for i in 0..g.in_ch {
                        for p in 0..g.k_rows {
                            let row = r * g.s_rows + p;
                            let xrow = &xn[(i * g.in_rows + row) * g.in_cols..];
                            let wrow = &w[((o * g.in_ch + i) * g.k_rows + p) * g.k_cols..];
                            for q in 0..g.k_cols {
                                acc += wrow[q] * xrow[c * g.s_cols + q];
                            }
                        }
                    }
                    yn[(o * oh + r) * ow + c] = acc;
                }
            }
        }
    }
    y
}

/// Gradients of [`conv_forward`] with respect to input, weights and bias.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.conv_out();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    let x_item = g.in_ch * g.in_rows * g.in_cols;
    let y_item = g.out_ch * oh * ow;
    for n in 0..g.batch {
        let xn = &x[n * x_item..(n + 1) * x_item];
        let dxn = &mut dx[n * x_item..(n + 1) * x_item];
        let dyn_ = &dy[n * y_item..(n + 1) * y_item];
        for o in 0..g.out_ch {
            for r in 0..oh {
                for c in 0..ow {
                    let d = dyn_[(o * oh + r) * ow + c];
                    if d == 0.0 {
                        continue;
                    }
                    db[o] += d;
                    for i in 0..g.in_ch {
                        for p in 0..g.k_rows {
                            let row = r * g.s_rows + p;
                            let xbase = (i * g.in_rows + row) * g.in_cols + c * g.s_cols;
                            let wbase = ((o * g.in_ch + i) * g.k_rows + p) * g.k_cols;
                            for q in 0..g.k_cols {
                                dw[wbase + q] += d * xn[xbase + q];
                                dxn[xbase + q] += d * w[wbase + q];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Transposed convolution with weights `[in, out, kr, kc]`: the adjoint of
/// [`conv_forward`] sharing the same weight buffer.
pub(crate) fn conv_transpose_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.transpose_out();
    let x_item = g.in_ch * g.in_rows * g.in_cols;
    let y_item = g.out_ch * oh * ow;
    let mut y = vec![0.0; g.batch * y_item];
    for n in 0..g.batch {
        let xn = &x[n * x_item..(n + 1) * x_item];
        let yn = &mut y[n * y_item..(n + 1) * y_item];
        for o in 0..g.out_ch {
            yn[o * oh * ow..(o + 1) * oh * ow].fill(b[o]);
        }
        for i in 0..g.in_ch {
            for r in 0..g.in_rows {
                for c in 0..g.in_cols {
                    let v = xn[(i * g.in_rows + r) * g.in_cols + c];
                    if v == 0.0 {
                        continue;
                    }
                    for o in 0..g.out_ch {
                        for p in 0..g.k_rows {
                            let ybase = (o * oh + r * g.s_rows + p) * ow + c * g.s_cols;
                            let wbase = ((i * g.out_ch + o) * g.k_rows + p) * g.k_cols;
                            for q in 0..g.k_cols {
                                yn[ybase + q] += v * w[wbase + q];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_transpose_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (oh, ow) = g.transpose_out();
    let x_item = g.in_ch * g.in_rows * g.in_cols;
    let y_item = g.out_ch * oh * ow;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_ch];
    for n in 0..g.batch {
        let xn = &x[n * x_item..(n + 1) * x_item];
        let dxn = &mut dx[n * x_item..(n + 1) * x_item];
        let dyn_ = &dy[n * y_item..(n + 1) * y_item];
        for o in 0..g.out_ch {
            db[o] += dyn_[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
        }
        for i in 0..g.in_ch {
            for r in 0..g.in_rows {
                for c in 0..g.in_cols {
                    let xi = (i * g.in_rows + r) * g.in_cols + c;
                    let v = xn[xi];
                    let mut acc = 0.0;
                    for o in 0..g.out_ch {
                        for p in 0..g.k_rows {
                            let ybase = (o * oh + r * g.s_rows + p) * ow + c * g.s_cols;
                            let wbase = ((i * g.out_ch + o) * g.k_rows + p) * g.k_cols;
                            for q in 0..g.k_cols {
                                let d = dyn_[ybase + q];
                                acc += d * w[wbase + q];
                                dw[wbase + q] += v * d;
                            }
                        }
                    }
                    dxn[xi] = acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Affine map per batch item: `y = W x + b` with `W` as `[out, in]`.
pub(crate) fn linear_forward(batch: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = w.len() / out;
    let mut y = vec![0.0; batch * out];
    for n in 0..batch {
        let xn = &x[n * inp..(n + 1) * inp];
        for o in 0..out {
            let wr = &w[o * inp..(o + 1) * inp];
            y[n * out + o] = b[o] + wr.iter().zip(xn).map(|(a, c)| a * c).sum::<f64>();
        }
    }
    y
}

pub(crate) fn linear_backward(
    batch: usize,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out = dy.len() / batch;
    let inp = w.len() / out;
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; out];
    for n in 0..batch {
        let xn = &x[n * inp..(n + 1) * inp];
        let dxn = &mut dx[n * inp..(n + 1) * inp];
        for o in 0..out {
            let d = dy[n * out + o];
            db[o] += d;
            let wr = &w[o * inp..(o + 1) * inp];
            let dwr = &mut dw[o * inp..(o + 1) * inp];
            for k in 0..inp {
                dxn[k] += d * wr[k];
                dwr[k] += d * xn[k];
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics over `[batch, channels, spatial]`.
pub(crate) fn channel_stats(batch: usize, channels: usize, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let spatial = x.len() / (batch * channels);
    let m = (batch * spatial) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for n in 0..batch {
        for c in 0..channels {
            let s = &x[(n * channels + c) * spatial..(n * channels + c + 1) * spatial];
            mean[c] += s.iter().sum::<f64>();
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    for n in 0..batch {
        for c in 0..channels {
            let s = &x[(n * channels + c) * spatial..(n * channels + c + 1) * spatial];
            var[c] += s.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
        }
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel; returns `(y, x_hat)`.
pub(crate) fn channel_normalize(
    batch: usize,
    channels: usize,
    x: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let spatial = x.len() / (batch * channels);
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    for n in 0..batch {
        for c in 0..channels {
            let base = (n * channels + c) * spatial;
            for k in base..base + spatial {
                let h = (x[k] - mean[c]) * inv_std[c];
                xhat[k] = h;
                y[k] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, xhat)
}
