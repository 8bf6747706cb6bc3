//! Layer definitions and their forward/backward kernels.
//!
//! Kernels work on whole batches laid out row-major: fully-connected
//! activations are `[n, features]`, spatial activations `[n, c, h, w]`.
//! Weights are `[out, in]` for fully-connected and `[out, in, k, k]` for
//! convolutions.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::FullyConnected { .. } => "fully-connected",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool { .. } => "max-pool",
            LayerSpec::Flatten => "flatten",
        }
    }

    pub fn is_weighted(&self) -> bool {
        matches!(
            self,
            LayerSpec::FullyConnected { .. } | LayerSpec::Conv2d { .. }
        )
    }

    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => Some(vec![outputs, inputs]),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some(vec![out_channels, in_channels, kernel, kernel]),
            _ => None,
        }
    }

    pub fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::FullyConnected { outputs, .. } => Some(outputs),
            LayerSpec::Conv2d { out_channels, .. } => Some(out_channels),
            _ => None,
        }
    }

    /// Fan-in of one output unit.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::FullyConnected { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape, or `None` if `input` is not accepted.
    pub fn output_shape(&self, input: &[usize]) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::FullyConnected { inputs, outputs } => {
                (input == [inputs]).then(|| vec![outputs])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if input.len() != 3 || input[0] != in_channels || stride == 0 {
                    return None;
                }
                let h = conv_out(input[1], kernel, stride, padding)?;
                let w = conv_out(input[2], kernel, stride, padding)?;
                Some(vec![out_channels, h, w])
            }
            LayerSpec::Relu => Some(input.to_vec()),
            LayerSpec::MaxPool { size, stride } => {
                if input.len() != 3 || stride == 0 || size == 0 {
                    return None;
                }
                let h = conv_out(input[1], size, stride, 0)?;
                let w = conv_out(input[2], size, stride, 0)?;
                Some(vec![input[0], h, w])
            }
            LayerSpec::Flatten => Some(vec![input.iter().product()]),
        }
    }
}

fn conv_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (padded >= kernel && kernel > 0).then(|| (padded - kernel) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose input index `o*stride + offset`
/// lands inside `[0, in_len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        (-offset + s - 1) / s
    };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let hi = (hi as usize).min(out_len);
    let lo = (lo as usize).min(hi);
    (lo, hi)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

pub(crate) fn fc_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; batch * outputs];
    for n in 0..batch {
        let xr = &x[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let dot: f64 = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            y[n * outputs + o] = dot + b[o];
        }
    }
    y
}

/// Returns `(dx, dw, db)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn fc_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let mut dw = vec![0.0; outputs * inputs];
    let mut db = vec![0.0; outputs];
    let mut dx = need_dx.then(|| vec![0.0; batch * inputs]);
    for n in 0..batch {
        let xr = &x[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let g = dy[n * outputs + o];
            db[o] += g;
            let dwr = &mut dw[o * inputs..(o + 1) * inputs];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d += g * xv;
            }
            if let Some(dx) = dx.as_mut() {
                let wr = &w[o * inputs..(o + 1) * inputs];
                let dxr = &mut dx[n * inputs..(n + 1) * inputs];
                for (d, &wv) in dxr.iter_mut().zip(wr) {
                    *d += g * wv;
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn conv_forward(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut y = vec![0.0; g.batch * g.out_c * out_plane];
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let yp = &mut y[(n * g.out_c + o) * out_plane..][..out_plane];
            yp.fill(b[o]);
            for c in 0..g.in_c {
                let xp = &x[(n * g.in_c + c) * in_plane..][..in_plane];
                for kh in 0..k {
                    let (oh_lo, oh_hi) =
                        valid_range(g.out_h, g.in_h, g.stride, kh as isize - g.padding as isize);
                    for kw in 0..k {
                        let wv = w[((o * g.in_c + c) * k + kh) * k + kw];
                        let off_w = kw as isize - g.padding as isize;
                        let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, g.stride, off_w);
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let xr = &xp[ih * g.in_w..][..g.in_w];
                            let yr = &mut yp[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                let iw = (ow * g.stride) as isize + off_w;
                                yr[ow] += wv * xr[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let k = g.kernel;
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for n in 0..g.batch {
        for o in 0..g.out_c {
            let dyp = &dy[(n * g.out_c + o) * out_plane..][..out_plane];
            db[o] += dyp.iter().sum::<f64>();
            for c in 0..g.in_c {
                let base = (n * g.in_c + c) * in_plane;
                let xp = &x[base..][..in_plane];
                for kh in 0..k {
                    let (oh_lo, oh_hi) =
                        valid_range(g.out_h, g.in_h, g.stride, kh as isize - g.padding as isize);
                    for kw in 0..k {
                        let widx = ((o * g.in_c + c) * k + kh) * k + kw;
                        let wv = w[widx];
                        let off_w = kw as isize - g.padding as isize;
                        let (ow_lo, ow_hi) = valid_range(g.out_w, g.in_w, g.stride, off_w);
                        let mut acc = 0.0;
                        for oh in oh_lo..oh_hi {
                            let ih = oh * g.stride + kh - g.padding;
                            let xr = &xp[ih * g.in_w..][..g.in_w];
                            let dyr = &dyp[oh * g.out_w..][..g.out_w];
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * g.stride) as isize + off_w) as usize;
                                acc += dyr[ow] * xr[iw];
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dxr = &mut dx[base + ih * g.in_w..][..g.in_w];
                                for ow in ow_lo..ow_hi {
                                    let iw = ((ow * g.stride) as isize + off_w) as usize;
                                    dxr[iw] += wv * dyr[ow];
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn relu_forward(x: &[f64]) -> Vec<f64> {
    // NaN passes through so non-finite activations stay visible
    x.iter().map(|&v| if v < 0.0 { 0.0 } else { v }).collect()
}

pub(crate) fn relu_backward(x: &[f64], dy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect()
}

/// Returns pooled values and, per output, the flat input index chosen.
pub(crate) fn maxpool_forward(
    x: &[f64],
    batch: usize,
    channels: usize,
    in_h: usize,
    in_w: usize,
    size: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>) {
    let out_h = (in_h - size) / stride + 1;
    let out_w = (in_w - size) / stride + 1;
    let mut y = Vec::with_capacity(batch * channels * out_h * out_w);
    let mut arg = Vec::with_capacity(y.capacity());
    for plane in 0..batch * channels {
        let base = plane * in_h * in_w;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = base + oh * stride * in_w + ow * stride;
                for dh in 0..size {
                    for dw in 0..size {
                        let idx = base + (oh * stride + dh) * in_w + ow * stride + dw;
                        if x[idx] > x[best] || (x[best].is_nan() && !x[idx].is_nan()) {
                            best = idx;
                        }
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward(input_len: usize, arg: &[usize], dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (&i, &d) in arg.iter().zip(dy) {
        dx[i] += d;
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 8,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        assert_eq!(conv.output_shape(&[1, 28, 28]), Some(vec![8, 28, 28]));
        assert_eq!(conv.output_shape(&[2, 28, 28]), None);
        let pool = LayerSpec::MaxPool { size: 2, stride: 2 };
        assert_eq!(pool.output_shape(&[8, 28, 28]), Some(vec![8, 14, 14]));
        assert_eq!(pool.output_shape(&[8, 7, 7]), Some(vec![8, 3, 3]));
        assert_eq!(
            LayerSpec::Flatten.output_shape(&[16, 7, 7]),
            Some(vec![784])
        );
        let fc = LayerSpec::FullyConnected {
            inputs: 784,
            outputs: 10,
        };
        assert_eq!(fc.output_shape(&[784]), Some(vec![10]));
        assert_eq!(fc.output_shape(&[16, 7, 7]), None);
    }

    #[test]
    fn valid_range_cases() {
        assert_eq!(valid_range(5, 5, 1, -1), (1, 5));
        assert_eq!(valid_range(5, 5, 1, 1), (0, 4));
        assert_eq!(valid_range(3, 5, 2, 0), (0, 3));
        assert_eq!(valid_range(3, 5, 2, -1), (1, 3));
        assert_eq!(valid_range(4, 2, 1, 5), (0, 0));
    }

    #[test]
    fn strided_conv_matches_naive() {
        let g = ConvGeom {
            batch: 1,
            in_c: 1,
            in_h: 5,
            in_w: 5,
            out_c: 1,
            out_h: 3,
            out_w: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let w: Vec<f64> = (0..9).map(|v| (v as f64) - 4.0).collect();
        let y = conv_forward(&x, &w, &[0.5], g);
        for oh in 0..3 {
            for ow in 0..3 {
                let mut acc = 0.5;
                for kh in 0..3 {
                    for kw in 0..3 {
                        let ih = (oh * 2 + kh) as isize - 1;
                        let iw = (ow * 2 + kw) as isize - 1;
                        if (0..5).contains(&ih) && (0..5).contains(&iw) {
                            acc += w[kh * 3 + kw] * x[(ih * 5 + iw) as usize];
                        }
                    }
                }
                assert_eq!(y[oh * 3 + ow], acc);
            }
        }
    }

    #[test]
    fn relu_definition() {
        assert_eq!(relu_forward(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(
            relu_backward(&[-1.0, 0.0, 2.0], &[5.0, 5.0, 5.0]),
            vec![0.0, 0.0, 5.0]
        );
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = [1.0, 4.0, 3.0, 2.0];
        let (y, arg) = maxpool_forward(&x, 1, 1, 2, 2, 2, 2);
        assert_eq!(y, vec![4.0]);
        assert_eq!(maxpool_backward(4, &arg, &[1.5]), vec![0.0, 1.5, 0.0, 0.0]);
    }
}
