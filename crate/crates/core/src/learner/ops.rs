//! Dense kernels for the fixed network: 3x3 "same" convolution, 1x1 head,
//! batch normalization and ReLU, each with its backward pass.
//!
//! Activations are stored as `[batch][channel][row][col]` in one flat buffer.

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Yields `(dy, dx, y_range, x_range)` for each 3x3 tap such that
/// `out[y][x] += w * in[y + dy][x + dx]` stays in bounds for y, x in range.
#[inline]
fn taps(height: usize, width: usize) -> impl Iterator<Item = (usize, isize, isize, usize, usize, usize, usize)> {
    (0..9).map(move |k| {
        let dy = (k / 3) as isize - 1;
        let dx = (k % 3) as isize - 1;
        let y0 = if dy < 0 { 1 } else { 0 };
        let y1 = if dy > 0 { height - 1 } else { height };
        let x0 = if dx < 0 { 1 } else { 0 };
        let x1 = if dx > 0 { width - 1 } else { width };
        (k, dy, dx, y0, y1, x0, x1)
    })
}

/// 3x3 convolution with zero padding. `weight` is `[cout][cin][3][3]`.
pub(crate) fn conv3x3_forward(
    input: &[f64],
    cin: usize,
    weight: &[f64],
    bias: &[f64],
    cout: usize,
    geo: Geometry,
) -> Vec<f64> {
    let plane = geo.plane();
    let (h, w) = (geo.height, geo.width);
    let mut out = vec![0.0; geo.batch * cout * plane];
    for n in 0..geo.batch {
        for co in 0..cout {
            let o = &mut out[(n * cout + co) * plane..(n * cout + co + 1) * plane];
            o.fill(bias[co]);
            for ci in 0..cin {
                let src = &input[(n * cin + ci) * plane..(n * cin + ci + 1) * plane];
                let wk = &weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9];
                for (k, dy, dx, y0, y1, x0, x1) in taps(h, w) {
                    let wt = wk[k];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut o[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let srow = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += wt * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3x3_forward`]. Accumulates into `d_weight` and
/// `d_bias`; returns the input gradient only when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    weight: &[f64],
    cout: usize,
    d_out: &[f64],
    geo: Geometry,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
    want_input: bool,
) -> Option<Vec<f64>> {
    let plane = geo.plane();
    let (h, w) = (geo.height, geo.width);
    let mut d_in = want_input.then(|| vec![0.0; geo.batch * cin * plane]);
    for n in 0..geo.batch {
        for co in 0..cout {
            let g = &d_out[(n * cout + co) * plane..(n * cout + co + 1) * plane];
            d_bias[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (n * cin + ci) * plane;
                let src = &input[base..base + plane];
                let wbase = (co * cin + ci) * 9;
                for (k, dy, dx, y0, y1, x0, x1) in taps(h, w) {
                    let sx0 = (x0 as isize + dx) as usize;
                    let len = x1 - x0;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * w + x0..y * w + x1];
                        let srow = &src[sy * w + sx0..sy * w + sx0 + len];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    d_weight[wbase + k] += acc;
                    if let Some(d_in) = d_in.as_mut() {
                        let wt = weight[wbase + k];
                        let dst = &mut d_in[base..base + plane];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * w + x0..y * w + x1];
                            let drow = &mut dst[sy * w + sx0..sy * w + sx0 + len];
                            for (dv, gv) in drow.iter_mut().zip(grow) {
                                *dv += wt * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// Per-channel statistics of one batch-normalization call.
#[derive(Clone, Debug)]
pub(crate) struct BnBatch {
    pub mean: Vec<f64>,
    /// Biased (divide by count) variance used for normalization.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub count: usize,
}

pub(crate) fn batch_moments(x: &[f64], channels: usize, geo: Geometry) -> BnBatch {
    let plane = geo.plane();
    let count = geo.batch * plane;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for n in 0..geo.batch {
            s += x[(n * channels + c) * plane..(n * channels + c + 1) * plane]
                .iter()
                .sum::<f64>();
        }
        let m = s / count as f64;
        let mut ss = 0.0;
        for n in 0..geo.batch {
            ss += x[(n * channels + c) * plane..(n * channels + c + 1) * plane]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / count as f64;
    }
    let inv_std = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    BnBatch {
        mean,
        var,
        inv_std,
        count,
    }
}

/// Normalizes with the given per-channel mean / inverse std and applies the
/// affine transform. Returns `(xhat, y)`.
pub(crate) fn bn_apply(
    x: &[f64],
    channels: usize,
    geo: Geometry,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane = geo.plane();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for n in 0..geo.batch {
        for c in 0..channels {
            let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
            for ((xh, yv), xv) in xhat[r.clone()].iter_mut().zip(&mut y[r.clone()]).zip(&x[r]) {
                *xh = (xv - mean[c]) * inv_std[c];
                *yv = gamma[c] * *xh + beta[c];
            }
        }
    }
    (xhat, y)
}

/// Training-mode batch-norm backward (batch statistics are part of the graph).
#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    d_y: &[f64],
    xhat: &[f64],
    channels: usize,
    geo: Geometry,
    stats: &BnBatch,
    gamma: &[f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<f64> {
    let plane = geo.plane();
    let m = stats.count as f64;
    let mut d_x = vec![0.0; d_y.len()];
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for n in 0..geo.batch {
            let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
            for (g, xh) in d_y[r.clone()].iter().zip(&xhat[r]) {
                sum_dy += g;
                sum_dy_xhat += g * xh;
            }
        }
        d_beta[c] += sum_dy;
        d_gamma[c] += sum_dy_xhat;
        let scale = gamma[c] * stats.inv_std[c];
        let mean_dy = sum_dy / m;
        let mean_dy_xhat = sum_dy_xhat / m;
        for n in 0..geo.batch {
            let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
            for ((dx, g), xh) in d_x[r.clone()].iter_mut().zip(&d_y[r.clone()]).zip(&xhat[r]) {
                *dx = scale * (g - mean_dy - xh * mean_dy_xhat);
            }
        }
    }
    d_x
}

pub(crate) fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Masks `d_out` by the ReLU derivative evaluated at the pre-activation.
pub(crate) fn relu_backward(d_out: &mut [f64], pre: &[f64]) {
    for (g, &p) in d_out.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 1x1 convolution from `channels` to a single logit plane.
pub(crate) fn head_forward(x: &[f64], channels: usize, geo: Geometry, w: &[f64], b: f64) -> Vec<f64> {
    let plane = geo.plane();
    let mut out = vec![b; geo.batch * plane];
    for n in 0..geo.batch {
        let o = &mut out[n * plane..(n + 1) * plane];
        for c in 0..channels {
            let wc = w[c];
            let src = &x[(n * channels + c) * plane..(n * channels + c + 1) * plane];
            for (ov, sv) in o.iter_mut().zip(src) {
                *ov += wc * sv;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn head_backward(
    x: &[f64],
    channels: usize,
    geo: Geometry,
    w: &[f64],
    d_logit: &[f64],
    d_w: &mut [f64],
    d_b: &mut f64,
) -> Vec<f64> {
    let plane = geo.plane();
    let mut d_x = vec![0.0; x.len()];
    *d_b += d_logit.iter().sum::<f64>();
    for n in 0..geo.batch {
        let g = &d_logit[n * plane..(n + 1) * plane];
        for c in 0..channels {
            let r = (n * channels + c) * plane..(n * channels + c + 1) * plane;
            d_w[c] += g.iter().zip(&x[r.clone()]).map(|(a, b)| a * b).sum::<f64>();
            for (dx, gv) in d_x[r].iter_mut().zip(g) {
                *dx = w[c] * gv;
            }
        }
    }
    d_x
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f64], cin: usize, weight: &[f64], bias: &[f64], cout: usize, geo: Geometry) -> Vec<f64> {
        let (h, w) = (geo.height as isize, geo.width as isize);
        let plane = geo.plane();
        let mut out = vec![0.0; geo.batch * cout * plane];
        for n in 0..geo.batch {
            for co in 0..cout {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = bias[co];
                        for ci in 0..cin {
                            for ky in -1..=1isize {
                                for kx in -1..=1isize {
                                    let (sy, sx) = (y + ky, x + kx);
                                    if sy < 0 || sx < 0 || sy >= h || sx >= w {
                                        continue;
                                    }
                                    let wi = (co * cin + ci) * 9 + ((ky + 1) * 3 + kx + 1) as usize;
                                    s += weight[wi] * input[(n * cin + ci) * plane + (sy * w + sx) as usize];
                                }
                            }
                        }
                        out[(n * cout + co) * plane + (y * w + x) as usize] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        let geo = Geometry { batch: 2, height: 5, width: 4 };
        let (cin, cout) = (3, 2);
        let input: Vec<f64> = (0..geo.batch * cin * geo.plane()).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect();
        let weight: Vec<f64> = (0..cout * cin * 9).map(|i| ((i * 13) % 7) as f64 * 0.2 - 0.6).collect();
        let bias = vec![0.3, -0.1];
        let fast = conv3x3_forward(&input, cin, &weight, &bias, cout, geo);
        let slow = naive_conv(&input, cin, &weight, &bias, cout, geo);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), g> = <x, conv^T(g)> for the bias-free linear map.
        let geo = Geometry { batch: 1, height: 4, width: 6 };
        let (cin, cout) = (2, 3);
        let x: Vec<f64> = (0..cin * geo.plane()).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..cout * cin * 9).map(|i| (i as f64 * 0.91).cos()).collect();
        let g: Vec<f64> = (0..cout * geo.plane()).map(|i| (i as f64 * 0.53).sin()).collect();
        let y = conv3x3_forward(&x, cin, &w, &[0.0; 3], cout, geo);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dw = vec![0.0; w.len()];
        let mut db = vec![0.0; cout];
        let dx = conv3x3_backward(&x, cin, &w, cout, &g, geo, &mut dw, &mut db, true).unwrap();
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // dL/dw of L = <conv(x), g> is linear in w: L(w) = <w, dw>.
        let lw: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lw - lhs).abs() < 1e-10);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
