//! Forward and backward kernels for the sequential layer set.
//!
//! Convolutions go through im2col: the unfolded input is a
//! `(C_in * k * k, N * OH * OW)` matrix whose columns are the receptive
//! fields, so a conv layer is literally `W · cols` with `W` stored as
//! `(C_out, C_in * k * k)`. Column order is sample-major, then output row,
//! then output column.

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }
}

pub fn im2col(x: ArrayView4<f64>, g: ConvGeometry) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = g.output_hw(h, w);
    let k = g.kernel;
    let plane = oh * ow;
    let ncols = n * plane;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let mut cols = Array2::<f64>::zeros((c * k * k, ncols));
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let src = &xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let base = ni * plane + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: ArrayView2<f64>, input_dim: (usize, usize, usize, usize), g: ConvGeometry) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let (oh, ow) = g.output_hw(h, w);
    let k = g.kernel;
    let plane = oh * ow;
    let ncols = n * plane;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut x = Array4::<f64>::zeros(input_dim);
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * ncols..(row + 1) * ncols];
                for ni in 0..n {
                    let dst = &mut xs[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = ni * plane + oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(C_out, N * L)` matrix -> `(N, C_out, OH, OW)` activation.
pub fn unflatten_output(mat: &Array2<f64>, n: usize, oh: usize, ow: usize, bias: Option<&Array1<f64>>) -> Array4<f64> {
    let co = mat.nrows();
    let plane = oh * ow;
    let ms = mat.as_slice().expect("matmul output is standard layout");
    let mut out = Array4::<f64>::zeros((n, co, oh, ow));
    let os = out.as_slice_mut().expect("fresh array");
    for o in 0..co {
        let b = bias.map_or(0.0, |b| b[o]);
        let src = &ms[o * n * plane..(o + 1) * n * plane];
        for ni in 0..n {
            let dst = &mut os[(ni * co + o) * plane..(ni * co + o + 1) * plane];
            for (d, s) in dst.iter_mut().zip(&src[ni * plane..(ni + 1) * plane]) {
                *d = s + b;
            }
        }
    }
    out
}

/// Inverse layout change of [`unflatten_output`].
pub fn flatten_output(y: ArrayView4<f64>) -> Array2<f64> {
    let (n, co, oh, ow) = y.dim();
    let plane = oh * ow;
    let y = y.as_standard_layout();
    let ys = y.as_slice().expect("standard layout");
    let mut mat = Array2::<f64>::zeros((co, n * plane));
    let ms = mat.as_slice_mut().expect("fresh array");
    for ni in 0..n {
        for o in 0..co {
            let src = &ys[(ni * co + o) * plane..(ni * co + o + 1) * plane];
            ms[o * n * plane + ni * plane..o * n * plane + (ni + 1) * plane].copy_from_slice(src);
        }
    }
    mat
}

/// Per-channel mean and biased variance over `(N, H, W)`.
pub fn channel_stats(x: ArrayView4<f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let count = (n * h * w) as f64;
    let mut mean = Array1::<f64>::zeros(c);
    let mut var = Array1::<f64>::zeros(c);
    for ci in 0..c {
        let lane = x.index_axis(Axis(1), ci);
        let m = lane.sum() / count;
        let v = lane.fold(0.0, |acc, &v| acc + (v - m) * (v - m)) / count;
        mean[ci] = m;
        var[ci] = v;
    }
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel; returns `(y, x_hat)`.
pub fn batch_norm_apply(
    x: ArrayView4<f64>,
    mean: ArrayView1<f64>,
    inv_std: ArrayView1<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array4<f64>, Array4<f64>) {
    let mut xhat = x.to_owned();
    let mut y = Array4::<f64>::zeros(x.raw_dim());
    for ci in 0..x.dim().1 {
        let (m, s, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
        let mut xh = xhat.index_axis_mut(Axis(1), ci);
        xh.mapv_inplace(|v| (v - m) * s);
        let mut yc = y.index_axis_mut(Axis(1), ci);
        yc.zip_mut_with(&xh, |yv, &xv| *yv = g * xv + b);
    }
    (y, xhat)
}

/// Backward of batch norm when statistics are constants (evaluation mode).
pub fn batch_norm_backward_frozen(
    dy: ArrayView4<f64>,
    xhat: ArrayView4<f64>,
    inv_std: ArrayView1<f64>,
    gamma: ArrayView1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let c = dy.dim().1;
    let mut dx = dy.to_owned();
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let dyc = dy.index_axis(Axis(1), ci);
        let xh = xhat.index_axis(Axis(1), ci);
        dbeta[ci] = dyc.sum();
        dgamma[ci] = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        let scale = gamma[ci] * inv_std[ci];
        dx.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * scale);
    }
    (dx, dgamma, dbeta)
}

/// Backward of batch norm through the batch statistics (training mode).
pub fn batch_norm_backward_batch(
    dy: ArrayView4<f64>,
    xhat: ArrayView4<f64>,
    inv_std: ArrayView1<f64>,
    gamma: ArrayView1<f64>,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = dy.dim();
    let count = (n * h * w) as f64;
    let mut dx = Array4::<f64>::zeros(dy.raw_dim());
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let dyc = dy.index_axis(Axis(1), ci);
        let xh = xhat.index_axis(Axis(1), ci);
        let sum_dy = dyc.sum();
        let sum_dy_xh: f64 = dyc.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        dbeta[ci] = sum_dy;
        dgamma[ci] = sum_dy_xh;
        let k = gamma[ci] * inv_std[ci] / count;
        let mut dxc = dx.index_axis_mut(Axis(1), ci);
        ndarray::Zip::from(&mut dxc)
            .and(&dyc)
            .and(&xh)
            .for_each(|d, &g, &xv| *d = k * (count * g - sum_dy - xv * sum_dy_xh));
    }
    (dx, dgamma, dbeta)
}

pub fn global_avg_pool(x: ArrayView4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let area = (h * w) as f64;
    Array4::from_shape_fn((n, c, 1, 1), |(i, j, _, _)| {
        x.slice(ndarray::s![i, j, .., ..]).sum() / area
    })
}

pub fn global_avg_pool_backward(dy: ArrayView4<f64>, input_dim: (usize, usize, usize, usize)) -> Array4<f64> {
    let (_, _, h, w) = input_dim;
    let area = (h * w) as f64;
    Array4::from_shape_fn(input_dim, |(i, j, _, _)| dy[[i, j, 0, 0]] / area)
}
