//! Batched tensor kernels. Activations are stored channel-major over the
//! batch (`C x N x H x W`), so a convolution is one matrix product per
//! chunk of samples and batch norm works on contiguous channel rows.

use super::arch::ConvShape;
use super::direct;

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Act {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Act {
        Act {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    /// Elements per channel row (`N * H * W`).
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn row(&self, c: usize) -> &[f64] {
        let m = self.cols();
        &self.data[c * m..(c + 1) * m]
    }

    pub fn row_mut(&mut self, c: usize) -> &mut [f64] {
        let m = self.cols();
        &mut self.data[c * m..(c + 1) * m]
    }
}

/// `C = A * B + beta * C` for strided row-major views. Bounds are checked
/// here so the raw call below cannot run off a slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index touched is inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Output columns `[lo, hi)` that read input column `o * stride + k - pad`
/// inside `0..size`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).div_ceil(stride);
    let hi = if size + pad > k {
        ((size + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Samples processed per im2col buffer; keeps the buffer near 4096 columns.
fn chunk_len(s: &ConvShape) -> usize {
    let o = s.out_size();
    (4096 / (o * o)).max(1)
}

fn im2col(x: &Act, s: &ConvShape, n0: usize, nc: usize, col: &mut Vec<f64>) {
    let (k, st, pad, size) = (s.kernel, s.stride, s.pad, s.in_size);
    let o = s.out_size();
    let width = nc * o * o;
    col.clear();
    col.resize(s.fan_in() * width, 0.0);
    let plane = size * size;
    for c in 0..s.cin {
        let xrow = x.row(c);
        for ky in 0..k {
            let (oy0, oy1) = valid_range(o, size, ky, st, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(o, size, kx, st, pad);
                let r = (c * k + ky) * k + kx;
                let dst = &mut col[r * width..(r + 1) * width];
                for s_i in 0..nc {
                    let src = &xrow[(n0 + s_i) * plane..(n0 + s_i + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * st + ky - pad;
                        let drow = &mut dst[(s_i * o + oy) * o..(s_i * o + oy + 1) * o];
                        let srow = &src[iy * size..(iy + 1) * size];
                        if st == 1 {
                            let ix0 = ox0 + kx - pad;
                            drow[ox0..ox1].copy_from_slice(&srow[ix0..ix0 + (ox1 - ox0)]);
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] = srow[ox * st + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], s: &ConvShape, n0: usize, nc: usize, dx: &mut Act) {
    let (k, st, pad, size) = (s.kernel, s.stride, s.pad, s.in_size);
    let o = s.out_size();
    let width = nc * o * o;
    let plane = size * size;
    for c in 0..s.cin {
        let xrow = dx.row_mut(c);
        for ky in 0..k {
            let (oy0, oy1) = valid_range(o, size, ky, st, pad);
            for kx in 0..k {
                let (ox0, ox1) = valid_range(o, size, kx, st, pad);
                let r = (c * k + ky) * k + kx;
                let src = &col[r * width..(r + 1) * width];
                for s_i in 0..nc {
                    let dst = &mut xrow[(n0 + s_i) * plane..(n0 + s_i + 1) * plane];
                    for oy in oy0..oy1 {
                        let iy = oy * st + ky - pad;
                        let srow = &src[(s_i * o + oy) * o..(s_i * o + oy + 1) * o];
                        let drow = &mut dst[iy * size..(iy + 1) * size];
                        for ox in ox0..ox1 {
                            drow[ox * st + kx - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(s: &ConvShape) -> bool {
    s.kernel == 1 && s.stride == 1 && s.pad == 0
}

fn is_same3(s: &ConvShape) -> bool {
    s.kernel == 3 && s.stride == 1 && s.pad == 1
}

/// Convolution with weights `cout x (cin * k * k)` and per-channel bias.
pub fn conv_forward(s: &ConvShape, w: &[f64], b: &[f64], x: &Act) -> Act {
    assert_eq!((x.c, x.h, x.w), (s.cin, s.in_size, s.in_size));
    if is_same3(s) && direct::available() {
        let mut y = Act::zeros(s.cout, x.n, s.in_size, s.in_size);
        direct::forward(s.cin, s.cout, x.n, s.in_size, w, b, &x.data, &mut y.data);
        return y;
    }
    conv_forward_gemm(s, w, b, x)
}

fn conv_forward_gemm(s: &ConvShape, w: &[f64], b: &[f64], x: &Act) -> Act {
    let o = s.out_size();
    let mut y = Act::zeros(s.cout, x.n, o, o);
    for (oc, &bias) in b.iter().enumerate() {
        y.row_mut(oc).fill(bias);
    }
    let kk = s.fan_in();
    let p = y.cols();
    if is_pointwise(s) {
        gemm(s.cout, kk, p, w, (kk, 1), &x.data, (p, 1), 1.0, &mut y.data, (p, 1));
        return y;
    }
    let chunk = chunk_len(s);
    let mut col = Vec::new();
    let mut n0 = 0;
    while n0 < x.n {
        let nc = chunk.min(x.n - n0);
        im2col(x, s, n0, nc, &mut col);
        let width = nc * o * o;
        gemm(
            s.cout,
            kk,
            width,
            w,
            (kk, 1),
            &col,
            (width, 1),
            1.0,
            &mut y.data[n0 * o * o..],
            (p, 1),
        );
        n0 += nc;
    }
    y
}

/// Gradients of a convolution. `dx` is skipped when `need_dx` is false.
pub fn conv_backward(
    s: &ConvShape,
    w: &[f64],
    x: &Act,
    dy: &Act,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Act>) {
    if is_same3(s) && direct::available() {
        let size = s.in_size;
        let db = (0..s.cout).map(|oc| dy.row(oc).iter().sum()).collect();
        let mut dw = vec![0.0; s.weight_len()];
        direct::backward_weights(s.cin, s.cout, x.n, size, &x.data, &dy.data, &mut dw);
        let dx = need_dx.then(|| {
            let mut dx = Act::zeros(s.cin, x.n, size, size);
            direct::backward_input(s.cin, s.cout, x.n, size, w, &dy.data, &mut dx.data);
            dx
        });
        return (dw, db, dx);
    }
    conv_backward_gemm(s, w, x, dy, need_dx)
}

fn conv_backward_gemm(
    s: &ConvShape,
    w: &[f64],
    x: &Act,
    dy: &Act,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>, Option<Act>) {
    let kk = s.fan_in();
    let p = dy.cols();
    let db: Vec<f64> = (0..s.cout).map(|oc| dy.row(oc).iter().sum()).collect();
    let mut dw = vec![0.0; s.cout * kk];
    let mut dx = need_dx.then(|| Act::zeros(s.cin, x.n, x.h, x.w));
    if is_pointwise(s) {
        // dW = dY * X^T, dX = W^T * dY
        gemm(s.cout, p, kk, &dy.data, (p, 1), &x.data, (1, p), 0.0, &mut dw, (kk, 1));
        if let Some(dx) = dx.as_mut() {
            gemm(kk, s.cout, p, w, (1, kk), &dy.data, (p, 1), 0.0, &mut dx.data, (p, 1));
        }
        return (dw, db, dx);
    }
    let o = s.out_size();
    let chunk = chunk_len(s);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    let mut n0 = 0;
    while n0 < x.n {
        let nc = chunk.min(x.n - n0);
        let width = nc * o * o;
        let dys = &dy.data[n0 * o * o..];
        im2col(x, s, n0, nc, &mut col);
        gemm(s.cout, width, kk, dys, (p, 1), &col, (1, width), 1.0, &mut dw, (kk, 1));
        if let Some(dx) = dx.as_mut() {
            dcol.clear();
            dcol.resize(kk * width, 0.0);
            gemm(kk, s.cout, width, w, (1, kk), dys, (p, 1), 0.0, &mut dcol, (width, 1));
            col2im_add(&dcol, s, n0, nc, dx);
        }
        n0 += nc;
    }
    (dw, db, dx)
}

pub fn relu_inplace(x: &mut Act) {
    for v in x.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Masks `dy` where the ReLU output was not positive.
pub fn relu_backward(out: &Act, dy: &mut Act) {
    for (g, &v) in dy.data.iter_mut().zip(&out.data) {
        if v <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Batch statistics kept for the backward pass and the running moments.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Act,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode batch norm over each channel row (biased variance).
pub fn bn_forward_train(x: &Act, gamma: &[f64], beta: &[f64]) -> (Act, BnCache) {
    let m = x.cols() as f64;
    let mut y = Act::zeros(x.c, x.n, x.h, x.w);
    let mut xhat = Act::zeros(x.c, x.n, x.h, x.w);
    let mut inv_std = Vec::with_capacity(x.c);
    let mut means = Vec::with_capacity(x.c);
    let mut vars = Vec::with_capacity(x.c);
    for c in 0..x.c {
        let row = x.row(c);
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let is = 1.0 / (var + BN_EPS).sqrt();
        let (g, b) = (gamma[c], beta[c]);
        for ((xh, yv), &v) in xhat.row_mut(c).iter_mut().zip(y.row_mut(c)).zip(row) {
            *xh = (v - mean) * is;
            *yv = g * *xh + b;
        }
        inv_std.push(is);
        means.push(mean);
        vars.push(var);
    }
    (
        y,
        BnCache {
            xhat,
            inv_std,
            mean: means,
            var: vars,
        },
    )
}

pub fn bn_forward_infer(x: &mut Act, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) {
    for c in 0..x.c {
        let scale = gamma[c] / (var[c] + BN_EPS).sqrt();
        let shift = beta[c] - mean[c] * scale;
        for v in x.row_mut(c) {
            *v = *v * scale + shift;
        }
    }
}

/// Returns `(dx, dgamma, dbeta)`, differentiating through the batch mean and
/// variance.
pub fn bn_backward(cache: &BnCache, gamma: &[f64], dy: &Act) -> (Act, Vec<f64>, Vec<f64>) {
    let m = dy.cols() as f64;
    let mut dx = Act::zeros(dy.c, dy.n, dy.h, dy.w);
    let mut dgamma = Vec::with_capacity(dy.c);
    let mut dbeta = Vec::with_capacity(dy.c);
    for c in 0..dy.c {
        let (g, xh) = (dy.row(c), cache.xhat.row(c));
        let sum_dy: f64 = g.iter().sum();
        let sum_dy_xh: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma.push(sum_dy_xh);
        dbeta.push(sum_dy);
        let k = gamma[c] * cache.inv_std[c] / m;
        for ((d, &gv), &xv) in dx.row_mut(c).iter_mut().zip(g).zip(xh) {
            *d = k * (m * gv - sum_dy - xv * sum_dy_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 stride-2 max pooling; ties keep the first element in raster order.
/// The second value holds the flat input index chosen for each output.
pub fn maxpool_forward(x: &Act) -> (Act, Vec<u32>) {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.n, ho, wo);
    let mut idx = vec![0u32; y.data.len()];
    let mut out = 0;
    for plane in 0..x.c * x.n {
        let base = plane * x.h * x.w;
        for oy in 0..ho {
            for ox in 0..wo {
                let i0 = base + 2 * oy * x.w + 2 * ox;
                let mut best = i0;
                for cand in [i0 + 1, i0 + x.w, i0 + x.w + 1] {
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                y.data[out] = x.data[best];
                idx[out] = best as u32;
                out += 1;
            }
        }
    }
    (y, idx)
}

pub fn maxpool_backward(idx: &[u32], dy: &Act, c: usize, h: usize, w: usize) -> Act {
    let mut dx = Act::zeros(c, dy.n, h, w);
    for (&i, &g) in idx.iter().zip(&dy.data) {
        dx.data[i as usize] += g;
    }
    dx
}

/// Appends one channel holding `plane[n]` across sample `n`.
pub fn concat_plane(x: &Act, plane: &[f64]) -> Act {
    let mut data = Vec::with_capacity(x.data.len() + x.cols());
    data.extend_from_slice(&x.data);
    let hw = x.h * x.w;
    for &v in plane {
        data.extend(std::iter::repeat_n(v, hw));
    }
    Act {
        c: x.c + 1,
        n: x.n,
        h: x.h,
        w: x.w,
        data,
    }
}

/// Softmax across channels at every (sample, position).
pub fn softmax_channels(z: &Act) -> Act {
    let p = z.cols();
    let mut y = z.clone();
    for col in 0..p {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..z.c {
            mx = mx.max(z.data[c * p + col]);
        }
        let mut sum = 0.0;
        for c in 0..z.c {
            let e = (z.data[c * p + col] - mx).exp();
            y.data[c * p + col] = e;
            sum += e;
        }
        for c in 0..z.c {
            y.data[c * p + col] /= sum;
        }
    }
    y
}
