//! Inference-only evaluation of a trained network in `f32`.
//!
//! Trunk activations are planar (`[channel][row][col]`) with a zero border,
//! and the 3x3 kernels vectorise along image rows: one vector load of input
//! pixels feeds a block of output channels through broadcast weights. ReLU
//! and the running-moment batch norm run in the store epilogue, so unpooled
//! layers write straight into the next layer's padded input. Branch taps are
//! kept pixel-major so each 4x4 patch is four contiguous runs.
//!
//! Probabilities agree with [`forward`](super::model::forward) in infer
//! mode to about 1e-5.

use super::layers::BN_EPS;
use super::model::Prediction;
use super::params::{BatchNorm, Conv, ModelParams};
use crate::parttree::{PartitionTree, CLASSES, LEVELS};
use crate::rdosim::{QpValue, Superblock, SB_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kernel {
    Avx512,
    Avx2,
    Portable,
}

impl Kernel {
    fn detect() -> Kernel {
        #[cfg(target_arch = "x86_64")]
        {
            if std::is_x86_feature_detected!("avx512f") {
                return Kernel::Avx512;
            }
            if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                return Kernel::Avx2;
            }
        }
        Kernel::Portable
    }
}

/// Running-moment batch norm as `scale * x + shift`.
fn bn_affine(bn: &BatchNorm) -> (Vec<f32>, Vec<f32>) {
    let scale: Vec<f64> = bn
        .gamma
        .iter()
        .zip(&bn.running_var)
        .map(|(g, v)| g / (v + BN_EPS).sqrt())
        .collect();
    let shift = bn
        .beta
        .iter()
        .zip(&bn.running_mean)
        .zip(&scale)
        .map(|((b, m), s)| (b - m * s) as f32)
        .collect();
    (scale.iter().map(|&s| s as f32).collect(), shift)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// A trunk layer: 3x3 convolution, ReLU and batch norm.
#[derive(Debug, Clone)]
struct Conv3 {
    cin: usize,
    cout: usize,
    /// `[cin][tap][cout]`.
    w: Vec<f32>,
    bias: Vec<f32>,
    scale: Vec<f32>,
    shift: Vec<f32>,
}

impl Conv3 {
    fn pack(conv: &Conv, bn: &BatchNorm) -> Conv3 {
        let (cin, cout) = (conv.shape.cin, conv.shape.cout);
        let mut w = vec![0.0; cin * 9 * cout];
        for co in 0..cout {
            for ci in 0..cin {
                for tap in 0..9 {
                    w[(ci * 9 + tap) * cout + co] = conv.weight[(co * cin + ci) * 9 + tap] as f32;
                }
            }
        }
        let (scale, shift) = bn_affine(bn);
        Conv3 {
            cin,
            cout,
            w,
            bias: to_f32(&conv.bias),
            scale,
            shift,
        }
    }
}

/// Output channel `co`, pixel `(y, x)` lands at
/// `co * plane + (y + off) * row + x + off`.
#[derive(Debug, Clone, Copy)]
struct OutGeom {
    plane: usize,
    row: usize,
    off: usize,
}

impl OutGeom {
    fn index(self, co: usize, y: usize, x: usize) -> usize {
        co * self.plane + (y + self.off) * self.row + x + self.off
    }
}

fn check_conv3_bounds(c: &Conv3, inp: &[f32], size: usize, out: &[f32], geom: OutGeom) {
    let pw = size + 2;
    assert!(size > 0 && c.cout > 0);
    assert!(inp.len() >= c.cin * pw * pw);
    assert!(geom.row >= size + geom.off && geom.plane >= geom.row * (size + geom.off));
    assert!(out.len() > geom.index(c.cout - 1, size - 1, size - 1));
    assert_eq!(c.w.len(), c.cin * 9 * c.cout);
    for v in [&c.bias, &c.scale, &c.shift] {
        assert_eq!(v.len(), c.cout);
    }
}

/// `inp` is `cin x (size + 2)^2` with a zero border.
fn conv3_portable(c: &Conv3, inp: &[f32], size: usize, out: &mut [f32], geom: OutGeom) {
    check_conv3_bounds(c, inp, size, out, geom);
    let pw = size + 2;
    let mut acc = vec![0.0f32; size];
    for co in 0..c.cout {
        for y in 0..size {
            acc.fill(c.bias[co]);
            for ci in 0..c.cin {
                for ky in 0..3 {
                    let row = &inp[(ci * pw + y + ky) * pw..][..pw];
                    for kx in 0..3 {
                        let w = c.w[(ci * 9 + ky * 3 + kx) * c.cout + co];
                        for (a, &v) in acc.iter_mut().zip(&row[kx..kx + size]) {
                            *a += w * v;
                        }
                    }
                }
            }
            let o = geom.index(co, y, 0);
            for (d, &a) in out[o..o + size].iter_mut().zip(&acc) {
                *d = a.max(0.0) * c.scale[co] + c.shift[co];
            }
        }
    }
}

/// Dense layer `out = bias + W^T x` with `W` stored `[k][cout]`.
#[derive(Debug, Clone)]
struct Dense {
    k: usize,
    cout: usize,
    w: Vec<f32>,
    bias: Vec<f32>,
}

impl Dense {
    /// Flattens a convolution with input order `[ky][kx][cin]`.
    fn pack(conv: &Conv) -> Dense {
        let s = conv.shape;
        let kk = s.kernel * s.kernel;
        let mut w = vec![0.0; s.weight_len()];
        for co in 0..s.cout {
            for ci in 0..s.cin {
                for t in 0..kk {
                    w[(t * s.cin + ci) * s.cout + co] = conv.weight[(co * s.cin + ci) * kk + t] as f32;
                }
            }
        }
        Dense {
            k: s.cin * kk,
            cout: s.cout,
            w,
            bias: to_f32(&conv.bias),
        }
    }

    fn apply_portable(&self, x: &[f32], out: &mut [f32]) {
        assert!(x.len() == self.k && out.len() == self.cout);
        out.copy_from_slice(&self.bias);
        for (&v, wrow) in x.iter().zip(self.w.chunks_exact(self.cout)) {
            for (o, &w) in out.iter_mut().zip(wrow) {
                *o += v * w;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::{check_conv3_bounds, Conv3, Dense, OutGeom};

    /// Accumulates `NB` output channels for `L` pixels of one row.
    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn block512<const NB: usize>(
        c: &Conv3,
        inp: *const f32,
        pw: usize,
        y: usize,
        x0: usize,
        mask: __mmask16,
        co0: usize,
        out: *mut f32,
        geom: OutGeom,
    ) {
        let mut acc: [__m512; NB] = std::array::from_fn(|j| _mm512_set1_ps(c.bias[co0 + j]));
        let w = c.w.as_ptr();
        for ci in 0..c.cin {
            for ky in 0..3 {
                let row = inp.wrapping_add((ci * pw + y + ky) * pw + x0);
                for kx in 0..3 {
                    let v = _mm512_maskz_loadu_ps(mask, row.wrapping_add(kx));
                    let wp = w.wrapping_add((ci * 9 + ky * 3 + kx) * c.cout + co0);
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a = _mm512_fmadd_ps(v, _mm512_broadcastss_ps(_mm_load_ss(wp.wrapping_add(j))), *a);
                    }
                }
            }
        }
        let zero = _mm512_setzero_ps();
        for (j, a) in acc.iter().enumerate() {
            let co = co0 + j;
            let r = _mm512_fmadd_ps(
                _mm512_max_ps(*a, zero),
                _mm512_set1_ps(c.scale[co]),
                _mm512_set1_ps(c.shift[co]),
            );
            _mm512_mask_storeu_ps(out.wrapping_add(geom.index(co, y, x0)), mask, r);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn conv3_avx512(c: &Conv3, inp: &[f32], size: usize, out: &mut [f32], geom: OutGeom) {
        check_conv3_bounds(c, inp, size, out, geom);
        let pw = size + 2;
        let (ip, op) = (inp.as_ptr(), out.as_mut_ptr());
        for y in 0..size {
            for x0 in (0..size).step_by(16) {
                // Masked lanes are neither read nor written.
                let mask = ((1u32 << (size - x0).min(16)) - 1) as __mmask16;
                let mut co0 = 0;
                while co0 < c.cout {
                    let rem = c.cout - co0;
                    if rem >= 8 {
                        block512::<8>(c, ip, pw, y, x0, mask, co0, op, geom);
                        co0 += 8;
                    } else if rem >= 4 {
                        block512::<4>(c, ip, pw, y, x0, mask, co0, op, geom);
                        co0 += 4;
                    } else {
                        block512::<1>(c, ip, pw, y, x0, mask, co0, op, geom);
                        co0 += 1;
                    }
                }
            }
        }
    }

    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn block256<const NB: usize>(
        c: &Conv3,
        inp: *const f32,
        pw: usize,
        y: usize,
        x0: usize,
        co0: usize,
        out: *mut f32,
        geom: OutGeom,
    ) {
        let mut acc: [__m256; NB] = std::array::from_fn(|j| _mm256_set1_ps(c.bias[co0 + j]));
        let w = c.w.as_ptr();
        for ci in 0..c.cin {
            for ky in 0..3 {
                let row = inp.wrapping_add((ci * pw + y + ky) * pw + x0);
                for kx in 0..3 {
                    let v = _mm256_loadu_ps(row.wrapping_add(kx));
                    let wp = w.wrapping_add((ci * 9 + ky * 3 + kx) * c.cout + co0);
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a = _mm256_fmadd_ps(v, _mm256_broadcastss_ps(_mm_load_ss(wp.wrapping_add(j))), *a);
                    }
                }
            }
        }
        let zero = _mm256_setzero_ps();
        for (j, a) in acc.iter().enumerate() {
            let co = co0 + j;
            let r = _mm256_fmadd_ps(
                _mm256_max_ps(*a, zero),
                _mm256_set1_ps(c.scale[co]),
                _mm256_set1_ps(c.shift[co]),
            );
            _mm256_storeu_ps(out.wrapping_add(geom.index(co, y, x0)), r);
        }
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn conv3_avx2(c: &Conv3, inp: &[f32], size: usize, out: &mut [f32], geom: OutGeom) {
        check_conv3_bounds(c, inp, size, out, geom);
        assert_eq!(size % 8, 0);
        let pw = size + 2;
        let (ip, op) = (inp.as_ptr(), out.as_mut_ptr());
        for y in 0..size {
            for x0 in (0..size).step_by(8) {
                let mut co0 = 0;
                while co0 < c.cout {
                    let rem = c.cout - co0;
                    if rem >= 8 {
                        block256::<8>(c, ip, pw, y, x0, co0, op, geom);
                        co0 += 8;
                    } else if rem >= 4 {
                        block256::<4>(c, ip, pw, y, x0, co0, op, geom);
                        co0 += 4;
                    } else {
                        block256::<1>(c, ip, pw, y, x0, co0, op, geom);
                        co0 += 1;
                    }
                }
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dense_avx512(d: &Dense, x: &[f32], out: &mut [f32]) {
        assert!(x.len() == d.k && out.len() == d.cout && d.w.len() == d.k * d.cout);
        let (w, xp) = (d.w.as_ptr(), x.as_ptr());
        for c0 in (0..d.cout).step_by(16) {
            let mask = ((1u32 << (d.cout - c0).min(16)) - 1) as __mmask16;
            // Four partial sums to break the dependency chain.
            let mut acc = [_mm512_setzero_ps(); 4];
            acc[0] = _mm512_maskz_loadu_ps(mask, d.bias.as_ptr().wrapping_add(c0));
            let mut i = 0;
            while i + 4 <= d.k {
                for (u, a) in acc.iter_mut().enumerate() {
                    let wv = _mm512_maskz_loadu_ps(mask, w.wrapping_add((i + u) * d.cout + c0));
                    *a = _mm512_fmadd_ps(_mm512_broadcastss_ps(_mm_load_ss(xp.wrapping_add(i + u))), wv, *a);
                }
                i += 4;
            }
            while i < d.k {
                let wv = _mm512_maskz_loadu_ps(mask, w.wrapping_add(i * d.cout + c0));
                acc[0] = _mm512_fmadd_ps(_mm512_broadcastss_ps(_mm_load_ss(xp.wrapping_add(i))), wv, acc[0]);
                i += 1;
            }
            let s = _mm512_add_ps(_mm512_add_ps(acc[0], acc[1]), _mm512_add_ps(acc[2], acc[3]));
            _mm512_mask_storeu_ps(out.as_mut_ptr().wrapping_add(c0), mask, s);
        }
    }
}

/// Runs one trunk layer, storing `bn(relu(conv(inp)))` through `geom`.
fn conv3(kernel: Kernel, c: &Conv3, inp: &[f32], size: usize, out: &mut [f32], geom: OutGeom) {
    match kernel {
        // SAFETY: `Kernel::detect` only selects these after checking the
        // CPU features they enable.
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx512 => unsafe { simd::conv3_avx512(c, inp, size, out, geom) },
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx2 if size % 8 == 0 => unsafe { simd::conv3_avx2(c, inp, size, out, geom) },
        _ => conv3_portable(c, inp, size, out, geom),
    }
}

fn dense(kernel: Kernel, d: &Dense, x: &[f32], out: &mut [f32]) {
    match kernel {
        // SAFETY: as in `conv3`.
        #[cfg(target_arch = "x86_64")]
        Kernel::Avx512 => unsafe { simd::dense_avx512(d, x, out) },
        _ => d.apply_portable(x, out),
    }
}

#[derive(Debug, Clone)]
struct FastBranch {
    /// Stride of the first convolution, equal to its kernel size.
    stride: usize,
    first: Dense,
    scale: Vec<f32>,
    shift: Vec<f32>,
    mid: Dense,
    out: Dense,
}

/// A network frozen for inference.
#[derive(Debug, Clone)]
pub struct CompiledModel {
    kernel: Kernel,
    trunk: Vec<Conv3>,
    branches: Vec<FastBranch>,
    qp_norm_divisor: f64,
}

/// Scratch buffers reused across calls.
#[derive(Debug, Default)]
pub struct Workspace {
    a: Vec<f32>,
    b: Vec<f32>,
    conv: Vec<f32>,
    /// Pooled outputs, `[row][col][channel]`.
    taps: Vec<Vec<f32>>,
    patch: Vec<f32>,
    h1: Vec<f32>,
    h2: Vec<f32>,
}

impl CompiledModel {
    pub fn new(params: &ModelParams) -> CompiledModel {
        Self::with_kernel(params, Kernel::detect())
    }

    fn with_kernel(params: &ModelParams, kernel: Kernel) -> CompiledModel {
        CompiledModel {
            kernel,
            trunk: params
                .trunk
                .iter()
                .zip(&params.trunk_bn)
                .map(|(c, bn)| Conv3::pack(c, bn))
                .collect(),
            branches: params
                .branches
                .iter()
                .map(|b| {
                    let (scale, shift) = bn_affine(&b.first_bn);
                    FastBranch {
                        stride: b.first.shape.kernel,
                        first: Dense::pack(&b.first),
                        scale,
                        shift,
                        mid: Dense::pack(&b.mid),
                        out: Dense::pack(&b.out),
                    }
                })
                .collect(),
            qp_norm_divisor: params.arch.qp_norm_divisor,
        }
    }

    pub fn predict(&self, sb: &Superblock, q: QpValue) -> Prediction {
        self.predict_with(&mut Workspace::default(), sb, q)
    }

    /// Uncorrected argmax tree.
    pub fn predict_tree(&self, ws: &mut Workspace, sb: &Superblock, q: QpValue) -> PartitionTree {
        self.predict_with(ws, sb, q).argmax_tree()
    }

    pub fn predict_with(&self, ws: &mut Workspace, sb: &Superblock, q: QpValue) -> Prediction {
        self.run_trunk(ws, sb);
        let qn = (q.0 as f64 / self.qp_norm_divisor) as f32;
        let probs = std::array::from_fn(|b| self.run_branch(b, ws, qn));
        Prediction { probs }
    }

    fn run_trunk(&self, ws: &mut Workspace, sb: &Superblock) {
        let Workspace { a, b, conv, taps, .. } = ws;
        taps.resize(LEVELS, Vec::new());
        let pw = SB_SIZE + 2;
        a.clear();
        a.resize(pw * pw, 0.0);
        for (y, row) in sb.pixels().chunks_exact(SB_SIZE).enumerate() {
            let dst = &mut a[(y + 1) * pw + 1..(y + 1) * pw + 1 + SB_SIZE];
            for (d, &p) in dst.iter_mut().zip(row) {
                *d = p as f32 / 255.0;
            }
        }
        let (mut cur, mut next) = (a, b);
        for (l, c) in self.trunk.iter().enumerate() {
            let size = SB_SIZE >> (l / 2);
            let co = c.cout;
            if l % 2 == 0 {
                let pw = size + 2;
                next.clear();
                next.resize(co * pw * pw, 0.0);
                let geom = OutGeom { plane: pw * pw, row: pw, off: 1 };
                conv3(self.kernel, c, cur, size, next, geom);
            } else {
                conv.resize(co * size * size, 0.0);
                let geom = OutGeom { plane: size * size, row: size, off: 0 };
                conv3(self.kernel, c, cur, size, conv, geom);
                let half = size / 2;
                let pw = half + 2;
                next.clear();
                next.resize(co * pw * pw, 0.0);
                let tap = &mut taps[l / 2];
                tap.resize(half * half * co, 0.0);
                for (ch, plane) in conv.chunks_exact(size * size).enumerate() {
                    let dst = &mut next[ch * pw * pw..(ch + 1) * pw * pw];
                    for y in 0..half {
                        let (r0, r1) = plane[2 * y * size..(2 * y + 2) * size].split_at(size);
                        for x in 0..half {
                            // Raster order within the window; the first maximum wins.
                            let mut m = r0[2 * x];
                            for v in [r0[2 * x + 1], r1[2 * x], r1[2 * x + 1]] {
                                if v > m {
                                    m = v;
                                }
                            }
                            dst[(y + 1) * pw + x + 1] = m;
                            tap[(y * half + x) * co + ch] = m;
                        }
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
    }

    fn run_branch(&self, level: usize, ws: &mut Workspace, qn: f32) -> Vec<[f64; CLASSES]> {
        let br = &self.branches[level];
        let tap = &ws.taps[level];
        let size = SB_SIZE >> (level + 1);
        let k = br.stride;
        let cin = br.first.k / (k * k);
        let o = size / k;
        let (patch, h1, h2) = (&mut ws.patch, &mut ws.h1, &mut ws.h2);
        patch.resize(br.first.k, 0.0);
        h1.resize(br.first.cout + 1, 0.0);
        h2.resize(br.mid.cout, 0.0);
        let mut out = Vec::with_capacity(o * o);
        let mut logits = [0.0f32; CLASSES];
        for oy in 0..o {
            for ox in 0..o {
                for ky in 0..k {
                    let src = ((oy * k + ky) * size + ox * k) * cin;
                    patch[ky * k * cin..(ky + 1) * k * cin].copy_from_slice(&tap[src..src + k * cin]);
                }
                let (z, q) = h1.split_at_mut(br.first.cout);
                dense(self.kernel, &br.first, patch, z);
                for ((v, &a), &b) in z.iter_mut().zip(&br.scale).zip(&br.shift) {
                    *v = v.max(0.0) * a + b;
                }
                q[0] = qn;
                dense(self.kernel, &br.mid, h1, h2);
                h2.iter_mut().for_each(|v| *v = v.max(0.0));
                dense(self.kernel, &br.out, h2, &mut logits);
                let l = logits.map(f64::from);
                let mx = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e = l.map(|v| (v - mx).exp());
                let s: f64 = e.iter().sum();
                out.push(e.map(|v| v / s));
            }
        }
        out
    }
}
