use super::predict::{check_block_size, choose_mode, dc_value, Border, IntraMode, NEUTRAL};
use super::{QpValue, RdCost, RdoError};

/// Header bits charged for every coded block.
pub const HEADER_BITS: f64 = 4.0;
/// Extra bits charged for signalling a four-way split.
pub const SPLIT_BITS: f64 = 1.0;

/// Quantizer step `2^(q/24 + 2)`.
#[inline]
pub fn qstep(q: QpValue) -> f64 {
    (q.0 as f64 / 24.0 + 2.0).exp2()
}

/// Lagrange multiplier `0.85 * qstep^2`.
#[inline]
pub fn lambda(q: QpValue) -> f64 {
    let s = qstep(q);
    0.85 * s * s
}

/// In-place orthonormal 4x4 Walsh-Hadamard transform. The matrix is
/// symmetric and its own inverse.
#[inline]
fn hadamard4x4(t: &mut [f64; 16]) {
    #[inline(always)]
    fn butterfly(a: f64, b: f64, c: f64, d: f64) -> [f64; 4] {
        let (s0, s1) = (a + b, c + d);
        let (d0, d1) = (a - b, c - d);
        [
            0.5 * (s0 + s1),
            0.5 * (s0 - s1),
            0.5 * (d0 - d1),
            0.5 * (d0 + d1),
        ]
    }
    for r in 0..4 {
        let o = butterfly(t[4 * r], t[4 * r + 1], t[4 * r + 2], t[4 * r + 3]);
        t[4 * r..4 * r + 4].copy_from_slice(&o);
    }
    for c in 0..4 {
        let o = butterfly(t[c], t[4 + c], t[8 + c], t[12 + c]);
        for r in 0..4 {
            t[4 * r + c] = o[r];
        }
    }
}

/// Quantizes one transformed tile in place, replacing coefficients with
/// their dequantized values. Returns the coefficient bits.
#[inline]
fn quantize_tile(t: &mut [f64; 16], step: f64) -> f64 {
    let mut bits = 0.0;
    for c in t.iter_mut() {
        let level = (*c / step).round();
        if level != 0.0 {
            bits += (1.0 + level.abs()).log2();
        }
        *c = level * step;
    }
    bits
}

/// Result of coding a bare residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualCode {
    pub levels: Vec<i32>,
    /// Coefficient bits, excluding the block header.
    pub rate_bits: f64,
    /// Squared quantization error, measured before rounding and clipping.
    pub distortion: f64,
}

/// Transforms and quantizes a residual (`w * h`, row-major) tile by tile.
pub fn code_residual(
    residual: &[i32],
    w: usize,
    h: usize,
    q: QpValue,
) -> Result<ResidualCode, RdoError> {
    check_block_size(w, h)?;
    if residual.len() != w * h {
        return Err(RdoError::BadLength {
            expected: w * h,
            got: residual.len(),
        });
    }
    let step = qstep(q);
    let mut levels = vec![0i32; w * h];
    let mut rate_bits = 0.0;
    let mut distortion = 0.0;
    for ty in (0..h).step_by(4) {
        for tx in (0..w).step_by(4) {
            let mut t = [0.0f64; 16];
            for r in 0..4 {
                for c in 0..4 {
                    t[4 * r + c] = residual[(ty + r) * w + tx + c] as f64;
                }
            }
            hadamard4x4(&mut t);
            let orig = t;
            rate_bits += quantize_tile(&mut t, step);
            for r in 0..4 {
                for c in 0..4 {
                    let i = 4 * r + c;
                    let e = orig[i] - t[i];
                    distortion += e * e;
                    levels[(ty + r) * w + tx + c] = (t[i] / step).round() as i32;
                }
            }
        }
    }
    Ok(ResidualCode {
        levels,
        rate_bits,
        distortion,
    })
}

/// Rate-distortion cost of coding `block` (`w * h`, row-major) with the best
/// intra predictor from `border`.
pub fn block_rd_cost(
    block: &[u8],
    border: &Border<'_>,
    w: usize,
    h: usize,
    q: QpValue,
) -> Result<RdCost, RdoError> {
    check_block_size(w, h)?;
    if block.len() != w * h {
        return Err(RdoError::BadLength {
            expected: w * h,
            got: block.len(),
        });
    }
    let top = border.top.map(|t| &t[..w]);
    let left = border.left.map(|l| &l[..h]);
    let coder = BlockCoder::new(q);
    Ok(coder.code(block, w, w, h, top, left, None))
}

/// Per-QP coding state shared by the search and the fixed-tree encoder.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockCoder {
    pub step: f64,
    pub lambda: f64,
}

impl BlockCoder {
    pub fn new(q: QpValue) -> Self {
        BlockCoder {
            step: qstep(q),
            lambda: lambda(q),
        }
    }

    /// Codes the `w x h` block at the start of `src` (row stride `stride`).
    /// When `recon` is given, the reconstruction is written there with the
    /// same stride.
    #[allow(clippy::too_many_arguments)]
    pub fn code(
        &self,
        src: &[u8],
        stride: usize,
        w: usize,
        h: usize,
        top: Option<&[u8]>,
        left: Option<&[u8]>,
        mut recon: Option<&mut [u8]>,
    ) -> RdCost {
        let (mode, _) = choose_mode(src, stride, w, h, top, left);
        let dc = dc_value(top, left) as i32;
        let pred = |x: usize, y: usize| -> i32 {
            match mode {
                IntraMode::Dc => dc,
                IntraMode::Horizontal => left.map_or(NEUTRAL, |l| l[y]) as i32,
                IntraMode::Vertical => top.map_or(NEUTRAL, |t| t[x]) as i32,
            }
        };
        let mut rate = HEADER_BITS;
        let mut distortion = 0u64;
        for ty in (0..h).step_by(4) {
            for tx in (0..w).step_by(4) {
                let mut t = [0.0f64; 16];
                for r in 0..4 {
                    let row = &src[(ty + r) * stride + tx..(ty + r) * stride + tx + 4];
                    for c in 0..4 {
                        t[4 * r + c] = (row[c] as i32 - pred(tx + c, ty + r)) as f64;
                    }
                }
                hadamard4x4(&mut t);
                rate += quantize_tile(&mut t, self.step);
                hadamard4x4(&mut t);
                for r in 0..4 {
                    for c in 0..4 {
                        let p = pred(tx + c, ty + r) as f64;
                        let v = (p + t[4 * r + c]).round().clamp(0.0, 255.0) as i32;
                        let idx = (ty + r) * stride + tx + c;
                        let d = src[idx] as i32 - v;
                        distortion += (d * d) as u64;
                        if let Some(out) = recon.as_deref_mut() {
                            out[idx] = v as u8;
                        }
                    }
                }
            }
        }
        RdCost::new(distortion as f64, rate, self.lambda)
    }
}
