//! Direct 3x3 stride-1 "same" convolutions over `C x N x H x W` batches,
//! used instead of im2col when AVX-512 is available. Rows are vectorised
//! eight pixels at a time; masked loads supply the zero border.

/// Weights `[co][ci][tap]` repacked as `[ci][tap][co]`.
fn pack_forward(w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut p = vec![0.0; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..9 {
                p[(ci * 9 + t) * cout + co] = w[(co * cin + ci) * 9 + t];
            }
        }
    }
    p
}

/// The transposed, flipped kernel that maps output gradients back to
/// inputs, packed like [`pack_forward`] with the roles of `ci` and `co`
/// swapped.
fn pack_adjoint(w: &[f64], cin: usize, cout: usize) -> Vec<f64> {
    let mut p = vec![0.0; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..9 {
                p[(co * 9 + t) * cin + ci] = w[(co * cin + ci) * 9 + 8 - t];
            }
        }
    }
    p
}

pub(super) fn available() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx512f")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `y = bias + conv(x, w)`; `x` holds `cin` and `y` holds `cout` channels.
pub(super) fn forward(cin: usize, cout: usize, n: usize, size: usize, w: &[f64], bias: &[f64], x: &[f64], y: &mut [f64]) {
    assert!(available());
    let wp = pack_forward(w, cin, cout);
    // SAFETY: AVX-512 support was checked above.
    #[cfg(target_arch = "x86_64")]
    unsafe {
        simd::forward(cin, cout, n, size, &wp, bias, x, y)
    }
}

/// Input gradient: the adjoint convolution of `dy`.
pub(super) fn backward_input(cin: usize, cout: usize, n: usize, size: usize, w: &[f64], dy: &[f64], dx: &mut [f64]) {
    assert!(available());
    let wp = pack_adjoint(w, cin, cout);
    let zero = vec![0.0; cin];
    // SAFETY: as in `forward`.
    #[cfg(target_arch = "x86_64")]
    unsafe {
        simd::forward(cout, cin, n, size, &wp, &zero, dy, dx)
    }
}

/// Adds the weight gradient, laid out like `w`, into `dw`.
pub(super) fn backward_weights(cin: usize, cout: usize, n: usize, size: usize, x: &[f64], dy: &[f64], dw: &mut [f64]) {
    assert!(available());
    // SAFETY: as in `forward`.
    #[cfg(target_arch = "x86_64")]
    unsafe {
        simd::weights(cin, cout, n, size, x, dy, dw)
    }
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    /// Lane masks for one 8-pixel block: `[kx = 0, 1, 2]`. Lanes whose
    /// source column falls outside the row are cleared.
    fn masks(size: usize, x0: usize) -> [__mmask8; 3] {
        let lanes = (size - x0).min(8);
        let base = ((1u32 << lanes) - 1) as u8;
        let left = if x0 == 0 { base & !1 } else { base };
        let last = size - x0 - 1;
        let right = if last < 8 { base & !(1u8 << last) } else { base };
        [left, base, right]
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn forward(
        cin: usize,
        cout: usize,
        n: usize,
        size: usize,
        wp: &[f64],
        bias: &[f64],
        x: &[f64],
        y: &mut [f64],
    ) {
        let plane = size * size;
        assert!(size > 0);
        assert_eq!(wp.len(), cin * 9 * cout);
        assert_eq!(bias.len(), cout);
        assert_eq!(x.len(), cin * n * plane);
        assert_eq!(y.len(), cout * n * plane);
        let g = Geom { cin, cout, n, size };
        for s in 0..n {
            for yy in 0..size {
                for x0 in (0..size).step_by(8) {
                    let m = masks(size, x0);
                    let mut co0 = 0;
                    while co0 < cout {
                        let rem = cout - co0;
                        let at = Pos { s, yy, x0, co0 };
                        if rem >= 8 {
                            fwd_block::<8>(g, at, m, wp, bias, x, y);
                            co0 += 8;
                        } else if rem >= 4 {
                            fwd_block::<4>(g, at, m, wp, bias, x, y);
                            co0 += 4;
                        } else {
                            fwd_block::<1>(g, at, m, wp, bias, x, y);
                            co0 += 1;
                        }
                    }
                }
            }
        }
    }

    #[derive(Clone, Copy)]
    struct Geom {
        cin: usize,
        cout: usize,
        n: usize,
        size: usize,
    }

    #[derive(Clone, Copy)]
    struct Pos {
        s: usize,
        yy: usize,
        x0: usize,
        co0: usize,
    }

    /// Input rows feeding output row `yy`, as `(ky, row offset)`.
    fn rows(size: usize, yy: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..3).filter_map(move |ky| {
            let iy = (yy + ky).checked_sub(1)?;
            (iy < size).then_some((ky, iy * size))
        })
    }

    // Every pointer below is formed with wrapping arithmetic and only
    // dereferenced through masked lanes that the asserts in the callers
    // keep in bounds.
    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn fwd_block<const NB: usize>(
        g: Geom,
        at: Pos,
        m: [__mmask8; 3],
        wp: &[f64],
        bias: &[f64],
        x: &[f64],
        y: &mut [f64],
    ) {
        let plane = g.size * g.size;
        let mut acc: [__m512d; NB] = std::array::from_fn(|j| _mm512_set1_pd(bias[at.co0 + j]));
        let w = wp.as_ptr();
        for ci in 0..g.cin {
            let xc = x.as_ptr().wrapping_add((ci * g.n + at.s) * plane + at.x0);
            for (ky, off) in rows(g.size, at.yy) {
                let row = xc.wrapping_add(off).wrapping_sub(1);
                for kx in 0..3 {
                    let v = _mm512_maskz_loadu_pd(m[kx], row.wrapping_add(kx));
                    let wr = w.wrapping_add((ci * 9 + ky * 3 + kx) * g.cout + at.co0);
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a = _mm512_fmadd_pd(v, _mm512_broadcastsd_pd(_mm_load_sd(wr.wrapping_add(j))), *a);
                    }
                }
            }
        }
        let dst = y.as_mut_ptr();
        for (j, a) in acc.iter().enumerate() {
            let o = ((at.co0 + j) * g.n + at.s) * plane + at.yy * g.size + at.x0;
            _mm512_mask_storeu_pd(dst.wrapping_add(o), m[1], *a);
        }
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn weights(
        cin: usize,
        cout: usize,
        n: usize,
        size: usize,
        x: &[f64],
        dy: &[f64],
        dw: &mut [f64],
    ) {
        let plane = size * size;
        assert!(size > 0);
        assert_eq!(x.len(), cin * n * plane);
        assert_eq!(dy.len(), cout * n * plane);
        assert_eq!(dw.len(), cout * cin * 9);
        let g = Geom { cin, cout, n, size };
        for s in 0..n {
            for ci in 0..cin {
                let mut co0 = 0;
                while co0 < cout {
                    let at = Pos { s, yy: 0, x0: 0, co0 };
                    if cout - co0 >= 2 {
                        dw_block::<2>(g, at, ci, x, dy, dw);
                        co0 += 2;
                    } else {
                        dw_block::<1>(g, at, ci, x, dy, dw);
                        co0 += 1;
                    }
                }
            }
        }
    }

    /// One sample's contribution to `dw[co0..co0 + NB][ci][..]`.
    #[inline]
    #[target_feature(enable = "avx512f")]
    unsafe fn dw_block<const NB: usize>(g: Geom, at: Pos, ci: usize, x: &[f64], dy: &[f64], dw: &mut [f64]) {
        let plane = g.size * g.size;
        let mut acc = [[_mm512_setzero_pd(); 9]; NB];
        let xc = x.as_ptr().wrapping_add((ci * g.n + at.s) * plane);
        let dys: [*const f64; NB] =
            std::array::from_fn(|j| dy.as_ptr().wrapping_add(((at.co0 + j) * g.n + at.s) * plane));
        for yy in 0..g.size {
            for x0 in (0..g.size).step_by(8) {
                let m = masks(g.size, x0);
                let d: [__m512d; NB] =
                    std::array::from_fn(|j| _mm512_maskz_loadu_pd(m[1], dys[j].wrapping_add(yy * g.size + x0)));
                for (ky, off) in rows(g.size, yy) {
                    let row = xc.wrapping_add(off + x0).wrapping_sub(1);
                    for kx in 0..3 {
                        let v = _mm512_maskz_loadu_pd(m[kx], row.wrapping_add(kx));
                        for j in 0..NB {
                            acc[j][ky * 3 + kx] = _mm512_fmadd_pd(d[j], v, acc[j][ky * 3 + kx]);
                        }
                    }
                }
            }
        }
        for (j, a) in acc.iter().enumerate() {
            let base = ((at.co0 + j) * g.cin + ci) * 9;
            for (t, v) in a.iter().enumerate() {
                dw[base + t] += _mm512_reduce_add_pd(*v);
            }
        }
    }
}
