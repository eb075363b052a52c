//! Synthetic luma content so the pipeline runs without external images.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Frame;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContentKind {
    Gradient,
    Checkerboard,
    BlurredNoise,
    TextEdges,
    Flat,
    /// Random rectangles filled with the other kinds.
    Mixed,
}

impl ContentKind {
    const BASIC: [ContentKind; 5] = [
        ContentKind::Gradient,
        ContentKind::Checkerboard,
        ContentKind::BlurredNoise,
        ContentKind::TextEdges,
        ContentKind::Flat,
    ];
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn gradient<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let lo = rng.random_range(0.0..200.0);
    let span = rng.random_range(10.0..255.0 - lo);
    let diag = ((w * w + h * h) as f64).sqrt().max(1.0);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 - w as f64 / 2.0) * dx + (y as f64 - h as f64 / 2.0) * dy) / diag + 0.5;
            out.push(lo + span * t.clamp(0.0, 1.0));
        }
    }
    out
}

fn checkerboard<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let cell_w = 1usize << rng.random_range(1..6);
    let cell_h = if rng.random_bool(0.7) { cell_w } else { 1usize << rng.random_range(1..6) };
    let a: f64 = rng.random_range(0.0..255.0);
    let b: f64 = rng.random_range(0.0..255.0);
    let (ox, oy) = (rng.random_range(0..cell_w), rng.random_range(0..cell_h));
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let on = ((x + ox) / cell_w + (y + oy) / cell_h) % 2 == 0;
            out.push(if on { a } else { b });
        }
    }
    out
}

fn box_blur(src: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return src.to_vec();
    }
    let pass = |input: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut n = 0.0;
                for d in -(radius as isize)..=radius as isize {
                    let (sx, sy) = if horizontal {
                        (x as isize + d, y as isize)
                    } else {
                        (x as isize, y as isize + d)
                    };
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        acc += input[sy as usize * w + sx as usize];
                        n += 1.0;
                    }
                }
                out[y * w + x] = acc / n;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

fn blurred_noise<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let mean = rng.random_range(40.0..215.0);
    let amp = rng.random_range(5.0..120.0);
    let noise: Vec<f64> = (0..w * h)
        .map(|_| mean + amp * (rng.random::<f64>() - 0.5))
        .collect();
    let radius = rng.random_range(0..6);
    let mut out = box_blur(&noise, w, h, radius);
    if radius > 0 {
        // Restore some contrast lost to blurring.
        let gain = (radius as f64).sqrt() * 1.5;
        for v in out.iter_mut() {
            *v = mean + (*v - mean) * gain;
        }
    }
    out
}

fn text_edges<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let bg = rng.random_range(0.0..255.0);
    let fg = if bg > 128.0 { rng.random_range(0.0..bg - 60.0) } else { rng.random_range(bg + 60.0..255.0) };
    let mut out = vec![bg; w * h];
    let strokes = rng.random_range(4..(w * h / 256).max(8));
    for _ in 0..strokes {
        let thick = rng.random_range(1..4);
        let len = rng.random_range(3..(w.max(h) / 3).max(4));
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let horizontal = rng.random_bool(0.5);
        for t in 0..len {
            for k in 0..thick {
                let (x, y) = if horizontal { (x0 + t, y0 + k) } else { (x0 + k, y0 + t) };
                if x < w && y < h {
                    out[y * w + x] = fg;
                }
            }
        }
    }
    out
}

fn flat<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let v = rng.random_range(0.0..255.0);
    let noise = rng.random_range(0.0..3.0);
    (0..w * h).map(|_| v + noise * (rng.random::<f64>() - 0.5)).collect()
}

fn render<R: Rng>(kind: ContentKind, w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    match kind {
        ContentKind::Gradient => gradient(w, h, rng),
        ContentKind::Checkerboard => checkerboard(w, h, rng),
        ContentKind::BlurredNoise => blurred_noise(w, h, rng),
        ContentKind::TextEdges => text_edges(w, h, rng),
        ContentKind::Flat => flat(w, h, rng),
        ContentKind::Mixed => mixed(w, h, rng),
    }
}

fn mixed<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let base = ContentKind::BASIC[rng.random_range(0..ContentKind::BASIC.len())];
    let mut out = render(base, w, h, rng);
    let patches = rng.random_range(2..(w * h / 8192).max(4));
    for _ in 0..patches {
        let pw = rng.random_range(4..=w.min(96));
        let ph = rng.random_range(4..=h.min(96));
        let (px, py) = (rng.random_range(0..=w - pw), rng.random_range(0..=h - ph));
        let kind = ContentKind::BASIC[rng.random_range(0..ContentKind::BASIC.len())];
        let patch = render(kind, pw, ph, rng);
        for y in 0..ph {
            out[(py + y) * w + px..(py + y) * w + px + pw].copy_from_slice(&patch[y * pw..(y + 1) * pw]);
        }
    }
    out
}

/// One synthetic frame of the given kind; deterministic in `seed`.
pub fn procedural_frame(kind: ContentKind, width: usize, height: usize, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let px = render(kind, width, height, &mut rng);
    Frame {
        width,
        height,
        pixels: px.into_iter().map(clamp_u8).collect(),
    }
}

/// A short clip: one mixed frame panned by a few pixels per frame with a
/// little temporal noise.
pub fn procedural_sequence(width: usize, height: usize, frames: usize, seed: u64) -> Vec<Frame> {
    let pad = 4 * frames;
    let base = procedural_frame(ContentKind::Mixed, width + pad, height + pad, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_f4a3e);
    (0..frames)
        .map(|f| {
            let (ox, oy) = (3 * f, 2 * f);
            let pixels = (0..height)
                .flat_map(|y| (0..width).map(move |x| (x, y)))
                .map(|(x, y)| {
                    let v = base.pixels[(y + oy) * base.width + x + ox] as f64;
                    clamp_u8(v + rng.random_range(-2.0..2.0))
                })
                .collect();
            Frame {
                width,
                height,
                pixels,
            }
        })
        .collect()
}

/// A deterministic corpus of mixed frames.
pub fn procedural_corpus(frames: usize, width: usize, height: usize, seed: u64) -> Vec<Frame> {
    (0..frames)
        .map(|i| procedural_frame(ContentKind::Mixed, width, height, seed.wrapping_mul(1_000_003).wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_are_deterministic_and_sized() {
        for kind in [
            ContentKind::Gradient,
            ContentKind::Checkerboard,
            ContentKind::BlurredNoise,
            ContentKind::TextEdges,
            ContentKind::Flat,
            ContentKind::Mixed,
        ] {
            let a = procedural_frame(kind, 96, 80, 4);
            let b = procedural_frame(kind, 96, 80, 4);
            assert_eq!(a, b, "{kind:?}");
            assert_eq!(a.pixels.len(), 96 * 80);
        }
        assert_ne!(
            procedural_frame(ContentKind::Mixed, 64, 64, 1),
            procedural_frame(ContentKind::Mixed, 64, 64, 2)
        );
    }

    #[test]
    fn sequence_has_requested_frames() {
        let s = procedural_sequence(128, 64, 3, 9);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|f| f.width == 128 && f.height == 64));
        assert_ne!(s[0], s[1]);
    }
}
