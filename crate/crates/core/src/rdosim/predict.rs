use super::RdoError;

/// Neutral sample used when no neighbour is available at all.
pub const NEUTRAL: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IntraMode {
    Dc,
    Horizontal,
    Vertical,
}

/// Reconstructed neighbours of a block: the row above (`w` samples) and the
/// column to the left (`h` samples). `None` means unavailable.
#[derive(Debug, Clone, Copy, Default)]
pub struct Border<'a> {
    pub top: Option<&'a [u8]>,
    pub left: Option<&'a [u8]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntraPrediction {
    pub mode: IntraMode,
    /// `w * h` predicted samples, row-major.
    pub samples: Vec<u8>,
    pub sse: u64,
}

pub(crate) fn check_block_size(w: usize, h: usize) -> Result<(), RdoError> {
    let ok_side = |s: usize| matches!(s, 4 | 8 | 16 | 32 | 64);
    if ok_side(w) && ok_side(h) && (w == h || w == 2 * h || h == 2 * w) {
        Ok(())
    } else {
        Err(RdoError::BadBlockSize { w, h })
    }
}

/// Picks the best of DC, horizontal and vertical prediction by SSE against
/// `block` (row-major, `w * h`). Ties go to DC, then horizontal.
pub fn predict_block(
    block: &[u8],
    border: &Border<'_>,
    w: usize,
    h: usize,
) -> Result<IntraPrediction, RdoError> {
    check_block_size(w, h)?;
    if block.len() != w * h {
        return Err(RdoError::BadLength {
            expected: w * h,
            got: block.len(),
        });
    }
    let top = border.top.map(|t| &t[..w]);
    let left = border.left.map(|l| &l[..h]);
    let (mode, sse) = choose_mode(block, w, w, h, top, left);
    let mut samples = vec![0u8; w * h];
    fill_prediction(&mut samples, w, h, mode, top, left);
    Ok(IntraPrediction { mode, samples, sse })
}

pub(crate) fn dc_value(top: Option<&[u8]>, left: Option<&[u8]>) -> u8 {
    let mut sum = 0u32;
    let mut n = 0u32;
    for s in [top, left].into_iter().flatten() {
        sum += s.iter().map(|&v| v as u32).sum::<u32>();
        n += s.len() as u32;
    }
    if n == 0 {
        NEUTRAL
    } else {
        ((sum + n / 2) / n) as u8
    }
}

/// Mode decision over a strided source block.
pub(crate) fn choose_mode(
    src: &[u8],
    stride: usize,
    w: usize,
    h: usize,
    top: Option<&[u8]>,
    left: Option<&[u8]>,
) -> (IntraMode, u64) {
    let dc = dc_value(top, left) as i32;
    let mut sse_dc = 0u64;
    let mut sse_h = 0u64;
    let mut sse_v = 0u64;
    for y in 0..h {
        let row = &src[y * stride..y * stride + w];
        let l = left.map_or(NEUTRAL, |l| l[y]) as i32;
        for (x, &s) in row.iter().enumerate() {
            let s = s as i32;
            let t = top.map_or(NEUTRAL, |t| t[x]) as i32;
            sse_dc += ((s - dc) * (s - dc)) as u64;
            sse_h += ((s - l) * (s - l)) as u64;
            sse_v += ((s - t) * (s - t)) as u64;
        }
    }
    let mut best = (IntraMode::Dc, sse_dc);
    if sse_h < best.1 {
        best = (IntraMode::Horizontal, sse_h);
    }
    if sse_v < best.1 {
        best = (IntraMode::Vertical, sse_v);
    }
    best
}

pub(crate) fn fill_prediction(
    out: &mut [u8],
    w: usize,
    h: usize,
    mode: IntraMode,
    top: Option<&[u8]>,
    left: Option<&[u8]>,
) {
    match mode {
        IntraMode::Dc => out[..w * h].fill(dc_value(top, left)),
        IntraMode::Horizontal => {
            for y in 0..h {
                out[y * w..(y + 1) * w].fill(left.map_or(NEUTRAL, |l| l[y]));
            }
        }
        IntraMode::Vertical => {
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = top.map_or(NEUTRAL, |t| t[x]);
                }
            }
        }
    }
}
