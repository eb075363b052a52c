//! A small deterministic intra encoder standing in for a codec's RDO.
//!
//! Blocks are predicted (DC / horizontal / vertical), the residual is coded
//! with a 4x4 orthonormal Walsh-Hadamard transform and a uniform quantizer,
//! and every block gets an explicit cost `D + lambda(q) * R`. The partition
//! search is an exhaustive bottom-up dynamic program over the superblock.
//!
//! Prediction is open-loop: neighbours are read from the source superblock,
//! and samples outside the superblock are replaced by the rounded superblock
//! mean. That makes the cost of a block independent of how the rest of the
//! superblock is partitioned, so the dynamic program is globally optimal.

mod cost;
mod predict;
mod search;

pub use cost::{block_rd_cost, code_residual, lambda, qstep, ResidualCode, HEADER_BITS, SPLIT_BITS};
pub use predict::{predict_block, Border, IntraMode, IntraPrediction};
pub use search::{encode_with_tree, rdo_search, region_optimal_cost, tree_cost, SearchTable};

use thiserror::Error;

use crate::parttree::{PartitionTree, TreeError};

/// Side of a superblock in pixels.
pub const SB_SIZE: usize = 64;
pub const SB_PIXELS: usize = SB_SIZE * SB_SIZE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RdoError {
    #[error("unsupported block size {w}x{h}")]
    BadBlockSize { w: usize, h: usize },
    #[error("partition tree is inconsistent across levels")]
    InconsistentTree,
    #[error("expected {expected} samples, got {got}")]
    BadLength { expected: usize, got: usize },
}

impl From<TreeError> for RdoError {
    fn from(_: TreeError) -> Self {
        RdoError::InconsistentTree
    }
}

/// 64x64 luma samples, row-major.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Superblock {
    pixels: Box<[u8; SB_PIXELS]>,
}

impl Superblock {
    pub fn from_slice(pixels: &[u8]) -> Result<Self, RdoError> {
        let arr: [u8; SB_PIXELS] = pixels.try_into().map_err(|_| RdoError::BadLength {
            expected: SB_PIXELS,
            got: pixels.len(),
        })?;
        Ok(Superblock {
            pixels: Box::new(arr),
        })
    }

    pub fn constant(v: u8) -> Self {
        Superblock {
            pixels: Box::new([v; SB_PIXELS]),
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Box::new([0u8; SB_PIXELS]);
        for y in 0..SB_SIZE {
            for x in 0..SB_SIZE {
                pixels[y * SB_SIZE + x] = f(x, y);
            }
        }
        Superblock { pixels }
    }

    pub fn pixels(&self) -> &[u8; SB_PIXELS] {
        &self.pixels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * SB_SIZE + x]
    }

    /// Rounded mean; used as the substitute for samples outside the superblock.
    pub fn mean(&self) -> u8 {
        let sum: u32 = self.pixels.iter().map(|&p| p as u32).sum();
        ((sum + SB_PIXELS as u32 / 2) / SB_PIXELS as u32) as u8
    }
}

impl std::fmt::Debug for Superblock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Superblock(mean={})", self.mean())
    }
}

/// Quantization parameter on the internal 0..=255 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QpValue(pub u8);

impl QpValue {
    /// Range used when generating training data.
    pub const DATASET_MIN: u8 = 8;
    pub const DATASET_MAX: u8 = 105;

    pub fn get(self) -> u8 {
        self.0
    }
}

impl From<u8> for QpValue {
    fn from(q: u8) -> Self {
        QpValue(q)
    }
}

/// Distortion (SSE), rate (abstract bits) and `cost = D + lambda * R`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RdCost {
    pub distortion: f64,
    pub rate: f64,
    pub cost: f64,
}

impl RdCost {
    pub fn new(distortion: f64, rate: f64, lambda: f64) -> Self {
        RdCost {
            distortion,
            rate,
            cost: distortion + lambda * rate,
        }
    }
}

/// Output of one superblock encode.
#[derive(Debug, Clone)]
pub struct EncodeResult {
    pub tree: PartitionTree,
    pub total_rate: f64,
    pub distortion: f64,
    /// Structural cost of the coded tree (see [`tree_cost`]).
    pub cost: f64,
    pub reconstruction: Box<[u8; SB_PIXELS]>,
    pub wall_time: f64,
}

/// PSNR in dB of `recon` against `src`, capped at 99 dB.
pub fn psnr(src: &[u8], recon: &[u8]) -> f64 {
    debug_assert_eq!(src.len(), recon.len());
    let sse: u64 = src
        .iter()
        .zip(recon)
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum();
    psnr_from_sse(sse as f64, src.len())
}

pub fn psnr_from_sse(sse: f64, samples: usize) -> f64 {
    if sse <= 0.0 {
        return 99.0;
    }
    let mse = sse / samples as f64;
    (10.0 * (255.0f64 * 255.0 / mse).log10()).min(99.0)
}
