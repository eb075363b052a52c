//! Shared inputs for the benchmarks.

use partpredict::dataset::extract_superblocks;
use partpredict::dataset::procedural::procedural_corpus;
use partpredict::rdosim::Superblock;

/// A fixed mix of procedural superblocks.
pub fn superblocks(n: usize) -> Vec<Superblock> {
    let frames = procedural_corpus(n.div_ceil(15), 320, 192, 77);
    let mut out: Vec<Superblock> = frames.iter().flat_map(|f| extract_superblocks(f).unwrap()).collect();
    out.truncate(n);
    out
}
