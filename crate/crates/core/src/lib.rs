//! Hierarchical partition prediction for 64x64 intra superblocks.
//!
//! * [`parttree`]: merge-matrix partition trees, consistency and correction.
//! * [`rdosim`]: a toy intra encoder with an exhaustive RDO partition search.
//! * [`dataset`]: `(superblock, qp, tree)` sample generation and storage.
//! * [`hfcn`]: the hierarchical fully convolutional predictor and its trainer.
//! * [`evalbench`]: accuracy, speedup and Bjontegaard metrics.

pub mod parttree;
pub mod rdosim;
pub mod dataset;
pub mod hfcn;
pub mod evalbench;

pub use parttree::{Decision, LeafBlock, MergeCode, PartitionTree, SplitKind, TreeError};
pub use rdosim::{EncodeResult, QpValue, RdCost, RdoError, Superblock};
