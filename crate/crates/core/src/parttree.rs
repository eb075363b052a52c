//! Merge-matrix representation of a 64x64 superblock partition tree.
//!
//! A tree is stored bottom-up as four matrices of merge codes. Level `k`
//! (0..=3) is a `(8 >> k) x (8 >> k)` matrix; element `(i, j)` describes how
//! the four child blocks of size `4 << k` inside the square of size `8 << k`
//! at row `i * (8 << k)`, column `j * (8 << k)` are combined.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Number of levels in a superblock tree (merges of 4x4, 8x8, 16x16, 32x32).
pub const LEVELS: usize = 4;
/// Number of merge classes per matrix element.
pub const CLASSES: usize = 4;
/// Total number of matrix elements over all levels: 64 + 16 + 4 + 1.
pub const TREE_OUTPUTS: usize = 85;

/// Offsets of each level inside the flat element array, which is laid out
/// top level first (3, 2, 1, 0), each level row-major.
const LEVEL_OFFSET: [usize; LEVELS] = [21, 5, 1, 0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("partition tree is inconsistent across levels")]
    InconsistentTree,
    #[error("bad class distribution: {0}")]
    BadDistribution(String),
    #[error("cannot parse partition tree: {0}")]
    Parse(String),
}

/// How the four sibling blocks governed by one matrix element are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MergeCode {
    NoMerge = 0,
    HorzMerge = 1,
    VertMerge = 2,
    FullMerge = 3,
}

impl MergeCode {
    pub const ALL: [MergeCode; CLASSES] = [
        MergeCode::NoMerge,
        MergeCode::HorzMerge,
        MergeCode::VertMerge,
        MergeCode::FullMerge,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get(v as usize).copied()
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Side length of the level-`k` matrix.
#[inline]
pub const fn level_dim(level: usize) -> usize {
    8 >> level
}

/// Side length in pixels of the square block whose children a level-`k`
/// element merges.
#[inline]
pub const fn level_block_size(level: usize) -> usize {
    8 << level
}

/// The four matrices `M0 (8x8) .. M3 (1x1)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PartitionTree {
    codes: [MergeCode; TREE_OUTPUTS],
}

/// Partition applied to one square block in the decision sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SplitKind {
    None,
    Horz,
    Vert,
    Split,
}

/// One entry of the depth-first decision sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Decision {
    pub size: usize,
    pub row: usize,
    pub col: usize,
    pub kind: SplitKind,
}

/// A coded block; the set of leaves tiles the superblock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LeafBlock {
    pub w: usize,
    pub h: usize,
    pub x: usize,
    pub y: usize,
}

impl LeafBlock {
    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

impl PartitionTree {
    /// A tree whose 85 elements all carry `code`.
    pub fn uniform(code: MergeCode) -> Self {
        PartitionTree {
            codes: [code; TREE_OUTPUTS],
        }
    }

    /// Builds a tree from elements in storage order (levels 3, 2, 1, 0,
    /// row-major).
    pub fn from_codes(codes: [MergeCode; TREE_OUTPUTS]) -> Self {
        PartitionTree { codes }
    }

    pub fn codes(&self) -> &[MergeCode; TREE_OUTPUTS] {
        &self.codes
    }

    /// Row-major view of one level's matrix.
    pub fn level(&self, level: usize) -> &[MergeCode] {
        let n = level_dim(level);
        &self.codes[LEVEL_OFFSET[level]..LEVEL_OFFSET[level] + n * n]
    }

    #[inline]
    pub fn get(&self, level: usize, row: usize, col: usize) -> MergeCode {
        let n = level_dim(level);
        debug_assert!(row < n && col < n);
        self.codes[LEVEL_OFFSET[level] + row * n + col]
    }

    #[inline]
    pub fn set(&mut self, level: usize, row: usize, col: usize, code: MergeCode) {
        let n = level_dim(level);
        debug_assert!(row < n && col < n);
        self.codes[LEVEL_OFFSET[level] + row * n + col] = code;
    }

    /// True iff no element lies under a `FullMerge` parent without itself
    /// being `FullMerge`. Elements under rectangular merges are don't-care.
    pub fn is_consistent(&self) -> bool {
        (0..LEVELS - 1).all(|k| {
            let n = level_dim(k);
            (0..n).all(|i| {
                (0..n).all(|j| {
                    self.get(k + 1, i / 2, j / 2) != MergeCode::FullMerge
                        || self.get(k, i, j) == MergeCode::FullMerge
                })
            })
        })
    }

    /// Top-down inconsistency correction: starting below the top level,
    /// every element whose corrected parent is `FullMerge` becomes
    /// `FullMerge`. The top level is never modified.
    pub fn correct_top_down(&self) -> PartitionTree {
        let mut out = *self;
        for k in (0..LEVELS - 1).rev() {
            let n = level_dim(k);
            for i in 0..n {
                for j in 0..n {
                    if out.get(k + 1, i / 2, j / 2) == MergeCode::FullMerge {
                        out.set(k, i, j, MergeCode::FullMerge);
                    }
                }
            }
        }
        out
    }

    /// Forces every entry that the decision traversal never reads to
    /// `FullMerge`, so that trees describing the same partition compare equal.
    /// The result is always consistent.
    pub fn canonicalize(&self) -> PartitionTree {
        fn fill_below(tree: &mut PartitionTree, level: usize, i: usize, j: usize) {
            if level == 0 {
                return;
            }
            for (di, dj) in RASTER {
                let (ci, cj) = (2 * i + di, 2 * j + dj);
                tree.set(level - 1, ci, cj, MergeCode::FullMerge);
                fill_below(tree, level - 1, ci, cj);
            }
        }
        fn visit(tree: &mut PartitionTree, level: usize, i: usize, j: usize) {
            if tree.get(level, i, j) == MergeCode::NoMerge {
                if level > 0 {
                    for (di, dj) in RASTER {
                        visit(tree, level - 1, 2 * i + di, 2 * j + dj);
                    }
                }
            } else {
                fill_below(tree, level, i, j);
            }
        }
        let mut out = *self;
        visit(&mut out, LEVELS - 1, 0, 0);
        out
    }

    /// Preorder (depth-first, raster-ordered) decision sequence starting at
    /// the 64x64 block.
    pub fn to_decisions(&self) -> Result<Vec<Decision>, TreeError> {
        if !self.is_consistent() {
            return Err(TreeError::InconsistentTree);
        }
        let mut out = Vec::new();
        self.walk(&mut |level, i, j, kind| {
            let size = level_block_size(level);
            out.push(Decision {
                size,
                row: i * size,
                col: j * size,
                kind,
            });
        });
        Ok(out)
    }

    /// Coded blocks in decision order.
    pub fn leaf_blocks(&self) -> Result<Vec<LeafBlock>, TreeError> {
        if !self.is_consistent() {
            return Err(TreeError::InconsistentTree);
        }
        let mut out = Vec::new();
        self.walk(&mut |level, i, j, kind| {
            let s = level_block_size(level);
            let (y, x) = (i * s, j * s);
            let half = s / 2;
            match kind {
                SplitKind::None => out.push(LeafBlock { w: s, h: s, x, y }),
                SplitKind::Horz => {
                    out.push(LeafBlock { w: s, h: half, x, y });
                    out.push(LeafBlock { w: s, h: half, x, y: y + half });
                }
                SplitKind::Vert => {
                    out.push(LeafBlock { w: half, h: s, x, y });
                    out.push(LeafBlock { w: half, h: s, x: x + half, y });
                }
                // Only an 8x8 split reaches here without children being
                // visited; it yields four 4x4 blocks.
                SplitKind::Split if level == 0 => {
                    for (di, dj) in RASTER {
                        out.push(LeafBlock {
                            w: half,
                            h: half,
                            x: x + dj * half,
                            y: y + di * half,
                        });
                    }
                }
                SplitKind::Split => {}
            }
        });
        Ok(out)
    }

    /// Preorder traversal over the nodes the encoder actually visits.
    fn walk(&self, f: &mut impl FnMut(usize, usize, usize, SplitKind)) {
        fn go(
            tree: &PartitionTree,
            level: usize,
            i: usize,
            j: usize,
            f: &mut impl FnMut(usize, usize, usize, SplitKind),
        ) {
            match tree.get(level, i, j) {
                MergeCode::NoMerge => {
                    f(level, i, j, SplitKind::Split);
                    if level > 0 {
                        for (di, dj) in RASTER {
                            go(tree, level - 1, 2 * i + di, 2 * j + dj, f);
                        }
                    }
                }
                MergeCode::HorzMerge => f(level, i, j, SplitKind::Horz),
                MergeCode::VertMerge => f(level, i, j, SplitKind::Vert),
                MergeCode::FullMerge => f(level, i, j, SplitKind::None),
            }
        }
        go(self, LEVELS - 1, 0, 0, f);
    }

    /// 85 i.i.d. draws from `class_probs`, deterministic in `seed`.
    pub fn random(seed: u64, class_probs: [f64; CLASSES]) -> Result<Self, TreeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_with(&mut rng, class_probs)
    }

    pub fn random_with<R: Rng + ?Sized>(
        rng: &mut R,
        class_probs: [f64; CLASSES],
    ) -> Result<Self, TreeError> {
        if class_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(TreeError::BadDistribution(format!(
                "negative or non-finite entry in {class_probs:?}"
            )));
        }
        let total: f64 = class_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TreeError::BadDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        let last_positive = class_probs.iter().rposition(|p| *p > 0.0).unwrap_or(0);
        let mut codes = [MergeCode::NoMerge; TREE_OUTPUTS];
        for c in codes.iter_mut() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = last_positive;
            for (k, p) in class_probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = k;
                    break;
                }
            }
            *c = MergeCode::ALL[pick];
        }
        Ok(PartitionTree { codes })
    }
}

/// Child order for a four-way split: top-left, top-right, bottom-left,
/// bottom-right, as (row, col) offsets.
pub const RASTER: [(usize, usize); 4] = [(0, 0), (0, 1), (1, 0), (1, 1)];

/// `random_tree` under its operation name.
pub fn random_tree(seed: u64, class_probs: [f64; CLASSES]) -> Result<PartitionTree, TreeError> {
    PartitionTree::random(seed, class_probs)
}

impl fmt::Debug for PartitionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PartitionTree(")?;
        for (k, level) in (0..LEVELS).rev().enumerate() {
            if k > 0 {
                write!(f, " | ")?;
            }
            for c in self.level(level) {
                write!(f, "{}", c.index())?;
            }
        }
        write!(f, ")")
    }
}

/// Four lines, levels 3 down to 0, each a row-major list of
/// space-separated codes.
impl fmt::Display for PartitionTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for level in (0..LEVELS).rev() {
            let line: Vec<String> = self
                .level(level)
                .iter()
                .map(|c| c.index().to_string())
                .collect();
            writeln!(f, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

impl FromStr for PartitionTree {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lines: Vec<&str> = s.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != LEVELS {
            return Err(TreeError::Parse(format!(
                "expected {LEVELS} lines, got {}",
                lines.len()
            )));
        }
        let mut codes = [MergeCode::NoMerge; TREE_OUTPUTS];
        for (line, level) in lines.iter().zip((0..LEVELS).rev()) {
            let n = level_dim(level);
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != n * n {
                return Err(TreeError::Parse(format!(
                    "level {level}: expected {} values, got {}",
                    n * n,
                    vals.len()
                )));
            }
            for (idx, v) in vals.iter().enumerate() {
                let code = v
                    .parse::<u8>()
                    .ok()
                    .and_then(MergeCode::from_u8)
                    .ok_or_else(|| TreeError::Parse(format!("bad merge code {v:?}")))?;
                codes[LEVEL_OFFSET[level] + idx] = code;
            }
        }
        Ok(PartitionTree { codes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use MergeCode::*;

    const UNIFORM: [f64; 4] = [0.25; 4];

    #[test]
    fn fully_merged_tree_is_consistent() {
        assert!(PartitionTree::uniform(FullMerge).is_consistent());
        assert!(PartitionTree::uniform(NoMerge).is_consistent());
    }

    #[test]
    fn split_child_under_full_merge_is_inconsistent() {
        let mut t = PartitionTree::uniform(FullMerge);
        t.set(2, 1, 0, NoMerge);
        assert!(!t.is_consistent());
    }

    #[test]
    fn rectangular_parent_makes_children_dont_care() {
        let mut t = PartitionTree::uniform(NoMerge);
        t.set(3, 0, 0, HorzMerge);
        assert!(t.is_consistent());
        assert_eq!(t.correct_top_down(), t);
    }

    #[test]
    fn correction_cascades_from_top() {
        let mut t = PartitionTree::uniform(NoMerge);
        t.set(3, 0, 0, FullMerge);
        assert_eq!(t.correct_top_down(), PartitionTree::uniform(FullMerge));
    }

    #[test]
    fn correction_is_local_to_one_quadrant() {
        let mut t = PartitionTree::uniform(NoMerge);
        t.set(2, 0, 0, FullMerge);
        let c = t.correct_top_down();
        assert_eq!(c.get(3, 0, 0), NoMerge);
        assert_eq!(c.level(2), &[FullMerge, NoMerge, NoMerge, NoMerge]);
        for i in 0..4 {
            for j in 0..4 {
                let want = if i < 2 && j < 2 { FullMerge } else { NoMerge };
                assert_eq!(c.get(1, i, j), want, "m1[{i}][{j}]");
            }
        }
        for i in 0..8 {
            for j in 0..8 {
                let want = if i < 4 && j < 4 { FullMerge } else { NoMerge };
                assert_eq!(c.get(0, i, j), want, "m0[{i}][{j}]");
            }
        }
        let changed = t
            .codes()
            .iter()
            .zip(c.codes())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 4 + 16);
    }

    #[test]
    fn consistent_tree_is_a_fixed_point() {
        for seed in 0..200 {
            let t = random_tree(seed, UNIFORM).unwrap().canonicalize();
            assert!(t.is_consistent());
            assert_eq!(t.correct_top_down(), t);
        }
    }

    #[test]
    fn decisions_of_trivial_trees() {
        let d = PartitionTree::uniform(FullMerge).to_decisions().unwrap();
        assert_eq!(
            d,
            vec![Decision {
                size: 64,
                row: 0,
                col: 0,
                kind: SplitKind::None
            }]
        );

        let d = PartitionTree::uniform(NoMerge).to_decisions().unwrap();
        assert_eq!(d.len(), 1 + 4 + 16 + 64);
        assert!(d.iter().all(|e| e.kind == SplitKind::Split));
        assert_eq!(d.iter().filter(|e| e.size == 8).count(), 64);
        // Preorder: the second entry is the top-left 32x32, the third its
        // top-left 16x16.
        assert_eq!((d[1].size, d[1].row, d[1].col), (32, 0, 0));
        assert_eq!((d[2].size, d[2].row, d[2].col), (16, 0, 0));
        assert_eq!((d[3].size, d[3].row, d[3].col), (8, 0, 0));
        assert_eq!((d[4].size, d[4].row, d[4].col), (8, 0, 8));
        assert_eq!((d[5].size, d[5].row, d[5].col), (8, 8, 0));

        let mut t = random_tree(3, UNIFORM).unwrap();
        t.set(3, 0, 0, HorzMerge);
        let t = t.correct_top_down();
        assert_eq!(
            t.to_decisions().unwrap(),
            vec![Decision {
                size: 64,
                row: 0,
                col: 0,
                kind: SplitKind::Horz
            }]
        );
    }

    #[test]
    fn inconsistent_tree_is_rejected_by_traversals() {
        let mut t = PartitionTree::uniform(FullMerge);
        t.set(0, 5, 5, VertMerge);
        assert_eq!(t.to_decisions(), Err(TreeError::InconsistentTree));
        assert_eq!(t.leaf_blocks(), Err(TreeError::InconsistentTree));
    }

    #[test]
    fn leaf_blocks_of_trivial_trees() {
        assert_eq!(
            PartitionTree::uniform(FullMerge).leaf_blocks().unwrap(),
            vec![LeafBlock { w: 64, h: 64, x: 0, y: 0 }]
        );
        let leaves = PartitionTree::uniform(NoMerge).leaf_blocks().unwrap();
        assert_eq!(leaves.len(), 256);
        assert!(leaves.iter().all(|b| b.w == 4 && b.h == 4));

        let mut t = PartitionTree::uniform(FullMerge);
        t.set(3, 0, 0, VertMerge);
        assert_eq!(
            t.leaf_blocks().unwrap(),
            vec![
                LeafBlock { w: 32, h: 64, x: 0, y: 0 },
                LeafBlock { w: 32, h: 64, x: 32, y: 0 }
            ]
        );
        t.set(3, 0, 0, HorzMerge);
        assert_eq!(
            t.leaf_blocks().unwrap(),
            vec![
                LeafBlock { w: 64, h: 32, x: 0, y: 0 },
                LeafBlock { w: 64, h: 32, x: 0, y: 32 }
            ]
        );
    }

    #[test]
    fn random_tree_degenerate_distributions() {
        assert_eq!(
            random_tree(9, [0.0, 0.0, 0.0, 1.0]).unwrap(),
            PartitionTree::uniform(FullMerge)
        );
        assert_eq!(
            random_tree(9, [1.0, 0.0, 0.0, 0.0]).unwrap(),
            PartitionTree::uniform(NoMerge)
        );
        assert_eq!(random_tree(77, UNIFORM), random_tree(77, UNIFORM));
        assert_ne!(random_tree(77, UNIFORM), random_tree(78, UNIFORM));
    }

    #[test]
    fn random_tree_rejects_bad_distributions() {
        assert!(matches!(
            random_tree(0, [0.5, 0.5, 0.5, 0.0]),
            Err(TreeError::BadDistribution(_))
        ));
        assert!(matches!(
            random_tree(0, [-0.5, 0.5, 0.5, 0.5]),
            Err(TreeError::BadDistribution(_))
        ));
        assert!(matches!(
            random_tree(0, [f64::NAN, 0.5, 0.5, 0.0]),
            Err(TreeError::BadDistribution(_))
        ));
    }

    #[test]
    fn text_dump_shape_and_parse() {
        let t = random_tree(5, UNIFORM).unwrap();
        let s = t.to_string();
        let counts: Vec<usize> = s.lines().map(|l| l.split(' ').count()).collect();
        assert_eq!(counts, vec![1, 4, 16, 64]);
        assert_eq!(s.parse::<PartitionTree>().unwrap(), t);
        assert_eq!(
            PartitionTree::uniform(FullMerge).to_string().lines().next(),
            Some("3")
        );
        assert!("3\n3 3 3\n".parse::<PartitionTree>().is_err());
        let bad = t.to_string().replacen('0', "7", 1).replacen('1', "7", 1);
        assert!(bad.parse::<PartitionTree>().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_tree() -> impl Strategy<Value = PartitionTree> {
            proptest::collection::vec(0u8..4, TREE_OUTPUTS).prop_map(|v| {
                let mut codes = [MergeCode::NoMerge; TREE_OUTPUTS];
                for (c, x) in codes.iter_mut().zip(v) {
                    *c = MergeCode::from_u8(x).unwrap();
                }
                PartitionTree::from_codes(codes)
            })
        }

        proptest! {
            #[test]
            fn correction_only_touches_full_merge_subtrees(t in any_tree()) {
                let c = t.correct_top_down();
                prop_assert!(c.is_consistent());
                prop_assert_eq!(c.get(3, 0, 0), t.get(3, 0, 0));
                for k in 0..LEVELS - 1 {
                    let n = level_dim(k);
                    for i in 0..n {
                        for j in 0..n {
                            if c.get(k + 1, i / 2, j / 2) != FullMerge {
                                prop_assert_eq!(c.get(k, i, j), t.get(k, i, j));
                            }
                        }
                    }
                }
            }

            #[test]
            fn corrected_leaves_tile_the_superblock(t in any_tree()) {
                let c = t.correct_top_down();
                let leaves = c.leaf_blocks().unwrap();
                let mut cover = [0u8; 64 * 64];
                for b in &leaves {
                    for y in b.y..b.y + b.h {
                        for x in b.x..b.x + b.w {
                            cover[y * 64 + x] += 1;
                        }
                    }
                }
                prop_assert!(cover.iter().all(|&n| n == 1));
                prop_assert_eq!(leaves.iter().map(LeafBlock::area).sum::<usize>(), 4096);
                prop_assert!(c.to_decisions().is_ok());
            }

            #[test]
            fn canonical_form_keeps_the_partition(t in any_tree()) {
                let c = t.correct_top_down();
                let k = c.canonicalize();
                prop_assert_eq!(k.leaf_blocks().unwrap(), c.leaf_blocks().unwrap());
                prop_assert_eq!(k.canonicalize(), k);
            }
        }
    }
}
