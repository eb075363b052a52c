use std::time::Instant;

use super::cost::{BlockCoder, SPLIT_BITS};
use super::{EncodeResult, QpValue, RdCost, RdoError, Superblock, SB_PIXELS, SB_SIZE};
use crate::parttree::{level_block_size, level_dim, MergeCode, PartitionTree, SplitKind, LEVELS, RASTER};

/// Neighbour samples of one block, with out-of-superblock positions filled.
struct BlockContext {
    top: [u8; SB_SIZE],
    left: [u8; SB_SIZE],
}

impl BlockContext {
    fn new(sb: &Superblock, fill: u8, x: usize, y: usize, w: usize, h: usize) -> Self {
        let px = sb.pixels();
        let mut top = [fill; SB_SIZE];
        let mut left = [fill; SB_SIZE];
        if y > 0 {
            top[..w].copy_from_slice(&px[(y - 1) * SB_SIZE + x..(y - 1) * SB_SIZE + x + w]);
        }
        if x > 0 {
            for (r, l) in left[..h].iter_mut().enumerate() {
                *l = px[(y + r) * SB_SIZE + x - 1];
            }
        }
        BlockContext { top, left }
    }
}

fn code_leaf(
    coder: &BlockCoder,
    sb: &Superblock,
    fill: u8,
    (x, y, w, h): (usize, usize, usize, usize),
    recon: Option<&mut [u8; SB_PIXELS]>,
) -> RdCost {
    let ctx = BlockContext::new(sb, fill, x, y, w, h);
    let off = y * SB_SIZE + x;
    coder.code(
        &sb.pixels()[off..],
        SB_SIZE,
        w,
        h,
        Some(&ctx.top[..w]),
        Some(&ctx.left[..h]),
        recon.map(|r| &mut r[off..]),
    )
}

fn add(a: RdCost, b: RdCost) -> RdCost {
    RdCost {
        distortion: a.distortion + b.distortion,
        rate: a.rate + b.rate,
        cost: a.cost + b.cost,
    }
}

fn with_split_header(c: RdCost, lambda: f64) -> RdCost {
    RdCost {
        distortion: c.distortion,
        rate: c.rate + SPLIT_BITS,
        cost: c.cost + lambda * SPLIT_BITS,
    }
}

/// Optimal cost and partition choice of every square block in a superblock.
#[derive(Debug, Clone)]
pub struct SearchTable {
    cost: [Vec<f64>; LEVELS],
    choice: [Vec<SplitKind>; LEVELS],
}

impl SearchTable {
    /// Exhaustive bottom-up search. Options are compared in the order
    /// None, Horz, Vert, Split and only a strictly lower cost replaces the
    /// incumbent.
    pub fn run(sb: &Superblock, q: QpValue) -> Self {
        let coder = BlockCoder::new(q);
        let fill = sb.mean();
        let mut cost: [Vec<f64>; LEVELS] = Default::default();
        let mut choice: [Vec<SplitKind>; LEVELS] = Default::default();
        for level in 0..LEVELS {
            let n = level_dim(level);
            let s = level_block_size(level);
            let half = s / 2;
            cost[level] = Vec::with_capacity(n * n);
            choice[level] = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    let (x, y) = (j * s, i * s);
                    let leaf = |b| code_leaf(&coder, sb, fill, b, None).cost;
                    let none = leaf((x, y, s, s));
                    let horz = leaf((x, y, s, half)) + leaf((x, y + half, s, half));
                    let vert = leaf((x, y, half, s)) + leaf((x + half, y, half, s));
                    let mut children = 0.0;
                    for (di, dj) in RASTER {
                        children += if level == 0 {
                            leaf((x + dj * half, y + di * half, half, half))
                        } else {
                            cost[level - 1][(2 * i + di) * (2 * n) + 2 * j + dj]
                        };
                    }
                    let split = children + coder.lambda * SPLIT_BITS;
                    let mut best = (none, SplitKind::None);
                    for cand in [(horz, SplitKind::Horz), (vert, SplitKind::Vert), (split, SplitKind::Split)] {
                        if cand.0 < best.0 {
                            best = cand;
                        }
                    }
                    cost[level].push(best.0);
                    choice[level].push(best.1);
                }
            }
        }
        SearchTable { cost, choice }
    }

    /// Minimum cost of the square block governed by element `(i, j)` of
    /// level `level`.
    pub fn best_cost(&self, level: usize, i: usize, j: usize) -> f64 {
        self.cost[level][i * level_dim(level) + j]
    }

    pub fn best_choice(&self, level: usize, i: usize, j: usize) -> SplitKind {
        self.choice[level][i * level_dim(level) + j]
    }

    /// The optimal tree, with don't-care entries set to `FullMerge`.
    pub fn tree(&self) -> PartitionTree {
        fn visit(t: &SearchTable, out: &mut PartitionTree, level: usize, i: usize, j: usize) {
            let code = match t.best_choice(level, i, j) {
                SplitKind::None => MergeCode::FullMerge,
                SplitKind::Horz => MergeCode::HorzMerge,
                SplitKind::Vert => MergeCode::VertMerge,
                SplitKind::Split => MergeCode::NoMerge,
            };
            out.set(level, i, j, code);
            if code == MergeCode::NoMerge && level > 0 {
                for (di, dj) in RASTER {
                    visit(t, out, level - 1, 2 * i + di, 2 * j + dj);
                }
            }
        }
        let mut out = PartitionTree::uniform(MergeCode::FullMerge);
        visit(self, &mut out, LEVELS - 1, 0, 0);
        out
    }
}

/// Walks `tree` in decision order, coding every leaf. Costs are summed
/// structurally: a split node costs its children in raster order plus the
/// split header.
fn encode_tree(
    sb: &Superblock,
    q: QpValue,
    tree: &PartitionTree,
    mut recon: Option<&mut [u8; SB_PIXELS]>,
) -> Result<RdCost, RdoError> {
    if !tree.is_consistent() {
        return Err(RdoError::InconsistentTree);
    }
    fn node(
        coder: &BlockCoder,
        sb: &Superblock,
        fill: u8,
        tree: &PartitionTree,
        level: usize,
        i: usize,
        j: usize,
        recon: &mut Option<&mut [u8; SB_PIXELS]>,
    ) -> RdCost {
        let s = level_block_size(level);
        let half = s / 2;
        let (x, y) = (j * s, i * s);
        let leaf = |b, recon: &mut Option<&mut [u8; SB_PIXELS]>| {
            code_leaf(coder, sb, fill, b, recon.as_deref_mut())
        };
        match tree.get(level, i, j) {
            MergeCode::FullMerge => leaf((x, y, s, s), recon),
            MergeCode::HorzMerge => {
                let a = leaf((x, y, s, half), recon);
                add(a, leaf((x, y + half, s, half), recon))
            }
            MergeCode::VertMerge => {
                let a = leaf((x, y, half, s), recon);
                add(a, leaf((x + half, y, half, s), recon))
            }
            MergeCode::NoMerge => {
                let mut acc = RdCost::default();
                for (di, dj) in RASTER {
                    let c = if level == 0 {
                        leaf((x + dj * half, y + di * half, half, half), recon)
                    } else {
                        node(coder, sb, fill, tree, level - 1, 2 * i + di, 2 * j + dj, recon)
                    };
                    acc = add(acc, c);
                }
                with_split_header(acc, coder.lambda)
            }
        }
    }
    let coder = BlockCoder::new(q);
    Ok(node(&coder, sb, sb.mean(), tree, LEVELS - 1, 0, 0, &mut recon))
}

/// Cost of coding `sb` with a fixed consistent `tree`, without producing a
/// reconstruction.
pub fn tree_cost(sb: &Superblock, q: QpValue, tree: &PartitionTree) -> Result<RdCost, RdoError> {
    encode_tree(sb, q, tree, None)
}

/// Optimal cost of the square region governed by element `(i, j)` of
/// `level`.
pub fn region_optimal_cost(sb: &Superblock, q: QpValue, level: usize, i: usize, j: usize) -> f64 {
    SearchTable::run(sb, q).best_cost(level, i, j)
}

/// Encodes with a given partition; no search.
pub fn encode_with_tree(
    sb: &Superblock,
    q: QpValue,
    tree: &PartitionTree,
) -> Result<EncodeResult, RdoError> {
    let start = Instant::now();
    let mut recon = Box::new([0u8; SB_PIXELS]);
    let c = encode_tree(sb, q, tree, Some(&mut recon))?;
    Ok(EncodeResult {
        tree: *tree,
        total_rate: c.rate,
        distortion: c.distortion,
        cost: c.cost,
        reconstruction: recon,
        wall_time: start.elapsed().as_secs_f64().max(1e-9),
    })
}

/// Full RDO partition search followed by the final encode.
pub fn rdo_search(sb: &Superblock, q: QpValue) -> EncodeResult {
    let start = Instant::now();
    let table = SearchTable::run(sb, q);
    let tree = table.tree();
    let mut res = encode_with_tree(sb, q, &tree).expect("search trees are consistent");
    debug_assert_eq!(res.cost, table.best_cost(LEVELS - 1, 0, 0));
    res.wall_time = start.elapsed().as_secs_f64().max(1e-9);
    res
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rdosim::{lambda, HEADER_BITS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_sb(seed: u64) -> Superblock {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Superblock::from_fn(|x, y| {
            let base = if x < 20 { 60 } else if y > 40 { 200 } else { 120 };
            (base + rng.random_range(-12i32..=12)) as u8
        })
    }

    #[test]
    fn constant_superblock_is_one_block() {
        for v in [0u8, 37, 128, 255] {
            for q in [8u8, 47, 105, 200] {
                let r = rdo_search(&Superblock::constant(v), QpValue(q));
                assert_eq!(r.tree, PartitionTree::uniform(MergeCode::FullMerge));
                assert_eq!(r.total_rate, HEADER_BITS);
                assert_eq!(r.distortion, 0.0);
            }
        }
    }

    #[test]
    fn vertical_edge_prefers_vertical_structure() {
        let sb = Superblock::from_fn(|x, _| if x < 32 { 40 } else { 210 });
        let q = QpValue(47);
        let r = rdo_search(&sb, q);
        let top = r.tree.get(3, 0, 0);
        assert!(matches!(top, MergeCode::VertMerge | MergeCode::NoMerge), "{top:?}");
        // Compare against each level-3 alternative evaluated directly.
        let table = SearchTable::run(&sb, q);
        let mut alts = Vec::new();
        for code in [MergeCode::FullMerge, MergeCode::HorzMerge, MergeCode::VertMerge] {
            let mut t = PartitionTree::uniform(MergeCode::FullMerge);
            t.set(3, 0, 0, code);
            alts.push(tree_cost(&sb, q, &t).unwrap().cost);
        }
        let mut split = 0.0;
        for (di, dj) in RASTER {
            split += table.best_cost(2, di, dj);
        }
        alts.push(split + lambda(q) * SPLIT_BITS);
        for a in alts {
            assert!(r.cost <= a);
        }
    }

    #[test]
    fn search_beats_fixed_candidates() {
        for seed in 0..10 {
            let sb = noisy_sb(seed);
            let q = QpValue(8 + (seed as u8) * 10);
            let r = rdo_search(&sb, q);
            for code in [MergeCode::FullMerge, MergeCode::NoMerge] {
                let c = tree_cost(&sb, q, &PartitionTree::uniform(code)).unwrap();
                assert!(r.cost <= c.cost);
            }
        }
    }

    #[test]
    fn fixed_tree_encode_reproduces_search() {
        for seed in 0..5 {
            let sb = noisy_sb(seed);
            let q = QpValue(31);
            let r = rdo_search(&sb, q);
            let e = encode_with_tree(&sb, q, &r.tree).unwrap();
            assert_eq!(e.total_rate, r.total_rate);
            assert_eq!(e.reconstruction, r.reconstruction);
            assert_eq!(e.cost, r.cost);
        }
    }

    #[test]
    fn encode_rejects_inconsistent_tree() {
        let mut t = PartitionTree::uniform(MergeCode::FullMerge);
        t.set(1, 0, 0, MergeCode::NoMerge);
        assert!(matches!(
            encode_with_tree(&Superblock::constant(3), QpValue(10), &t),
            Err(RdoError::InconsistentTree)
        ));
    }

    #[test]
    fn flat_tree_on_flat_block_is_lossless() {
        let e = encode_with_tree(
            &Superblock::constant(99),
            QpValue(60),
            &PartitionTree::uniform(MergeCode::FullMerge),
        )
        .unwrap();
        assert_eq!(e.distortion, 0.0);
        assert!(e.reconstruction.iter().all(|&v| v == 99));
    }

    #[test]
    fn search_is_deterministic() {
        let sb = noisy_sb(42);
        let a = rdo_search(&sb, QpValue(50));
        let b = rdo_search(&sb, QpValue(50));
        assert_eq!(a.tree, b.tree);
        assert_eq!(a.total_rate.to_bits(), b.total_rate.to_bits());
        assert_eq!(a.reconstruction, b.reconstruction);
    }
}
