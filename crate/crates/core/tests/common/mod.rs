//! Brute-force reference for the partition search: enumerates every
//! partition of one square region and costs each leaf with the public
//! block coder.

#![allow(dead_code)]

use partpredict::rdosim::{block_rd_cost, Border, lambda, QpValue, Superblock, SB_SIZE, SPLIT_BITS};

#[derive(Debug, Clone)]
pub enum Node {
    Whole,
    Horz,
    Vert,
    /// Raster-ordered quadrants; `None` marks 4x4 leaves below an 8x8 split.
    Split(Vec<Option<Node>>),
}

/// Every partition of a square block of side `size`.
pub fn partitions(size: usize) -> Vec<Node> {
    let mut out = vec![Node::Whole, Node::Horz, Node::Vert];
    if size == 8 {
        out.push(Node::Split(vec![None, None, None, None]));
        return out;
    }
    let sub = partitions(size / 2);
    for a in &sub {
        for b in &sub {
            for c in &sub {
                for d in &sub {
                    out.push(Node::Split(vec![Some(a.clone()), Some(b.clone()), Some(c.clone()), Some(d.clone())]));
                }
            }
        }
    }
    out
}

/// Leaf cost with source neighbours; positions outside the superblock take
/// the superblock mean.
fn leaf(sb: &Superblock, q: QpValue, x: usize, y: usize, w: usize, h: usize) -> f64 {
    let fill = sb.mean();
    let block: Vec<u8> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| sb.at(x + c, y + r)).collect();
    let top: Vec<u8> = (0..w).map(|c| if y > 0 { sb.at(x + c, y - 1) } else { fill }).collect();
    let left: Vec<u8> = (0..h).map(|r| if x > 0 { sb.at(x - 1, y + r) } else { fill }).collect();
    let border = Border {
        top: Some(&top),
        left: Some(&left),
    };
    block_rd_cost(&block, &border, w, h, q).unwrap().cost
}

pub fn cost(sb: &Superblock, q: QpValue, node: &Node, x: usize, y: usize, size: usize) -> f64 {
    let half = size / 2;
    match node {
        Node::Whole => leaf(sb, q, x, y, size, size),
        Node::Horz => leaf(sb, q, x, y, size, half) + leaf(sb, q, x, y + half, size, half),
        Node::Vert => leaf(sb, q, x, y, half, size) + leaf(sb, q, x + half, y, half, size),
        Node::Split(kids) => {
            let mut sum = 0.0;
            for (k, kid) in kids.iter().enumerate() {
                let (cx, cy) = (x + (k % 2) * half, y + (k / 2) * half);
                sum += match kid {
                    Some(n) => cost(sb, q, n, cx, cy, half),
                    None => leaf(sb, q, cx, cy, half, half),
                };
            }
            sum + lambda(q) * SPLIT_BITS
        }
    }
}

/// Minimum over all partitions of the `size` block at `(x, y)`.
pub fn brute_force_cost(sb: &Superblock, q: QpValue, x: usize, y: usize, size: usize) -> f64 {
    assert!(x + size <= SB_SIZE && y + size <= SB_SIZE);
    partitions(size)
        .iter()
        .map(|n| cost(sb, q, n, x, y, size))
        .fold(f64::INFINITY, f64::min)
}
