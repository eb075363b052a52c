use std::hash::{DefaultHasher, Hash, Hasher};

use super::layers::{
    bn_backward, bn_forward_infer, bn_forward_train, concat_plane, conv_backward, conv_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_inplace, softmax_channels, Act, BnCache,
};
use super::params::{branch_slot, trunk_slot, Gradients, ModelParams};
use super::HfcnError;
use crate::parttree::{level_dim, MergeCode, PartitionTree, CLASSES, LEVELS};
use crate::rdosim::{QpValue, Superblock, SB_SIZE};

/// Probabilities are clamped to this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; activations are cached.
    Train,
    /// Running moments in batch norm.
    Infer,
}

/// Class probabilities for every element of the four merge matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `probs[k]` has `level_dim(k)^2` entries, row-major.
    pub probs: [Vec<[f64; CLASSES]>; LEVELS],
}

impl Prediction {
    pub fn level(&self, level: usize) -> &[[f64; CLASSES]] {
        &self.probs[level]
    }

    /// Per-element argmax; ties go to the lower class index. The result is
    /// not corrected and may be inconsistent.
    pub fn argmax_tree(&self) -> PartitionTree {
        let mut tree = PartitionTree::uniform(MergeCode::NoMerge);
        for level in 0..LEVELS {
            let d = level_dim(level);
            for (pos, p) in self.probs[level].iter().enumerate() {
                let mut best = 0;
                for c in 1..CLASSES {
                    if p[c] > p[best] {
                        best = c;
                    }
                }
                tree.set(level, pos / d, pos % d, MergeCode::ALL[best]);
            }
        }
        tree
    }
}

struct TrunkCache {
    input: Act,
    relu: Act,
    bn: BnCache,
    pool: Option<Vec<u32>>,
}

struct BranchCache {
    relu1: Act,
    bn: BnCache,
    concat: Act,
    relu2: Act,
}

/// Activations of a training-mode forward pass.
pub struct ForwardCache {
    n: usize,
    trunk: Vec<TrunkCache>,
    taps: Vec<Act>,
    branches: Vec<BranchCache>,
    probs: Vec<Act>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.n
    }

    /// Batch `(mean, variance)` of every batch-norm layer, in the order of
    /// [`ModelParams::batch_norms`].
    pub fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.trunk
            .iter()
            .map(|t| &t.bn)
            .chain(self.branches.iter().map(|b| &b.bn))
            .map(|c| (c.mean.as_slice(), c.var.as_slice()))
            .collect()
    }

    /// Fingerprint of the linear region the batch landed in: every ReLU
    /// sign and every pooling choice. Two passes with equal fingerprints
    /// are related by a smooth map, which finite-difference checks need.
    pub fn activation_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let mut signs = |a: &Act| {
            for chunk in a.data.chunks(64) {
                let bits = chunk.iter().enumerate().fold(0u64, |m, (i, &v)| m | ((v > 0.0) as u64) << i);
                h.write_u64(bits);
            }
        };
        for t in &self.trunk {
            signs(&t.relu);
        }
        for b in &self.branches {
            signs(&b.relu1);
            signs(&b.relu2);
        }
        for t in &self.trunk {
            if let Some(idx) = &t.pool {
                idx.hash(&mut h);
            }
        }
        h.finish()
    }
}

fn input_batch<'a>(
    params: &ModelParams,
    samples: impl IntoIterator<Item = (&'a Superblock, QpValue)>,
) -> (Act, Vec<f64>) {
    let mut data = Vec::new();
    let mut qs = Vec::new();
    for (sb, q) in samples {
        data.extend(sb.pixels().iter().map(|&p| p as f64 / 255.0));
        qs.push(q.0 as f64 / params.arch.qp_norm_divisor);
    }
    let x = Act {
        c: 1,
        n: qs.len(),
        h: SB_SIZE,
        w: SB_SIZE,
        data,
    };
    (x, qs)
}

fn run(params: &ModelParams, x: Act, qplane: &[f64], mode: Mode) -> (Vec<Act>, Option<ForwardCache>) {
    let train = mode == Mode::Train;
    let n = x.n;
    let mut trunk = Vec::new();
    let mut taps = Vec::with_capacity(LEVELS);
    let mut cur = x;
    for (l, (conv, bn)) in params.trunk.iter().zip(&params.trunk_bn).enumerate() {
        let mut z = conv_forward(&conv.shape, &conv.weight, &conv.bias, &cur);
        relu_inplace(&mut z);
        let (y, bn_cache) = if train {
            let (y, c) = bn_forward_train(&z, &bn.gamma, &bn.beta);
            (y, Some(c))
        } else {
            let mut y = z.clone();
            bn_forward_infer(&mut y, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var);
            (y, None)
        };
        let (next, pool) = if l % 2 == 1 {
            let (p, idx) = maxpool_forward(&y);
            taps.push(p.clone());
            (p, Some(idx))
        } else {
            (y, None)
        };
        if let Some(bn) = bn_cache {
            trunk.push(TrunkCache {
                input: cur,
                relu: z,
                bn,
                pool,
            });
        }
        cur = next;
    }

    let mut branches = Vec::new();
    let mut probs = Vec::with_capacity(LEVELS);
    for (br, tap) in params.branches.iter().zip(&taps) {
        let mut z1 = conv_forward(&br.first.shape, &br.first.weight, &br.first.bias, tap);
        relu_inplace(&mut z1);
        let bn = &br.first_bn;
        let (y1, bn_cache) = if train {
            let (y, c) = bn_forward_train(&z1, &bn.gamma, &bn.beta);
            (y, Some(c))
        } else {
            let mut y = z1.clone();
            bn_forward_infer(&mut y, &bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var);
            (y, None)
        };
        let u = concat_plane(&y1, qplane);
        let mut r2 = conv_forward(&br.mid.shape, &br.mid.weight, &br.mid.bias, &u);
        relu_inplace(&mut r2);
        let logits = conv_forward(&br.out.shape, &br.out.weight, &br.out.bias, &r2);
        probs.push(softmax_channels(&logits));
        if let Some(bn) = bn_cache {
            branches.push(BranchCache {
                relu1: z1,
                bn,
                concat: u,
                relu2: r2,
            });
        }
    }
    let cache = train.then(|| ForwardCache {
        n,
        trunk,
        taps,
        branches,
        probs: probs.clone(),
    });
    (probs, cache)
}

fn to_predictions(probs: &[Act]) -> Vec<Prediction> {
    let n = probs[0].n;
    (0..n)
        .map(|s| Prediction {
            probs: std::array::from_fn(|level| {
                let a = &probs[level];
                let plane = a.h * a.w;
                let p = a.cols();
                (0..plane)
                    .map(|pos| std::array::from_fn(|c| a.data[c * p + s * plane + pos]))
                    .collect()
            }),
        })
        .collect()
}

/// Batched forward pass. Train mode also returns the activation cache; it
/// never modifies `params` (running moments are updated by the trainer).
pub fn forward_batch<'a>(
    params: &ModelParams,
    samples: impl IntoIterator<Item = (&'a Superblock, QpValue)>,
    mode: Mode,
) -> Result<(Vec<Prediction>, Option<ForwardCache>), HfcnError> {
    let (x, q) = input_batch(params, samples);
    if x.n == 0 {
        return Err(HfcnError::ShapeMismatch("empty batch".into()));
    }
    let (probs, cache) = run(params, x, &q, mode);
    Ok((to_predictions(&probs), cache))
}

pub fn forward(params: &ModelParams, sb: &Superblock, q: QpValue, mode: Mode) -> Prediction {
    let (mut preds, _) = forward_batch(params, [(sb, q)], mode).expect("one sample");
    preds.pop().expect("one prediction")
}

/// Uncorrected argmax tree.
pub fn predict_tree(params: &ModelParams, sb: &Superblock, q: QpValue) -> PartitionTree {
    forward(params, sb, q, Mode::Infer).argmax_tree()
}

/// [`predict_tree`] for many superblocks in one batched pass.
pub fn predict_trees<'a>(
    params: &ModelParams,
    samples: impl IntoIterator<Item = (&'a Superblock, QpValue)>,
) -> Vec<PartitionTree> {
    match forward_batch(params, samples, Mode::Infer) {
        Ok((preds, _)) => preds.iter().map(Prediction::argmax_tree).collect(),
        Err(_) => Vec::new(),
    }
}

fn check_labels(n: usize, labels: &[PartitionTree]) -> Result<(), HfcnError> {
    if n == 0 || labels.len() != n {
        return Err(HfcnError::ShapeMismatch(format!(
            "{n} predictions, {} label trees",
            labels.len()
        )));
    }
    Ok(())
}

/// Summed categorical cross-entropy over the 85 outputs, each averaged
/// over the batch.
pub fn loss(preds: &[Prediction], labels: &[PartitionTree]) -> Result<f64, HfcnError> {
    check_labels(preds.len(), labels)?;
    let n = preds.len() as f64;
    let mut total = 0.0;
    for level in 0..LEVELS {
        for pos in 0..level_dim(level) * level_dim(level) {
            let s: f64 = preds
                .iter()
                .zip(labels)
                .map(|(p, t)| -p.probs[level][pos][t.level(level)[pos].index()].max(PROB_FLOOR).ln())
                .sum();
            total += s / n;
        }
    }
    Ok(total)
}

fn add_into(acc: &mut Act, other: &Act) {
    for (a, b) in acc.data.iter_mut().zip(&other.data) {
        *a += b;
    }
}

/// Exact gradients of [`loss`] for the batch that produced `cache`.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    labels: &[PartitionTree],
) -> Result<Gradients, HfcnError> {
    let n = cache.n;
    check_labels(n, labels)?;
    let mut grads = Gradients::zeros_like(params);
    let mut dtaps = Vec::with_capacity(LEVELS);
    for (b, (br, bc)) in params.branches.iter().zip(&cache.branches).enumerate() {
        let probs = &cache.probs[b];
        let plane = probs.h * probs.w;
        let p = probs.cols();
        let mut dz = probs.clone();
        for (s, tree) in labels.iter().enumerate() {
            let lab = tree.level(b);
            for pos in 0..plane {
                let col = s * plane + pos;
                let y = lab[pos].index();
                if probs.data[y * p + col] < PROB_FLOOR {
                    for c in 0..CLASSES {
                        dz.data[c * p + col] = 0.0;
                    }
                    continue;
                }
                for c in 0..CLASSES {
                    let target = if c == y { 1.0 } else { 0.0 };
                    dz.data[c * p + col] = (probs.data[c * p + col] - target) / n as f64;
                }
            }
        }
        let slot = branch_slot(b);
        let (dw, db, dr2) = conv_backward(&br.out.shape, &br.out.weight, &bc.relu2, &dz, true);
        grads.0[slot + 6] = dw;
        grads.0[slot + 7] = db;
        let mut dr2 = dr2.expect("dx requested");
        relu_backward(&bc.relu2, &mut dr2);
        let (dw, db, du) = conv_backward(&br.mid.shape, &br.mid.weight, &bc.concat, &dr2, true);
        grads.0[slot + 4] = dw;
        grads.0[slot + 5] = db;
        // The appended QP channel is an input; its gradient is dropped.
        let mut du = du.expect("dx requested");
        let keep = bc.relu1.data.len();
        du.data.truncate(keep);
        du.c -= 1;
        let (mut dz1, dg, dbeta) = bn_backward(&bc.bn, &br.first_bn.gamma, &du);
        grads.0[slot + 2] = dg;
        grads.0[slot + 3] = dbeta;
        relu_backward(&bc.relu1, &mut dz1);
        let (dw, db, dtap) =
            conv_backward(&br.first.shape, &br.first.weight, &cache.taps[b], &dz1, true);
        grads.0[slot] = dw;
        grads.0[slot + 1] = db;
        dtaps.push(dtap.expect("dx requested"));
    }

    let mut dnext: Option<Act> = None;
    for l in (0..params.trunk.len()).rev() {
        let tc = &cache.trunk[l];
        let conv = &params.trunk[l];
        let dy = match &tc.pool {
            Some(idx) => {
                let mut g = std::mem::replace(&mut dtaps[l / 2], Act::zeros(0, 0, 0, 0));
                if let Some(d) = &dnext {
                    add_into(&mut g, d);
                }
                maxpool_backward(idx, &g, tc.relu.c, tc.relu.h, tc.relu.w)
            }
            None => dnext.take().expect("unpooled layers feed the next conv"),
        };
        let (mut dz, dg, dbeta) = bn_backward(&tc.bn, &params.trunk_bn[l].gamma, &dy);
        relu_backward(&tc.relu, &mut dz);
        let (dw, db, dx) = conv_backward(&conv.shape, &conv.weight, &tc.input, &dz, l > 0);
        let slot = trunk_slot(l);
        grads.0[slot] = dw;
        grads.0[slot + 1] = db;
        grads.0[slot + 2] = dg;
        grads.0[slot + 3] = dbeta;
        dnext = dx;
    }
    Ok(grads)
}

/// Loss and gradients of a training-mode pass over one batch, plus the
/// cache (for the batch statistics).
pub fn loss_and_gradients<'a>(
    params: &ModelParams,
    samples: impl IntoIterator<Item = (&'a Superblock, QpValue)>,
    labels: &[PartitionTree],
) -> Result<(f64, Gradients, ForwardCache), HfcnError> {
    let (preds, cache) = forward_batch(params, samples, Mode::Train)?;
    let cache = cache.expect("train mode caches");
    let l = loss(&preds, labels)?;
    let g = backward(params, &cache, labels)?;
    Ok((l, g, cache))
}
