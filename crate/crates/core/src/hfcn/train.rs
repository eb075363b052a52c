use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::{forward_batch, loss, loss_and_gradients, Mode};
use super::params::{Gradients, ModelParams};
use super::HfcnError;
use crate::dataset::SampleRecord;
use crate::parttree::PartitionTree;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    /// Validation loss is computed after every `val_interval` steps.
    pub val_interval: usize,
    /// Granularity of the exported loss log.
    pub log_interval: usize,
    /// Seeds the batch order.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Weight of the old value in the batch-norm running moments.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-3,
            steps: 1000,
            val_interval: 1000,
            log_interval: 100,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            bn_momentum: 0.99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossHistory {
    /// Training loss of each step's batch (index = step - 1).
    pub train: Vec<f64>,
    /// `(step, loss)` on the validation set.
    pub val: Vec<(usize, f64)>,
}

impl LossHistory {
    /// One row per `log_interval` steps; the training loss is averaged over
    /// the interval.
    pub fn rows(&self, log_interval: usize) -> Vec<LossRow> {
        let k = log_interval.max(1);
        self.train
            .chunks_exact(k)
            .enumerate()
            .map(|(i, chunk)| {
                let step = (i + 1) * k;
                LossRow {
                    step,
                    train_loss: chunk.iter().sum::<f64>() / k as f64,
                    val_loss: self.val.iter().find(|(s, _)| *s == step).map(|v| v.1),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: LossHistory,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ModelParams) -> Adam {
        let zeros = Gradients::zeros_like(params).0;
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &Gradients, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((w, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..w.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                w[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Infer-mode loss over a whole set, evaluated in chunks.
pub fn evaluate_loss(params: &ModelParams, records: &[SampleRecord]) -> Result<f64, HfcnError> {
    if records.is_empty() {
        return Err(HfcnError::EmptyDataset);
    }
    let mut total = 0.0;
    for chunk in records.chunks(64) {
        let (preds, _) = forward_batch(params, chunk.iter().map(|r| (&r.sb, r.q)), Mode::Infer)?;
        let labels: Vec<PartitionTree> = chunk.iter().map(|r| r.labels.clone()).collect();
        total += loss(&preds, &labels)? * chunk.len() as f64;
    }
    Ok(total / records.len() as f64)
}

/// Progress reported after each step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

pub fn train(
    params: ModelParams,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, HfcnError> {
    train_with(params, train_set, val_set, cfg, |_| {})
}

/// Adam on shuffled mini-batches. Batches are drawn from a per-epoch
/// permutation; a trailing partial batch is skipped.
pub fn train_with(
    mut params: ModelParams,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepInfo),
) -> Result<TrainOutcome, HfcnError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HfcnError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(HfcnError::ShapeMismatch("batch size must be positive".into()));
    }
    let batch = cfg.batch_size.min(train_set.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut adam = Adam::new(&params);
    let mut history = LossHistory::default();
    for step in 1..=cfg.steps {
        if cursor + batch > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let labels: Vec<PartitionTree> = idx.iter().map(|&i| train_set[i].labels.clone()).collect();
        let (l, grads, cache) = loss_and_gradients(
            &params,
            idx.iter().map(|&i| (&train_set[i].sb, train_set[i].q)),
            &labels,
        )?;
        adam.step(&mut params, &grads, cfg);
        let stats = cache.batch_stats();
        for (bn, (mean, var)) in params.batch_norms_mut().into_iter().zip(stats) {
            bn.update_running(mean, var, cfg.bn_momentum);
        }
        history.train.push(l);
        let val_loss = if cfg.val_interval > 0 && step % cfg.val_interval == 0 {
            let v = evaluate_loss(&params, val_set)?;
            history.val.push((step, v));
            Some(v)
        } else {
            None
        };
        on_step(&StepInfo {
            step,
            train_loss: l,
            val_loss,
        });
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::procedural::procedural_corpus;
    use crate::dataset::{generate_records, QpSampler};
    use crate::hfcn::{init_params, ArchSpec};
    use crate::rdosim::{rdo_search, QpValue, Superblock};

    fn small_set(n: usize, seed: u64) -> Vec<SampleRecord> {
        let frames = procedural_corpus(2, 256, 128, seed);
        let sampler = QpSampler::Choice { values: vec![15, 47, 99], count: 1 };
        let mut r = generate_records(&frames, &sampler, seed).unwrap();
        r.truncate(n);
        r
    }

    fn quick(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            learning_rate: lr,
            steps,
            val_interval: 0,
            log_interval: 1,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_freezes_weights() {
        let recs = small_set(16, 3);
        let p0 = init_params(&ArchSpec::default(), 5).unwrap();
        let out = train(p0.clone(), &recs, &recs, &quick(4, 0.0)).unwrap();
        for (a, b) in p0.tensors().iter().zip(out.params.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(out.history.train.len(), 4);
    }

    #[test]
    fn training_lowers_the_loss() {
        let recs = small_set(32, 4);
        let p0 = init_params(&ArchSpec::default(), 6).unwrap();
        let before = evaluate_loss(&p0, &recs).unwrap();
        let out = train(p0, &recs, &recs, &quick(60, 3e-3)).unwrap();
        let after = evaluate_loss(&out.params, &recs).unwrap();
        assert!(after < 0.8 * before, "{before} -> {after}");
        assert!(out.params.all_finite());
    }

    #[test]
    fn tiny_set_is_memorised() {
        let recs = small_set(8, 7);
        let out = train(init_params(&ArchSpec::default(), 8).unwrap(), &recs, &recs, &quick(600, 3e-3)).unwrap();
        let (mut hits, mut total) = (0, 0);
        for r in &recs {
            let t = crate::hfcn::predict_tree(&out.params, &r.sb, r.q);
            for l in 0..4 {
                hits += t.level(l).iter().zip(r.labels.level(l)).filter(|(a, b)| a == b).count();
                total += t.level(l).len();
            }
        }
        let acc = hits as f64 / total as f64;
        assert!(acc >= 0.95, "train accuracy {acc}");
    }

    #[test]
    fn qp_input_steers_the_prediction() {
        // One texture, two QPs with different optimal trees.
        let sb = Superblock::from_fn(|x, y| ((x / 4 * 37 + y / 4 * 91) % 64 + if (x / 16 + y / 16) % 2 == 0 { 40 } else { 160 }) as u8);
        let recs: Vec<SampleRecord> = [8u8, 105]
            .iter()
            .map(|&q| SampleRecord { sb: sb.clone(), q: QpValue(q), labels: rdo_search(&sb, QpValue(q)).tree })
            .collect();
        assert_ne!(recs[0].labels, recs[1].labels);
        let cfg = TrainConfig { batch_size: 2, ..quick(300, 3e-3) };
        let out = train(init_params(&ArchSpec::default(), 9).unwrap(), &recs, &recs, &cfg).unwrap();
        let lo = crate::hfcn::predict_tree(&out.params, &sb, QpValue(8));
        let hi = crate::hfcn::predict_tree(&out.params, &sb, QpValue(105));
        assert_ne!(lo, hi);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let recs = small_set(4, 1);
        let p = init_params(&ArchSpec::default(), 1).unwrap();
        assert!(matches!(train(p.clone(), &[], &recs, &quick(1, 1e-3)), Err(HfcnError::EmptyDataset)));
        assert!(matches!(train(p, &recs, &[], &quick(1, 1e-3)), Err(HfcnError::EmptyDataset)));
    }

    #[test]
    fn rows_average_intervals() {
        let h = LossHistory {
            train: vec![1.0, 3.0, 5.0, 7.0, 9.0],
            val: vec![(4, 0.5)],
        };
        let rows = h.rows(2);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0], LossRow { step: 2, train_loss: 2.0, val_loss: None });
        assert_eq!(rows[1], LossRow { step: 4, train_loss: 6.0, val_loss: Some(0.5) });
    }
}
