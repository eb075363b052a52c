//! Prediction accuracy, encoder speedup and Bjontegaard metrics.

mod bd;
mod bench;

use std::cell::RefCell;
use std::collections::HashMap;

use thiserror::Error;

use crate::dataset::{DatasetError, SampleRecord};
use crate::hfcn::{self, CompiledModel, HfcnError, ModelParams, Workspace};
use crate::parttree::{PartitionTree, LEVELS};
use crate::rdosim::{rdo_search, QpValue, RdoError, Superblock, SB_PIXELS};

pub use bd::{bd_psnr, bd_rate, RdCurve};
pub use bench::{
    compare, overall_speedup, run_benchmark, speedup_vs_qp, write_runs_csv, write_speedup_csv,
    write_summary_csv, BenchConfig, BenchMode, QpRun, QpSpeedup, RunReport, Sequence, SequenceSummary,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("baseline time must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("need at least {needed} points, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("curves do not overlap")]
    NoOverlap,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid curve: {0}")]
    BadCurve(String),
    #[error(transparent)]
    Rdo(#[from] RdoError),
    #[error(transparent)]
    Hfcn(#[from] HfcnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Anything that proposes a raw (uncorrected) partition tree.
pub trait PartitionPredictor: Sync {
    fn predict_tree(&self, sb: &Superblock, q: QpValue) -> PartitionTree;
}

impl PartitionPredictor for ModelParams {
    fn predict_tree(&self, sb: &Superblock, q: QpValue) -> PartitionTree {
        hfcn::predict_tree(self, sb, q)
    }
}

thread_local! {
    static WORKSPACE: RefCell<Workspace> = RefCell::new(Workspace::default());
}

impl PartitionPredictor for CompiledModel {
    fn predict_tree(&self, sb: &Superblock, q: QpValue) -> PartitionTree {
        WORKSPACE.with(|ws| CompiledModel::predict_tree(self, &mut ws.borrow_mut(), sb, q))
    }
}

/// Returns the same tree for every input.
#[derive(Debug, Clone)]
pub struct ConstantPredictor(pub PartitionTree);

impl PartitionPredictor for ConstantPredictor {
    fn predict_tree(&self, _: &Superblock, _: QpValue) -> PartitionTree {
        self.0
    }
}

/// Looks up precomputed RDO labels by superblock content and QP. Unknown
/// inputs fall back to a live search.
#[derive(Debug, Default, Clone)]
pub struct LabelOracle {
    labels: HashMap<(u8, Box<[u8; SB_PIXELS]>), PartitionTree>,
}

impl LabelOracle {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        let mut o = LabelOracle::default();
        for r in records {
            o.insert(&r.sb, r.q, r.labels);
        }
        o
    }

    /// Runs the search for every superblock of every sequence at each QP.
    pub fn for_sequences(sequences: &[Sequence], qps: &[u8]) -> Result<Self, EvalError> {
        let mut o = LabelOracle::default();
        for s in sequences {
            for sb in s.superblocks()? {
                for &q in qps {
                    let tree = rdo_search(&sb, QpValue(q)).tree;
                    o.insert(&sb, QpValue(q), tree);
                }
            }
        }
        Ok(o)
    }

    pub fn insert(&mut self, sb: &Superblock, q: QpValue, tree: PartitionTree) {
        self.labels.insert((q.0, Box::new(*sb.pixels())), tree);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl PartitionPredictor for LabelOracle {
    fn predict_tree(&self, sb: &Superblock, q: QpValue) -> PartitionTree {
        match self.labels.get(&(q.0, Box::new(*sb.pixels()))) {
            Some(t) => *t,
            None => rdo_search(sb, q).tree,
        }
    }
}

/// Percentage of matrix elements per level whose predicted code equals the
/// label.
pub fn accuracy_per_level(model: &dyn PartitionPredictor, records: &[SampleRecord]) -> Result<[f64; LEVELS], EvalError> {
    let preds: Vec<PartitionTree> = records.iter().map(|r| model.predict_tree(&r.sb, r.q)).collect();
    accuracy_of(&preds, records)
}

/// [`accuracy_per_level`] for already computed predictions.
pub fn accuracy_of(preds: &[PartitionTree], records: &[SampleRecord]) -> Result<[f64; LEVELS], EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if preds.len() != records.len() {
        return Err(EvalError::InsufficientData(format!(
            "{} predictions for {} records",
            preds.len(),
            records.len()
        )));
    }
    let mut hits = [0usize; LEVELS];
    let mut total = [0usize; LEVELS];
    for (p, r) in preds.iter().zip(records) {
        for l in 0..LEVELS {
            let (a, b) = (p.level(l), r.labels.level(l));
            hits[l] += a.iter().zip(b).filter(|(x, y)| x == y).count();
            total[l] += a.len();
        }
    }
    Ok(std::array::from_fn(|l| 100.0 * hits[l] as f64 / total[l] as f64))
}

/// Accuracy of always predicting each level's most frequent label.
pub fn majority_baseline(records: &[SampleRecord]) -> Result<[f64; LEVELS], EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut counts = [[0usize; 4]; LEVELS];
    for r in records {
        for (l, c) in counts.iter_mut().enumerate() {
            for code in r.labels.level(l) {
                c[code.index()] += 1;
            }
        }
    }
    Ok(std::array::from_fn(|l| {
        let total: usize = counts[l].iter().sum();
        100.0 * *counts[l].iter().max().unwrap() as f64 / total as f64
    }))
}

/// Fraction of predicted trees that fail the consistency check.
pub fn inconsistency_rate(model: &dyn PartitionPredictor, records: &[SampleRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let bad = records
        .iter()
        .filter(|r| !model.predict_tree(&r.sb, r.q).is_consistent())
        .count();
    Ok(bad as f64 / records.len() as f64)
}

/// Percentage encoding-time reduction relative to the baseline.
pub fn speedup(t_rdo: f64, t_hfcn: f64) -> Result<f64, EvalError> {
    if !(t_rdo > 0.0) {
        return Err(EvalError::NonPositiveBaseline(t_rdo));
    }
    Ok((t_rdo - t_hfcn) / t_rdo * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parttree::MergeCode;

    fn records(n: usize) -> Vec<SampleRecord> {
        (0..n)
            .map(|i| {
                let sb = Superblock::from_fn(|x, y| ((x * (i + 1) + y * 7) % 256) as u8);
                let q = QpValue(20 + i as u8);
                let labels = rdo_search(&sb, q).tree;
                SampleRecord { sb, q, labels }
            })
            .collect()
    }

    #[test]
    fn oracle_is_exact() {
        let recs = records(4);
        let o = LabelOracle::from_records(&recs);
        assert_eq!(o.len(), 4);
        assert_eq!(accuracy_per_level(&o, &recs).unwrap(), [100.0; 4]);
        assert_eq!(inconsistency_rate(&o, &recs).unwrap(), 0.0);
    }

    #[test]
    fn constant_model_scores_its_class_share() {
        // Ten records; level 0 labels are 40% Full.
        let mut recs = records(10);
        for (i, r) in recs.iter_mut().enumerate() {
            let code = if i < 4 { MergeCode::FullMerge } else { MergeCode::NoMerge };
            for y in 0..8 {
                for x in 0..8 {
                    r.labels.set(0, y, x, code);
                }
            }
        }
        let model = ConstantPredictor(PartitionTree::uniform(MergeCode::FullMerge));
        let acc = accuracy_per_level(&model, &recs).unwrap();
        assert!((acc[0] - 40.0).abs() < 1e-12);
        assert!((majority_baseline(&recs).unwrap()[0] - 60.0).abs() < 1e-12);
    }

    #[test]
    fn inconsistency_counts_failing_trees() {
        let recs = records(3);
        let mut bad = PartitionTree::uniform(MergeCode::FullMerge);
        bad.set(2, 0, 0, MergeCode::NoMerge);
        assert_eq!(inconsistency_rate(&ConstantPredictor(bad), &recs).unwrap(), 1.0);
        let good = PartitionTree::uniform(MergeCode::NoMerge);
        assert_eq!(inconsistency_rate(&ConstantPredictor(good), &recs).unwrap(), 0.0);
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let model = ConstantPredictor(PartitionTree::uniform(MergeCode::FullMerge));
        assert!(matches!(accuracy_per_level(&model, &[]), Err(EvalError::EmptyDataset)));
        assert!(matches!(majority_baseline(&[]), Err(EvalError::EmptyDataset)));
        assert!(matches!(inconsistency_rate(&model, &[]), Err(EvalError::EmptyDataset)));
    }

    #[test]
    fn speedup_formula() {
        assert!((speedup(100.0, 30.3).unwrap() - 69.7).abs() < 1e-12);
        assert_eq!(speedup(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(speedup(50.0, 100.0).unwrap(), -100.0);
        assert_eq!(speedup(8.0, 2.0).unwrap(), 75.0);
        assert!(matches!(speedup(0.0, 1.0), Err(EvalError::NonPositiveBaseline(_))));
        assert!(matches!(speedup(f64::NAN, 1.0), Err(EvalError::NonPositiveBaseline(_))));
    }
}
