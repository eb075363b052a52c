use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use super::bd::{bd_psnr, bd_rate, RdCurve};
use super::{speedup, EvalError, PartitionPredictor};
use crate::dataset::{extract_superblocks, Frame};
use crate::rdosim::{encode_with_tree, psnr_from_sse, rdo_search, QpValue, Superblock, SB_PIXELS};

/// A named clip of equally sized frames.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn superblocks(&self) -> Result<Vec<Superblock>, EvalError> {
        let mut out = Vec::new();
        for f in &self.frames {
            out.extend(extract_superblocks(f)?);
        }
        Ok(out)
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.width, f.height))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMode {
    RdoBaseline,
    Hfcn,
    /// Inconsistent predictions are re-decided by the full search.
    HfcnRdoFallback,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::RdoBaseline, BenchMode::Hfcn, BenchMode::HfcnRdoFallback];

    pub fn as_str(self) -> &'static str {
        match self {
            BenchMode::RdoBaseline => "rdo_baseline",
            BenchMode::Hfcn => "hfcn",
            BenchMode::HfcnRdoFallback => "hfcn_rdo_fallback",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BenchMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode `{s}` (expected rdo_baseline, hfcn or hfcn_rdo_fallback)"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub qps: Vec<u8>,
    /// Each (sequence, QP) encode is timed this many times; the median is
    /// reported.
    pub repeats: usize,
    /// Fan (sequence, QP) jobs out over the rayon pool. Timings are only
    /// meaningful with this off.
    pub parallel: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            qps: vec![15, 31, 47, 70, 99],
            repeats: 3,
            parallel: false,
        }
    }
}

/// One sequence encoded at one QP.
#[derive(Debug, Clone, PartialEq)]
pub struct QpRun {
    pub qp: u8,
    /// Sum of the simulator's rate over all superblocks, in bits.
    pub rate: f64,
    pub psnr: f64,
    /// Median wall time over the repeats, in seconds.
    pub wall_time: f64,
    pub superblocks: usize,
    /// Predicted trees that failed the consistency check.
    pub inconsistent: usize,
    /// Superblocks handed to the full search in fallback mode.
    pub rdo_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub sequence: String,
    pub width: usize,
    pub height: usize,
    pub mode: BenchMode,
    /// Ascending QP order.
    pub runs: Vec<QpRun>,
}

impl RunReport {
    pub fn total_time(&self) -> f64 {
        self.runs.iter().map(|r| r.wall_time).sum()
    }

    pub fn curve(&self) -> Result<RdCurve, EvalError> {
        RdCurve::new(self.runs.iter().map(|r| (r.rate, r.psnr)).collect())
    }

    pub fn inconsistency_rate(&self) -> f64 {
        let total: usize = self.runs.iter().map(|r| r.superblocks).sum();
        let bad: usize = self.runs.iter().map(|r| r.inconsistent).sum();
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }
}

struct PassResult {
    rate: f64,
    sse: f64,
    inconsistent: usize,
    rdo_fallbacks: usize,
    wall_time: f64,
}

fn encode_pass(model: &dyn PartitionPredictor, sbs: &[Superblock], q: QpValue, mode: BenchMode) -> Result<PassResult, EvalError> {
    let mut out = PassResult {
        rate: 0.0,
        sse: 0.0,
        inconsistent: 0,
        rdo_fallbacks: 0,
        wall_time: 0.0,
    };
    let start = Instant::now();
    for sb in sbs {
        let res = match mode {
            BenchMode::RdoBaseline => rdo_search(sb, q),
            BenchMode::Hfcn => {
                let tree = model.predict_tree(sb, q);
                if !tree.is_consistent() {
                    out.inconsistent += 1;
                }
                encode_with_tree(sb, q, &tree.correct_top_down())?
            }
            BenchMode::HfcnRdoFallback => {
                let tree = model.predict_tree(sb, q);
                if tree.is_consistent() {
                    encode_with_tree(sb, q, &tree)?
                } else {
                    out.inconsistent += 1;
                    out.rdo_fallbacks += 1;
                    rdo_search(sb, q)
                }
            }
        };
        out.rate += res.total_rate;
        out.sse += sb
            .pixels()
            .iter()
            .zip(res.reconstruction.iter())
            .map(|(&a, &b)| {
                let d = a as i32 - b as i32;
                (d * d) as f64
            })
            .sum::<f64>();
    }
    out.wall_time = start.elapsed().as_secs_f64();
    Ok(out)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Encodes every superblock of every sequence at each QP under `mode`.
pub fn run_benchmark(
    model: &dyn PartitionPredictor,
    sequences: &[Sequence],
    cfg: &BenchConfig,
    mode: BenchMode,
) -> Result<Vec<RunReport>, EvalError> {
    if sequences.is_empty() || cfg.qps.is_empty() {
        return Err(EvalError::InsufficientData("need at least one sequence and one QP".into()));
    }
    if cfg.repeats == 0 {
        return Err(EvalError::InsufficientData("repeats must be at least 1".into()));
    }
    let mut qps = cfg.qps.clone();
    qps.sort_unstable();
    qps.dedup();
    let sbs: Vec<Vec<Superblock>> = sequences.iter().map(|s| s.superblocks()).collect::<Result<_, _>>()?;
    let jobs: Vec<(usize, u8)> = (0..sequences.len())
        .flat_map(|s| qps.iter().map(move |&q| (s, q)))
        .collect();
    let run = |&(s, q): &(usize, u8)| -> Result<QpRun, EvalError> {
        let sb = &sbs[s];
        let first = encode_pass(model, sb, QpValue(q), mode)?;
        let mut times = vec![first.wall_time];
        for _ in 1..cfg.repeats {
            times.push(encode_pass(model, sb, QpValue(q), mode)?.wall_time);
        }
        Ok(QpRun {
            qp: q,
            rate: first.rate,
            psnr: psnr_from_sse(first.sse, sb.len() * SB_PIXELS),
            wall_time: median(times),
            superblocks: sb.len(),
            inconsistent: first.inconsistent,
            rdo_fallbacks: first.rdo_fallbacks,
        })
    };
    let runs: Vec<QpRun> = if cfg.parallel {
        jobs.par_iter().map(run).collect::<Result<_, _>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_, _>>()?
    };
    let mut runs = runs.into_iter();
    Ok(sequences
        .iter()
        .map(|seq| {
            let (width, height) = seq.resolution();
            RunReport {
                sequence: seq.name.clone(),
                width,
                height,
                mode,
                runs: runs.by_ref().take(qps.len()).collect(),
            }
        })
        .collect())
}

/// Per-sequence comparison against the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSummary {
    pub sequence: String,
    pub width: usize,
    pub height: usize,
    pub mode: BenchMode,
    /// Encoding-time reduction over all QPs jointly, in percent.
    pub delta_t: f64,
    /// `None` when the curves have too few points or do not overlap.
    pub bd_rate: Option<f64>,
    pub bd_psnr: Option<f64>,
    pub inconsistency_rate: f64,
}

fn same_qps(a: &RunReport, b: &RunReport) -> bool {
    a.runs.len() == b.runs.len() && a.runs.iter().zip(&b.runs).all(|(x, y)| x.qp == y.qp)
}

fn optional(r: Result<f64, EvalError>) -> Result<Option<f64>, EvalError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(EvalError::InsufficientPoints { .. } | EvalError::NoOverlap) => Ok(None),
        Err(e) => Err(e),
    }
}

fn matching<'a>(baseline: &'a [RunReport], t: &RunReport) -> Result<&'a RunReport, EvalError> {
    let b = baseline
        .iter()
        .find(|b| b.sequence == t.sequence)
        .ok_or_else(|| EvalError::InsufficientData(format!("no baseline for sequence {}", t.sequence)))?;
    if !same_qps(b, t) {
        return Err(EvalError::InsufficientData(format!(
            "QP sets differ for sequence {}",
            t.sequence
        )));
    }
    Ok(b)
}

pub fn compare(baseline: &[RunReport], test: &[RunReport]) -> Result<Vec<SequenceSummary>, EvalError> {
    test.iter()
        .map(|t| {
            let b = matching(baseline, t)?;
            let (anchor, curve) = (b.curve()?, t.curve()?);
            Ok(SequenceSummary {
                sequence: t.sequence.clone(),
                width: t.width,
                height: t.height,
                mode: t.mode,
                delta_t: speedup(b.total_time(), t.total_time())?,
                bd_rate: optional(bd_rate(&anchor, &curve))?,
                bd_psnr: optional(bd_psnr(&anchor, &curve))?,
                inconsistency_rate: t.inconsistency_rate(),
            })
        })
        .collect()
}

/// Time reduction with times summed over every sequence and QP.
pub fn overall_speedup(baseline: &[RunReport], test: &[RunReport]) -> Result<f64, EvalError> {
    for t in test {
        matching(baseline, t)?;
    }
    let tb: f64 = baseline
        .iter()
        .filter(|b| test.iter().any(|t| t.sequence == b.sequence))
        .map(RunReport::total_time)
        .sum();
    speedup(tb, test.iter().map(RunReport::total_time).sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSpeedup {
    pub qp: u8,
    pub t_baseline: f64,
    pub t_test: f64,
    pub delta_t: f64,
}

/// Time reduction per QP, summed over sequences, ascending by QP.
pub fn speedup_vs_qp(baseline: &[RunReport], test: &[RunReport]) -> Result<Vec<QpSpeedup>, EvalError> {
    let mut qps: Vec<u8> = test.iter().flat_map(|r| r.runs.iter().map(|x| x.qp)).collect();
    qps.sort_unstable();
    qps.dedup();
    if qps.len() < 2 {
        return Err(EvalError::InsufficientData(format!("{} QP values, need at least 2", qps.len())));
    }
    for t in test {
        matching(baseline, t)?;
    }
    let time_at = |reports: &[RunReport], q: u8| -> f64 {
        reports
            .iter()
            .filter(|r| test.iter().any(|t| t.sequence == r.sequence))
            .flat_map(|r| r.runs.iter().filter(move |x| x.qp == q))
            .map(|x| x.wall_time)
            .sum()
    };
    qps.into_iter()
        .map(|qp| {
            let (t_baseline, t_test) = (time_at(baseline, qp), time_at(test, qp));
            Ok(QpSpeedup {
                qp,
                t_baseline,
                t_test,
                delta_t: speedup(t_baseline, t_test)?,
            })
        })
        .collect()
}

/// Fixed two-decimal formatting without a negative zero.
fn fixed(v: f64, digits: usize) -> String {
    let s = format!("{v:.digits$}");
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(String::new, |x| fixed(x, digits))
}

pub fn write_summary_csv<W: Write>(out: W, rows: &[SequenceSummary]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sequence", "resolution", "mode", "delta_t_pct", "bd_rate_pct", "bd_psnr_db", "inconsistency_rate"])?;
    for r in rows {
        w.write_record([
            r.sequence.clone(),
            format!("{}x{}", r.width, r.height),
            r.mode.to_string(),
            fixed(r.delta_t, 2),
            opt(r.bd_rate, 2),
            opt(r.bd_psnr, 3),
            fixed(r.inconsistency_rate, 4),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_runs_csv<W: Write>(out: W, reports: &[RunReport]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "sequence",
        "mode",
        "qp",
        "rate_bits",
        "psnr_db",
        "wall_time_s",
        "superblocks",
        "inconsistent",
        "rdo_fallbacks",
    ])?;
    for rep in reports {
        for r in &rep.runs {
            w.write_record([
                rep.sequence.clone(),
                rep.mode.to_string(),
                r.qp.to_string(),
                fixed(r.rate, 1),
                fixed(r.psnr, 4),
                format!("{:.6}", r.wall_time),
                r.superblocks.to_string(),
                r.inconsistent.to_string(),
                r.rdo_fallbacks.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_speedup_csv<W: Write>(out: W, rows: &[QpSpeedup]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["qp", "t_baseline_s", "t_test_s", "delta_t_pct"])?;
    for r in rows {
        w.write_record([
            r.qp.to_string(),
            format!("{:.6}", r.t_baseline),
            format!("{:.6}", r.t_test),
            fixed(r.delta_t, 2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::procedural::procedural_sequence;
    use crate::evalbench::{ConstantPredictor, LabelOracle};
    use crate::parttree::{MergeCode, PartitionTree};

    fn clips() -> Vec<Sequence> {
        (0..2)
            .map(|i| Sequence {
                name: format!("clip{i}"),
                frames: procedural_sequence(128, 64, 1, 40 + i),
            })
            .collect()
    }

    fn cfg() -> BenchConfig {
        BenchConfig {
            repeats: 1,
            ..Default::default()
        }
    }

    #[test]
    fn oracle_matches_baseline_exactly() {
        let seqs = clips();
        let oracle = LabelOracle::for_sequences(&seqs, &cfg().qps).unwrap();
        let base = run_benchmark(&oracle, &seqs, &cfg(), BenchMode::RdoBaseline).unwrap();
        let fast = run_benchmark(&oracle, &seqs, &cfg(), BenchMode::Hfcn).unwrap();
        for (b, f) in base.iter().zip(&fast) {
            for (x, y) in b.runs.iter().zip(&f.runs) {
                assert_eq!((x.rate, x.psnr), (y.rate, y.psnr));
            }
        }
        let summary = compare(&base, &fast).unwrap();
        assert_eq!(summary.len(), 2);
        for s in &summary {
            assert_eq!(s.bd_rate, Some(0.0));
            assert_eq!(s.inconsistency_rate, 0.0);
        }
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &summary).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines().skip(1) {
            assert_eq!(line.split(',').nth(4), Some("0.00"));
        }
    }

    #[test]
    fn fallback_repairs_inconsistent_trees() {
        let seqs = clips();
        let mut bad = PartitionTree::uniform(MergeCode::FullMerge);
        bad.set(2, 1, 1, MergeCode::NoMerge);
        let model = ConstantPredictor(bad);
        let base = run_benchmark(&model, &seqs, &cfg(), BenchMode::RdoBaseline).unwrap();
        let hfcn = run_benchmark(&model, &seqs, &cfg(), BenchMode::Hfcn).unwrap();
        let fb = run_benchmark(&model, &seqs, &cfg(), BenchMode::HfcnRdoFallback).unwrap();
        for (h, f) in hfcn.iter().zip(&fb) {
            assert_eq!(h.inconsistency_rate(), 1.0);
            for (b, r) in base.iter().find(|b| b.sequence == f.sequence).unwrap().runs.iter().zip(&f.runs) {
                assert_eq!(r.rdo_fallbacks, r.superblocks);
                assert_eq!((b.rate, b.psnr), (r.rate, r.psnr));
            }
        }
        let s_h = compare(&base, &hfcn).unwrap();
        let s_f = compare(&base, &fb).unwrap();
        for (h, f) in s_h.iter().zip(&s_f) {
            assert!(f.bd_rate.unwrap() <= h.bd_rate.unwrap() + 1e-9);
        }
    }

    #[test]
    fn qp_table_is_sorted_and_complete() {
        let seqs = clips();
        let model = ConstantPredictor(PartitionTree::uniform(MergeCode::NoMerge));
        let c = BenchConfig {
            qps: vec![99, 15, 47, 31, 70],
            ..cfg()
        };
        let base = run_benchmark(&model, &seqs, &c, BenchMode::RdoBaseline).unwrap();
        let test = run_benchmark(&model, &seqs, &c, BenchMode::Hfcn).unwrap();
        let rows = speedup_vs_qp(&base, &test).unwrap();
        assert_eq!(rows.iter().map(|r| r.qp).collect::<Vec<_>>(), vec![15, 31, 47, 70, 99]);
        let same = speedup_vs_qp(&base, &base).unwrap();
        assert!(same.iter().all(|r| r.delta_t == 0.0));
        let one = BenchConfig { qps: vec![47], ..cfg() };
        let b1 = run_benchmark(&model, &seqs, &one, BenchMode::RdoBaseline).unwrap();
        assert!(matches!(speedup_vs_qp(&b1, &b1), Err(EvalError::InsufficientData(_))));
        let s = compare(&b1, &b1).unwrap();
        assert_eq!(s[0].bd_rate, None);
    }

    #[test]
    fn mismatched_qp_sets_are_rejected() {
        let seqs = clips();
        let model = ConstantPredictor(PartitionTree::uniform(MergeCode::NoMerge));
        let a = run_benchmark(&model, &seqs, &BenchConfig { qps: vec![15, 31], ..cfg() }, BenchMode::RdoBaseline).unwrap();
        let b = run_benchmark(&model, &seqs, &BenchConfig { qps: vec![15, 47], ..cfg() }, BenchMode::Hfcn).unwrap();
        assert!(matches!(compare(&a, &b), Err(EvalError::InsufficientData(_))));
    }

    #[test]
    fn parallel_runs_match_serial_metrics() {
        let seqs = clips();
        let model = ConstantPredictor(PartitionTree::uniform(MergeCode::NoMerge));
        let serial = run_benchmark(&model, &seqs, &cfg(), BenchMode::Hfcn).unwrap();
        let par = run_benchmark(&model, &seqs, &BenchConfig { parallel: true, ..cfg() }, BenchMode::Hfcn).unwrap();
        for (a, b) in serial.iter().zip(&par) {
            assert_eq!(a.sequence, b.sequence);
            for (x, y) in a.runs.iter().zip(&b.runs) {
                assert_eq!((x.qp, x.rate, x.psnr), (y.qp, y.rate, y.psnr));
            }
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in BenchMode::ALL {
            assert_eq!(m.as_str().parse::<BenchMode>().unwrap(), m);
        }
        assert!("fast".parse::<BenchMode>().is_err());
        assert_eq!(fixed(-0.0001, 2), "0.00");
        assert_eq!(fixed(-1.5, 2), "-1.50");
    }
}
