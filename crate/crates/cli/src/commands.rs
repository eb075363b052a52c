use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use partpredict::dataset::procedural::{procedural_corpus, procedural_sequence};
use partpredict::dataset::{extract_superblocks, generate_records, read_dataset, read_pgm, split_records, write_dataset, Frame};
use partpredict::evalbench::{
    accuracy_per_level, compare, inconsistency_rate, majority_baseline, overall_speedup, run_benchmark, speedup_vs_qp,
    write_runs_csv, write_speedup_csv, write_summary_csv, BenchConfig, BenchMode, LabelOracle, PartitionPredictor,
    Sequence,
};
use partpredict::hfcn::{init_params, load_weights, save_weights, train_with, CompiledModel};
use partpredict::parttree::LEVELS;
use partpredict::rdosim::{rdo_search, QpValue};

use crate::config::Config;
use crate::svg::{self, Series};
use crate::CliError;

fn stamp(cfg: &Config) -> Option<String> {
    if cfg.fixed_metadata {
        None
    } else {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        Some(format!("unix {secs}"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_records(path: &Path) -> Result<Vec<partpredict::dataset::SampleRecord>, CliError> {
    if !path.exists() {
        return Err(CliError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        )));
    }
    Ok(read_dataset(path)?)
}

fn load_model(cfg: &Config) -> Result<CompiledModel, CliError> {
    let path = cfg.out(&cfg.model.weights);
    if !path.exists() {
        return Err(CliError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("weights {} not found", path.display()),
        )));
    }
    Ok(CompiledModel::new(&load_weights(&path)?))
}

pub fn dataset(cfg: &Config) -> Result<(), CliError> {
    let d = &cfg.dataset;
    if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
        return Err(CliError::Config(format!("dataset.val_fraction {} not in (0, 1)", d.val_fraction)));
    }
    let frames: Vec<Frame> = if d.frames.is_empty() {
        if d.procedural_frames == 0 {
            return Err(CliError::Config("dataset.procedural_frames must be positive".into()));
        }
        procedural_corpus(d.procedural_frames, d.width, d.height, cfg.seed)
    } else {
        d.frames.iter().map(|p| read_pgm(p)).collect::<Result<_, _>>()?
    };
    let records = generate_records(&frames, &d.sampler()?, cfg.seed)?;
    let (tr, va) = split_records(records, 1.0 - d.val_fraction, cfg.seed.wrapping_add(1))?;
    if tr.is_empty() || va.is_empty() {
        return Err(CliError::Usage(format!(
            "{} train and {} validation records; add frames or change dataset.val_fraction",
            tr.len(),
            va.len()
        )));
    }
    let (tp, vp) = (cfg.out(&d.train_file), cfg.out(&d.val_file));
    write_dataset(&tp, &tr)?;
    write_dataset(&vp, &va)?;
    println!("dataset: {} frames, {} train -> {}, {} val -> {}", frames.len(), tr.len(), tp.display(), va.len(), vp.display());
    Ok(())
}

pub fn train(cfg: &Config) -> Result<(), CliError> {
    let t = &cfg.train;
    if t.log_interval == 0 {
        return Err(CliError::Config("train.log_interval must be positive".into()));
    }
    let tr = read_records(&cfg.out(&cfg.dataset.train_file))?;
    let va = read_records(&cfg.out(&cfg.dataset.val_file))?;
    let params = init_params(&cfg.model.arch(), cfg.seed)?;
    let tc = t.to_train_config(cfg.seed);
    let outcome = train_with(params, &tr, &va, &tc, |s| {
        if s.step % t.log_interval == 0 {
            eprintln!("step {} loss {:.4}", s.step, s.train_loss);
        }
    })?;
    let wp = cfg.out(&cfg.model.weights);
    save_weights(&outcome.params, &wp)?;
    let lp = cfg.out(&t.loss_csv);
    let mut w = csv::Writer::from_writer(create(&lp)?);
    w.write_record(["step", "train_loss", "val_loss"])?;
    let rows = outcome.history.rows(t.log_interval);
    for r in &rows {
        w.write_record([
            r.step.to_string(),
            format!("{:.6}", r.train_loss),
            r.val_loss.map_or_else(String::new, |v| format!("{v:.6}")),
        ])?;
    }
    w.flush()?;
    println!("train: {} steps, {} log rows -> {}, weights -> {}", tc.steps, rows.len(), lp.display(), wp.display());
    Ok(())
}

pub fn eval(cfg: &Config) -> Result<(), CliError> {
    let model = load_model(cfg)?;
    let va = read_records(&cfg.out(&cfg.dataset.val_file))?;
    let acc = accuracy_per_level(&model, &va)?;
    let maj = majority_baseline(&va)?;
    let inc = inconsistency_rate(&model, &va)?;
    let path = cfg.out(Path::new("accuracy.csv"));
    let mut w = csv::Writer::from_writer(create(&path)?);
    w.write_record(["level", "accuracy_pct", "majority_pct", "margin_pp"])?;
    for l in 0..LEVELS {
        w.write_record([
            l.to_string(),
            format!("{:.2}", acc[l]),
            format!("{:.2}", maj[l]),
            format!("{:.2}", acc[l] - maj[l]),
        ])?;
        println!("M{l}: accuracy {:.2}% majority {:.2}%", acc[l], maj[l]);
    }
    w.flush()?;
    println!("inconsistent predictions: {:.2}% of {} samples -> {}", 100.0 * inc, va.len(), path.display());
    Ok(())
}

fn sequences(cfg: &Config) -> Result<Vec<Sequence>, CliError> {
    let b = &cfg.bench;
    if b.sequence_dirs.is_empty() {
        if b.procedural_sequences == 0 || b.frames == 0 {
            return Err(CliError::Config("bench needs at least one procedural sequence and frame".into()));
        }
        return Ok((0..b.procedural_sequences)
            .map(|i| Sequence {
                name: format!("proc{i}"),
                frames: procedural_sequence(b.width, b.height, b.frames, cfg.seed.wrapping_add(1000 + i as u64)),
            })
            .collect());
    }
    b.sequence_dirs
        .iter()
        .map(|dir| {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Usage(format!("no .pgm frames in {}", dir.display())));
            }
            let frames = files.iter().map(|p| read_pgm(p)).collect::<Result<_, _>>()?;
            let name = dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
            Ok(Sequence { name, frames })
        })
        .collect()
}

pub fn bench(cfg: &Config) -> Result<(), CliError> {
    let b = &cfg.bench;
    let modes: Vec<BenchMode> = b
        .modes
        .iter()
        .map(|m| m.parse().map_err(CliError::Config))
        .collect::<Result<_, _>>()?;
    if modes.is_empty() || modes.contains(&BenchMode::RdoBaseline) {
        return Err(CliError::Config("bench.modes lists the modes compared against rdo_baseline".into()));
    }
    let seqs = sequences(cfg)?;
    let bc = BenchConfig {
        qps: b.qp_set.clone(),
        repeats: b.repeats,
        parallel: b.parallel,
    };
    let model: Box<dyn PartitionPredictor> = match b.model.as_str() {
        "hfcn" => Box::new(load_model(cfg)?),
        "oracle" => Box::new(LabelOracle::for_sequences(&seqs, &bc.qps)?),
        other => return Err(CliError::Config(format!("bench.model must be hfcn or oracle, got `{other}`"))),
    };
    let base = run_benchmark(model.as_ref(), &seqs, &bc, BenchMode::RdoBaseline)?;
    let mut all = base.clone();
    let mut summary = Vec::new();
    for &mode in &modes {
        let rep = run_benchmark(model.as_ref(), &seqs, &bc, mode)?;
        let dt = overall_speedup(&base, &rep)?;
        println!("{mode}: dT {dt:.2}% over {} sequences x {} QPs", seqs.len(), bc.qps.len());
        summary.extend(compare(&base, &rep)?);
        if let Ok(rows) = speedup_vs_qp(&base, &rep) {
            write_speedup_csv(create(&cfg.out(Path::new(&format!("bench_speedup_{mode}.csv"))))?, &rows)?;
        }
        all.extend(rep);
    }
    write_runs_csv(create(&cfg.out(Path::new("bench_runs.csv")))?, &all)?;
    let sp = cfg.out(Path::new("bench_summary.csv"));
    write_summary_csv(create(&sp)?, &summary)?;
    for s in &summary {
        let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        println!("{} {} {}x{}: dT {:.2}% BD-rate {}% BD-PSNR {} dB", s.mode, s.sequence, s.width, s.height, s.delta_t, f(s.bd_rate), f(s.bd_psnr));
    }
    println!("bench: summary -> {}", sp.display());
    Ok(())
}

pub fn show_tree(
    cfg: &Config,
    input: &Path,
    qp: u8,
    index: usize,
    weights: Option<&Path>,
    svg_name: &Path,
) -> Result<(), CliError> {
    let frame = read_pgm(input)?;
    let sbs = extract_superblocks(&frame)?;
    let sb = sbs.get(index).ok_or_else(|| {
        CliError::Usage(format!("superblock {index} out of range: {} has {}", input.display(), sbs.len()))
    })?;
    let q = QpValue(qp);
    let truth = rdo_search(sb, q).tree;
    println!("rdo search, q {qp}:\n{truth}");
    let truth_leaves = svg::leaves(&truth);
    let mut panels: Vec<(&str, Vec<_>)> = vec![("rdo search", truth_leaves)];
    if let Some(w) = weights {
        let model = CompiledModel::new(&load_weights(w)?);
        let raw = PartitionPredictor::predict_tree(&model, sb, q);
        let fixed = raw.correct_top_down();
        println!("predicted:\n{raw}");
        if fixed != raw {
            println!("corrected:\n{fixed}");
        }
        panels.push(("predicted", svg::leaves(&fixed)));
    }
    let refs: Vec<(&str, &[_])> = panels.iter().map(|(t, l)| (*t, l.as_slice())).collect();
    let path = cfg.out(svg_name);
    let doc = svg::tree_overlay(sb, &refs, stamp(cfg).as_deref());
    create(&path)?.write_all(doc.as_bytes())?;
    println!("svg -> {}", path.display());
    Ok(())
}

/// Column defaults for the CSVs this tool writes.
fn default_columns(headers: &[String]) -> Option<(String, Vec<String>, Vec<String>)> {
    let has = |c: &str| headers.iter().any(|h| h == c);
    let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    if has("step") && has("train_loss") {
        Some(("step".into(), v(&["train_loss", "val_loss"]), vec![]))
    } else if has("rate_bits") && has("psnr_db") {
        Some(("rate_bits".into(), v(&["psnr_db"]), v(&["sequence", "mode"])))
    } else if has("qp") && has("delta_t_pct") {
        Some(("qp".into(), v(&["delta_t_pct"]), vec![]))
    } else {
        None
    }
}

pub fn plot(
    cfg: &Config,
    input: &Path,
    x: Option<String>,
    y: Option<Vec<String>>,
    series: Option<Vec<String>>,
    svg_name: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut rdr = csv::Reader::from_path(input)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let defaults = default_columns(&headers);
    let x = x
        .or_else(|| defaults.as_ref().map(|d| d.0.clone()))
        .ok_or_else(|| CliError::Usage("cannot infer columns; pass --x and --y".into()))?;
    let ys = y
        .or_else(|| defaults.as_ref().map(|d| d.1.clone()))
        .ok_or_else(|| CliError::Usage("cannot infer columns; pass --x and --y".into()))?;
    let groups = series.or_else(|| defaults.as_ref().map(|d| d.2.clone())).unwrap_or_default();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("no column `{name}` in {}", input.display())))
    };
    let xi = col(&x)?;
    let yi: Vec<usize> = ys.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let gi: Vec<usize> = groups.iter().map(|c| col(c)).collect::<Result<_, _>>()?;
    let mut out: Vec<Series> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<Option<f64>, CliError> {
            let s = rec.get(i).unwrap_or("").trim();
            if s.is_empty() {
                return Ok(None);
            }
            s.parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("row {}: `{s}` is not a number", line + 2)))
        };
        let Some(xv) = num(xi)? else { continue };
        let group: Vec<&str> = gi.iter().map(|&i| rec.get(i).unwrap_or("")).collect();
        for (k, &i) in yi.iter().enumerate() {
            let Some(yv) = num(i)? else { continue };
            let name = match (group.is_empty(), yi.len() > 1) {
                (true, _) => ys[k].clone(),
                (false, false) => group.join(" "),
                (false, true) => format!("{} {}", group.join(" "), ys[k]),
            };
            match out.iter_mut().find(|s| s.name == name) {
                Some(s) => s.points.push((xv, yv)),
                None => out.push(Series { name, points: vec![(xv, yv)] }),
            }
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} has no numeric rows to plot", input.display())));
    }
    let name = svg_name.unwrap_or_else(|| PathBuf::from(input.file_stem().unwrap_or_default()).with_extension("svg"));
    let path = cfg.out(&name);
    let title = input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let doc = svg::line_chart(&title, &x, &ys.join(", "), &out, stamp(cfg).as_deref());
    create(&path)?.write_all(doc.as_bytes())?;
    println!("plot: {} series -> {}", out.len(), path.display());
    Ok(())
}
