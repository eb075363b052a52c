use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_partpredict"));
    c.env_remove("PARTPREDICT_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn partpredict")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Set `UPDATE_GOLDEN=1` to rewrite the expected help texts.
#[test]
fn help_matches_golden() {
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for sub in ["", "dataset", "train", "eval", "bench", "show-tree", "plot"] {
        let args: Vec<&str> = if sub.is_empty() { vec!["--help"] } else { vec![sub, "--help"] };
        let text = ok(&args);
        let name = if sub.is_empty() { "main" } else { sub };
        let path = golden_dir().join(format!("{name}.txt"));
        if update {
            std::fs::write(&path, &text).unwrap();
        }
        let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing {}", path.display()));
        assert_eq!(text, want, "help for `{name}` changed");
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    let text = format!("output_dir = {:?}\nfixed_metadata = true\n{body}", dir.join("out").display().to_string());
    std::fs::write(&p, text).unwrap();
    p
}

const SMALL: &str = r#"
[dataset]
procedural_frames = 1
width = 128
height = 128
qp_sampler = "each"
qp_set = [15, 47, 99]
val_fraction = 0.25

[train]
steps = 6
batch_size = 4
log_interval = 2
val_interval = 3
"#;

#[test]
fn dataset_then_train_writes_one_row_per_interval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let c = cfg.to_str().unwrap();
    ok(&["dataset", "-c", c]);
    ok(&["train", "-c", c]);
    let out = dir.path().join("out");
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "step,train_loss,val_loss");
    assert_eq!(lines.len(), 1 + 6 / 2);
    assert!(lines[1].starts_with("2,") && lines[3].starts_with("6,"));
    assert!(lines[3].split(',').nth(2).is_some_and(|v| !v.is_empty()));

    // Same config, same seeds: identical files.
    let first: Vec<Vec<u8>> = ["train.bin", "val.bin", "loss.csv", "weights.hfcn"]
        .iter()
        .map(|f| std::fs::read(out.join(f)).unwrap())
        .collect();
    ok(&["dataset", "-c", c]);
    ok(&["train", "-c", c]);
    for (f, before) in ["train.bin", "val.bin", "loss.csv", "weights.hfcn"].iter().zip(first) {
        assert_eq!(std::fs::read(out.join(f)).unwrap(), before, "{f} differs on re-run");
    }

    // Flags override the config.
    ok(&["train", "-c", c, "--steps", "9", "--log-interval", "3"]);
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 9 / 3);

    let report = ok(&["eval", "-c", c]);
    assert!(report.contains("M3: accuracy"));
    let acc = std::fs::read_to_string(out.join("accuracy.csv")).unwrap();
    assert_eq!(acc.lines().count(), 1 + 4);

    ok(&["plot", "-c", c, "-i", out.join("loss.csv").to_str().unwrap()]);
    let svg = std::fs::read_to_string(out.join("loss.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="series""#).count(), 2);
    assert!(!svg.contains("<metadata>"));
}

fn write_pgm(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize) -> u8) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            bytes.push(f(x, y));
        }
    }
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn constant_superblock_is_drawn_as_one_cell() {
    let dir = tempfile::tempdir().unwrap();
    let pgm = dir.path().join("flat.pgm");
    write_pgm(&pgm, 64, 64, |_, _| 77);
    let out = dir.path().join("o");
    let text = ok(&["show-tree", "-i", pgm.to_str().unwrap(), "-q", "47", "-o", out.to_str().unwrap(), "--fixed-metadata"]);
    assert!(text.contains("3\n3 3 3 3\n"), "{text}");
    let svg = std::fs::read_to_string(out.join("tree.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="cell""#).count(), 1);
    assert!(svg.contains(r#"data-size="64x64""#));
}

#[test]
fn oracle_bench_has_zero_bd_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[bench]\nmodel = \"oracle\"\nprocedural_sequences = 2\nwidth = 128\nheight = 64\nframes = 1\nrepeats = 1\n",
    );
    ok(&["bench", "-c", cfg.to_str().unwrap()]);
    let out = dir.path().join("out");
    let mut rdr = csv::Reader::from_path(out.join("bench_summary.csv")).unwrap();
    let col = rdr.headers().unwrap().iter().position(|h| h == "bd_rate_pct").unwrap();
    let mut n = 0;
    for r in rdr.records() {
        assert_eq!(&r.unwrap()[col], "0.00");
        n += 1;
    }
    assert_eq!(n, 2 * 2);
    let speed = std::fs::read_to_string(out.join("bench_speedup_hfcn.csv")).unwrap();
    assert_eq!(speed.lines().count(), 1 + 5);
    ok(&["plot", "-c", cfg.to_str().unwrap(), "-i", out.join("bench_runs.csv").to_str().unwrap()]);
    let svg = std::fs::read_to_string(out.join("bench_runs.svg")).unwrap();
    assert_eq!(svg.matches(r#"class="series""#).count(), 2 * 3);
}

fn failure(o: &Output) -> (i32, String) {
    let err = String::from_utf8(o.stderr.clone()).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    (o.status.code().unwrap(), err)
}

#[test]
fn user_errors_exit_one_with_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nsteps = 3\nwarmup = 2\n").unwrap();
    let (code, err) = failure(&run(&["train", "-c", bad.to_str().unwrap()]));
    assert_eq!(code, 1);
    assert!(err.starts_with("error kind=config msg=") && err.contains("warmup"), "{err}");

    let (code, err) = failure(&run(&["eval", "-o", dir.path().to_str().unwrap()]));
    assert_eq!(code, 1);
    assert!(err.starts_with("error kind=io"), "{err}");

    let (code, err) = failure(&run(&["show-tree", "-q", "3"]));
    assert_eq!(code, 1);
    assert!(err.starts_with("error kind=usage"), "{err}");

    let o = bin()
        .args(["dataset", "-o", dir.path().to_str().unwrap()])
        .env("PARTPREDICT_THREADS", "many")
        .output()
        .unwrap();
    let (code, err) = failure(&o);
    assert_eq!(code, 1);
    assert!(err.contains("PARTPREDICT_THREADS"), "{err}");

    let csv = dir.path().join("x.csv");
    std::fs::write(&csv, "a,b\n1,2\n").unwrap();
    let (code, err) = failure(&run(&["plot", "-i", csv.to_str().unwrap(), "-o", dir.path().to_str().unwrap()]));
    assert_eq!(code, 1);
    assert!(err.contains("--x"), "{err}");
    ok(&["plot", "-i", csv.to_str().unwrap(), "-o", dir.path().to_str().unwrap(), "--x", "a", "--y", "b"]);
}
