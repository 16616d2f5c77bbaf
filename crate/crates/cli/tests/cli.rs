use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fogseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fogseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: [&str; 8] = [
    "--set",
    "segnet.height=32",
    "--set",
    "segnet.width=64",
    "--set",
    "run.epochs=2",
    "--set",
    "run.batch_size=2",
];

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_data_rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = fogseg(&["synth-data", "--out", out, "--seed", "7", "-n", "3", "--height", "16", "--width", "32"], tmp.path());
        assert!(o.status.success(), "{o:?}");
    }
    let (a, b) = (tree_bytes(&tmp.path().join("a")), tree_bytes(&tmp.path().join("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["bogus"][..], &[], &["eval"], &["synth-data", "--out", "d", "-n", "x"]] {
        let o = fogseg(args, tmp.path());
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(fogseg(&["--help"], tmp.path()).status.code(), Some(0));
}

#[test]
fn runtime_failures_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fogseg(&["eval", "--ckpt", "missing.ckpt", "--manifest", "missing.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(tmp.path().join("bad.cfg"), "[run]\nseed = nope\n").unwrap();
    let o = fogseg(&["train-seg", "--config", "bad.cfg", "--out", "o", "--manifest", "m.txt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn params_report_is_within_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fogseg(&["gradcheck", "--params"], tmp.path());
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.starts_with("params "), "{s}");
}

#[test]
fn pipeline_trains_translates_and_evaluates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let run = |args: &[&str]| {
        let o = fogseg(args, dir);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    run(&["synth-data", "--out", "d", "--seed", "3", "-n", "4", "--height", "32", "--width", "64"]);
    let mut seg = vec!["train-seg", "--manifest", "d/clean.txt", "--out", "seg"];
    seg.extend(TINY);
    run(&seg);
    run(&[
        "train-da", "--set", "transfer.steps=2", "--foggy", "d/hazy.txt", "--clear", "d/clean.txt", "--out", "da",
    ]);
    let mut ft = vec![
        "finetune", "--ckpt", "seg", "--da-ckpt", "da", "--manifest", "d/hazy.txt", "--clear", "d/clean.txt", "--out",
        "ft", "--set", "finetune.epochs=1",
    ];
    ft.extend(TINY);
    run(&ft);

    let s = run(&["eval", "--ckpt", "ft", "--manifest", "d/hazy.txt"]);
    assert!(s.contains("translator on") && s.contains("miou"), "{s}");
    let report = fs::read_to_string(dir.join("ft/report.txt")).unwrap();
    // header, one row per class, three aggregates
    assert_eq!(report.lines().count(), 1 + 19 + 3);
    let again = run(&["eval", "--ckpt", "ft", "--manifest", "d/hazy.txt"]);
    assert_eq!(s, again);
    let off = run(&["eval", "--ckpt", "ft", "--manifest", "d/hazy.txt", "--no-da", "--out", "off"]);
    assert!(off.contains("translator off"));

    run(&["translate", "--ckpt", "da", "d/hazy/rgb_0000.png", "--out", "t.png"]);
    assert!(dir.join("t.png").is_file());
}
