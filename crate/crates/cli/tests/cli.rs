use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use madygraph::eval::RunManifest;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_madygraph"));
    c.env_remove("MADYGRAPH_CONFIG").env("RUST_LOG", "error");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn fails(dir: &Path, args: &[&str]) -> String {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

#[test]
fn simulate_gaptv_enhance_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "64", "--w", "64", "--b", "8", "--seed", "1", "--out", "sim"]);
    run(p, &["gaptv", "--meas", "sim/meas.tns", "--masks", "sim/masks.tns", "--out", "coarse"]);
    run(p, &["train", "--steps", "0", "--out", "run"]);
    run(
        p,
        &[
            "enhance",
            "--checkpoint",
            "run/checkpoint",
            "--meas",
            "sim/meas.tns",
            "--masks",
            "sim/masks.tns",
            "--coarse",
            "coarse/coarse.tns",
            "--out",
            "fine",
        ],
    );
    let fine = madygraph::tensor::io::load::<f64>(p.join("fine/fine.tns")).unwrap();
    assert_eq!(fine.shape(), [64, 64, 8]);
    for dir in ["sim", "coarse", "run", "fine"] {
        let m = RunManifest::read(&p.join(dir).join("manifest.json")).unwrap();
        assert!(!m.outputs.is_empty());
    }
}

#[test]
fn eval_of_identical_cubes_is_capped() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "16", "--w", "16", "--b", "2", "--out", "sim"]);
    let out = run(p, &["eval", "--pred", "sim/truth.tns", "--truth", "sim/truth.tns", "--out", "rep"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("pred,100.000000,1.000000,100.000000,1.000000"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(p.join("rep/report.json")).unwrap()).unwrap();
    assert_eq!(json["mean"]["fine_psnr"], 100.0);
    assert_eq!(entries(&p.join("rep")), ["manifest.json", "report.csv", "report.json"]);
}

#[test]
fn manifest_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "16", "--w", "16", "--b", "4", "--seed", "9", "--noise", "0.01", "--out", "a"]);
    let m = RunManifest::read(&p.join("a/manifest.json")).unwrap();
    let mut argv: Vec<String> = m.argv[1..].to_vec();
    let at = argv.iter().position(|a| a == "--out").unwrap();
    argv[at + 1] = "b".into();
    let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
    run(p, &argv);
    for f in ["truth.tns", "masks.tns", "meas.tns"] {
        assert_eq!(fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn errors_exit_nonzero_without_partial_output() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "16", "--w", "16", "--b", "2", "--out", "sim"]);
    run(p, &["simulate", "--h", "12", "--w", "12", "--b", "2", "--out", "small"]);
    let before = entries(p);

    fails(p, &["gaptv", "--meas", "sim/meas.tns", "--masks", "sim/masks.tns", "--out", "x", "--bogus"]);
    let msg = fails(p, &["gaptv", "--meas", "missing.tns", "--masks", "sim/masks.tns", "--out", "x"]);
    assert!(msg.contains("missing.tns"), "{msg}");
    fails(p, &["gaptv", "--meas", "sim/meas.tns", "--masks", "small/masks.tns", "--out", "x"]);
    fails(p, &["eval", "--pred", "sim/truth.tns", "--truth", "small/truth.tns", "--out", "x"]);
    fs::write(p.join("bad.cfg"), "nonsense_key = 1\n").unwrap();
    fails(p, &["gaptv", "--config", "bad.cfg", "--meas", "sim/meas.tns", "--masks", "sim/masks.tns", "--out", "x"]);

    let mut expected = [before, vec!["bad.cfg".to_string()]].concat();
    expected.sort();
    assert_eq!(entries(p), expected);
}

#[test]
fn environment_overrides_config_path() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "16", "--w", "16", "--b", "2", "--out", "sim"]);
    fs::write(p.join("bad.cfg"), "nonsense_key = 1\n").unwrap();
    fs::write(p.join("good.cfg"), "gaptv_iterations = 3\n").unwrap();
    let out = bin()
        .current_dir(p)
        .env("MADYGRAPH_CONFIG", "good.cfg")
        .args(["gaptv", "--config", "bad.cfg", "--meas", "sim/meas.tns", "--masks", "sim/masks.tns", "--out", "g"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace = fs::read_to_string(p.join("g/trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 4);
}

#[test]
fn dump_graph_filters_by_weight() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "32", "--w", "32", "--b", "8", "--seed", "3", "--out", "sim"]);
    run(p, &["gaptv", "--meas", "sim/meas.tns", "--masks", "sim/masks.tns", "--out", "c"]);
    fs::write(p.join("t.cfg"), "crop = 32\nsteps = 0\n").unwrap();
    run(p, &["train", "--config", "t.cfg", "--out", "run"]);
    let base = [
        "dump-graph",
        "--checkpoint",
        "run/checkpoint",
        "--meas",
        "sim/meas.tns",
        "--masks",
        "sim/masks.tns",
        "--coarse",
        "c/coarse.tns",
        "--query",
        "5,7,2",
    ];
    run(p, &[&base[..], &["--out", "all"]].concat());
    run(p, &[&base[..], &["--min-weight", "0.2", "--out", "strong"]].concat());
    let rows = |dir: &str| -> Vec<Vec<String>> {
        fs::read_to_string(p.join(dir).join("graph.csv"))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(str::to_string).collect())
            .collect()
    };
    let all = rows("all");
    assert_eq!(all.len(), 8 * 27);
    let total: f64 = all.iter().map(|r| r[8].parse::<f64>().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-5, "{total}");
    let strong: Vec<_> = all.iter().filter(|r| r[8].parse::<f64>().unwrap() > 0.2).cloned().collect();
    assert_eq!(rows("strong"), strong);
    assert!(all.iter().all(|r| r[0] == "5" && r[1] == "7" && r[2] == "2"));
}

#[test]
fn export_frames_and_flow() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    run(p, &["simulate", "--h", "32", "--w", "32", "--b", "3", "--out", "sim"]);
    run(p, &["export-frames", "--video", "sim/truth.tns", "--format", "pgm", "--out", "f"]);
    assert_eq!(entries(&p.join("f/frames")), ["frame_000.pgm", "frame_001.pgm", "frame_002.pgm"]);
    run(p, &["flow", "--video", "sim/truth.tns", "--png", "--out", "fl"]);
    assert_eq!(entries(&p.join("fl")), ["flow.tns", "flow_000.png", "flow_001.png", "flow_002.png", "manifest.json"]);
}
