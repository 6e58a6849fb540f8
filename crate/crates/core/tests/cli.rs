use std::fs;
use std::path::Path;
use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_panofill");
const TINY: &[&str] = &[
    "--preset",
    "smoke",
    "--data.n",
    "3",
    "--vqgan2.steps",
    "2",
    "--vqgan1.steps",
    "2",
    "--transformer.steps",
    "2",
    "--adjust_train.steps",
    "2",
    "--eval.samples",
    "2",
];

fn run(out: &Path, args: &[&str]) -> std::process::Output {
    let o = Command::new(BIN).env("PANOFILL_OUT", out).args(args).args(TINY).output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn full_flow(out: &Path) {
    run(out, &["synth"]);
    run(out, &["synth", "--dir", "test", "--data.seed", "5"]);
    for cmd in ["train-vqgan2", "train-vqgan1", "train-transformer", "train-adjust"] {
        run(out, &[cmd]);
    }
    let input = out.join("test/00000.png");
    run(out, &["complete", "--input", input.to_str().unwrap(), "--samples", "2", "--trace"]);
    run(out, &["evaluate"]);
}

fn bytes(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn commands_are_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_flow(a.path());
    full_flow(b.path());
    for f in [
        "data/00000.png",
        "data/scenes.txt",
        "bundle.ckpt",
        "logs/transformer.txt",
        "complete/sample_000.png",
        "complete/sample_001.png",
        "complete/sample_001.trace.txt",
        "report.txt",
    ] {
        assert_eq!(bytes(&a.path().join(f)), bytes(&b.path().join(f)), "{f} differs between runs");
    }
    let report = String::from_utf8(bytes(&a.path().join("report.txt"))).unwrap();
    assert!(report.contains("ws_psnr_known.min = inf"));
    assert!(report.contains("diversity.count = 3"));
}

#[test]
fn errors_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let st = |args: &[&str]| Command::new(BIN).env("PANOFILL_OUT", d.path()).args(args).status().unwrap();
    assert!(!st(&["train-vqgan1"]).success());
    assert!(!st(&["train-vqgan2"]).success());
    assert!(!st(&["synth", "--vqgan2.steps"]).success());
    assert!(!st(&["synth", "--train.h", "30"]).success());
    assert!(!st(&["synth", "--sampler.schedule", "zigzag"]).success());
    assert!(!st(&["nonsense"]).success());
    assert!(st(&["synth", "--preset", "smoke", "--data.n", "1"]).success());
}

#[test]
fn config_file_and_flags_combine() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.cfg");
    fs::write(&cfg, "# smoke run\ndata.n = 2\ndata.seed = 4\n").unwrap();
    let o = Command::new(BIN)
        .args(["synth", "--preset", "smoke", "--config", cfg.to_str().unwrap(), "--data.seed=6", "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let side = fs::read_to_string(d.path().join("data/scenes.txt")).unwrap();
    assert_eq!(side.lines().count(), 2);
    let direct = panofill::pipeline::synth_dataset(2, 32, 6).unwrap();
    assert!(side.lines().next().unwrap().ends_with(&direct[0].1.to_line()));
}
