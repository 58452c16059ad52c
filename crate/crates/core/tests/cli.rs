use std::path::Path;
use std::process::{Command, Output};

use abacus_core::cli::{read_metrics, DataManifest};
use abacus_core::model::Checkpoint;

fn abacus(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abacus"))
        .args(args)
        .env("ABACUS_OUT_ROOT", dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "model.hidden_size=16",
    "--set",
    "model.intermediate_size=32",
    "--set",
    "model.attention_heads=2",
    "--set",
    "model.abacus_k=3",
    "--set",
    "data.max_first=2",
    "--set",
    "data.max_second=2",
    "--set",
    "eval.max_i=3",
    "--set",
    "eval.max_j=3",
];

fn with<'a>(base: &[&'a str], extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = base.to_vec();
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

fn manifest(dir: &Path) -> DataManifest {
    serde_json::from_slice(&std::fs::read(dir.join("data.manifest.json")).unwrap()).unwrap()
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--set", "data.max_first=3", "--set", "data.max_second=3", "--set", "data.samples=10", "--set", "data.seed=7"];
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out_dir = format!("out_dir=\"{run}\"");
        let mut a = args.to_vec();
        a.extend(["--set", &out_dir]);
        ok(&abacus(tmp.path(), &a));
        let dir = tmp.path().join(run);
        let m = manifest(&dir);
        assert_eq!(m.count, 10);
        assert_eq!(m.seed, 7);
        let text = std::fs::read_to_string(dir.join("data.jsonl")).unwrap();
        assert_eq!(text.lines().count(), 10);
        hashes.push(m.sha256);
    }
    assert_eq!(hashes[0], hashes[1]);

    // The resolved config alone reproduces the run.
    let resolved = tmp.path().join("a").join("gen-data.toml");
    let again = tmp.path().join("again");
    let out_dir = format!("out_dir=\"{}\"", again.display());
    ok(&abacus(tmp.path(), &["gen-data", "--config", resolved.to_str().unwrap(), "--set", &out_dir]));
    assert_eq!(manifest(&again).sha256, hashes[0]);
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = abacus(tmp.path(), &["gen-data", "--set", "data.samples=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data.samples"));

    let out = abacus(tmp.path(), &["gen-data", "--set", "data.colour=3"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rat = 1.0\n").unwrap();
    let out = abacus(tmp.path(), &["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = abacus(tmp.path(), &["train", "--set", "out_dir=\"nodata\""]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset not found"));
}

fn train_args<'a>(out_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    with(
        &["train", "--set", out_dir, "--set", "train.steps=24", "--set", "train.batch_size=8", "--set", "train.learning_rate=3e-3", "--set", "checkpoint_every=8", "--set", "heldout_every=12", "--set", "heldout_samples=8"],
        extra,
    )
}

#[test]
fn train_resumes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    for run in ["fresh", "split"] {
        let od = format!("out_dir=\"{run}\"");
        ok(&abacus(tmp.path(), &with(&["gen-data", "--set", &od, "--set", "data.samples=200"], &[])));
    }
    ok(&abacus(tmp.path(), &train_args("out_dir=\"fresh\"", &[])));
    ok(&abacus(tmp.path(), &train_args("out_dir=\"split\"", &["--until", "10"])));
    let interrupted = read_metrics(&tmp.path().join("split/metrics.jsonl")).unwrap();
    assert_eq!(interrupted.last().unwrap().metrics.step, 10);
    ok(&abacus(tmp.path(), &train_args("out_dir=\"split\"", &[])));

    let fresh = tmp.path().join("fresh");
    let split = tmp.path().join("split");
    let a = Checkpoint::load(&fresh.join("checkpoints/latest.ckpt")).unwrap();
    let b = Checkpoint::load(&split.join("checkpoints/latest.ckpt")).unwrap();
    assert_eq!(a.step, 24);
    assert_eq!(a, b);

    let ma = read_metrics(&fresh.join("metrics.jsonl")).unwrap();
    let mb = read_metrics(&split.join("metrics.jsonl")).unwrap();
    let steps: Vec<u64> = mb.iter().map(|r| r.metrics.step).collect();
    assert_eq!(steps, (1..=24).collect::<Vec<_>>());
    let losses = |m: &[abacus_core::cli::MetricsRecord]| m.iter().map(|r| r.metrics.loss).collect::<Vec<_>>();
    assert_eq!(losses(&ma), losses(&mb));
    assert!(ma.iter().any(|r| r.heldout_exact_match.is_some()));
    assert!(fresh.join("checkpoints/step-00000016.ckpt").exists());
    assert!(fresh.join("train.toml").exists());
    let manifest = std::fs::read_to_string(fresh.join("manifest.json")).unwrap();
    assert!(manifest.contains("metrics.jsonl"));
}

#[test]
fn eval_grid_with_oracle_stub() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("oracle.ckpt");
    Checkpoint::oracle().save(&ck).unwrap();
    let out = ok(&abacus(
        tmp.path(),
        &[
            "eval-grid",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--set",
            "out_dir=\"grid\"",
            "--set",
            "eval.max_i=6",
            "--set",
            "eval.max_j=6",
            "--set",
            "eval.n_per_cell=10",
            "--set",
            "data.max_first=3",
            "--set",
            "data.max_second=3",
            "--set",
            "eval.diagonal=[101, 111, 5]",
        ],
    ));
    assert!(out.contains("ID"));
    let dir = tmp.path().join("grid/eval");
    let csv = std::fs::read_to_string(dir.join("grid.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 36 + 3);
    assert!(rows.iter().all(|r| r.ends_with(",10,10,1.000000")));
    assert!(rows.iter().any(|r| r.starts_with("106,106,OOD_100plus")));

    let decoder = png::Decoder::new(std::fs::File::open(dir.join("grid.png")).unwrap());
    let mut reader = decoder.read_info().unwrap();
    let mut px = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut px).unwrap();
    assert_eq!((info.width, info.height), (48, 48));
    let at = |x: usize, y: usize| &px[(y * 48 + x) * 3..(y * 48 + x) * 3 + 3];
    // Red outline closes at 3 cells of 8 px; everything else is the 1.0 colour.
    assert_eq!(at(23, 10), &[220, 20, 20]);
    assert_eq!(at(10, 23), &[220, 20, 20]);
    assert_eq!(at(30, 30), &[8, 48, 107]);
    assert_eq!(at(10, 10), &[8, 48, 107]);
}

#[test]
fn param_count_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&abacus(tmp.path(), &["param-count", "--paper", "--breakdown"]));
    for label in ["16x1", "8x2", "4x4", "2x8", "1x16"] {
        assert!(out.contains(label), "{out}");
    }
    assert!(out.contains("hidden 1024 intermediate 2048 heads 16"));
    assert_eq!(abacus(tmp.path(), &["param-count", "--depth", "0"]).status.code(), Some(2));
}

#[test]
fn grad_check_passes_and_negative_control_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&abacus(tmp.path(), &with(&["grad-check", "--set", "out_dir=\"gc\"", "--max-elements", "6"], &[])));
    assert!(out.contains("PASS"), "{out}");

    let out = abacus(
        tmp.path(),
        &with(&["grad-check", "--set", "out_dir=\"gc\"", "--max-elements", "6", "--fault", "layers.1.mlp.w_out"], &[]),
    );
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("FAIL"));
    assert!(stdout.contains("worst parameter layers.1.mlp.w_out"), "{stdout}");
    let report = std::fs::read_to_string(tmp.path().join("gc/grad_check.json")).unwrap();
    assert!(report.contains("\"passed\": false"));
}

#[test]
fn inspect_iterations_of_looped_checkpoint() {
    use abacus_core::model::{ArchitectureVariant, Model, ModelConfig};
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("looped.ckpt");
    let m = Model::new(ModelConfig::sized(16, 32, 2), ArchitectureVariant::looped(1, 3), 0).unwrap();
    Checkpoint::of_model(m, 0).save(&ck).unwrap();
    let out = ok(&abacus(tmp.path(), &["inspect-iterations", "--checkpoint", ck.to_str().unwrap(), "--question", "12+21"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "21+12= gold 33");
    assert_eq!(lines.len(), 4);
    assert!(lines[3].starts_with("r=3"));
}
