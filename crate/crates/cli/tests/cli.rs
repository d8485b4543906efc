use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qknorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qknorm")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = qknorm(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--d-model", "16", "--num-heads", "2", "--num-layers", "1", "--d-ff", "32",
    "--dropout", "0", "--max-epochs", "2", "--batch-size", "8", "--warmup-steps", "5",
];

fn toy_dir(dir: &Path) {
    let out = dir.to_str().unwrap();
    ok(&[
        "toy-data", "--kind", "copy", "--toy-vocab", "6", "--toy-train", "24", "--toy-dev", "6",
        "--toy-test", "6", "--toy-max-len", "5", "--out", out,
    ]);
}

#[test]
fn toy_data_writes_six_files() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dir(tmp.path());
    for split in ["train", "dev", "test"] {
        let src = fs::read_to_string(tmp.path().join(format!("{split}.src"))).unwrap();
        let tgt = fs::read_to_string(tmp.path().join(format!("{split}.tgt"))).unwrap();
        assert_eq!(src, tgt, "copy task");
        assert!(!src.is_empty());
    }
    assert_eq!(fs::read_to_string(tmp.path().join("train.src")).unwrap().lines().count(), 24);
}

#[test]
fn train_evaluate_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    toy_dir(&data);
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--with-baseline"];
    args.extend_from_slice(TINY);
    let table = ok(&args);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].starts_with("run\tattention\ttest_bleu"));
    assert!(lines[1].starts_with("model\tqknorm\t"));
    assert!(lines[2].starts_with("baseline\tscaled-dot-product\t"));
    for f in ["summary.tsv", "model.steps.tsv", "model.epochs.tsv", "model.test.tsv", "best.ckpt", "baseline.ckpt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let epochs = fs::read_to_string(run.join("model.epochs.tsv")).unwrap();
    assert_eq!(epochs.lines().count(), 3, "{epochs}");

    let ckpt = run.join("best.ckpt");
    let hyp = tmp.path().join("hyp.txt");
    let report = ok(&[
        "evaluate", "--checkpoint", ckpt.to_str().unwrap(),
        "--src", data.join("test.src").to_str().unwrap(),
        "--tgt", data.join("test.tgt").to_str().unwrap(),
        "--against", run.join("baseline.ckpt").to_str().unwrap(),
        "--resamples", "50", "--hyp-out", hyp.to_str().unwrap(),
    ]);
    assert!(report.lines().any(|l| l.starts_with("bleu\t")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("mean_entropy\t")), "{report}");
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 6);

    let attn = tmp.path().join("attn");
    let listed = ok(&[
        "export-attn", "--checkpoint", ckpt.to_str().unwrap(), "--src", "w3 w1 w4",
        "--tgt", "w4 w1 w3", "--out", attn.to_str().unwrap(),
    ]);
    let mut names: Vec<String> = fs::read_dir(&attn)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["layer0_head0.tsv", "layer0_head1.tsv", "manifest.tsv"]);
    assert_eq!(listed.lines().count(), 3);
    let head = fs::read_to_string(attn.join("layer0_head0.tsv")).unwrap();
    for row in head.lines() {
        let s: f64 = row.split('\t').map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9, "{row}");
    }
}

#[test]
fn sweep_prints_one_row_per_variant() {
    let tmp = tempfile::tempdir().unwrap();
    toy_dir(tmp.path());
    let table = ok(&[
        "sweep", "heads", "--data", tmp.path().to_str().unwrap(), "--d-model", "32", "--num-layers", "1",
        "--d-ff", "32", "--max-epochs", "1", "--batch-size", "8",
    ]);
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("heads\tstatus\ttest_bleu"));
    assert_eq!(lines.len(), 6, "{table}");
    for (row, h) in lines[1..].iter().zip(["2", "4", "8", "16", "32"]) {
        assert!(row.starts_with(&format!("{h}\t")), "{row}");
    }
}

#[test]
fn config_file_and_flags_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# tiny\nd-model = 16\nnum-heads = 2\nnum-layers = 1\nd-ff = 32\nmax-epochs = 3\n").unwrap();
    let out = tmp.path().join("out");
    let table = ok(&[
        "train", "--toy", "reverse", "--toy-vocab", "5", "--toy-train", "16", "--toy-dev", "4",
        "--toy-test", "4", "--toy-max-len", "4", "--config", cfg.to_str().unwrap(),
        "--max-epochs", "1", "--attention-mode", "scaled-dot-product", "--out", out.to_str().unwrap(),
    ]);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split('\t').collect();
    assert_eq!(row[1], "scaled-dot-product");
    assert_eq!(row[6], "1", "flag overrides file");
}

#[test]
fn errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: [&[&str]; 4] = [
        &["train"],
        &["train", "--toy", "copy", "--num-heads", "3", "--d-model", "16"],
        &["evaluate", "--checkpoint", "/nonexistent.ckpt", "--src", "a", "--tgt", "b"],
        &["sweep", "nonsense", "--toy", "copy"],
    ];
    for args in cases {
        let out = qknorm(args);
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(!out.stderr.is_empty());
    }
    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "d-model = 16\nno-such-key = 1\n").unwrap();
    let out = qknorm(&["train", "--toy", "copy", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}
