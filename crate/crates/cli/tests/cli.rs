use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sslsv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sslsv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sslsv(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

const TRAIN_FLAGS: [&str; 12] = [
    "--steps",
    "20",
    "--checkpoint-every",
    "10",
    "--batch-size",
    "8",
    "--crop-frames",
    "50",
    "--embed-dim",
    "8",
    "--lr",
    "1e-3",
];

fn pipeline(root: &Path) {
    ok(
        root,
        &[
            "--seed",
            "3",
            "--out",
            "corpus",
            "gen-synth",
            "--speakers",
            "5",
            "--utts",
            "4",
            "--layers",
            "3",
            "--dim",
            "4",
            "--min-frames",
            "420",
            "--max-frames",
            "580",
        ],
    );
    ok(
        root,
        &[
            "--seed",
            "3",
            "--out",
            "trials",
            "gen-trials",
            "--manifest",
            "corpus/manifest.csv",
        ],
    );
    ok(
        root,
        &[
            "--out",
            "zs",
            "zero-shot",
            "--manifest",
            "corpus/manifest.csv",
            "--trials",
            "trials/trials.txt",
        ],
    );
    let mut train = vec![
        "--seed",
        "3",
        "--out",
        "run",
        "train",
        "--manifest",
        "corpus/manifest.csv",
        "--pooling",
        "attentive_stats",
        "--attention-hidden",
        "4",
    ];
    train.extend(TRAIN_FLAGS);
    ok(root, &train);
    ok(
        root,
        &[
            "--out",
            "eval",
            "eval",
            "--run",
            "run",
            "--manifest",
            "corpus/manifest.csv",
            "--trials",
            "trials/trials.txt",
        ],
    );
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let ta = tree(a.path());
    for name in [
        "eval/report.csv",
        "eval/scores.txt",
        "run/ckpt_20/index.csv",
        "zs/report.csv",
        "run/config.resolved",
    ] {
        assert!(ta.iter().any(|(n, _)| n == name), "missing {name}");
    }
    assert_eq!(ta, tree(b.path()));
}

#[test]
fn noiseless_zero_shot_is_perfect_on_signal_layers() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    ok(
        root,
        &[
            "--out",
            "c",
            "gen-synth",
            "--speakers",
            "4",
            "--utts",
            "3",
            "--layers",
            "3",
            "--dim",
            "4",
            "--min-frames",
            "420",
            "--max-frames",
            "580",
            "--frame-noise",
            "0",
        ],
    );
    ok(
        root,
        &["--out", "t", "gen-trials", "--manifest", "c/manifest.csv"],
    );
    let stdout = ok(
        root,
        &[
            "--out",
            "z",
            "zero-shot",
            "--manifest",
            "c/manifest.csv",
            "--trials",
            "t/trials.txt",
        ],
    );
    assert!(stdout.contains("layer 1: EER 0.00%"), "{stdout}");
    assert!(stdout.contains("layer 2: EER 0.00%"), "{stdout}");
}

#[test]
fn grad_check_reports_small_errors() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["--out", "g", "grad-check", "--instances", "3"]);
    let worst: f64 = stdout
        .lines()
        .last()
        .and_then(|l| l.strip_prefix("max relative error "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(worst <= 1e-5, "{stdout}");
}

#[test]
fn distinct_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    assert_eq!(
        sslsv(root, &["tables", "--no-such-flag"]).status.code(),
        Some(2)
    );
    assert_eq!(
        sslsv(
            root,
            &[
                "zero-shot",
                "--manifest",
                "missing.csv",
                "--trials",
                "t.txt"
            ]
        )
        .status
        .code(),
        Some(3)
    );

    ok(
        root,
        &[
            "--out",
            "c",
            "gen-synth",
            "--speakers",
            "2",
            "--utts",
            "2",
            "--layers",
            "1",
            "--dim",
            "2",
            "--min-frames",
            "420",
            "--max-frames",
            "580",
        ],
    );
    fs::write(root.join("bad.txt"), "2 a b\n").unwrap();
    let out = sslsv(
        root,
        &[
            "zero-shot",
            "--manifest",
            "c/manifest.csv",
            "--trials",
            "bad.txt",
        ],
    );
    assert_eq!(out.status.code(), Some(4));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.contains("line 1"), "{err}");

    // Duration filter leaves nothing: protocol violation.
    let out = sslsv(
        root,
        &[
            "--out",
            "t",
            "gen-trials",
            "--manifest",
            "c/manifest.csv",
            "--min-dur",
            "1",
            "--max-dur",
            "2",
        ],
    );
    assert_eq!(out.status.code(), Some(4));

    let help = String::from_utf8(sslsv(root, &["--help"]).stdout).unwrap();
    for code in ["2  usage", "3  I/O", "4  invalid", "5  numerical"] {
        assert!(help.contains(code), "{help}");
    }
}

#[test]
fn tables_without_ssl_rows_fails_without_output() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    fs::write(
        root.join("only_base.csv"),
        "model,eer_libri,eer_vox\nFBank,7.2,40.4\n",
    )
    .unwrap();
    let out = sslsv(root, &["--out", "o", "tables", "--table1", "only_base.csv"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!root.join("o").exists());
    fs::write(
        root.join("no_base.csv"),
        "model,eer_libri,eer_vox\nA,1,2\nB,2,3\nC,3,1\n",
    )
    .unwrap();
    assert_eq!(
        sslsv(root, &["--out", "o", "tables", "--table1", "no_base.csv"])
            .status
            .code(),
        Some(4)
    );
}

#[test]
fn bundled_table_matches_reference_summary() {
    let d = tempfile::tempdir().unwrap();
    let stdout = ok(d.path(), &["--out", "o", "tables"]);
    assert!(stdout.contains("spearman_rho,p\n0.6608,0.0193"), "{stdout}");
    let deltas = fs::read_to_string(d.path().join("o/table1_delta.csv")).unwrap();
    assert!(
        deltas.contains("HuBERT (base),4.4,38.9,32,20.8"),
        "{deltas}"
    );
    assert!(
        deltas.contains("vq-wav2vec,11.4,-58.3,37.8,6.4"),
        "{deltas}"
    );
}

#[test]
fn config_resolved_replays_a_run() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    pipeline(root);
    ok(
        root,
        &[
            "--config",
            "run/config.resolved",
            "train",
            "--out",
            "replay",
        ],
    );
    let strip = |t: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        t.into_iter()
            .filter(|(n, _)| n != "config.resolved")
            .collect()
    };
    assert_eq!(
        strip(tree(&root.join("run"))),
        strip(tree(&root.join("replay")))
    );

    // A flag typed on the command line beats the file.
    ok(
        root,
        &[
            "--config",
            "run/config.resolved",
            "train",
            "--out",
            "other",
            "--steps",
            "10",
        ],
    );
    let resolved = fs::read_to_string(root.join("other/config.resolved")).unwrap();
    assert!(
        resolved.contains("steps=10\n") && resolved.contains("seed=3\n"),
        "{resolved}"
    );

    let wrong = sslsv(root, &["--config", "run/config.resolved", "eval"]);
    assert_eq!(wrong.status.code(), Some(4));
}

#[test]
fn full_fraction_sweep_equals_plain_training() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    pipeline(root);
    let mut sweep = vec![
        "--seed",
        "3",
        "--out",
        "sweep",
        "data-efficiency",
        "--manifest",
        "corpus/manifest.csv",
        "--trials",
        "trials/trials.txt",
        "--fractions",
        "1.0",
        "--pooling",
        "attentive_stats",
        "--attention-hidden",
        "4",
    ];
    sweep.extend(TRAIN_FLAGS);
    ok(root, &sweep);
    let rows = fs::read_to_string(root.join("sweep/data_efficiency.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2, "{rows}");
    let sweep_eer: f64 = rows
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let report = fs::read_to_string(root.join("eval/report.csv")).unwrap();
    let plain_eer: f64 = report
        .lines()
        .find(|l| l.starts_with("best_eer"))
        .unwrap()
        .rsplit(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(sweep_eer, plain_eer);
    assert_eq!(
        fs::read(root.join("run/ckpt_20/layer_logits.svf")).unwrap(),
        fs::read(root.join("sweep/fraction_1/ckpt_20/layer_logits.svf")).unwrap()
    );
}

#[test]
fn merged_manifests_concatenate_trial_lists() {
    let d = tempfile::tempdir().unwrap();
    let root = d.path();
    for (dir, seed) in [("a", "1"), ("b", "2")] {
        ok(
            root,
            &[
                "--seed",
                seed,
                "--out",
                dir,
                "gen-synth",
                "--speakers",
                "3",
                "--utts",
                "3",
                "--layers",
                "1",
                "--dim",
                "2",
                "--min-frames",
                "420",
                "--max-frames",
                "580",
            ],
        );
    }
    let one = ok(
        root,
        &["--out", "ta", "gen-trials", "--manifest", "a/manifest.csv"],
    );
    let both = ok(
        root,
        &[
            "--out",
            "tab",
            "gen-trials",
            "--manifest",
            "a/manifest.csv",
            "--manifest",
            "b/manifest.csv",
        ],
    );
    assert!(
        one.starts_with("36 trials (9 target, 27 nontarget)"),
        "{one}"
    );
    assert!(
        both.starts_with("72 trials (18 target, 54 nontarget)"),
        "{both}"
    );
}
