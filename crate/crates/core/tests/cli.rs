use std::path::Path;
use std::process::{Command, Output};

use xvden::eval::{Bucket, BucketReport, EvalReport, REPORT_SCHEMA_VERSION};

fn xvden(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xvden"))
        .args(args)
        .current_dir(cwd)
        .env_remove("XVDEN_LOG")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) {
    let out = xvden(args, cwd);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const SMALL: &str = "\
dim = 8
n_speakers = 20
utts_per_speaker = 4
n_dev_speakers = 4
n_test_speakers = 8
test_utts_per_speaker = 6
enroll_per_speaker = 2
n_noise_prototypes_train = 6
n_noise_prototypes_unseen = 3
noise_rank = 2
epochs = 3
hidden = 12
batch = 8
snr_grid = [0.0, 10.0]
";

fn report(overall: f64, eers: &[f64; 7]) -> EvalReport {
    EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        overall_eer: overall,
        overall_threshold: 0.0,
        n_target: 10,
        n_nontarget: 90,
        buckets: Bucket::ALL
            .iter()
            .zip(eers)
            .map(|(&bucket, &eer)| BucketReport {
                bucket,
                n_target: 1,
                n_nontarget: 9,
                eer: Some(eer),
                threshold: Some(0.0),
            })
            .collect(),
        unbucketed: 0,
        det_points: Vec::new(),
    }
}

#[test]
fn report_gives_reference_improvements() {
    let dir = tempfile::tempdir().unwrap();
    let noisy = report(8.0, &[15.94, 12.88, 10.5, 7.836, 8.889, 6.667, 5.131]);
    let stacked = report(6.0, &[13.04, 10.46, 8.011, 5.224, 5.333, 3.59, 2.502]);
    std::fs::write(dir.path().join("noisy.json"), noisy.to_json().unwrap()).unwrap();
    std::fs::write(dir.path().join("stacked.json"), stacked.to_json().unwrap()).unwrap();
    ok(
        &[
            "report",
            "--baseline",
            "noisy.json",
            "--system",
            "stacked.json",
            "--out",
            "r.tsv",
        ],
        dir.path(),
    );
    let text = std::fs::read_to_string(dir.path().join("r.tsv")).unwrap();
    let pct: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit('\t').next().unwrap())
        .collect();
    assert_eq!(
        pct,
        ["18.19", "18.79", "23.70", "33.33", "40.00", "46.15", "51.24", "25.00"]
    );
}

#[test]
fn empty_scores_fail_with_category() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.tsv"), "").unwrap();
    std::fs::write(dir.path().join("l.tsv"), "").unwrap();
    let out = xvden(
        &[
            "eval", "--scores", "s.tsv", "--labels", "l.tsv", "--out", "r.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: empty-input: "), "{err}");
    assert_eq!(err.lines().count(), 1);
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        xvden(&["eval", "--frobnicate"], dir.path()).status.code(),
        Some(2)
    );
    assert_eq!(xvden(&["nosuchcommand"], dir.path()).status.code(), Some(2));
    assert_eq!(
        xvden(&["score", "--denoise-sides", "left"], dir.path())
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn bad_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "epoch = 3\n").unwrap();
    let out = xvden(&["synth", "--config", "c.toml", "--out", "c"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr)
        .unwrap()
        .starts_with("error: config: "));
}

#[test]
fn missing_key_in_trials_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), SMALL).unwrap();
    ok(&["synth", "--config", "c.toml", "--out", "c"], d);
    ok(
        &[
            "plda-train",
            "--in",
            "c/train_clean.xvd",
            "--labels",
            "c/train_labels.tsv",
            "--out",
            "p.xvdm",
        ],
        d,
    );
    std::fs::write(d.join("t.tsv"), "tst000-u00\tghost\ttarget\n").unwrap();
    let out = xvden(
        &[
            "score",
            "--plda",
            "p.xvdm",
            "--enroll",
            "c/enroll.xvd",
            "--test",
            "c/test_noisy.xvd",
            "--trials",
            "t.tsv",
            "--out",
            "s.tsv",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.starts_with("error: unknown-key: ") && err.contains("ghost"),
        "{err}"
    );
}

fn full_pipeline(d: &Path) {
    std::fs::write(d.join("c.toml"), SMALL).unwrap();
    ok(
        &["synth", "--config", "c.toml", "--out", "c", "--seed", "11"],
        d,
    );
    for arch in ["dae", "stacked"] {
        ok(
            &[
                "train",
                "--arch",
                arch,
                "--pairs",
                "c/train_pairs.tsv",
                "--noisy",
                "c/train_noisy.xvd",
                "--clean",
                "c/train_clean.xvd",
                "--dev-pairs",
                "c/dev_pairs.tsv",
                "--out",
                &format!("{arch}.xvdm"),
                "--config",
                "c.toml",
                "--seed",
                "11",
            ],
            d,
        );
    }
    ok(
        &[
            "denoise",
            "--model",
            "stacked.xvdm",
            "--in",
            "c/test_noisy.xvd",
            "--out",
            "den.xvd",
        ],
        d,
    );
    ok(
        &[
            "plda-train",
            "--in",
            "c/train_clean.xvd",
            "--labels",
            "c/train_labels.tsv",
            "--out",
            "p.xvdm",
        ],
        d,
    );
    let score = |test: &str, den: Option<&str>, out: &str| {
        let mut args = vec![
            "score",
            "--plda",
            "p.xvdm",
            "--enroll",
            "c/enroll.xvd",
            "--test",
            test,
            "--trials",
            "c/trials.tsv",
            "--out",
            out,
        ];
        if let Some(m) = den {
            args.extend(["--denoiser", m]);
        }
        ok(&args, d);
    };
    score("c/test_noisy.xvd", None, "noisy.scores");
    score("c/test_noisy.xvd", Some("stacked.xvdm"), "stacked.scores");
    for sys in ["noisy", "stacked"] {
        ok(
            &[
                "eval",
                "--scores",
                &format!("{sys}.scores"),
                "--labels",
                "c/test_labels.tsv",
                "--out",
                &format!("{sys}.json"),
            ],
            d,
        );
    }
    ok(
        &[
            "report",
            "--baseline",
            "noisy.json",
            "--system",
            "stacked.json",
            "--out",
            "rep.tsv",
        ],
        d,
    );
    ok(
        &["sweep", "--config", "c.toml", "--out", "sw", "--seed", "11"],
        d,
    );
}

const ARTIFACTS: &[&str] = &[
    "c/train_clean.xvd",
    "c/train_noisy.xvd",
    "c/train_pairs.tsv",
    "c/dev_pairs.tsv",
    "c/train_labels.tsv",
    "c/enroll.xvd",
    "c/test_clean.xvd",
    "c/test_noisy.xvd",
    "c/test_noise.tsv",
    "c/test_labels.tsv",
    "c/trials.tsv",
    "c/noise_prototypes.xvd",
    "c/config.toml",
    "dae.xvdm",
    "dae.xvdm.history.csv",
    "stacked.xvdm",
    "stacked.xvdm.history.csv",
    "den.xvd",
    "p.xvdm",
    "noisy.scores",
    "stacked.scores",
    "noisy.json",
    "noisy.json.det.csv",
    "stacked.json",
    "rep.tsv",
    "sw/sweep.csv",
    "sw/report_clean.json",
    "sw/report_noisy.json",
    "sw/report_stacked.json",
    "sw/stacked.xvdm",
    "sw/history_dae.csv",
];

#[test]
fn seeded_pipeline_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    full_pipeline(a.path());
    full_pipeline(b.path());
    for f in ARTIFACTS {
        let x = std::fs::read(a.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let sweep = std::fs::read_to_string(a.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 4);
}
