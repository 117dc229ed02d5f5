use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn rfme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rfme"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rfme(args);
    assert!(
        out.status.success(),
        "rfme {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"
n_users = 1500
reference_date = 2023-01-22
seed = 4

[[archetype]]
segment = "needs_activation"
user_share = 0.4
visit_rate = 3.0
recency_min = 26
recency_max = 32
mean_pdp_views = 3.0
mean_leads = 1.0
activity = { filter = 0.3, pdp = 0.5, lead = 0.12, crf = 0.05, shortlist = 0.03 }

[[archetype]]
segment = "needs_attention"
user_share = 0.3
visit_rate = 4.0
recency_min = 16
recency_max = 22
mean_pdp_views = 2.5
mean_leads = 1.0
activity = { filter = 0.2, pdp = 0.4, lead = 0.107, crf = 0.03, shortlist = 0.013 }

[[archetype]]
segment = "promising"
user_share = 0.2
visit_rate = 20.0
recency_min = 20
recency_max = 26
mean_pdp_views = 3.5
mean_leads = 1.107
activity = { filter = 0.3, pdp = 0.6, lead = 0.2, crf = 0.1, shortlist = 0.05 }

[[archetype]]
segment = "high_value"
user_share = 0.1
visit_rate = 57.0
recency_min = 21
recency_max = 27
mean_pdp_views = 4.0
mean_leads = 1.1757
activity = { filter = 0.3, pdp = 0.65, lead = 0.2, crf = 0.12, shortlist = 0.08 }
"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let spec = dir.path().join("spec.toml");
        fs::write(&spec, SPEC).unwrap();
        ok(&[
            "synth",
            "--spec",
            s(&spec),
            "--out",
            s(&dir.path().join("synth")),
        ]);
        let config = format!(
            "input = \"{}\"\ntrain_start = 2022-12-09\ntrain_end = 2023-01-22\n\
             output_dir = \"{}\"\n",
            s(&dir.path().join("synth/events.csv")),
            s(&dir.path().join("out"))
        );
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Fixture { dir }
    }

    fn path(&self, rel: &str) -> String {
        s(&self.dir.path().join(rel)).to_string()
    }
}

#[test]
fn synth_train_score_eval_round_trip() {
    let fx = Fixture::new();
    let config = fx.path("run.toml");
    ok(&["train", "--config", &config, "--seed", "4"]);
    for name in [
        "model.json",
        "segments_train.csv",
        "elbow.csv",
        "scatter_rf.csv",
        "scatter_me.csv",
        "run_report.json",
    ] {
        assert!(
            Path::new(&fx.path(&format!("out/{name}"))).is_file(),
            "{name}"
        );
    }

    let report = ok(&[
        "eval",
        "--pred",
        &fx.path("out/scatter_rf.csv"),
        "--truth",
        &fx.path("synth/truth.csv"),
    ]);
    let ari: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("ari="))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ari > 0.85, "{report}");

    // Score a window of the same log, placed after a shifted train span.
    ok(&[
        "score",
        "--config",
        &config,
        "--model",
        &fx.path("out/model.json"),
        "--train_start",
        "2022-10-01",
        "--train_end",
        "2022-11-01",
        "--test_start",
        "2022-12-09",
        "--test_end",
        "2023-01-22",
    ]);
    let train_rows = fs::read_to_string(fx.path("out/scatter_rf.csv")).unwrap();
    let test_rows = fs::read_to_string(fx.path("out/scatter_rf_test.csv")).unwrap();
    assert_eq!(train_rows.lines().count(), test_rows.lines().count());
    assert!(Path::new(&fx.path("out/segments_test.csv")).is_file());
}

#[test]
fn train_requires_a_seed() {
    let fx = Fixture::new();
    let out = rfme(&["train", "--config", &fx.path("run.toml")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
}

#[test]
fn invalid_split_and_missing_model_fail() {
    let fx = Fixture::new();
    let config = fx.path("run.toml");
    let out = rfme(&[
        "train",
        "--config",
        &config,
        "--seed",
        "1",
        "--test_start",
        "2023-01-20",
        "--test_end",
        "2023-01-30",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));

    let out = rfme(&[
        "score",
        "--config",
        &config,
        "--model",
        &fx.path("nope.json"),
        "--test_start",
        "2023-01-23",
        "--test_end",
        "2023-02-01",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model artifact not found"));
}

#[test]
fn fixed_k_override_skips_elbow() {
    let fx = Fixture::new();
    ok(&[
        "train",
        "--config",
        &fx.path("run.toml"),
        "--seed",
        "2",
        "--k",
        "3",
    ]);
    let segments = fs::read_to_string(fx.path("out/segments_train.csv")).unwrap();
    assert_eq!(segments.lines().count(), 4);
    assert!(segments.contains("cluster-0"));
    assert!(!Path::new(&fx.path("out/elbow.csv")).exists());
}
