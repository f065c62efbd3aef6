use std::path::Path;
use std::process::{Command, Output};

use trafficrlhf_cli::pipeline::{read_json, Layout};
use trafficrlhf_core::finetune::FreezeMode;
use trafficrlhf_core::metrics::ReportRow;

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trafficrlhf"))
        .arg("--data-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("spawn trafficrlhf")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn smoke_pipeline_runs_stage_by_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let layout = Layout::new(dir);
    ok(dir, &["gen", "--preset", "smoke", "--seed", "4"]);
    assert!(layout.train_scenes().exists() && layout.probe_scenes().exists());
    ok(dir, &["pretrain"]);
    assert!(ok(dir, &["batch"]).starts_with("wrote "));
    assert!(ok(dir, &["label"]).contains("pairs"));
    let curve = ok(dir, &["train-rm"]);
    assert_eq!(curve.lines().count(), 3, "{curve}");
    assert!(layout.rm_selected().exists());
    let epochs = ok(dir, &["finetune"]);
    assert_eq!(epochs.lines().count(), 3, "{epochs}");

    let table = ok(dir, &["eval"]);
    let rows: Vec<ReportRow> = read_json(&layout.eval_json()).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.variant.as_str()).collect::<Vec<_>>(),
        ["baseline", "tuned"]
    );
    assert!(table.contains("baseline") && table.contains("tuned"));
    assert!(rows
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.report.fail) && r.report.real >= 0.0));

    let ablation = ok(dir, &["ablate"]);
    for name in ["frozen-encoder", "frozen-decoder", "full"] {
        assert!(ablation.contains(name), "{ablation}");
    }
    for freeze in FreezeMode::ALL {
        assert!(layout.tuned(freeze).exists());
    }
}

#[test]
fn smoke_repro_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&a, &["repro", "--seed", "9", "--preset", "smoke"]);
    ok(&b, &["repro", "--seed", "9", "--preset", "smoke"]);
    let manifest = |d: &Path| std::fs::read(Layout::new(d).manifest()).unwrap();
    assert_eq!(manifest(&a), manifest(&b));
    for rel in [
        "policy/bc.json",
        "rm/selected.json",
        "finetune/none/policy.json",
        "reports/eval.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(rel)).unwrap(),
            std::fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn exit_codes_separate_usage_data_and_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let missing = cli(dir, &["pretrain"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("run `gen` first"));

    assert_eq!(
        cli(dir, &["gen", "--preset", "nonsense"]).status.code(),
        Some(2)
    );

    let cfg = dir.join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(
        cli(dir, &["gen", "--config", cfg.to_str().unwrap()])
            .status
            .code(),
        Some(3)
    );

    ok(dir, &["gen", "--preset", "smoke"]);
    assert_eq!(
        cli(dir, &["batch", "--samples", "1"]).status.code(),
        Some(2)
    );
    let early = cli(dir, &["eval"]);
    assert_eq!(early.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&early.stderr).contains("pretrain"));
}
