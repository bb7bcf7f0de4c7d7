use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_smoothcert");

const CONFIG: &str = r#"{
  "seed": 3,
  "dataset": {"source": "synth", "num_classes": 5, "train_per_class": 10, "test_per_class": 4},
  "transfer": {"upstream": [0, 1, 2], "downstream": [3, 4]},
  "model": {"stages": [4], "norm": "layer"},
  "pretrain": {"noise": {"sigmas": [0, 0.25]}, "sgd": {"base_lr": 0.01, "epochs": 2, "batch_size": 8}},
  "finetune": {"sgd": {"base_lr": 0.01, "epochs": 1, "batch_size": 8}},
  "certify": {"sigmas": [0.25, 0.5], "n": 200, "n0": 20}
}"#;

fn run(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("SMOOTHCERT_SEED");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn pipeline(cfg: &str, out: &str, env: &[(&str, &str)]) {
    for step in ["pretrain", "finetune", "certify"] {
        let o = run(&["--threads", "2", step, "--config", cfg, "--out", out], env);
        assert!(o.status.success(), "{step}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn full_pipeline_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.json", CONFIG);
    let out = dir.path().join("run");
    pipeline(&cfg, out.to_str().unwrap(), &[]);
    for f in [
        "pretrain.smck",
        "pretrain_report.csv",
        "finetune.smck",
        "finetune_report.csv",
        "predictions.csv",
        "certify_sigma_0.25.csv",
        "certify_sigma_0.5.csv",
        "curves.csv",
        "summary.txt",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let cmp = dir.path().join("cmp");
    let o = run(&["report", out.to_str().unwrap(), "--out", cmp.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("eps=0.25"));
    let csv = std::fs::read_to_string(cmp.join("comparison.csv")).unwrap();
    assert!(csv.starts_with("run,clean_acc,eps_0.25,eps_0.25_sigma,eps_0.25_at_zero"));

    // a tampered curve table no longer matches the per-input CSVs
    let curves = out.join("curves.csv");
    let text = std::fs::read_to_string(&curves).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[1] = lines[1].replacen(",", ",0.123456,", 1);
    let mut cols: Vec<&str> = lines[1].split(',').collect();
    cols.remove(2);
    lines[1] = cols.join(",");
    std::fs::write(&curves, lines.join("\n") + "\n").unwrap();
    let o = run(&["report", out.to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn seed_from_environment_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let no_seed = CONFIG.replace(r#""seed": 3,"#, "");
    let cfg = write_config(dir.path(), "c.json", &no_seed);
    let o = run(&["pretrain", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let a = dir.path().join("a");
    let b = dir.path().join("b");
    pipeline(&cfg, a.to_str().unwrap(), &[("SMOOTHCERT_SEED", "11")]);
    pipeline(&cfg, b.to_str().unwrap(), &[("SMOOTHCERT_SEED", "11")]);
    for f in ["predictions.csv", "certify_sigma_0.25.csv", "curves.csv", "finetune_report.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_eq!(std::fs::read(a.join("finetune.smck")).unwrap(), std::fs::read(b.join("finetune.smck")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let bad = write_config(dir.path(), "bad.json", &CONFIG.replace(r#""base_lr": 0.01, "epochs": 2"#, r#""base_lr": -0.5, "epochs": 2"#));
    let o = run(&["pretrain", "--config", &bad, "--out", out], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain.sgd.base_lr"));

    let typo = write_config(dir.path(), "typo.json", &CONFIG.replace(r#""n0": 20"#, r#""nzero": 20"#));
    assert_eq!(run(&["certify", "--config", &typo, "--out", out], &[]).status.code(), Some(2));

    let good = write_config(dir.path(), "good.json", CONFIG);
    assert_eq!(run(&["finetune", "--config", &good, "--out", out], &[]).status.code(), Some(4));
    assert_eq!(run(&["certify", "--config", &good, "--out", out], &[]).status.code(), Some(4));

    let diverge = write_config(dir.path(), "div.json", &CONFIG.replace(r#""base_lr": 0.01, "epochs": 2"#, r#""base_lr": 1e30, "epochs": 2"#));
    let o = run(&["pretrain", "--config", &diverge, "--out", out], &[]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(Path::new(out).join("pretrain_report.csv").exists());

    assert_eq!(run(&["report", dir.path().join("nothing").to_str().unwrap()], &[]).status.code(), Some(1));
    assert_eq!(run(&["bogus"], &[]).status.code(), Some(2));
}

#[test]
fn selftest_quick() {
    let o = run(&["selftest"], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("[PASS]")));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        smoothcert::config::ExperimentConfig::from_path(&p, None).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 3);
}
