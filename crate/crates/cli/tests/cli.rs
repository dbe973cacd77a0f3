//! End-to-end behavior of the `umrm` binary on a tiny architecture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use umrm_cli::RunManifest;

const MODEL: &str = r#"{ "vocab_size": 19, "d_model": 8, "n_layers": 1, "n_heads": 2, "d_ff": 16, "max_seq": 24 }"#;

fn model() -> Value {
    serde_json::from_str(MODEL).unwrap()
}

fn write_config(dir: &Path, name: &str, stage: &str, params: Value) -> PathBuf {
    let path = dir.join(name);
    let cfg = json!({ "seed": 22, "stage": { stage: params } });
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn umrm(cwd: &Path, args: &[&str], threads: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_umrm"));
    c.current_dir(cwd).args(args);
    if let Some(t) = threads {
        c.env("UMRM_THREADS", t);
    }
    c.output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn run(cwd: &Path, config: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out];
    args.extend_from_slice(extra);
    umrm(cwd, &args, None)
}

fn gen_data(dir: &Path) -> PathBuf {
    write_config(
        dir,
        "gen.json",
        "gen-data",
        json!({
            "model": model(),
            "train": { "n_prompts": 48 },
            "test_prompts": 32,
            "sft_sequences": 16,
            "rl_prompts": 4
        }),
    )
}

fn hashes(dir: &Path) -> Vec<(String, String)> {
    let m = RunManifest::load(dir).unwrap();
    m.outputs.into_iter().map(|o| (o.path, o.sha256)).collect()
}

#[test]
fn gen_data_is_deterministic_across_runs_and_threads() {
    let t = tempfile::tempdir().unwrap();
    let cfg = gen_data(t.path());
    let c = cfg.to_str().unwrap();
    ok(umrm(t.path(), &["run", "gen-data", "--config", c, "--out", "a"], Some("1")));
    ok(umrm(t.path(), &["run", "--config", c, "--out", "b"], Some("4")));
    let a = hashes(&t.path().join("a"));
    assert_eq!(a.len(), 6);
    assert_eq!(a, hashes(&t.path().join("b")));

    ok(run(t.path(), &cfg, "c", &["--seed", "23"]));
    assert_ne!(a, hashes(&t.path().join("c")));
    let m = RunManifest::load(&t.path().join("c")).unwrap();
    assert_eq!((m.stage.as_str(), m.seed), ("gen-data", 23));
}

#[test]
fn invalid_configs_exit_with_code_2() {
    let t = tempfile::tempdir().unwrap();
    let bad = write_config(t.path(), "bad.json", "eval-acc", json!({ "rm": "x.umrm", "data": "y", "bogus": 1 }));
    let out = run(t.path(), &bad, "o", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let missing = write_config(t.path(), "m.json", "eval-acc", json!({ "rm": "x.umrm", "data": "y" }));
    assert_eq!(run(t.path(), &missing, "o", &[]).status.code(), Some(2));

    let cfg = gen_data(t.path());
    assert_eq!(run(t.path(), &cfg, "o", &["--override", "stage.gen-data.nope=3"]).status.code(), Some(2));
    assert_eq!(run(t.path(), &cfg, "o", &["--override", "stage.gen-data.train.n_prompts=\"x\""]).status.code(), Some(2));
    let wrong_stage = umrm(t.path(), &["run", "sft", "--config", cfg.to_str().unwrap(), "--out", "o"], None);
    assert_eq!(wrong_stage.status.code(), Some(2));
    assert!(!t.path().join("o").join("manifest.json").exists());

    let io = run(t.path(), &t.path().join("absent.json"), "o", &[]);
    assert_eq!(io.status.code(), Some(4));
}

#[test]
fn upcycle_then_merge_preserves_accuracy() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    ok(run(d, &gen_data(d), "data", &[]));
    let rm = write_config(
        d,
        "rm.json",
        "train-rm",
        json!({ "model": model(), "data": "data/train.jsonl", "train": { "steps": 5, "batch": 8, "lr": 0.01 } }),
    );
    ok(run(d, &rm, "dense", &[]));
    let up = write_config(d, "up.json", "upcycle", json!({ "input": "dense/rm.umrm", "n_experts": 4 }));
    ok(run(d, &up, "moe", &[]));
    let merge = write_config(
        d,
        "merge.json",
        "merge",
        json!({ "input": "moe/moe.umrm", "data": "data/train.jsonl", "fit": { "steps": 0, "batch": 8, "lr": 0.05 } }),
    );
    ok(run(d, &merge, "merged", &[]));
    let eval = |rm: &str, out: &str| {
        let c = write_config(d, &format!("{out}.json"), "eval-acc", json!({ "rm": rm, "data": "data/test.jsonl" }));
        ok(run(d, &c, out, &[]));
        let v: Value = serde_json::from_str(&std::fs::read_to_string(d.join(out).join("accuracy.json")).unwrap()).unwrap();
        v["accuracy"].as_f64().unwrap()
    };
    let dense = eval("dense/rm.umrm", "eval-dense");
    assert_eq!(dense, eval("moe/moe.umrm", "eval-moe"));
    assert_eq!(dense, eval("merged/merged.umrm", "eval-merged"));
}

#[test]
fn manifest_verification_detects_tampering() {
    let t = tempfile::tempdir().unwrap();
    ok(run(t.path(), &gen_data(t.path()), "data", &[]));
    ok(umrm(t.path(), &["verify", "data"], None));
    std::fs::write(t.path().join("data/test.jsonl"), "{}\n").unwrap();
    let out = umrm(t.path(), &["verify", "data"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("test.jsonl"));
}

#[test]
fn report_tables() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::create_dir_all(d.join("r")).unwrap();
    std::fs::write(d.join("r/acc_a.json"), r#"{"accuracy": 0.75}"#).unwrap();
    std::fs::write(d.join("r/acc_b.json"), r#"{"accuracy": 0.5}"#).unwrap();
    std::fs::write(d.join("r/bon.csv"), "n,mean_proxy,mean_gold,win_rate\n2,1,0.5,0.6\n4,2,0.25,0.7\n").unwrap();
    let mut traj = String::from("step,proxy_reward,gold_reward,kl,policy_loss\n");
    for (i, g) in [0.0, 1.0, 2.0, 3.0, 2.9, 2.7, 2.5].iter().enumerate() {
        traj.push_str(&format!("{i},{i},{g},0,0\n"));
    }
    std::fs::write(d.join("r/traj.csv"), traj).unwrap();
    let rising: String = std::iter::once("step,proxy_reward,gold_reward,kl,policy_loss\n".to_string())
        .chain((0..7).map(|i| format!("{i},{i},{i},0,0\n")))
        .collect();
    std::fs::write(d.join("r/rising.csv"), rising).unwrap();
    let cfg = write_config(
        d,
        "report.json",
        "report",
        json!({
            "runs": [
                { "label": "merged4", "experts": 4, "accuracy": "r/acc_b.json", "trajectory": "r/rising.csv" },
                { "label": "dense", "experts": 1, "accuracy": "r/acc_a.json", "bon": "r/bon.csv", "trajectory": "r/traj.csv" }
            ],
            "divergence": { "window": 1, "margin_frac": 0.0125, "patience": 2 }
        }),
    );
    ok(run(d, &cfg, "out", &[]));
    let csv = std::fs::read_to_string(d.join("out/report.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "label,experts,accuracy,bon_max_n,bon_win_rate,bon_gap,ppo_divergence_step,ppo_max_gold");
    assert_eq!(lines[1], "dense,1,0.75,4,0.7,,3,3");
    assert_eq!(lines[2], "merged4,4,0.5,,,,none,6");
    assert!(d.join("out/report.txt").exists());
    let wins = std::fs::read_to_string(d.join("out/bon_win_rates.csv")).unwrap();
    assert_eq!(wins.lines().count(), 3);

    std::fs::write(d.join("r/acc_a.json"), r#"{"acc": 0.75}"#).unwrap();
    assert_eq!(run(d, &cfg, "out2", &[]).status.code(), Some(2));
}

#[test]
fn resume_skips_only_current_runs() {
    let t = tempfile::tempdir().unwrap();
    let cfg = gen_data(t.path());
    ok(run(t.path(), &cfg, "d", &[]));
    let first = std::fs::read(t.path().join("d/manifest.json")).unwrap();
    let again = ok(run(t.path(), &cfg, "d", &["--resume"]));
    assert!(String::from_utf8_lossy(&again.stderr).contains("up to date"));
    assert_eq!(std::fs::read(t.path().join("d/manifest.json")).unwrap(), first);

    let changed = ok(run(t.path(), &cfg, "d", &["--resume", "--seed", "5"]));
    assert!(!String::from_utf8_lossy(&changed.stderr).contains("up to date"));

    std::fs::write(t.path().join("d/gold.json"), "{}").unwrap();
    let tampered = ok(run(t.path(), &cfg, "d", &["--resume", "--seed", "5"]));
    assert!(!String::from_utf8_lossy(&tampered.stderr).contains("up to date"));
}
