use std::path::Path;
use std::process::{Command, Output};

fn dphelmet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dphelmet"))
        .args(args)
        .env_remove("DPHELMET_SEED")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("d.csv");
    let out = dphelmet(&["gen-data", "--classes", "3", "--dim", "4", "--per-class", "100", "--seed", "7", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn gen_data_counts_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for p in [&a, &b] {
        let out = dphelmet(&["gen-data", "--classes", "10", "--dim", "32", "--per-class", "500", "--seed", "7", "--out", s(p)]);
        assert!(out.status.success());
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 5000);
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let manifest = json(&dir.path().join("a.csv.manifest.json"));
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn usage_errors_exit_with_two() {
    let out = dphelmet(&["gen-data", "--per-class", "0", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = dphelmet(&["account", "--sigma", "1", "--epsilon", "0.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn account_reports_closed_form_and_group_rows() {
    let out = dphelmet(&["account", "--sigma", "8.2115", "--delta", "1e-5"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["epsilon"].as_f64().unwrap() - 0.59).abs() < 1e-3);

    let out = dphelmet(&["account", "--epsilon", "0.59", "--delta", "1e-5", "--upsilon", "50"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!((report["group_epsilon"].as_f64().unwrap() - 29.5).abs() < 1e-9);
    assert_eq!(report["validity_warning"], true);

    let out = dphelmet(&["account", "--sigma", "4", "--delta", "1e-10"]);
    assert!(out.status.success());

    let out = dphelmet(&["account", "--epsilon", "1.5"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn account_with_learner_constants_lists_user_level_row() {
    let out = dphelmet(&[
        "account", "--sigma", "8", "--users", "100", "--radius", "0.07", "--points-per-user", "50", "--clip", "1",
        "--lambda", "10",
    ]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let kinds: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds, ["pointwise", "user_level"]);
    assert_eq!(report["mode"], "distributed");
}

#[test]
fn train_distributed_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("run");
    let out = dphelmet(&[
        "train-distributed", "--data", s(&data), "--users", "5", "--points-per-user", "40", "--iters", "50",
        "--batch", "10", "--out-dir", s(&run),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["model.dphm", "model.dphm.json", "report.json", "transcript.bin", "manifest.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let manifest = json(&run.join("manifest.json"));
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 5);
    let (model, meta) = dphelmet::svm::load_model(run.join("model.dphm")).unwrap();
    assert_eq!(meta.classes, vec![0, 1, 2]);
    assert_eq!(model.cols(), 5);
    let transcript =
        dphelmet::secagg::Transcript::read_from(std::fs::read(run.join("transcript.bin")).unwrap().as_slice()).unwrap();
    assert_eq!(transcript.messages.len(), 5);
    assert_eq!(json(&run.join("report.json"))["transcript_digest"], transcript.digest());
}

#[test]
fn zero_sigma_and_central_mode() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("z");
    let out = dphelmet(&["train-distributed", "--data", s(&data), "--users", "4", "--sigma", "0", "--iters", "30", "--out-dir", s(&run)]);
    assert!(out.status.success());
    assert_eq!(json(&run.join("report.json"))["accounting"]["epsilon"], "inf");

    let run = dir.path().join("c");
    let out = dphelmet(&[
        "train-distributed", "--data", s(&data), "--users", "1", "--honest-frac", "1", "--iters", "30", "--out-dir", s(&run),
    ]);
    assert!(out.status.success());
    assert_eq!(json(&run.join("report.json"))["accounting"]["mode"], "central");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let run = dir.path().join("r");
    let out = dphelmet(&["train-distributed", "--data", s(&data), "--users", "4", "--dropout", "2", "--iters", "30", "--out-dir", s(&run)]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(json(&run.join("report.json"))["status"], "aborted");
    assert!(!run.join("model.dphm").exists());

    let out = dphelmet(&["train-distributed", "--data", s(&dir.path().join("missing.csv")), "--out-dir", s(&run)]);
    assert_eq!(out.status.code(), Some(5));

    let out = dphelmet(&["train-distributed", "--data", s(&data), "--users", "4", "--collude", "0,1,2", "--out-dir", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colluding"));

    let out = dphelmet(&["train-distributed", "--data", s(&data), "--users", "4", "--batch", "500", "--out-dir", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn seed_flags_config_and_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let config = dir.path().join("cfg.json");
    std::fs::write(&config, format!(r#"{{"data": "{}", "users": 3, "iters": 20, "seed": 5}}"#, s(&data))).unwrap();
    let run = |name: &str, extra: &[&str], env: Option<&str>| {
        let out_dir = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_dphelmet"));
        cmd.args(["train-distributed", "--config", s(&config), "--out-dir", s(&out_dir)]).args(extra);
        match env {
            Some(v) => cmd.env("DPHELMET_SEED", v),
            None => cmd.env_remove("DPHELMET_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        json(&out_dir.join("manifest.json"))
    };
    let m = run("a", &[], None);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["users"], 3);
    let m = run("b", &["--seed", "9", "--users", "4"], None);
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["users"], 4);
    let m = run("c", &["--seed", "9"], Some("13"));
    assert_eq!(m["seed"], 13);
}

#[test]
fn sweep_emits_monotone_epsilon_column() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let out_dir = dir.path().join("sweep");
    let out = dphelmet(&[
        "sweep", "--data", s(&data), "--users", "4", "--sigmas", "2,4,8,16", "--iters", "30", "--batch", "10",
        "--repeats", "1", "--folds", "1", "--jobs", "1", "--out-dir", s(&out_dir),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sigma,epsilon,num_users,points_per_user,lambda,radius,acc_mean,acc_std"));
    let eps: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(eps.len(), 4);
    assert!(eps.windows(2).all(|w| w[1] < w[0]));
    assert!(json(&out_dir.join("manifest.json"))["config"]["sigmas"].is_array());
}

#[test]
fn learnability_commands_emit_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path());
    let st = dir.path().join("st");
    let out = dphelmet(&[
        "stability", "--data", s(&data), "--users", "2", "--probes", "20", "--probe-points", "60", "--lambda", "1",
        "--radius", "1", "--iters", "50", "--batch", "10", "--out-dir", s(&st),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&st.join("stability.json"));
    assert!(report["observed"].as_f64().unwrap() <= report["bound"].as_f64().unwrap());
    assert!(std::fs::read_to_string(st.join("stability.csv")).unwrap().starts_with("probe,user,index,gap,bound"));

    let cv = dir.path().join("cv");
    let out = dphelmet(&[
        "convergence", "--data", s(&data), "--users", "2", "--grid", "8,16,32,64", "--repeats", "3", "--lambda", "10",
        "--radius", "10", "--batch", "1", "--out-dir", s(&cv),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(cv.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
