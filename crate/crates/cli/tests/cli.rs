use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proxybnn::dataset::read_jsonl;
use proxybnn::problems::{max_abs_eq, QpProblem};
use serde_json::Value;

struct Run {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(toml: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.toml");
        fs::write(&config, toml).unwrap();
        let out = dir.path().join("out");
        Run {
            _dir: dir,
            config,
            out,
        }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_proxybnn"))
            .args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn json(&self, name: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.out.join(name)).unwrap()).unwrap()
    }
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

const SMALL: &str = "seed = 5\n[data]\nn_labeled = 40\nn_unlabeled = 80\nn_test = 40\n[eval]\nsamples = 30\n";

#[test]
fn gen_data_counts_feasibility_and_determinism() {
    let run = Run::new("seed = 7\n[data]\nn_labeled = 512\nn_unlabeled = 2048\nn_test = 10\n");
    run.ok(&["gen-data"]);
    assert_eq!(lines(&run.out.join("labeled.jsonl")), 512);
    assert_eq!(lines(&run.out.join("unlabeled.jsonl")), 2048);
    let qp = QpProblem::generate(8, 2, 0).unwrap();
    for s in read_jsonl(&run.out.join("labeled.jsonl"), &qp).unwrap() {
        assert!(max_abs_eq(&qp, &s.x, s.y.as_ref().unwrap()).unwrap() < 1e-10);
    }
    let manifest = run.json("labeled.jsonl.manifest.json");
    assert_eq!(manifest["format_version"], 1);
    assert_eq!(manifest["records"], 512);
    assert_eq!(manifest["config"]["seed"], 7);
    let before = fs::read(run.out.join("unlabeled.jsonl")).unwrap();
    run.ok(&["gen-data"]);
    assert_eq!(fs::read(run.out.join("unlabeled.jsonl")).unwrap(), before);
}

#[test]
fn acopf_labels_require_an_ingest_file() {
    let run = Run::new("[data]\nn_labeled = 10\nn_unlabeled = 5\nn_test = 0\n");
    let case = run.config.with_file_name("case.json");
    fs::write(
        &case,
        r#"{"buses":[{"id":1,"v_l":0.9,"v_u":1.1,"reference":true},{"id":2,"v_l":0.9,"v_u":1.1}],
            "generators":[{"bus":1,"s_l":[0,-1],"s_u":[2,1],"cost":[0,1,0]}],
            "loads":[{"bus":2,"s_d":[0.5,0.1]}],
            "branches":[{"from":1,"to":2,"y":[1,-10]}]}"#,
    )
    .unwrap();
    let case = case.to_str().unwrap();
    let o = run.cmd(&["gen-data", "--case", case]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no solver"));

    let unlabeled_only = Run::new("[data]\nn_labeled = 0\nn_unlabeled = 5\nn_test = 0\n");
    unlabeled_only.ok(&["gen-data", "--case", case]);
    assert_eq!(lines(&unlabeled_only.out.join("unlabeled.jsonl")), 5);
}

#[test]
fn train_reports_trials_rounds_and_selection() {
    let run = Run::new(SMALL);
    run.ok(&["gen-data"]);
    let stdout = run.ok(&["train", "--budget-steps", "600", "--trials", "5"]);
    assert!(stdout.contains("sha256"));
    let ckpt = run.json("checkpoint.json");
    assert_eq!(ckpt["format_version"], 1);
    assert_eq!(ckpt["config"]["train"]["trials"], 5);
    let trials = ckpt["trials"].as_array().unwrap();
    assert_eq!(trials.len(), 5);
    for t in trials {
        assert_eq!(t["rounds"], 3);
        assert!(t["validation_mse"].is_number());
    }
    assert_eq!(ckpt["selection"]["scores"].as_array().unwrap().len(), 5);
    let report = run.json("train_report.json");
    assert_eq!(report["checkpoint_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_writes_mean_and_svp_rows() {
    let run = Run::new(SMALL);
    run.ok(&["gen-data"]);
    let missing = run.cmd(&["eval"]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing checkpoint"));
    run.ok(&["train", "--budget-steps", "300"]);
    run.ok(&["eval"]);
    let mut csv = csv::Reader::from_path(run.out.join("metrics.csv")).unwrap();
    assert_eq!(
        csv.headers().unwrap().iter().collect::<Vec<_>>(),
        ["method", "gap_percent", "max_eq", "mean_eq", "max_ineq", "mean_ineq"]
    );
    let rows: Vec<csv::StringRecord> = csv.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((&rows[0][0], &rows[1][0]), ("mean", "svp"));
    for r in &rows {
        for v in r.iter().skip(1) {
            assert!(v.parse::<f64>().unwrap() >= 0.0);
        }
    }
    let m = run.json("metrics.json");
    assert_eq!(m["config"]["eval"]["samples"], 30);
    for d in m["svp"].as_array().unwrap() {
        assert!(d["svp_max_eq"].as_f64().unwrap() <= d["column_min_max_eq"].as_f64().unwrap());
    }
}

#[test]
fn bounds_and_meta_study() {
    let run = Run::new(
        "seed = 2\n[data]\nn_labeled = 64\nn_unlabeled = 128\nn_test = 100\n\
         [eval]\nsamples = 40\n[meta]\nm_grid = [10, 30, 100]\nh_grid = [10, 100, 1000]\n",
    );
    run.ok(&["gen-data"]);
    run.ok(&["train", "--budget-steps", "600", "--mode", "supervised"]);
    run.ok(&["bounds", "--confidence", "0.9"]);
    let pcb = run.json("pcb.json");
    assert_eq!(pcb["config"]["bounds"]["confidence"], 0.9);
    assert_eq!(pcb["rows"].as_array().unwrap().len(), 8);
    let header = fs::read_to_string(run.out.join("pcb.csv")).unwrap();
    assert!(header.starts_with(
        "variable_id,mean_abs_err,eps_hoeffding,eps_emp_bernstein,eps_bernstein_mpv,mpv,var_emp,R,M,delta\n"
    ));

    run.ok(&["meta-study"]);
    let meta = run.json("meta_study.json");
    assert_eq!(meta["config"]["meta"]["h_grid"][2], 1000);
    let rows = meta["convergence"].as_array().unwrap();
    let pick = |sweep: &str, var: u64, field: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r["sweep"] == sweep && r["variable_id"] == var)
            .map(|r| r[field].as_f64().unwrap())
            .collect()
    };
    let mut mpv_mid = 0.0;
    let mut mpv_top = 0.0;
    for var in 0..8 {
        let eps = pick("M", var, "eps_hoeffding");
        assert_eq!(eps.len(), 3);
        assert!(eps[0] > eps[1] && eps[1] > eps[2], "{eps:?}");
        let mpv = pick("H", var, "mpv");
        mpv_mid += mpv[1];
        mpv_top += mpv[2];
    }
    let change = (mpv_top - mpv_mid).abs() / mpv_top;
    assert!(change < 0.05, "MPV change at the top of the H grid {change}");
    let hyp = fs::read_to_string(run.out.join("hypothesis.csv")).unwrap();
    assert_eq!(hyp.lines().count(), 1 + 8);
}

#[test]
fn deterministic_baseline_has_one_column() {
    let run = Run::new(SMALL);
    run.ok(&["gen-data"]);
    run.ok(&["train", "--budget-steps", "200", "--mode", "dnn-baseline"]);
    run.ok(&["eval"]);
    let o = run.cmd(&["bounds"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("posterior samples"));
}

#[test]
fn show_config_round_trips() {
    let run = Run::new("seed = 9\n");
    let text = run.ok(&["show-config", "--budget-steps", "90"]);
    assert!(text.contains("seed = 9"));
    assert!(text.contains("budget_mode = \"steps\""));
    let bad = Run::new("unknown_key = 1\n");
    assert!(!bad.cmd(&["show-config"]).status.success());
}
