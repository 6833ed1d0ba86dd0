use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kqt_cli::{load_model, load_table, save_model, save_table};
use tempfile::TempDir;

fn kqt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kqt"))
        .current_dir(dir)
        .arg("--quiet")
        .args(args)
        .output()
        .expect("spawn kqt")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = kqt(dir, args);
    assert!(
        out.status.success(),
        "kqt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Training set, changed stream, model and small table.
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let p = dir.path();
        ok(
            p,
            &[
                "gen",
                "gaussian",
                "--d",
                "3",
                "--skl",
                "3",
                "--tau",
                "100",
                "--length",
                "600",
                "--train-size",
                "256",
                "--train-out",
                "train.csv",
                "--seed",
                "5",
                "--out",
                "s.csv",
            ],
        );
        ok(
            p,
            &[
                "build",
                "--train",
                "train.csv",
                "--k",
                "8",
                "--v",
                "20",
                "--seed",
                "2",
                "--out",
                "model.json",
            ],
        );
        ok(
            p,
            &[
                "calibrate",
                "--k",
                "8",
                "--n",
                "256",
                "--arl0",
                "50",
                "--streams",
                "2000",
                "--seed",
                "9",
                "--out",
                "table.json",
            ],
        );
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        kqt(self.dir.path(), args)
    }
}

#[test]
fn pipeline_detects_change_and_writes_manifests() {
    let f = Fixture::new();
    let out = f.run(&[
        "--json",
        "monitor",
        "--model",
        "model.json",
        "--thresholds",
        "table.json",
        "--stream",
        "s.csv",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rec: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(rec["detected"], true);
    assert!(rec["t_star"].as_u64().unwrap() >= 1);
    assert_eq!(rec["t_star"], rec["samples_processed"]);

    let out = f.run(&[
        "monitor",
        "--model",
        "model.json",
        "--thresholds",
        "table.json",
        "--stream",
        "s.csv",
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("detected,t_star,samples_processed\ntrue,"));

    for name in ["s.csv", "model.json", "table.json"] {
        let m: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(f.path(&format!("{name}.manifest.json"))).unwrap(),
        )
        .unwrap();
        assert!(m["seed"].is_u64());
        assert_eq!(m["config"]["seed"], m["seed"]);
        assert_eq!(m["versions"]["model"], 1);
    }
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("s.csv.json")).unwrap()).unwrap();
    assert_eq!(side["d"], 3);
    assert_eq!(side["tau"], 100);
    assert_eq!(side["length"], 600);
    assert_eq!(side["seed"], 5);
    assert!((side["achieved_skl"].as_f64().unwrap() - 3.0).abs() <= 1e-4);
}

#[test]
fn artifacts_round_trip_byte_identical() {
    let f = Fixture::new();
    for name in ["model.json", "table.json"] {
        let src = f.path(name);
        let copy = f.path(&format!("again-{name}"));
        if name == "model.json" {
            save_model(&copy, &load_model(&src).unwrap()).unwrap();
        } else {
            save_table(&copy, &load_table(&src).unwrap()).unwrap();
        }
        assert_eq!(fs::read(&src).unwrap(), fs::read(&copy).unwrap(), "{name}");
    }
}

#[test]
fn same_seed_same_bytes() {
    let f = Fixture::new();
    let p = f.dir.path();
    ok(
        p,
        &[
            "build",
            "--train",
            "train.csv",
            "--k",
            "8",
            "--v",
            "20",
            "--seed",
            "2",
            "--out",
            "model2.json",
        ],
    );
    assert_eq!(
        fs::read(f.path("model.json")).unwrap(),
        fs::read(f.path("model2.json")).unwrap()
    );
    ok(
        p,
        &[
            "gen", "gaussian", "--d", "3", "--skl", "3", "--tau", "100", "--length", "600",
            "--seed", "5", "--out", "s2.csv",
        ],
    );
    assert_eq!(
        fs::read(f.path("s.csv")).unwrap(),
        fs::read(f.path("s2.csv")).unwrap()
    );
}

#[test]
fn edited_alpha_is_rejected() {
    let f = Fixture::new();
    let text = fs::read_to_string(f.path("table.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["alpha"] = serde_json::json!(0.0);
    fs::write(f.path("bad.json"), serde_json::to_string(&v).unwrap()).unwrap();
    assert!(load_table(&f.path("bad.json")).is_err());
    let out = f.run(&[
        "monitor",
        "--model",
        "model.json",
        "--thresholds",
        "bad.json",
        "--stream",
        "s.csv",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn mismatched_bins_refused() {
    let f = Fixture::new();
    ok(
        f.dir.path(),
        &[
            "calibrate",
            "--k",
            "16",
            "--n",
            "256",
            "--arl0",
            "50",
            "--streams",
            "2000",
            "--seed",
            "1",
            "--out",
            "t16.json",
        ],
    );
    let out = f.run(&[
        "monitor",
        "--model",
        "model.json",
        "--thresholds",
        "t16.json",
        "--stream",
        "s.csv",
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("incompatible"), "{}", stderr(&out));
}

#[test]
fn csv_header_skipped_and_bad_cells_named() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let mut rows = String::from("x1,x2\n");
    for i in 0..64 {
        rows.push_str(&format!(
            "{},{}\n",
            (i as f64 * 0.37).sin(),
            (i as f64 * 1.3).cos()
        ));
    }
    fs::write(p.join("h.csv"), &rows).unwrap();
    ok(
        p,
        &[
            "build", "--train", "h.csv", "--k", "4", "--v", "5", "--seed", "1", "--out", "m.json",
        ],
    );
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("m.json")).unwrap()).unwrap();
    assert_eq!(m["N"], 64);

    fs::write(p.join("bad.csv"), "1,2\n3,abc\n").unwrap();
    let out = kqt(
        p,
        &[
            "build", "--train", "bad.csv", "--seed", "1", "--out", "m2.json",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("row 2, column 2"), "{}", stderr(&out));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    assert_eq!(code(&kqt(p, &["monitor", "--model", "m.json"])), 2);
    assert_eq!(
        code(&kqt(
            p,
            &[
                "calibrate",
                "--n",
                "10",
                "--k",
                "4",
                "--pi",
                "0.5,0.5",
                "--out",
                "t.json"
            ]
        )),
        2
    );
    assert_eq!(
        code(&kqt(
            p,
            &[
                "monitor",
                "--model",
                "nope.json",
                "--thresholds",
                "t.json",
                "--stream",
                "s.csv"
            ]
        )),
        3
    );
    let out = kqt(
        p,
        &[
            "calibrate",
            "--n",
            "100",
            "--arl0",
            "500",
            "--streams",
            "5000",
            "--seed",
            "1",
            "--out",
            "t.json",
        ],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = kqt(
        p,
        &[
            "gen", "gaussian", "--skl", "1e300", "--seed", "1", "--out", "z.csv",
        ],
    );
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn missing_seed_is_synthesized_and_printed() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let out = ok(
        p,
        &[
            "gen", "gaussian", "--d", "2", "--skl", "0", "--length", "10", "--out", "s.csv",
        ],
    );
    let err = stderr(&out);
    let seed: u64 = err
        .lines()
        .find_map(|l| l.strip_prefix("seed: "))
        .expect("seed line")
        .parse()
        .unwrap();
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("s.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], seed);
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("s.csv.json")).unwrap()).unwrap();
    assert!(side["tau"].is_null());
    let rerun = ok(
        p,
        &[
            "gen",
            "gaussian",
            "--d",
            "2",
            "--skl",
            "0",
            "--length",
            "10",
            "--seed",
            &seed.to_string(),
            "--out",
            "r.csv",
        ],
    );
    assert!(rerun.status.success());
    assert_eq!(
        fs::read(p.join("s.csv")).unwrap(),
        fs::read(p.join("r.csv")).unwrap()
    );
}

#[test]
fn bench_writes_report_columns() {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let cfg = r#"[
        {"kernel": {"kind": "axis"}, "K": 8, "N": 256, "V": 10, "arl0": [50], "streams": 40,
         "training_draws": 4, "tau": 50, "calibration_streams": 2000, "dim": 2, "skl": 2.0, "seed": 3},
        {"kernel": {"kind": "mahalanobis"}, "K": 8, "N": 256, "V": 10, "arl0": [50], "streams": 40,
         "training_draws": 4, "tau": 50, "calibration_streams": 2000, "dim": 2, "skl": 2.0, "seed": 3,
         "measure_arl0": true}
    ]"#;
    fs::write(p.join("bench.json"), cfg).unwrap();
    ok(
        p,
        &["bench", "--config", "bench.json", "--out", "report.csv"],
    );
    let text = fs::read_to_string(p.join("report.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "detector,kernel,K,lambda,N,arl0_target,arl0_emp,fa_rate,mean_delay,censored_frac,streams"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("kqt-ewma,axis,8,0.05,256,50.0,,"));
    assert!(rows[1].starts_with("kqt-ewma,mahalanobis,8,0.05,256,50.0,"));
    let side: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("report.csv.json")).unwrap()).unwrap();
    assert_eq!(side["configs"].as_array().unwrap().len(), 2);
    assert_eq!(side["seeds"], serde_json::json!([3, 3]));
}
