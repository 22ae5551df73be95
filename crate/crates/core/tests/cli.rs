use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_loadanon"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn synth(dir: &Path, households: &str, days: &str, out: &str) {
    let o = run(
        dir,
        &[
            "synth",
            "--households",
            households,
            "--days",
            days,
            "--seed",
            "3",
            "--out",
            out,
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn without_timestamps(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("timestamps");
    v
}

#[test]
fn synth_shape_and_repeatability() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "10", "14", "a.csv");
    synth(dir.path(), "10", "14", "b.csv");
    let a = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 1 + 672);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 11);
    assert!(dir.path().join("a.manifest.json").exists());

    let o = run(
        dir.path(),
        &[
            "synth",
            "--households",
            "0",
            "--days",
            "3",
            "--seed",
            "1",
            "--out",
            "z.csv",
        ],
    );
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("--households"));
}

#[test]
fn anonymize_outputs_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "25", "3", "p.csv");
    let ok = run(
        dir.path(),
        &[
            "anonymize",
            "--input",
            "p.csv",
            "--k",
            "10",
            "--out-assignments",
            "a.csv",
            "--out-centroids",
            "c.csv",
        ],
    );
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    let assign = fs::read_to_string(dir.path().join("a.csv")).unwrap();
    assert_eq!(assign.lines().next(), Some("series_id,group_index"));
    assert_eq!(assign.lines().count(), 26);
    let cents = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert_eq!(cents.lines().next(), Some("timestamp,group_0,group_1"));
    assert!(ok.stdout.is_empty());

    let k0 = run(
        dir.path(),
        &[
            "anonymize",
            "--input",
            "p.csv",
            "--k",
            "0",
            "--out-assignments",
            "a.csv",
            "--out-centroids",
            "c.csv",
        ],
    );
    assert_eq!(code(&k0), 4);
    assert!(stderr(&k0).contains("--k"));

    let missing = run(
        dir.path(),
        &[
            "anonymize",
            "--input",
            "nope.csv",
            "--k",
            "2",
            "--out-assignments",
            "a.csv",
            "--out-centroids",
            "c.csv",
        ],
    );
    assert_eq!(code(&missing), 3);

    let usage = run(dir.path(), &["anonymize", "--k", "two"]);
    assert_eq!(code(&usage), 2);
    assert_eq!(code(&run(dir.path(), &["--help"])), 0);
}

#[test]
fn metrics_ladders() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "40", "4", "p.csv");
    let o = run(
        dir.path(),
        &[
            "metrics",
            "--input",
            "p.csv",
            "--out",
            "m.json",
            "--out-csv",
            "m.csv",
            "--replicates",
            "2",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
    assert_eq!(v["levels"].as_array().unwrap().len(), 15);
    assert_eq!(v["decay_fit"]["status"], "ok");
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,sse,il,volatility_mean,volatility_sd"));

    let o = run(
        dir.path(),
        &["metrics", "--input", "p.csv", "--k-ladder", "2", "--out", "one.json"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("one.json")).unwrap()).unwrap();
    assert_eq!(v["levels"].as_array().unwrap().len(), 1);
    assert_eq!(v["decay_fit"]["status"], "insufficient_points");

    let bad = run(
        dir.path(),
        &["metrics", "--input", "p.csv", "--k-ladder", "2,x", "--out", "bad.json"],
    );
    assert_eq!(code(&bad), 4);
}

#[test]
fn metrics_from_long_format() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("LCLid,stdorToU,DateTime,KWH/hh (per half hour) \n");
    for h in 0..6 {
        for t in 0..96 {
            let (day, rem) = (1 + t / 48, t % 48);
            let v = if h == 2 && t == 40 {
                "Null".to_string()
            } else {
                format!("{:.3}", 0.1 + 0.01 * ((h * 7 + t) % 13) as f64)
            };
            text.push_str(&format!(
                "MAC{h:06},Std,2013-01-{day:02} {:02}:{:02}:00.0000000,{v} \n",
                rem / 2,
                30 * (rem % 2)
            ));
        }
    }
    fs::write(dir.path().join("lcl.csv"), text).unwrap();
    let o = run(
        dir.path(),
        &[
            "metrics",
            "--input",
            "lcl.csv",
            "--format",
            "lcl",
            "--k-ladder",
            "2,3,6",
            "--replicates",
            "1",
            "--out",
            "m.json",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = run(dir.path(), &["ingest", "--input", "lcl.csv", "--out", "wide.csv"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let wide = fs::read_to_string(dir.path().join("wide.csv")).unwrap();
    assert_eq!(wide.lines().count(), 97);
    assert!(wide.starts_with("timestamp,MAC000000,"));
}

#[test]
fn backtest_config_schema() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("no_seed.json"),
        r#"{"input": "p.csv", "models": [{"kind": "seasonal-naive"}]}"#,
    )
    .unwrap();
    let o = run(dir.path(), &["backtest", "--config", "no_seed.json", "--out", "r.json"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("`.seed`"), "{}", stderr(&o));

    fs::write(
        dir.path().join("bad_kind.json"),
        r#"{"input": "p.csv", "models": [{"kind": "arima"}], "seed": 1}"#,
    )
    .unwrap();
    let o = run(
        dir.path(),
        &["backtest", "--config", "bad_kind.json", "--out", "r.json"],
    );
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains(".models[0]"), "{}", stderr(&o));

    let o = run(dir.path(), &["backtest", "--config", "absent.json", "--out", "r.json"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn minimal_backtest_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("cfg.json"),
        r#"{
            "input": {"synthetic": {"n_households": 5, "days": 70, "start": "2013-07-01T00:00:00Z"}},
            "k_ladder": [],
            "models": [{"kind": "seasonal-naive"}],
            "windows": [{"train_end": "2013-08-28"}],
            "repeats": 1,
            "seed": 2
        }"#,
    )
    .unwrap();
    let o = run(dir.path(), &["backtest", "--config", "cfg.json", "--out", "r.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["records"].as_array().unwrap().len(), 1);
    assert_eq!(fs::read_to_string(dir.path().join("r.csv")).unwrap().lines().count(), 6);
    let m = without_timestamps(&dir.path().join("r.manifest.json"));
    assert_eq!(m["root_seed"], 2);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_byte_identical_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "30", "3", "p.csv");
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "3", "0"].iter().enumerate() {
        let m = format!("m{i}.json");
        let o = run(
            d,
            &[
                "--workers",
                workers,
                "metrics",
                "--input",
                "p.csv",
                "--k-ladder",
                "2,5,10",
                "--replicates",
                "3",
                "--sample-size",
                "20",
                "--seed",
                "9",
                "--out",
                &m,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let (a, c) = (format!("a{i}.csv"), format!("c{i}.csv"));
        let o = run(
            d,
            &[
                "--workers",
                workers,
                "anonymize",
                "--input",
                "p.csv",
                "--k",
                "4",
                "--out-assignments",
                &a,
                "--out-centroids",
                &c,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        outputs.push((
            fs::read(d.join(&m)).unwrap(),
            fs::read(d.join(&a)).unwrap(),
            fs::read(d.join(&c)).unwrap(),
            without_timestamps(&d.join(format!("m{i}.manifest.json"))),
        ));
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
}
