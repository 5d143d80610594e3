use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": {
    "mesh": {"kind": "sheet", "resolution": 4, "holes": false},
    "frames": 40,
    "jitter": 0.001,
    "sequences": [{"name": "x", "trajectory": "x", "amplitude": 0.1, "period": 20.0}]
  },
  "autoencoder": {"latent_dim": 6},
  "mlp": {"hidden": [16, 16, 16]},
  "stage1": {"epochs": 2, "batch_size": 4},
  "stage2": {"epochs": 2, "batch_size": 2, "window": 6},
  "stage3": {"epochs": 1, "batch_size": 4},
  "ik": {"max_iter": 5}
}"#;

fn shellflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shellflow"))
        .args(args)
        .env("SHELLFLOW_THREADS", "1")
        .output()
        .unwrap()
}

fn run_ok(args: &[&str]) {
    let out = shellflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

#[test]
fn gen_data_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(&["gen-data", "--config", &cfg, "--seed", "3", "--out", p(&a)]);
    run_ok(&["gen-data", "--config", &cfg, "--seed", "3", "--out", p(&b)]);
    for f in ["frames.bin", "manifest.json", "mesh.obj"] {
        assert_eq!(
            fs::read(a.join("x").join(f)).unwrap(),
            fs::read(b.join("x").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "gen-data");
    assert_eq!(run["seed"], 3);
    assert_eq!(run["config"]["dataset"]["frames"], 40);
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);

    // the manifest's resolved config alone reproduces the run
    let replay = tmp.path().join("replay.json");
    fs::write(&replay, run["config"].to_string()).unwrap();
    let r = tmp.path().join("r");
    run_ok(&["gen-data", "--config", p(&replay), "--out", p(&r)]);
    assert_eq!(
        fs::read(a.join("x/frames.bin")).unwrap(),
        fs::read(r.join("x/frames.bin")).unwrap()
    );

    let c = tmp.path().join("c");
    run_ok(&["gen-data", "--config", &cfg, "--seed", "4", "--out", p(&c)]);
    assert_ne!(
        fs::read(a.join("x/frames.bin")).unwrap(),
        fs::read(c.join("x/frames.bin")).unwrap()
    );
}

#[test]
fn eval_of_a_dataset_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    run_ok(&["gen-data", "--config", &cfg, "--out", p(&data)]);
    let out = tmp.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        &cfg,
        "--dataset",
        p(&data.join("x")),
        "--out",
        p(&out),
    ]);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("dataset,method,split,m_rms,m_sted,m_phys")
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    for (row, split) in rows.iter().zip(["train", "test"]) {
        assert_eq!(&row[..3], &["x", "reference", split]);
        assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(row[4].parse::<f64>().unwrap(), 0.0);
        assert!(row[5].parse::<f64>().unwrap() >= 0.0);
    }
    assert!(out.join("run.json").exists());
}

#[test]
fn three_stage_pipeline_and_applications() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    run_ok(&["gen-data", "--config", &cfg, "--out", p(&data)]);
    let ds = data.join("x");
    let ck: Vec<_> = (1..=3).map(|s| tmp.path().join(format!("ck{s}"))).collect();
    run_ok(&[
        "train",
        "--config",
        &cfg,
        "--stage",
        "1",
        "--dataset",
        p(&ds),
        "--out",
        p(&ck[0]),
    ]);
    for s in 2..=3 {
        run_ok(&[
            "train",
            "--config",
            &cfg,
            "--stage",
            &s.to_string(),
            "--dataset",
            p(&ds),
            "--checkpoint",
            p(&ck[s - 2]),
            "--out",
            p(&ck[s - 1]),
        ]);
    }
    for c in &ck {
        for f in [
            "checkpoint.json",
            "autoencoder.bin",
            "history.csv",
            "run.json",
        ] {
            assert!(c.join(f).exists(), "{} missing in {}", f, c.display());
        }
    }
    assert!(!ck[0].join("mlp.bin").exists());
    assert!(ck[2].join("mlp.bin").exists());
    let history = fs::read_to_string(ck[2].join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,"));

    let ev = tmp.path().join("eval");
    run_ok(&[
        "eval",
        "--config",
        &cfg,
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck[2]),
        "--out",
        p(&ev),
    ]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let methods: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(methods, ["autoencoder", "autoencoder", "latent", "latent"]);

    let empty = tmp.path().join("roll2");
    run_ok(&[
        "rollout",
        "--checkpoint",
        p(&ck[2]),
        "--dataset",
        p(&ds),
        "--frames",
        "2",
        "--out",
        p(&empty),
    ]);
    assert!(empty.join("run.json").exists());
    let timing = fs::read_to_string(empty.join("timing.csv")).unwrap();
    assert!(timing.contains("latent,0,"), "{timing}");
    let given = shellflow::datagen::Dataset::load(empty.join("prediction")).unwrap();
    assert_eq!(given.num_frames(), 2);

    let roll = tmp.path().join("roll");
    run_ok(&[
        "rollout",
        "--checkpoint",
        p(&ck[2]),
        "--dataset",
        p(&ds),
        "--frames",
        "12",
        "--out",
        p(&roll),
    ]);
    let pred = shellflow::datagen::Dataset::load(roll.join("prediction")).unwrap();
    let truth = shellflow::datagen::Dataset::load(&ds).unwrap();
    assert_eq!(pred.num_frames(), 12);
    assert_eq!(pred.frames[..2], truth.frames[..2]);
    assert!(pred.frames.iter().flatten().all(|x| x.is_finite()));

    let targets = tmp.path().join("targets.json");
    fs::write(
        &targets,
        serde_json::to_string(truth.grasp.targets(9)).unwrap(),
    )
    .unwrap();
    let ik = tmp.path().join("ik");
    run_ok(&[
        "ik",
        "--config",
        &cfg,
        "--checkpoint",
        p(&ck[0]),
        "--targets",
        p(&targets),
        "--out",
        p(&ik),
    ]);
    let mesh = shellflow::TriMesh::load_obj(ik.join("ik.obj")).unwrap();
    assert_eq!(mesh.num_vertices(), 16);
}

#[test]
fn errors_are_reported_as_json_with_exit_codes() {
    let out = shellflow(&["train", "--stage", "4", "--dataset", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "usage");

    let out = shellflow(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let out = shellflow(&[
        "eval",
        "--dataset",
        p(&missing),
        "--out",
        p(&tmp.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "io");

    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"stage1": {"epoch": 3}}"#).unwrap();
    let out = shellflow(&[
        "gen-data",
        "--config",
        p(&bad),
        "--out",
        p(&tmp.path().join("g")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "config");

    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    run_ok(&["gen-data", "--config", &cfg, "--out", p(&data)]);
    let out = shellflow(&[
        "train",
        "--stage",
        "2",
        "--dataset",
        p(&data.join("x")),
        "--out",
        p(&tmp.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
