use std::path::Path;
use std::process::{Command, Output};

fn ucd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ucd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("small.conf");
    std::fs::write(
        &path,
        format!("n_images = 16\nn_test_images = 8\nepochs = 2\nbatch_size = 4\n{extra}"),
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn run_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "method = mib_ucd\n");
    let mut outs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let res = ucd(&["run", "--config", &conf, "--output", out.to_str().unwrap()]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
        assert!(String::from_utf8_lossy(&res.stdout).contains("mib_ucd step 2"));
        outs.push(out);
    }
    for file in ["metrics.jsonl", "summary.csv"] {
        assert_eq!(
            std::fs::read(outs[0].join(file)).unwrap(),
            std::fs::read(outs[1].join(file)).unwrap()
        );
    }

    let report = ucd(&["report", outs[0].to_str().unwrap(), "--average-steps"]);
    assert!(report.status.success());
    let table = String::from_utf8_lossy(&report.stdout);
    assert!(table.starts_with("method"));
    assert!(table.contains("mib_ucd") && table.contains("avg"), "{table}");
}

#[test]
fn unknown_key_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_config(dir.path(), "momentun = 0.9\n");
    let res = ucd(&["run", "--config", &conf]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("momentun"));
}

#[test]
fn missing_config_fails() {
    let res = ucd(&["run", "--config", "/nonexistent/ucd.conf"]);
    assert!(!res.status.success());
}

#[test]
fn gradcheck_passes() {
    let res = ucd(&["gradcheck", "--seed", "5", "--instances", "20"]);
    assert!(res.status.success());
    let out = String::from_utf8_lossy(&res.stdout);
    assert_eq!(out.lines().filter(|l| l.ends_with("ok")).count(), 7, "{out}");
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = ucd(&[
        "gen-data",
        "--out",
        out.to_str().unwrap(),
        "--n-images",
        "3",
        "--schedule",
        "3-1",
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("n_images 3"), "{manifest}");
    let (data, schedule) = ucd::tasks::load_dataset(&out).unwrap();
    assert_eq!(data.len(), 3);
    assert_eq!(schedule.unwrap().n_steps(), 2);
}
