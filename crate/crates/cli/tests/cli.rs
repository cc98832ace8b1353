use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rydberg-fdm"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &[&str] = &[
    "--set",
    "dataset.n=200",
    "--set",
    "dataset.n_samples_per_class=10",
    "--set",
    "train.epochs=2",
    "--set",
    "train.batch_size=16",
    "--set",
    "folds_trained=2",
];

#[test]
fn sim_writes_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("atoms.cfg"), "dataset.noise_sigma = 0\n").unwrap();
    let o = run(
        dir.path(),
        &[
            "sim",
            "--config",
            "atoms.cfg",
            "--bits",
            "101",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "t,T_101");
    assert_eq!(lines.len(), 1001);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["sim", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    let o = run(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two_and_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "sim",
            "--config",
            "missing.cfg",
            "--bits",
            "1",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.cfg"));
    let o = run(
        dir.path(),
        &[
            "--set",
            "dataset.bogus=1",
            "sim",
            "--bits",
            "1",
            "--out",
            "s.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dataset.bogus"));
}

#[test]
fn flags_override_file_and_config_dir_is_searched() {
    let dir = tempfile::tempdir().unwrap();
    let cfgdir = dir.path().join("configs");
    fs::create_dir(&cfgdir).unwrap();
    fs::write(
        cfgdir.join("small.cfg"),
        "dataset.n = 50\ndataset.noise_sigma = 0\n",
    )
    .unwrap();
    let o = bin()
        .current_dir(dir.path())
        .env("RYDBERG_FDM_CONFIG_DIR", &cfgdir)
        .args([
            "sim",
            "--config",
            "small.cfg",
            "--set",
            "dataset.n=30",
            "--bits",
            "000",
        ])
        .args(["--out", "s.csv"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(text.lines().count(), 31);
}

#[test]
fn data_train_eval_fit_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args: Vec<&str> = TINY.to_vec();
    args.extend(["gen-data", "--out", "d.ryds", "--csv", "d.csv"]);
    let o = run(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut args: Vec<&str> = TINY.to_vec();
    args.extend([
        "train", "--data", "d.ryds", "--fold", "1", "--out", "m.json",
    ]);
    let o = run(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(d.join("m.bin").exists() && d.join("m.curve.csv").exists());

    let o = run(
        d,
        &[
            "eval",
            "--model",
            "m.json",
            "--data",
            "d.ryds",
            "--test-only",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(
        d,
        &[
            "eval",
            "--model",
            "m.json",
            "--data",
            "d.ryds",
            "--out",
            "c.csv",
            "--frames-out",
            "f.txt",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("on 80 spectra"));
    assert_eq!(
        fs::read_to_string(d.join("f.txt")).unwrap().lines().count(),
        80
    );

    let o = run(
        d,
        &[
            "fit-baseline",
            "--data",
            "d.ryds",
            "--limit",
            "2",
            "--out",
            "fits.csv",
        ],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(d.join("fits.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let o = run(
        d,
        &[
            "train", "--data", "d.ryds", "--fold", "9", "--out", "x.json",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn experiment_reruns_from_manifest_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args: Vec<&str> = TINY.to_vec();
    args.extend(["--seed", "3", "--jobs", "2", "experiment", "--out", "a"]);
    let o = run(d, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(
        d,
        &["experiment", "--manifest", "a/manifest.json", "--out", "b"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    let run_id = manifest["run_id"].as_str().unwrap();
    for name in manifest["outputs"].as_array().unwrap() {
        let name = name.as_str().unwrap();
        let a = fs::read(d.join("a").join(name)).unwrap();
        let b = fs::read(d.join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
        if !name.ends_with(".bin") {
            let text = String::from_utf8_lossy(&a);
            assert!(text.contains(run_id), "{name} lacks the run id");
        }
    }
}
