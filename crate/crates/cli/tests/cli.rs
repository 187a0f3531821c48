use std::path::Path;
use std::process::{Command, Output};

fn labelmig(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_labelmig"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth_small(dir: &Path, seed: &str) {
    let o = labelmig(&["synth", "--preset", "small", "--seed", seed, "--out-dir", "scene"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = labelmig(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn missing_seed_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = labelmig(&["reproduce", "--out-dir", "r"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let o = labelmig(&["synth", "--preset", "small", "--out-dir", "s"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = labelmig(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("reproduce"));
}

#[test]
fn irmad_shape_mismatch_is_a_data_error_naming_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    synth_small(dir.path(), "1");
    let o = labelmig(&["drop-bands", "--input", "scene/t1", "--indices", "0,8", "--out", "bad"], dir.path());
    assert_eq!(o.status.code(), Some(2), "out-of-range band index");
    let o = labelmig(&["drop-bands", "--input", "scene/t1", "--indices", "0", "--out", "t1_5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let o = labelmig(&["irmad", "--t0", "scene/t0", "--t1", "t1_5", "--out", "z"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("128x128x6") && msg.contains("128x128x5"), "{msg}");
    assert!(!dir.path().join("z.json").exists());
}

#[test]
fn change_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_small(d, "2");
    let o = labelmig(&["irmad", "--t0", "scene/t0", "--t1", "scene/t1", "--out", "z", "--report", "rho.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let rho: Vec<Vec<f64>> = serde_json::from_slice(&std::fs::read(d.join("rho.json")).unwrap()).unwrap();
    assert!(!rho.is_empty() && rho.iter().all(|r| r.len() == 6));

    let o = labelmig(&["mask", "--stat", "z", "--pr", "scene/samples.csv", "--out", "mask"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = labelmig(&["mask", "--stat", "z", "--percentile", "90", "--threshold", "3", "--out", "m2"], d);
    assert_eq!(o.status.code(), Some(1));

    let o = labelmig(
        &[
            "migrate", "--experiment", "5.2", "--t0-raster", "scene/t0", "--t1-raster", "scene/t1",
            "--samples", "scene/samples.csv", "--mask", "mask", "--seed", "3", "--n-trees", "20",
            "--out-model", "m.lmrf", "--out-map", "map", "--out-bundle", "bundle.csv",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let bundle = std::fs::read_to_string(d.join("bundle.csv")).unwrap();
    assert!(bundle.starts_with("row_id,provenance,label,weight\n"));
    assert!(bundle.contains(",t1_pseudo,"));
    assert!(d.join("map.bsq").exists());

    let o = labelmig(
        &["predict-raster", "--model", "m.lmrf", "--raster", "scene/t1", "--normalize", "--out", "map2"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(d.join("map.bsq")).unwrap(), std::fs::read(d.join("map2.bsq")).unwrap());

    let o = labelmig(
        &[
            "migrate", "--experiment", "4.2", "--t0-raster", "scene/t0", "--t1-raster", "scene/t1",
            "--samples", "scene/samples.csv", "--seed", "3", "--out-model", "x.lmrf",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(1), "mask-based experiment without a mask");
}

#[test]
fn fit_and_predict_samples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_small(d, "4");
    let o = labelmig(
        &["fit", "--samples", "scene/samples.csv", "--raster", "scene/t0", "--seed", "1", "--n-trees", "15", "--out-model", "f.lmrf"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = labelmig(
        &["predict", "--model", "f.lmrf", "--samples", "scene/samples.csv", "--raster", "scene/t0", "--out", "p.csv"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(d.join("p.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "id,predicted,p_0,p_1,p_2,p_3,p_4");
    assert_eq!(lines.count(), 600);

    let o = labelmig(&["fit", "--samples", "scene/samples.csv", "--seed", "1", "--out-model", "g.lmrf"], d);
    assert_eq!(o.status.code(), Some(2), "sample CSV has no feature columns");
}

#[test]
fn manifests_of_repeated_runs_hash_identically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let hashes = |name: &str| {
        let o = labelmig(
            &["synth", "--preset", "small", "--seed", "9", "--out-dir", name, "--manifest", &format!("{name}.json")],
            d,
        );
        assert!(o.status.success(), "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join(format!("{name}.json"))).unwrap()).unwrap();
        assert_eq!(m["seed"], 9);
        m["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["sha256"].as_str().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    let a = hashes("a");
    assert!(a.len() >= 12);
    assert_eq!(a, hashes("b"));
}

#[test]
fn flags_file_supplies_flags_and_explicit_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth_small(d, "5");
    std::fs::write(
        d.join("flags.json"),
        r#"{"experiment": "2.1", "seed": 4, "t0_raster": "scene/t0", "t1_raster": "scene/t1",
            "samples": "scene/samples.csv", "k": 3, "n_trees": 10}"#,
    )
    .unwrap();
    let o = labelmig(&["eval", "--flags-file", "flags.json", "--k", "4", "--out", "r.json"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["k"], 4);
    assert_eq!(r["folds"].as_array().unwrap().len(), 4);
}

#[test]
fn reproduce_writes_one_ranking_row_per_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let o = labelmig(&["--threads", "4", "reproduce", "--seed", "7", "--out-dir", "r"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("r/ranking.csv")).unwrap();
    let codes: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(codes, ["1", "2.1", "2.2", "3", "4.1", "4.2", "5.1", "5.2"]);
    assert!(dir.path().join("r/ranking.txt").exists());
    assert!(dir.path().join("r/models/exp_5.2.lmrf").exists());
}
