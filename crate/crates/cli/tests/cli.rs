use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn spn")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn simulate(dir: &Path) {
    fs::write(
        dir.join("scenario.json"),
        r#"{"seed": 11, "width": 128, "height": 128, "frames_per_set": 5, "darks_per_camera": 3,
            "cameras": [{"id": "camA"}, {"id": "camB"}],
            "lenses": [{"id": "lensX"}, {"id": "PINHOLE"}]}"#,
    )
    .unwrap();
    ok(&spn(dir, &["simulate", "scenario.json", "--out", "data"]));
}

fn frames(dir: &Path, prefix: &str) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir.join("data/frames"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with(prefix) && n.ends_with(".raw"))
        .map(|n| format!("data/frames/{n}"))
        .collect();
    v.sort();
    v
}

#[test]
fn stepwise_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    fs::write(dir.join("denoise.json"), r#"{"block_size": 32, "wavelet_levels": 3}"#).unwrap();

    let a = frames(dir, "camA_lensX_");
    let b = frames(dir, "camB_lensX_");
    assert_eq!(a.len(), 5);
    let mut args = vec!["residue", "--out", "res", "--config", "denoise.json", "--no-crop"];
    args.extend(a.iter().chain(&b).map(String::as_str));
    ok(&spn(dir, &args));

    let res = |f: &str| format!("res/{}.res", Path::new(f).file_stem().unwrap().to_string_lossy());
    let ref_in: Vec<String> = a[..3].iter().map(|f| res(f)).collect();
    let mut args = vec!["build-ref", "--out", "camA.ref"];
    args.extend(ref_in.iter().map(String::as_str));
    let stdout = ok(&spn(dir, &args));
    assert!(stdout.contains("camA_lensX"), "{stdout}");

    let tests: Vec<String> = a[3..].iter().chain(&b[3..]).map(|f| res(f)).collect();
    let mut args = vec!["match", "--ref", "camA.ref", "--out", "scores.csv"];
    args.extend(tests.iter().map(String::as_str));
    ok(&spn(dir, &args));

    let csv = fs::read_to_string(dir.join("scores.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "camera_id,lens_id,ref_id,image_id,corr_R,corr_G1,corr_G2,corr_B,corr_mean"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let mean = |cam: &str| {
        let v: Vec<f64> = rows.iter().filter(|r| r[0] == cam).map(|r| r[8].parse().unwrap()).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean("camA") > mean("camB") + 0.01, "{csv}");

    ok(&spn(dir, &["box-stats", "scores.csv", "--out", "box.csv"]));
    let box_csv = fs::read_to_string(dir.join("box.csv")).unwrap();
    assert!(box_csv.starts_with("ref_id,image_set,n,min,q1,median,q3,max,mean,mode,range,skew_sign"));
    assert_eq!(box_csv.lines().count(), 3);
}

#[test]
fn run_plan_and_decompose_means() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    simulate(dir);
    fs::write(
        dir.join("plan.json"),
        r#"{"dataset": "data/manifest.json", "split_seed": 1, "reference_count": 2, "test_count": 3,
            "output_dir": "out", "pipeline": {"crop": null, "denoise": {"block_size": 64}}}"#,
    )
    .unwrap();
    let stdout = ok(&spn(dir, &["run", "plan.json"]));
    assert!(stdout.contains("SNP dB"), "{stdout}");
    for f in ["scores.csv", "box_stats.csv", "condition_means.json", "decomposition.csv", "report.txt", "run_manifest.json"] {
        assert!(dir.join("out").join(f).exists(), "{f}");
    }

    let stdout = ok(&spn(dir, &["decompose", "--means", "out/condition_means.json", "--csv", "snp.csv"]));
    assert!(stdout.contains("PRNU"));
    let snp = fs::read_to_string(dir.join("snp.csv")).unwrap();
    assert!(snp.starts_with("identifier,energy,ratio,snp_db,extended_share"));
}

#[test]
fn decompose_from_values() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spn(tmp.path(), &["decompose", "0.05", "0.04", "0.048", "0.038", "--csv", "t.csv"]);
    let stdout = ok(&out);
    assert!(stdout.contains("FPN"));
    let csv = fs::read_to_string(tmp.path().join("t.csv")).unwrap();
    let prnu: Vec<&str> = csv.lines().find(|l| l.starts_with("PRNU,")).unwrap().split(',').collect();
    assert!((prnu[1].parse::<f64>().unwrap() - 0.038).abs() < 1e-12);
}

#[test]
fn failures_are_stage_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = spn(dir, &["box-stats", "nope.csv", "--out", "x.csv"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("box-stats") && err.contains("nope.csv"), "{err}");

    let out = spn(dir, &["match", "--ref", "a.ref", "b.res"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `match`"));

    fs::write(dir.join("bad.json"), r#"{"block_size": 30}"#).unwrap();
    let out = spn(dir, &["residue", "--config", "bad.json", "f.raw"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `config`"));

    let out = spn(dir, &["decompose", "0.1", "0.2", "0.3", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `decompose`"));

    let out = spn(dir, &["run", "missing_plan.json"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("load-plan"));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = spn(tmp.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
