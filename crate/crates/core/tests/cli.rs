use std::process::{Command, Output};

fn exmvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exmvit")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn build_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<String> = ["a", "b"].iter().map(|n| dir.path().join(n).display().to_string()).collect();
    for p in &paths {
        let o = exmvit(&["build", "--variant", "exmvit-928-tiny", "--seed", "3", "--out", p]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
}

#[test]
fn unknown_variant_fails_and_lists_names() {
    let o = exmvit(&["audit", "--variant", "exmvit-999"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("exmvit-928"));
}

#[test]
fn block_out_of_range_is_rejected() {
    let o = exmvit(&["export-features", "--weights", "w", "--image", "x.ppm", "--block", "6", "--out", "y"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("6"));
}

#[test]
fn malformed_image_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("bad.ppm");
    std::fs::write(&img, b"P6\n2 2\n255\n\x00").unwrap();
    let weights = dir.path().join("w.exvt");
    let o = exmvit(&["build", "--variant", "exmvit-928-tiny", "--out", weights.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = exmvit(&["infer", "--weights", weights.to_str().unwrap(), "--image", img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("parse error"), "{}", stderr(&o));
}

#[test]
fn audit_json_reports_totals() {
    let o = exmvit(&["audit", "--variant", "exmvit-928", "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["strict_total"], 5_899_048);
    assert_eq!(v["paper_convention_total"], 5_865_992);
    assert_eq!(v["classifier_width"], 928);
}

#[test]
fn overhead_table_lists_every_variant() {
    let o = exmvit(&["audit", "--overhead"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    for name in ["mobilevit-s", "exmvit-576", "exmvit-640", "exmvit-704", "exmvit-864", "exmvit-928"] {
        assert!(text.contains(name), "{name}");
    }
}
