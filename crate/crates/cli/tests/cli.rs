use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn latree(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latree")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec!["gen", "--p", "10", "--k", "2", "--dims", "3", "--seed", "4", "--out", "g"];
    args.extend_from_slice(extra);
    stdout_json(&latree(&args, dir));
}

#[test]
fn gen_is_deterministic_and_samples_are_optional() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &[]);
    assert!(d.join("g/model.json").exists());
    assert!(!d.join("g/samples.csv").exists());

    gen(d, &["-n", "500"]);
    let first = (fs::read(d.join("g/model.json")).unwrap(), fs::read(d.join("g/samples.csv")).unwrap());
    gen(d, &["-n", "500"]);
    assert_eq!(fs::read(d.join("g/model.json")).unwrap(), first.0);
    assert_eq!(fs::read(d.join("g/samples.csv")).unwrap(), first.1);
}

#[test]
fn exact_moments_learn_recovers_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &[]);
    let out = latree(&["learn", "--moments-from-model", "g/model.json", "--epsilon", "1e-7", "--out", "l"], d);
    let report = stdout_json(&out);
    assert!(report["report"]["timings"]["total"].as_f64().is_some());
    for f in ["tree.json", "tree.dot", "tree.nwk"] {
        let text = fs::read_to_string(d.join("l").join(f)).unwrap();
        assert!(text.contains("\"epsilon\""), "{f} lacks the run config");
        assert!(text.contains(env!("CARGO_PKG_VERSION")), "{f} lacks the version");
    }
    let eval = stdout_json(&latree(&["eval", "l/tree.json", "g/model.json"], d));
    assert_eq!(eval["rf"], 0.0);
    assert!(eval["param_max_err"].as_f64().unwrap() < 1e-6);
    let line = String::from_utf8(latree(&["eval", "l/tree.json", "g/model.json"], d).stdout).unwrap();
    assert!(line.trim_start().starts_with("{\"rf\":"));
    assert_eq!(line.trim().lines().count(), 1);
}

#[test]
fn output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &["-n", "20000"]);
    let tree = |threads: &str, out: &str| {
        let args = ["learn", "g/samples.csv", "--lrg-fallback", "--threads", threads, "--out", out];
        stdout_json(&latree(&args, d));
        let mut v: Value = serde_json::from_str(&fs::read_to_string(d.join(out).join("tree.json")).unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("meta");
        v
    };
    assert_eq!(tree("1", "t1"), tree("8", "t8"));
}

#[test]
fn malformed_samples_exit_one_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.csv"), "{\"p\":3,\"dims\":[2,2,2],\"N\":2}\n0,0,1,1\n0,1,x,1\n").unwrap();
    let out = latree(&["learn", "bad.csv"], d);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
    assert!(out.stdout.is_empty());
}

#[test]
fn bad_flags_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = latree(&["learn", "x.csv", "--epsilon", "-3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn independent_blocks_exit_two() {
    // Variables 0-2 copy one fair bit, 3-5 another, and the four samples
    // enumerate both bits, so every cross-block moment has rank one.
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut text = String::from("0:0,0:1,1:0,1:1,2:0,2:1,3:0,3:1,4:0,4:1,5:0,5:1\n");
    for (s, t) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let one_hot = |b: usize| if b == 0 { "1,0" } else { "0,1" };
        let row: Vec<&str> = (0..6).map(|v| one_hot(if v < 3 { s } else { t })).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(d.join("blocks.csv"), text).unwrap();
    let out = latree(&["learn", "blocks.csv"], d);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn stalled_grouping_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // 100 samples are far too few for the sibling tests to settle.
    gen(d, &["-n", "100"]);
    let out = latree(&["learn", "g/samples.csv", "--epsilon", "0"], d);
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn group_map_pools_raw_features() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, &["-n", "3000"]);
    // One named raw feature per (variable, coordinate).
    let mut map = String::from("raw_feature_id,variable_id,coord\n");
    for v in 0..10 {
        for c in 0..3 {
            map.push_str(&format!("f{v}_{c},{v},{c}\n"));
        }
    }
    fs::write(d.join("map.csv"), map).unwrap();
    let sparse = fs::read_to_string(d.join("g/samples.csv")).unwrap();
    let mut raw = String::from("{\"N\":3000}\n");
    for line in sparse.lines().skip(2) {
        let f: Vec<&str> = line.split(',').collect();
        raw.push_str(&format!("{},f{}_{},{}\n", f[0], f[1], f[2], f[3]));
    }
    fs::write(d.join("raw.csv"), raw).unwrap();
    let a = latree(&["learn", "raw.csv", "--group-map", "map.csv", "--lrg-fallback", "--out", "a"], d);
    let b = latree(&["learn", "g/samples.csv", "--lrg-fallback", "--out", "b"], d);
    stdout_json(&a);
    stdout_json(&b);
    let eval = stdout_json(&latree(&["eval", "a/tree.json", "b/tree.json"], d));
    assert_eq!(eval["rf"], 0.0);
}

fn quartet(pairs: [[usize; 2]; 2]) -> String {
    let edges: Vec<String> = [4, 5]
        .iter()
        .zip(pairs)
        .flat_map(|(h, p)| p.map(|v| format!("[{h},{v}]")))
        .chain(["[4,5]".to_string()])
        .collect();
    let nodes: Vec<String> = (0..6)
        .map(|i| format!("{{\"id\":{i},\"kind\":\"{}\",\"dim\":2}}", if i < 4 { "obs" } else { "hid" }))
        .collect();
    format!("{{\"k\":2,\"nodes\":[{}],\"edges\":[{}]}}", nodes.join(","), edges.join(","))
}

#[test]
fn eval_quartets_and_leaf_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("a.json"), quartet([[0, 1], [2, 3]])).unwrap();
    fs::write(d.join("b.json"), quartet([[0, 2], [1, 3]])).unwrap();
    let same = stdout_json(&latree(&["eval", "a.json", "a.json"], d));
    assert_eq!(same["rf"], 0.0);
    assert!(same["param_max_err"].is_null());
    let diff = stdout_json(&latree(&["eval", "a.json", "b.json"], d));
    assert_eq!(diff["rf"], 1.0);

    gen(d, &[]);
    let out = latree(&["eval", "a.json", "g/model.json"], d);
    assert_eq!(out.status.code(), Some(1));
}
