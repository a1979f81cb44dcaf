use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn keyscreen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_keyscreen")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, json: serde_json::Value) -> String {
    let path = dir.join(name);
    fs::write(&path, json.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small(extra: serde_json::Value) -> serde_json::Value {
    let mut base = serde_json::json!({
        "schema_version": 1,
        "data": {"synth": {"n_pd": 4, "n_hc": 4, "sessions_mean": 2.0, "length_mean": 80.0}},
        "model": {"hidden": 4, "fcn_channels": [4, 4, 4]},
        "windowing": {"window_size": 20, "stride": 10},
        "train": {"epochs": 1},
        "folds": 2
    });
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    base
}

#[test]
fn full_protocol_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = |name: &str| d.join(name).to_str().unwrap().to_string();

    let cfg = write_config(d, "pre.json", small(serde_json::json!({})));
    let o = keyscreen(&["pretrain", "--config", &cfg, "--seed", "3", "--out", &out("pre"), "--arch", "gru_fcn", "--jobs", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.starts_with("pretrain completed"), "{stdout}");
    assert!(stdout.contains("mean AUC-ROC"));

    let ft = write_config(
        d,
        "ft.json",
        small(serde_json::json!({
            "data": {"synth": {"n_pd": 4, "n_hc": 4, "sessions_mean": 2.0, "length_mean": 80.0, "id_prefix": "f_", "seed": 1}},
            "source_record": out("pre")
        })),
    );
    let o = keyscreen(&["finetune", "--config", &ft, "--seed", "3", "--out", &out("ft")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("selected policy"));

    let ext = write_config(
        d,
        "ext.json",
        small(serde_json::json!({
            "data": {"synth": {"n_pd": 3, "n_hc": 3, "sessions_mean": 2.0, "length_mean": 80.0, "id_prefix": "e_", "seed": 2}},
            "source_record": out("ft")
        })),
    );
    let o = keyscreen(&["external", "--config", &ext, "--seed", "3", "--out", &out("ext")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("ext/predictions.csv").is_file());

    let rep = write_config(
        d,
        "rep.json",
        serde_json::json!({"schema_version": 1, "report": {"records": [out("pre"), out("ft"), out("ext")]}}),
    );
    let o = keyscreen(&["report", "--config", &rep, "--seed", "0", "--out", &out("rep")]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("rep/table_pretrain.csv").is_file());
}

#[test]
fn synth_then_preprocess_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = write_config(d, "s.json", small(serde_json::json!({})));
    let syn = d.join("syn");
    let o = keyscreen(&["synth", "--config", &cfg, "--seed", "9", "--out", syn.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pre = write_config(
        d,
        "p.json",
        serde_json::json!({"schema_version": 1, "data": {"events": syn.join("events.csv"), "labels": syn.join("labels.csv")}}),
    );
    let o = keyscreen(&["preprocess", "--config", &pre, "--seed", "9", "--out", d.join("prep").to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("prep/signals.csv").is_file());
}

#[test]
fn exit_codes_follow_error_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = d.join("o");
    let out = out.to_str().unwrap();

    // configuration problems: 2
    let no_seed = write_config(d, "a.json", small(serde_json::json!({})));
    assert_eq!(keyscreen(&["pretrain", "--config", &no_seed, "--out", out]).status.code(), Some(2));
    assert_eq!(keyscreen(&["pretrain", "--config", &no_seed, "--seed", "1", "--out", out, "--arch", "xcm"]).status.code(), Some(2));
    assert_eq!(keyscreen(&["pretrain", "--config", &no_seed, "--seed", "1", "--out", out, "--balance", "smote"]).status.code(), Some(2));
    let unknown = write_config(d, "b.json", serde_json::json!({"schema_version": 1, "bogus": true}));
    assert_eq!(keyscreen(&["pretrain", "--config", &unknown, "--seed", "1", "--out", out]).status.code(), Some(2));

    // malformed input data: 3
    fs::write(d.join("labels.csv"), "subject_id,label\ns1,7\n").unwrap();
    fs::write(d.join("events.csv"), "subject_id,session_id,key_id,press_ts,release_ts\n").unwrap();
    let bad = write_config(
        d,
        "c.json",
        serde_json::json!({"schema_version": 1, "data": {"events": d.join("events.csv"), "labels": d.join("labels.csv")}}),
    );
    assert_eq!(keyscreen(&["pretrain", "--config", &bad, "--seed", "1", "--out", out]).status.code(), Some(3));

    // clap usage errors keep clap's own code
    assert_eq!(keyscreen(&["train"]).status.code(), Some(2));
}
