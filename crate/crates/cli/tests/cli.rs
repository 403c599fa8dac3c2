use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn idpg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idpg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("UTF-8 output")
}

fn toy_config(dir: &Path, kind: &str, method: &str, tag: &str) -> String {
    let path = dir.join(format!("{tag}.toml"));
    let text = format!(
        r#"
[task]
source = "synth"
kind = "{kind}"
size = 60

[model]
method = "{method}"
dims = {{ m = 8, t = 2, n = 2 }}
transformer = {{ hidden = 8, heads = 2, ffn_inner = 16, vocab_size = 40, max_seq = 16 }}

[train]
epochs = 2
lr = 0.005
seed = 3

[output]
checkpoint = "{ck}"
log = "{log}"
summary = "{sum}"
"#,
        ck = dir.join(format!("{tag}.ckpt.json")).display(),
        log = dir.join(format!("{tag}.log")).display(),
        sum = dir.join(format!("{tag}.summary.json")).display(),
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn count_params_reference_row() {
    let o = idpg(&["count-params", "--method", "m-idpg-phm"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total = text.lines().find(|l| l.trim_start().starts_with("total")).unwrap();
    assert!(total.contains("137,232") && total.contains("134K"), "{total}");
    for (label, figure) in [("W1", "1K"), ("W2", "125K"), ("A", "8K")] {
        assert!(
            text.lines().any(|l| l.split_whitespace().next() == Some(label) && l.trim_end().ends_with(figure)),
            "{label} {figure}\n{text}"
        );
    }
}

#[test]
fn count_params_records_round_trip() {
    let o = idpg(&["count-params", "--format", "record"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let records: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 11);
    for (r, line) in records.iter().zip(text.lines()) {
        assert_eq!(r.to_string(), line);
        let b = &r["budget"];
        let sum: u64 = b["components"].as_array().unwrap().iter().map(|c| c["count"].as_u64().unwrap()).sum();
        assert_eq!(b["total"].as_u64().unwrap(), sum);
    }
    let compacter = records.iter().find(|r| r["budget"]["method"] == "compacter").unwrap();
    assert_eq!(compacter["budget"]["display"], "149.25K");
    assert_eq!(compacter["budget"]["table_display"], "149K");
}

#[test]
fn count_params_dimension_overrides() {
    let o = idpg(&["count-params", "--method", "prompt-tuning", "--d", "32", "--t", "5", "--format", "record"]);
    let r: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(r["budget"]["total"], 160);
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(idpg(&["count-params", "--bogus"]).status.code(), Some(2));
    assert_eq!(idpg(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(idpg(&["count-params", "--method", "nonsense"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let o = idpg(&["count-params", "--method", "m-idpg-phm", "--n", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert_eq!(idpg(&["train", "--config", "/nonexistent/run.toml"]).status.code(), Some(1));
}

#[test]
fn gradcheck_single_seed_passes() {
    let o = idpg(&["gradcheck", "--seed", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("worst relative error"));
}

#[test]
fn oracle_check_passes() {
    let o = idpg(&["oracle-check", "--format", "record"]);
    assert!(o.status.success());
    let lines: Vec<String> = stdout(&o).lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 101);
    let last: serde_json::Value = serde_json::from_str(&lines[100]).unwrap();
    assert_eq!(last["passed"], true);
}

#[test]
fn train_eval_and_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy_config(dir.path(), "pair-overlap", "m-idpg-phm", "a");
    let b = toy_config(dir.path(), "pair-overlap", "m-idpg-phm", "b");
    let oa = idpg(&["train", "--config", &a, "--format", "record"]);
    assert!(oa.status.success(), "{}", String::from_utf8_lossy(&oa.stderr));
    assert!(idpg(&["train", "--config", &b]).status.success());
    let read = |name: &str| fs::read(dir.path().join(name)).unwrap();
    assert_eq!(read("a.ckpt.json"), read("b.ckpt.json"));
    assert_eq!(read("a.log"), read("b.log"));

    let summary: serde_json::Value = serde_json::from_str(stdout(&oa).trim()).unwrap();
    let ck = dir.path().join("a.ckpt.json");
    let ck = ck.to_str().unwrap();
    let ev = idpg(&["eval", "--config", &a, "--checkpoint", ck, "--format", "record"]);
    assert!(ev.status.success());
    let ev: serde_json::Value = serde_json::from_str(stdout(&ev).trim()).unwrap();
    assert_eq!(ev["scores"], summary["dev"]);

    let cos = idpg(&["analyze-cosine", "--config", &a, "--baseline", ck, "--idpg", ck, "--k", "5,10,36", "--format", "record"]);
    assert!(cos.status.success(), "{}", String::from_utf8_lossy(&cos.stderr));
    for line in stdout(&cos).lines() {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(r["row"]["baseline"], r["row"]["idpg"]);
    }
    let too_many = idpg(&["analyze-cosine", "--config", &a, "--baseline", ck, "--idpg", ck]);
    assert_eq!(too_many.status.code(), Some(1));
}

#[test]
fn lr_grid_selects_and_saves() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy_config(dir.path(), "keyword-presence", "m-idpg-dnn", "g");
    let o = idpg(&["train", "--config", &a, "--lr-grid", "0.01,0.001"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l == "selected lr=0.01" || l == "selected lr=0.001"), "{text}");
    assert!(dir.path().join("g.ckpt.json").exists());
}

#[test]
fn few_shot_reports_mean_and_stdev() {
    let dir = tempfile::tempdir().unwrap();
    let a = toy_config(dir.path(), "keyword-presence", "prompt-tuning", "f");
    let o = idpg(&["few-shot", "--config", &a, "--k", "8,16", "--seeds", "0,1", "--dev-size", "6", "--format", "record"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["k"], 8);
    assert_eq!(rows[1]["scores"].as_array().unwrap().len(), 2);
}
