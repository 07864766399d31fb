use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fedbreach(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fedbreach"));
    cmd.args(args).env_remove("FEDBREACH_OUT_DIR");
    if let Some(d) = env_out {
        cmd.env("FEDBREACH_OUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SPEC: &str = "\
name = tiny
seed = 3
trials = 2
save_artifacts = true
model.vocab_size = 80
model.d_model = 32
model.n_layers = 2
model.n_heads = 2
model.ffn_width = 48
model.max_positions = 16
sweep.seq_lens = 8
sweep.batch_sizes = 1, 2
";

#[test]
fn run_report_inspect_attack() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("tiny.spec");
    fs::write(&spec, SPEC).unwrap();
    let out = dir.path().join("out");
    let spec_s = spec.to_str().unwrap();

    let run = fedbreach(&["run", spec_s, "--out-dir", out.to_str().unwrap()], None);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(text(&run).contains("status"));
    let records = out.join("tiny.records.jsonl");
    assert_eq!(fs::read_to_string(&records).unwrap().lines().count(), 2);

    let csv = fedbreach(&["report", records.to_str().unwrap()], None);
    assert!(csv.status.success());
    assert_eq!(text(&csv).lines().count(), 3);

    let insp = fedbreach(&["inspect", spec_s], None);
    assert!(insp.status.success());
    assert!(text(&insp).contains("ffn-1 rank 1 of 32"), "{}", text(&insp));

    let bundle = out.join("tiny.artifacts").join("cell-000");
    let att = fedbreach(&["attack", bundle.to_str().unwrap()], None);
    assert!(att.status.success(), "{}", String::from_utf8_lossy(&att.stderr));
    assert!(text(&att).contains("sequence 0:"));
    assert!(String::from_utf8_lossy(&att.stderr).contains("total accuracy"));
    let json = fedbreach(
        &["attack", bundle.to_str().unwrap(), "--json", "--denoise", "1.5"],
        None,
    );
    assert!(json.status.success());
    assert!(text(&json).contains("\"sequences\""));
}

#[test]
fn environment_overrides_spec_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("tiny.spec");
    fs::write(&spec, SPEC.replace("save_artifacts = true\n", "")).unwrap();
    let env_dir = dir.path().join("from-env");
    let run = fedbreach(&["run", spec.to_str().unwrap()], Some(&env_dir));
    assert!(run.status.success());
    assert!(env_dir.join("tiny.records.jsonl").exists());
}

#[test]
fn failures_set_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = fedbreach(&["run", dir.path().join("nope.spec").to_str().unwrap()], None);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));

    let bad = dir.path().join("bad.spec");
    fs::write(&bad, "sweep.seq_lens = 8\nwhat = 1\n").unwrap();
    let o = fedbreach(&["run", bad.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("bad.spec:2:"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
