use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ringtdrc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ringtdrc"))
        .args(args)
        .current_dir(dir)
        .env_remove("RINGTDRC_OUT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#"
preset = "narma-wdm4"

[scenario]
seeds = [0, 1]
n_nodes = 10

[scenario.lengths]
warmup = 20
train = 60
test = [40]
"#;

#[test]
fn validate_passes_on_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = ringtdrc(&["validate"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.contains("PASS lorentzian"));
    assert!(out.contains("PASS rk4"));
}

#[test]
fn unknown_config_keys_fail() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.toml"), "[scenario]\nnodes = 10\n").unwrap();
    let o = ringtdrc(&["validate", "--config", "bad.toml"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nodes"));
}

#[test]
fn run_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let o = ringtdrc(&["run", "--config", "small.toml", "--out", "res"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 4);
    let csv = fs::read_to_string(dir.path().join("res/scores.csv")).unwrap();
    // Header, two seeds and a summary per channel.
    assert_eq!(csv.lines().count(), 1 + 4 * 3);
    assert!(csv.starts_with("channel,task,metric,seed,value,std,self_pulsing"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("res/run.json")).unwrap()).unwrap();
    assert_eq!(json["outcome"]["channels"].as_array().unwrap().len(), 4);
    assert!(json["timestamp_unix_s"].as_u64().unwrap() > 0);
}

#[test]
fn gen_task_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = ringtdrc(&["gen-task", "--task", "narma10", "--len", "120", "--seed", "4", "--out", "t"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read_to_string(dir.path().join("t/task_narma10_seed4.csv")).unwrap();
    assert!(a.lines().count() > 120);
    ringtdrc(&["gen-task", "--task", "narma10", "--len", "120", "--seed", "4", "--out", "u"], dir.path());
    assert_eq!(a, fs::read_to_string(dir.path().join("u/task_narma10_seed4.csv")).unwrap());
    assert!(!ringtdrc(&["gen-task", "--task", "nope"], dir.path()).status.success());
}

#[test]
fn sweep_is_independent_of_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("{SMALL}\n[[grid.axes]]\nkind = \"detuning-ghz\"\nvalues = [-10.0, 20.0, 40.0]\n");
    fs::write(dir.path().join("grid.toml"), cfg).unwrap();
    let mut csvs = Vec::new();
    for w in ["1", "3"] {
        let out = format!("w{w}");
        let o = ringtdrc(&["sweep", "--config", "grid.toml", "--workers", w, "--out", &out], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(fs::read_to_string(dir.path().join(out).join("sweep.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
    assert_eq!(csvs[0].lines().count(), 1 + 3 * 4);
}

#[test]
fn mc_writes_one_report_per_channel() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SMALL.replace("train = 60", "train = 150").replace("test = [40]", "test = [120]");
    fs::write(dir.path().join("small.toml"), cfg).unwrap();
    let o = ringtdrc(&["mc", "--config", "small.toml", "--h-max", "2", "--k-max", "5", "--out", "mc"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for k in 0..4 {
        assert!(dir.path().join(format!("mc/capacity_ch{k}.csv")).exists());
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("mc/capacity.json")).unwrap()).unwrap();
    assert_eq!(json["channels"][0]["report"]["h_max"], 2);
}
