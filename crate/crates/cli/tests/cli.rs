use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dbnc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbnc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Two classes that differ in which half of four features is lit; every
/// fifth row has one bit flipped.
fn toy_project(dir: &Path, strategies: &str) -> String {
    let mut csv = String::new();
    for i in 0..48 {
        let y = i % 2;
        let mut x: Vec<u8> = (0..4).map(|j| ((j < 2) == (y == 0)) as u8).collect();
        if i % 5 == 0 {
            x[i % 4] ^= 1;
        }
        let cells: Vec<String> = x.iter().map(u8::to_string).collect();
        csv.push_str(&format!("{},{y}\n", cells.join(",")));
    }
    fs::write(dir.join("toy.csv"), csv).unwrap();
    let cfg = format!(
        r#"strategies = [{strategies}]
seeds = [1, 2]
architecture = [4, 3]
output_dir = "out"

[dataset]
format = "delimited"
paths = ["toy.csv"]
split = {{ ratios = [0.5, 0.25, 0.25] }}

[hyper]
pretrain_epochs = 3
finetune_epochs = 5
batch_size = 4
"#
    );
    let path = dir.join("toy.toml");
    fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn report_writes_table_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_project(dir.path(), r#""DBN-FFN", "FFN-DBNOPT", "BL""#);
    let o = dbnc(&["report", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("out/report.tsv")).unwrap();
    assert!(table.starts_with("strategy\tmean_error_pct\tsd_pct\tseed_1\tseed_2\n"));
    assert_eq!(table.lines().count(), 4);
    assert!(stdout(&o).contains(&table));
    assert!(dir.path().join("out/report.json").exists());
    assert!(dir.path().join("out/seed-2/ffn-dbnopt.ckpt").exists());
}

#[test]
fn train_then_eval_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_project(dir.path(), r#""DBN-FFN""#);
    let o = dbnc(&["train", "--config", &cfg, "--strategy", "el-dbnopt", "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().next().unwrap().to_owned();
    assert!(line.starts_with("EL-DBNOPT seed 2: test error "), "{line}");
    let test_pct = line.split("test error ").nth(1).unwrap().split(' ').next().unwrap();

    let ckpt = dir.path().join("out/seed-2/el-dbnopt.ckpt");
    let o = dbnc(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("strategy\tEL-DBNOPT"));
    assert!(out.contains(&format!("test\t{test_pct}")), "{out}");
}

#[test]
fn pretrain_writes_a_stack_that_eval_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_project(dir.path(), r#""DBN-FFN""#);
    let o = dbnc(&["pretrain", "--config", &cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("layer 1: reconstruction cross-entropy"));
    let ckpt = dir.path().join("out/seed-1/pretrain.ckpt");
    let o = dbnc(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).starts_with("error[checkpoint]"), "{}", stderr(&o));
}

#[test]
fn overrides_apply_before_validation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_project(dir.path(), r#""DBN-FFN""#);
    let o = dbnc(&["train", "--config", &cfg, "--strategy", "DBN-FFN", "--batch-size", "0"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[config]"));

    let o = dbnc(&[
        "report", "--config", &cfg, "--seeds", "3", "--strategies", "FFN-DBN,DBN+loss",
        "--delta", "inf", "--finetune-epochs", "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(dir.path().join("out/report.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(rows, ["strategy", "FFN-DBN", "DBN+loss"]);
    assert!(table.lines().next().unwrap().ends_with("seed_3"));
}

#[test]
fn bad_inputs_map_to_categories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = toy_project(dir.path(), r#""DBN-FFN""#);

    let typo = dir.path().join("typo.toml");
    fs::write(&typo, fs::read_to_string(&cfg).unwrap().replace("batch_size", "batchsize")).unwrap();
    let o = dbnc(&["report", "--config", typo.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("batchsize"), "{}", stderr(&o));

    let junk = dir.path().join("junk.ckpt");
    fs::write(&junk, b"DBNCKPT9rest").unwrap();
    let o = dbnc(&["eval", "--config", &cfg, "--checkpoint", junk.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).starts_with("error[checkpoint]"));

    let o = dbnc(&["report", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error["));

    let o = dbnc(&["train", "--config", &cfg, "--strategy", "nope"]);
    assert_eq!(o.status.code(), Some(2), "clap usage error");
}

#[test]
fn oracle_check_passes() {
    let o = dbnc(&["oracle-check", "--seed", "7"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 6);
    assert!(out.lines().all(|l| l.starts_with("ok ")), "{out}");
}
