use std::path::Path;
use std::process::{Command, Output};

fn sit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sit")).args(args).output().expect("spawn sit")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

#[test]
fn no_arguments_is_a_usage_error() {
    let o = sit(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("Usage"), "{}", text(&o));
}

#[test]
fn unknown_subcommand_is_echoed() {
    let o = sit(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("frobnicate"));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = sit(&["gradcheck", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("--bogus"));
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(sit(&["--help"]).status.code(), Some(0));
    assert_eq!(sit(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let o = sit(&["corrupt-preview", "--data", "synthetic", "--out", "/nonexistent", "--set", "nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("nope"));
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let o = sit(&["linprobe", "--checkpoint", "/nonexistent/x.ckpt", "--data", "synthetic"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = sit(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains(" 0 failed"));
}

fn tiny_settings(dir: &Path) -> Vec<String> {
    let cfg = dir.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "# 8px model for smoke runs\nimage_size = 8\npatch_size = 4\nembed_dim = 16\ndepth = 1\nnum_heads = 2\n\
         contrastive_dim = 8\nepochs = 1\nbatch_size = 4\nprobe_epochs = 2\nfinetune_epochs = 1\n",
    )
    .unwrap();
    vec!["--config".into(), cfg.display().to_string()]
}

#[test]
fn pretrain_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_settings(dir.path());
    let run = dir.path().join("run");
    let mut args: Vec<String> = vec!["pretrain".into(), "--data".into(), "synthetic".into(), "--limit".into(), "16".into()];
    args.extend(cfg.clone());
    args.extend(["--out".into(), run.display().to_string()]);
    let o = sit(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let ck = run.join("checkpoint.ckpt");
    assert!(ck.exists());
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 4);

    let report = dir.path().join("reports.csv");
    for sub in ["linprobe", "finetune", "transfer"] {
        let mut args: Vec<String> = vec![sub.into(), "--checkpoint".into(), ck.display().to_string()];
        args.extend(["--data", "synthetic", "--limit", "20", "--test-limit", "10"].map(String::from));
        args.extend(["--report".into(), report.display().to_string()]);
        args.extend(cfg.clone());
        let o = sit(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(o.status.code(), Some(0), "{sub}: {}", text(&o));
    }
    let rows = std::fs::read_to_string(&report).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.starts_with("protocol,dataset,"));

    let previews = dir.path().join("preview");
    let o = sit(&[
        "preview",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        "synthetic",
        "--limit",
        "2",
        "--out",
        previews.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    assert_eq!(std::fs::read_dir(&previews).unwrap().count(), 6);
}
