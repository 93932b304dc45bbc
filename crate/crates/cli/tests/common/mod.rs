#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY_CONFIG: &str = "\
# small enough to train in seconds
phase1_iters=20
phase2_iters=20
phase3_iters=20
batch_size=2
crop_size=32
synthetic_train_count=4
synthetic_val_count=2
synthetic_size=32
disc_pretrain_epochs=1
eval_every=10
";

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_advdenoise"));
    cmd.env_remove("ADVDENOISE_THREADS");
    cmd
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn advdenoise")
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{TINY_CONFIG}{extra}")).unwrap();
    path
}

pub fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}
