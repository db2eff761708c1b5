#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough to train in well under a second per epoch.
pub fn small_config(dir: &Path, epochs: usize) -> String {
    format!(
        "canvas = 48
train_count = 12
val_count = 4
epochs = {epochs}
decay_epoch = 1
batch_size = 4
lr0 = 0.005
gram_normalize = true
stage_strides = 2,2,2,2,1
fusion_dim = 8
decoder_width = 8
teacher.visual_widths = 4,8,8,12,16
teacher.text_dim = 8
teacher.text_layers = 1
student.visual_widths = 2,4,4,6,8
student.text_dim = 4
student.text_layers = 1
seeds = 0,1
train_path = {}
val_path = {}
",
        dir.join("train.cmkd").display(),
        dir.join("val.cmkd").display()
    )
}

pub fn write_config(dir: &Path, name: &str, epochs: usize) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, small_config(dir, epochs)).unwrap();
    path
}

pub fn cmkd(args: &[&str]) -> Output {
    cmkd_env(args, &[])
}

pub fn cmkd_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cmkd"));
    cmd.args(args).env_remove("CMKD_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[track_caller]
pub fn ok(o: Output) -> Output {
    assert_eq!(o.status.code(), Some(0), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
