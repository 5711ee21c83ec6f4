#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_grufcn"));
    cmd.env_remove("GRUFCN_UCR_ROOT");
    cmd
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl Run {
    pub fn ok(&self) -> bool {
        self.code == 0
    }
}

pub fn run(args: &[&str]) -> Run {
    finish(bin().args(args).output().expect("spawn grufcn"))
}

pub fn run_cmd(cmd: &mut Command) -> Run {
    finish(cmd.output().expect("spawn grufcn"))
}

fn finish(out: Output) -> Run {
    let r = Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    };
    // exit status 0 exactly when nothing went to stderr
    assert_eq!(r.code == 0, r.stderr.is_empty(), "code {} stderr {:?}", r.code, r.stderr);
    r
}

pub fn core_data(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data").join(file)
}

/// Two-class UCR-format text: class 1 rises, class 2 falls, plus a little
/// deterministic wobble.
pub fn ramp_split(n: usize, len: usize, offset: usize) -> String {
    let mut text = String::new();
    for i in 0..n {
        let class = 1 + (i + offset) % 2;
        let sign = if class == 1 { 1.0 } else { -1.0 };
        write!(text, "{class}").unwrap();
        for t in 0..len {
            let wobble = (((i * 31 + t * 17) % 13) as f64 - 6.0) * 0.02;
            let v = sign * (t as f64 / len as f64 - 0.5) + wobble;
            write!(text, ",{v}").unwrap();
        }
        text.push('\n');
    }
    text
}

/// Writes `<dir>/<name>_TRAIN.txt` and `_TEST.txt`; returns both paths.
pub fn write_ramp_dataset(dir: &Path, name: &str, len: usize) -> (PathBuf, PathBuf) {
    let train = dir.join(format!("{name}_TRAIN.txt"));
    let test = dir.join(format!("{name}_TEST.txt"));
    std::fs::write(&train, ramp_split(12, len, 0)).unwrap();
    std::fs::write(&test, ramp_split(9, len, 1)).unwrap();
    (train, test)
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}
