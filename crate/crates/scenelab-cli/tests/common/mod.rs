//! Shared fixtures for the command-line integration tests.
#![allow(dead_code)] // each test binary uses its own subset

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Two well-separated entities, both above the visibility threshold for a
/// 10 m scene, so validation reports no warnings.
pub const PLAN: &str = r#"{
  "scene_parameters": { "scene_size": 10, "camera_pitch_angle": 30 },
  "entity_layout": [
    {
      "entity_name": "crate",
      "size": [2.4, 1.8, 1.6],
      "position": [0.5, 0.0, 1.0],
      "yaw": 20
    },
    {
      "entity_name": "barrel",
      "size": [1.2, 1.2, 1.5],
      "position": [-2.0, 0.0, 3.0]
    }
  ],
  "global_prompt": "a crate and a barrel in a warehouse"
}"#;

pub fn scenelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenelab"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn code(output: &Output) -> i32 {
    output.status.code().expect("process not signal-killed")
}

pub fn stdout(output: &Output) -> String {
    String::from_utf8(output.stdout.clone()).expect("stdout is UTF-8")
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8(output.stderr.clone()).expect("stderr is UTF-8")
}

pub fn write_file(dir: &Path, name: &str, content: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, content).expect("fixture write");
    path
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub fn read_json(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Asserts the two directories contain the same file names with identical
/// bytes, and returns the compared names.
pub fn assert_dirs_identical(a: &Path, b: &Path) -> Vec<String> {
    let list = |dir: &Path| -> Vec<String> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .expect("read dir")
            .map(|e| e.expect("dir entry").file_name().into_string().expect("name"))
            .collect();
        names.sort();
        names
    };
    let names = list(a);
    assert_eq!(names, list(b), "output listings differ");
    for name in &names {
        let bytes_a = std::fs::read(a.join(name)).expect("read a");
        let bytes_b = std::fs::read(b.join(name)).expect("read b");
        assert_eq!(
            sha256_hex(&bytes_a),
            sha256_hex(&bytes_b),
            "{name} differs between runs"
        );
    }
    names
}
