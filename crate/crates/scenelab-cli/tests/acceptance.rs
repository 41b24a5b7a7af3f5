//! Artifact-stability check: every file the tool emits, including meta.json,
//! must be byte-identical when the same command runs twice with the same
//! inputs, regardless of the output directory.

mod common;

use common::*;
use tempfile::TempDir;

#[test]
fn acceptance_9_artifact_stability() {
    let tmp = TempDir::new().unwrap();
    let plan = write_file(tmp.path(), "plan.json", PLAN);
    let plan = plan.to_str().unwrap();

    let script = write_file(
        tmp.path(),
        "script.json",
        &serde_json::json!({
            "plan": format!("The layout follows.\n{PLAN}"),
            "refine": [serde_json::json!({
                "isaligned": true,
                "rationale": "matches"
            })
            .to_string()],
        })
        .to_string(),
    );
    let script = script.to_str().unwrap();

    let runs: Vec<(&str, Vec<String>)> = vec![
        (
            "render depth",
            vec!["render", "depth", "--plan", plan, "--width", "96", "--height", "96"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "render masks",
            vec!["render", "masks", "--plan", plan, "--width", "96", "--height", "96"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "mask build",
            vec!["mask", "build", "--plan", plan, "--width", "96", "--height", "96"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "bench gen",
            vec!["bench", "gen", "--count", "3", "--multi", "2", "--seed", "11"]
                .into_iter()
                .map(String::from)
                .collect(),
        ),
        (
            "loop run",
            vec![
                "loop", "run", "--prompt", "a crate and a barrel", "--script", script,
                "--steps", "3", "--width", "64", "--height", "64",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        ),
    ];

    let mut total_files = 0usize;
    for (label, args) in &runs {
        let slug: String = label.replace(' ', "_");
        let dir_a = tmp.path().join(format!("{slug}_a"));
        let dir_b = tmp.path().join(format!("{slug}_b"));
        for dir in [&dir_a, &dir_b] {
            let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
            full.push("--out");
            full.push(dir.to_str().unwrap());
            let out = scenelab(&full);
            assert_eq!(
                code(&out),
                0,
                "{label} failed: {}{}",
                stdout(&out),
                stderr(&out)
            );
        }
        let names = assert_dirs_identical(&dir_a, &dir_b);
        assert!(names.contains(&"meta.json".to_string()), "{label} meta");
        total_files += names.len();
    }

    println!(
        "acceptance 9 (artifact stability): PASS — {} commands, {total_files} files byte-identical across paired runs",
        runs.len()
    );
}
