use std::fs;
use std::process::{Command, Output};

const TINY: [&str; 6] = [
    "--set",
    "benchmark.pair_count=1",
    "--set",
    "benchmark.images_per_prompt=2",
    "--set",
    "schedule.steps=8",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnguide")).args(args).output().unwrap()
}

#[test]
fn bench_prints_report_and_is_worker_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut a = vec!["bench", "--workers", "1", "--out", out, "--trace", "--dump-images"];
    a.extend(TINY);
    let one = run(&a);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    let report: serde_json::Value = serde_json::from_slice(&one.stdout).unwrap();
    assert!(report["oa"].is_number());
    assert_eq!(fs::read(dir.path().join("metrics.json")).unwrap(), one.stdout);
    assert!(dir.path().join("traces").read_dir().unwrap().count() == 8);
    assert!(dir.path().join("images").read_dir().unwrap().count() > 0);

    let mut b = vec!["bench", "--workers", "4"];
    b.extend(TINY);
    let four = run(&b);
    assert!(four.status.success());
    assert_eq!(one.stdout, four.stdout);
}

#[test]
fn config_errors_exit_with_two() {
    assert_eq!(run(&["bench", "--set", "guidance.nope=1"]).status.code(), Some(2));
    assert_eq!(run(&["bench", "--set", "benchmark.images_per_prompt=0"]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--set", "guidance.loss.alpha=-1"]).status.code(), Some(2));
    assert_eq!(run(&["sample", "--prompt", "a spaceship to the left of a dog"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn metrics_scores_a_judgments_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.jsonl");
    let flags = [(0, true, true), (0, true, false), (1, false, false), (1, true, true)];
    let lines: Vec<String> = flags
        .iter()
        .enumerate()
        .map(|(i, (p, pr, c))| {
            serde_json::json!({
                "prompt_index": p,
                "image_index": i % 2,
                "both_present": pr,
                "relation_correct": c,
                "t2i_score": if *c { 1.0 } else { 0.0 },
            })
            .to_string()
        })
        .collect();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = run(&["metrics", "--judgments", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["oa"], 75.0);
    assert_eq!(r["visor_uncond"], 50.0);
    assert_eq!(r["images_per_prompt"], 2);

    fs::write(&path, "{not json\n").unwrap();
    assert_eq!(run(&["metrics", "--judgments", path.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(run(&["metrics", "--judgments", "/nonexistent/j.jsonl"]).status.code(), Some(1));
}

#[test]
fn sample_and_gradcheck_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let s = run(&["sample", "--prompt", "a dog to the right of a cat", "--seed", "3", "--out", out, "--trace", "--dump-images"]);
    assert!(s.status.success(), "{}", String::from_utf8_lossy(&s.stderr));
    let v: serde_json::Value = serde_json::from_slice(&s.stdout).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(v["detections"].as_array().unwrap().len(), 2);
    assert_eq!(fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().lines().count(), 50);
    assert!(dir.path().join("object_a.pgm").exists());

    let g = run(&["gradcheck", "--probes", "2", "--out", out]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let r: serde_json::Value = serde_json::from_slice(&g.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert!(dir.path().join("gradcheck.json").exists());
}
