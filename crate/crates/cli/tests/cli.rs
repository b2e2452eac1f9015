use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const PLAN: &str = "\
[model]
seed = 7

[heads]
layer0 = special, local, column, diffuse
layer1 = special>diffuse@78, local, local, column
";

fn akv(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_akv"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn akv")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = akv(dir, args);
    assert!(
        out.status.success(),
        "akv {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Asserts failure and returns the single stderr line.
fn fails(dir: &Path, args: &[&str]) -> String {
    let out = akv(dir, args);
    assert!(!out.status.success(), "akv {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    assert!(err.starts_with("error: "), "{err}");
    err
}

fn workspace() -> TempDir {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("plan.ini"), PLAN).unwrap();
    t
}

fn read_csv(path: PathBuf) -> Vec<Vec<String>> {
    fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn synth_is_deterministic_and_run_dirs_count_up() {
    let t = workspace();
    ok(t.path(), &["synth", "--plan", "plan.ini", "--prompt-len", "24", "--decode-steps", "4"]);
    ok(t.path(), &["synth", "--plan", "plan.ini", "--prompt-len", "24", "--decode-steps", "4"]);
    let a = fs::read(t.path().join("runs/synth-0001/trace.akvt")).unwrap();
    let b = fs::read(t.path().join("runs/synth-0002/trace.akvt")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    ok(t.path(), &["--seed", "8", "synth", "--plan", "plan.ini", "--prompt-len", "24", "--decode-steps", "4", "--trace-out", "other.akvt"]);
    assert_ne!(a, fs::read(t.path().join("other.akvt")).unwrap());
}

#[test]
fn plan_errors_point_at_the_file() {
    let t = workspace();
    fs::write(t.path().join("bad.ini"), "[heads]\nlayer0 = special, sparkly\n").unwrap();
    let err = fails(t.path(), &["synth", "--plan", "bad.ini"]);
    assert!(err.contains("bad.ini:2:") && err.contains("sparkly"), "{err}");
    fs::write(t.path().join("empty.ini"), "[model]\nseed = 1\n").unwrap();
    let err = fails(t.path(), &["profile", "--plan", "empty.ini"]);
    assert!(err.contains("no heads defined"), "{err}");
    let err = fails(t.path(), &["profile", "--plan", "missing.ini"]);
    assert!(err.contains("missing.ini"), "{err}");
    let err = fails(t.path(), &["profile"]);
    assert!(err.contains("missing input"), "{err}");
}

#[test]
fn profile_writes_one_row_per_head() {
    let t = workspace();
    ok(t.path(), &["profile", "--plan", "plan.ini", "--out", "p"]);
    let rows = read_csv(t.path().join("p/profile.csv"));
    assert_eq!(rows[0].join(","), "layer,head,policy,recovery,cost_tokens");
    assert_eq!(rows.len(), 1 + 8);
    for r in &rows[1..] {
        let recovery: f64 = r[3].parse().unwrap();
        assert!(recovery >= 0.95 - 1e-12, "{r:?}");
    }
    assert!(t.path().join("p/layers.csv").exists());

    ok(t.path(), &["profile", "--plan", "plan.ini", "--criterion=cosine", "--out", "c"]);
    ok(t.path(), &["profile", "--plan", "plan.ini", "--feasible=drop:frequent", "--out", "d"]);
    let rows = read_csv(t.path().join("d/profile.csv"));
    assert!(rows[1..].iter().all(|r| !r[2].contains("frequent")), "{rows:?}");
}

#[test]
fn flags_override_config() {
    let t = workspace();
    fs::write(
        t.path().join("run.ini"),
        "[model]\nplan = plan.ini\nprompt_len = 20\n[profiler]\nthreshold = 1.0\n[run]\nformat = json\n",
    )
    .unwrap();
    ok(t.path(), &["--config", "run.ini", "profile", "--out", "a"]);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("a/profile.json")).unwrap()).unwrap();
    // threshold 1 leaves only heads whose kept sets cover everything
    assert!(json.as_array().unwrap().iter().all(|r| r["recovery"].as_f64().unwrap() >= 1.0 - 1e-9));
    ok(t.path(), &["--config", "run.ini", "--format", "csv", "profile", "--threshold", "0", "--out", "b"]);
    let rows = read_csv(t.path().join("b/profile.csv"));
    assert!(rows[1..].iter().all(|r| r[2] == "special"), "{rows:?}");
}

#[test]
fn generate_full_and_baselines() {
    let t = workspace();
    ok(t.path(), &["generate", "--plan", "plan.ini", "--prompt-len", "24", "--max-new-tokens", "8", "--policy=full", "--out", "full"]);
    let s = read_csv(t.path().join("full/summary.csv"));
    assert_eq!(s[1][1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(s[1][2].parse::<f64>().unwrap(), 1.0);
    let tokens: serde_json::Value = serde_json::from_str(&fs::read_to_string(t.path().join("full/tokens.json")).unwrap()).unwrap();
    assert_eq!(tokens["tokens"].as_array().unwrap().len(), 8);

    ok(t.path(), &["generate", "--plan", "plan.ini", "--prompt-len", "24", "--max-new-tokens", "8", "--baseline=local+frequent", "--out", "lf"]);
    let rows = read_csv(t.path().join("lf/profile.csv"));
    assert!(rows[1..].iter().all(|r| r[2] == "frequent(r_f=0.3)+local(r_l=0.3)"), "{rows:?}");
    let s = read_csv(t.path().join("lf/summary.csv"));
    assert!(s[1][1].parse::<f64>().unwrap() > 0.0);

    let err = fails(t.path(), &["generate", "--plan", "plan.ini", "--policy", "bogus"]);
    assert!(err.starts_with("error: policy_syntax:"), "{err}");
}

#[test]
fn generated_summary_matches_recount_of_diagnostics() {
    let t = workspace();
    ok(t.path(), &["generate", "--plan", "plan.ini", "--prompt-len", "24", "--max-new-tokens", "12", "--out", "g"]);
    ok(t.path(), &["report", "--diagnostics", "g/diagnostics.ndjson", "--out", "r"]);
    let a = read_csv(t.path().join("g/summary.csv"));
    let b = read_csv(t.path().join("r/summary.csv"));
    assert_eq!(a[0], b[0]);
    for (x, y) in a[1].iter().zip(&b[1]) {
        let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
        assert!((x - y).abs() <= 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn trace_replay_caps_generation() {
    let t = workspace();
    ok(t.path(), &["synth", "--plan", "plan.ini", "--prompt-len", "16", "--decode-steps", "3", "--trace-out", "t.akvt"]);
    ok(t.path(), &["synth", "--plan", "plan.ini", "--prompt-len", "16", "--decode-steps", "3", "--ndjson", "--trace-out", "t.ndjson"]);
    for trace in ["t.akvt", "t.ndjson"] {
        let out = format!("g-{trace}");
        ok(t.path(), &["generate", "--trace", trace, "--max-new-tokens", "50", "--out", &out]);
        let tokens: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(t.path().join(&out).join("tokens.json")).unwrap()).unwrap();
        assert_eq!(tokens["tokens"].as_array().unwrap().len(), 4);
    }
    fs::write(t.path().join("junk.akvt"), b"AKVT\x01\x00").unwrap();
    let err = fails(t.path(), &["generate", "--trace", "junk.akvt"]);
    assert!(err.contains("truncated") || err.contains("malformed"), "{err}");
}

#[test]
fn reports() {
    let t = workspace();
    let out = ok(
        t.path(),
        &[
            "report", "--plan", "plan.ini", "--prompt-len", "24", "--max-new-tokens", "6",
            "--tradeoff", "0.9,0.95,0.99", "--consistency", "1,3,5", "--compare", "local,full",
            "--variant", "drop:frequent", "--variant", "order:special,frequent,local,punct", "--out", "r",
        ],
    );
    assert!(out.contains("stable fraction"), "{out}");
    let tr = read_csv(t.path().join("r/tradeoff.csv"));
    assert_eq!(tr.len(), 1 + 3);
    let pruned: Vec<f64> = tr[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(pruned.windows(2).all(|w| w[0] >= w[1] - 1e-12), "{pruned:?}");
    let cons = read_csv(t.path().join("r/consistency.csv"));
    assert_eq!(cons.len(), 1 + 8 * 3);
    let cmp = fs::read_to_string(t.path().join("r/comparison.csv")).unwrap();
    let methods: Vec<&str> = cmp.lines().skip(1).map(|l| l.rsplitn(3, ',').last().unwrap()).collect();
    assert_eq!(
        methods,
        [
            "adaptive",
            "fixed:local(r_l=0.3)",
            "fixed:full",
            "\"adaptive:order:special,punct,local\"",
            "\"adaptive:order:special,frequent,local,punct\""
        ]
    );

    let err = fails(t.path(), &["report", "--plan", "plan.ini", "--consistency", "2,3"]);
    assert!(err.contains("start at 1"), "{err}");
    let err = fails(t.path(), &["report", "--diagnostics", "nope.ndjson"]);
    assert!(err.contains("nope.ndjson"), "{err}");
    fails(t.path(), &["report"]);
}

#[test]
fn memory_shapes() {
    let t = workspace();
    let out = ok(t.path(), &["memory", "--shape", "7b"]);
    assert!(out.contains("4294967296") && out.contains("4.295e9"), "{out}");
    assert!(out.contains("sidecar_overhead_fraction 0.0078125"), "{out}");
    let out = ok(t.path(), &["memory", "--layers", "1", "--heads", "1", "--head-dim", "1", "--batch", "1", "--seq-len", "1"]);
    assert!(out.starts_with("full_cache_bytes 4 "), "{out}");
    ok(t.path(), &["report", "--memory", "13b", "--out", "m"]);
    let rows = read_csv(t.path().join("m/memory.csv"));
    assert_eq!(rows[1][6], "6710886400");
    fails(t.path(), &["memory", "--shape", "3b"]);
    fails(t.path(), &["memory", "--layers", "2"]);
}

#[test]
fn usage_errors_are_one_line() {
    let t = workspace();
    let out = akv(t.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error: usage:"), "{err}");
    let err = fails(t.path(), &["profile", "--plan", "plan.ini", "--threshold", "1.5"]);
    assert!(err.starts_with("error: invalid_parameter:"), "{err}");
    let err = fails(t.path(), &["generate", "--plan", "plan.ini", "--sampling", "nucleus", "--top-p", "0"]);
    assert!(err.contains("top_p"), "{err}");
    assert!(akv(t.path(), &["--help"]).status.success());
}
