//! End-to-end tests driving the compiled binary through temp directories.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn covis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_covis"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch binary")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read(dir: &Path, rel: &str) -> String {
    fs::read_to_string(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

fn line_count(dir: &Path, rel: &str) -> usize {
    read(dir, rel).lines().count()
}

/// Small sampler settings so tests stay fast; inference quality is not the
/// point here.
fn write_quick_config(dir: &Path) {
    fs::write(
        dir.join("quick.json"),
        r#"{"burn_in": 40, "samples": 80, "max_em_iters": 3}"#,
    )
    .unwrap();
}

fn synth_small(dir: &Path) {
    assert_ok(&covis(
        dir,
        &[
            "synth",
            "--users",
            "12",
            "--items",
            "8",
            "--levels",
            "4",
            "--seed",
            "5",
            "--output-dir",
            "data",
        ],
    ));
}

#[test]
fn synth_writes_full_grid_and_truth_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    // Dense grid: one CSV row per cell plus the header.
    assert_eq!(line_count(tmp.path(), "data/ratings.csv"), 12 * 8 + 1);
    assert_eq!(line_count(tmp.path(), "data/truth_embedding.tsv"), 12 + 8);
    let function = read(tmp.path(), "data/truth_function.txt");
    assert!(function.starts_with("4 "), "{function}");
    // 4 levels -> 3 thresholds -> 4 whitespace-separated fields.
    assert_eq!(function.trim().split_whitespace().count(), 4);
}

#[test]
fn synth_rejects_degenerate_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let out = covis(tmp.path(), &["synth", "--levels", "1"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("levels"), "{}", stderr(&out));
}

#[test]
fn embed_outputs_are_byte_identical_across_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    for dir in ["run1", "run2"] {
        assert_ok(&covis(
            tmp.path(),
            &[
                "embed",
                "--input",
                "data/ratings.csv",
                "--config",
                "quick.json",
                "--seed",
                "11",
                "--output-dir",
                dir,
            ],
        ));
    }
    for artifact in ["embedding.tsv", "report.json", "index_map.csv"] {
        assert_eq!(
            read(tmp.path(), &format!("run1/{artifact}")),
            read(tmp.path(), &format!("run2/{artifact}")),
            "{artifact} differs between reruns"
        );
    }
    assert_eq!(line_count(tmp.path(), "run1/embedding.tsv"), 12 + 8);
    assert_eq!(line_count(tmp.path(), "run1/index_map.csv"), 12 + 8 + 1);
}

#[test]
fn embed_missing_input_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = covis(tmp.path(), &["embed", "--input", "no_such_ratings.csv"]);
    assert!(!out.status.success());
    assert!(
        stderr(&out).contains("no_such_ratings.csv"),
        "{}",
        stderr(&out)
    );
}

#[test]
fn embed_random_variant_draws_without_fitting() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "embed",
            "--input",
            "data/ratings.csv",
            "--variant",
            "random",
            "--seed",
            "4",
            "--output-dir",
            "rnd",
        ],
    ));
    assert_eq!(line_count(tmp.path(), "rnd/embedding.tsv"), 12 + 8);
    let report: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "rnd/report.json")).unwrap();
    assert_eq!(report["variant"], "random");
    assert!(report["run"].is_null());
}

#[test]
fn eval_defaults_compare_all_four_variants() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "eval",
            "--input",
            "data/ratings.csv",
            "--config",
            "quick.json",
            "--seed",
            "3",
            "--replicas",
            "2",
            "--output-dir",
            "ev",
        ],
    ));
    // Header + 4 variants x 2 replicas + 2 ideal rows.
    assert_eq!(line_count(tmp.path(), "ev/eval_report.csv"), 1 + 8 + 2);
    let report: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "ev/eval_report.json")).unwrap();
    let variants = report["experiment"]["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 4);
    let names: Vec<&str> = variants
        .iter()
        .map(|v| v["variant"].as_str().unwrap())
        .collect();
    assert!(names.contains(&"random"), "{names:?}");
    assert_eq!(
        report["experiment"]["ideal"].as_array().unwrap().len(),
        2,
        "one ideal value per replica"
    );
}

#[test]
fn eval_variant_flags_select_a_subset_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "eval",
            "--input",
            "data/ratings.csv",
            "--config",
            "quick.json",
            "--replicas",
            "2",
            "--variant",
            "random",
            "--variant",
            "mcmc",
            "--output-dir",
            "ev",
        ],
    ));
    let csv = read(tmp.path(), "ev/eval_report.csv");
    assert_eq!(csv.lines().count(), 1 + 4 + 2);
    assert!(!csv.contains("mcmc-reg"));
    let report: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "ev/eval_report.json")).unwrap();
    let variants = report["experiment"]["variants"].as_array().unwrap();
    assert_eq!(variants[0]["variant"], "random");
    assert_eq!(variants[1]["variant"], "mcmc");
}

#[test]
fn eval_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    let args = [
        "eval",
        "--input",
        "data/ratings.csv",
        "--config",
        "quick.json",
        "--seed",
        "9",
        "--replicas",
        "3",
        "--variant",
        "mcmc-sa",
        "--variant",
        "random",
    ];
    for dir in ["ev1", "ev2"] {
        let mut full: Vec<&str> = args.to_vec();
        full.extend_from_slice(&["--output-dir", dir]);
        assert_ok(&covis(tmp.path(), &full));
    }
    assert_eq!(
        read(tmp.path(), "ev1/eval_report.json"),
        read(tmp.path(), "ev2/eval_report.json")
    );
    assert_eq!(
        read(tmp.path(), "ev1/eval_report.csv"),
        read(tmp.path(), "ev2/eval_report.csv")
    );
}

#[test]
fn rerunning_from_the_echoed_config_reproduces_the_embedding() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "embed",
            "--input",
            "data/ratings.csv",
            "--config",
            "quick.json",
            "--seed",
            "7",
            "--output-dir",
            "orig",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "orig/report.json")).unwrap();
    fs::write(
        tmp.path().join("echo.json"),
        serde_json::to_string(&report["config"]).unwrap(),
    )
    .unwrap();
    // No --seed this time: the echoed config alone must reproduce the run.
    assert_ok(&covis(
        tmp.path(),
        &[
            "embed",
            "--input",
            "data/ratings.csv",
            "--config",
            "echo.json",
            "--output-dir",
            "replay",
        ],
    ));
    assert_eq!(
        read(tmp.path(), "orig/embedding.tsv"),
        read(tmp.path(), "replay/embedding.tsv")
    );
}

#[test]
fn plot_draws_markers_warns_on_unknown_labels() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "embed",
            "--input",
            "data/ratings.csv",
            "--config",
            "quick.json",
            "--output-dir",
            "run",
        ],
    ));
    let mut labels = String::from("item,category\n");
    for j in 0..8 {
        let category = if j < 4 { "early" } else { "late" };
        labels.push_str(&format!("g{j},{category}\n"));
    }
    labels.push_str("ghost,early\n");
    fs::write(tmp.path().join("labels.csv"), labels).unwrap();
    let out = covis(
        tmp.path(),
        &[
            "plot",
            "--embedding",
            "run/embedding.tsv",
            "--labels",
            "labels.csv",
            "--output",
            "out/plot.svg",
        ],
    );
    assert_ok(&out);
    assert!(stderr(&out).contains("ghost"), "{}", stderr(&out));
    let svg = read(tmp.path(), "out/plot.svg");
    assert_eq!(svg.matches("class=\"pt-user\"").count(), 12);
    assert_eq!(svg.matches("class=\"pt-item\"").count(), 8);
    assert_eq!(svg.matches("class=\"legend-entry\"").count(), 2);
}

#[test]
fn plot_rejects_non_planar_embeddings() {
    let tmp = tempfile::tempdir().unwrap();
    synth_small(tmp.path());
    write_quick_config(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "embed",
            "--input",
            "data/ratings.csv",
            "--config",
            "quick.json",
            "--dim",
            "3",
            "--output-dir",
            "run3d",
        ],
    ));
    let out = covis(
        tmp.path(),
        &["plot", "--embedding", "run3d/embedding.tsv"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("--dim 2"), "{}", stderr(&out));
}

#[test]
fn raw_scale_bounds_normalize_input_ratings() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("raw.csv"),
        "user,item,rating\na,x,1\na,y,5\nb,x,3\nb,y,5\n",
    )
    .unwrap();
    write_quick_config(tmp.path());
    assert_ok(&covis(
        tmp.path(),
        &[
            "embed",
            "--input",
            "raw.csv",
            "--config",
            "quick.json",
            "--scale-min",
            "1",
            "--scale-max",
            "5",
            "--output-dir",
            "run",
        ],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&read(tmp.path(), "run/report.json")).unwrap();
    assert_eq!(report["scale"]["min_raw"], 1.0);
    assert_eq!(report["scale"]["max_raw"], 5.0);
    // Out-of-scale input must fail loudly instead.
    let out = covis(
        tmp.path(),
        &["embed", "--input", "raw.csv", "--config", "quick.json"],
    );
    assert!(!out.status.success(), "rating 5 exceeds the default unit scale");
}
