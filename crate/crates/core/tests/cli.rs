//! End-to-end checks of the command-line front end: file layout, byte
//! determinism, and exit codes, using short runs to keep the suite quick.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use vodswarm::cli::{execute, parse_args, run};

fn temp_out(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vodswarm_cli_{}_{tag}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn parse(argv: &[&str]) -> vodswarm::cli::RunMatrix {
    let mut full = vec!["vodswarm"];
    full.extend_from_slice(argv);
    parse_args(full).expect("argv should parse")
}

/// Every regular file in `dir`, keyed by file name.
fn dir_contents(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).expect("output dir should exist") {
        let entry = entry.unwrap();
        let name = entry.file_name().into_string().unwrap();
        out.insert(name, fs::read(entry.path()).unwrap());
    }
    out
}

#[test]
fn a_full_grid_writes_one_summary_per_cell_plus_the_comparison_table() {
    let out = temp_out("grid");
    let matrix = parse(&[
        "--reps",
        "1",
        "--duration",
        "600",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(matrix.cells.len(), 27);
    execute(&matrix).unwrap();

    let files = dir_contents(&out);
    let summaries = files.keys().filter(|k| k.starts_with("summary_")).count();
    assert_eq!(summaries, 27);
    assert!(files.contains_key("comparison.csv"));
    assert!(files.contains_key("report.txt"));

    let text = String::from_utf8(files["summary_lp_hi_original.csv"].clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "scenario,profile,policy,metric,mean,ci_low,ci_high,rel_halfwidth,reps"
    );
    assert_eq!(lines.len(), 7); // header + six metrics
    for (row, metric) in lines[1..].iter().zip(["erc", "ps", "est", "sd", "ni", "tr"]) {
        assert!(
            row.starts_with(&format!("lp,hi,original,{metric},")),
            "unexpected row {row}"
        );
    }
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn reruns_with_the_same_seed_are_byte_identical() {
    let cli = |out: &Path| {
        parse(&[
            "--scenario",
            "lp",
            "--profile",
            "hi",
            "--policy",
            "original",
            "--reps",
            "2",
            "--seed",
            "42",
            "--duration",
            "600",
            "--emit",
            "per-run",
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let first = temp_out("rerun_a");
    let second = temp_out("rerun_b");
    execute(&cli(&first)).unwrap();
    execute(&cli(&second)).unwrap();

    let a = dir_contents(&first);
    let b = dir_contents(&second);
    assert_eq!(
        a.keys().collect::<Vec<_>>(),
        vec!["comparison.csv", "report.txt", "runs_lp_hi_original.csv", "summary_lp_hi_original.csv"]
    );
    assert_eq!(a, b);
    fs::remove_dir_all(&first).unwrap();
    fs::remove_dir_all(&second).unwrap();
}

#[test]
fn the_trace_level_adds_per_run_logs() {
    let out = temp_out("trace");
    let matrix = parse(&[
        "--scenario",
        "bp",
        "--profile",
        "li",
        "--policy",
        "qbps",
        "--reps",
        "2",
        "--duration",
        "300",
        "--emit",
        "trace",
        "--out",
        out.to_str().unwrap(),
    ]);
    execute(&matrix).unwrap();

    let files = dir_contents(&out);
    for rep in 0..2 {
        let name = format!("trace_bp_li_qbps_rep{rep}.log");
        let text = String::from_utf8(files[&name].clone()).unwrap();
        assert!(text.lines().count() > 10, "{name} looks empty");
        assert!(text.lines().all(|l| l.starts_with("t=")));
    }
    assert!(files.contains_key("runs_bp_li_qbps.csv")); // levels are cumulative
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn the_comparison_table_lines_up_policies_side_by_side() {
    let out = temp_out("compare");
    let matrix = parse(&[
        "--scenario",
        "lp",
        "--profile",
        "hi",
        "--reps",
        "2",
        "--duration",
        "600",
        "--out",
        out.to_str().unwrap(),
    ]);
    execute(&matrix).unwrap();

    let text = fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "scenario,profile,metric,original,sbnp,qbps");
    let erc = lines
        .iter()
        .find(|l| l.starts_with("lp,hi,erc,"))
        .expect("comparison should hold an erc row");
    let values: Vec<&str> = erc.split(',').skip(3).collect();
    assert_eq!(values.len(), 3);
    for v in values {
        let v: f64 = v.parse().unwrap();
        assert!(v.is_finite() && v > 0.0);
    }
    fs::remove_dir_all(&out).unwrap();
}

#[test]
fn exit_codes_separate_usage_errors_from_wide_intervals() {
    assert_eq!(run(["vodswarm", "--reps", "0"]), 2);
    assert_eq!(run(["vodswarm", "--scenario", "never"]), 2);
    assert_eq!(run(["vodswarm", "--help"]), 0);

    // A single replication leaves every interval unbounded, so the CI flag
    // trips, but the results must still be on disk.
    let out = temp_out("flagged");
    let code = run([
        "vodswarm",
        "--scenario",
        "op",
        "--profile",
        "li",
        "--policy",
        "original",
        "--reps",
        "1",
        "--duration",
        "300",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(out.join("summary_op_li_original.csv").exists());
    assert!(out.join("comparison.csv").exists());
    fs::remove_dir_all(&out).unwrap();
}
