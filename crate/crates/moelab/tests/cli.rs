//! The command line, driven in-process and through the built binary.

use std::path::Path;
use std::process::Command;

use moelab::cli::run;
use moelab::report::CharacterizationReport;

fn moelab(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("moelab").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

/// Small dimensions so characterization runs in milliseconds.
const SMALL: &[&str] = &[
    "--hidden", "32", "--batch", "2", "--seq", "16", "--runs", "32", "--reps", "1", "--warmup", "4",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

#[test]
fn params_linear_reference_size() {
    assert_eq!(
        moelab(&[
            "params",
            "--router",
            "linear",
            "--hidden",
            "768",
            "--experts",
            "8"
        ]),
        (0, "6144\n".into(), String::new())
    );
}

#[test]
fn params_all_lists_every_router() {
    let (code, out, _) = moelab(&["params", "--all"]);
    assert_eq!(code, 0);
    assert!(
        out.starts_with("linear,6144\nattention,49664\nmlp,99464\nhybrid,55810\n"),
        "{out}"
    );
    assert_eq!(out.lines().count(), 7);
}

#[test]
fn unknown_router_is_usage_error_listing_names() {
    let (code, _, err) = moelab(&["characterize", "--router", "nosuch"]);
    assert_eq!(code, 1);
    for name in [
        "linear",
        "attention",
        "mlp",
        "hybrid",
        "mlp-hadamard",
        "hash",
        "self-supervised",
    ] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(moelab(&[]).0, 1);
    assert_eq!(moelab(&["frobnicate"]).0, 1);
    assert_eq!(moelab(&["params", "--all", "--router", "mlp"]).0, 1);
    assert_eq!(moelab(&["params", "--experts", "2", "--top-k", "3"]).0, 1);
    assert_eq!(moelab(&["params", "--set", "nosuch=1"]).0, 1);
    assert_eq!(moelab(&["characterize", "--format", "xml"]).0, 1);
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for sub in [
        "characterize",
        "bench",
        "params",
        "train",
        "export",
        "gen-embeddings",
    ] {
        let (code, out, _) = moelab(&[sub, "--help"]);
        assert_eq!(code, 0, "{sub}");
        assert!(out.contains("Usage"), "{sub}");
    }
    assert_eq!(moelab(&["--help"]).0, 0);
}

#[test]
fn missing_files_are_runtime_errors_naming_the_path() {
    let (code, _, err) = moelab(&["characterize", "--embeddings", "/nonexistent/e.moeb"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/e.moeb"), "{err}");
    let (code, _, err) = moelab(&["params", "--config", "/nonexistent/c.conf"]);
    assert_eq!(code, 2);
    assert!(err.contains("/nonexistent/c.conf"), "{err}");
}

#[test]
fn characterize_hash_csv() {
    let (code, out, err) = moelab(&with_small(&[
        "characterize",
        "--router",
        "hash",
        "--seed",
        "1",
        "--format",
        "csv",
    ]));
    assert_eq!(code, 0, "{err}");
    let report = CharacterizationReport::from_csv(&out).unwrap();
    let row = &report.rows[0];
    assert_eq!(
        (row.router.as_str(), row.param_count, row.mean_topk_prob),
        ("hash", 0, 0.5)
    );
    assert!((row.utilization.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn characterize_all_json_has_one_row_per_router() {
    let (code, out, err) = moelab(&with_small(&["characterize", "--all", "--format", "json"]));
    assert_eq!(code, 0, "{err}");
    let report = CharacterizationReport::from_json(&out).unwrap();
    let names: Vec<&str> = report.rows.iter().map(|r| r.router.as_str()).collect();
    assert_eq!(
        names,
        [
            "linear",
            "attention",
            "mlp",
            "hybrid",
            "mlp-hadamard",
            "hash",
            "self-supervised"
        ]
    );
}

/// Report without its wall-clock columns.
fn strip_latency(csv: &str) -> String {
    let mut r = CharacterizationReport::from_csv(csv).unwrap();
    for row in &mut r.rows {
        row.latency_router_us = 0.0;
        row.latency_total_us = 0.0;
    }
    r.to_csv()
}

#[test]
fn characterize_is_deterministic_apart_from_latency() {
    let args = with_small(&["characterize", "--router", "attention", "--seed", "5"]);
    let a = moelab(&args).1;
    let b = moelab(&args).1;
    assert_eq!(strip_latency(&a), strip_latency(&b));
    let c = moelab(&with_small(&[
        "characterize",
        "--router",
        "attention",
        "--seed",
        "6",
    ]))
    .1;
    assert_ne!(strip_latency(&a), strip_latency(&c));
}

#[test]
fn config_file_and_flags_compose() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        "# small run\nhidden = 32\nexperts = 4\nmlp_hidden = 16\n",
    )
    .unwrap();
    let c = conf.to_str().unwrap();
    // 32*16 + 16 + 16*4 + 4
    assert_eq!(
        moelab(&["params", "--config", c, "--router", "mlp"]).1,
        "596\n"
    );
    assert_eq!(
        moelab(&["params", "--config", c, "--router", "mlp", "--experts", "8"]).1,
        "664\n"
    );
    assert_eq!(
        moelab(&[
            "params",
            "--config",
            c,
            "--router",
            "mlp",
            "--set",
            "mlp_hidden=8"
        ])
        .1,
        "300\n"
    );
    std::fs::write(&conf, "hidden = 32\nbogus = 1\n").unwrap();
    let (code, _, err) = moelab(&["params", "--config", c]);
    assert_eq!(code, 1);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn gen_embeddings_then_characterize_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.moeb");
    let p = path.to_str().unwrap();
    let (code, _, err) = moelab(&[
        "gen-embeddings",
        "--output",
        p,
        "--batch",
        "2",
        "--seq",
        "8",
        "--hidden",
        "32",
        "--seed",
        "3",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 + 2 * 8 * 32 * 4);
    let args = with_small(&["characterize", "--router", "linear", "--embeddings", p]);
    let (code, out, err) = moelab(&args);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        CharacterizationReport::from_csv(&out).unwrap().rows.len(),
        1
    );
    let (code, _, err) = moelab(&[
        "characterize",
        "--router",
        "linear",
        "--embeddings",
        p,
        "--hidden",
        "16",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("hidden size 32"), "{err}");
}

#[test]
fn bench_reports_router_and_total_columns() {
    let (code, out, err) = moelab(&with_small(&["bench", "--router", "mlp", "--with-experts"]));
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    let fields: Vec<f64> = lines[1]
        .split(',')
        .skip(1)
        .map(|f| f.parse().unwrap())
        .collect();
    assert_eq!(fields.len(), 6);
    assert!(fields.iter().all(|&v| v > 0.0), "{out}");
}

#[test]
fn export_writes_figure_files() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("fig");
    let pre = prefix.to_str().unwrap();
    let (code, out, err) = moelab(&[
        "export",
        "--router",
        "mlp-hadamard",
        "--prefix",
        pre,
        "--pgm",
        "--hidden",
        "32",
        "--batch",
        "1",
        "--seq",
        "8",
    ]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(out.lines().count(), 4);
    for suffix in [
        "_heatmap.csv",
        "_bars.csv",
        "_histogram.csv",
        "_heatmap.pgm",
    ] {
        assert!(Path::new(&format!("{pre}{suffix}")).exists(), "{suffix}");
    }
}

fn corpus() -> String {
    concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/corpus.txt").to_string()
}

#[test]
fn train_logs_and_saves() {
    let dir = tempfile::tempdir().unwrap();
    let save = dir.path().join("toy.moet");
    let c = corpus();
    let args = [
        "train",
        "--corpus",
        &c,
        "--hidden",
        "16",
        "--steps",
        "4",
        "--log-every",
        "2",
        "--seq-len",
        "32",
        "--save",
        save.to_str().unwrap(),
    ];
    let (code, out, err) = moelab(&args);
    assert_eq!(code, 0, "{err}");
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "step,loss,aux");
    let steps: Vec<&str> = rows[1..]
        .iter()
        .map(|r| r.split(',').next().unwrap())
        .collect();
    assert_eq!(steps, ["0", "2", "4"]);
    assert_eq!(moelab(&args).1, out, "same seed, same log");
    assert!(moelab::container::load_tensors(&save).unwrap().len() > 3);
}

#[test]
fn train_rejects_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let small = dir.path().join("small.txt");
    std::fs::write(&small, "a tiny corpus\n").unwrap();
    let (code, _, err) = moelab(&["train", "--corpus", small.to_str().unwrap()]);
    assert_eq!(code, 2);
    assert!(err.contains("1000"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_moelab");
    let ok = Command::new(bin)
        .args(["params", "--router", "hash"])
        .output()
        .unwrap();
    assert_eq!(
        (ok.status.code(), ok.stdout.as_slice()),
        (Some(0), &b"0\n"[..])
    );
    let usage = Command::new(bin)
        .args(["params", "--router", "nope"])
        .output()
        .unwrap();
    assert_eq!(usage.status.code(), Some(1));
    let runtime = Command::new(bin)
        .args(["params", "--config", "/nonexistent"])
        .output()
        .unwrap();
    assert_eq!(runtime.status.code(), Some(2));
}
