use std::path::{Path, PathBuf};

use jointstat::catalog::g_bits;
use jointstat::SampleSpace;
use jointstat::Sequence;
use jointstat_cli::config::RunConfig;
use jointstat_cli::ingest::{ingest, render, IngestError, StreamFormat};
use jointstat_cli::{run_command, Outcome, EXIT_IO, EXIT_OK, EXIT_SUITE_FAILURE, EXIT_VALIDATION};
use proptest::prelude::*;
use serde_json::Value;
use tempfile::TempDir;

const MONOBIT: &str = r#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},
  "n":4,"N":1,"h":1,"s":1,"triples":[{"sum":{"test":"monobit"}}]}"#;

const PAIR: &str = r#"{"version":1,"null_model":{"kind":"uniform"},"n":16384,"N":4,"h":1,"s":1,
  "triples":[{"sum":{"test":"mean_uniform"}},{"sum":{"test":"centered_square"}}],
  "methods":{"phi":{"method":"monte_carlo","replicates":200000,"seed":11}}}"#;

const FULL: &str = r#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},
  "n":1024,"N":4,"h":2,"s":2,
  "triples":[{"sum":{"test":"monobit"},"lb":{"test":"block_frequency","n_lb":2},"sb":{"test":"ones_count","l_sb":2}}],
  "quads":[{"name":"square","coeffs":[[1.0]],"sum_refs":[1]}]}"#;

fn write(dir: &TempDir, name: &str, contents: &[u8]) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, contents).unwrap();
    path
}

fn run(args: &[&str]) -> Outcome {
    let mut argv = vec!["jointstat"];
    argv.extend_from_slice(args);
    run_command(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(out: &Outcome) -> Value {
    assert_eq!(out.code, EXIT_OK, "stderr: {}", out.stderr);
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stat(doc: &Value, label: &str) -> f64 {
    doc["statistics"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["label"] == label)
        .unwrap()["value"]
        .as_f64()
        .unwrap()
}

#[test]
fn eval_monobit_all_ones() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", MONOBIT.as_bytes());
    let input = write(&dir, "ones.bin", &[0xF0]);
    let out = run(&[
        "--config",
        p(&cfg),
        "eval",
        "--input",
        p(&input),
        "--format",
        "bits_packed",
        "--length",
        "4",
    ]);
    assert_eq!(stat(&json(&out), "sum[1]"), 2.0);
    let ascii = write(&dir, "ones.txt", b"1 1\n11\n");
    let out = run(&[
        "--config",
        p(&cfg),
        "eval",
        "--input",
        p(&ascii),
        "--format",
        "bits_ascii",
    ]);
    assert_eq!(stat(&json(&out), "sum[1]"), 2.0);
}

#[test]
fn indep_mean_and_centered_square() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", PAIR.as_bytes());
    let doc = json(&run(&["--config", p(&cfg), "indep"]));
    assert_eq!(doc["verdict"], "independent");
    assert!(doc["pairs"][0]["violations"].as_array().unwrap().is_empty());
}

#[test]
fn indep_duplicate_reports_one_over_n() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "c.json",
        br#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},"n":64,"N":4,"h":1,"s":1,
            "triples":[{"sum":{"test":"monobit"}},{"sum":{"test":"monobit"}}]}"#,
    );
    let doc = json(&run(&[
        "--config",
        p(&cfg),
        "indep",
        "--groups",
        "sum[1];sum[2]",
    ]));
    assert_eq!(doc["verdict"], "not independent");
    let v = &doc["pairs"][0]["violations"][0];
    assert_eq!(v["u"], "sum[1]");
    assert_eq!(v["v"], "sum[2]");
    assert_eq!(v["value"].as_f64().unwrap(), 0.25);
}

#[test]
fn covariance_sum_diagonal_is_one_over_n() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        &dir,
        "c.json",
        br#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},"n":64,"N":4,"h":2,"s":2,
            "triples":[{"sum":{"test":"monobit"}}]}"#,
    );
    let doc = json(&run(&["--config", p(&cfg), "covariance"]));
    let coords: Vec<&str> = doc["coordinates"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_str().unwrap())
        .collect();
    let i = coords.iter().position(|&c| c == "sum[1]").unwrap();
    assert_eq!(doc["g"][i][i].as_f64().unwrap(), 0.25);
    assert_eq!(doc["phi"][i][i].as_f64().unwrap(), 2.0);
}

#[test]
fn covariance_csv_has_five_rows() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", FULL.as_bytes());
    let out = run(&["--config", p(&cfg), "--emit", "csv_tables", "covariance"]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    let text = String::from_utf8(out.stdout).unwrap();
    let g = text
        .split("\n\n")
        .find(|t| t.starts_with("# table=g "))
        .unwrap();
    let lines: Vec<&str> = g.lines().collect();
    assert!(
        lines[0].contains(" dim=5 ") && lines[0].contains(" N=4 ") && lines[0].contains(" h=2 ")
    );
    assert_eq!(lines[1].split(',').count(), 6);
    assert_eq!(lines.len() - 2, 5);
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(run(&["--config", p(&missing), "covariance"]).code, EXIT_IO);

    let bad = write(
        &dir,
        "bad.json",
        br#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},"n":64,"N":4,"h":3,"s":3,
            "triples":[{"sum":{"test":"monobit"},"sb":{"test":"ones_count","l_sb":2}}]}"#,
    );
    let out = run(&["--config", p(&bad), "covariance"]);
    assert_eq!(out.code, EXIT_VALIDATION);
    assert!(!out.stderr.is_empty());
    assert_eq!(run(&["covariance", "--no-such-flag"]).code, EXIT_VALIDATION);

    let cfg = write(&dir, "c.json", MONOBIT.as_bytes());
    let garbage = write(&dir, "g.txt", b"10x1");
    let out = run(&[
        "--config",
        p(&cfg),
        "eval",
        "--input",
        p(&garbage),
        "--format",
        "bits_ascii",
    ]);
    assert_eq!(out.code, EXIT_IO);
    assert!(out.stderr.contains("byte 2"), "{}", out.stderr);
}

#[test]
fn mc_assert_rejects_biased_generator() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", FULL.as_bytes());
    let biased = run(&[
        "--config",
        p(&cfg),
        "mc",
        "--replicas",
        "200",
        "--generator",
        r#"{"kind":"bernoulli","p":0.75}"#,
        "--assert",
    ]);
    assert_eq!(biased.code, EXIT_SUITE_FAILURE);
    let doc: Value = serde_json::from_slice(&biased.stdout).unwrap();
    assert_eq!(doc["verdict"]["passed"], false);
    let fair = run(&["--config", p(&cfg), "mc", "--replicas", "200", "--assert"]);
    assert_eq!(fair.code, EXIT_OK, "{}", fair.stderr);
}

#[test]
fn reports_are_reproducible_across_workers() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", FULL.as_bytes());
    let cases: [&[&str]; 4] = [
        &[
            "mc",
            "--replicas",
            "300",
            "--seed",
            "5",
            "--limit-draws",
            "500",
            "--keep-replicas",
        ],
        &["limit", "--draws", "3000", "--seed", "2"],
        &[
            "probe",
            "--grid",
            "64,128,256",
            "--replicas",
            "150",
            "--seed",
            "9",
        ],
        &[
            "probe",
            "--mode",
            "convergence",
            "--grid",
            "64,128,256",
            "--replicas",
            "150",
            "--limit-draws",
            "500",
        ],
    ];
    for case in cases {
        let mut outputs = Vec::new();
        for workers in ["1", "8", "8"] {
            let mut args = vec!["--config", p(&cfg), "--workers", workers];
            args.extend_from_slice(case);
            let out = run(&args);
            assert_eq!(out.code, EXIT_OK, "{case:?}: {}", out.stderr);
            outputs.push(out.stdout);
        }
        assert_eq!(outputs[0], outputs[1], "{case:?}");
        assert_eq!(outputs[1], outputs[2], "{case:?}");
    }
}

#[test]
fn report_file_and_config_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", FULL.as_bytes());
    let out_path = dir.path().join("report.json");
    let out = run(&[
        "--config",
        p(&cfg),
        "--output",
        p(&out_path),
        "limit",
        "--draws",
        "200",
    ]);
    assert_eq!(out.code, EXIT_OK, "{}", out.stderr);
    assert!(out.stdout.is_empty());
    let text = std::fs::read_to_string(&out_path).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    let echoed: RunConfig = serde_json::from_value(doc["config"].clone()).unwrap();
    let original = RunConfig::parse(FULL).unwrap();
    assert_eq!(echoed, original);
    let (a, b) = (echoed.battery().unwrap(), original.battery().unwrap());
    assert_eq!(format!("{:?}", a.config()), format!("{:?}", b.config()));
    assert_eq!(a.k_star(), b.k_star());

    let again = dir.path().join("again.json");
    run(&[
        "--config",
        p(&cfg),
        "--output",
        p(&again),
        "limit",
        "--draws",
        "200",
    ]);
    assert_eq!(
        std::fs::read(&out_path).unwrap(),
        std::fs::read(&again).unwrap()
    );
}

#[test]
fn unknown_fields_and_wrong_slots_are_rejected() {
    let dir = TempDir::new().unwrap();
    let extra = write(
        &dir,
        "a.json",
        br#"{"version":1,"null_model":{"kind":"uniform"},"n":64,"N":1,"h":1,"s":1,"triples":[],"colour":1}"#,
    );
    assert_eq!(
        run(&["--config", p(&extra), "covariance"]).code,
        EXIT_VALIDATION
    );
    let slot = write(
        &dir,
        "b.json",
        br#"{"version":1,"null_model":{"kind":"finite","pmf":[0.5,0.5]},"n":64,"N":1,"h":1,"s":1,
            "triples":[{"sum":{"test":"block_frequency","n_lb":2}}]}"#,
    );
    let out = run(&["--config", p(&slot), "covariance"]);
    assert_eq!(out.code, EXIT_VALIDATION);
    assert!(out.stderr.contains("not sum"), "{}", out.stderr);
}

#[test]
fn float_ingestion_feeds_g_bits() {
    let seq = ingest(b"0.625\n", StreamFormat::FloatsText, None).unwrap();
    assert_eq!(seq.len(), 1);
    assert_eq!(g_bits(seq.data()[0], 3).unwrap(), vec![1, 0, 1]);
    assert!(matches!(
        ingest(b"-0.1\n", StreamFormat::FloatsText, None),
        Err(IngestError::OutOfRangeFloat { .. })
    ));
}

#[test]
fn binary_entry_point() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "c.json", MONOBIT.as_bytes());
    let input = write(&dir, "ones.txt", b"1111");
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_jointstat"))
        .args([
            "--config",
            p(&cfg),
            "eval",
            "--input",
            p(&input),
            "--format",
            "bits_ascii",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(stat(&doc, "sum[1]"), 2.0);
}

proptest! {
    #[test]
    fn bit_formats_round_trip(bits in prop::collection::vec(0u8..2, 1..200)) {
        let seq = Sequence::from_bits(&bits).unwrap();
        for format in [StreamFormat::BitsPacked, StreamFormat::BitsAscii] {
            let back = ingest(&render(&seq, format), format, Some(bits.len())).unwrap();
            prop_assert_eq!(back.data(), seq.data());
        }
    }

    #[test]
    fn float_formats_round_trip(xs in prop::collection::vec(0.0f64..=1.0, 1..200)) {
        let seq = Sequence::new(SampleSpace::UnitInterval, xs).unwrap();
        for format in [StreamFormat::FloatsText, StreamFormat::FloatsLe64] {
            let back = ingest(&render(&seq, format), format, None).unwrap();
            prop_assert_eq!(back.data(), seq.data());
        }
    }
}
