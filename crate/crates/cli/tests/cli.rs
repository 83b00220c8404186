use std::path::{Path, PathBuf};
use std::process::Command as Process;

use ccsd_cli::{
    load_banksim, load_ucr, parse_banksim, parse_ucr, run, Cli, CliError, Command, RunConfig, VariantSel,
    CLUSTER_REPORT, FRAUD_REPORT, SCORES_CSV,
};
use ccsd_core::{Ablation, ClusterReport, Method};
use clap::Parser;
use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn resolve(args: &[&str]) -> Result<RunConfig, CliError> {
    let mut argv = vec!["ccsd"];
    argv.extend_from_slice(args);
    RunConfig::resolve(Cli::try_parse_from(argv).unwrap())
}

fn small_grid_config(dir: &Path) -> PathBuf {
    write(
        dir,
        "small.json",
        r#"{"cluster": {"selection": {"tau_grid": [0.05, 0.1], "sigma_grid": [0.5, 1.0]}}}"#,
    )
}

#[test]
fn ucr_two_rows() {
    let s = parse_ucr("1\t0.5\t1.5\t2\n2\t3\t4\t5\n", Path::new("x.tsv"), false).unwrap();
    assert_eq!(s.len(), 2);
    assert_eq!(s[0].values, vec![0.5, 1.5, 2.0]);
    assert_eq!(s[1].label, Some(2));
    assert_eq!(s[1].len(), 3);
}

#[test]
fn ucr_float_labels_and_whitespace() {
    let s = parse_ucr("  1.0000000e+00  2.5 3.5\n", Path::new("x.txt"), false).unwrap();
    assert_eq!(s[0].label, Some(1));
    assert_eq!(s[0].values, vec![2.5, 3.5]);
}

#[test]
fn ucr_delimiters_load_identically() {
    let dir = tempfile::tempdir().unwrap();
    let tab = write(dir.path(), "a.tsv", "0\t1\t2\t3\n1\t4\t5\t6\n");
    let comma = write(dir.path(), "a.csv", "0,1,2,3\n1, 4, 5, 6\n");
    let (a, b) = load_ucr(&tab, &comma, false).unwrap();
    let vals = |v: &[ccsd_core::LabeledSeries]| v.iter().map(|s| (s.label, s.values.clone())).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
}

#[test]
fn ucr_errors_carry_line_numbers() {
    let p = Path::new("bad.tsv");
    match parse_ucr("", p, false) {
        Err(CliError::Parse { .. }) => {}
        other => panic!("empty file: {other:?}"),
    }
    match parse_ucr("0\t1\t2\n\n1\t1\t2\t3\n", p, false) {
        Err(CliError::Parse { line: 3, .. }) => {}
        other => panic!("ragged: {other:?}"),
    }
    assert_eq!(parse_ucr("0\t1\t2\n1\t1\t2\t3\n", p, true).unwrap().len(), 2);
    match parse_ucr("0\t1\t2\n1\t1\tx\n", p, false) {
        Err(CliError::Parse { line: 2, message, .. }) => assert!(message.contains("column 3")),
        other => panic!("non-numeric: {other:?}"),
    }
    match parse_ucr("0\t1\tNaN\n", p, false) {
        Err(CliError::Parse { line: 1, .. }) => {}
        other => panic!("nan: {other:?}"),
    }
    match parse_ucr("a\t1\t2\n", p, false) {
        Err(CliError::Parse { line: 1, .. }) => {}
        other => panic!("label: {other:?}"),
    }
}

#[test]
fn ucr_rejects_mismatched_split_lengths_unless_ragged() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.tsv", "0\t1\t2\t3\n");
    let b = write(dir.path(), "b.tsv", "0\t1\t2\n");
    assert!(load_ucr(&a, &b, false).is_err());
    assert!(load_ucr(&a, &b, true).is_ok());
}

const MINIMAL: &str = "step,customer,merchant,category,amount,fraud\n\
0,C1,M1,food,10.5,0\n\
1,C1,M2,travel,99,1\n";

#[test]
fn banksim_minimal_and_extra_columns() {
    let a = parse_banksim(MINIMAL, Path::new("a.csv")).unwrap();
    assert_eq!(a.len(), 2);
    assert_eq!(a[1].merchant, "M2");
    assert_eq!(a[1].amount, 99.0);
    assert!(a[1].fraud && !a[0].fraud);

    let extra = "Step,age,Customer,zipcode,MERCHANT,category,amount,Fraud,note\n\
                 0,'3',\"'C1'\",'28007','M1','food',10.5,0,x\n\
                 1,'4','C1','28007',\"M2\",'travel',99,1,y\n";
    let b = parse_banksim(extra, Path::new("b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn banksim_schema_and_row_errors() {
    let missing = "step,customer,merchant,category,amount\n0,C1,M1,food,1\n";
    match parse_banksim(missing, Path::new("m.csv")) {
        Err(e @ CliError::Schema { .. }) => {
            assert!(e.to_string().contains("\"fraud\""));
            assert_eq!(e.exit_code(), 2);
        }
        other => panic!("missing column: {other:?}"),
    }
    let bad = "step,customer,merchant,category,amount,fraud\n0,C1,M1,food,1,0\n1,C1,M1,food,abc,0\n";
    match parse_banksim(bad, Path::new("b.csv")) {
        Err(e @ CliError::Parse { line: 3, .. }) => assert_eq!(e.exit_code(), 3),
        other => panic!("bad amount: {other:?}"),
    }
    assert!(matches!(parse_banksim("", Path::new("e.csv")), Err(CliError::Schema { .. })));
}

#[test]
fn bundled_bank_fixture_loads() {
    let r = load_banksim(&fixture("bank_30.csv")).unwrap();
    assert_eq!(r.len(), 30 * 155);
    assert!(r.iter().all(|t| !t.customer.contains('\'')));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let train = fixture("waves_TRAIN.tsv");
    let test = fixture("waves_TEST.csv");
    let cfg = write(
        dir.path(),
        "c.json",
        &format!(
            r#"{{"out": "{}", "threads": 3, "cluster": {{"train": "{}", "test": "{}", "method": "dtw", "seeds": [7, 8], "cap": 10}}}}"#,
            dir.path().join("from_file").display(),
            train.display(),
            test.display()
        ),
    );
    let c = resolve(&["--config", cfg.to_str().unwrap(), "cluster", "--method", "ccsd", "--seeds", "1,2,3"]).unwrap();
    assert_eq!(c.threads, Some(3));
    assert_eq!(c.out, dir.path().join("from_file"));
    match c.command {
        Command::Cluster(r) => {
            assert_eq!(r.method, Method::Ccsd);
            assert_eq!(r.seeds, vec![1, 2, 3]);
            assert_eq!(r.selection.seeds, vec![1, 2, 3]);
            assert_eq!(r.cap, Some(10));
            assert_eq!(r.train, train);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn config_validation() {
    let data = fixture("bank_30.csv");
    let data = data.to_str().unwrap();
    assert!(matches!(resolve(&["fraud", "--data", data]), Err(CliError::Config(_))));
    assert!(matches!(resolve(&["fraud", "--data", "/no/such.csv", "--out", "o"]), Err(CliError::Config(_))));
    assert!(matches!(
        resolve(&["--threads", "0", "fraud", "--data", data, "--out", "o"]),
        Err(CliError::Config(_))
    ));
    let c = resolve(&["fraud", "--data", data, "--out", "o", "--variant", "no_flag"]).unwrap();
    match c.command {
        Command::Fraud(f) => {
            assert_eq!(f.variant, VariantSel::One(Ablation::NoFlag));
            assert_eq!(f.seed, 0);
        }
        other => panic!("{other:?}"),
    }
    assert!(Cli::try_parse_from(["ccsd", "fraud", "--variant", "bogus"]).is_err());
}

fn cluster_args<'a>(cfg: &'a str, method: &'a str, out: &'a str, train: &'a str, test: &'a str) -> Vec<&'a str> {
    vec!["--config", cfg, "cluster", "--train", train, "--test", test, "--method", method, "--out", out]
}

#[test]
fn cluster_reports_are_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_grid_config(dir.path());
    let train = fixture("waves_TRAIN.tsv");
    let test = fixture("waves_TEST.csv");
    let (train, test) = (train.to_str().unwrap(), test.to_str().unwrap());
    let mut reports = Vec::new();
    for (i, threads) in ["1", "1", "2"].into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let mut args = vec!["--threads", threads];
        args.extend(cluster_args(cfg.to_str().unwrap(), "ccsd", out.to_str().unwrap(), train, test));
        run(&resolve(&args).unwrap()).unwrap();
        reports.push(std::fs::read(out.join(CLUSTER_REPORT)).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);

    let v: Value = serde_json::from_slice(&reports[0]).unwrap();
    assert_eq!(v["config"]["command"], "cluster");
    assert_eq!(v["config"]["seeds"], serde_json::json!([0, 1, 2, 3, 4]));
    assert_eq!(v["report"]["audit"]["sigma0_from_train_only"], true);
    assert_eq!(v["report"]["audit"]["selection_on_train_only"], true);
}

#[test]
fn bundled_waveforms_cluster_perfectly_with_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    for method in ["ccsd", "dtw"] {
        let out = dir.path().join(method);
        let args = [
            "cluster",
            "--train",
            fixture("waves_TRAIN.tsv").to_str().unwrap(),
            "--test",
            fixture("waves_TEST.csv").to_str().unwrap(),
            "--method",
            method,
            "--out",
            out.to_str().unwrap(),
        ]
        .map(String::from);
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&resolve(&args).unwrap()).unwrap();
        let wrapper: Value = serde_json::from_slice(&std::fs::read(out.join(CLUSTER_REPORT)).unwrap()).unwrap();
        let report: ClusterReport = serde_json::from_value(wrapper["report"].clone()).unwrap();
        assert_eq!(report.evaluation.nmi_mean, 1.0, "{method}");
        assert_eq!(report.evaluation.nmi_std, 0.0, "{method}");
        assert_eq!(report.evaluation.seeds.len(), 5);
    }
}

#[test]
fn fraud_run_detects_spikes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let data = fixture("bank_30.csv");
    let mut bytes = Vec::new();
    for (i, threads) in ["1", "2"].into_iter().enumerate() {
        let out = dir.path().join(format!("f{i}"));
        let args = [
            "--threads",
            threads,
            "fraud",
            "--data",
            data.to_str().unwrap(),
            "--variant",
            "all",
            "--seed",
            "0",
            "--scores",
            "--out",
            out.to_str().unwrap(),
        ];
        let outcome = run(&resolve(&args).unwrap()).unwrap();
        assert_eq!(outcome.files.len(), 2);
        bytes.push((
            std::fs::read(out.join(FRAUD_REPORT)).unwrap(),
            std::fs::read(out.join(SCORES_CSV)).unwrap(),
        ));
    }
    assert_eq!(bytes[0], bytes[1]);

    let v: Value = serde_json::from_slice(&bytes[0].0).unwrap();
    let variants = v["report"]["variants"].as_array().unwrap();
    assert_eq!(variants.len(), 4);
    assert_eq!(variants[0]["variant"], "full");
    assert!(variants[0]["test"]["auc"].as_f64().unwrap() > 0.9);
    let audit = &v["report"]["audit"];
    for flag in ["splits_disjoint", "library_provenance", "library_before_scoring", "strict_past_local_support"] {
        assert_eq!(audit[flag], true, "{flag}");
    }
    assert_eq!(v["config"]["variant"], "all");

    let csv = String::from_utf8(bytes[0].1.clone()).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("variant,split,customer,score,label"));
    // 4 variants over 3 + 3 normal and 4 + 6 fraud evaluation accounts.
    assert_eq!(lines.count(), 4 * 16);
}

fn exit_code(args: &[&str]) -> i32 {
    Process::new(env!("CARGO_BIN_EXE_ccsd"))
        .args(args)
        .env("RUST_LOG", "off")
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let schema = write(dir.path(), "s.csv", "step,customer,merchant,category,amount\n0,C,M,c,1\n");
    assert_eq!(exit_code(&["fraud", "--data", schema.to_str().unwrap(), "--out", out]), 2);
    assert_eq!(exit_code(&["fraud", "--data", "/missing.csv", "--out", out]), 2);

    let bad = write(dir.path(), "b.tsv", "0\t1\t2\n1\t1\toops\n");
    let b = bad.to_str().unwrap();
    assert_eq!(exit_code(&["cluster", "--train", b, "--test", b, "--method", "dtw", "--out", out]), 3);

    // A condition bandwidth far below the sampling step leaves the time
    // Gram at the identity, which the effective-rank filter rejects.
    let cfg = write(dir.path(), "tiny.json", r#"{"cluster": {"selection": {"tau_grid": [0.001], "sigma_grid": [1.0]}}}"#);
    let train = fixture("waves_TRAIN.tsv");
    let t = train.to_str().unwrap();
    assert_eq!(
        exit_code(&["--config", cfg.to_str().unwrap(), "cluster", "--train", t, "--test", t, "--method", "ccsd", "--out", out]),
        4
    );

    let ok = exit_code(&[
        "cluster",
        "--train",
        t,
        "--test",
        fixture("waves_TEST.csv").to_str().unwrap(),
        "--method",
        "dtw",
        "--out",
        out,
    ]);
    assert_eq!(ok, 0);
}
